//! Multi-head Q-learning: per-reward bootstrap targets, squared TD losses,
//! one combined backward pass over all heads, RMSProp updates and periodic
//! target-network syncs.

use crate::env::Observation;
use crate::nn::{
    cast, copy_parameters, obs_batch, NetworkSpec, NnError, QNetwork, RmsProp, Scalar,
};
use crate::replay::{ReplayBuffer, ReplayError};
use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Discount factor of the task MDP.
pub const GAMMA: f64 = 0.99;
/// Discount used by the exploration heads. Count bonuses decay everywhere as
/// visits accumulate, so at long horizons the exploration Q-value is dominated
/// by a drifting global average that swamps the per-action difference between
/// "towards the novelty frontier" and "away from it". A shorter horizon keeps
/// the Q-surface proportional to the *local* visit-count gradient, which is the
/// signal a greedy exploration policy can actually follow.
pub const BONUS_GAMMA: f64 = 0.9;
/// Target network is refreshed every this many gradient updates. Bootstrapped
/// values travel at most n-step cells backwards per refresh, so this period
/// bounds how fast reward discovered deep in the world propagates to the
/// start; 250 keeps multi-room value chains converging within the run budget.
pub const TARGET_SYNC_PERIOD: u64 = 250;
/// Mini-batch size and environment-steps-per-update cadence.
pub const BATCH_SIZE: usize = 32;
pub const UPDATE_PERIOD: u32 = 4;
/// n-step horizon when the Rainbow-style extensions are enabled.
pub const NSTEP_N: usize = 3;
/// Longer rollup for the exploration heads: the novelty frontier sits many
/// steps past the well-visited region and its bonuses are tiny, so value has
/// to be carried inward in bigger hops for the switching actor to follow it
/// while it is still fresh.
pub const BONUS_NSTEP_N: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadSignal {
    Task,
    /// Index into the transition's bonus vector.
    Bonus(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[serde(rename = "mulex")]
    MuleX,
    Additive,
    EpsilonGreedyOnly,
}

/// Which reward signal each head optimizes, and how.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardSpec {
    pub mode: Mode,
    pub heads: Vec<HeadSignal>,
    /// Task-reward weight in additive mode.
    pub alpha: f64,
    /// Bonus weights in additive mode, one per bonus channel.
    pub betas: Vec<f64>,
}

impl RewardSpec {
    /// Standard MuleX: one task head plus one head per bonus signal.
    pub fn mulex(num_bonus: usize) -> RewardSpec {
        let mut heads = vec![HeadSignal::Task];
        heads.extend((0..num_bonus).map(HeadSignal::Bonus));
        RewardSpec {
            mode: Mode::MuleX,
            heads,
            alpha: 1.0,
            betas: Vec::new(),
        }
    }

    /// MuleX with an explicit head list (e.g. two task heads for the
    /// acting-probability experiment).
    pub fn mulex_heads(heads: Vec<HeadSignal>) -> RewardSpec {
        RewardSpec {
            mode: Mode::MuleX,
            heads,
            alpha: 1.0,
            betas: Vec::new(),
        }
    }

    pub fn additive(alpha: f64, betas: Vec<f64>) -> RewardSpec {
        RewardSpec {
            mode: Mode::Additive,
            heads: vec![HeadSignal::Task],
            alpha,
            betas,
        }
    }

    pub fn epsilon_greedy() -> RewardSpec {
        RewardSpec {
            mode: Mode::EpsilonGreedyOnly,
            heads: vec![HeadSignal::Task],
            alpha: 1.0,
            betas: Vec::new(),
        }
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn validate(&self) -> Result<(), LearnerError> {
        match self.mode {
            Mode::MuleX => {
                if self.heads.len() < 2 {
                    return Err(LearnerError::BadRewardSpec(
                        "mulex mode needs at least two heads",
                    ));
                }
            }
            Mode::Additive | Mode::EpsilonGreedyOnly => {
                if self.heads.len() != 1 {
                    return Err(LearnerError::BadRewardSpec(
                        "additive / epsilon-greedy modes use exactly one head",
                    ));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum LearnerError {
    #[error("invalid reward spec: {0}")]
    BadRewardSpec(&'static str),
    #[error("bonus weights length {betas} does not match bonus channels {boni}")]
    BetaLength { betas: usize, boni: usize },
    #[error("training diverged: {0}")]
    Diverged(&'static str),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Replay(#[from] ReplayError),
}

/// alpha*r + sum_k beta_k * b_k.
pub fn additive_reward(r: f64, boni: &[f32], alpha: f64, betas: &[f64]) -> Result<f64, LearnerError> {
    if boni.len() != betas.len() {
        return Err(LearnerError::BetaLength {
            betas: betas.len(),
            boni: boni.len(),
        });
    }
    Ok(alpha * r + betas.iter().zip(boni).map(|(b, &v)| b * v as f64).sum::<f64>())
}

/// One-step bootstrap target: r + gamma * max_a' Q_target(s', a'), or r alone
/// on terminal transitions.
pub fn dqn_target<S: Scalar>(
    net: &QNetwork<S>,
    head: usize,
    reward: f64,
    next_obs: &Observation,
    terminal: bool,
    gamma: f64,
) -> Result<f64, NnError> {
    if terminal {
        return Ok(reward);
    }
    let q = crate::nn::q_values_single(net, next_obs, head)?;
    let max: f64 = q
        .iter()
        .map(|&v| <f64 as num_traits::NumCast>::from(v).unwrap())
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(reward + gamma * max)
}

/// Rainbow-style extensions: the task head trains from prioritized samples
/// with n-step targets; bonus heads keep standard uniform one-step DQN.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RainbowConfig {
    pub n_step: usize,
    pub priority_exponent: f64,
    pub importance_exponent: f64,
}

impl Default for RainbowConfig {
    fn default() -> Self {
        RainbowConfig {
            n_step: NSTEP_N,
            priority_exponent: 0.6,
            importance_exponent: 0.4,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TrainStats {
    /// Mean squared TD loss summed over heads.
    pub loss: f64,
    pub synced_target: bool,
}

pub struct Learner<S: Scalar> {
    pub online: QNetwork<S>,
    pub target: QNetwork<S>,
    opt: RmsProp<S>,
    reward_spec: RewardSpec,
    gamma: f64,
    bonus_gamma: f64,
    sync_period: u64,
    train_steps: u64,
    rainbow: Option<RainbowConfig>,
}

impl<S: Scalar> Learner<S> {
    pub fn new(
        net_spec: &NetworkSpec,
        reward_spec: RewardSpec,
        learning_rate: f64,
        init_seed: u64,
    ) -> Result<Learner<S>, LearnerError> {
        reward_spec.validate()?;
        if net_spec.num_heads != reward_spec.num_heads() {
            return Err(LearnerError::BadRewardSpec(
                "network heads do not match reward spec heads",
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
        let online = QNetwork::<S>::init(net_spec, &mut rng)?;
        let mut target = QNetwork::<S>::init(net_spec, &mut rng)?;
        copy_parameters(&online, &mut target)?;
        Ok(Learner {
            online,
            target,
            opt: RmsProp::new(learning_rate),
            reward_spec,
            gamma: GAMMA,
            bonus_gamma: BONUS_GAMMA,
            sync_period: TARGET_SYNC_PERIOD,
            train_steps: 0,
            rainbow: None,
        })
    }

    pub fn with_gamma(mut self, gamma: f64) -> Self {
        self.gamma = gamma;
        self
    }

    pub fn with_bonus_gamma(mut self, gamma: f64) -> Self {
        self.bonus_gamma = gamma;
        self
    }

    pub fn with_sync_period(mut self, period: u64) -> Self {
        self.sync_period = period;
        self
    }

    pub fn with_rainbow(mut self, cfg: RainbowConfig) -> Self {
        self.rainbow = Some(cfg);
        self
    }

    pub fn reward_spec(&self) -> &RewardSpec {
        &self.reward_spec
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn train_steps(&self) -> u64 {
        self.train_steps
    }

    pub fn sync_target(&mut self) {
        copy_parameters(&self.online, &mut self.target).expect("identical architectures");
    }

    /// The reward channel head `h` trains on, for a stored transition.
    fn head_reward(&self, head: usize, env_reward: f32, boni: &[f32]) -> Result<f64, LearnerError> {
        match self.reward_spec.mode {
            Mode::Additive => additive_reward(
                env_reward as f64,
                boni,
                self.reward_spec.alpha,
                &self.reward_spec.betas,
            ),
            Mode::EpsilonGreedyOnly => Ok(env_reward as f64),
            Mode::MuleX => Ok(match self.reward_spec.heads[head] {
                HeadSignal::Task => env_reward as f64,
                HeadSignal::Bonus(k) => boni[k] as f64,
            }),
        }
    }

    /// One gradient update on a batch sampled from the shared buffer.
    pub fn train_step(
        &mut self,
        buf: &mut ReplayBuffer,
        batch_size: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<TrainStats, LearnerError> {
        let loss = if self.rainbow.is_some() {
            self.rainbow_update(buf, batch_size, rng)?
        } else {
            self.uniform_update(buf, batch_size, rng)?
        };
        if !loss.is_finite() {
            return Err(LearnerError::Diverged("non-finite loss"));
        }
        self.train_steps += 1;
        let synced = self.train_steps % self.sync_period == 0;
        if synced {
            self.sync_target();
        }
        Ok(TrainStats {
            loss,
            synced_target: synced,
        })
    }

    fn uniform_update(
        &mut self,
        buf: &mut ReplayBuffer,
        batch_size: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<f64, LearnerError> {
        let batch = buf.sample_uniform(batch_size, rng)?;
        let obs: Vec<&Observation> = batch.iter().map(|(_, t)| &t.obs).collect();
        let next: Vec<&Observation> = batch.iter().map(|(_, t)| &t.next_obs).collect();
        let input = obs_batch::<S>(&obs)?;
        let next_input = obs_batch::<S>(&next)?;
        let (q_all, cache) = self.online.forward(&input)?;
        let (tq_all, _) = self.target.forward(&next_input)?;

        let num_heads = self.reward_spec.num_heads();
        let mut head_grads: Vec<Array2<S>> = Vec::with_capacity(num_heads);
        let mut total_loss = 0.0f64;
        for h in 0..num_heads {
            let mut grad = Array2::<S>::zeros((batch_size, self.online.spec().num_actions));
            for (j, (_, t)) in batch.iter().enumerate() {
                let r = self.head_reward(h, t.env_reward, &t.boni)?;
                let target = if t.terminal {
                    r
                } else {
                    let next_max = row_max(&tq_all[h], j);
                    r + self.gamma * next_max
                };
                let a = t.action.index();
                let pred: f64 = num_traits::NumCast::from(q_all[h][[j, a]]).unwrap();
                let err = pred - target;
                total_loss += err * err / batch_size as f64;
                grad[[j, a]] = cast::<S>(2.0 * err / batch_size as f64);
            }
            head_grads.push(grad);
        }
        let grads = self.online.backward(&cache, &head_grads)?;
        let mut params = self.online.param_slices_mut();
        self.opt
            .step(&mut params, &grads)
            .map_err(|_| LearnerError::Diverged("non-finite gradient"))?;
        Ok(total_loss)
    }

    /// Task head: prioritized n-step batch with importance weights; bonus
    /// heads: an independent uniform n-step batch. Two backward passes.
    fn rainbow_update(
        &mut self,
        buf: &mut ReplayBuffer,
        batch_size: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<f64, LearnerError> {
        let rb = self.rainbow.unwrap();
        let num_heads = self.reward_spec.num_heads();
        let num_actions = self.online.spec().num_actions;
        let mut total_loss = 0.0f64;

        // Prioritized n-step pass for the task head (head 0).
        let mut slots = Vec::with_capacity(batch_size);
        let mut td_errors = Vec::with_capacity(batch_size);
        {
            let batch = buf.sample_prioritized(batch_size, rb.importance_exponent, rng)?;
            let rollups: Vec<_> = batch
                .iter()
                .map(|(slot, _, _)| buf.nstep_rollup(*slot, rb.n_step, self.gamma))
                .collect::<Result<_, _>>()?;
            let obs: Vec<&Observation> = batch.iter().map(|(_, t, _)| &t.obs).collect();
            let next: Vec<&Observation> = rollups.iter().map(|r| &r.next_obs).collect();
            let input = obs_batch::<S>(&obs)?;
            let next_input = obs_batch::<S>(&next)?;
            let (q_task, cache) = self.online.forward_towers(&input, &[0])?;
            let (tq_task, _) = self.target.forward_towers(&next_input, &[0])?;
            let mut head_grads: Vec<Array2<S>> =
                vec![Array2::zeros((batch_size, num_actions)); 1];
            for (j, ((slot, t, weight), roll)) in batch.iter().zip(&rollups).enumerate() {
                let target = if roll.terminal {
                    roll.env_reward
                } else {
                    roll.env_reward + roll.bootstrap_discount * row_max(&tq_task[0], j)
                };
                let a = t.action.index();
                let pred: f64 = num_traits::NumCast::from(q_task[0][[j, a]]).unwrap();
                let err = pred - target;
                slots.push(*slot);
                td_errors.push(err);
                total_loss += weight * err * err / batch_size as f64;
                head_grads[0][[j, a]] = cast::<S>(2.0 * weight * err / batch_size as f64);
            }
            let grads = self.online.backward(&cache, &head_grads)?;
            let mut params = self.online.param_slices_mut();
            self.opt
                .step(&mut params, &grads)
                .map_err(|_| LearnerError::Diverged("non-finite gradient"))?;
        }
        buf.update_priorities(&slots, &td_errors)?;

        // Uniform n-step pass for the bonus heads. Count bonuses are dense
        // but tiny, and the novelty frontier sits many steps past the
        // well-visited region; multi-step backups propagate its value inward
        // fast enough for the switching actor to follow it.
        if num_heads > 1 {
            let bonus_heads: Vec<usize> = (1..num_heads).collect();
            let batch = buf.sample_uniform(batch_size, rng)?;
            let rollups: Vec<_> = batch
                .iter()
                .map(|(slot, _)| buf.nstep_rollup(*slot, BONUS_NSTEP_N, self.bonus_gamma))
                .collect::<Result<_, _>>()?;
            let obs: Vec<&Observation> = batch.iter().map(|(_, t)| &t.obs).collect();
            let next: Vec<&Observation> = rollups.iter().map(|r| &r.next_obs).collect();
            let input = obs_batch::<S>(&obs)?;
            let next_input = obs_batch::<S>(&next)?;
            let (q_bonus, cache) = self.online.forward_towers(&input, &bonus_heads)?;
            let (tq_bonus, _) = self.target.forward_towers(&next_input, &bonus_heads)?;
            let mut head_grads: Vec<Array2<S>> =
                vec![Array2::zeros((batch_size, num_actions)); bonus_heads.len()];
            for (hi, &h) in bonus_heads.iter().enumerate() {
                for (j, ((_, t), roll)) in batch.iter().zip(&rollups).enumerate() {
                    let r = match self.reward_spec.heads[h] {
                        HeadSignal::Task => roll.env_reward,
                        HeadSignal::Bonus(k) => roll.boni[k],
                    };
                    let target = if roll.terminal {
                        r
                    } else {
                        r + roll.bootstrap_discount * row_max(&tq_bonus[hi], j)
                    };
                    let a = t.action.index();
                    let pred: f64 = num_traits::NumCast::from(q_bonus[hi][[j, a]]).unwrap();
                    let err = pred - target;
                    total_loss += err * err / batch_size as f64;
                    head_grads[hi][[j, a]] = cast::<S>(2.0 * err / batch_size as f64);
                }
            }
            let grads = self.online.backward(&cache, &head_grads)?;
            let mut params = self.online.param_slices_mut();
            self.opt
                .step(&mut params, &grads)
                .map_err(|_| LearnerError::Diverged("non-finite gradient"))?;
        }
        Ok(total_loss)
    }
}

fn row_max<S: Scalar>(q: &Array2<S>, row: usize) -> f64 {
    q.row(row)
        .iter()
        .map(|&v| <f64 as num_traits::NumCast>::from(v).unwrap())
        .fold(f64::NEG_INFINITY, f64::max)
}
