//! Experiment orchestration: the train/eval trial loop, hyperparameter
//! search, AUC metrics, and the analysis experiments (start-state heatmap,
//! acting-probability ablation, room-size sweep).

use crate::actor::{
    ActorError, Collector, SwitchingConfig, ACT_EPSILON, EPSILON_WARMUP_STEPS, EXPLORE_EPSILON,
};
use crate::bonus::{CountTable, SimHashIndex};
use crate::env::{Env, EnvConfig, EnvError, GameState, Observation, StateKey};
use crate::learner::{Learner, LearnerError, RewardSpec, BATCH_SIZE, UPDATE_PERIOD};
use crate::nn::{NetworkSpec, NnError, QNetwork};
use crate::learner::RainbowConfig;
use crate::replay::{ReplayBuffer, Transition, MIN_HISTORY, REPLAY_CAPACITY};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Undiscounted return of a perfect episode (two keys, bonus, exit).
pub const IDEAL_RETURN: f64 = 4.0;
/// Desk-scale training protocol for the base room size.
pub const DEFAULT_ITERATIONS: u32 = 150;
pub const DEFAULT_TRAIN_STEPS: u32 = 2500;
pub const DEFAULT_EVAL_STEPS: u32 = 1250;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Learner(#[from] LearnerError),
    #[error(transparent)]
    Actor(#[from] ActorError),
    #[error("invalid trial config: {0}")]
    BadConfig(String),
}

/// Method-specific hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MethodParams {
    #[serde(rename = "mulex")]
    MuleX { p_task: f64, gamma_steps: f64 },
    Additive { beta: f64 },
    EpsilonGreedy { epsilon: f64 },
    /// Two heads on the task reward, switching (p1, 1-p1), both with the
    /// same sampled epsilon; isolates the need for each policy to act.
    TwoTaskHeads { p1: f64, gamma_steps: f64, epsilon: f64 },
}

impl MethodParams {
    pub fn name(&self) -> &'static str {
        match self {
            MethodParams::MuleX { .. } => "mulex",
            MethodParams::Additive { .. } => "additive",
            MethodParams::EpsilonGreedy { .. } => "epsilon_greedy",
            MethodParams::TwoTaskHeads { .. } => "two_task_heads",
        }
    }
}

/// Source of the exploration bonus stored with each transition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BonusKind {
    /// Exact visit counts over logical states.
    #[default]
    Oracle,
    /// Pseudocounts over SimHash codes of the rendered frame.
    SimHash,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialConfig {
    pub method: MethodParams,
    pub env: EnvConfig,
    pub learning_rate: f64,
    pub iterations: u32,
    pub train_steps_per_iter: u32,
    pub eval_steps_per_iter: u32,
    pub seed: u64,
    #[serde(default)]
    pub bonus: BonusKind,
    /// Stop training once the mean evaluation return reaches this value.
    #[serde(default)]
    pub stop_at_return: Option<f64>,
    /// Train the task head from prioritized n-step samples (bonus heads stay
    /// uniform one-step). On by default: the task reward is sparse and
    /// stationary, exactly the case prioritization is built for. Off for the
    /// two-task-head experiment, which needs both heads trained identically.
    #[serde(default = "default_true")]
    pub prioritized_task: bool,
}

fn default_true() -> bool {
    true
}

impl TrialConfig {
    pub fn new(method: MethodParams, env: EnvConfig, learning_rate: f64, seed: u64) -> TrialConfig {
        let prioritized_task = !matches!(method, MethodParams::TwoTaskHeads { .. });
        TrialConfig {
            method,
            env,
            learning_rate,
            iterations: DEFAULT_ITERATIONS,
            train_steps_per_iter: DEFAULT_TRAIN_STEPS,
            eval_steps_per_iter: DEFAULT_EVAL_STEPS,
            seed,
            bonus: BonusKind::Oracle,
            stop_at_return: None,
            prioritized_task,
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.env.validate()?;
        if !(self.learning_rate > 0.0) {
            return Err(HarnessError::BadConfig("learning_rate must be > 0".into()));
        }
        match &self.method {
            MethodParams::MuleX { p_task, gamma_steps } => {
                if !(0.0..=1.0).contains(p_task) || !(0.0..1.0).contains(gamma_steps) {
                    return Err(HarnessError::BadConfig(
                        "mulex needs p_task in [0,1], gamma_steps in [0,1)".into(),
                    ));
                }
            }
            MethodParams::Additive { beta } => {
                if *beta < 0.0 {
                    return Err(HarnessError::BadConfig("beta must be >= 0".into()));
                }
            }
            MethodParams::EpsilonGreedy { epsilon } => {
                if !(0.0..=1.0).contains(epsilon) {
                    return Err(HarnessError::BadConfig("epsilon must be in [0,1]".into()));
                }
            }
            MethodParams::TwoTaskHeads {
                p1,
                gamma_steps,
                epsilon,
            } => {
                if !(0.0..=1.0).contains(p1)
                    || !(0.0..1.0).contains(gamma_steps)
                    || !(0.0..=1.0).contains(epsilon)
                {
                    return Err(HarnessError::BadConfig(
                        "two_task_heads needs p1, epsilon in [0,1] and gamma_steps in [0,1)"
                            .into(),
                    ));
                }
            }
        }
        Ok(())
    }

    fn num_bonus_channels(&self) -> usize {
        match self.method {
            MethodParams::MuleX { .. } | MethodParams::Additive { .. } => 1,
            MethodParams::EpsilonGreedy { .. } | MethodParams::TwoTaskHeads { .. } => 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialRecord {
    pub config: TrialConfig,
    /// Mean evaluation return of the primary head per completed iteration.
    pub returns: Vec<f64>,
    pub auc: f64,
    pub normalized_auc: f64,
    pub wall_clock_secs: f64,
    pub diverged: bool,
    /// First iteration (1-based) whose mean eval return reached the
    /// trial's target (stop_at_return, else the ideal return).
    pub first_hit: Option<u32>,
}

impl TrialRecord {
    /// Mean return over the last up-to-5 recorded iterations.
    pub fn final_return(&self) -> f64 {
        let n = self.returns.len();
        if n == 0 {
            return 0.0;
        }
        let tail = &self.returns[n.saturating_sub(5)..];
        tail.iter().sum::<f64>() / tail.len() as f64
    }
}

/// Sum of per-iteration returns.
pub fn auc(curve: &[f64]) -> f64 {
    curve.iter().sum()
}

/// AUC relative to an agent that scores `ideal_return` from iteration one.
/// `iterations` is the configured horizon, so truncated curves count their
/// missing tail as zeros.
pub fn normalized_auc(curve: &[f64], ideal_return: f64, iterations: u32) -> f64 {
    if iterations == 0 {
        return 0.0;
    }
    auc(curve) / (iterations as f64 * ideal_return)
}

enum BonusCounter {
    None,
    Oracle(CountTable),
    SimHash(SimHashIndex),
}

impl BonusCounter {
    fn observe(&mut self, state: &GameState, obs: &Observation) -> Option<f64> {
        match self {
            BonusCounter::None => None,
            BonusCounter::Oracle(t) => Some(t.observe_and_bonus(StateKey::of(state))),
            BonusCounter::SimHash(ix) => Some(ix.observe_and_bonus(&obs.frames[3])),
        }
    }
}

/// One in-flight training run. Train and eval phases are separate methods so
/// callers (and tests) can interleave or inspect state between them.
pub struct Trial {
    cfg: TrialConfig,
    env: Env,
    eval_env: Env,
    pub learner: Learner<f32>,
    pub buffer: ReplayBuffer,
    collector: Collector,
    counter: BonusCounter,
    act_rng: ChaCha8Rng,
    train_rng: ChaCha8Rng,
    obs: Observation,
    episode_id: u64,
    global_step: u64,
    diverged: bool,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl Trial {
    pub fn new(cfg: TrialConfig) -> Result<Trial, HarnessError> {
        cfg.validate()?;
        let num_boni = cfg.num_bonus_channels();
        let (reward_spec, collector_kind) = match &cfg.method {
            MethodParams::MuleX { p_task, gamma_steps } => (
                RewardSpec::mulex(1),
                Some(SwitchingConfig::two_head(*p_task, *gamma_steps)),
            ),
            MethodParams::Additive { beta } => {
                (RewardSpec::additive(1.0, vec![*beta]), None)
            }
            MethodParams::EpsilonGreedy { .. } => (RewardSpec::epsilon_greedy(), None),
            MethodParams::TwoTaskHeads {
                p1, gamma_steps, ..
            } => (
                RewardSpec::mulex_heads(vec![
                    crate::learner::HeadSignal::Task,
                    crate::learner::HeadSignal::Task,
                ]),
                Some(SwitchingConfig {
                    probabilities: vec![*p1, 1.0 - *p1],
                    gamma_steps: *gamma_steps,
                }),
            ),
        };
        let net_spec = NetworkSpec::for_env(&cfg.env, reward_spec.num_heads());
        let mut learner = Learner::<f32>::new(
            &net_spec,
            reward_spec,
            cfg.learning_rate,
            cfg.seed.wrapping_add(0x11),
        )?;
        let rainbow = cfg.prioritized_task.then(RainbowConfig::default);
        if let Some(rb) = rainbow {
            learner = learner.with_rainbow(rb);
        }
        let mut env_cfg = cfg.env.clone();
        env_cfg.seed = cfg.seed.wrapping_add(0x22);
        let mut env = Env::new(env_cfg)?;
        let mut eval_cfg = cfg.env.clone();
        eval_cfg.seed = cfg.seed.wrapping_add(0x33);
        let eval_env = Env::new(eval_cfg)?;

        let mut act_rng = stream_rng(cfg.seed, 1);
        let train_rng = stream_rng(cfg.seed, 2);
        let acting_eps = match &cfg.method {
            MethodParams::EpsilonGreedy { epsilon } => *epsilon,
            MethodParams::TwoTaskHeads { epsilon, .. } => *epsilon,
            _ => ACT_EPSILON,
        };
        let mut collector = match collector_kind {
            Some(switch_cfg) => Collector::switching(switch_cfg, acting_eps, &mut act_rng)?,
            None => Collector::single_head(0, acting_eps),
        }
        .with_warmup(EPSILON_WARMUP_STEPS);
        if matches!(cfg.method, MethodParams::MuleX { .. }) {
            for h in 1..=num_boni {
                collector = collector.with_head_epsilon(h, EXPLORE_EPSILON);
            }
        }
        let counter = match (num_boni, cfg.bonus) {
            (0, _) => BonusCounter::None,
            (_, BonusKind::Oracle) => BonusCounter::Oracle(CountTable::new()),
            (_, BonusKind::SimHash) => {
                BonusCounter::SimHash(SimHashIndex::new(cfg.seed.wrapping_add(0x44)))
            }
        };
        let obs = env.reset();
        Ok(Trial {
            cfg,
            env,
            eval_env,
            learner,
            buffer: {
                let buf = ReplayBuffer::new(REPLAY_CAPACITY, num_boni).with_min_history(MIN_HISTORY);
                match rainbow {
                    Some(rb) => buf.prioritized(rb.priority_exponent),
                    None => buf,
                }
            },
            collector,
            counter,
            act_rng,
            train_rng,
            obs,
            episode_id: 0,
            global_step: 0,
            diverged: false,
        })
    }

    pub fn config(&self) -> &TrialConfig {
        &self.cfg
    }

    pub fn diverged(&self) -> bool {
        self.diverged
    }

    /// Run one training phase: act, store transitions, update every fourth
    /// environment step once the buffer has its warmup history.
    pub fn train_phase(&mut self) -> Result<(), HarnessError> {
        for _ in 0..self.cfg.train_steps_per_iter {
            if self.diverged {
                return Ok(());
            }
            let (action, head) =
                self.collector
                    .act(&self.learner.online, &self.obs, &mut self.act_rng)?;
            let (next_obs, outcome, state) = self.env.step(action)?;
            let boni: Vec<f32> = self
                .counter
                .observe(&state, &next_obs)
                .map(|b| vec![b as f32])
                .unwrap_or_default();
            self.buffer
                .add(Transition {
                    obs: self.obs.clone(),
                    action,
                    env_reward: outcome.reward,
                    boni,
                    next_obs: next_obs.clone(),
                    terminal: outcome.done,
                    acting_policy_id: head,
                    episode_id: self.episode_id,
                })
                .expect("channel count fixed at construction");
            self.obs = if outcome.done {
                self.episode_id += 1;
                self.env.reset()
            } else {
                next_obs
            };
            self.global_step += 1;
            if self.global_step % UPDATE_PERIOD as u64 == 0 && self.buffer.has_min_history() {
                match self
                    .learner
                    .train_step(&mut self.buffer, BATCH_SIZE, &mut self.train_rng)
                {
                    Ok(_) => {}
                    Err(LearnerError::Diverged(_)) => {
                        self.diverged = true;
                        return Ok(());
                    }
                    Err(e) => return Err(e.into()),
                }
            }
        }
        Ok(())
    }

    /// Greedy rollout of one head on the evaluation environment; returns the
    /// mean return over episodes that finished within the step budget.
    /// Touches no training state.
    pub fn eval_phase(&mut self) -> Result<f64, HarnessError> {
        self.eval_phase_head(0)
    }

    pub fn eval_phase_head(&mut self, head: usize) -> Result<f64, HarnessError> {
        let mut obs = self.eval_env.reset();
        let mut episode_return = 0.0f64;
        let mut completed: Vec<f64> = Vec::new();
        for _ in 0..self.cfg.eval_steps_per_iter {
            let action = crate::actor::eval_action(&self.learner.online, &obs, head)?;
            let (next_obs, outcome, _) = self.eval_env.step(action)?;
            episode_return += outcome.reward as f64;
            if outcome.done {
                completed.push(episode_return);
                episode_return = 0.0;
                obs = self.eval_env.reset();
            } else {
                obs = next_obs;
            }
        }
        if completed.is_empty() {
            Ok(0.0)
        } else {
            Ok(completed.iter().sum::<f64>() / completed.len() as f64)
        }
    }
}

/// Run a full trial: alternate train and eval phases, track the return
/// curve, stop early on divergence or on reaching the target return.
pub fn run_trial(cfg: &TrialConfig) -> Result<TrialRecord, HarnessError> {
    run_trial_full(cfg).map(|(record, _)| record)
}

/// Like run_trial, but also hands back the trained online network so the
/// caller can checkpoint or analyze it.
pub fn run_trial_full(cfg: &TrialConfig) -> Result<(TrialRecord, QNetwork<f32>), HarnessError> {
    let start = std::time::Instant::now();
    let mut trial = Trial::new(cfg.clone())?;
    let target = cfg.stop_at_return;
    let mut returns = Vec::with_capacity(cfg.iterations as usize);
    let mut first_hit = None;
    let hit_threshold = target.unwrap_or(IDEAL_RETURN) - 1e-9;
    for iter in 0..cfg.iterations {
        trial.train_phase()?;
        if trial.diverged() {
            break;
        }
        let mean_return = trial.eval_phase()?;
        returns.push(mean_return);
        if first_hit.is_none() && mean_return >= hit_threshold {
            first_hit = Some(iter + 1);
            if target.is_some() {
                break;
            }
        }
    }
    let auc_value = auc(&returns);
    let record = TrialRecord {
        config: cfg.clone(),
        auc: auc_value,
        normalized_auc: normalized_auc(&returns, IDEAL_RETURN, cfg.iterations),
        returns,
        wall_clock_secs: start.elapsed().as_secs_f64(),
        diverged: trial.diverged(),
        first_hit,
    };
    Ok((record, trial.learner.online))
}

// ---------------------------------------------------------------------------
// Hyperparameter search
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodKind {
    #[serde(rename = "mulex")]
    MuleX,
    Additive,
    EpsilonGreedy,
}

impl MethodKind {
    pub fn name(self) -> &'static str {
        match self {
            MethodKind::MuleX => "mulex",
            MethodKind::Additive => "additive",
            MethodKind::EpsilonGreedy => "epsilon_greedy",
        }
    }
}

pub fn sample_log_uniform(lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> f64 {
    let u: f64 = rng.random();
    (lo.ln() + u * (hi.ln() - lo.ln())).exp()
}

/// Draw one hyperparameter point from the method's search ranges.
pub fn sample_method_params(kind: MethodKind, rng: &mut ChaCha8Rng) -> MethodParams {
    match kind {
        MethodKind::MuleX => MethodParams::MuleX {
            p_task: rng.random_range(0.5..0.9),
            gamma_steps: rng.random_range(0.8..0.99),
        },
        MethodKind::Additive => MethodParams::Additive {
            beta: sample_log_uniform(0.01, 100.0, rng),
        },
        MethodKind::EpsilonGreedy => MethodParams::EpsilonGreedy {
            epsilon: sample_log_uniform(0.001, 0.5, rng),
        },
    }
}

pub fn sample_learning_rate(rng: &mut ChaCha8Rng) -> f64 {
    sample_log_uniform(1e-5, 1e-3, rng)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchSpec {
    pub method: MethodKind,
    pub env: EnvConfig,
    pub iterations: u32,
    pub train_steps_per_iter: u32,
    pub eval_steps_per_iter: u32,
    pub n_trials: usize,
    pub seeds_per_trial: usize,
    pub seed: u64,
    #[serde(default)]
    pub bonus: BonusKind,
    #[serde(default)]
    pub stop_at_return: Option<f64>,
}

/// The (hyperparameter point, repetition) pairs a search will run, in order.
pub fn search_configs(spec: &SearchSpec) -> Vec<TrialConfig> {
    let mut configs = Vec::with_capacity(spec.n_trials * spec.seeds_per_trial);
    for trial in 0..spec.n_trials {
        let mut rng = stream_rng(spec.seed, 100 + trial as u64);
        let method = sample_method_params(spec.method, &mut rng);
        let lr = sample_learning_rate(&mut rng);
        for rep in 0..spec.seeds_per_trial {
            configs.push(TrialConfig {
                method: method.clone(),
                env: spec.env.clone(),
                learning_rate: lr,
                iterations: spec.iterations,
                train_steps_per_iter: spec.train_steps_per_iter,
                eval_steps_per_iter: spec.eval_steps_per_iter,
                seed: spec
                    .seed
                    .wrapping_mul(0x9e37_79b9_7f4a_7c15)
                    .wrapping_add((trial * spec.seeds_per_trial + rep) as u64 + 1),
                bonus: spec.bonus,
                stop_at_return: spec.stop_at_return,
                prioritized_task: true,
            });
        }
    }
    configs
}

/// Random hyperparameter search; trials run in parallel over the rayon pool.
pub fn random_search(spec: &SearchSpec) -> Result<Vec<TrialRecord>, HarnessError> {
    search_configs(spec)
        .par_iter()
        .map(run_trial)
        .collect::<Result<Vec<_>, _>>()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepSummary {
    /// Mean return curve over all records (missing tails count as zero).
    pub mean_curve: Vec<f64>,
    /// Mean curve of the top-k records by AUC.
    pub topk_curve: Vec<f64>,
    pub k: usize,
    /// Normalized AUC per record: the violin-plot data.
    pub normalized_aucs: Vec<f64>,
    pub min_normalized_auc: f64,
    pub median_normalized_auc: f64,
    pub max_normalized_auc: f64,
}

/// Top-k size: 10 for full-size sweeps, top 5% (at least 1) otherwise.
pub fn top_k_size(n: usize) -> usize {
    if n >= 200 {
        10
    } else {
        (n / 20).max(1)
    }
}

fn mean_curve(records: &[&TrialRecord], iterations: usize) -> Vec<f64> {
    let mut curve = vec![0.0f64; iterations];
    if records.is_empty() {
        return curve;
    }
    for r in records {
        for (i, &v) in r.returns.iter().enumerate() {
            if i < iterations {
                curve[i] += v;
            }
        }
    }
    for v in &mut curve {
        *v /= records.len() as f64;
    }
    curve
}

pub fn summarize(records: &[TrialRecord], iterations: usize) -> SweepSummary {
    let all: Vec<&TrialRecord> = records.iter().collect();
    let mut by_auc = all.clone();
    by_auc.sort_by(|a, b| b.auc.partial_cmp(&a.auc).unwrap_or(std::cmp::Ordering::Equal));
    let k = top_k_size(records.len());
    let top: Vec<&TrialRecord> = by_auc.into_iter().take(k).collect();
    let normalized: Vec<f64> = records.iter().map(|r| r.normalized_auc).collect();
    let mut sorted = normalized.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = if sorted.is_empty() {
        0.0
    } else if sorted.len() % 2 == 1 {
        sorted[sorted.len() / 2]
    } else {
        (sorted[sorted.len() / 2 - 1] + sorted[sorted.len() / 2]) / 2.0
    };
    SweepSummary {
        mean_curve: mean_curve(&all, iterations),
        topk_curve: mean_curve(&top, iterations),
        k,
        min_normalized_auc: sorted.first().copied().unwrap_or(0.0),
        median_normalized_auc: median,
        max_normalized_auc: sorted.last().copied().unwrap_or(0.0),
        normalized_aucs: normalized,
    }
}

// ---------------------------------------------------------------------------
// Analysis experiments
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeatmapCell {
    pub state: GameState,
    /// Steps the greedy task policy needed; episode cap if it never arrived.
    pub steps: u32,
    pub reached: bool,
    /// BFS-optimal steps from this state, when the goal is reachable.
    pub optimal: Option<u32>,
}

/// Roll the greedy task policy from every all-flags-set start state and
/// count steps to the exit.
pub fn heatmap_experiment(
    net: &QNetwork<f32>,
    cfg: &EnvConfig,
) -> Result<Vec<HeatmapCell>, HarnessError> {
    let starts = crate::env::heatmap_start_states(cfg)?;
    let mut env = Env::new(cfg.clone())?;
    let mut cells = Vec::with_capacity(starts.len());
    for start in starts {
        let optimal = crate::env::shortest_path_steps(cfg, &start)?;
        let mut obs = env.set_state(start.clone())?;
        let mut steps = 0u32;
        let mut reached = false;
        while steps < cfg.episode_cap {
            let action = crate::actor::eval_action(net, &obs, 0)?;
            let (next_obs, outcome, _) = env.step(action)?;
            steps += 1;
            if outcome.done {
                reached = outcome.reward > 0.0;
                break;
            }
            obs = next_obs;
        }
        cells.push(HeatmapCell {
            state: start,
            steps: if reached { steps } else { cfg.episode_cap },
            reached,
            optimal,
        });
    }
    Ok(cells)
}

/// One trial per acting probability p1, two task heads each; the reported
/// curve is head 0's greedy evaluation return.
pub fn offpolicy_experiment(
    p1_values: &[f64],
    base: &TrialConfig,
) -> Result<Vec<(f64, TrialRecord)>, HarnessError> {
    let (gamma_steps, epsilon) = match base.method {
        MethodParams::TwoTaskHeads {
            gamma_steps,
            epsilon,
            ..
        } => (gamma_steps, epsilon),
        _ => (0.95, 0.1),
    };
    p1_values
        .par_iter()
        .map(|&p1| {
            let mut cfg = base.clone();
            cfg.method = MethodParams::TwoTaskHeads {
                p1,
                gamma_steps,
                epsilon,
            };
            run_trial(&cfg).map(|r| (p1, r))
        })
        .collect()
}

/// Episode cap and per-iteration train steps for a room size, following the
/// w=5 baseline scaled linearly.
pub fn protocol_for_room(w: usize) -> (u32, u32) {
    ((100 * w) as u32, (500 * w) as u32)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoomSizeEntry {
    pub room_size: usize,
    pub method: MethodKind,
    pub auc: f64,
    /// AUC divided by the median epsilon-greedy AUC at the same room size.
    pub normalized_vs_eps_median: f64,
    pub seed: u64,
}

/// For each room size, run every method with the scaled protocol and report
/// AUCs normalized by the epsilon-greedy median at that size.
pub fn room_size_sweep(
    methods: &[MethodKind],
    w_values: &[usize],
    base: &SearchSpec,
) -> Result<Vec<RoomSizeEntry>, HarnessError> {
    let mut out = Vec::new();
    for &w in w_values {
        let (cap, train_steps) = protocol_for_room(w);
        let mut per_method: Vec<(MethodKind, Vec<TrialRecord>)> = Vec::new();
        for &m in methods {
            let mut spec = base.clone();
            spec.method = m;
            spec.env.room_size = w;
            spec.env.episode_cap = cap;
            spec.train_steps_per_iter = train_steps;
            spec.eval_steps_per_iter = train_steps / 2;
            spec.seed = base.seed.wrapping_add(w as u64 * 1000 + m as u64);
            per_method.push((m, random_search(&spec)?));
        }
        // Median epsilon-greedy AUC at this room size.
        let mut eps_aucs: Vec<f64> = per_method
            .iter()
            .filter(|(m, _)| *m == MethodKind::EpsilonGreedy)
            .flat_map(|(_, rs)| rs.iter().map(|r| r.auc))
            .collect();
        eps_aucs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let eps_median = if eps_aucs.is_empty() {
            0.0
        } else if eps_aucs.len() % 2 == 1 {
            eps_aucs[eps_aucs.len() / 2]
        } else {
            (eps_aucs[eps_aucs.len() / 2 - 1] + eps_aucs[eps_aucs.len() / 2]) / 2.0
        };
        for (m, records) in per_method {
            for r in records {
                let normalized = if eps_median > 0.0 {
                    r.auc / eps_median
                } else if r.auc > 0.0 {
                    f64::INFINITY
                } else {
                    1.0
                };
                out.push(RoomSizeEntry {
                    room_size: w,
                    method: m,
                    auc: r.auc,
                    normalized_vs_eps_median: normalized,
                    seed: r.config.seed,
                });
            }
        }
    }
    Ok(out)
}
