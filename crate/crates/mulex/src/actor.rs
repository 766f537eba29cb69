//! Action selection: epsilon-greedy over a Q-head, and the stochastic
//! policy-switching scheme (categorical head choice, geometric segment
//! durations) that drives MuleX data collection.

use crate::env::{Action, Observation};
use crate::nn::{NnError, QNetwork, Scalar};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Exploration rate applied on top of the acting head for switching and
/// additive collectors.
pub const ACT_EPSILON: f64 = 0.01;

/// Acting steps over which a warmed-up collector anneals its exploration
/// rate linearly from 1 down to the configured epsilon. Zero-initialized
/// Q-heads are constant, so purely greedy acting with lowest-index
/// tie-breaking would pin an untrained agent against the nearest wall; the
/// warmup feeds the buffer a broad state mix before the policies take over.
pub const EPSILON_WARMUP_STEPS: u64 = 25_000;

/// Exploration rate while a bonus head is the acting head. Bonus-head
/// Q-surfaces chase a moving novelty frontier and are chronically stale in
/// fresh territory; a heavy dither on top keeps those segments sweeping the
/// frontier instead of looping on the stale argmax.
pub const EXPLORE_EPSILON: f64 = 0.25;

#[derive(Debug, Error)]
pub enum ActorError {
    #[error("switching probabilities must be non-negative and sum to 1 (got sum {0})")]
    BadProbabilities(f64),
    #[error("segment-duration decay must lie in [0, 1), got {0}")]
    BadDecay(f64),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Greedy action over a Q-row with lowest-index tie-breaking; with
/// probability epsilon, uniform over all actions instead.
pub fn epsilon_greedy(q: &[f64], epsilon: f64, rng: &mut ChaCha8Rng) -> Action {
    if epsilon > 0.0 && rng.random::<f64>() < epsilon {
        return Action::from_index(rng.random_range(0..Action::ALL.len()));
    }
    greedy(q)
}

/// Lowest-index argmax.
pub fn greedy(q: &[f64]) -> Action {
    let mut best = 0usize;
    for (i, &v) in q.iter().enumerate().skip(1) {
        if v > q[best] {
            best = i;
        }
    }
    Action::from_index(best)
}

/// Categorical head probabilities plus the geometric-duration decay: after a
/// head is drawn, it stays active for d steps with P(d) = (1-g) g^(d-1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwitchingConfig {
    pub probabilities: Vec<f64>,
    pub gamma_steps: f64,
}

impl SwitchingConfig {
    /// Task head plus one bonus head: (p_task, 1 - p_task).
    pub fn two_head(p_task: f64, gamma_steps: f64) -> SwitchingConfig {
        SwitchingConfig {
            probabilities: vec![p_task, 1.0 - p_task],
            gamma_steps,
        }
    }

    pub fn validate(&self) -> Result<(), ActorError> {
        let sum: f64 = self.probabilities.iter().sum();
        if self.probabilities.iter().any(|&p| p < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(ActorError::BadProbabilities(sum));
        }
        if !(0.0..1.0).contains(&self.gamma_steps) {
            return Err(ActorError::BadDecay(self.gamma_steps));
        }
        Ok(())
    }

    /// Expected segment duration, 1 / (1 - gamma_steps).
    pub fn mean_duration(&self) -> f64 {
        1.0 / (1.0 - self.gamma_steps)
    }

    pub fn sample_head(&self, rng: &mut ChaCha8Rng) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, &p) in self.probabilities.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        self.probabilities.len() - 1
    }

    /// Geometric duration on {1, 2, ...} by inversion: smallest d with
    /// 1 - g^d > u.
    pub fn sample_duration(&self, rng: &mut ChaCha8Rng) -> u64 {
        if self.gamma_steps == 0.0 {
            return 1;
        }
        let u: f64 = rng.random();
        // u in [0,1): d = floor(ln(1-u)/ln g) + 1; use u directly (same law).
        let d = (u.ln() / self.gamma_steps.ln()).floor() as u64 + 1;
        d.max(1)
    }
}

/// Tracks the currently acting head and how many steps remain in its
/// segment. Segments deliberately carry across episode boundaries.
#[derive(Debug, Clone)]
pub struct SwitchingState {
    active_head: usize,
    remaining: u64,
}

impl SwitchingState {
    /// Draws the first segment immediately.
    pub fn new(cfg: &SwitchingConfig, rng: &mut ChaCha8Rng) -> SwitchingState {
        let active_head = cfg.sample_head(rng);
        let remaining = cfg.sample_duration(rng);
        SwitchingState {
            active_head,
            remaining,
        }
    }

    pub fn active_head(&self) -> usize {
        self.active_head
    }

    /// Consume one step; when the segment is exhausted, draw the next head
    /// and duration. Returns the head acting on *this* step.
    pub fn step(&mut self, cfg: &SwitchingConfig, rng: &mut ChaCha8Rng) -> usize {
        if self.remaining == 0 {
            self.active_head = cfg.sample_head(rng);
            self.remaining = cfg.sample_duration(rng);
        }
        let head = self.active_head;
        self.remaining -= 1;
        head
    }
}

/// Data-collection policy: either switching among heads or always a single
/// head, with an epsilon on top (optionally annealed from 1 over a warmup).
pub struct Collector {
    kind: CollectorKind,
    epsilon: f64,
    /// Per-head overrides of the final epsilon.
    head_epsilons: Vec<(usize, f64)>,
    warmup_steps: u64,
    acted: u64,
}

enum CollectorKind {
    Switching {
        cfg: SwitchingConfig,
        state: SwitchingState,
    },
    SingleHead {
        head: usize,
    },
}

impl Collector {
    pub fn switching(cfg: SwitchingConfig, epsilon: f64, rng: &mut ChaCha8Rng) -> Result<Collector, ActorError> {
        cfg.validate()?;
        let state = SwitchingState::new(&cfg, rng);
        Ok(Collector {
            kind: CollectorKind::Switching { cfg, state },
            epsilon,
            head_epsilons: Vec::new(),
            warmup_steps: 0,
            acted: 0,
        })
    }

    pub fn single_head(head: usize, epsilon: f64) -> Collector {
        Collector {
            kind: CollectorKind::SingleHead { head },
            epsilon,
            head_epsilons: Vec::new(),
            warmup_steps: 0,
            acted: 0,
        }
    }

    /// Anneal epsilon linearly from 1 down to the configured value over the
    /// first `steps` acting steps.
    pub fn with_warmup(mut self, steps: u64) -> Collector {
        self.warmup_steps = steps;
        self
    }

    /// Use a different final epsilon while `head` is the acting head.
    pub fn with_head_epsilon(mut self, head: usize, epsilon: f64) -> Collector {
        self.head_epsilons.retain(|(h, _)| *h != head);
        self.head_epsilons.push((head, epsilon));
        self
    }

    fn final_epsilon(&self, head: usize) -> f64 {
        self.head_epsilons
            .iter()
            .find(|(h, _)| *h == head)
            .map(|(_, e)| *e)
            .unwrap_or(self.epsilon)
    }

    /// Exploration rate for the upcoming acting step, were `head` to act.
    pub fn current_epsilon(&self, head: usize) -> f64 {
        let fin = self.final_epsilon(head);
        if self.acted >= self.warmup_steps {
            return fin;
        }
        let frac = 1.0 - self.acted as f64 / self.warmup_steps as f64;
        fin + (1.0 - fin) * frac
    }

    /// Choose the acting head for this step, then act epsilon-greedily on
    /// that head's Q-values. Returns the action and the head id that acted.
    pub fn act<S: Scalar>(
        &mut self,
        net: &QNetwork<S>,
        obs: &Observation,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Action, usize), ActorError> {
        let head = match &mut self.kind {
            CollectorKind::Switching { cfg, state } => state.step(cfg, rng),
            CollectorKind::SingleHead { head } => *head,
        };
        let epsilon = self.current_epsilon(head);
        self.acted += 1;
        // Skip the forward pass when the step is going to be random anyway.
        if epsilon > 0.0 && rng.random::<f64>() < epsilon {
            let a = Action::from_index(rng.random_range(0..Action::ALL.len()));
            return Ok((a, head));
        }
        let q = q_row(net, obs, head)?;
        Ok((greedy(&q), head))
    }
}

/// Greedy evaluation action on one head (no exploration).
pub fn eval_action<S: Scalar>(
    net: &QNetwork<S>,
    obs: &Observation,
    head: usize,
) -> Result<Action, ActorError> {
    let q = q_row(net, obs, head)?;
    Ok(greedy(&q))
}

fn q_row<S: Scalar>(net: &QNetwork<S>, obs: &Observation, head: usize) -> Result<Vec<f64>, NnError> {
    let q = crate::nn::q_values_single(net, obs, head)?;
    Ok(q.iter()
        .map(|&v| <f64 as num_traits::NumCast>::from(v).unwrap())
        .collect())
}
