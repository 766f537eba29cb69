//! Single shared transition buffer feeding all Q-heads. Uniform sampling by
//! default; optional prioritized sampling (sum tree) and n-step rollups.

use crate::env::{Action, Observation};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Buffer capacity and warmup used by the experiments.
pub const REPLAY_CAPACITY: usize = 50_000;
pub const MIN_HISTORY: usize = 500;
/// Priority floor added to absolute TD errors in prioritized mode.
pub const PRIORITY_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct Transition {
    pub obs: Observation,
    pub action: Action,
    pub env_reward: f32,
    /// One exploration-bonus value per bonus signal.
    pub boni: Vec<f32>,
    pub next_obs: Observation,
    pub terminal: bool,
    /// Which policy was acting when this transition was collected.
    pub acting_policy_id: usize,
    /// Episode tag, used to keep n-step rollups within one episode.
    pub episode_id: u64,
}

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("insufficient history: {size} < {min}")]
    InsufficientHistory { size: usize, min: usize },
    #[error("boni length {got} does not match buffer's {want}")]
    BoniLength { got: usize, want: usize },
    #[error("prioritized mode is not enabled")]
    NotPrioritized,
    #[error("n-step window crosses an episode boundary without a terminal")]
    EpisodeBoundary,
    #[error("index out of range")]
    BadIndex,
}

pub struct ReplayBuffer {
    storage: Vec<Transition>,
    capacity: usize,
    /// Total insertions ever; slot of insertion i is i % capacity.
    inserted: u64,
    num_boni: usize,
    min_history: usize,
    priorities: Option<SumTree>,
    priority_exponent: f64,
    max_priority: f64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, num_boni: usize) -> ReplayBuffer {
        ReplayBuffer {
            storage: Vec::with_capacity(capacity.min(4096)),
            capacity,
            inserted: 0,
            num_boni,
            min_history: MIN_HISTORY,
            priorities: None,
            priority_exponent: 1.0,
            max_priority: 1.0,
        }
    }

    pub fn with_min_history(mut self, min_history: usize) -> ReplayBuffer {
        self.min_history = min_history;
        self
    }

    /// Enable prioritized sampling with exponent alpha; new transitions get
    /// the running maximum priority.
    pub fn prioritized(mut self, alpha: f64) -> ReplayBuffer {
        self.priorities = Some(SumTree::new(self.capacity));
        self.priority_exponent = alpha;
        self
    }

    pub fn len(&self) -> usize {
        self.storage.len()
    }

    pub fn is_empty(&self) -> bool {
        self.storage.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn min_history(&self) -> usize {
        self.min_history
    }

    pub fn has_min_history(&self) -> bool {
        self.len() >= self.min_history
    }

    pub fn get(&self, slot: usize) -> Option<&Transition> {
        self.storage.get(slot)
    }

    pub fn add(&mut self, t: Transition) -> Result<(), ReplayError> {
        if t.boni.len() != self.num_boni {
            return Err(ReplayError::BoniLength {
                got: t.boni.len(),
                want: self.num_boni,
            });
        }
        let slot = (self.inserted % self.capacity as u64) as usize;
        if slot == self.storage.len() {
            self.storage.push(t);
        } else {
            self.storage[slot] = t;
        }
        let alpha = self.priority_exponent;
        if let Some(tree) = &mut self.priorities {
            tree.set(slot, self.max_priority.powf(alpha));
        }
        self.inserted += 1;
        Ok(())
    }

    pub fn sample_uniform<'a>(
        &'a self,
        batch_size: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<(usize, &'a Transition)>, ReplayError> {
        if !self.has_min_history() {
            return Err(ReplayError::InsufficientHistory {
                size: self.len(),
                min: self.min_history,
            });
        }
        Ok((0..batch_size)
            .map(|_| {
                let slot = rng.random_range(0..self.storage.len());
                (slot, &self.storage[slot])
            })
            .collect())
    }

    /// Draw slots with probability proportional to priority^alpha and return
    /// max-normalized importance weights (1/(N*P(i)))^beta.
    pub fn sample_prioritized<'a>(
        &'a self,
        batch_size: usize,
        beta: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<(usize, &'a Transition, f64)>, ReplayError> {
        let tree = self.priorities.as_ref().ok_or(ReplayError::NotPrioritized)?;
        if !self.has_min_history() {
            return Err(ReplayError::InsufficientHistory {
                size: self.len(),
                min: self.min_history,
            });
        }
        let n = self.storage.len() as f64;
        let total = tree.total();
        let mut batch = Vec::with_capacity(batch_size);
        let mut max_w = 0.0f64;
        let mut raw = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            let u = rng.random::<f64>() * total;
            let slot = tree.find(u).min(self.storage.len() - 1);
            let p = tree.get(slot) / total;
            let w = (1.0 / (n * p)).powf(beta);
            max_w = max_w.max(w);
            raw.push((slot, w));
        }
        for (slot, w) in raw {
            batch.push((slot, &self.storage[slot], w / max_w));
        }
        Ok(batch)
    }

    /// Update priorities after a training step (absolute TD error + floor).
    pub fn update_priorities(&mut self, slots: &[usize], td_errors: &[f64]) -> Result<(), ReplayError> {
        let alpha = self.priority_exponent;
        let tree = self.priorities.as_mut().ok_or(ReplayError::NotPrioritized)?;
        for (&slot, &err) in slots.iter().zip(td_errors) {
            if slot >= self.storage.len() {
                return Err(ReplayError::BadIndex);
            }
            let p = err.abs() + PRIORITY_FLOOR;
            tree.set(slot, p.powf(alpha));
            self.max_priority = self.max_priority.max(p);
        }
        Ok(())
    }

    /// Accumulate n-step returns starting at `slot`: per reward channel,
    /// sum_{k<m} gamma^k r_{i+k} with m = min(n, steps to terminal). Returns
    /// the discount applied to the bootstrap, the bootstrap observation, and
    /// whether the window ended at a terminal.
    pub fn nstep_rollup(
        &self,
        slot: usize,
        n: usize,
        gamma: f64,
    ) -> Result<NStepRollup, ReplayError> {
        if slot >= self.storage.len() || n == 0 {
            return Err(ReplayError::BadIndex);
        }
        let episode = self.storage[slot].episode_id;
        let mut env_reward = 0.0f64;
        let mut boni = vec![0.0f64; self.num_boni];
        let mut discount = 1.0f64;
        let mut idx = slot;
        let mut steps = 0usize;
        loop {
            let t = &self.storage[idx];
            if t.episode_id != episode {
                return Err(ReplayError::EpisodeBoundary);
            }
            env_reward += discount * t.env_reward as f64;
            for (acc, &b) in boni.iter_mut().zip(&t.boni) {
                *acc += discount * b as f64;
            }
            discount *= gamma;
            steps += 1;
            if t.terminal || steps == n {
                return Ok(NStepRollup {
                    env_reward,
                    boni,
                    bootstrap_discount: discount,
                    next_obs: t.next_obs.clone(),
                    terminal: t.terminal,
                    steps,
                });
            }
            let next = (idx + 1) % self.capacity;
            if next >= self.storage.len() || next == (self.inserted % self.capacity as u64) as usize
            {
                // Ran off the newest transition; truncate the window here.
                return Ok(NStepRollup {
                    env_reward,
                    boni,
                    bootstrap_discount: discount,
                    next_obs: t.next_obs.clone(),
                    terminal: t.terminal,
                    steps,
                });
            }
            idx = next;
        }
    }
}

#[derive(Debug, Clone)]
pub struct NStepRollup {
    pub env_reward: f64,
    pub boni: Vec<f64>,
    /// gamma^m, the factor applied to the bootstrap value.
    pub bootstrap_discount: f64,
    pub next_obs: Observation,
    pub terminal: bool,
    pub steps: usize,
}

/// Binary sum tree over (already alpha-exponentiated) priorities; O(log n)
/// updates and prefix-sum lookups.
#[derive(Debug, Clone)]
struct SumTree {
    /// Implicit complete binary tree; leaves start at `base`.
    nodes: Vec<f64>,
    base: usize,
}

impl SumTree {
    fn new(capacity: usize) -> SumTree {
        let base = capacity.next_power_of_two();
        SumTree {
            nodes: vec![0.0; 2 * base],
            base,
        }
    }

    fn set(&mut self, slot: usize, priority: f64) {
        let mut i = self.base + slot;
        self.nodes[i] = priority;
        while i > 1 {
            i /= 2;
            self.nodes[i] = self.nodes[2 * i] + self.nodes[2 * i + 1];
        }
    }

    fn get(&self, slot: usize) -> f64 {
        self.nodes[self.base + slot]
    }

    fn total(&self) -> f64 {
        self.nodes[1]
    }

    /// Leaf whose cumulative-priority interval contains `u`.
    fn find(&self, mut u: f64) -> usize {
        let mut i = 1usize;
        while i < self.base {
            let left = self.nodes[2 * i];
            if u < left {
                i = 2 * i;
            } else {
                u -= left;
                i = 2 * i + 1;
            }
        }
        i - self.base
    }
}
