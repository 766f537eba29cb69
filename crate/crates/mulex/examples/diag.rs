//! Scratch diagnostic: watch both heads learn on the desk-scale task.

use mulex::env::{EnvConfig, Variant};
use mulex::harness::{BonusKind, MethodParams, Trial, TrialConfig};

fn main() {
    let mut cfg = TrialConfig::new(
        MethodParams::MuleX { p_task: 0.7, gamma_steps: 0.95 },
        EnvConfig::new(5, Variant::Standard, 0),
        2.5e-4,
        1,
    );
    cfg.iterations = 150;
    cfg.bonus = BonusKind::Oracle;
    let mut trial = Trial::new(cfg).unwrap();
    for iter in 0..150 {
        trial.train_phase().unwrap();
        let task = trial.eval_phase_head(0).unwrap();
        let bonus = trial.eval_phase_head(1).unwrap();
        // env reward mass currently in the buffer
        let n = trial.buffer.len();
        let mut reward_events = 0usize;
        let mut bonus_sum = 0.0f64;
        let mut per_episode: std::collections::BTreeMap<u64, f32> = Default::default();
        for slot in 0..n {
            let t = trial.buffer.get(slot).unwrap();
            if t.env_reward > 0.0 {
                reward_events += 1;
            }
            *per_episode.entry(t.episode_id).or_default() += t.env_reward;
            bonus_sum += t.boni[0] as f64;
        }
        let mut hist = [0usize; 5];
        for (_, r) in &per_episode {
            hist[(*r as usize).min(4)] += 1;
        }
        println!(
            "iter {iter:3}  task_eval {task:.2}  bonus_head_eval {bonus:.2}  \
             buf_reward_events {reward_events}  mean_bonus {:.4}  ep_returns {hist:?}",
            bonus_sum / n as f64
        );
    }
}
