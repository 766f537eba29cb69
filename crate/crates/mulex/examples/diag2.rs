//! Scratch diagnostic: manual acting loop mirroring the trial, tracking room
//! occupancy and how episodes end.

use mulex::actor::{Collector, SwitchingConfig, ACT_EPSILON, EPSILON_WARMUP_STEPS, EXPLORE_EPSILON};
use mulex::bonus::CountTable;
use mulex::env::{Env, EnvConfig, StateKey, Variant};
use mulex::harness::IDEAL_RETURN;
use mulex::learner::{Learner, RainbowConfig, RewardSpec};
use mulex::nn::NetworkSpec;
use mulex::replay::{ReplayBuffer, Transition, MIN_HISTORY, REPLAY_CAPACITY};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let seed = 1u64;
    let env_cfg = EnvConfig::new(5, Variant::Standard, seed.wrapping_add(0x22));
    let spec = NetworkSpec::for_env(&env_cfg, 2);
    let rb = RainbowConfig::default();
    let mut learner =
        Learner::<f32>::new(&spec, RewardSpec::mulex(1), 2.5e-4, seed.wrapping_add(0x11))
            .unwrap()
            .with_rainbow(rb);
    let mut buffer = ReplayBuffer::new(REPLAY_CAPACITY, 1)
        .with_min_history(MIN_HISTORY)
        .prioritized(rb.priority_exponent);
    let mut act_rng = ChaCha8Rng::seed_from_u64(seed);
    act_rng.set_stream(1);
    let mut train_rng = ChaCha8Rng::seed_from_u64(seed);
    train_rng.set_stream(2);
    let mut collector = Collector::switching(
        SwitchingConfig::two_head(0.7, 0.95),
        ACT_EPSILON,
        &mut act_rng,
    )
    .unwrap()
    .with_warmup(EPSILON_WARMUP_STEPS)
    .with_head_epsilon(1, std::env::var("EXPL_EPS").map(|v| v.parse().unwrap()).unwrap_or(EXPLORE_EPSILON));
    let mut counter = CountTable::new();
    let mut env = Env::new(env_cfg.clone()).unwrap();
    let mut obs = env.reset();
    let w = 5usize;
    let mut episode = 0u64;
    let mut step = 0u64;

    for iter in 0..150 {
        let mut ll = [0u64; 2]; // lower-left room steps, per head
        let mut lr = [0u64; 2]; // lower-right room steps
        let mut passage = 0u64;
        let mut exits = 0u64;
        let mut caps = 0u64;
        let mut bonus_grabs = 0u64;
        for _ in 0..2500 {
            let (action, head) = collector.act(&learner.online, &obs, &mut act_rng).unwrap();
            let (next_obs, outcome, state) = env.step(action).unwrap();
            let (r, c) = state.agent_cell;
            if r >= w + 2 {
                if c <= w {
                    ll[head] += 1;
                } else if c >= w + 2 {
                    lr[head] += 1;
                }
                if state.agent_cell == (w + 1 + (w + 1) / 2, w + 1) {
                    passage += 1;
                }
            }
            if outcome.reward > 0.0 && state.bonus_collected && r == 2 * w + 1 && c == 2 * w + 1 {
                bonus_grabs += 1;
                println!(
                    "      grab at step {step} head {head} flags {:?}",
                    state.flags()
                );
            }
            let bonus = counter.observe_and_bonus(StateKey::of(&state)) as f32;
            buffer
                .add(Transition {
                    obs: obs.clone(),
                    action,
                    env_reward: outcome.reward,
                    boni: vec![bonus],
                    next_obs: next_obs.clone(),
                    terminal: outcome.done,
                    acting_policy_id: head,
                    episode_id: episode,
                })
                .unwrap();
            obs = if outcome.done {
                if state.steps_elapsed >= env_cfg.episode_cap {
                    caps += 1;
                } else {
                    exits += 1;
                }
                episode += 1;
                env.reset()
            } else {
                next_obs
            };
            step += 1;
            if step % 4 == 0 && buffer.has_min_history() {
                learner.train_step(&mut buffer, 32, &mut train_rng).unwrap();
            }
        }
        if iter % 10 == 9 {
            let mut eval_env =
                Env::new(EnvConfig::new(5, Variant::Standard, seed.wrapping_add(0x33))).unwrap();
            let mut eval_rng = ChaCha8Rng::seed_from_u64(999);
            let mut eval_col = Collector::single_head(0, 0.0);
            let mut rets = Vec::new();
            for _ in 0..5 {
                let mut o = eval_env.reset();
                let mut ret = 0.0f32;
                loop {
                    let (a, _) = eval_col.act(&learner.online, &o, &mut eval_rng).unwrap();
                    let (no, out, _) = eval_env.step(a).unwrap();
                    ret += out.reward;
                    if out.done {
                        break;
                    }
                    o = no;
                }
                rets.push(ret);
            }
            println!("      eval@{iter}: {rets:?}");
        }
        if iter % 5 == 0 {
            // Probe: one step left of the bonus corner, everything but the
            // bonus collected. Action 3 (Right) should dominate for a head
            // that wants the corner.
            let mut probe = Env::new(env_cfg.clone()).unwrap();
            let layout = probe.layout().clone();
            let mut s = probe.state().clone();
            s.agent_cell = (2 * w + 1, 2 * w);
            s.has_key1 = true;
            s.has_key2 = true;
            s.door1_open = true;
            s.door2_open = true;
            let _ = &layout;
            probe.set_state(s).unwrap();
            let po = probe.observation().clone();
            let qt = mulex::nn::q_values_single(&learner.online, &po, 0).unwrap();
            let qe = mulex::nn::q_values_single(&learner.online, &po, 1).unwrap();
            println!(
                "iter {iter:3}  LL task/expl {}/{}  LR task/expl {}/{}  passage {passage}  \
                 exits {exits}  caps {caps}  bonus_grabs {bonus_grabs}  \
                 q_task@corner-1 {:?}  q_expl@corner-1 {:?}",
                ll[0], ll[1], lr[0], lr[1],
                qt.iter().map(|v| (v * 100.0).round() / 100.0).collect::<Vec<_>>(),
                qe.iter().map(|v| (v * 100.0).round() / 100.0).collect::<Vec<_>>()
            );
        }
        let _ = IDEAL_RETURN;
    }
}
