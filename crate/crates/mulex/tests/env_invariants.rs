//! Property suite for the gridworld family: determinism, bounded returns,
//! monotone progress flags, palette discipline, episode caps, and the
//! conservation rules of the teleport variant.

use mulex::env::{palette, Action, Env, EnvConfig, Frame, GameState, Variant, TILE};
use proptest::prelude::*;

fn arb_variant(w: usize) -> BoxedStrategy<Variant> {
    if w == 10 {
        prop_oneof![
            Just(Variant::Standard),
            Just(Variant::TeleportWalls),
            Just(Variant::Ghosts),
            Just(Variant::Textured),
        ]
        .boxed()
    } else {
        prop_oneof![
            Just(Variant::Standard),
            Just(Variant::TeleportWalls),
            Just(Variant::Textured),
        ]
        .boxed()
    }
}

fn arb_config() -> impl Strategy<Value = EnvConfig> {
    prop_oneof![Just(5usize), Just(10usize)]
        .prop_flat_map(|w| (Just(w), arb_variant(w), any::<u64>()))
        .prop_map(|(w, variant, seed)| {
            let mut cfg = EnvConfig::new(w, variant, seed);
            // Short caps keep each case cheap; cap behavior itself is
            // asserted below.
            cfg.episode_cap = 120;
            cfg
        })
}

fn arb_actions(len: usize) -> impl Strategy<Value = Vec<Action>> {
    proptest::collection::vec((0usize..4).prop_map(Action::from_index), 1..len)
}

/// Every pixel must come from the fixed palette (textured tiles scale the
/// palette value but keep zero for empty space, so check the logical grid
/// via the untextured config where applicable).
fn assert_palette(frame: &Frame) {
    const ALLOWED: [f32; 9] = [
        palette::EMPTY,
        palette::WALL,
        palette::DOOR_CLOSED,
        palette::TELEPORT_OBJECT,
        palette::KEY,
        palette::BONUS,
        palette::EXIT,
        palette::GHOST,
        palette::AGENT,
    ];
    for &v in frame.pixels.iter() {
        assert!(
            ALLOWED.iter().any(|&a| (a - v).abs() < 1e-6),
            "pixel value {v} outside palette"
        );
    }
}

fn flags_le(a: [bool; 5], b: [bool; 5]) -> bool {
    a.iter().zip(b.iter()).all(|(x, y)| !x || *y)
}

fn run_episode(cfg: &EnvConfig, actions: &[Action]) -> (Vec<f32>, Vec<GameState>, bool) {
    let mut env = Env::new(cfg.clone()).unwrap();
    env.reset();
    let mut rewards = Vec::new();
    let mut states = Vec::new();
    let mut done = false;
    for &a in actions {
        let (_, outcome, state) = env.step(a).unwrap();
        rewards.push(outcome.reward);
        states.push(state);
        if outcome.done {
            done = true;
            break;
        }
    }
    (rewards, states, done)
}

proptest! {
    #![proptest_config(ProptestConfig {
        cases: 24,
        .. ProptestConfig::default()
    })]

    #[test]
    fn identical_seeds_and_actions_replay_identically(
        cfg in arb_config(),
        actions in arb_actions(150),
    ) {
        let mut env_a = Env::new(cfg.clone()).unwrap();
        let mut env_b = Env::new(cfg.clone()).unwrap();
        let obs_a = env_a.reset();
        let obs_b = env_b.reset();
        prop_assert_eq!(&obs_a, &obs_b);
        for &a in &actions {
            let (oa, ra, sa) = env_a.step(a).unwrap();
            let (ob, rb, sb) = env_b.step(a).unwrap();
            prop_assert_eq!(ra.reward, rb.reward);
            prop_assert_eq!(ra.done, rb.done);
            prop_assert_eq!(&sa, &sb);
            prop_assert_eq!(&oa, &ob);
            if ra.done {
                break;
            }
        }
    }

    #[test]
    fn rewards_are_unit_events_and_returns_bounded(
        cfg in arb_config(),
        actions in arb_actions(150),
    ) {
        let (rewards, _, _) = run_episode(&cfg, &actions);
        let mut total = 0.0f32;
        for r in rewards {
            prop_assert!(r == 0.0 || r == 1.0, "reward {r}");
            total += r;
        }
        prop_assert!((0.0..=4.0).contains(&total), "return {total}");
    }

    #[test]
    fn progress_flags_are_monotone_within_an_episode(
        cfg in arb_config(),
        actions in arb_actions(150),
    ) {
        let (_, states, _) = run_episode(&cfg, &actions);
        for pair in states.windows(2) {
            prop_assert!(
                flags_le(pair[0].flags(), pair[1].flags()),
                "flags regressed: {:?} -> {:?}",
                pair[0].flags(),
                pair[1].flags()
            );
        }
    }

    #[test]
    fn episodes_respect_the_step_cap(
        cfg in arb_config(),
        seed_actions in arb_actions(8),
    ) {
        // Pad with a cycle so the episode always reaches the cap unless it
        // terminates by reward.
        let mut env = Env::new(cfg.clone()).unwrap();
        env.reset();
        let mut steps = 0u32;
        'outer: loop {
            for &a in &seed_actions {
                let (_, outcome, state) = env.step(a).unwrap();
                steps += 1;
                prop_assert!(state.steps_elapsed <= cfg.episode_cap);
                if outcome.done {
                    break 'outer;
                }
                prop_assert!(steps < cfg.episode_cap, "episode exceeded cap");
            }
        }
        prop_assert!(steps <= cfg.episode_cap);
    }

    #[test]
    fn agent_is_always_on_a_traversable_cell(
        cfg in arb_config(),
        actions in arb_actions(150),
    ) {
        let mut env = Env::new(cfg.clone()).unwrap();
        env.reset();
        for &a in &actions {
            let (_, outcome, state) = env.step(a).unwrap();
            prop_assert!(
                !env.layout().is_wall(state.agent_cell),
                "agent inside a wall at {:?}",
                state.agent_cell
            );
            if outcome.done {
                break;
            }
        }
    }

    #[test]
    fn frames_use_only_palette_values(
        cfg in arb_config(),
        actions in arb_actions(60),
    ) {
        // Textured frames multiply tile patterns into the palette; check the
        // logical palette on the untextured variants only.
        prop_assume!(cfg.variant != Variant::Textured);
        let mut env = Env::new(cfg.clone()).unwrap();
        let obs = env.reset();
        assert_palette(&obs.frames[3]);
        for &a in &actions {
            let (obs, outcome, _) = env.step(a).unwrap();
            assert_palette(&obs.frames[3]);
            if outcome.done {
                break;
            }
        }
    }

    #[test]
    fn exactly_one_agent_pixel_in_the_playfield(
        cfg in arb_config(),
        actions in arb_actions(60),
    ) {
        prop_assume!(cfg.variant == Variant::Standard);
        let n = 2 * cfg.room_size + 3;
        let mut env = Env::new(cfg.clone()).unwrap();
        env.reset();
        for &a in &actions {
            let (obs, outcome, state) = env.step(a).unwrap();
            let frame = &obs.frames[3];
            let mut agents = Vec::new();
            for r in 0..n {
                for c in 0..n {
                    if frame.pixels[[r, c]] == palette::AGENT {
                        agents.push((r, c));
                    }
                }
            }
            prop_assert_eq!(&agents, &vec![state.agent_cell]);
            if outcome.done {
                break;
            }
        }
    }

    #[test]
    fn textured_frames_are_tile_expansions(
        seed in any::<u64>(),
        actions in arb_actions(40),
    ) {
        // Texturing changes rendering only: dynamics match the standard
        // variant step for step.
        let mut plain_cfg = EnvConfig::new(5, Variant::Standard, seed);
        plain_cfg.episode_cap = 120;
        let mut tex_cfg = plain_cfg.clone();
        tex_cfg.variant = Variant::Textured;
        let mut plain = Env::new(plain_cfg).unwrap();
        let mut tex = Env::new(tex_cfg.clone()).unwrap();
        plain.reset();
        tex.reset();
        let (rows, cols) = Env::frame_shape(&tex_cfg);
        for &a in &actions {
            let (obs_t, out_t, state_t) = tex.step(a).unwrap();
            let (_, out_p, state_p) = plain.step(a).unwrap();
            prop_assert_eq!(out_t.reward, out_p.reward);
            prop_assert_eq!(out_t.done, out_p.done);
            prop_assert_eq!(&state_t, &state_p);
            prop_assert_eq!(obs_t.frames[3].pixels.dim(), (rows, cols));
            prop_assert_eq!(rows % TILE, 0);
            if out_t.done {
                break;
            }
        }
    }

    #[test]
    fn teleport_walls_conserve_progress(
        seed in any::<u64>(),
        actions in arb_actions(150),
    ) {
        let mut cfg = EnvConfig::new(5, Variant::TeleportWalls, seed);
        cfg.episode_cap = 120;
        let (_, states, _) = run_episode(&cfg, &actions);
        for pair in states.windows(2) {
            // A world-side change never resets flags.
            if pair[0].world_side != pair[1].world_side {
                prop_assert!(flags_le(pair[0].flags(), pair[1].flags()));
            }
        }
    }
}
