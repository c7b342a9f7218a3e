mod common;

use std::collections::{BTreeMap, BTreeSet};

use common::{brute_force_legal, random_env, random_walk_states, scenario};
use dsr_core::{Action, Env, Error, RestorationState};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn legal_actions_match_brute_force(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let env = random_env(&mut rng, 6);
        for s in random_walk_states(&env, &mut rng) {
            prop_assert_eq!(env.legal_actions(&s), brute_force_legal(&env, &s));
        }
    }

    #[test]
    fn reward_decomposes_and_power_only_drops_on_shutdown(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let env = random_env(&mut rng, 6);
        let states = random_walk_states(&env, &mut rng);
        for pair in states.windows(2) {
            let (s, next) = (&pair[0], &pair[1]);
            let a = (0..env.action_count())
                .map(Action::from_index)
                .find(|&a| env.step(s, a).map(|t| t.state == *next).unwrap_or(false))
                .expect("some action reproduces the walk");
            let tr = env.step(s, a).unwrap();
            let dt = env.cfg.delta_t;
            prop_assert_eq!(tr.reward_active, next.restored_kw * dt);
            prop_assert_eq!(tr.reward_voltage, -next.penalty * dt);
            prop_assert_eq!(tr.reward, tr.reward_active + env.cfg.w_p * tr.reward_voltage);
            if tr.shutdown.is_none() {
                prop_assert!(next.restored_kw >= s.restored_kw);
            }
        }
    }
}

#[test]
fn chain_reset_offers_noop_and_first_switch() {
    let env = Env::load(&scenario("chain3.scn")).unwrap();
    let s = env.reset().unwrap();
    assert_eq!(env.legal_actions(&s), vec![Action::NoOp, Action::Close(0)]);
    assert_eq!(env.legal_actions(&s), brute_force_legal(&env, &s));
}

#[test]
fn step_is_pure() {
    let env = Env::load(&scenario("ieee13.scn")).unwrap();
    let s = env.reset().unwrap();
    let before = s.clone();
    let a = env.step(&s, Action::Close(0)).unwrap();
    let b = env.step(&s, Action::Close(0)).unwrap();
    assert_eq!(s, before);
    assert_eq!(a, b);
}

#[test]
fn closing_a_closed_switch_is_illegal() {
    let env = Env::load(&scenario("chain3.scn")).unwrap();
    let s = env.step(&env.reset().unwrap(), Action::Close(0)).unwrap().state;
    assert!(matches!(
        env.step(&s, Action::Close(0)),
        Err(Error::IllegalAction { .. })
    ));
    assert!(matches!(
        env.step(&s, Action::Close(9)),
        Err(Error::IllegalAction { .. })
    ));
}

/// Every state reachable within the horizon, keyed by topology.
fn reachable(env: &Env) -> BTreeMap<(Vec<Option<usize>>, Vec<bool>, Vec<bool>), RestorationState> {
    let mut seen = BTreeMap::new();
    let mut layer = vec![env.reset().unwrap()];
    for _ in 0..=env.horizon() {
        let mut next = Vec::new();
        for s in layer {
            if seen.insert(s.topology_key(), s.clone()).is_none() && s.step < env.horizon() {
                for a in env.legal_actions(&s) {
                    next.push(env.step(&s, a).unwrap().state);
                }
            }
        }
        layer = next;
    }
    seen
}

#[test]
fn encoding_is_injective_on_reachable_13_bus_states() {
    let mut env = Env::load(&scenario("ieee13.scn")).unwrap();
    env.cfg.horizon = env.cells.switches.len();
    let states = reachable(&env);
    assert!(states.len() > 8);
    let mut codes = BTreeSet::new();
    for s in states.values() {
        let code: Vec<u64> = env.encode_state(s).iter().map(|x| x.to_bits()).collect();
        assert_eq!(code.len(), env.state_len());
        assert!(codes.insert(code), "two distinct states share an encoding");
    }
}

#[test]
fn restricted_closure_trips_the_dg() {
    let env = Env::load(&scenario("ieee123.scn")).unwrap();
    assert!(env.cfg.dg_shutdown_enabled);
    let dg = env.grid.sources.iter().position(|s| s.id == "dg250").unwrap();
    // grow dg250 inside its allowed cells until a closure leaves them
    let mut layer = vec![env.reset().unwrap()];
    let mut found = None;
    for _ in 0..4 {
        let mut next = Vec::new();
        for s in &layer {
            for a in env.legal_actions(s) {
                let tr = env.step(s, a).unwrap();
                if tr.shutdown == Some(dg) {
                    found.get_or_insert((s.clone(), tr));
                } else if tr.state.frontiers[dg].len() > s.frontiers[dg].len() {
                    next.push(tr.state);
                }
            }
        }
        layer = next;
    }
    let tripped = found.expect("a restricted closure is reachable for dg250");
    let (before, tr) = tripped;
    let next = &tr.state;
    assert!(next.tripped[dg]);
    assert!(next.frontiers[dg].is_empty());
    assert!(next.cell_source.iter().all(|c| *c != Some(dg)));
    for (k, sw) in env.cells.switches.iter().enumerate() {
        let touches_dg_island =
            before.frontiers[dg].contains(&sw.cells.0) && before.frontiers[dg].contains(&sw.cells.1);
        if touches_dg_island {
            assert!(!next.switch_closed[k]);
        }
    }
    assert!(
        next.restored_kw < before.restored_kw
            || before.frontiers[dg].iter().all(|&c| env.cells.cells[c].power_kw == 0.0)
    );
    assert_eq!(tr.reward_active, next.restored_kw * env.cfg.delta_t);
    // the tripped source never comes back
    for a in env.legal_actions(next) {
        assert!(env.step(next, a).unwrap().state.frontiers[dg].is_empty());
    }
}
