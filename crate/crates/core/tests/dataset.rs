mod common;

use std::fs;

use common::{random_env, scenario};
use dsr_core::dataset::{
    collect_random_walks, sample_minibatch_seeded, trajectory_from_actions, Dataset, MANIFEST_FILE, TRAJECTORIES_FILE,
};
use dsr_core::{Action, Env};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Return-to-go by summing each suffix from its start, left to right.
fn naive_rtg(rewards: &[f64]) -> Vec<f64> {
    (0..rewards.len())
        .map(|i| rewards[i..].iter().fold(0.0, |a, r| a + r))
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(60))]

    #[test]
    fn labels_telescope_and_match_suffix_sums(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let env = random_env(&mut rng, 5);
        let ds = collect_random_walks(&env, 20, seed).unwrap();
        ds.verify_returns().unwrap();
        ds.verify_replay(&env).unwrap();
        for t in &ds.trajectories {
            prop_assert_eq!(t.steps.len(), env.horizon());
            let rewards: Vec<f64> = t.steps.iter().map(|s| s.reward).collect();
            let naive = naive_rtg(&rewards);
            for (s, n) in t.steps.iter().zip(naive) {
                prop_assert!((s.rtg - n).abs() <= 1e-9 * (1.0 + n.abs()));
            }
            prop_assert_eq!(t.steps.last().unwrap().rtg, t.steps.last().unwrap().reward);
            prop_assert_eq!(t.steps[0].rtg, t.total_return());
        }
    }
}

#[test]
fn collection_is_deterministic_and_episode_local() {
    let env = Env::load(&scenario("ieee13.scn")).unwrap();
    let a = collect_random_walks(&env, 50, 11).unwrap();
    let b = collect_random_walks(&env, 50, 11).unwrap();
    assert_eq!(a, b);
    let short = collect_random_walks(&env, 10, 11).unwrap();
    assert_eq!(short.trajectories[..], a.trajectories[..10]);
    let other = collect_random_walks(&env, 50, 12).unwrap();
    assert_ne!(a.trajectories, other.trajectories);
}

#[test]
fn save_load_round_trips_bytes() {
    let env = Env::load(&scenario("ieee13.scn")).unwrap();
    let ds = collect_random_walks(&env, 40, 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("a");
    let second = dir.path().join("b");
    ds.save(&first).unwrap();
    let loaded = Dataset::load(&first).unwrap();
    assert_eq!(loaded, ds);
    loaded.save(&second).unwrap();
    for file in [MANIFEST_FILE, TRAJECTORIES_FILE] {
        assert_eq!(
            fs::read(first.join(file)).unwrap(),
            fs::read(second.join(file)).unwrap()
        );
    }
}

#[test]
fn tampered_datasets_are_rejected() {
    let env = Env::load(&scenario("ieee13.scn")).unwrap();
    let ds = collect_random_walks(&env, 10, 5).unwrap();

    let mut bad_reward = ds.clone();
    bad_reward.trajectories[3].steps[1].reward += 1.0;
    assert!(bad_reward.verify_replay(&env).is_err());
    assert!(bad_reward.verify_returns().is_err());

    let mut bad_rtg = ds.clone();
    bad_rtg.trajectories[0].steps[0].rtg = f64::from_bits(bad_rtg.trajectories[0].steps[0].rtg.to_bits() + 1);
    assert!(bad_rtg.verify_returns().is_err());
    bad_rtg.verify_replay(&env).unwrap();

    let mut bad_state = ds.clone();
    bad_state.trajectories[1].steps[2].state[0] += 0.5;
    assert!(bad_state.verify_replay(&env).is_err());
}

#[test]
fn fixed_sequences_label_like_walks() {
    let env = Env::load(&scenario("chain3.scn")).unwrap();
    let seq = vec![Action::Close(0), Action::Close(1), Action::NoOp][..env.horizon()].to_vec();
    let t = trajectory_from_actions(&env, &seq, 0, 0).unwrap();
    let rewards: Vec<f64> = env.rollout(&seq).unwrap().iter().map(|tr| tr.reward).collect();
    assert_eq!(t.steps.iter().map(|s| s.reward).collect::<Vec<_>>(), rewards);
    assert_eq!(t.steps.iter().map(|s| s.rtg).collect::<Vec<_>>(), naive_rtg(&rewards));
    assert!(trajectory_from_actions(&env, &seq[..1], 0, 0).is_err());
}

#[test]
fn unit_window_picks_are_uniform() {
    let env = Env::load(&scenario("ieee13.scn")).unwrap();
    let ds = collect_random_walks(&env, 8, 0).unwrap();
    let horizon = env.horizon();
    let bins = ds.len() * horizon;
    let n = 40_000;
    let mut counts = vec![0usize; bins];
    let mb = sample_minibatch_seeded(&ds, n, 1, 17).unwrap();
    for &(ti, end) in &mb.picks {
        counts[ti * horizon + end] += 1;
    }
    let p = 1.0 / bins as f64;
    let mean = n as f64 * p;
    let sigma = (n as f64 * p * (1.0 - p)).sqrt();
    for (bin, &c) in counts.iter().enumerate() {
        assert!(
            (c as f64 - mean).abs() <= 3.0 * sigma,
            "bin {bin}: {c} vs {mean} ± {sigma}"
        );
    }
}

#[test]
fn horizon_windows_are_whole_trajectories() {
    let env = Env::load(&scenario("ieee13.scn")).unwrap();
    let ds = collect_random_walks(&env, 30, 2).unwrap();
    let k = env.horizon();
    let mb = sample_minibatch_seeded(&ds, 64, k, 9).unwrap();
    assert!(mb.mask.iter().all(|&m| m));
    for (row, &(ti, end)) in mb.picks.iter().enumerate() {
        assert_eq!(end, k - 1);
        let steps = &ds.trajectories[ti].steps;
        for j in 0..k {
            assert_eq!(mb.timesteps[row * k + j], j);
            assert_eq!(mb.actions[row * k + j], steps[j].action);
            assert_eq!(mb.rtg[row * k + j], steps[j].rtg);
        }
    }
}
