mod common;

use common::{param_gradcheck, random_walk_states, scenario};
use dsr_autodiff::{Graph, Tensor};
use dsr_core::baselines::{
    a2c_loss, a2c_train, evaluate, ppo_loss, ppo_train, A2cBatch, A2cConfig, ActorCriticNet, EvalSettings, FixedPolicy,
    PpoBatch, PpoConfig,
};
use dsr_core::oracle::{enumerate, Metric, OracleConfig};
use dsr_core::{Action, Env};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// States, masks and legal actions taken along a few random walks.
fn batch(env: &Env, walks: usize, seed: u64) -> (Vec<f64>, Vec<bool>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut states, mut legal, mut actions) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..walks {
        for s in random_walk_states(env, &mut rng).iter().take(env.horizon()) {
            states.extend(env.encode_state(s));
            legal.extend(env.action_mask(s));
            actions.push(env.legal_actions(s).choose(&mut rng).unwrap().index());
        }
    }
    (states, legal, actions)
}

fn values_and_log_probs(
    net: &ActorCriticNet,
    states: &[f64],
    legal: &[bool],
    actions: &[usize],
) -> (Vec<f64>, Vec<f64>) {
    let mut g = Graph::new();
    let out = net.forward(&mut g, states, legal).unwrap();
    let lp = g.gather(out.log_probs, actions).unwrap();
    (g.value(out.values).data().to_vec(), g.value(lp).data().to_vec())
}

fn grads(store: &dsr_autodiff::ParamStore, g: &mut Graph, loss: dsr_autodiff::Var) -> Vec<Tensor> {
    g.backward(loss).unwrap().for_store(store)
}

#[test]
fn zero_clip_ppo_step_follows_the_a2c_gradient() {
    let env = Env::load(&scenario("ieee13.scn")).unwrap();
    let net = ActorCriticNet::for_env(&env, 16, 3);
    let (states, legal, actions) = batch(&env, 4, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let returns: Vec<f64> = actions.iter().map(|_| rng.gen_range(-2.0..2.0)).collect();
    let (values, old) = values_and_log_probs(&net, &states, &legal, &actions);
    let a2c_cfg = A2cConfig {
        entropy_coef: 0.0,
        value_coef: 0.5,
        ..A2cConfig::default()
    };
    let ppo_cfg = PpoConfig {
        clip: 0.0,
        epochs: 1,
        entropy_coef: 0.0,
        value_coef: 0.5,
        ..PpoConfig::default()
    };
    let a2c_batch = A2cBatch {
        states: states.clone(),
        legal: legal.clone(),
        actions: actions.clone(),
        returns: returns.clone(),
    };
    let ppo_batch = PpoBatch {
        states,
        legal,
        actions,
        old_log_probs: old,
        advantages: returns.iter().zip(&values).map(|(r, v)| r - v).collect(),
        returns,
    };
    let mut g = Graph::new();
    let l = a2c_loss(&mut g, &net, &a2c_batch, &a2c_cfg).unwrap();
    let ga = grads(&net.store, &mut g, l);
    let mut g = Graph::new();
    let l = ppo_loss(&mut g, &net, &ppo_batch, &ppo_cfg).unwrap();
    let gp = grads(&net.store, &mut g, l);
    for ((id, name, _), (a, p)) in net.store.iter().zip(ga.iter().zip(&gp)) {
        let dot = a.data().iter().zip(p.data()).fold(0.0, |acc, (x, y)| acc + x * y);
        let norm = a.data().iter().fold(0.0, |acc, x| acc + x * x);
        assert!(norm == 0.0 || dot > 0.0, "{name} ({id:?}): opposite directions");
        for (x, y) in a.data().iter().zip(p.data()) {
            assert_eq!(x.signum(), y.signum(), "{name}: sign differs");
            assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()), "{name}: {x} vs {y}");
        }
    }
}

#[test]
fn unit_ratio_surrogate_is_unclipped() {
    let env = Env::load(&scenario("ieee13.scn")).unwrap();
    let net = ActorCriticNet::for_env(&env, 16, 5);
    let (states, legal, actions) = batch(&env, 3, 7);
    let (_, old) = values_and_log_probs(&net, &states, &legal, &actions);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let advantages: Vec<f64> = actions.iter().map(|_| rng.gen_range(-1.0..1.0)).collect();
    let b = PpoBatch {
        states,
        legal,
        returns: vec![0.0; actions.len()],
        actions,
        old_log_probs: old,
        advantages: advantages.clone(),
    };
    let cfg = |clip| PpoConfig {
        clip,
        value_coef: 0.0,
        entropy_coef: 0.0,
        ..PpoConfig::default()
    };
    let run = |clip| {
        let mut g = Graph::new();
        let l = ppo_loss(&mut g, &net, &b, &cfg(clip)).unwrap();
        let v = g.value(l).data()[0];
        (v, grads(&net.store, &mut g, l))
    };
    let (clipped, g1) = run(0.2);
    let (wide, g2) = run(1e6);
    assert_eq!(clipped, wide);
    assert_eq!(g1, g2);
    let mean_adv = advantages.iter().fold(0.0, |a, x| a + x) / advantages.len() as f64;
    assert!((clipped + mean_adv).abs() <= 1e-12);
}

#[test]
fn ppo_loss_passes_gradcheck() {
    let env = Env::load(&scenario("chain3.scn")).unwrap();
    let net = ActorCriticNet::for_env(&env, 6, 9);
    let (states, legal, actions) = batch(&env, 3, 2);
    let (values, old) = values_and_log_probs(&net, &states, &legal, &actions);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let returns: Vec<f64> = actions.iter().map(|_| rng.gen_range(-1.0..1.0)).collect();
    let adv: Vec<f64> = returns.iter().zip(&values).map(|(r, v)| r - v).collect();
    let worst = param_gradcheck(&net.store, 1e-5, |store, g| {
        let mut n = net.clone();
        n.store = store.clone();
        let b = PpoBatch {
            states: states.clone(),
            legal: legal.clone(),
            actions: actions.clone(),
            old_log_probs: vec![0.0; actions.len()],
            advantages: adv.clone(),
            returns: returns.clone(),
        };
        let cfg = PpoConfig {
            clip: 1e6,
            ..PpoConfig::default()
        };
        ppo_loss(g, &n, &b, &cfg).unwrap()
    });
    assert!(worst <= 1e-4, "ppo surrogate: {worst}");

    let b = PpoBatch {
        states,
        legal,
        actions,
        old_log_probs: old,
        advantages: adv,
        returns,
    };
    let worst = param_gradcheck(&net.store, 1e-5, |store, g| {
        let mut n = net.clone();
        n.store = store.clone();
        ppo_loss(g, &n, &b, &PpoConfig::default()).unwrap()
    });
    assert!(worst <= 1e-4, "clipped ppo: {worst}");
}

#[test]
fn training_is_deterministic_per_seed() {
    let env = Env::load(&scenario("ieee13.scn")).unwrap();
    let a2c = A2cConfig {
        updates: 30,
        ..A2cConfig::default()
    };
    let a = a2c_train(&env, &a2c, 4).unwrap();
    let b = a2c_train(&env, &a2c, 4).unwrap();
    assert_eq!(a.curve, b.curve);
    assert_eq!(a.net, b.net);
    let ppo = PpoConfig {
        iterations: 5,
        ..PpoConfig::default()
    };
    let a = ppo_train(&env, &ppo, 4).unwrap();
    let b = ppo_train(&env, &ppo, 4).unwrap();
    assert_eq!(a.curve, b.curve);
    assert_eq!(a.net, b.net);
    assert_eq!(a.curve.last().unwrap().update, 5 * ppo.epochs);
}

#[test]
fn forced_scenario_curve_is_flat_from_the_first_update() {
    let env = Env::load(&scenario("two-bus.scn")).unwrap();
    assert_eq!(env.action_count(), 1);
    let forced = env.rollout(&vec![Action::NoOp; env.horizon()]).unwrap();
    let ret = forced.iter().fold(0.0, |a, t| a + t.reward);
    let out = a2c_train(
        &env,
        &A2cConfig {
            updates: 5,
            ..A2cConfig::default()
        },
        0,
    )
    .unwrap();
    assert!(out.curve.iter().all(|p| p.avg_return == ret));
}

#[test]
fn oracle_action_gains_probability_early() {
    let env = Env::load(&scenario("chain3.scn")).unwrap();
    let best = enumerate(&env, Metric::Return, &OracleConfig::default()).unwrap();
    let first = best.best_sequences[0][0].index();
    let s = env.reset().unwrap();
    let (state, legal) = (env.encode_state(&s), env.action_mask(&s));
    let cfg = A2cConfig {
        entropy_coef: 0.0,
        n_steps: None,
        episodes_per_update: 16,
        ..A2cConfig::default()
    };
    let probs: Vec<f64> = (1..=8)
        .map(|u| {
            let out = a2c_train(
                &env,
                &A2cConfig {
                    updates: u,
                    ..cfg.clone()
                },
                1,
            )
            .unwrap();
            out.net.policy(&state, &legal).unwrap().0[first]
        })
        .collect();
    for w in probs.windows(2) {
        assert!(w[1] > w[0], "{probs:?}");
    }
}

#[test]
fn replayed_oracle_is_always_optimal() {
    let env = Env::load(&scenario("ieee13.scn")).unwrap();
    let best = enumerate(&env, Metric::FinalPower, &OracleConfig::default()).unwrap();
    let policy = FixedPolicy(best.best_sequences[0].clone());
    let settings = EvalSettings {
        trials: 12,
        ..EvalSettings::default()
    };
    let r = evaluate(&policy, &env, &settings, best.best_final_power).unwrap();
    assert_eq!(r.optimal_count, 12);
    assert_eq!(r.std_final_power, 0.0);
    assert_eq!(r.recompute(r.records.clone()), r);
}
