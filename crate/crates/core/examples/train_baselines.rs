//! Train the A2C and PPO baselines and evaluate them against the oracle.
//!
//! `cargo run --release --example train_baselines -- [scenario] [seeds]`

use std::time::Instant;

use dsr_core::baselines::{
    a2c_train, evaluate, ppo_train, reference_best, A2cConfig, AcPolicy, AcTrainOutput, EvalSettings, PpoConfig,
};
use dsr_core::curve::updates_to_fraction;
use dsr_core::Env;

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let path = args.next().unwrap_or_else(|| "crates/core/scenarios/ieee13.scn".into());
    let seeds: u64 = args.next().map_or(Ok(3), |s| s.parse())?;
    let env = Env::load(path.as_ref())?;
    let best = reference_best(&env)?;
    let settings = EvalSettings {
        trials: 20,
        ..EvalSettings::default()
    };
    for agent in ["a2c", "ppo"] {
        for seed in 0..seeds {
            let started = Instant::now();
            let out: AcTrainOutput = match agent {
                "a2c" => a2c_train(&env, &A2cConfig::default(), seed)?,
                _ => ppo_train(&env, &PpoConfig::default(), seed)?,
            };
            let greedy = evaluate(
                &AcPolicy {
                    net: &out.net,
                    kind: agent.into(),
                    greedy: true,
                },
                &env,
                &settings,
                best,
            )?;
            let sampled = evaluate(
                &AcPolicy {
                    net: &out.net,
                    kind: agent.into(),
                    greedy: false,
                },
                &env,
                &settings,
                best,
            )?;
            println!(
                "{agent} seed {seed}: 90% of plateau at update {:?}, last avg return {:.1}; greedy final {:.3} kW; sampled optimal {}/{} ({:.1?})",
                updates_to_fraction(&out.curve, 0.9, 10, 0.1),
                out.curve.last().map_or(0.0, |p| p.avg_return),
                greedy.mean_final_power,
                sampled.optimal_count,
                sampled.trials,
                started.elapsed(),
            );
        }
    }
    Ok(())
}
