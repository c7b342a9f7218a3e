//! Evaluate the oracle sequence and a briefly trained A2C agent, then write
//! the comparison table, histogram and curve files a report would produce.
//!
//! `cargo run --release --example evaluate_report -- [scenario] [out-dir]`

use std::path::PathBuf;

use dsr_core::baselines::{a2c_train, evaluate, reference_best, A2cConfig, AcPolicy, EvalSettings, FixedPolicy};
use dsr_core::oracle::{enumerate, Metric, OracleConfig};
use dsr_core::{run, Env};

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let path = args.next().unwrap_or_else(|| "crates/core/scenarios/ieee13.scn".into());
    let out = args
        .next()
        .map_or_else(|| std::env::temp_dir().join("dsr-report"), PathBuf::from);
    let env = Env::load(path.as_ref())?;
    let best = reference_best(&env)?;
    let settings = EvalSettings {
        trials: 20,
        ..EvalSettings::default()
    };

    let oracle = enumerate(&env, Metric::FinalPower, &OracleConfig::default())?;
    let fixed = evaluate(&FixedPolicy(oracle.best_sequences[0].clone()), &env, &settings, best)?;

    let trained = a2c_train(
        &env,
        &A2cConfig {
            updates: 300,
            ..A2cConfig::default()
        },
        0,
    )?;
    let policy = AcPolicy {
        net: &trained.net,
        kind: "a2c".into(),
        greedy: false,
    };
    let a2c = evaluate(&policy, &env, &settings, best)?;

    let reports = [fixed, a2c];
    run::ensure_dir(&out)?;
    run::write_text(&out.join("table.csv"), &run::table_csv(&reports))?;
    run::write_text(&out.join("histogram.csv"), &run::histogram_csv(&reports))?;
    run::write_text(
        &out.join("histogram.svg"),
        &run::histogram_svg("Final restored power", &reports),
    )?;
    let curves = vec![("a2c".to_string(), trained.curve)];
    run::write_text(
        &out.join("curves.svg"),
        &run::curves_svg("Average return during training", &curves),
    )?;
    print!("{}", run::table_csv(&reports));
    println!("wrote {}", out.display());
    Ok(())
}
