//! Collect random walks, train the transformer policy and evaluate it
//! greedily against the oracle.
//!
//! `cargo run --release --example train_pidt -- [scenario] [seed] [updates]`

use std::time::Instant;

use dsr_core::dataset::collect_random_walks;
use dsr_core::oracle::{enumerate, Metric, OracleConfig};
use dsr_core::pidt::{infer_episode, sampled_return, target_return, train_with, Mode, PidtConfig};
use dsr_core::Env;

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let path = args.next().unwrap_or_else(|| "crates/core/scenarios/ieee13.scn".into());
    let seed: u64 = args.next().map_or(Ok(0), |s| s.parse())?;
    let env = Env::load(path.as_ref())?;
    let mut cfg = PidtConfig::default();
    if let Some(m) = args.next() {
        cfg.episodes = m.parse()?;
    }
    let best = enumerate(&env, Metric::FinalPower, &OracleConfig::default())?.best_final_power;
    let ds = collect_random_walks(&env, 5000, seed)?;
    let target = target_return(&env);
    println!(
        "{} cells, target return {target:.3}, oracle best {best:.3} kW",
        env.cells.len()
    );

    let started = Instant::now();
    let (model, report) = train_with(&env, &ds, &cfg, seed, |update, model, loss| {
        if (update + 1) % cfg.curve_every == 0 {
            let ep = infer_episode(model, &env, target, Mode::Greedy)?;
            let avg = sampled_return(model, &env, target, cfg.curve_episodes, 0)?;
            println!(
                "update {:>5}  loss {loss:.4}  sampled avg {avg:.1}  greedy return {:.3}  final {:.3} kW  ({:.1?})",
                update + 1,
                ep.total_return,
                ep.final_power,
                started.elapsed()
            );
        }
        Ok(())
    })?;
    let ep = infer_episode(&model, &env, target, Mode::Greedy)?;
    let labels: Vec<String> = ep.actions().iter().map(|a| a.label(&env.cells)).collect();
    println!("final loss {:.4}", report.losses.last().copied().unwrap_or(f64::NAN));
    println!(
        "greedy: {} -> {:.3} kW (optimal: {})",
        labels.join(" "),
        ep.final_power,
        (ep.final_power - best).abs() < 1e-6
    );
    Ok(())
}
