//! Exhaustive optimum of a small scenario under both metrics.
//!
//! `cargo run --release --example oracle -- crates/core/scenarios/ieee13.scn`

use std::time::Instant;

use dsr_core::oracle::{enumerate, Metric, OracleConfig};
use dsr_core::Env;

fn main() -> anyhow::Result<()> {
    let path = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "crates/core/scenarios/ieee13.scn".into());
    let env = Env::load(path.as_ref())?;
    for metric in [Metric::Return, Metric::FinalPower] {
        let started = Instant::now();
        let result = enumerate(&env, metric, &OracleConfig::default())?;
        println!(
            "{metric:?}: best return {:.3}, best final power {:.3} kW, {} optimal sequence(s){}, {} states, {:.2?}",
            result.best_return,
            result.best_final_power,
            result.best_sequences.len(),
            if result.truncated { " (truncated)" } else { "" },
            result.states_visited,
            started.elapsed(),
        );
        for seq in result.best_sequences.iter().take(5) {
            let labels: Vec<String> = seq.iter().map(|a| a.label(&env.cells)).collect();
            println!("  {}", labels.join(" -> "));
        }
    }
    Ok(())
}
