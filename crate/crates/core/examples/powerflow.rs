//! Follow the oracle's best switching sequence and print the squared bus
//! voltages of every energized island after each step.
//!
//! `cargo run --example powerflow -- [scenario]`

use std::collections::BTreeSet;

use dsr_core::oracle::{enumerate, Metric, OracleConfig};
use dsr_core::powerflow::{solve, voltage_penalty, IslandSpec};
use dsr_core::Env;

fn main() -> anyhow::Result<()> {
    let path = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "crates/core/scenarios/ieee13.scn".into());
    let env = Env::load(path.as_ref())?;
    let best = enumerate(&env, Metric::FinalPower, &OracleConfig::default())?;
    let mut s = env.reset()?;
    for t in 0..=env.horizon() {
        let islands: Vec<IslandSpec> = s
            .frontiers
            .iter()
            .enumerate()
            .filter(|(_, f)| !f.is_empty())
            .map(|(source, f)| {
                let mut cells = f.clone();
                cells.sort_unstable();
                IslandSpec { source, cells }
            })
            .collect();
        let closed: BTreeSet<usize> = s
            .switch_closed
            .iter()
            .enumerate()
            .filter_map(|(k, &c)| c.then_some(k))
            .collect();
        let sol = solve(&env.grid, &env.cells, &islands, &closed)?;
        println!("step {t}: {:.3} kW restored, penalty {:.6}", s.restored_kw, s.penalty);
        for island in &sol.islands {
            let lowest = island
                .buses
                .iter()
                .map(|b| (sol.h[b], *b))
                .min_by(|a, b| a.0.total_cmp(&b.0))
                .expect("islands contain their source bus");
            println!(
                "  {:<10} {:>3} buses {:>10.3} kW  lowest H {:.5} at {}{}",
                env.grid.sources[island.source].id,
                island.buses.len(),
                island.load_kw,
                lowest.0,
                env.grid.buses[lowest.1].id,
                if island.feasible { "" } else { "  (over capacity)" }
            );
        }
        let violating = voltage_penalty(&sol, &env.grid).values().filter(|&&p| p > 0.0).count();
        if violating > 0 {
            println!("  {violating} loads outside the voltage band");
        }
        if t < env.horizon() {
            s = env.step(&s, best.best_sequences[0][t])?.state;
        }
    }
    Ok(())
}
