//! Decompose a scenario into node cells and print the cell graph.
//!
//! `cargo run --example cells -- crates/core/scenarios/ieee123.scn`

use dsr_core::grid::Scenario;
use dsr_core::node_cells;

fn main() -> anyhow::Result<()> {
    let path = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "crates/core/scenarios/ieee13.scn".into());
    let scenario = Scenario::from_path(path.as_ref())?;
    let grid = &scenario.grid;
    let cg = node_cells(grid);
    println!(
        "{}: {} buses, {} cells, {} switches",
        scenario.name,
        grid.buses.len(),
        cg.len(),
        cg.switches.len()
    );
    for cell in &cg.cells {
        let buses: Vec<&str> = cell.buses.iter().map(|&b| grid.buses[b].id.as_str()).collect();
        println!(
            "  cell {:>2}  {:>9.3} kW  [{}]",
            cell.id,
            cell.power_kw,
            buses.join(" ")
        );
    }
    for sw in &cg.switches {
        println!("  switch {:<12} cells {} - {}", sw.id, sw.cells.0, sw.cells.1);
    }
    for &(src, cell) in &cg.attachments {
        println!("  source {:<8} in cell {cell}", grid.sources[src].id);
    }
    Ok(())
}
