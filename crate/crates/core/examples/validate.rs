//! Parse and validate scenario files, printing a summary or the error.
//!
//! `cargo run --example validate -- crates/core/scenarios/*.scn`

use dsr_core::grid::Scenario;
use dsr_core::Env;

fn main() {
    let paths: Vec<String> = std::env::args().skip(1).collect();
    let paths = if paths.is_empty() {
        vec!["crates/core/scenarios/ieee13.scn".to_string()]
    } else {
        paths
    };
    let mut failed = false;
    for path in &paths {
        match Scenario::from_path(path.as_ref()).and_then(Env::new) {
            Ok(env) => {
                let g = &env.grid;
                println!(
                    "{path}: {} buses, {} lines ({} switchable), {} loads = {:.3} kW, {} sources, {} cells, horizon {}",
                    g.buses.len(),
                    g.lines.len(),
                    g.switch_count(),
                    g.loads.len(),
                    g.total_load_kw(),
                    g.sources.len(),
                    env.cells.len(),
                    env.horizon()
                );
            }
            Err(e) => {
                failed = true;
                println!("{path}: {e}");
            }
        }
    }
    // a scenario that parses but describes an impossible network
    let bad = "[bus]\na\nb\n[source]\ns bus=a kind=substation capacity=100\n";
    println!("inline example: {}", dsr_core::parse_grid(bad).unwrap_err());
    if failed {
        std::process::exit(1);
    }
}
