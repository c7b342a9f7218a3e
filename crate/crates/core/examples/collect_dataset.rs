//! Collect random-walk trajectories, save them, load them back and verify
//! labels and replay.
//!
//! `cargo run --release --example collect_dataset -- [scenario] [episodes] [out-dir]`

use std::path::PathBuf;

use dsr_core::dataset::{collect_random_walks, Dataset};
use dsr_core::Env;

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let path = args.next().unwrap_or_else(|| "crates/core/scenarios/ieee13.scn".into());
    let episodes: usize = args.next().map_or(Ok(1000), |s| s.parse())?;
    let out = args
        .next()
        .map_or_else(|| std::env::temp_dir().join("dsr-dataset"), PathBuf::from);
    let env = Env::load(path.as_ref())?;
    let ds = collect_random_walks(&env, episodes, 0)?;
    ds.save(&out)?;
    let loaded = Dataset::load(&out)?;
    loaded.verify_returns()?;
    loaded.verify_replay(&env)?;
    assert_eq!(loaded, ds);

    let returns: Vec<f64> = ds.trajectories.iter().map(|t| t.total_return()).collect();
    let best = returns.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mean = returns.iter().fold(0.0, |a, r| a + r) / returns.len() as f64;
    println!(
        "{} trajectories of {} steps in {}",
        ds.len(),
        env.horizon(),
        out.display()
    );
    println!("return mean {mean:.3}, best {best:.3}; labels and replay verified");
    Ok(())
}
