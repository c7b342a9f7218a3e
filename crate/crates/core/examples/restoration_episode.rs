//! Step the restoration MDP by hand: list the legal actions at every step,
//! take a random one and print the reward decomposition.
//!
//! `cargo run --example restoration_episode -- [scenario] [seed]`

use dsr_core::dataset::episode_rng;
use dsr_core::Env;
use rand::seq::SliceRandom;

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let path = args
        .next()
        .unwrap_or_else(|| "crates/core/scenarios/ieee123.scn".into());
    let seed: u64 = args.next().map_or(Ok(0), |s| s.parse())?;
    let env = Env::load(path.as_ref())?;
    let mut rng = episode_rng(seed, 0);
    let mut s = env.reset()?;
    println!(
        "{}: {} cells, {} actions, state vector of {}; {:.3} kW live at reset",
        env.name,
        env.cells.len(),
        env.action_count(),
        env.state_len(),
        s.restored_kw
    );
    let mut total = 0.0;
    for t in 0..env.horizon() {
        let legal = env.legal_actions(&s);
        let labels: Vec<String> = legal.iter().map(|a| a.label(&env.cells)).collect();
        let a = *legal.choose(&mut rng).expect("no-op is always legal");
        let tr = env.step(&s, a)?;
        total += tr.reward;
        println!("t={t} legal [{}]", labels.join(", "));
        println!(
            "    take {:<16} reward {:>10.3} = {:.3} + {} x {:.6}   restored {:.3} kW{}",
            a.label(&env.cells),
            tr.reward,
            tr.reward_active,
            env.cfg.w_p,
            tr.reward_voltage,
            tr.state.restored_kw,
            tr.shutdown.map_or(String::new(), |src| format!(
                "   ({} shut down)",
                env.grid.sources[src].id
            ))
        );
        s = tr.state;
    }
    println!("return {total:.3}, final power {:.3} kW", s.restored_kw);
    Ok(())
}
