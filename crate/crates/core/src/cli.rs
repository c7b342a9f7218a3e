//! The `dsr` command line: argument parsing, command implementations and
//! exit codes. The binary only forwards `std::env::args_os` here.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::baselines::{
    a2c_train, evaluate, ppo_train, reference_best, AcPolicy, ActorCriticNet, FixedPolicy, PidtPolicy, Policy,
};
use crate::curve::{curve_csv, CurvePoint};
use crate::dataset::{collect_random_walks, Dataset};
use crate::env::Env;
use crate::error::Error;
use crate::grid::Scenario;
use crate::oracle::enumerate;
use crate::pidt::{self, loss_csv, target_return, PidtModel};
use crate::run::{self, RunMeta, Settings};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_VALIDATION: i32 = 3;
pub const EXIT_RUNTIME: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "dsr", version, about = "Distribution system restoration workbench")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Scenario file.
    #[arg(long, global = true)]
    pub scenario: Option<PathBuf>,
    /// Output directory. Defaults to $DSR_OUT/<command>/seed-<seed>, with
    /// DSR_OUT falling back to ./runs.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Settings file (TOML, or JSON when the name ends in .json).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one setting, e.g. `--set pidt.lr=0.001`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse and check a scenario, then print its summary.
    Validate,
    /// Print the node-cell graph.
    Cells,
    /// Exhaustive optimum; writes oracle.json and the best sequences as a trace.
    Oracle,
    /// Collect random-walk trajectories into a dataset directory.
    Collect,
    /// Train an agent; writes a checkpoint plus loss and return curves.
    Train {
        agent: Agent,
        /// Dataset directory for pidt; collected in memory when omitted.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Evaluate a checkpoint (or the oracle sequence) over seeded trials.
    Eval {
        /// Checkpoint written by `train`.
        #[arg(long, required_unless_present = "oracle", conflicts_with = "oracle")]
        checkpoint: Option<PathBuf>,
        /// Replay the oracle's first best sequence instead of an agent.
        #[arg(long)]
        oracle: bool,
    },
    /// Render tables, curves and histograms from stored run directories.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Agent {
    Pidt,
    A2c,
    Ppo,
}

impl Agent {
    fn name(self) -> &'static str {
        match self {
            Agent::Pidt => "pidt",
            Agent::A2c => "a2c",
            Agent::Ppo => "ppo",
        }
    }
}

/// A failure with its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Syntax { .. }
            | Error::Semantic(_)
            | Error::Config(_)
            | Error::UnknownCell(_)
            | Error::UnknownSource(_)
            | Error::OracleBound(_)
            | Error::Dataset(_)
            | Error::Model(_)
            | Error::Json { .. } => EXIT_VALIDATION,
            Error::Io { ref source, .. } if source.kind() == std::io::ErrorKind::NotFound => EXIT_VALIDATION,
            Error::PowerFlow(_) | Error::IllegalAction { .. } | Error::Io { .. } | Error::Tensor(_) => EXIT_RUNTIME,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

/// Adds the failing artifact to an error message.
fn at<T>(what: &str, path: &Path, r: crate::Result<T>) -> Result<T, Failure> {
    r.map_err(|e| {
        let mut f = Failure::from(e);
        let shown = path.display().to_string();
        if !f.message.starts_with(&shown) {
            f.message = format!("{what} {shown}: {}", f.message);
        }
        f
    })
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code. Output goes to stdout, errors to stderr.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(text) => {
            print!("{text}");
            EXIT_OK
        }
        Err(f) => {
            eprintln!("dsr: {}", f.message);
            f.code
        }
    }
}

/// Runs a parsed command and returns what it prints.
pub fn execute(cli: &Cli) -> Result<String, Failure> {
    let c = &cli.common;
    for s in &c.sets {
        run::parse_assignment(s).map_err(|e| Failure::usage(e.to_string()))?;
    }
    let settings = match &c.config {
        Some(path) => at("config", path, Settings::resolve(Some(path), &c.sets))?,
        None => Settings::resolve(None, &c.sets)?,
    };
    match &cli.command {
        Command::Validate => validate(c, &settings),
        Command::Cells => cells(c, &settings),
        Command::Oracle => oracle(c, &settings),
        Command::Collect => collect(c, &settings),
        Command::Train { agent, dataset } => train(c, &settings, *agent, dataset.as_deref()),
        Command::Eval { checkpoint, oracle } => eval(c, &settings, checkpoint.as_deref(), *oracle),
        Command::Report { runs } => report(c, &settings, runs),
    }
}

fn scenario_path(c: &Common) -> Result<&Path, Failure> {
    c.scenario
        .as_deref()
        .ok_or_else(|| Failure::usage("this command needs --scenario <file>"))
}

fn load_env(c: &Common) -> Result<(PathBuf, Env), Failure> {
    let path = scenario_path(c)?;
    let env = at("scenario", path, Env::load(path))?;
    Ok((path.to_path_buf(), env))
}

fn out_dir(c: &Common, name: &str) -> Result<PathBuf, Failure> {
    let dir = c
        .out
        .clone()
        .unwrap_or_else(|| run::default_out_dir(None, name, c.seed));
    at("output directory", &dir, run::ensure_dir(&dir))?;
    Ok(dir)
}

fn meta(c: &Common, command: &str, settings: &Settings, scenario: &Path, env: &Env) -> Result<RunMeta, Failure> {
    at(
        "scenario",
        scenario,
        RunMeta::new(command, c.seed, settings).with_env(scenario, env),
    )
}

fn save_meta(dir: &Path, meta: &RunMeta) -> Result<(), Failure> {
    at("output directory", dir, meta.save(dir))
}

fn validate(c: &Common, settings: &Settings) -> Result<String, Failure> {
    let path = scenario_path(c)?;
    let scn = at("scenario", path, Scenario::from_path(path))?;
    let env = at("scenario", path, Env::new(scn.clone()))?;
    let g = &env.grid;
    let mut s = String::new();
    let _ = writeln!(s, "scenario {}: ok", env.name);
    let _ = writeln!(s, "  buses     {}", g.buses.len());
    let _ = writeln!(s, "  lines     {} ({} switchable)", g.lines.len(), g.switch_count());
    let _ = writeln!(s, "  loads     {} totalling {:.3} kW", g.loads.len(), g.total_load_kw());
    let _ = writeln!(s, "  sources   {}", g.sources.len());
    let _ = writeln!(
        s,
        "  cells     {} with {} operable switches",
        env.cells.len(),
        env.cells.switches.len()
    );
    let _ = writeln!(
        s,
        "  mdp       horizon {}, w_p {}, delta_t {}, dg_shutdown {}",
        scn.mdp.horizon, scn.mdp.w_p, scn.mdp.delta_t, scn.mdp.dg_shutdown_enabled
    );
    let _ = writeln!(s, "  checksum  {}", env.checksum());
    if let Some(dir) = &c.out {
        at("output directory", dir, run::ensure_dir(dir))?;
        save_meta(dir, &meta(c, "validate", settings, path, &env)?)?;
        at(
            "output directory",
            dir,
            run::write_json(&dir.join("grid.json"), &env.grid),
        )?;
    }
    Ok(s)
}

/// Plain-text cell graph listing.
pub fn cells_text(env: &Env) -> String {
    let g = &env.grid;
    let cg = &env.cells;
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{}: {} cells, {} switches, {} sources",
        env.name,
        cg.len(),
        cg.switches.len(),
        cg.attachments.len()
    );
    for cell in &cg.cells {
        let buses: Vec<&str> = cell.buses.iter().map(|&b| g.buses[b].id.as_str()).collect();
        let _ = writeln!(
            s,
            "cell {:>2}  {:>10.3} kW  buses {}",
            cell.id,
            cell.power_kw,
            buses.join(" ")
        );
    }
    for (k, sw) in cg.switches.iter().enumerate() {
        let _ = writeln!(s, "switch {k:>2}  {:<14} cells {} - {}", sw.id, sw.cells.0, sw.cells.1);
    }
    for &(src, cell) in &cg.attachments {
        let source = &g.sources[src];
        let _ = writeln!(
            s,
            "source {:<10} {:?} {:.1} kW in cell {cell}",
            source.id, source.kind, source.capacity_kw
        );
    }
    s
}

fn cells(c: &Common, settings: &Settings) -> Result<String, Failure> {
    let (path, env) = load_env(c)?;
    if let Some(dir) = &c.out {
        at("output directory", dir, run::ensure_dir(dir))?;
        save_meta(dir, &meta(c, "cells", settings, &path, &env)?)?;
        at(
            "output directory",
            dir,
            run::write_json(&dir.join("cells.json"), &env.cells),
        )?;
    }
    Ok(cells_text(&env))
}

fn oracle(c: &Common, settings: &Settings) -> Result<String, Failure> {
    let (path, env) = load_env(c)?;
    let result = at(
        "scenario",
        &path,
        enumerate(&env, settings.oracle.metric, &settings.oracle.config()),
    )?;
    let dir = out_dir(c, "oracle")?;
    let mut lines = Vec::new();
    for (i, seq) in result.best_sequences.iter().enumerate() {
        lines.extend(at("scenario", &path, run::trace(&env, i, seq))?);
    }
    save_meta(&dir, &meta(c, "oracle", settings, &path, &env)?)?;
    at(
        "output directory",
        &dir,
        run::write_json(&dir.join("oracle.json"), &result),
    )?;
    at(
        "output directory",
        &dir,
        run::write_jsonl(&dir.join("trace.jsonl"), &lines),
    )?;
    let mut s = String::new();
    let _ = writeln!(s, "metric            {:?}", result.metric);
    let _ = writeln!(s, "best return       {:.6}", result.best_return);
    let _ = writeln!(s, "best final power  {:.6} kW", result.best_final_power);
    let _ = writeln!(
        s,
        "optimal sequences {}{}",
        result.best_sequences.len(),
        if result.truncated { " (truncated)" } else { "" }
    );
    let _ = writeln!(s, "states visited    {}", result.states_visited);
    for seq in result.best_sequences.iter().take(10) {
        let labels: Vec<String> = seq.iter().map(|a| a.label(&env.cells)).collect();
        let _ = writeln!(s, "  {}", labels.join(" "));
    }
    let _ = writeln!(s, "wrote {}", dir.display());
    Ok(s)
}

fn collect(c: &Common, settings: &Settings) -> Result<String, Failure> {
    let (path, env) = load_env(c)?;
    let ds = at(
        "scenario",
        &path,
        collect_random_walks(&env, settings.collect.episodes, c.seed),
    )?;
    let dir = out_dir(c, "collect")?;
    at("dataset", &dir, ds.save(&dir))?;
    save_meta(&dir, &meta(c, "collect", settings, &path, &env)?)?;
    Ok(format!("collected {} trajectories into {}\n", ds.len(), dir.display()))
}

fn train(c: &Common, settings: &Settings, agent: Agent, dataset: Option<&Path>) -> Result<String, Failure> {
    let (path, env) = load_env(c)?;
    let dir = out_dir(c, &format!("train-{}", agent.name()))?;
    let mut m = meta(c, &format!("train {}", agent.name()), settings, &path, &env)?;
    m.agent = Some(agent.name().to_string());
    let ckpt = dir.join("model.json");
    let (curve, losses): (Vec<CurvePoint>, Vec<f64>) = match agent {
        Agent::Pidt => {
            let ds = match dataset {
                Some(d) => {
                    let ds = at("dataset", d, Dataset::load(d))?;
                    if ds.manifest.env_checksum != env.checksum() {
                        return Err(Failure {
                            code: EXIT_VALIDATION,
                            message: format!(
                                "dataset {}: collected on a different scenario or MDP setting",
                                d.display()
                            ),
                        });
                    }
                    for f in [crate::dataset::MANIFEST_FILE, crate::dataset::TRAJECTORIES_FILE] {
                        at("dataset", d, m.add_input("dataset", &d.join(f)))?;
                    }
                    ds
                }
                None => at(
                    "scenario",
                    &path,
                    collect_random_walks(&env, settings.collect.episodes, c.seed),
                )?,
            };
            let (model, report) = pidt::train(&env, &ds, &settings.pidt, c.seed).map_err(Failure::from)?;
            at("checkpoint", &ckpt, model.save(&ckpt))?;
            (report.curve, report.losses)
        }
        Agent::A2c => {
            let out = a2c_train(&env, &settings.a2c, c.seed)?;
            at("checkpoint", &ckpt, out.net.save(&ckpt, "a2c"))?;
            (out.curve, out.losses)
        }
        Agent::Ppo => {
            let out = ppo_train(&env, &settings.ppo, c.seed)?;
            at("checkpoint", &ckpt, out.net.save(&ckpt, "ppo"))?;
            (out.curve, out.losses)
        }
    };
    at(
        "output directory",
        &dir,
        run::write_text(&dir.join("curve.csv"), &curve_csv(&curve)),
    )?;
    at(
        "output directory",
        &dir,
        run::write_text(&dir.join("loss.csv"), &loss_csv(&losses)),
    )?;
    save_meta(&dir, &m)?;
    let last = curve.last().map_or(f64::NAN, |p| p.avg_return);
    Ok(format!(
        "trained {} for {} updates; last average return {last:.3}; wrote {}\n",
        agent.name(),
        losses.len(),
        dir.display()
    ))
}

fn eval(c: &Common, settings: &Settings, checkpoint: Option<&Path>, oracle: bool) -> Result<String, Failure> {
    let (path, env) = load_env(c)?;
    let best = at("scenario", &path, reference_best(&env))?;
    let eval_settings = settings.eval.with_seed(c.seed);
    let greedy = settings.eval.greedy;
    let mut m = meta(c, "eval", settings, &path, &env)?;
    let report = if oracle {
        let result = at(
            "scenario",
            &path,
            enumerate(&env, settings.oracle.metric, &settings.oracle.config()),
        )?;
        let policy = FixedPolicy(result.best_sequences[0].clone());
        evaluate(&policy, &env, &eval_settings, best)?
    } else {
        let ckpt = checkpoint.ok_or_else(|| Failure::usage("eval needs --checkpoint <file> or --oracle"))?;
        m.add_input("checkpoint", ckpt).map_err(Failure::from)?;
        let ck = at(
            "checkpoint",
            ckpt,
            dsr_autodiff::Checkpoint::load(ckpt).map_err(Error::from),
        )?;
        let kind = ck
            .meta
            .get("kind")
            .and_then(|k| k.as_str())
            .unwrap_or_default()
            .to_string();
        if kind == "pidt" {
            let model = at("checkpoint", ckpt, PidtModel::from_checkpoint(&ck))?;
            let policy = PidtPolicy {
                model: &model,
                target: target_return(&env),
                greedy,
            };
            at("checkpoint", ckpt, evaluate(&policy, &env, &eval_settings, best))?
        } else {
            let (net, kind) = at("checkpoint", ckpt, ActorCriticNet::load(ckpt))?;
            let policy = AcPolicy {
                net: &net,
                kind,
                greedy,
            };
            at(
                "checkpoint",
                ckpt,
                evaluate(&policy as &dyn Policy, &env, &eval_settings, best),
            )?
        }
    };
    m.agent = Some(report.agent.clone());
    let dir = out_dir(c, &format!("eval-{}", report.agent))?;
    let mut lines = Vec::new();
    for r in &report.records {
        let actions: Vec<crate::Action> = r.actions.iter().map(|&a| crate::Action::from_index(a)).collect();
        lines.extend(run::trace(&env, r.trial, &actions)?);
    }
    at("output directory", &dir, run::save_eval(&dir, &report))?;
    at(
        "output directory",
        &dir,
        run::write_jsonl(&dir.join("trace.jsonl"), &lines),
    )?;
    save_meta(&dir, &m)?;
    let mut s = run::table_csv(std::slice::from_ref(&report));
    let _ = writeln!(s, "wrote {}", dir.display());
    Ok(s)
}

fn report(c: &Common, settings: &Settings, runs: &[PathBuf]) -> Result<String, Failure> {
    let mut m = RunMeta::new("report", c.seed, settings);
    let mut reports = Vec::new();
    let mut curves: Vec<(String, Vec<CurvePoint>)> = Vec::new();
    for dir in runs {
        let meta = at("run directory", dir, RunMeta::load(dir))?;
        let label = meta.agent.clone().unwrap_or_else(|| meta.command.clone());
        let summary = dir.join(run::EVAL_SUMMARY);
        if summary.exists() {
            let stored = at("run directory", dir, run::load_eval(dir))?;
            let recomputed = stored.recompute(stored.records.clone());
            if recomputed != stored {
                return Err(Failure {
                    code: EXIT_VALIDATION,
                    message: format!("{}: summary disagrees with {}", summary.display(), run::EVAL_TRIALS),
                });
            }
            at("run directory", dir, m.add_input("eval", &summary))?;
            at("run directory", dir, m.add_input("trials", &dir.join(run::EVAL_TRIALS)))?;
            reports.push(recomputed);
        }
        let curve_path = dir.join("curve.csv");
        if curve_path.exists() {
            let curve = at("curve", &curve_path, run::read_curve(&curve_path))?;
            at("curve", &curve_path, m.add_input("curve", &curve_path))?;
            curves.push((label, curve));
        }
    }
    if reports.is_empty() && curves.is_empty() {
        return Err(Failure::usage(
            "no eval.json or curve.csv found in the given run directories",
        ));
    }
    let dir = match &c.out {
        Some(d) => d.clone(),
        None => run::default_out_dir(None, "report", c.seed),
    };
    at("output directory", &dir, run::ensure_dir(&dir))?;
    let write = |name: &str, text: &str| at("output directory", &dir, run::write_text(&dir.join(name), text));
    if !reports.is_empty() {
        write("table.csv", &run::table_csv(&reports))?;
        write("histogram.csv", &run::histogram_csv(&reports))?;
        write("histogram.svg", &run::histogram_svg("Final restored power", &reports))?;
    }
    if !curves.is_empty() {
        write("curves.csv", &run::curves_csv(&curves))?;
        write(
            "curves.svg",
            &run::curves_svg("Average return during training", &curves),
        )?;
    }
    save_meta(&dir, &m)?;
    let mut s = String::new();
    if !reports.is_empty() {
        s.push_str(&run::table_csv(&reports));
    }
    let _ = writeln!(s, "wrote {}", dir.display());
    Ok(s)
}
