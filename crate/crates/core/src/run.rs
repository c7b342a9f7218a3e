//! Persisted runs: resolved settings, metadata records, line-record files
//! and the CSV/SVG report renderers used by the `dsr` binary.
//!
//! A run directory holds `meta.json` plus whatever the command produced.
//! Nothing written here depends on wall-clock time or the output path, so
//! repeating a command with the same scenario, seed and settings yields
//! byte-identical files.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::baselines::{A2cConfig, Bucket, EvalReport, EvalSettings, PpoConfig, TrialRecord};
use crate::curve::CurvePoint;
use crate::env::{Action, Env};
use crate::error::{Error, Result};
use crate::oracle::{Metric, OracleConfig};
use crate::pidt::PidtConfig;

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "DSR_OUT";
pub const DEFAULT_OUT_ROOT: &str = "runs";
pub const META_FORMAT: &str = "dsr-run";
pub const META_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CollectSettings {
    /// Random-walk trajectories to collect.
    pub episodes: usize,
}

impl Default for CollectSettings {
    fn default() -> Self {
        Self { episodes: 5000 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleSettings {
    pub metric: Metric,
    pub max_cells: usize,
    pub max_sequences: usize,
}

impl Default for OracleSettings {
    fn default() -> Self {
        let c = OracleConfig::default();
        Self {
            metric: Metric::FinalPower,
            max_cells: c.max_cells,
            max_sequences: c.max_sequences,
        }
    }
}

impl OracleSettings {
    pub fn config(&self) -> OracleConfig {
        OracleConfig {
            max_cells: self.max_cells,
            max_sequences: self.max_sequences,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalRunSettings {
    pub trials: usize,
    /// Greedy trials are identical, so sampling is the default.
    pub greedy: bool,
    pub near_optimal_kw: f64,
    pub bucket_edges_kw: Vec<f64>,
}

impl Default for EvalRunSettings {
    fn default() -> Self {
        let d = EvalSettings::default();
        Self {
            trials: d.trials,
            greedy: false,
            near_optimal_kw: d.near_optimal_kw,
            bucket_edges_kw: d.bucket_edges_kw,
        }
    }
}

impl EvalRunSettings {
    pub fn with_seed(&self, base_seed: u64) -> EvalSettings {
        EvalSettings {
            trials: self.trials,
            base_seed,
            near_optimal_kw: self.near_optimal_kw,
            bucket_edges_kw: self.bucket_edges_kw.clone(),
        }
    }
}

/// Every tunable knob, grouped by the command that reads it.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    pub collect: CollectSettings,
    pub oracle: OracleSettings,
    pub pidt: PidtConfig,
    pub a2c: A2cConfig,
    pub ppo: PpoConfig,
    pub eval: EvalRunSettings,
}

impl Settings {
    /// Defaults, then the config file (TOML, or JSON by `.json` extension),
    /// then each `key.path=value` assignment in order.
    pub fn resolve(config: Option<&Path>, sets: &[String]) -> Result<Self> {
        let mut doc = serde_json::to_value(Settings::default()).expect("settings serialize");
        if let Some(path) = config {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let patch: Value = if path.extension().is_some_and(|e| e == "json") {
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
            } else {
                let table: toml::Table =
                    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
                serde_json::to_value(table).expect("toml tables map to json")
            };
            merge(&mut doc, patch, "")?;
        }
        for set in sets {
            let (key, raw) = parse_assignment(set)?;
            let slot = key
                .split('.')
                .try_fold(&mut doc, |node, part| node.get_mut(part))
                .ok_or_else(|| Error::Config(format!("unknown setting '{key}'")))?;
            *slot = parse_value(raw);
        }
        let settings: Settings =
            serde_json::from_value(doc).map_err(|e| Error::Config(format!("invalid settings: {e}")))?;
        settings.validate()?;
        Ok(settings)
    }

    pub fn validate(&self) -> Result<()> {
        self.pidt.validate()?;
        if self.eval.trials == 0 {
            return Err(Error::Config("eval.trials must be at least 1".into()));
        }
        if self.eval.bucket_edges_kw.is_empty() || self.eval.bucket_edges_kw.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(
                "eval.bucket_edges_kw must be non-empty and strictly increasing".into(),
            ));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("settings serialize");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

/// Splits `key=value`.
pub fn parse_assignment(s: &str) -> Result<(&str, &str)> {
    match s.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() => Ok((k.trim(), v.trim())),
        _ => Err(Error::Config(format!("expected key=value, got '{s}'"))),
    }
}

/// Reads a value as TOML (numbers, booleans, arrays, quoted strings);
/// `null` clears an optional setting and anything else is a bare string.
fn parse_value(raw: &str) -> Value {
    if raw == "null" {
        return Value::Null;
    }
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => serde_json::to_value(t.remove("v")).unwrap_or(Value::Null),
        Err(_) => Value::String(raw.to_string()),
    }
}

fn merge(base: &mut Value, patch: Value, path: &str) -> Result<()> {
    match patch {
        Value::Object(entries) => {
            for (k, v) in entries {
                let key = if path.is_empty() {
                    k.clone()
                } else {
                    format!("{path}.{k}")
                };
                let slot = base
                    .as_object_mut()
                    .and_then(|o| o.get_mut(&k))
                    .ok_or_else(|| Error::Config(format!("unknown setting '{key}'")))?;
                if v.is_object() && slot.is_object() {
                    merge(slot, v, &key)?;
                } else {
                    *slot = v;
                }
            }
            Ok(())
        }
        other => {
            *base = other;
            Ok(())
        }
    }
}

/// An input file a run depended on, pinned by content hash.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputRecord {
    pub role: String,
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Versions {
    pub dsr_core: String,
    pub dataset_format: u32,
    pub checkpoint_format: u32,
    pub meta_format: u32,
}

impl Default for Versions {
    fn default() -> Self {
        Self {
            dsr_core: env!("CARGO_PKG_VERSION").to_string(),
            dataset_format: crate::dataset::FORMAT_VERSION,
            checkpoint_format: dsr_autodiff::checkpoint::VERSION,
            meta_format: META_VERSION,
        }
    }
}

/// Everything needed to repeat a run exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub format: String,
    /// Subcommand, for example `train a2c`.
    pub command: String,
    /// Agent kind for train and eval runs.
    pub agent: Option<String>,
    pub seed: u64,
    pub scenario: Option<String>,
    pub env_checksum: Option<String>,
    pub config_hash: String,
    pub settings: Settings,
    pub inputs: Vec<InputRecord>,
    pub versions: Versions,
}

impl RunMeta {
    pub fn new(command: &str, seed: u64, settings: &Settings) -> Self {
        Self {
            format: META_FORMAT.to_string(),
            command: command.to_string(),
            agent: None,
            seed,
            scenario: None,
            env_checksum: None,
            config_hash: settings.hash(),
            settings: settings.clone(),
            inputs: Vec::new(),
            versions: Versions::default(),
        }
    }

    pub fn with_env(mut self, path: &Path, env: &Env) -> Result<Self> {
        self.scenario = Some(env.name.clone());
        self.env_checksum = Some(env.checksum());
        self.add_input("scenario", path)?;
        Ok(self)
    }

    pub fn add_input(&mut self, role: &str, path: &Path) -> Result<()> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        self.inputs.push(InputRecord {
            role: role.to_string(),
            path: path.display().to_string(),
            sha256: hex::encode(Sha256::digest(&bytes)),
        });
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join("meta.json"), self)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        read_json(&dir.join("meta.json"))
    }
}

/// Default output directory for a command: `$DSR_OUT/<name>/seed-<seed>`.
pub fn default_out_dir(root: Option<&Path>, name: &str, seed: u64) -> PathBuf {
    let root = root.map(Path::to_path_buf).unwrap_or_else(|| {
        std::env::var_os(OUT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_ROOT))
    });
    root.join(name).join(format!("seed-{seed}"))
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    text.push('\n');
    write_text(path, &text)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

/// One compact JSON document per line.
pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item).map_err(|e| Error::json(path, e))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| Error::Dataset(format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

/// Episode trace line: one step of one episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceLine {
    pub episode: usize,
    pub t: usize,
    pub action: String,
    pub action_index: usize,
    pub reward: f64,
    pub restored_kw: f64,
    pub penalty: f64,
}

/// Replays `actions` from reset and returns their trace lines.
pub fn trace(env: &Env, episode: usize, actions: &[Action]) -> Result<Vec<TraceLine>> {
    let transitions = env.rollout(actions)?;
    Ok(actions
        .iter()
        .zip(&transitions)
        .enumerate()
        .map(|(t, (&a, tr))| {
            let rec = env.trace_record(t, a, tr);
            TraceLine {
                episode,
                t: rec.t,
                action: rec.action,
                action_index: rec.action_index,
                reward: rec.reward,
                restored_kw: rec.restored_kw,
                penalty: rec.penalty,
            }
        })
        .collect())
}

pub const EVAL_SUMMARY: &str = "eval.json";
pub const EVAL_TRIALS: &str = "trials.jsonl";

/// Writes the summary document and the per-trial line records.
pub fn save_eval(dir: &Path, report: &EvalReport) -> Result<()> {
    write_json(&dir.join(EVAL_SUMMARY), report)?;
    write_jsonl(&dir.join(EVAL_TRIALS), &report.records)
}

/// Loads a stored evaluation with its per-trial records attached.
pub fn load_eval(dir: &Path) -> Result<EvalReport> {
    let mut report: EvalReport = read_json(&dir.join(EVAL_SUMMARY))?;
    report.records = read_jsonl::<TrialRecord>(&dir.join(EVAL_TRIALS))?;
    Ok(report)
}

/// Parses an `update,avg_return` file.
pub fn read_curve(path: &Path) -> Result<Vec<CurvePoint>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |i: usize| Error::Dataset(format!("{}:{}: expected update,avg_return", path.display(), i + 1));
    text.lines()
        .enumerate()
        .skip(1)
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let (u, r) = line.split_once(',').ok_or_else(|| bad(i))?;
            Ok(CurvePoint {
                update: u.trim().parse().map_err(|_| bad(i))?,
                avg_return: r.trim().parse().map_err(|_| bad(i))?,
            })
        })
        .collect()
}

pub fn bucket_label(b: &Bucket) -> String {
    match b.hi_kw {
        Some(hi) => format!("{}-{}", b.lo_kw, hi),
        None => format!(">={}", b.lo_kw),
    }
}

/// `agent,lo_kw,hi_kw,count` rows; the open top band leaves `hi_kw` empty.
pub fn histogram_csv(reports: &[EvalReport]) -> String {
    let mut out = String::from("agent,lo_kw,hi_kw,count\n");
    for r in reports {
        for b in &r.histogram {
            let hi = b.hi_kw.map(|h| h.to_string()).unwrap_or_default();
            let _ = writeln!(out, "{},{},{},{}", r.agent, b.lo_kw, hi, b.count);
        }
    }
    out
}

/// One row per agent with the table metrics.
pub fn table_csv(reports: &[EvalReport]) -> String {
    let mut out = String::from(
        "agent,trials,mean_return,std_return,mean_final_power_kw,std_final_power_kw,oracle_best_kw,optimal_count,near_optimal_kw,near_optimal_count\n",
    );
    for r in reports {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.agent,
            r.trials,
            r.mean_return,
            r.std_return,
            r.mean_final_power,
            r.std_final_power,
            r.oracle_best_final_power,
            r.optimal_count,
            r.near_optimal_kw,
            r.near_optimal_count
        );
    }
    out
}

/// `agent,update,avg_return` rows for several labelled curves.
pub fn curves_csv(curves: &[(String, Vec<CurvePoint>)]) -> String {
    let mut out = String::from("agent,update,avg_return\n");
    for (name, curve) in curves {
        for p in curve {
            let _ = writeln!(out, "{name},{},{}", p.update, p.avg_return);
        }
    }
    out
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];
const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 80.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;

fn svg_open(title: &str, x_label: &str, y_label: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{}</text>"#,
        W / 2.0,
        escape(title)
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        LEFT + (W - LEFT - RIGHT) / 2.0,
        H - 15.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text transform="translate(18,{}) rotate(-90)" text-anchor="middle">{}</text>"#,
        TOP + (H - TOP - BOTTOM) / 2.0,
        escape(y_label)
    );
    let _ = writeln!(
        s,
        r#"<line x1="{LEFT}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#,
        H - BOTTOM,
        W - RIGHT,
        H - BOTTOM
    );
    let _ = writeln!(
        s,
        r#"<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{}" stroke="black"/>"#,
        H - BOTTOM
    );
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn y_ticks(s: &mut String, lo: f64, hi: f64) {
    for i in 0..=4 {
        let v = lo + (hi - lo) * i as f64 / 4.0;
        let y = H - BOTTOM - (H - TOP - BOTTOM) * i as f64 / 4.0;
        let _ = writeln!(
            s,
            r##"<line x1="{}" y1="{y:.2}" x2="{}" y2="{y:.2}" stroke="#ddd"/><text x="{}" y="{:.2}" text-anchor="end">{}</text>"##,
            LEFT,
            W - RIGHT,
            LEFT - 6.0,
            y + 4.0,
            tick(v)
        );
    }
}

fn tick(v: f64) -> String {
    if v.abs() >= 1000.0 || v.fract() == 0.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

fn legend(s: &mut String, names: &[&str]) {
    for (i, name) in names.iter().enumerate() {
        let y = TOP + 14.0 * i as f64;
        let colour = PALETTE[i % PALETTE.len()];
        let _ = writeln!(
            s,
            r#"<rect x="{}" y="{}" width="10" height="10" fill="{colour}"/><text x="{}" y="{}">{}</text>"#,
            W - RIGHT - 120.0,
            y,
            W - RIGHT - 105.0,
            y + 9.0,
            escape(name)
        );
    }
}

/// Average-return curves against gradient updates in hundreds.
pub fn curves_svg(title: &str, curves: &[(String, Vec<CurvePoint>)]) -> String {
    let points = curves.iter().flat_map(|(_, c)| c.iter());
    let (mut x_hi, mut y_lo, mut y_hi) = (0.0_f64, f64::INFINITY, f64::NEG_INFINITY);
    for p in points {
        x_hi = x_hi.max(p.update as f64 / 100.0);
        y_lo = y_lo.min(p.avg_return);
        y_hi = y_hi.max(p.avg_return);
    }
    if !y_lo.is_finite() {
        (y_lo, y_hi) = (0.0, 1.0);
    }
    if y_hi <= y_lo {
        y_hi = y_lo + 1.0;
    }
    if x_hi <= 0.0 {
        x_hi = 1.0;
    }
    let mut s = svg_open(title, "gradient updates (x100)", "average return (kW·Δt)");
    y_ticks(&mut s, y_lo, y_hi);
    for i in 0..=4 {
        let v = x_hi * i as f64 / 4.0;
        let x = LEFT + (W - LEFT - RIGHT) * i as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{x:.2}" y="{}" text-anchor="middle">{}</text>"#,
            H - BOTTOM + 16.0,
            tick(v)
        );
    }
    for (i, (_, curve)) in curves.iter().enumerate() {
        let pts: Vec<String> = curve
            .iter()
            .map(|p| {
                let x = LEFT + (W - LEFT - RIGHT) * (p.update as f64 / 100.0) / x_hi;
                let y = H - BOTTOM - (H - TOP - BOTTOM) * (p.avg_return - y_lo) / (y_hi - y_lo);
                format!("{x:.2},{y:.2}")
            })
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{}" stroke-width="1.5" points="{}"/>"#,
            PALETTE[i % PALETTE.len()],
            pts.join(" ")
        );
    }
    let names: Vec<&str> = curves.iter().map(|(n, _)| n.as_str()).collect();
    legend(&mut s, &names);
    s.push_str("</svg>\n");
    s
}

/// Grouped bars of final-power bands, one colour per agent.
pub fn histogram_svg(title: &str, reports: &[EvalReport]) -> String {
    let bands = reports.first().map_or(0, |r| r.histogram.len());
    let y_hi = reports
        .iter()
        .flat_map(|r| r.histogram.iter().map(|b| b.count))
        .max()
        .unwrap_or(0)
        .max(1) as f64;
    let mut s = svg_open(title, "final restored power (kW)", "trials");
    y_ticks(&mut s, 0.0, y_hi);
    let group = (W - LEFT - RIGHT) / bands.max(1) as f64;
    let bar = group * 0.8 / reports.len().max(1) as f64;
    for band in 0..bands {
        let gx = LEFT + group * band as f64;
        if let Some(b) = reports[0].histogram.get(band) {
            let _ = writeln!(
                s,
                r#"<text x="{:.2}" y="{}" text-anchor="middle">{}</text>"#,
                gx + group / 2.0,
                H - BOTTOM + 16.0,
                escape(&bucket_label(b))
            );
        }
        for (i, r) in reports.iter().enumerate() {
            let count = r.histogram.get(band).map_or(0, |b| b.count);
            let h = (H - TOP - BOTTOM) * count as f64 / y_hi;
            let _ = writeln!(
                s,
                r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{}"><title>{} {}</title></rect>"#,
                gx + group * 0.1 + bar * i as f64,
                H - BOTTOM - h,
                bar,
                h,
                PALETTE[i % PALETTE.len()],
                escape(&r.agent),
                count
            );
        }
    }
    let names: Vec<&str> = reports.iter().map(|r| r.agent.as_str()).collect();
    legend(&mut s, &names);
    s.push_str("</svg>\n");
    s
}
