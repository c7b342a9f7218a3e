//! Exhaustive search over action sequences for small scenarios.
//!
//! The memoized search computes, for every reachable (topology, remaining
//! steps) pair, the best achievable return and the best achievable final
//! restored power. Optimal sequences are then listed by walking forward and
//! keeping every action whose successor still attains the optimum.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::env::{Action, Env, RestorationState};
use crate::error::{Error, Result};

pub const DEFAULT_CELL_BOUND: usize = 16;
pub const DEFAULT_SEQUENCE_CAP: usize = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    /// Undiscounted sum of rewards over the horizon.
    Return,
    /// Restored power after the last action.
    FinalPower,
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "return" => Ok(Metric::Return),
            "final-power" | "final_power" => Ok(Metric::FinalPower),
            other => Err(Error::Config(format!(
                "unknown oracle metric '{other}' (return | final-power)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleConfig {
    pub max_cells: usize,
    /// Upper limit on listed optimal sequences.
    pub max_sequences: usize,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            max_cells: DEFAULT_CELL_BOUND,
            max_sequences: DEFAULT_SEQUENCE_CAP,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    pub metric: Metric,
    pub best_return: f64,
    pub best_final_power: f64,
    /// Sequences optimal under `metric`, in lexicographic action-index order.
    pub best_sequences: Vec<Vec<Action>>,
    /// More optimal sequences exist than were listed.
    pub truncated: bool,
    /// Distinct topologies reached from reset.
    pub states_visited: usize,
}

impl OracleResult {
    pub fn best_value(&self) -> f64 {
        match self.metric {
            Metric::Return => self.best_return,
            Metric::FinalPower => self.best_final_power,
        }
    }
}

type TopologyKey = (Vec<Option<usize>>, Vec<bool>, Vec<bool>);

/// Values reachable from a node: (best return, best final power).
type Values = (f64, f64);

/// Equality used when collecting ties.
pub fn ties(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0)
}

fn check_bound(env: &Env, cfg: &OracleConfig) -> Result<()> {
    if env.cells.len() > cfg.max_cells {
        return Err(Error::OracleBound(format!(
            "scenario has {} cells, bound is {}; shrink the scenario or raise the bound",
            env.cells.len(),
            cfg.max_cells
        )));
    }
    Ok(())
}

struct Search<'a> {
    env: &'a Env,
    memo: HashMap<(TopologyKey, usize), Values>,
    seen: BTreeSet<TopologyKey>,
}

impl Search<'_> {
    fn values(&mut self, s: &RestorationState, rem: usize) -> Result<Values> {
        let key = (s.topology_key(), rem);
        if let Some(&v) = self.memo.get(&key) {
            return Ok(v);
        }
        self.seen.insert(key.0.clone());
        let v = if rem == 0 {
            (0.0, s.restored_kw)
        } else {
            let mut best = (f64::NEG_INFINITY, f64::NEG_INFINITY);
            for a in self.env.legal_actions(s) {
                let tr = self.env.step(s, a)?;
                let (ret, fin) = self.values(&tr.state, rem - 1)?;
                best.0 = best.0.max(tr.reward + ret);
                best.1 = best.1.max(fin);
            }
            best
        };
        self.memo.insert(key, v);
        Ok(v)
    }

    fn collect(
        &mut self,
        s: &RestorationState,
        rem: usize,
        metric: Metric,
        target: f64,
        prefix: &mut Vec<Action>,
        out: &mut Vec<Vec<Action>>,
        cap: usize,
    ) -> Result<bool> {
        if rem == 0 {
            if out.len() >= cap {
                return Ok(true);
            }
            out.push(prefix.clone());
            return Ok(false);
        }
        for a in self.env.legal_actions(s) {
            let tr = self.env.step(s, a)?;
            let (ret, fin) = self.values(&tr.state, rem - 1)?;
            let (value, child_target) = match metric {
                Metric::Return => (tr.reward + ret, target - tr.reward),
                Metric::FinalPower => (fin, target),
            };
            if ties(value, target) {
                prefix.push(a);
                let truncated = self.collect(&tr.state, rem - 1, metric, child_target, prefix, out, cap)?;
                prefix.pop();
                if truncated {
                    return Ok(true);
                }
            }
        }
        Ok(false)
    }
}

/// Memoized exhaustive optimum under `metric`.
pub fn enumerate(env: &Env, metric: Metric, cfg: &OracleConfig) -> Result<OracleResult> {
    check_bound(env, cfg)?;
    let root = env.reset()?;
    let mut search = Search {
        env,
        memo: HashMap::new(),
        seen: BTreeSet::new(),
    };
    let (best_return, best_final_power) = search.values(&root, env.horizon())?;
    let target = match metric {
        Metric::Return => best_return,
        Metric::FinalPower => best_final_power,
    };
    let mut sequences = Vec::new();
    let truncated = search.collect(
        &root,
        env.horizon(),
        metric,
        target,
        &mut Vec::new(),
        &mut sequences,
        cfg.max_sequences.max(1),
    )?;
    if sequences.is_empty() {
        return Err(Error::OracleBound("no optimal sequence reconstructed".into()));
    }
    Ok(OracleResult {
        metric,
        best_return,
        best_final_power,
        best_sequences: sequences,
        truncated,
        states_visited: search.seen.len(),
    })
}

/// Plain depth-first enumeration of every action sequence, kept as an
/// independent reference for the memoized search.
pub fn enumerate_unmemoized(env: &Env, metric: Metric, cfg: &OracleConfig) -> Result<OracleResult> {
    check_bound(env, cfg)?;

    // every complete sequence with its return and final power
    fn walk(
        env: &Env,
        s: &RestorationState,
        rem: usize,
        prefix: &mut Vec<Action>,
        out: &mut Vec<(Vec<Action>, f64, f64)>,
        seen: &mut BTreeSet<TopologyKey>,
    ) -> Result<Values> {
        seen.insert(s.topology_key());
        if rem == 0 {
            out.push((prefix.clone(), 0.0, s.restored_kw));
            return Ok((0.0, s.restored_kw));
        }
        let mut best = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for a in env.legal_actions(s) {
            let tr = env.step(s, a)?;
            let start = out.len();
            prefix.push(a);
            let (ret, fin) = walk(env, &tr.state, rem - 1, prefix, out, seen)?;
            prefix.pop();
            // fold this step's reward into every completed suffix return
            for entry in &mut out[start..] {
                entry.1 = tr.reward + entry.1;
            }
            best.0 = best.0.max(tr.reward + ret);
            best.1 = best.1.max(fin);
        }
        Ok(best)
    }

    let root = env.reset()?;
    let mut all = Vec::new();
    let mut seen = BTreeSet::new();
    let (best_return, best_final_power) = walk(env, &root, env.horizon(), &mut Vec::new(), &mut all, &mut seen)?;
    let target = match metric {
        Metric::Return => best_return,
        Metric::FinalPower => best_final_power,
    };
    let optimal: Vec<Vec<Action>> = all
        .into_iter()
        .filter(|(_, ret, fin)| ties(if metric == Metric::Return { *ret } else { *fin }, target))
        .map(|(seq, _, _)| seq)
        .collect();
    let cap = cfg.max_sequences.max(1);
    let truncated = optimal.len() > cap;
    Ok(OracleResult {
        metric,
        best_return,
        best_final_power,
        best_sequences: optimal.into_iter().take(cap).collect(),
        truncated,
        states_visited: seen.len(),
    })
}

/// Return and final restored power of a fixed action sequence.
pub fn evaluate_sequence(env: &Env, actions: &[Action]) -> Result<(f64, f64)> {
    let transitions = env.rollout(actions)?;
    let ret = transitions.iter().map(|t| t.reward).fold(0.0, |acc, r| acc + r);
    let fin = transitions
        .last()
        .map_or(env.reset()?.restored_kw, |t| t.state.restored_kw);
    Ok((ret, fin))
}
