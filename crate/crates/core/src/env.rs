//! Node-cell restoration MDP.
//!
//! An action closes one open switch that joins an energized cell to a
//! de-energized one, extending the energization path of the source feeding
//! the energized side. The reward after each action is the restored active
//! power minus the weighted voltage-band violations of energized loads,
//! both scaled by the step length.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grid::{node_cells, CellGraph, GridSpec, Scenario};
use crate::powerflow::{self, IslandSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MdpConfig {
    /// Actions per episode.
    pub horizon: usize,
    /// Only the actor-critic baselines discount; returns-to-go are undiscounted.
    pub gamma: f64,
    /// Voltage-penalty weight, kW per p.u.².
    pub w_p: f64,
    pub delta_t: f64,
    pub dg_shutdown_enabled: bool,
}

impl Default for MdpConfig {
    fn default() -> Self {
        Self {
            horizon: 10,
            gamma: 1.0,
            w_p: 100.0,
            delta_t: 1.0,
            dg_shutdown_enabled: false,
        }
    }
}

impl MdpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon < 1 {
            return Err(Error::Config("horizon must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma {} outside [0, 1]", self.gamma)));
        }
        if !(self.w_p >= 0.0) {
            return Err(Error::Config(format!("w_p {} must be non-negative", self.w_p)));
        }
        if !(self.delta_t > 0.0) {
            return Err(Error::Config(format!("delta_t {} must be positive", self.delta_t)));
        }
        Ok(())
    }
}

/// Close one switch, or leave the topology as it is.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Action {
    NoOp,
    Close(usize),
}

impl Action {
    /// Dense index: 0 is no-op, `k + 1` closes switch `k`.
    pub fn index(self) -> usize {
        match self {
            Action::NoOp => 0,
            Action::Close(k) => k + 1,
        }
    }

    pub fn from_index(i: usize) -> Self {
        if i == 0 {
            Action::NoOp
        } else {
            Action::Close(i - 1)
        }
    }

    pub fn label(self, cg: &CellGraph) -> String {
        match self {
            Action::NoOp => "noop".to_string(),
            Action::Close(k) => match cg.switches.get(k) {
                Some(s) => format!("close:{}", s.id),
                None => format!("close:#{k}"),
            },
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Action::NoOp => write!(f, "noop"),
            Action::Close(k) => write!(f, "close(#{k})"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RestorationState {
    /// Supplying source per cell, `None` when de-energized.
    pub cell_source: Vec<Option<usize>>,
    pub switch_closed: Vec<bool>,
    /// Per source, the cells it energized in energization order.
    pub frontiers: Vec<Vec<usize>>,
    /// Sources shut down for exceeding their allowed cells.
    pub tripped: Vec<bool>,
    /// Squared voltage per load, 0 when de-energized.
    pub load_h: Vec<f64>,
    /// Island load within capacity, per source (true for idle sources).
    pub capacity_ok: Vec<bool>,
    pub step: usize,
    pub restored_kw: f64,
    /// Sum of per-load band violations over energized loads, p.u.².
    pub penalty: f64,
}

impl RestorationState {
    pub fn is_energized(&self, cell: usize) -> bool {
        self.cell_source[cell].is_some()
    }

    pub fn energized_cells(&self) -> impl Iterator<Item = usize> + '_ {
        self.cell_source.iter().enumerate().filter_map(|(c, s)| s.map(|_| c))
    }

    /// Topology key: energization, switch positions and tripped sources.
    /// Frontier order and the step counter are not part of it.
    pub fn topology_key(&self) -> (Vec<Option<usize>>, Vec<bool>, Vec<bool>) {
        (
            self.cell_source.clone(),
            self.switch_closed.clone(),
            self.tripped.clone(),
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub state: RestorationState,
    pub reward: f64,
    /// Restored-power term, kW·Δt.
    pub reward_active: f64,
    /// Voltage term before weighting (≤ 0), p.u.²·Δt.
    pub reward_voltage: f64,
    /// Source shut down by this action.
    pub shutdown: Option<usize>,
    pub terminal: bool,
}

/// One line of an episode trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub t: usize,
    pub action: String,
    pub action_index: usize,
    pub reward: f64,
    pub restored_kw: f64,
    pub penalty: f64,
}

/// A scenario bound to its cell graph and MDP settings.
#[derive(Clone, Debug, PartialEq)]
pub struct Env {
    pub name: String,
    pub grid: GridSpec,
    pub cells: CellGraph,
    pub cfg: MdpConfig,
    total_load_kw: f64,
}

impl Env {
    pub fn new(scenario: Scenario) -> Result<Self> {
        Self::from_parts(scenario.name, scenario.grid, scenario.mdp)
    }

    pub fn from_parts(name: impl Into<String>, grid: GridSpec, cfg: MdpConfig) -> Result<Self> {
        grid.validate()?;
        cfg.validate()?;
        let cells = node_cells(&grid);
        let mut owner: Vec<Option<usize>> = vec![None; cells.len()];
        for &(src, cell) in &cells.attachments {
            if let Some(other) = owner[cell].replace(src) {
                return Err(Error::Config(format!(
                    "sources {} and {} share cell {cell}",
                    grid.sources[other].id, grid.sources[src].id
                )));
            }
        }
        for s in &grid.sources {
            if let Some(bad) = s
                .allowed_cells
                .as_ref()
                .and_then(|a| a.iter().find(|&&c| c >= cells.len()))
            {
                return Err(Error::Config(format!(
                    "source {}: allowed cell {bad} does not exist",
                    s.id
                )));
            }
        }
        let total_load_kw = grid.total_load_kw();
        Ok(Self {
            name: name.into(),
            grid,
            cells,
            cfg,
            total_load_kw,
        })
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::new(Scenario::from_path(path)?)
    }

    pub fn horizon(&self) -> usize {
        self.cfg.horizon
    }

    pub fn action_count(&self) -> usize {
        self.cells.switches.len() + 1
    }

    pub fn total_load_kw(&self) -> f64 {
        self.total_load_kw
    }

    pub fn state_len(&self) -> usize {
        let (c, l, k, s) = (
            self.cells.len(),
            self.grid.loads.len(),
            self.cells.switches.len(),
            self.grid.sources.len(),
        );
        c + l + 2 * k + s * c + 1
    }

    /// SHA-256 of the scenario and MDP settings; identifies the environment
    /// in datasets and reports.
    pub fn checksum(&self) -> String {
        let doc = serde_json::json!({
            "name": self.name,
            "grid": self.grid,
            "mdp": self.cfg,
        });
        hex::encode(Sha256::digest(doc.to_string().as_bytes()))
    }

    pub fn reset(&self) -> Result<RestorationState> {
        let n_src = self.grid.sources.len();
        let mut state = RestorationState {
            cell_source: vec![None; self.cells.len()],
            switch_closed: vec![false; self.cells.switches.len()],
            frontiers: vec![Vec::new(); n_src],
            tripped: vec![false; n_src],
            load_h: vec![0.0; self.grid.loads.len()],
            capacity_ok: vec![true; n_src],
            step: 0,
            restored_kw: 0.0,
            penalty: 0.0,
        };
        for &(src, cell) in &self.cells.attachments {
            if state.cell_source[cell].is_some() {
                return Err(Error::Config(format!("two sources in cell {cell}")));
            }
            state.cell_source[cell] = Some(src);
            state.frontiers[src].push(cell);
        }
        self.refresh(&mut state)?;
        Ok(state)
    }

    /// Classifies a closure: `None` if not a topologically valid extension,
    /// otherwise the extending source, the new cell, and whether the source's
    /// cell restriction is violated.
    fn closure(&self, s: &RestorationState, k: usize) -> Option<(usize, usize, bool)> {
        if s.switch_closed[k] {
            return None;
        }
        let (a, b) = self.cells.switches[k].cells;
        let (src, target) = match (s.cell_source[a], s.cell_source[b]) {
            (Some(src), None) => (src, b),
            (None, Some(src)) => (src, a),
            _ => return None,
        };
        let restricted = self.grid.sources[src]
            .allowed_cells
            .as_ref()
            .is_some_and(|allowed| !allowed.contains(&target));
        Some((src, target, restricted))
    }

    /// No-op plus every switch closure that extends exactly one energized
    /// island into a de-energized cell, ascending by switch index.
    pub fn legal_actions(&self, s: &RestorationState) -> Vec<Action> {
        let mut out = vec![Action::NoOp];
        for k in 0..self.cells.switches.len() {
            if let Some((_, _, restricted)) = self.closure(s, k) {
                if !restricted || self.cfg.dg_shutdown_enabled {
                    out.push(Action::Close(k));
                }
            }
        }
        out
    }

    /// Legal-action indicator aligned with [`Action::index`].
    pub fn action_mask(&self, s: &RestorationState) -> Vec<bool> {
        let mut mask = vec![false; self.action_count()];
        for a in self.legal_actions(s) {
            mask[a.index()] = true;
        }
        mask
    }

    pub fn step(&self, s: &RestorationState, a: Action) -> Result<Transition> {
        let illegal = |reason: &str| Error::IllegalAction {
            action: a.label(&self.cells),
            reason: reason.to_string(),
        };
        if s.step >= self.cfg.horizon {
            return Err(illegal("episode already reached the horizon"));
        }
        let mut next = s.clone();
        let mut shutdown = None;
        if let Action::Close(k) = a {
            if k >= self.cells.switches.len() {
                return Err(illegal("no such switch"));
            }
            let (src, target, restricted) = self
                .closure(s, k)
                .ok_or_else(|| illegal("switch must join one energized and one de-energized cell"))?;
            if restricted && !self.cfg.dg_shutdown_enabled {
                return Err(illegal("target cell is outside the source's allowed cells"));
            }
            if restricted {
                self.trip(&mut next, src);
                shutdown = Some(src);
            } else {
                next.switch_closed[k] = true;
                next.cell_source[target] = Some(src);
                next.frontiers[src].push(target);
            }
        }
        next.step += 1;
        self.refresh(&mut next)?;
        let dt = self.cfg.delta_t;
        let reward_active = next.restored_kw * dt;
        let reward_voltage = -next.penalty * dt;
        let reward = reward_active + self.cfg.w_p * reward_voltage;
        let terminal = next.step >= self.cfg.horizon;
        Ok(Transition {
            state: next,
            reward,
            reward_active,
            reward_voltage,
            shutdown,
            terminal,
        })
    }

    /// De-energizes a source's whole island and reopens its switches.
    fn trip(&self, s: &mut RestorationState, src: usize) {
        let island: BTreeSet<usize> = s.frontiers[src].iter().copied().collect();
        for (k, sw) in self.cells.switches.iter().enumerate() {
            if island.contains(&sw.cells.0) && island.contains(&sw.cells.1) {
                s.switch_closed[k] = false;
            }
        }
        for &c in &island {
            s.cell_source[c] = None;
        }
        s.frontiers[src].clear();
        s.tripped[src] = true;
    }

    /// Recomputes voltages, restored power and penalties for the topology.
    fn refresh(&self, s: &mut RestorationState) -> Result<()> {
        let islands: Vec<IslandSpec> = (0..self.grid.sources.len())
            .filter(|&src| !s.frontiers[src].is_empty())
            .map(|src| {
                let mut cells = s.frontiers[src].clone();
                cells.sort_unstable();
                IslandSpec { source: src, cells }
            })
            .collect();
        let closed: BTreeSet<usize> = s
            .switch_closed
            .iter()
            .enumerate()
            .filter_map(|(k, &c)| c.then_some(k))
            .collect();
        let sol = powerflow::solve(&self.grid, &self.cells, &islands, &closed)?;
        s.capacity_ok = vec![true; self.grid.sources.len()];
        for island in &sol.islands {
            s.capacity_ok[island.source] = island.feasible;
        }
        let penalties = powerflow::voltage_penalty(&sol, &self.grid);
        s.penalty = penalties.values().fold(0.0, |acc, v| acc + v);
        for (l, load) in self.grid.loads.iter().enumerate() {
            s.load_h[l] = sol.h.get(&load.bus).copied().unwrap_or(0.0);
        }
        s.restored_kw = s
            .energized_cells()
            .map(|c| self.cells.cells[c].power_kw)
            .fold(0.0, |acc, p| acc + p);
        Ok(())
    }

    /// Fixed-length observation:
    /// cell energization bits, load squared voltages, switch one-hots
    /// (open, closed), per-source frontier membership bits over cells, and
    /// the restored fraction of total load.
    pub fn encode_state(&self, s: &RestorationState) -> Vec<f64> {
        let bit = |b: bool| if b { 1.0 } else { 0.0 };
        let mut v = Vec::with_capacity(self.state_len());
        v.extend(s.cell_source.iter().map(|c| bit(c.is_some())));
        v.extend_from_slice(&s.load_h);
        for &closed in &s.switch_closed {
            v.push(bit(!closed));
            v.push(bit(closed));
        }
        for frontier in &s.frontiers {
            let mut occ = vec![0.0; self.cells.len()];
            for &c in frontier {
                occ[c] = 1.0;
            }
            v.extend(occ);
        }
        v.push(if self.total_load_kw > 0.0 {
            s.restored_kw / self.total_load_kw
        } else {
            0.0
        });
        v
    }

    pub fn trace_record(&self, t: usize, a: Action, tr: &Transition) -> TraceRecord {
        TraceRecord {
            t,
            action: a.label(&self.cells),
            action_index: a.index(),
            reward: tr.reward,
            restored_kw: tr.state.restored_kw,
            penalty: tr.state.penalty,
        }
    }

    /// Replays `actions` from reset, returning every transition.
    pub fn rollout(&self, actions: &[Action]) -> Result<Vec<Transition>> {
        let mut s = self.reset()?;
        let mut out = Vec::with_capacity(actions.len());
        for &a in actions {
            let tr = self.step(&s, a)?;
            s = tr.state.clone();
            out.push(tr);
        }
        Ok(out)
    }
}
