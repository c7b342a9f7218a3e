//! Network description and its node-cell decomposition.
//!
//! Buses, loads, sources and switches are identified by the names used in
//! the scenario file, but everything downstream works with their
//! declaration index. "Ascending id" orderings always mean declaration order.

mod cells;
mod scenario;

use std::collections::{BTreeSet, HashMap};

use petgraph::unionfind::UnionFind;
use serde::{Deserialize, Serialize};

pub use cells::{node_cells, Cell, CellGraph, SwitchEdge};
pub use scenario::{parse_grid, Scenario};

use crate::error::{Error, Result};

pub const DEFAULT_H_MIN: f64 = 0.9025;
pub const DEFAULT_H_MAX: f64 = 1.1025;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bus {
    pub id: String,
    /// Squared-voltage band in p.u.².
    pub h_min: f64,
    pub h_max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Line {
    pub from: usize,
    pub to: usize,
    /// Per-unit on the scenario base.
    pub r: f64,
    pub x: f64,
    pub switch: Option<String>,
}

impl Line {
    pub fn is_switchable(&self) -> bool {
        self.switch.is_some()
    }

    pub fn other(&self, bus: usize) -> usize {
        if self.from == bus {
            self.to
        } else {
            self.from
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Load {
    pub id: String,
    pub bus: usize,
    pub p_kw: f64,
    pub q_kvar: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceKind {
    Substation,
    Dg,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Source {
    pub id: String,
    pub bus: usize,
    pub kind: SourceKind,
    pub capacity_kw: f64,
    /// Cells this source may energize; `None` means unrestricted.
    pub allowed_cells: Option<BTreeSet<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub base_kva: f64,
    pub base_kv: f64,
    pub buses: Vec<Bus>,
    pub lines: Vec<Line>,
    pub loads: Vec<Load>,
    pub sources: Vec<Source>,
}

impl GridSpec {
    /// Checks every structural invariant and returns the grid unchanged.
    pub fn validated(self) -> Result<Self> {
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let sem = |msg: String| Err(Error::Semantic(msg));
        if !(self.base_kva > 0.0) {
            return sem(format!("base kva must be positive, got {}", self.base_kva));
        }
        if self.buses.is_empty() {
            return sem("grid has no buses".into());
        }
        unique("bus", self.buses.iter().map(|b| b.id.as_str()))?;
        unique("load", self.loads.iter().map(|l| l.id.as_str()))?;
        unique("source", self.sources.iter().map(|s| s.id.as_str()))?;
        unique("switch", self.lines.iter().filter_map(|l| l.switch.as_deref()))?;
        let n = self.buses.len();
        for b in &self.buses {
            if !(b.h_min < b.h_max) || !(b.h_min > 0.0) {
                return sem(format!("bus {}: voltage limits require 0 < h_min < h_max", b.id));
            }
        }
        for (i, l) in self.lines.iter().enumerate() {
            if l.from >= n || l.to >= n {
                return sem(format!("line {i}: unknown bus"));
            }
            if l.from == l.to {
                return sem(format!("line {i}: both ends on bus {}", self.buses[l.from].id));
            }
            if !(l.r >= 0.0) || !(l.x >= 0.0) {
                return sem(format!("line {i}: negative impedance"));
            }
        }
        for l in &self.loads {
            if l.bus >= n {
                return sem(format!("load {}: unknown bus", l.id));
            }
            if !(l.p_kw >= 0.0) || !(l.q_kvar >= 0.0) {
                return sem(format!("load {}: negative nominal power", l.id));
            }
        }
        for s in &self.sources {
            if s.bus >= n {
                return sem(format!("source {}: unknown bus", s.id));
            }
            if !(s.capacity_kw > 0.0) {
                return sem(format!("source {}: capacity must be positive", s.id));
            }
        }
        let mut uf = UnionFind::<usize>::new(n);
        for l in &self.lines {
            uf.union(l.from, l.to);
        }
        let root = uf.find(0);
        if let Some(b) = (0..n).find(|&b| uf.find(b) != root) {
            return sem(format!(
                "network is not connected: bus {} is unreachable",
                self.buses[b].id
            ));
        }
        Ok(())
    }

    pub fn bus_index(&self, id: &str) -> Option<usize> {
        self.buses.iter().position(|b| b.id == id)
    }

    /// Sum of nominal load active power, in load declaration order.
    pub fn total_load_kw(&self) -> f64 {
        self.loads.iter().map(|l| l.p_kw).fold(0.0, |acc, p| acc + p)
    }

    pub fn switch_count(&self) -> usize {
        self.lines.iter().filter(|l| l.is_switchable()).count()
    }
}

fn unique<'a>(what: &str, ids: impl Iterator<Item = &'a str>) -> Result<()> {
    let mut seen = HashMap::new();
    for (i, id) in ids.enumerate() {
        if seen.insert(id, i).is_some() {
            return Err(Error::Semantic(format!("duplicate {what} id {id:?}")));
        }
    }
    Ok(())
}


#[cfg(test)]
mod tests {
    use super::testing::chain;

    #[test]
    fn rejects_dangling_and_negative_values() {
        let mut g = chain(&[1.0, 2.0]);
        g.loads[0].bus = 9;
        assert!(g.validate().unwrap_err().to_string().contains("unknown bus"));

        let mut g = chain(&[1.0, 2.0]);
        g.lines[0].r = -0.1;
        assert!(g.validate().unwrap_err().to_string().contains("negative impedance"));

        let mut g = chain(&[1.0, 2.0]);
        g.sources[0].capacity_kw = 0.0;
        assert!(g.validate().is_err());

        let mut g = chain(&[1.0, 2.0]);
        g.buses[1].h_min = 1.2;
        assert!(g.validate().is_err());
    }

    #[test]
    fn rejects_disconnected_network() {
        let mut g = chain(&[1.0, 2.0, 3.0]);
        g.lines.pop();
        assert!(g.validate().unwrap_err().to_string().contains("not connected"));
    }

    #[test]
    fn rejects_duplicate_ids() {
        let mut g = chain(&[1.0, 2.0]);
        g.loads[1].id = "l0".into();
        assert!(g.validate().unwrap_err().to_string().contains("duplicate load"));
    }
}
