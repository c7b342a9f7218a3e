//! Linearized branch-flow (LinDistFlow) voltages on energized islands.
//!
//! Every island is a tree rooted at its source bus, which is held at
//! H = 1.0 p.u.². Branch flows are the sums of downstream load (losses
//! neglected) and the squared voltage drops linearly along each branch:
//! `H_child = H_parent - 2 (r P + x Q)`.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{CellGraph, GridSpec};

/// Cells energized by one source.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IslandSpec {
    pub source: usize,
    pub cells: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IslandResult {
    pub source: usize,
    pub buses: Vec<usize>,
    pub load_kw: f64,
    /// Island active load within the source's capacity.
    pub feasible: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VoltageSolution {
    /// Squared voltage magnitude per energized bus.
    pub h: BTreeMap<usize, f64>,
    pub islands: Vec<IslandResult>,
}

/// Solves every island. `closed` holds the indices of closed switch edges.
pub fn solve(
    grid: &GridSpec,
    cg: &CellGraph,
    islands: &[IslandSpec],
    closed: &BTreeSet<usize>,
) -> Result<VoltageSolution> {
    let mut adjacency: Vec<Vec<(usize, usize)>> = vec![Vec::new(); grid.buses.len()];
    for (i, line) in grid.lines.iter().enumerate() {
        if !line.is_switchable() {
            adjacency[line.from].push((line.to, i));
            adjacency[line.to].push((line.from, i));
        }
    }
    for &k in closed {
        let edge = &cg.switches[k];
        let line = &grid.lines[edge.line];
        adjacency[line.from].push((line.to, edge.line));
        adjacency[line.to].push((line.from, edge.line));
    }

    let mut h = BTreeMap::new();
    let mut results = Vec::with_capacity(islands.len());
    for island in islands {
        let source = grid
            .sources
            .get(island.source)
            .ok_or(Error::UnknownSource(island.source))?;
        let members: BTreeSet<usize> = island.cells.iter().copied().collect();
        if !members.contains(&cg.cell_of_bus(source.bus)) {
            return Err(Error::PowerFlow(format!(
                "island of source {} does not contain the source's own cell",
                source.id
            )));
        }
        let buses: BTreeSet<usize> = members
            .iter()
            .flat_map(|&c| cg.cells[c].buses.iter().copied())
            .collect();

        // breadth-first tree from the source bus
        let mut parent: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
        let mut order = vec![source.bus];
        let mut visited = BTreeSet::from([source.bus]);
        let mut queue = VecDeque::from([source.bus]);
        let mut edges = BTreeSet::new();
        while let Some(b) = queue.pop_front() {
            for &(nb, line) in &adjacency[b] {
                if !buses.contains(&nb) {
                    return Err(Error::PowerFlow(format!(
                        "closed path from bus {} leaves the island of source {}",
                        grid.buses[b].id, source.id
                    )));
                }
                edges.insert(line);
                if visited.insert(nb) {
                    parent.insert(nb, (b, line));
                    order.push(nb);
                    queue.push_back(nb);
                }
            }
        }
        if visited.len() != buses.len() {
            return Err(Error::PowerFlow(format!(
                "island of source {} is not connected by closed lines",
                source.id
            )));
        }
        if edges.len() + 1 != buses.len() {
            return Err(Error::PowerFlow(format!(
                "island of source {} contains a loop",
                source.id
            )));
        }

        let mut p = BTreeMap::new();
        let mut q = BTreeMap::new();
        for &b in &buses {
            p.insert(b, 0.0);
            q.insert(b, 0.0);
        }
        let mut load_kw = 0.0;
        for load in grid.loads.iter().filter(|l| buses.contains(&l.bus)) {
            *p.get_mut(&load.bus).unwrap() += load.p_kw / grid.base_kva;
            *q.get_mut(&load.bus).unwrap() += load.q_kvar / grid.base_kva;
            load_kw += load.p_kw;
        }
        // accumulate downstream flow, leaves first
        for &b in order.iter().skip(1).rev() {
            let (up, _) = parent[&b];
            let (pb, qb) = (p[&b], q[&b]);
            *p.get_mut(&up).unwrap() += pb;
            *q.get_mut(&up).unwrap() += qb;
        }
        h.insert(source.bus, 1.0);
        for &b in order.iter().skip(1) {
            let (up, line) = parent[&b];
            let l = &grid.lines[line];
            let hb = h[&up] - 2.0 * (l.r * p[&b] + l.x * q[&b]);
            h.insert(b, hb);
        }
        results.push(IslandResult {
            source: island.source,
            buses: buses.into_iter().collect(),
            load_kw,
            feasible: load_kw <= source.capacity_kw,
        });
    }
    Ok(VoltageSolution { h, islands: results })
}

/// Squared-voltage band violation of a single value.
pub fn penalty(h: f64, h_min: f64, h_max: f64) -> f64 {
    (h - h_max).max(0.0) + (h_min - h).max(0.0)
}

/// Per-load penalty for every load whose bus is energized.
pub fn voltage_penalty(sol: &VoltageSolution, grid: &GridSpec) -> BTreeMap<usize, f64> {
    grid.loads
        .iter()
        .enumerate()
        .filter_map(|(i, load)| {
            let h = *sol.h.get(&load.bus)?;
            let bus = &grid.buses[load.bus];
            Some((i, penalty(h, bus.h_min, bus.h_max)))
        })
        .collect()
}
