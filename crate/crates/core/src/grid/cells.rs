use std::collections::BTreeMap;

use petgraph::unionfind::UnionFind;
use serde::{Deserialize, Serialize};

use super::GridSpec;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub id: usize,
    pub buses: Vec<usize>,
    pub loads: Vec<usize>,
    /// Aggregate nominal active power of the member loads, kW.
    pub power_kw: f64,
}

/// An operable switch between two distinct cells. Its position in
/// [`CellGraph::switches`] is the switch index used by actions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SwitchEdge {
    pub id: String,
    pub line: usize,
    pub cells: (usize, usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellGraph {
    pub cells: Vec<Cell>,
    pub switches: Vec<SwitchEdge>,
    /// `(source index, cell id)` in source declaration order.
    pub attachments: Vec<(usize, usize)>,
    bus_cell: Vec<usize>,
}

impl CellGraph {
    pub fn cell_of_bus(&self, bus: usize) -> usize {
        self.bus_cell[bus]
    }

    pub fn cell_power(&self, cell: usize) -> Result<f64> {
        self.cells.get(cell).map(|c| c.power_kw).ok_or(Error::UnknownCell(cell))
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// Cell holding each source, aligned with the grid's source list.
    pub fn source_cell(&self, source: usize) -> usize {
        self.attachments[source].1
    }

    /// Switch indices touching `cell`, ascending.
    pub fn switches_at(&self, cell: usize) -> impl Iterator<Item = usize> + '_ {
        self.switches
            .iter()
            .enumerate()
            .filter(move |(_, s)| s.cells.0 == cell || s.cells.1 == cell)
            .map(|(i, _)| i)
    }
}

/// Connected components of the network once every switchable line is
/// removed. Cells are numbered by their smallest bus index; switchable lines
/// whose ends fall in the same cell are not operable and are left out.
pub fn node_cells(grid: &GridSpec) -> CellGraph {
    let n = grid.buses.len();
    let mut uf = UnionFind::<usize>::new(n);
    for l in grid.lines.iter().filter(|l| !l.is_switchable()) {
        uf.union(l.from, l.to);
    }
    // buses are visited in ascending order, so the first bus seen for a root
    // is that component's minimum
    let mut root_to_cell: BTreeMap<usize, usize> = BTreeMap::new();
    let mut bus_cell = vec![0; n];
    let mut cells: Vec<Cell> = Vec::new();
    for (b, slot) in bus_cell.iter_mut().enumerate() {
        let root = uf.find(b);
        let id = *root_to_cell.entry(root).or_insert_with(|| {
            cells.push(Cell {
                id: cells.len(),
                buses: Vec::new(),
                loads: Vec::new(),
                power_kw: 0.0,
            });
            cells.len() - 1
        });
        cells[id].buses.push(b);
        *slot = id;
    }
    for (li, load) in grid.loads.iter().enumerate() {
        cells[bus_cell[load.bus]].loads.push(li);
    }
    for cell in &mut cells {
        cell.power_kw = cell
            .loads
            .iter()
            .map(|&l| grid.loads[l].p_kw)
            .fold(0.0, |acc, p| acc + p);
    }
    let switches = grid
        .lines
        .iter()
        .enumerate()
        .filter_map(|(i, l)| {
            let id = l.switch.as_ref()?;
            let (a, b) = (bus_cell[l.from], bus_cell[l.to]);
            (a != b).then(|| SwitchEdge {
                id: id.clone(),
                line: i,
                cells: (a, b),
            })
        })
        .collect();
    let attachments = grid
        .sources
        .iter()
        .enumerate()
        .map(|(i, s)| (i, bus_cell[s.bus]))
        .collect();
    CellGraph {
        cells,
        switches,
        attachments,
        bus_cell,
    }
}
