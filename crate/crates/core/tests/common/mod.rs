//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use dsr_core::grid::{Bus, Line, Load, Source, SourceKind, DEFAULT_H_MAX, DEFAULT_H_MIN};
use dsr_core::{Action, Env, GridSpec, MdpConfig, RestorationState};
use rand::seq::SliceRandom;
use rand::Rng;

pub fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios").join(name)
}

/// Random feeder with `cells` cells declared in order, each a small tree of
/// buses. Cells are joined by a spanning tree of switches plus up to two
/// extra switches that can close loops, and occasionally a switch inside a
/// cell. Buses of cell `c` are declared before those of `c + 1`, so cell
/// ids follow `c`.
pub fn random_grid<R: Rng>(rng: &mut R, cells: usize) -> GridSpec {
    let mut buses = Vec::new();
    let mut members: Vec<Vec<usize>> = Vec::new();
    let mut lines = Vec::new();
    let mut switch_no = 0;
    let mut switch_line = |from: usize, to: usize, rng: &mut R, lines: &mut Vec<Line>| {
        lines.push(Line {
            from,
            to,
            r: rng.gen_range(0.001..0.05),
            x: rng.gen_range(0.001..0.05),
            switch: Some(format!("s{switch_no}")),
        });
        switch_no += 1;
    };
    for c in 0..cells {
        let size = rng.gen_range(1..=3);
        let mut mine = Vec::new();
        for j in 0..size {
            let b = buses.len();
            buses.push(Bus {
                id: format!("c{c}b{j}"),
                h_min: DEFAULT_H_MIN,
                h_max: DEFAULT_H_MAX,
            });
            if let Some(&up) = mine.choose(rng) {
                lines.push(Line {
                    from: up,
                    to: b,
                    r: rng.gen_range(0.001..0.05),
                    x: rng.gen_range(0.001..0.05),
                    switch: None,
                });
            }
            mine.push(b);
        }
        if mine.len() > 1 && rng.gen_bool(0.2) {
            switch_line(mine[0], mine[mine.len() - 1], rng, &mut lines);
        }
        members.push(mine);
    }
    for c in 1..cells {
        let other = rng.gen_range(0..c);
        let a = *members[other].choose(rng).unwrap();
        let b = *members[c].choose(rng).unwrap();
        switch_line(a, b, rng, &mut lines);
    }
    if cells > 1 {
        for _ in 0..rng.gen_range(0..=2) {
            let c1 = rng.gen_range(0..cells);
            let c2 = (c1 + rng.gen_range(1..cells)) % cells;
            let a = *members[c1].choose(rng).unwrap();
            let b = *members[c2].choose(rng).unwrap();
            switch_line(a, b, rng, &mut lines);
        }
    }
    let mut loads = Vec::new();
    for b in 0..buses.len() {
        if rng.gen_bool(0.7) {
            let p: f64 = rng.gen_range(0.0..500.0);
            loads.push(Load {
                id: format!("l{b}"),
                bus: b,
                p_kw: p,
                q_kvar: 0.3 * p,
            });
        }
    }
    let n_sources = rng.gen_range(1..=cells.min(3));
    let mut homes: Vec<usize> = (0..cells).collect();
    homes.shuffle(rng);
    let sources = homes[..n_sources]
        .iter()
        .enumerate()
        .map(|(i, &cell)| {
            let allowed = (i > 0 && rng.gen_bool(0.5)).then(|| {
                let mut set: BTreeSet<usize> = (0..cells).filter(|_| rng.gen_bool(0.5)).collect();
                set.insert(cell);
                set
            });
            Source {
                id: format!("src{i}"),
                bus: members[cell][0],
                kind: if i == 0 { SourceKind::Substation } else { SourceKind::Dg },
                capacity_kw: rng.gen_range(100.0..2000.0),
                allowed_cells: allowed,
            }
        })
        .collect();
    GridSpec {
        base_kva: 1000.0,
        base_kv: 4.16,
        buses,
        lines,
        loads,
        sources,
    }
}

pub fn random_env<R: Rng>(rng: &mut R, max_cells: usize) -> Env {
    let cells = rng.gen_range(1..=max_cells);
    let grid = random_grid(rng, cells);
    let cfg = MdpConfig {
        horizon: rng.gen_range(1..=cells + 1),
        dg_shutdown_enabled: rng.gen_bool(0.5),
        ..MdpConfig::default()
    };
    Env::from_parts("random", grid, cfg).expect("generated grids are valid")
}

/// States along one uniformly random legal walk, reset included.
pub fn random_walk_states<R: Rng>(env: &Env, rng: &mut R) -> Vec<RestorationState> {
    let mut s = env.reset().unwrap();
    let mut out = vec![s.clone()];
    for _ in 0..env.horizon() {
        let legal = env.legal_actions(&s);
        let a = *legal.choose(rng).unwrap();
        s = env.step(&s, a).unwrap().state;
        out.push(s.clone());
    }
    out
}

fn find(parent: &mut [usize], x: usize) -> usize {
    let mut r = x;
    while parent[r] != r {
        r = parent[r];
    }
    r
}

/// Legal actions by testing every closure against the loop, island-merge,
/// revisit and source-restriction predicates on the resulting cell graph.
pub fn brute_force_legal(env: &Env, s: &RestorationState) -> Vec<Action> {
    let n = env.cells.len();
    let active: Vec<(usize, usize)> = env
        .cells
        .attachments
        .iter()
        .copied()
        .filter(|&(src, _)| !s.tripped[src])
        .collect();
    let energized_now = s.cell_source.iter().filter(|c| c.is_some()).count();
    let mut out = vec![Action::NoOp];
    for k in 0..env.cells.switches.len() {
        if s.switch_closed[k] {
            continue;
        }
        let mut parent: Vec<usize> = (0..n).collect();
        let mut has_loop = false;
        for (j, sw) in env.cells.switches.iter().enumerate() {
            if s.switch_closed[j] || j == k {
                let (a, b) = (find(&mut parent, sw.cells.0), find(&mut parent, sw.cells.1));
                if a == b {
                    has_loop = true;
                }
                parent[a] = b;
            }
        }
        if has_loop {
            continue;
        }
        let mut sources_in: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for &(src, cell) in &active {
            sources_in.entry(find(&mut parent, cell)).or_default().push(src);
        }
        if sources_in.values().any(|v| v.len() > 1) {
            continue;
        }
        let energized: Vec<usize> = (0..n)
            .filter(|&c| sources_in.contains_key(&find(&mut parent, c)))
            .collect();
        if energized.len() <= energized_now {
            continue;
        }
        let restricted = sources_in.iter().any(|(&root, srcs)| {
            env.grid.sources[srcs[0]]
                .allowed_cells
                .as_ref()
                .is_some_and(|allowed| (0..n).any(|c| find(&mut parent.clone(), c) == root && !allowed.contains(&c)))
        });
        if !restricted || env.cfg.dg_shutdown_enabled {
            out.push(Action::Close(k));
        }
    }
    out
}

/// Buses and lines (non-switchable internal lines plus closed switches) of
/// the island fed by `src` in state `s`.
pub fn island(env: &Env, s: &RestorationState, src: usize) -> (Vec<usize>, Vec<usize>) {
    let cells: BTreeSet<usize> = s.frontiers[src].iter().copied().collect();
    let buses: Vec<usize> = cells.iter().flat_map(|&c| env.cells.cells[c].buses.clone()).collect();
    let bus_set: BTreeSet<usize> = buses.iter().copied().collect();
    let closed_lines: BTreeSet<usize> = env
        .cells
        .switches
        .iter()
        .enumerate()
        .filter(|(k, _)| s.switch_closed[*k])
        .map(|(_, sw)| sw.line)
        .collect();
    let lines = env
        .grid
        .lines
        .iter()
        .enumerate()
        .filter(|(i, l)| {
            bus_set.contains(&l.from) && bus_set.contains(&l.to) && (!l.is_switchable() || closed_lines.contains(i))
        })
        .map(|(i, _)| i)
        .collect();
    (buses, lines)
}

/// Squared voltages from the full linear system: nodal balance of P and Q
/// at every non-slack bus, one drop equation per line and `H = 1` at the
/// slack, solved by Gaussian elimination with partial pivoting.
pub fn direct_voltages(grid: &GridSpec, buses: &[usize], lines: &[usize], slack: usize) -> BTreeMap<usize, f64> {
    let nb = buses.len();
    let nl = lines.len();
    let n = 2 * nl + nb;
    let col_p = |l: usize| l;
    let col_q = |l: usize| nl + l;
    let col_h = |b: usize| 2 * nl + buses.iter().position(|&x| x == b).unwrap();
    let mut a = vec![vec![0.0; n + 1]; n];
    let mut row = 0;
    for &b in buses.iter().filter(|&&b| b != slack) {
        for (li, &l) in lines.iter().enumerate() {
            let line = &grid.lines[l];
            let sign = if line.to == b {
                1.0
            } else if line.from == b {
                -1.0
            } else {
                0.0
            };
            a[row][col_p(li)] = sign;
            a[row + 1][col_q(li)] = sign;
        }
        let (p, q) = grid
            .loads
            .iter()
            .filter(|ld| ld.bus == b)
            .fold((0.0, 0.0), |(p, q), ld| {
                (p + ld.p_kw / grid.base_kva, q + ld.q_kvar / grid.base_kva)
            });
        a[row][n] = p;
        a[row + 1][n] = q;
        row += 2;
    }
    for (li, &l) in lines.iter().enumerate() {
        let line = &grid.lines[l];
        a[row][col_h(line.from)] = 1.0;
        a[row][col_h(line.to)] = -1.0;
        a[row][col_p(li)] = -2.0 * line.r;
        a[row][col_q(li)] = -2.0 * line.x;
        row += 1;
    }
    a[row][col_h(slack)] = 1.0;
    a[row][n] = 1.0;
    assert_eq!(row + 1, n, "island must be a tree");

    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        a.swap(col, pivot);
        assert!(a[col][col].abs() > 1e-12, "singular system");
        for r in 0..n {
            if r != col {
                let f = a[r][col] / a[col][col];
                if f != 0.0 {
                    for c in col..=n {
                        a[r][c] -= f * a[col][c];
                    }
                }
            }
        }
    }
    buses
        .iter()
        .map(|&b| (b, a[col_h(b)][n] / a[col_h(b)][col_h(b)]))
        .collect()
}

/// Worst relative error between backprop and central differences over every
/// scalar parameter of `store`. `loss` must rebuild the graph from scratch
/// and be deterministic. Errors are relative to `max(|analytic|, |numeric|,
/// floor)`.
pub fn param_gradcheck<F>(store: &dsr_autodiff::ParamStore, floor: f64, loss: F) -> f64
where
    F: Fn(&dsr_autodiff::ParamStore, &mut dsr_autodiff::Graph) -> dsr_autodiff::Var,
{
    const EPS: f64 = 1e-6;
    let value = |s: &dsr_autodiff::ParamStore| {
        let mut g = dsr_autodiff::Graph::new();
        let l = loss(s, &mut g);
        g.value(l).data()[0]
    };
    let mut g = dsr_autodiff::Graph::new();
    let l = loss(store, &mut g);
    let analytic = g.backward(l).unwrap().for_store(store);
    let mut probe = store.clone();
    let mut worst: f64 = 0.0;
    for (i, id) in store.ids().enumerate() {
        for j in 0..store.get(id).len() {
            let orig = store.get(id).data()[j];
            probe.get_mut(id).data_mut()[j] = orig + EPS;
            let up = value(&probe);
            probe.get_mut(id).data_mut()[j] = orig - EPS;
            let down = value(&probe);
            probe.get_mut(id).data_mut()[j] = orig;
            let fd = (up - down) / (2.0 * EPS);
            let a = analytic[i].data()[j];
            worst = worst.max((a - fd).abs() / floor.max(a.abs()).max(fd.abs()));
        }
    }
    worst
}
