//! Peierls barrier, Mañé potential and Aubry set of the discrete problem, and
//! certificates (domination, calibration, energy, viscosity residuals) for
//! candidate weak KAM solutions.
//!
//! Two routes to the barrier are provided.  [`barrier_slice`] follows the
//! definition: a point source is pushed through `ℒ_t + ct` and the minimum
//! over a late time window is kept.  [`Barrier`] works on the kernel graph
//! directly.  With `u` a critical fixed point, the reduced weights
//!
//! ```text
//! w'(y → x) = h_δ(y, x) + cδ + u(y) − u(x) ≥ 0
//! ```
//!
//! turn chain costs into `u(x_end) − u(x_start) + Σ w'`.  Critical cycles
//! are the cycles of (numerically) zero reduced weight, and long chains
//! that realize the barrier must visit them, so
//! `h(x, y) = u(y) − u(x) + min_{p critical} D'(x, p) + D'(p, y)` with `D'`
//! the reduced shortest-path distance.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::{action, integrate, Control, HorizontalPath, Lagrangian, MAX_DIM};
use crate::grid::GridFunction;
use crate::semigroup::{lo_step, CriticalResult};
use crate::tonelli::{minimize_to_lift, KernelEntry, KernelTable, MinimizeOptions};

/// Outgoing adjacency `source → [(target, cost)]` of a kernel.
fn outgoing(kernel: &KernelTable) -> Vec<Vec<(u32, f64)>> {
    let n = kernel.grid().len();
    let mut out = vec![Vec::new(); n];
    for x in 0..n {
        for e in kernel.entries(x) {
            out[e.source as usize].push((x as u32, e.cost));
        }
    }
    out
}

/// Breadth-first hop counts from `source` along kernel pairs.
pub fn hop_distances(kernel: &KernelTable, source: usize) -> Vec<Option<usize>> {
    let out = outgoing(kernel);
    let mut hops = vec![None; out.len()];
    hops[source] = Some(0);
    let mut queue = VecDeque::from([source]);
    while let Some(y) = queue.pop_front() {
        let d = hops[y].unwrap_or(0);
        for &(x, _) in &out[y] {
            if hops[x as usize].is_none() {
                hops[x as usize] = Some(d + 1);
                queue.push_back(x as usize);
            }
        }
    }
    hops
}

#[derive(Debug, Clone)]
pub struct BarrierSlice {
    pub source: usize,
    /// `min_{t ∈ [T₀, T₁]} h_t(z, ·) + ct`.
    pub values: GridFunction,
    pub window: (f64, f64),
    /// Largest nodewise spread of `h_t(z, ·) + ct` over the window.
    pub oscillation: f64,
    pub stabilized: bool,
    pub ceiling: f64,
}

/// Barrier `h(z, ·)` by point-source Lax–Oleinik iteration.
///
/// The source starts at 0 and every other node at a finite ceiling `B`, four
/// times a chain-cost bound over the hop diameter; a slice whose window
/// still touches `B/2` or oscillates by more than `osc_tol` is flagged as not
/// stabilized.
pub fn barrier_slice(kernel: &KernelTable, c: f64, source: usize, t0: f64, t1: f64, osc_tol: f64) -> Result<BarrierSlice> {
    let grid = *kernel.grid();
    if source >= grid.len() {
        return Err(Error::InvalidInput(format!("source {source} outside grid")));
    }
    if !(t0 > 0.0 && t1 >= t0) {
        return Err(Error::InvalidInput(format!("bad barrier window [{t0}, {t1}]")));
    }
    let delta = kernel.delta();
    let hops = hop_distances(kernel, source);
    let diameter = hops.iter().map(|h| h.unwrap_or(grid.len())).max().unwrap_or(0);
    let max_weight = (0..grid.len())
        .flat_map(|x| kernel.entries(x).iter().map(move |e| (e.cost + c * delta).abs()))
        .fold(0.0, f64::max);
    let ceiling = 4.0 * (1.0 + max_weight * diameter as f64);
    let mut w = GridFunction::constant(grid, ceiling);
    w.values[source] = 0.0;
    let first = (t0 / delta).ceil() as usize;
    let last = (t1 / delta).floor().max(first as f64) as usize;
    let mut lo = vec![f64::INFINITY; grid.len()];
    let mut hi = vec![f64::NEG_INFINITY; grid.len()];
    for n in 1..=last {
        w = lo_step(kernel, &w)?.shifted(c * delta);
        if n >= first {
            for (i, v) in w.values.iter().enumerate() {
                lo[i] = lo[i].min(*v);
                hi[i] = hi[i].max(*v);
            }
        }
    }
    let oscillation = lo.iter().zip(&hi).map(|(a, b)| b - a).fold(0.0, f64::max);
    let bounded = hi.iter().all(|v| *v < 0.5 * ceiling);
    Ok(BarrierSlice {
        source,
        values: GridFunction { grid, values: lo },
        window: (first as f64 * delta, last as f64 * delta),
        oscillation,
        stabilized: bounded && oscillation <= osc_tol,
        ceiling,
    })
}

#[derive(Clone, Copy, PartialEq)]
struct HeapItem {
    dist: f64,
    hops: usize,
    state: usize,
}

impl Eq for HeapItem {}

impl Ord for HeapItem {
    fn cmp(&self, other: &Self) -> Ordering {
        // min-heap on (dist, hops, state)
        other
            .dist
            .total_cmp(&self.dist)
            .then(other.hops.cmp(&self.hops))
            .then(other.state.cmp(&self.state))
    }
}

impl PartialOrd for HeapItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Barrier and Mañé potential of a discrete critical problem.
#[derive(Debug, Clone)]
pub struct Barrier {
    u: GridFunction,
    c: f64,
    delta: f64,
    tol: f64,
    /// `incoming[x] = [(y, w'(y → x))]`.
    incoming: Vec<Vec<(u32, f64)>>,
    outgoing: Vec<Vec<(u32, f64)>>,
    classes: Vec<Vec<usize>>,
    class_of: Vec<Option<usize>>,
}

impl Barrier {
    /// `tol_aubry` defaults to `max(3 · residual, 1e−9)`.
    pub fn new(kernel: &KernelTable, critical: &CriticalResult, tol_aubry: Option<f64>) -> Result<Self> {
        kernel.grid().check_same(&critical.u.grid)?;
        let tol = tol_aubry.unwrap_or((3.0 * critical.fixed_point_residual).max(1e-9));
        if !(tol > 0.0) {
            return Err(Error::InvalidInput("Aubry tolerance must be positive".into()));
        }
        let u = critical.u.clone();
        let c = critical.c_estimate;
        let delta = kernel.delta();
        let n = u.len();
        let reduced = |x: usize, e: &KernelEntry| (e.cost + c * delta + u.values[e.source as usize] - u.values[x]).max(0.0);
        let incoming: Vec<Vec<(u32, f64)>> = (0..n)
            .map(|x| kernel.entries(x).iter().map(|e| (e.source, reduced(x, e))).collect())
            .collect();
        let mut outgoing = vec![Vec::new(); n];
        for (x, list) in incoming.iter().enumerate() {
            for &(y, w) in list {
                outgoing[y as usize].push((x as u32, w));
            }
        }
        let (classes, class_of) = critical_classes(&outgoing, tol);
        Ok(Self {
            u,
            c,
            delta,
            tol,
            incoming,
            outgoing,
            classes,
            class_of,
        })
    }

    pub fn tol(&self) -> f64 {
        self.tol
    }

    pub fn critical_value(&self) -> f64 {
        self.c
    }

    pub fn classes(&self) -> &[Vec<usize>] {
        &self.classes
    }

    pub fn is_critical(&self, x: usize) -> bool {
        self.class_of[x].is_some()
    }

    /// Reduced shortest paths from (`forward`) or to (`!forward`) the seeds.
    /// With `through_critical`, only chains that visit a critical node count.
    fn dijkstra(&self, seeds: &[usize], forward: bool, through_critical: bool) -> (Vec<f64>, Vec<usize>) {
        let n = self.u.len();
        let layers = if through_critical { 2 } else { 1 };
        let mut dist = vec![f64::INFINITY; n * layers];
        let mut hops = vec![usize::MAX; n * layers];
        let mut heap = BinaryHeap::new();
        for &s in seeds {
            let layer = usize::from(through_critical && self.is_critical(s));
            let st = layer * n + s;
            dist[st] = 0.0;
            hops[st] = 0;
            heap.push(HeapItem { dist: 0.0, hops: 0, state: st });
        }
        let adj = if forward { &self.outgoing } else { &self.incoming };
        while let Some(HeapItem { dist: d, hops: k, state }) = heap.pop() {
            if d > dist[state] || (d == dist[state] && k > hops[state]) {
                continue;
            }
            let layer = state / n;
            let node = state % n;
            for &(next, w) in &adj[node] {
                let next = next as usize;
                let next_layer = if through_critical && self.is_critical(next) { 1 } else { layer };
                let st = next_layer * n + next;
                let nd = d + w;
                if nd < dist[st] || (nd == dist[st] && k + 1 < hops[st]) {
                    dist[st] = nd;
                    hops[st] = k + 1;
                    heap.push(HeapItem { dist: nd, hops: k + 1, state: st });
                }
            }
        }
        if through_critical {
            (dist[n..].to_vec(), hops[n..].to_vec())
        } else {
            (dist, hops)
        }
    }

    /// `h(source, ·)`.
    pub fn row(&self, source: usize) -> GridFunction {
        let (d, _) = self.dijkstra(&[source], true, true);
        let us = self.u.values[source];
        let values = d.iter().zip(&self.u.values).map(|(d, uy)| d + uy - us).collect();
        GridFunction { grid: self.u.grid, values }
    }

    /// `h(·, target)`.
    pub fn column(&self, target: usize) -> GridFunction {
        let (d, _) = self.dijkstra(&[target], false, true);
        let ut = self.u.values[target];
        let values = d.iter().zip(&self.u.values).map(|(d, ux)| d + ut - ux).collect();
        GridFunction { grid: self.u.grid, values }
    }

    /// `Φ(source, ·)` and the minimizing times `t*` (`Φ(x, x) = 0` at `t* = 0`).
    pub fn mane_row(&self, source: usize) -> (GridFunction, Vec<f64>) {
        let (d, hops) = self.dijkstra(&[source], true, false);
        let us = self.u.values[source];
        let values = d.iter().zip(&self.u.values).map(|(d, uy)| d + uy - us).collect();
        let times = hops.iter().map(|&k| k as f64 * self.delta).collect();
        (GridFunction { grid: self.u.grid, values }, times)
    }

    /// `h(x, x)` for every node.
    pub fn diagonal(&self) -> GridFunction {
        let n = self.u.len();
        let mut diag: Vec<f64> = (0..n).map(|x| if self.is_critical(x) { 0.0 } else { f64::INFINITY }).collect();
        let per_class: Vec<Vec<f64>> = self
            .classes
            .par_iter()
            .map(|class| {
                let (to, _) = self.dijkstra(class, false, false);
                let (from, _) = self.dijkstra(class, true, false);
                to.iter().zip(&from).map(|(a, b)| a + b).collect()
            })
            .collect();
        for d in per_class {
            for (x, v) in d.into_iter().enumerate() {
                if !self.is_critical(x) {
                    diag[x] = diag[x].min(v);
                }
            }
        }
        GridFunction { grid: self.u.grid, values: diag }
    }
}

/// Strongly connected components of the subgraph of reduced weight `≤ tol`
/// that carry a cycle (a self-loop or at least two nodes).
fn critical_classes(outgoing: &[Vec<(u32, f64)>], tol: f64) -> (Vec<Vec<usize>>, Vec<Option<usize>>) {
    let n = outgoing.len();
    let adj: Vec<Vec<usize>> = outgoing
        .iter()
        .map(|l| l.iter().filter(|(_, w)| *w <= tol).map(|(x, _)| *x as usize).collect())
        .collect();
    // iterative Tarjan
    let mut index = vec![usize::MAX; n];
    let mut low = vec![0usize; n];
    let mut on_stack = vec![false; n];
    let mut stack = Vec::new();
    let mut counter = 0;
    let mut comps: Vec<Vec<usize>> = Vec::new();
    for root in 0..n {
        if index[root] != usize::MAX {
            continue;
        }
        let mut call: Vec<(usize, usize)> = vec![(root, 0)];
        index[root] = counter;
        low[root] = counter;
        counter += 1;
        stack.push(root);
        on_stack[root] = true;
        while let Some(&mut (v, ref mut next)) = call.last_mut() {
            if *next < adj[v].len() {
                let w = adj[v][*next];
                *next += 1;
                if index[w] == usize::MAX {
                    index[w] = counter;
                    low[w] = counter;
                    counter += 1;
                    stack.push(w);
                    on_stack[w] = true;
                    call.push((w, 0));
                } else if on_stack[w] {
                    low[v] = low[v].min(index[w]);
                }
            } else {
                call.pop();
                if let Some(&(parent, _)) = call.last() {
                    low[parent] = low[parent].min(low[v]);
                }
                if low[v] == index[v] {
                    let mut comp = Vec::new();
                    loop {
                        let w = stack.pop().expect("tarjan stack");
                        on_stack[w] = false;
                        comp.push(w);
                        if w == v {
                            break;
                        }
                    }
                    comps.push(comp);
                }
            }
        }
    }
    let mut classes = Vec::new();
    let mut class_of = vec![None; n];
    for mut comp in comps {
        let cyclic = comp.len() > 1 || adj[comp[0]].contains(&comp[0]);
        if cyclic {
            comp.sort_unstable();
            for &x in &comp {
                class_of[x] = Some(classes.len());
            }
            classes.push(comp);
        }
    }
    (classes, class_of)
}

#[derive(Debug, Clone)]
pub struct AubryMask {
    pub in_set: Vec<bool>,
    pub diagonal: GridFunction,
    pub tol: f64,
}

impl AubryMask {
    pub fn from_diagonal(diagonal: GridFunction, tol: f64) -> Self {
        let in_set = diagonal.values.iter().map(|d| *d <= tol).collect();
        Self { in_set, diagonal, tol }
    }

    pub fn nodes(&self) -> Vec<usize> {
        (0..self.in_set.len()).filter(|&i| self.in_set[i]).collect()
    }

    /// `node,h_diag,in_set` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("node,h_diag,in_set\n");
        for (i, (d, m)) in self.diagonal.values.iter().zip(&self.in_set).enumerate() {
            s.push_str(&format!("{i},{d},{}\n", u8::from(*m)));
        }
        s
    }
}

/// Thresholded barrier diagonal `{x : h(x, x) ≤ tol_aubry}`.
pub fn aubry_set(barrier: &Barrier) -> AubryMask {
    AubryMask::from_diagonal(barrier.diagonal(), barrier.tol())
}

/// `min over measures of Σ_y μ(y) h(y, ·)` for measures given as node weights.
pub fn discount_limit_candidate(barrier: &Barrier, measures: &[Vec<(usize, f64)>]) -> Result<GridFunction> {
    if measures.is_empty() {
        return Err(Error::InvalidInput("at least one measure is required".into()));
    }
    let grid = barrier.u.grid;
    let mut best = vec![f64::INFINITY; grid.len()];
    for mu in measures {
        let mass: f64 = mu.iter().map(|(_, w)| w).sum();
        if !(mass > 0.0) {
            return Err(Error::InvalidInput("measure has no mass".into()));
        }
        let mut acc = vec![0.0; grid.len()];
        for &(y, w) in mu {
            let row = barrier.row(y);
            for (a, h) in acc.iter_mut().zip(&row.values) {
                *a += w / mass * h;
            }
        }
        for (b, a) in best.iter_mut().zip(acc) {
            *b = b.min(a);
        }
    }
    Ok(GridFunction { grid, values: best })
}

/// Backward chain of kernel argmins: `x₀ = start`, `x_{k+1}` realizing
/// `min_y u(y) + h_δ(y, x_k)`.  Returns the nodes and the entries used.
pub fn backward_chain(kernel: &KernelTable, u: &GridFunction, start: usize, steps: usize) -> (Vec<usize>, Vec<KernelEntry>) {
    let mut nodes = vec![start];
    let mut used = Vec::with_capacity(steps);
    let mut x = start;
    for _ in 0..steps {
        let Some(e) = kernel
            .entries(x)
            .iter()
            .min_by(|a, b| (u.values[a.source as usize] + a.cost).total_cmp(&(u.values[b.source as usize] + b.cost)))
        else {
            break;
        };
        used.push(*e);
        x = e.source as usize;
        nodes.push(x);
    }
    (nodes, used)
}

/// Horizontal path through a backward chain, traversed forward in time, with
/// every segment re-minimized.
pub fn chain_path(
    kernel: &KernelTable,
    lag: &Lagrangian,
    nodes: &[usize],
    used: &[KernelEntry],
    opts: &MinimizeOptions,
) -> Result<HorizontalPath> {
    let grid = kernel.grid();
    let space = grid.space();
    let delta = kernel.delta();
    let mut controls: Vec<Control> = Vec::new();
    for k in (0..used.len()).rev() {
        let target = grid.point(nodes[k]);
        let e = used[k];
        let lift = [e.lift[0] as i64, e.lift[1] as i64, e.lift[2] as i64];
        let source = space.shift(&grid.point(e.source as usize), &lift);
        let seg = minimize_to_lift(lag, &source, &target, delta, kernel.lambda(), opts)?;
        controls.extend_from_slice(&seg.path.controls);
    }
    if controls.is_empty() {
        return Err(Error::InvalidInput("empty chain".into()));
    }
    let start = grid.point(*nodes.last().expect("non-empty chain"));
    let dt = delta / opts.steps_for(delta) as f64;
    integrate(space, &start, &controls, -(controls.len() as f64) * dt, dt)
}

/// `max_t |E(x(t), u(t)) − c|` along the path.
pub fn energy_check(lag: &Lagrangian, path: &HorizontalPath, c: f64) -> f64 {
    path.controls
        .iter()
        .zip(&path.states)
        .map(|(u, p)| (lag.energy(p, u) - c).abs())
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Serialize)]
pub struct CalibrationOptions {
    pub tol: f64,
    pub chain_steps: usize,
    pub sample_paths: usize,
    pub path_steps: usize,
    pub seed: u64,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            chain_steps: 20,
            sample_paths: 50,
            path_steps: 40,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CalibrationReport {
    /// `max u(x) − u(y) − h_δ(y, x) − cδ` over kernel pairs.
    pub max_pair_defect: f64,
    pub worst_pair: Option<(usize, usize)>,
    /// Pairs violating domination by more than the tolerance (first 100).
    pub violations: Vec<(usize, usize, f64)>,
    /// `max u(end) − u(start) − A_{L+c}` over random paths, with `u`
    /// interpolated between nodes.
    pub max_path_defect: f64,
    /// Largest per-step `|u(x_k) − u(x_{k+1}) − h_δ − cδ|` along backward chains.
    pub max_chain_defect: f64,
    pub worst_chain_node: Option<usize>,
    pub dominated: bool,
    pub calibrated: bool,
}

/// Domination on kernel pairs and sampled paths, calibration along backward
/// argmin chains from every node.
pub fn calibration_check(
    kernel: &KernelTable,
    lag: &Lagrangian,
    u: &GridFunction,
    c: f64,
    opts: &CalibrationOptions,
) -> Result<CalibrationReport> {
    kernel.grid().check_same(&u.grid)?;
    let grid = *kernel.grid();
    let cd = c * kernel.delta();
    let mut max_pair_defect = f64::NEG_INFINITY;
    let mut worst_pair = None;
    let mut violations = Vec::new();
    for x in 0..grid.len() {
        for e in kernel.entries(x) {
            let y = e.source as usize;
            let d = u.values[x] - u.values[y] - e.cost - cd;
            if d > max_pair_defect {
                max_pair_defect = d;
                worst_pair = Some((y, x));
            }
            if d > opts.tol && violations.len() < 100 {
                violations.push((y, x, d));
            }
        }
    }

    let space = grid.space();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let dt = kernel.delta() / 4.0;
    let mut max_path_defect = f64::NEG_INFINITY;
    for _ in 0..opts.sample_paths {
        let mut start = [0.0; MAX_DIM];
        for s in start.iter_mut().take(space.dim()) {
            let z: f64 = StandardNormal.sample(&mut rng);
            *s = z.abs().fract();
        }
        let controls: Vec<Control> = (0..opts.path_steps.max(1))
            .map(|_| {
                let mut c = [0.0; MAX_DIM];
                for ci in c.iter_mut().take(space.rank()) {
                    *ci = StandardNormal.sample(&mut rng);
                }
                c
            })
            .collect();
        let path = integrate(space, &start, &controls, 0.0, dt)?;
        let a = action(lag, &path, 0.0) + c * dt * controls.len() as f64;
        let end = *path.states.last().expect("path has states");
        let d = u.interpolate(&end)? - u.interpolate(&path.states[0])? - a;
        max_path_defect = max_path_defect.max(d);
    }

    let chains: Vec<(f64, usize)> = (0..grid.len())
        .into_par_iter()
        .map(|x| {
            let (nodes, used) = backward_chain(kernel, u, x, opts.chain_steps);
            let worst = nodes
                .windows(2)
                .zip(&used)
                .map(|(w, e)| (u.values[w[0]] - u.values[w[1]] - e.cost - cd).abs())
                .fold(0.0, f64::max);
            (worst, x)
        })
        .collect();
    let (max_chain_defect, worst_chain_node) = chains
        .iter()
        .copied()
        .fold((0.0, None), |acc, (d, x)| if d > acc.0 { (d, Some(x)) } else { acc });
    Ok(CalibrationReport {
        max_pair_defect,
        worst_pair,
        violations,
        max_path_defect,
        max_chain_defect,
        worst_chain_node,
        dominated: max_pair_defect <= opts.tol,
        calibrated: max_chain_defect <= opts.tol,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ViscosityReport {
    /// `max [u(x) − u(y) − h_δ(y, x) − cδ]₊` over kernel segments.
    pub subsolution: f64,
    pub worst_sub_node: Option<usize>,
    /// `max_x [min_y u(y) + h_δ(y, x) + cδ − u(x)]₊`.
    pub supersolution: f64,
    pub worst_super_node: Option<usize>,
}

/// Segment-form residuals of the sub- and supersolution inequalities.  Both
/// vanishing is necessary for `u` to solve the critical equation; it is not
/// claimed to be sufficient.
pub fn viscosity_residual(kernel: &KernelTable, u: &GridFunction, c: f64) -> Result<ViscosityReport> {
    kernel.grid().check_same(&u.grid)?;
    let cd = c * kernel.delta();
    let image = lo_step(kernel, u)?;
    let mut report = ViscosityReport {
        subsolution: 0.0,
        worst_sub_node: None,
        supersolution: 0.0,
        worst_super_node: None,
    };
    for x in 0..u.len() {
        for e in kernel.entries(x) {
            let d = u.values[x] - u.values[e.source as usize] - e.cost - cd;
            if d > report.subsolution {
                report.subsolution = d;
                report.worst_sub_node = Some(x);
            }
        }
        let gap = image.values[x] + cd - u.values[x];
        if gap > report.supersolution {
            report.supersolution = gap;
            report.worst_super_node = Some(x);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{ModelSpace, Potential, TrigTerm};
    use crate::grid::Grid;
    use crate::semigroup::solve_critical;
    use crate::tonelli::KernelOptions;

    fn bump(n: usize) -> (Lagrangian, KernelTable) {
        let s = ModelSpace::flat_torus(1).unwrap();
        let pot = Potential::new(
            s,
            vec![
                TrigTerm { wave: vec![0], amplitude: 0.5, phase: 0.0 },
                TrigTerm { wave: vec![1], amplitude: 0.5, phase: 0.0 },
            ],
        )
        .unwrap();
        let lag = Lagrangian::new(pot, &[]).unwrap();
        let grid = Grid::uniform(s, n).unwrap();
        let k = KernelTable::build(&lag, &grid, 0.1, 0.0, &KernelOptions::default()).unwrap();
        (lag, k)
    }

    #[test]
    fn aubry_set_of_bump_is_its_maximum() {
        let (_, k) = bump(32);
        let crit = solve_critical(&k, 1e-12, 10_000, 0).unwrap();
        let b = Barrier::new(&k, &crit, None).unwrap();
        let mask = aubry_set(&b);
        assert_eq!(mask.nodes(), vec![0]);
        assert!(mask.diagonal.values[16] > 0.1);
    }

    #[test]
    fn slices_agree_with_factorized_barrier() {
        let (_, k) = bump(32);
        let crit = solve_critical(&k, 1e-12, 10_000, 0).unwrap();
        let b = Barrier::new(&k, &crit, None).unwrap();
        for z in [0, 5, 16] {
            let s = barrier_slice(&k, crit.c_estimate, z, 20.0, 30.0, 1e-6).unwrap();
            assert!(s.stabilized, "oscillation {}", s.oscillation);
            let row = b.row(z);
            assert!(s.values.sup_distance(&row).unwrap() < 1e-8);
        }
    }

    #[test]
    fn mane_potential_vanishes_on_diagonal_and_bounds_barrier() {
        let (_, k) = bump(32);
        let crit = solve_critical(&k, 1e-12, 10_000, 0).unwrap();
        let b = Barrier::new(&k, &crit, None).unwrap();
        for x in [0, 3, 11] {
            let (phi, t) = b.mane_row(x);
            assert_eq!(phi.values[x], 0.0);
            assert_eq!(t[x], 0.0);
            let h = b.row(x);
            for y in 0..phi.len() {
                assert!(phi.values[y] <= h.values[y] + 1e-9);
            }
        }
    }

    #[test]
    fn corrupted_node_is_localized() {
        let (lag, k) = bump(32);
        let crit = solve_critical(&k, 1e-12, 10_000, 0).unwrap();
        let mut u = crit.u.clone();
        u.values[9] += 0.1;
        let opts = CalibrationOptions { sample_paths: 0, ..CalibrationOptions::default() };
        let r = calibration_check(&k, &lag, &u, crit.c_estimate, &opts).unwrap();
        assert!(!r.dominated);
        assert!(r.violations.iter().all(|&(_, x, _)| x == 9));
        let clean = calibration_check(&k, &lag, &crit.u, crit.c_estimate, &CalibrationOptions::default()).unwrap();
        assert!(clean.dominated && clean.calibrated, "{clean:?}");
    }

    #[test]
    fn zero_function_is_subsolution_but_not_solution() {
        let (_, k) = bump(32);
        let zero = GridFunction::constant(*k.grid(), 0.0);
        let r = viscosity_residual(&k, &zero, 1.0).unwrap();
        assert!(r.subsolution <= 1e-12);
        assert!(r.supersolution > 0.01);
        let crit = solve_critical(&k, 1e-12, 10_000, 0).unwrap();
        let doubled = crit.u.scaled(2.0);
        assert!(viscosity_residual(&k, &doubled, 1.0).unwrap().subsolution > 1e-3);
    }

    #[test]
    fn free_motion_everything_is_critical() {
        let s = ModelSpace::flat_torus(1).unwrap();
        let lag = Lagrangian::free(s);
        let k = KernelTable::build(&lag, &Grid::uniform(s, 16).unwrap(), 0.1, 0.0, &KernelOptions::default()).unwrap();
        let crit = solve_critical(&k, 1e-12, 1000, 0).unwrap();
        let b = Barrier::new(&k, &crit, None).unwrap();
        assert!(aubry_set(&b).in_set.iter().all(|m| *m));
        // h_t = d²/2t → 0 in the continuum; on the grid each unit hop costs h²/2δ
        let h = 1.0 / 16.0;
        let row = b.row(3);
        for (y, v) in row.values.iter().enumerate() {
            let cells = (y as f64 - 3.0).abs().min(16.0 - (y as f64 - 3.0).abs());
            assert!(*v >= -1e-12 && *v <= cells * h * h / 0.2 + 1e-12, "{y}: {v}");
        }
    }

    #[test]
    fn constant_path_at_maximum_has_critical_energy() {
        let (lag, k) = bump(32);
        let crit = solve_critical(&k, 1e-12, 10_000, 0).unwrap();
        let (nodes, used) = backward_chain(&k, &crit.u, 0, 5);
        assert!(nodes.iter().all(|&x| x == 0));
        let path = chain_path(&k, &lag, &nodes, &used, &KernelOptions::default().minimize).unwrap();
        assert!(energy_check(&lag, &path, 1.0) < 1e-12);
    }
}
