//! Closed occupation measures on a phase grid: the Mather linear program,
//! rotation vectors, the `β` function and effective Hamiltonians.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::{Control, Lagrangian, Point, MAX_DIM};
use crate::grid::{Grid, GridFunction};
use crate::semigroup::solve_critical;
use crate::simplex::{LinearProgram, SimplexOptions};
use crate::tonelli::{KernelOptions, KernelTable};

/// Spatial grid nodes times a uniform control grid in the ball `‖u‖ ≤ V_max`.
#[derive(Debug, Clone)]
pub struct PhaseGrid {
    pub grid: Grid,
    pub v_max: f64,
    pub per_axis: usize,
    pub controls: Vec<Control>,
}

impl PhaseGrid {
    /// `per_axis` must be odd so that `u = 0` is a control node.
    pub fn new(grid: Grid, v_max: f64, per_axis: usize) -> Result<Self> {
        if per_axis % 2 == 0 {
            return Err(Error::InvalidInput("control resolution per axis must be odd".into()));
        }
        if !(v_max > 0.0) || !v_max.is_finite() {
            return Err(Error::InvalidInput(format!("velocity cap must be positive, got {v_max}")));
        }
        let rank = grid.space().rank();
        let half = (per_axis / 2) as i64;
        let step = if half == 0 { 0.0 } else { v_max / half as f64 };
        let total = per_axis.pow(rank as u32);
        let mut controls = Vec::new();
        for code in 0..total {
            let mut u = [0.0; MAX_DIM];
            let mut c = code;
            for ui in u.iter_mut().take(rank) {
                *ui = ((c % per_axis) as i64 - half) as f64 * step;
                c /= per_axis;
            }
            let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm <= v_max * (1.0 + 1e-12) {
                controls.push(u);
            }
        }
        Ok(Self {
            grid,
            v_max,
            per_axis,
            controls,
        })
    }

    pub fn len(&self) -> usize {
        self.grid.len() * self.controls.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn control_spacing(&self) -> f64 {
        if self.per_axis == 1 {
            0.0
        } else {
            self.v_max / (self.per_axis / 2) as f64
        }
    }

    /// `(spatial node, control index)` of phase node `k`.
    pub fn split(&self, k: usize) -> (usize, usize) {
        (k / self.controls.len(), k % self.controls.len())
    }

    /// Uniform quadrature weight of each phase node.
    pub fn weight(&self) -> f64 {
        1.0 / self.len() as f64
    }
}

/// One factor per axis: `(0, 0)` constant, `(1, k)` `cos 2πk·`, `(2, k)` `sin 2πk·`.
type Factor = (u8, u32);

/// Trigonometric products up to degree `k_max` per axis in the invariant
/// coordinates, constants excluded.
#[derive(Debug, Clone)]
pub struct TestBasis {
    axes: usize,
    k_max: usize,
    elements: Vec<[Factor; MAX_DIM]>,
}

impl TestBasis {
    pub fn new(space_axes: usize, k_max: usize) -> Result<Self> {
        if k_max == 0 {
            return Err(Error::DegenerateBasis("k_max = 0 leaves only constants".into()));
        }
        let mut factors: Vec<Factor> = vec![(0, 0)];
        for k in 1..=k_max as u32 {
            factors.push((1, k));
            factors.push((2, k));
        }
        let per = factors.len();
        let total = per.pow(space_axes as u32);
        let mut elements = Vec::new();
        for code in 1..total {
            let mut e = [(0u8, 0u32); MAX_DIM];
            let mut c = code;
            for f in e.iter_mut().take(space_axes) {
                *f = factors[c % per];
                c /= per;
            }
            elements.push(e);
        }
        Ok(Self {
            axes: space_axes,
            k_max,
            elements,
        })
    }

    pub fn for_space(grid: &Grid, k_max: usize) -> Result<Self> {
        Self::new(grid.space().invariant_dims(), k_max)
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn k_max(&self) -> usize {
        self.k_max
    }

    fn factor(f: Factor, x: f64) -> (f64, f64) {
        let tau = std::f64::consts::TAU;
        let a = tau * f.1 as f64;
        match f.0 {
            0 => (1.0, 0.0),
            1 => ((a * x).cos(), -a * (a * x).sin()),
            _ => ((a * x).sin(), a * (a * x).cos()),
        }
    }

    pub fn value(&self, index: usize, p: &Point) -> f64 {
        let e = &self.elements[index];
        (0..self.axes).map(|a| Self::factor(e[a], p[a]).0).product()
    }

    /// Chart gradient (zero in non-invariant directions).
    pub fn gradient(&self, index: usize, p: &Point) -> [f64; 3] {
        let e = &self.elements[index];
        let vals: Vec<(f64, f64)> = (0..self.axes).map(|a| Self::factor(e[a], p[a])).collect();
        let mut g = [0.0; 3];
        for (a, ga) in g.iter_mut().enumerate().take(self.axes) {
            *ga = (0..self.axes).map(|b| if a == b { vals[b].1 } else { vals[b].0 }).product();
        }
        g
    }
}

/// The discretized Mather problem in equality form.
#[derive(Debug, Clone)]
pub struct LpInstance {
    pub lp: LinearProgram,
    pub basis_len: usize,
    pub rotation_target: Option<Vec<f64>>,
}

/// `dφ(F(x) u)` for a test function depending on invariant coordinates.
fn closedness_entry(lag: &Lagrangian, basis: &TestBasis, index: usize, x: &Point, u: &Control) -> f64 {
    let g = basis.gradient(index, x);
    let v = lag.space().push_forward(x, u);
    g.iter().zip(&v).map(|(a, b)| a * b).sum()
}

/// Objective `L(x_i, u_j)`; rows: probability, one closedness row per basis
/// element, and one row per rotation component when a target is given.
pub fn build_lp(lag: &Lagrangian, phase: &PhaseGrid, basis: &TestBasis, rotation_target: Option<&[f64]>) -> Result<LpInstance> {
    if basis.is_empty() {
        return Err(Error::DegenerateBasis("empty test basis".into()));
    }
    if phase.grid.space() != lag.space() {
        return Err(Error::GridMismatch("phase grid and Lagrangian live on different spaces".into()));
    }
    let space = lag.space();
    let rank = space.rank();
    if let Some(h) = rotation_target {
        if h.len() != rank {
            return Err(Error::InvalidInput(format!("rotation target needs {rank} components")));
        }
    }
    let rot_rows = if rotation_target.is_some() { rank } else { 0 };
    let m = 1 + basis.len() + rot_rows;
    let n = phase.len();
    let mut cost = Vec::with_capacity(n);
    let mut columns = Vec::with_capacity(n);
    let points: Vec<Point> = (0..phase.grid.len()).map(|i| phase.grid.point(i)).collect();
    for k in 0..n {
        let (i, j) = phase.split(k);
        let (x, u) = (&points[i], &phase.controls[j]);
        cost.push(lag.value(x, u));
        let mut col = Vec::with_capacity(m);
        col.push(1.0);
        for b in 0..basis.len() {
            col.push(closedness_entry(lag, basis, b, x, u));
        }
        if rot_rows > 0 {
            let pairing = space.coordinate_pairing(u);
            col.extend_from_slice(&pairing[..rank]);
        }
        columns.push(col);
    }
    for b in 0..basis.len() {
        let scale = columns.iter().map(|c: &Vec<f64>| c[1 + b].abs()).fold(0.0, f64::max);
        if scale < 1e-12 {
            return Err(Error::DegenerateBasis(format!("test function {b} gives a zero row on this grid")));
        }
    }
    let mut rhs = vec![0.0; m];
    rhs[0] = 1.0;
    if let Some(h) = rotation_target {
        rhs[1 + basis.len()..].copy_from_slice(h);
    }
    Ok(LpInstance {
        lp: LinearProgram { cost, columns, rhs },
        basis_len: basis.len(),
        rotation_target: rotation_target.map(<[f64]>::to_vec),
    })
}

#[derive(Debug, Clone)]
pub struct MeasureSolution {
    pub weights: Vec<f64>,
    pub objective: f64,
    pub rotation: Vec<f64>,
    pub duals: Vec<f64>,
    pub min_reduced_cost: f64,
    pub iterations: usize,
    pub pivots: Vec<(usize, usize)>,
}

pub fn solve_lp(inst: &LpInstance, phase: &PhaseGrid) -> Result<MeasureSolution> {
    let sol = inst.lp.solve(&SimplexOptions::default())?;
    let rotation = rotation_vector(phase, &sol.x);
    Ok(MeasureSolution {
        objective: sol.objective,
        rotation,
        duals: sol.duals,
        min_reduced_cost: sol.min_reduced_cost,
        iterations: sol.iterations,
        pivots: sol.pivots,
        weights: sol.x,
    })
}

/// `ρ_r = Σ w · dx_r(F u)` over phase nodes.
pub fn rotation_vector(phase: &PhaseGrid, weights: &[f64]) -> Vec<f64> {
    let space = phase.grid.space();
    let rank = space.rank();
    let mut rho = vec![0.0; rank];
    for (k, w) in weights.iter().enumerate() {
        if *w != 0.0 {
            let (_, j) = phase.split(k);
            let p = space.coordinate_pairing(&phase.controls[j]);
            for r in 0..rank {
                rho[r] += w * p[r];
            }
        }
    }
    rho
}

/// Spatial marginal of a phase measure.
pub fn spatial_marginal(phase: &PhaseGrid, weights: &[f64]) -> GridFunction {
    let mut m = vec![0.0; phase.grid.len()];
    for (k, w) in weights.iter().enumerate() {
        m[phase.split(k).0] += w;
    }
    GridFunction { grid: phase.grid, values: m }
}

/// Mass on phase nodes whose control lies within `control_radius` of zero
/// and whose spatial node satisfies `near`.
pub fn mass_where(phase: &PhaseGrid, weights: &[f64], control_radius: f64, near: impl Fn(usize) -> bool) -> f64 {
    weights
        .iter()
        .enumerate()
        .filter(|(k, _)| {
            let (i, j) = phase.split(*k);
            let u = &phase.controls[j];
            u.iter().map(|v| v * v).sum::<f64>().sqrt() <= control_radius * (1.0 + 1e-12) && near(i)
        })
        .map(|(_, w)| w)
        .sum()
}

/// `𝕃(h) = min {A_L(μ) : μ closed, ρ(μ) = h}` on the phase grid.
pub fn beta(lag: &Lagrangian, phase: &PhaseGrid, basis: &TestBasis, h: &[f64]) -> Result<MeasureSolution> {
    if h.iter().any(|v| v.abs() > phase.v_max) {
        return Err(Error::OutsideRotationSet(h.to_vec()));
    }
    let inst = build_lp(lag, phase, basis, Some(h))?;
    match solve_lp(&inst, phase) {
        Err(Error::Infeasible(_)) => Err(Error::OutsideRotationSet(h.to_vec())),
        other => other,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BetaRow {
    pub h: Vec<f64>,
    pub value: f64,
    /// Most negative reduced cost of the solve (dual feasibility residual).
    pub certificate: f64,
}

/// `𝕃` on a uniform grid of rotation vectors in `[−h_max, h_max]^rank`.
pub fn beta_table(lag: &Lagrangian, phase: &PhaseGrid, basis: &TestBasis, h_max: f64, per_axis: usize) -> Result<Vec<BetaRow>> {
    let rank = lag.space().rank();
    let n = per_axis.max(2);
    let total = n.pow(rank as u32);
    let mut rows = Vec::with_capacity(total);
    for code in 0..total {
        let mut h = vec![0.0; rank];
        let mut c = code;
        for hr in h.iter_mut() {
            *hr = -h_max + 2.0 * h_max * (c % n) as f64 / (n - 1) as f64;
            c /= n;
        }
        let sol = beta(lag, phase, basis, &h)?;
        rows.push(BetaRow {
            h,
            value: sol.objective,
            certificate: sol.min_reduced_cost,
        });
    }
    Ok(rows)
}

/// `max_h ⟨p, h⟩ − 𝕃(h)` over a β table.
pub fn legendre_from_table(table: &[BetaRow], p: &[f64]) -> f64 {
    table
        .iter()
        .map(|r| r.h.iter().zip(p).map(|(a, b)| a * b).sum::<f64>() - r.value)
        .fold(f64::NEG_INFINITY, f64::max)
}

#[derive(Debug, Clone, Serialize)]
pub struct EffectiveHamiltonian {
    pub class: Vec<f64>,
    pub lp_value: f64,
    pub semigroup_value: f64,
    pub discrepancy: f64,
    pub lp_rotation: Vec<f64>,
}

/// Settings for the semigroup side of [`effective_hamiltonian`].
#[derive(Debug, Clone)]
pub struct SemigroupSide {
    pub grid: Grid,
    pub delta: f64,
    pub kernel: KernelOptions,
    pub tol: f64,
    pub max_iters: usize,
}

/// `ℍ(c) = −min A_{L−c}` from the LP and `c(L − c)` from the critical solve.
pub fn effective_hamiltonian(
    lag: &Lagrangian,
    class: &[f64],
    phase: &PhaseGrid,
    basis: &TestBasis,
    semigroup: &SemigroupSide,
) -> Result<EffectiveHamiltonian> {
    let shifted = lag.with_added_one_form(class)?;
    let inst = build_lp(&shifted, phase, basis, None)?;
    let sol = solve_lp(&inst, phase)?;
    let lp_value = -sol.objective;
    let kernel = KernelTable::build(&shifted, &semigroup.grid, semigroup.delta, 0.0, &semigroup.kernel)?;
    let crit = solve_critical(&kernel, semigroup.tol, semigroup.max_iters, 0)?;
    Ok(EffectiveHamiltonian {
        class: class.to_vec(),
        lp_value,
        semigroup_value: crit.c_estimate,
        discrepancy: (lp_value - crit.c_estimate).abs(),
        lp_rotation: sol.rotation,
    })
}
