//! Compact sub-Riemannian model spaces and the mechanical Lagrangian family.
//!
//! Two spaces are supported:
//!
//! * the flat torus `T^d = R^d / Z^d` (d = 1, 2, 3) with the standard
//!   orthonormal frame, so every direction is horizontal;
//! * the Heisenberg nilmanifold `H / Γ` in polarized coordinates, with frame
//!   `X1 = ∂x`, `X2 = ∂y + x ∂z` and lattice action
//!   `(a, b, c) · (x, y, z) = (x + a, y + b, z + c + a y)`.
//!
//! Points are stored in fixed-size arrays of length [`MAX_DIM`]; unused
//! trailing coordinates are kept at zero.  A control `u` of length `rank`
//! represents the horizontal velocity `F(x) u`, whose sub-Riemannian norm is
//! the Euclidean norm of `u`.

use std::f64::consts::PI;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_DIM: usize = 3;

pub type Point = [f64; MAX_DIM];
pub type Control = [f64; MAX_DIM];
/// Integer lattice element acting on the chart by identification.
pub type LatticeShift = [i64; MAX_DIM];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpaceKind {
    FlatTorus,
    Heisenberg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpace {
    kind: SpaceKind,
    dim: usize,
}

impl ModelSpace {
    pub fn flat_torus(dim: usize) -> Result<Self> {
        if !(1..=MAX_DIM).contains(&dim) {
            return Err(Error::InvalidInput(format!(
                "flat torus dimension must be 1..=3, got {dim}"
            )));
        }
        Ok(Self {
            kind: SpaceKind::FlatTorus,
            dim,
        })
    }

    pub fn heisenberg() -> Self {
        Self {
            kind: SpaceKind::Heisenberg,
            dim: 3,
        }
    }

    pub fn new(kind: SpaceKind, dim: usize) -> Result<Self> {
        match kind {
            SpaceKind::FlatTorus => Self::flat_torus(dim),
            SpaceKind::Heisenberg if dim == 3 => Ok(Self::heisenberg()),
            SpaceKind::Heisenberg => Err(Error::InvalidInput(format!(
                "the Heisenberg nilmanifold has dimension 3, got {dim}"
            ))),
        }
    }

    pub fn kind(&self) -> SpaceKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Rank of the horizontal distribution.
    pub fn rank(&self) -> usize {
        match self.kind {
            SpaceKind::FlatTorus => self.dim,
            SpaceKind::Heisenberg => 2,
        }
    }

    /// Number of leading coordinates on which invariant functions may depend.
    pub fn invariant_dims(&self) -> usize {
        match self.kind {
            SpaceKind::FlatTorus => self.dim,
            SpaceKind::Heisenberg => 2,
        }
    }

    /// Applies the identification map of the lattice element `g` to `p`.
    pub fn shift(&self, p: &Point, g: &LatticeShift) -> Point {
        let mut q = *p;
        match self.kind {
            SpaceKind::FlatTorus => {
                for i in 0..self.dim {
                    q[i] += g[i] as f64;
                }
            }
            SpaceKind::Heisenberg => {
                q[0] = p[0] + g[0] as f64;
                q[1] = p[1] + g[1] as f64;
                q[2] = p[2] + g[2] as f64 + g[0] as f64 * p[1];
            }
        }
        q
    }

    /// Differential of the identification map `g` (row `i` = output coordinate).
    pub fn shift_differential(&self, g: &LatticeShift) -> [[f64; 3]; 3] {
        let mut d = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        if self.kind == SpaceKind::Heisenberg {
            d[2][1] = g[0] as f64;
        }
        d
    }

    /// Maps a chart point into the fundamental domain `[0,1)^dim`, returning
    /// the canonical point and the lattice element that produced it.
    pub fn canonicalize_with_shift(&self, raw: &Point) -> Result<(Point, LatticeShift)> {
        if raw[..self.dim].iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite point {raw:?}")));
        }
        let mut g = [0i64; 3];
        match self.kind {
            SpaceKind::FlatTorus => {
                for i in 0..self.dim {
                    g[i] = wrap_shift(raw[i]);
                }
            }
            SpaceKind::Heisenberg => {
                g[0] = wrap_shift(raw[0]);
                g[1] = wrap_shift(raw[1]);
                let z = raw[2] + g[0] as f64 * raw[1];
                g[2] = wrap_shift(z);
            }
        }
        let mut p = self.shift(raw, &g);
        for v in p.iter_mut().take(self.dim) {
            // rounding can leave tiny negatives or an exact 1.0 behind
            if *v < 0.0 || *v >= 1.0 {
                *v = 0.0;
            }
        }
        for v in p.iter_mut().skip(self.dim) {
            *v = 0.0;
        }
        Ok((p, g))
    }

    pub fn canonicalize(&self, raw: &Point) -> Result<Point> {
        self.canonicalize_with_shift(raw).map(|(p, _)| p)
    }

    /// Frame matrix `F(p)`; column `j` is the j-th horizontal field.
    pub fn frame(&self, p: &Point) -> [[f64; 3]; 3] {
        let mut f = [[0.0; 3]; 3];
        match self.kind {
            SpaceKind::FlatTorus => {
                for i in 0..self.dim {
                    f[i][i] = 1.0;
                }
            }
            SpaceKind::Heisenberg => {
                f[0][0] = 1.0;
                f[1][1] = 1.0;
                f[2][1] = p[0];
            }
        }
        f
    }

    /// Horizontal vector `F(p) u` in chart coordinates.
    pub fn push_forward(&self, p: &Point, u: &Control) -> [f64; 3] {
        match self.kind {
            SpaceKind::FlatTorus => {
                let mut v = [0.0; 3];
                v[..self.dim].copy_from_slice(&u[..self.dim]);
                v
            }
            SpaceKind::Heisenberg => [u[0], u[1], p[0] * u[1]],
        }
    }

    /// Lie bracket `[X1, X2]` of the first two frame fields.
    pub fn bracket(&self, _p: &Point) -> [f64; 3] {
        match self.kind {
            SpaceKind::FlatTorus => [0.0; 3],
            // [∂x, ∂y + x ∂z] = ∂z
            SpaceKind::Heisenberg => [0.0, 0.0, 1.0],
        }
    }

    /// Exact flow of `ẋ = F(x) u` for time `dt` with `u` held constant.
    ///
    /// On the torus the frame is constant; on the Heisenberg chart `z` picks
    /// up `u2 (x dt + u1 dt² / 2)`, a quadratic polynomial in `dt`, so the
    /// classical fourth-order Runge–Kutta step reproduces it exactly.
    pub fn step(&self, p: &Point, u: &Control, dt: f64) -> Point {
        match self.kind {
            SpaceKind::FlatTorus => {
                let mut q = *p;
                for i in 0..self.dim {
                    q[i] += u[i] * dt;
                }
                q
            }
            SpaceKind::Heisenberg => [
                p[0] + u[0] * dt,
                p[1] + u[1] * dt,
                p[2] + u[1] * (p[0] * dt + 0.5 * u[0] * dt * dt),
            ],
        }
    }

    /// Classical RK4 step; agrees with [`ModelSpace::step`] up to rounding.
    pub fn rk4_step(&self, p: &Point, u: &Control, dt: f64) -> Point {
        let f = |q: &Point| self.push_forward(q, u);
        let add = |q: &Point, k: &[f64; 3], s: f64| [q[0] + s * k[0], q[1] + s * k[1], q[2] + s * k[2]];
        let k1 = f(p);
        let k2 = f(&add(p, &k1, 0.5 * dt));
        let k3 = f(&add(p, &k2, 0.5 * dt));
        let k4 = f(&add(p, &k3, dt));
        let mut q = *p;
        for i in 0..self.dim {
            q[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        q
    }

    /// Jacobians of [`ModelSpace::step`] with respect to the state and the
    /// control (row `i` = output coordinate).
    pub fn step_jacobians(&self, p: &Point, u: &Control, dt: f64) -> ([[f64; 3]; 3], [[f64; 3]; 3]) {
        let mut jp = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let mut ju = [[0.0; 3]; 3];
        match self.kind {
            SpaceKind::FlatTorus => {
                for i in 0..self.dim {
                    ju[i][i] = dt;
                }
            }
            SpaceKind::Heisenberg => {
                jp[2][0] = u[1] * dt;
                ju[0][0] = dt;
                ju[1][1] = dt;
                ju[2][0] = 0.5 * u[1] * dt * dt;
                ju[2][1] = p[0] * dt + 0.5 * u[0] * dt * dt;
            }
        }
        (jp, ju)
    }

    /// Lift of `target` closest (in chart Euclidean distance) to `anchor`,
    /// searched among the 3^dim lattice elements around the rounded offset.
    pub fn nearest_representative(&self, anchor: &Point, target: &Point) -> (Point, LatticeShift) {
        let mut best = (*target, [0i64; 3]);
        let mut best_d = f64::INFINITY;
        match self.kind {
            SpaceKind::FlatTorus => {
                let mut base = [0i64; 3];
                for i in 0..self.dim {
                    base[i] = (anchor[i] - target[i]).round() as i64;
                }
                // offsets in {-1,0,1}^dim around the rounded shift
                let count = 3usize.pow(self.dim as u32);
                for code in 0..count {
                    let mut g = base;
                    let mut c = code;
                    for gi in g.iter_mut().take(self.dim) {
                        *gi += (c % 3) as i64 - 1;
                        c /= 3;
                    }
                    let q = self.shift(target, &g);
                    let d = chart_distance_sq(anchor, &q);
                    if d < best_d {
                        best_d = d;
                        best = (q, g);
                    }
                }
            }
            SpaceKind::Heisenberg => {
                let a0 = (anchor[0] - target[0]).round() as i64;
                let b0 = (anchor[1] - target[1]).round() as i64;
                for da in -1..=1 {
                    for db in -1..=1 {
                        let (a, b) = (a0 + da, b0 + db);
                        let zq = target[2] + a as f64 * target[1];
                        let c0 = (anchor[2] - zq).round() as i64;
                        for dc in -1..=1 {
                            let g = [a, b, c0 + dc];
                            let q = self.shift(target, &g);
                            let d = chart_distance_sq(anchor, &q);
                            if d < best_d {
                                best_d = d;
                                best = (q, g);
                            }
                        }
                    }
                }
            }
        }
        best
    }

    /// Euclidean chart distance from `a` to the nearest lift of `b`.
    pub fn quotient_chart_distance(&self, a: &Point, b: &Point) -> f64 {
        let (q, _) = self.nearest_representative(a, b);
        chart_distance_sq(a, &q).sqrt()
    }

    /// Pairing of the velocity `F(p) u` with the closed coordinate forms
    /// (`dx_i` on the torus, `dx, dy` on the Heisenberg nilmanifold).
    pub fn coordinate_pairing(&self, u: &Control) -> [f64; 3] {
        let mut out = [0.0; 3];
        out[..self.rank()].copy_from_slice(&u[..self.rank()]);
        out
    }
}

fn wrap_shift(v: f64) -> i64 {
    let f = v.floor();
    let mut g = -f as i64;
    if v + g as f64 >= 1.0 {
        g -= 1;
    }
    g
}

pub fn chart_distance_sq(a: &Point, b: &Point) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn norm_sq(u: &[f64]) -> f64 {
    u.iter().map(|v| v * v).sum()
}

/// One term `amplitude * cos(2π k·x + phase)` of a potential.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrigTerm {
    pub wave: Vec<i64>,
    pub amplitude: f64,
    #[serde(default)]
    pub phase: f64,
}

/// Finite trigonometric sum in identification-invariant coordinates.
#[derive(Debug, Clone)]
pub struct Potential {
    space: ModelSpace,
    terms: Vec<TrigTerm>,
    max_value: f64,
    min_value: f64,
    argmax: Point,
}

impl Potential {
    pub fn new(space: ModelSpace, terms: Vec<TrigTerm>) -> Result<Self> {
        let inv = space.invariant_dims();
        for t in &terms {
            let ok_len = t.wave.len() == inv || (t.wave.len() == space.dim() && t.wave[inv..].iter().all(|&k| k == 0));
            if !ok_len {
                return Err(Error::InvalidInput(format!(
                    "wave vector {:?} must have {inv} invariant components",
                    t.wave
                )));
            }
            if !t.amplitude.is_finite() || !t.phase.is_finite() {
                return Err(Error::InvalidInput("non-finite potential term".into()));
            }
        }
        let mut pot = Self {
            space,
            terms,
            max_value: 0.0,
            min_value: 0.0,
            argmax: [0.0; 3],
        };
        let (argmax, max_value) = pot.extremum(1.0);
        let (_, min_value) = pot.extremum(-1.0);
        pot.max_value = max_value;
        pot.min_value = -min_value;
        pot.argmax = argmax;
        Ok(pot)
    }

    pub fn zero(space: ModelSpace) -> Self {
        Self::new(space, Vec::new()).expect("empty potential is valid")
    }

    pub fn terms(&self) -> &[TrigTerm] {
        &self.terms
    }

    pub fn space(&self) -> ModelSpace {
        self.space
    }

    pub fn value(&self, p: &Point) -> f64 {
        let inv = self.space.invariant_dims();
        self.terms
            .iter()
            .map(|t| {
                let arg: f64 = (0..inv).map(|i| t.wave[i] as f64 * p[i]).sum();
                t.amplitude * (2.0 * PI * arg + t.phase).cos()
            })
            .sum()
    }

    /// Chart gradient; the `z` component vanishes on the Heisenberg space.
    pub fn gradient(&self, p: &Point) -> [f64; 3] {
        let inv = self.space.invariant_dims();
        let mut g = [0.0; 3];
        for t in &self.terms {
            let arg: f64 = (0..inv).map(|i| t.wave[i] as f64 * p[i]).sum();
            let s = -t.amplitude * (2.0 * PI * arg + t.phase).sin() * 2.0 * PI;
            for (i, gi) in g.iter_mut().enumerate().take(inv) {
                *gi += s * t.wave[i] as f64;
            }
        }
        g
    }

    pub fn max_value(&self) -> f64 {
        self.max_value
    }

    pub fn min_value(&self) -> f64 {
        self.min_value
    }

    pub fn argmax(&self) -> Point {
        self.argmax
    }

    pub fn is_constant(&self) -> bool {
        self.terms
            .iter()
            .all(|t| t.amplitude == 0.0 || t.wave.iter().all(|&k| k == 0))
    }

    /// Maximizes `sign * U` by a fine scan followed by gradient polishing.
    fn extremum(&self, sign: f64) -> (Point, f64) {
        let inv = self.space.invariant_dims();
        let per_axis: usize = match inv {
            1 => 2048,
            2 => 256,
            _ => 48,
        };
        let total = per_axis.pow(inv as u32);
        let mut best = ([0.0; 3], f64::NEG_INFINITY);
        for code in 0..total {
            let mut p = [0.0; 3];
            let mut c = code;
            for pi in p.iter_mut().take(inv) {
                *pi = (c % per_axis) as f64 / per_axis as f64;
                c /= per_axis;
            }
            let v = sign * self.value(&p);
            if v > best.1 {
                best = (p, v);
            }
        }
        let (mut p, mut v) = best;
        let mut step = 1e-3;
        for _ in 0..200 {
            let g = self.gradient(&p);
            let gn = norm_sq(&g[..inv]).sqrt();
            if gn < 1e-14 {
                break;
            }
            let mut q = p;
            for i in 0..inv {
                q[i] += sign * step * g[i] / gn;
            }
            let w = sign * self.value(&q);
            if w > v {
                p = q;
                v = w;
                step *= 1.5;
            } else {
                step *= 0.3;
                if step < 1e-15 {
                    break;
                }
            }
        }
        let p = self.space.canonicalize(&p).unwrap_or(p);
        (p, sign * v)
    }
}

/// `L(x, v) = ½‖v‖² − U(x) − ω_x(v)` on horizontal vectors `v = F(x) u`.
#[derive(Debug, Clone)]
pub struct Lagrangian {
    space: ModelSpace,
    potential: Potential,
    one_form: [f64; 3],
}

impl Lagrangian {
    pub fn new(potential: Potential, one_form: &[f64]) -> Result<Self> {
        let space = potential.space();
        if one_form.len() > space.rank() {
            return Err(Error::InvalidInput(format!(
                "one-form has {} coefficients but the distribution has rank {}",
                one_form.len(),
                space.rank()
            )));
        }
        if one_form.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidInput("non-finite one-form coefficient".into()));
        }
        let mut w = [0.0; 3];
        w[..one_form.len()].copy_from_slice(one_form);
        Ok(Self {
            space,
            potential,
            one_form: w,
        })
    }

    pub fn free(space: ModelSpace) -> Self {
        Self::new(Potential::zero(space), &[]).expect("free Lagrangian is valid")
    }

    pub fn space(&self) -> ModelSpace {
        self.space
    }

    pub fn potential(&self) -> &Potential {
        &self.potential
    }

    pub fn one_form(&self) -> &[f64] {
        &self.one_form[..self.space.rank()]
    }

    /// Same potential, with `extra` added to the one-form coefficients
    /// (the Lagrangian `L − ω_extra`).
    pub fn with_added_one_form(&self, extra: &[f64]) -> Result<Self> {
        let mut w = self.one_form;
        if extra.len() > self.space.rank() {
            return Err(Error::InvalidInput("one-form class has too many components".into()));
        }
        for (wi, e) in w.iter_mut().zip(extra) {
            *wi += e;
        }
        Self::new(self.potential.clone(), &w[..self.space.rank()])
    }

    pub fn value(&self, p: &Point, u: &Control) -> f64 {
        let r = self.space.rank();
        let mut kinetic = 0.0;
        let mut form = 0.0;
        for i in 0..r {
            kinetic += u[i] * u[i];
            form += self.one_form[i] * u[i];
        }
        0.5 * kinetic - self.potential.value(p) - form
    }

    /// `∂L/∂u`.
    pub fn control_gradient(&self, u: &Control) -> [f64; 3] {
        let mut g = [0.0; 3];
        for (i, gi) in g.iter_mut().enumerate().take(self.space.rank()) {
            *gi = u[i] - self.one_form[i];
        }
        g
    }

    /// `∂L/∂x` in chart coordinates.
    pub fn state_gradient(&self, p: &Point) -> [f64; 3] {
        let g = self.potential.gradient(p);
        [-g[0], -g[1], -g[2]]
    }

    /// `E = ∂_v L · v − L = ½|u|² + U(x)`; the linear one-form term cancels.
    pub fn energy(&self, p: &Point, u: &Control) -> f64 {
        0.5 * norm_sq(&u[..self.space.rank()]) + self.potential.value(p)
    }

    /// `H(x, p) = max_v p(v) − L(x, v) = ½‖Fᵀ(x) p + ω‖² + U(x)`.
    pub fn hamiltonian(&self, x: &Point, covector: &[f64; 3]) -> f64 {
        let f = self.space.frame(x);
        let mut s = 0.0;
        for j in 0..self.space.rank() {
            let mut c = self.one_form[j];
            for (i, row) in f.iter().enumerate() {
                c += row[j] * covector[i];
            }
            s += c * c;
        }
        0.5 * s + self.potential.value(x)
    }

    pub fn one_form_norm(&self) -> f64 {
        norm_sq(self.one_form()).sqrt()
    }

    /// `min L = −max U − ½‖ω‖²`.
    pub fn min_value(&self) -> f64 {
        -self.potential.max_value() - 0.5 * norm_sq(self.one_form())
    }

    /// `A(R) = ½R² + ‖ω‖R − min U`, an upper bound for `L` on `‖v‖ ≤ R`.
    pub fn speed_bound(&self, r: f64) -> f64 {
        0.5 * r * r + self.one_form_norm() * r - self.potential.min_value()
    }

    /// Constant `C(K)` with `L(x, v) ≥ K‖v‖ + C(K)` everywhere.
    pub fn superlinear_constant(&self, k: f64) -> f64 {
        let s = k + self.one_form_norm();
        -0.5 * s * s - self.potential.max_value()
    }
}

/// Discretized horizontal curve with piecewise-constant controls.
#[derive(Debug, Clone)]
pub struct HorizontalPath {
    pub t0: f64,
    pub dt: f64,
    pub controls: Vec<Control>,
    /// Chart states before canonicalization (continuous in the chart).
    pub lifted: Vec<Point>,
    /// Canonical representatives of the states.
    pub states: Vec<Point>,
    pub closed: bool,
}

impl HorizontalPath {
    pub fn steps(&self) -> usize {
        self.controls.len()
    }

    pub fn t1(&self) -> f64 {
        self.t0 + self.dt * self.steps() as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        self.t0 + self.dt * k as f64
    }

    /// `Σ |u_k| Δt`.
    pub fn length(&self, space: ModelSpace) -> f64 {
        let r = space.rank();
        self.controls.iter().map(|u| norm_sq(&u[..r]).sqrt() * self.dt).sum()
    }

    /// Sub-path over steps `[from, to)`.
    pub fn slice(&self, from: usize, to: usize) -> HorizontalPath {
        let closed = false;
        HorizontalPath {
            t0: self.time(from),
            dt: self.dt,
            controls: self.controls[from..to].to_vec(),
            lifted: self.lifted[from..=to].to_vec(),
            states: self.states[from..=to].to_vec(),
            closed,
        }
    }

    /// CSV with header `t,x1..xd,u1..um`; the final row repeats the last control.
    pub fn to_csv(&self, space: ModelSpace) -> String {
        let (d, m) = (space.dim(), space.rank());
        let mut s = String::from("t");
        for i in 1..=d {
            let _ = write!(s, ",x{i}");
        }
        for i in 1..=m {
            let _ = write!(s, ",u{i}");
        }
        s.push('\n');
        for (k, p) in self.states.iter().enumerate() {
            let _ = write!(s, "{}", self.time(k));
            for v in &p[..d] {
                let _ = write!(s, ",{v}");
            }
            let u = self.controls.get(k).or(self.controls.last()).copied().unwrap_or([0.0; 3]);
            for v in &u[..m] {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        s
    }
}

/// Integrates `ẋ = F(x) u` from `x0` with piecewise-constant controls.
pub fn integrate(space: ModelSpace, x0: &Point, controls: &[Control], t0: f64, dt: f64) -> Result<HorizontalPath> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::InvalidInput(format!("time step must be positive, got {dt}")));
    }
    if controls.iter().any(|u| u.iter().any(|v| !v.is_finite())) {
        return Err(Error::InvalidInput("non-finite control".into()));
    }
    let start = space.canonicalize(x0)?;
    let mut lifted = Vec::with_capacity(controls.len() + 1);
    lifted.push(*x0);
    for u in controls {
        let last = lifted.last().expect("non-empty");
        lifted.push(space.step(last, u, dt));
    }
    let mut states = Vec::with_capacity(lifted.len());
    for p in &lifted {
        states.push(space.canonicalize(p)?);
    }
    let end = *states.last().expect("non-empty");
    let closed = space.quotient_chart_distance(&start, &end) < 1e-9;
    Ok(HorizontalPath {
        t0,
        dt,
        controls: controls.to_vec(),
        lifted,
        states,
        closed,
    })
}

/// Discounted action `Σ_k e^{λ t_k} L(x_k, u_k) Δt` (left-endpoint rule).
pub fn action(lagrangian: &Lagrangian, path: &HorizontalPath, lambda: f64) -> f64 {
    path.controls
        .iter()
        .enumerate()
        .map(|(k, u)| {
            let w = if lambda == 0.0 { 1.0 } else { (lambda * path.time(k)).exp() };
            w * lagrangian.value(&path.lifted[k], u) * path.dt
        })
        .sum()
}

/// Exact integral of `e^{λt}` over `[t, t + dt]`, divided by `dt`.
///
/// Used as quadrature weight by the minimizers so that constant paths are
/// integrated exactly.
pub fn exponential_weight(lambda: f64, t: f64, dt: f64) -> f64 {
    if lambda == 0.0 {
        1.0
    } else {
        let x = lambda * dt;
        let factor = if x.abs() < 1e-8 { 1.0 + 0.5 * x } else { x.exp_m1() / x };
        (lambda * t).exp() * factor
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn bump_2d() -> Potential {
        let s = ModelSpace::flat_torus(2).unwrap();
        Potential::new(
            s,
            vec![
                TrigTerm { wave: vec![0, 0], amplitude: 0.5, phase: 0.0 },
                TrigTerm { wave: vec![1, 1], amplitude: 0.25, phase: 0.0 },
                TrigTerm { wave: vec![1, -1], amplitude: 0.25, phase: 0.0 },
            ],
        )
        .unwrap()
    }

    #[test]
    fn canonicalize_examples() {
        let t2 = ModelSpace::flat_torus(2).unwrap();
        assert_eq!(t2.canonicalize(&[1.25, -0.5, 0.0]).unwrap(), [0.25, 0.5, 0.0]);
        let h = ModelSpace::heisenberg();
        let p = h.shift(&[1.0, 0.5, 0.0], &[-1, 0, 0]);
        assert_eq!(p, [0.0, 0.5, -0.5]);
        assert_eq!(h.canonicalize(&[1.0, 0.5, 0.0]).unwrap(), [0.0, 0.5, 0.5]);
        for s in [t2, h, ModelSpace::flat_torus(1).unwrap()] {
            assert_eq!(s.canonicalize(&[0.0; 3]).unwrap(), [0.0; 3]);
        }
        assert!(h.canonicalize(&[f64::NAN, 0.0, 0.0]).is_err());
        assert!(t2.canonicalize(&[0.0, f64::INFINITY, 0.0]).is_err());
    }

    #[test]
    fn canonicalize_handles_rounding_edge() {
        let t1 = ModelSpace::flat_torus(1).unwrap();
        let p = t1.canonicalize(&[-1e-18, 0.0, 0.0]).unwrap();
        assert!(p[0] >= 0.0 && p[0] < 1.0);
    }

    #[test]
    fn heisenberg_frame_is_invariant() {
        let h = ModelSpace::heisenberg();
        let p = [0.3, 0.7, 0.2];
        for g in [[1, 0, 0], [-2, 3, 1], [0, 1, -1], [3, -1, 2]] {
            let q = h.shift(&p, &g);
            let d = h.shift_differential(&g);
            let fp = h.frame(&p);
            let fq = h.frame(&q);
            for j in 0..2 {
                for i in 0..3 {
                    let pushed: f64 = (0..3).map(|k| d[i][k] * fp[k][j]).sum();
                    assert_abs_diff_eq!(pushed, fq[i][j], epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn heisenberg_is_bracket_generating() {
        let h = ModelSpace::heisenberg();
        for p in [[0.0, 0.0, 0.0], [0.4, 0.9, 0.1], [0.99, 0.5, 0.5]] {
            let f = h.frame(&p);
            let b = h.bracket(&p);
            let m = [[f[0][0], f[0][1], b[0]], [f[1][0], f[1][1], b[1]], [f[2][0], f[2][1], b[2]]];
            let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
                + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
            assert!(det.abs() > 0.5);
        }
    }

    #[test]
    fn integrate_examples() {
        let t2 = ModelSpace::flat_torus(2).unwrap();
        let path = integrate(t2, &[0.0; 3], &vec![[1.0, 0.0, 0.0]; 10], 0.0, 0.1).unwrap();
        let end = path.states.last().unwrap();
        assert!(t2.quotient_chart_distance(end, &[0.0; 3]) < 1e-12);
        assert!(path.closed);

        let h = ModelSpace::heisenberg();
        let path = integrate(h, &[0.0; 3], &[[1.0, 0.0, 0.0]], 0.0, 1.0).unwrap();
        assert_eq!(path.lifted[1], [1.0, 0.0, 0.0]);
        assert_eq!(path.states[1], [0.0, 0.0, 0.0]);

        let square = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]];
        let path = integrate(h, &[0.0; 3], &square, 0.0, 1.0).unwrap();
        let end = path.lifted[4];
        assert_abs_diff_eq!(end[0], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(end[1], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(end[2], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn closed_form_step_matches_rk4() {
        let h = ModelSpace::heisenberg();
        let p = [0.3, -0.2, 0.9];
        for u in [[1.0, 2.0, 0.0], [-0.7, 0.3, 0.0], [0.0, -1.5, 0.0]] {
            let a = h.step(&p, &u, 0.37);
            let b = h.rk4_step(&p, &u, 0.37);
            for i in 0..3 {
                assert_abs_diff_eq!(a[i], b[i], epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn action_examples() {
        let t2 = ModelSpace::flat_torus(2).unwrap();
        let lag = Lagrangian::new(bump_2d(), &[]).unwrap();
        let x = [0.2, 0.1, 0.0];
        let path = integrate(t2, &x, &vec![[0.0; 3]; 20], 0.0, 0.05).unwrap();
        let u = lag.potential().value(&x);
        assert_abs_diff_eq!(action(&lag, &path, 0.0), -u, epsilon = 1e-12);

        let free = Lagrangian::free(t2);
        let path = integrate(t2, &[0.0; 3], &vec![[0.6, 0.8, 0.0]; 10], 0.0, 0.1).unwrap();
        assert_abs_diff_eq!(action(&free, &path, 0.0), 0.5, epsilon = 1e-12);

        // discounted constant path against the closed-form integral
        let lam = 0.7;
        let dt = 1e-3;
        let path = integrate(t2, &x, &vec![[0.0; 3]; 1000], -1.0, dt).unwrap();
        let exact = -u * (1.0 - (-lam * 1.0f64).exp()) / lam;
        assert!((action(&lag, &path, lam) - exact).abs() < 2.0 * dt);
    }

    #[test]
    fn action_is_additive() {
        let h = ModelSpace::heisenberg();
        let pot = Potential::new(h, vec![TrigTerm { wave: vec![1, 2], amplitude: 0.3, phase: 0.4 }]).unwrap();
        let lag = Lagrangian::new(pot, &[0.2, -0.1]).unwrap();
        let controls: Vec<Control> = (0..30).map(|k| [(k as f64 * 0.3).sin(), (k as f64 * 0.17).cos(), 0.0]).collect();
        let path = integrate(h, &[0.1, 0.2, 0.3], &controls, -1.5, 0.05).unwrap();
        for lam in [0.0, 0.4] {
            let whole = action(&lag, &path, lam);
            let parts = action(&lag, &path.slice(0, 11), lam) + action(&lag, &path.slice(11, 30), lam);
            assert_abs_diff_eq!(whole, parts, epsilon = 1e-13);
        }
    }

    #[test]
    fn energy_and_hamiltonian_examples() {
        let t2 = ModelSpace::flat_torus(2).unwrap();
        let lag = Lagrangian::new(bump_2d(), &[]).unwrap();
        let x = [0.3, 0.6, 0.0];
        assert_abs_diff_eq!(lag.energy(&x, &[0.0; 3]), lag.potential().value(&x));
        let free = Lagrangian::free(t2);
        assert_abs_diff_eq!(free.energy(&x, &[2.0, 0.0, 0.0]), 2.0);
        assert_abs_diff_eq!(free.hamiltonian(&x, &[3.0, 4.0, 0.0]), 12.5);
        assert_abs_diff_eq!(lag.hamiltonian(&x, &[0.0; 3]), lag.potential().value(&x));
    }

    #[test]
    fn potential_extremes() {
        let pot = bump_2d();
        assert_abs_diff_eq!(pot.max_value(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(pot.min_value(), 0.0, epsilon = 1e-12);
        for i in 0..64 {
            for j in 0..64 {
                let p = [i as f64 / 64.0, j as f64 / 64.0, 0.0];
                assert!(pot.value(&p) <= pot.max_value() + 1e-15);
            }
        }
    }

    #[test]
    fn heisenberg_potential_rejects_z_dependence() {
        let h = ModelSpace::heisenberg();
        assert!(Potential::new(h, vec![TrigTerm { wave: vec![0, 0, 1], amplitude: 1.0, phase: 0.0 }]).is_err());
        assert!(Potential::new(h, vec![TrigTerm { wave: vec![1, 0, 0], amplitude: 1.0, phase: 0.0 }]).is_ok());
    }

    #[test]
    fn growth_constants_bound_the_lagrangian() {
        let lag = Lagrangian::new(bump_2d(), &[0.3, -0.4]).unwrap();
        let x = lag.potential().argmax();
        for k in [0.0, 1.0, 2.5] {
            let ck = lag.superlinear_constant(k);
            for i in 0..64 {
                let a = i as f64 * std::f64::consts::TAU / 64.0;
                for r in [0.0, 0.3, 1.0, 2.0, 4.0] {
                    let u = [r * a.cos(), r * a.sin(), 0.0];
                    assert!(lag.value(&x, &u) >= k * r + ck - 1e-12);
                    let y = [0.37, 0.81, 0.0];
                    assert!(lag.value(&y, &u) <= lag.speed_bound(r) + 1e-12);
                }
            }
            // equality along ω at speed K + |ω|
            let (w, n) = (lag.one_form(), lag.one_form_norm());
            let s = k + n;
            let u = [s * w[0] / n, s * w[1] / n, 0.0];
            assert_abs_diff_eq!(lag.value(&x, &u), k * s + ck, epsilon = 1e-12);
        }
    }
}
