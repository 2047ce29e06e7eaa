//! Fixed-endpoint, fixed-time action minimization over horizontal paths and
//! the short-time minimal-action kernels built from it.
//!
//! Paths are transcribed directly as piecewise-constant controls.  A
//! minimization runs a penalty schedule (`ρ_0, 10ρ_0, …`) of gradient descent
//! with backtracking on
//!
//! ```text
//! J(u) = A_{L,λ}(u) + ρ · |x_N(u) − y|²
//! ```
//!
//! and then polishes the result by projected gradient descent on the exact
//! endpoint constraint, restoring feasibility with Gauss–Newton steps after
//! every move.  The restored path ends exactly at the target, so the
//! reported action is attained by a genuine horizontal path and is an upper
//! bound for the minimal action.
//!
//! Discounted problems live on `[−T, 0]` with weight `e^{λt}`; each step is
//! weighted by the exact average of `e^{λt}` over the step.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{config_hash, LagrangianConfig};
use crate::error::{Error, Result};
use crate::geometry::{
    chart_distance_sq, exponential_weight, integrate, Control, HorizontalPath, Lagrangian, ModelSpace, Point, SpaceKind,
    MAX_DIM,
};
use crate::grid::Grid;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MinimizeOptions {
    /// Control steps per unit time.
    pub steps_per_unit: usize,
    /// Lower bound on the number of steps of any transcription.
    pub min_steps: usize,
    pub penalty_start: f64,
    pub penalty_factor: f64,
    pub penalty_stages: usize,
    /// Gradient-descent iterations per penalty stage.
    pub max_iters: usize,
    /// Projected-gradient iterations of the final polish.
    pub refine_iters: usize,
    /// Stationarity tolerance (L² norm of the L² gradient).
    pub grad_tol: f64,
    /// Endpoint tolerance in chart distance.
    pub endpoint_tol: f64,
    pub multistarts: usize,
    pub seed: u64,
}

impl Default for MinimizeOptions {
    fn default() -> Self {
        Self {
            steps_per_unit: 40,
            min_steps: 4,
            penalty_start: 1.0,
            penalty_factor: 10.0,
            penalty_stages: 4,
            max_iters: 400,
            refine_iters: 2000,
            grad_tol: 1e-7,
            endpoint_tol: 1e-9,
            multistarts: 1,
            seed: 0,
        }
    }
}

impl MinimizeOptions {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.penalty_start, self.grad_tol, self.endpoint_tol];
        if positive.iter().any(|v| !(*v > 0.0)) || self.penalty_factor <= 1.0 {
            return Err(Error::InvalidInput("minimizer tolerances must be positive".into()));
        }
        if self.multistarts == 0 || self.steps_per_unit == 0 || self.min_steps == 0 {
            return Err(Error::InvalidInput("step counts and multistart count must be at least 1".into()));
        }
        Ok(())
    }

    pub fn steps_for(&self, duration: f64) -> usize {
        ((duration * self.steps_per_unit as f64).round() as usize).max(self.min_steps)
    }
}

#[derive(Debug, Clone)]
pub struct MinimizerResult {
    pub path: HorizontalPath,
    pub action_value: f64,
    pub endpoint_error: f64,
    pub stationarity_norm: f64,
    pub converged: bool,
}

/// Direct transcription of one endpoint problem.
struct Transcription<'a> {
    lag: &'a Lagrangian,
    space: ModelSpace,
    start: Point,
    target: Point,
    /// Whether the endpoint may match any lift of `target`.
    quotient: bool,
    n: usize,
    rank: usize,
    dt: f64,
    weights: Vec<f64>,
}

impl<'a> Transcription<'a> {
    fn new(lag: &'a Lagrangian, start: Point, target: Point, duration: f64, lambda: f64, n: usize, quotient: bool) -> Self {
        let dt = duration / n as f64;
        let weights = (0..n)
            .map(|k| exponential_weight(lambda, -duration + k as f64 * dt, dt))
            .collect();
        let space = lag.space();
        Self {
            lag,
            space,
            start,
            target,
            quotient,
            n,
            rank: space.rank(),
            dt,
            weights,
        }
    }

    fn control(&self, u: &[f64], k: usize) -> Control {
        let mut c = [0.0; MAX_DIM];
        c[..self.rank].copy_from_slice(&u[k * self.rank..(k + 1) * self.rank]);
        c
    }

    fn rollout(&self, u: &[f64]) -> Vec<Point> {
        let mut states = Vec::with_capacity(self.n + 1);
        let mut p = self.start;
        states.push(p);
        for k in 0..self.n {
            p = self.space.step(&p, &self.control(u, k), self.dt);
            states.push(p);
        }
        states
    }

    fn action(&self, u: &[f64], states: &[Point]) -> f64 {
        (0..self.n)
            .map(|k| self.weights[k] * self.lag.value(&states[k], &self.control(u, k)) * self.dt)
            .sum()
    }

    fn target_for(&self, end: &Point) -> Point {
        if self.quotient {
            self.space.nearest_representative(end, &self.target).0
        } else {
            self.target
        }
    }

    fn penalized_value(&self, u: &[f64], rho: f64) -> f64 {
        let states = self.rollout(u);
        let end = states[self.n];
        let y = self.target_for(&end);
        self.action(u, &states) + rho * chart_distance_sq(&end, &y)
    }

    fn penalized(&self, u: &[f64], rho: f64) -> (f64, Vec<f64>) {
        let states = self.rollout(u);
        let end = states[self.n];
        let y = self.target_for(&end);
        let mut terminal = [0.0; 3];
        for i in 0..3 {
            terminal[i] = 2.0 * rho * (end[i] - y[i]);
        }
        let value = self.action(u, &states) + rho * chart_distance_sq(&end, &y);
        (value, self.reverse_sweep(u, &states, true, terminal))
    }

    /// Adjoint sweep returning `∂/∂u` of (running action, if requested) plus
    /// `terminal · x_N`.
    fn reverse_sweep(&self, u: &[f64], states: &[Point], running: bool, terminal: [f64; 3]) -> Vec<f64> {
        let dim = self.space.dim();
        let mut adj = terminal;
        let mut grad = vec![0.0; self.n * self.rank];
        for k in (0..self.n).rev() {
            let uk = self.control(u, k);
            let pk = &states[k];
            let (jp, ju) = self.space.step_jacobians(pk, &uk, self.dt);
            for j in 0..self.rank {
                let mut g = 0.0;
                for i in 0..dim {
                    g += ju[i][j] * adj[i];
                }
                grad[k * self.rank + j] = g;
            }
            let mut next = [0.0; 3];
            for j in 0..dim {
                for i in 0..dim {
                    next[j] += jp[i][j] * adj[i];
                }
            }
            if running {
                let w = self.weights[k] * self.dt;
                let gu = self.lag.control_gradient(&uk);
                for j in 0..self.rank {
                    grad[k * self.rank + j] += w * gu[j];
                }
                let gp = self.lag.state_gradient(pk);
                for j in 0..dim {
                    next[j] += w * gp[j];
                }
            }
            adj = next;
        }
        grad
    }

    fn endpoint_jacobian(&self, u: &[f64], states: &[Point]) -> Vec<Vec<f64>> {
        (0..self.space.dim())
            .map(|i| {
                let mut e = [0.0; 3];
                e[i] = 1.0;
                self.reverse_sweep(u, states, false, e)
            })
            .collect()
    }

    /// Gauss–Newton restoration of `x_N(u) = target`.
    fn restore(&self, u: &mut [f64], target: &Point) -> bool {
        let dim = self.space.dim();
        for _ in 0..40 {
            let states = self.rollout(u);
            let end = states[self.n];
            let mut r = [0.0; 3];
            for i in 0..dim {
                r[i] = end[i] - target[i];
            }
            let rn = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if rn <= 1e-13 * (1.0 + target.iter().map(|v| v.abs()).fold(0.0, f64::max)) {
                return true;
            }
            let jac = self.endpoint_jacobian(u, &states);
            let gram = gram_matrix(&jac);
            let Some(mult) = solve_small(&gram, &r, dim) else {
                return false;
            };
            for (i, row) in jac.iter().enumerate() {
                for (uj, jij) in u.iter_mut().zip(row) {
                    *uj -= jij * mult[i];
                }
            }
        }
        false
    }

    /// Minimizes the penalized objective from `u` through the schedule.
    fn penalty_descent(&self, u: &mut Vec<f64>, opts: &MinimizeOptions) -> f64 {
        let mut stat = f64::INFINITY;
        let duration = self.dt * self.n as f64;
        for stage in 0..opts.penalty_stages {
            let rho = opts.penalty_start * opts.penalty_factor.powi(stage as i32);
            let mut alpha = 1.0 / (1.0 + 2.0 * rho * duration);
            let mut prev: Option<(Vec<f64>, Vec<f64>)> = None;
            for _ in 0..opts.max_iters {
                let (f, g) = self.penalized(u, rho);
                let gn2: f64 = g.iter().map(|v| v * v).sum();
                stat = (gn2 / self.dt).sqrt();
                if stat <= opts.grad_tol {
                    break;
                }
                alpha = match &prev {
                    Some((pu, pg)) => bb_step(u, pu, &g, pg, self.dt, alpha * 2.0),
                    None => alpha,
                };
                let mut accepted = false;
                while alpha > 1e-14 {
                    let trial: Vec<f64> = u.iter().zip(&g).map(|(a, b)| a - alpha * b / self.dt).collect();
                    if self.penalized_value(&trial, rho) <= f - 1e-4 * alpha * gn2 / self.dt {
                        prev = Some((std::mem::replace(u, trial), g));
                        accepted = true;
                        break;
                    }
                    alpha *= 0.5;
                }
                if !accepted {
                    break;
                }
            }
        }
        stat
    }

    /// Action, projected gradient and its stationarity norm at a feasible `u`.
    fn projected_gradient(&self, u: &[f64]) -> Option<(f64, Vec<f64>, f64)> {
        let dim = self.space.dim();
        let states = self.rollout(u);
        let a = self.action(u, &states);
        let g = self.reverse_sweep(u, &states, true, [0.0; 3]);
        let jac = self.endpoint_jacobian(u, &states);
        let gram = gram_matrix(&jac);
        if is_degenerate(&gram, dim) {
            return None;
        }
        let jg: Vec<f64> = jac.iter().map(|row| dot(row, &g)).collect();
        let mult = solve_small(&gram, &jg, dim)?;
        let mut p = g;
        for (i, row) in jac.iter().enumerate() {
            for (pj, jij) in p.iter_mut().zip(row) {
                *pj -= jij * mult[i];
            }
        }
        let stat = (p.iter().map(|v| v * v).sum::<f64>() / self.dt).sqrt();
        Some((a, p, stat))
    }

    /// Projected gradient descent on `{x_N = target}`; returns the final
    /// stationarity norm, or `None` when the constraint cannot be restored or
    /// its Jacobian is degenerate.
    fn refine(&self, u: &mut Vec<f64>, opts: &MinimizeOptions) -> Option<f64> {
        let states = self.rollout(u);
        let target = self.target_for(&states[self.n]);
        if !self.restore(u, &target) {
            return None;
        }
        let mut alpha: f64 = 1.0;
        let mut prev: Option<(Vec<f64>, Vec<f64>)> = None;
        let (mut a, mut p, mut stat) = self.projected_gradient(u)?;
        for _ in 0..opts.refine_iters.max(1) {
            if stat <= opts.grad_tol {
                break;
            }
            let pn2 = stat * stat * self.dt;
            alpha = match &prev {
                Some((pu, pp)) => bb_step(u, pu, &p, pp, self.dt, alpha * 2.0),
                None => alpha,
            };
            let mut next = None;
            while alpha > 1e-12 {
                let mut trial: Vec<f64> = u.iter().zip(&p).map(|(x, d)| x - alpha * d / self.dt).collect();
                if self.restore(&mut trial, &target) {
                    let st = self.rollout(&trial);
                    let at = self.action(&trial, &st);
                    let sufficient = at <= a - 1e-4 * alpha * pn2 / self.dt;
                    // below rounding level of the action, fall back to the gradient norm
                    let in_noise = (at - a).abs() <= 1e-13 * (1.0 + a.abs());
                    if sufficient || in_noise {
                        if let Some(pg) = self.projected_gradient(&trial) {
                            if sufficient || pg.2 < stat {
                                next = Some((trial, pg));
                                break;
                            }
                        }
                    }
                }
                alpha *= 0.5;
            }
            let Some((trial, pg)) = next else { break };
            prev = Some((std::mem::replace(u, trial), std::mem::replace(&mut p, pg.1)));
            (a, stat) = (pg.0, pg.2);
        }
        Some(stat)
    }

    fn straight_guess(&self, lifted_target: &Point) -> Vec<f64> {
        let duration = self.dt * self.n as f64;
        let mut base = [0.0; 3];
        for i in 0..self.rank {
            base[i] = (lifted_target[i] - self.start[i]) / duration;
        }
        let mut u = Vec::with_capacity(self.n * self.rank);
        for k in 0..self.n {
            let mut c = base;
            if self.space.kind() == SpaceKind::Heisenberg {
                // add a loop enclosing the vertical mismatch of the straight segment
                let (dx, dy) = (lifted_target[0] - self.start[0], lifted_target[1] - self.start[1]);
                let predicted = dy * (self.start[0] + 0.5 * dx);
                let mismatch = lifted_target[2] - self.start[2] - predicted;
                if mismatch.abs() > 1e-12 {
                    let r = (mismatch.abs() / std::f64::consts::PI).sqrt();
                    let omega = 2.0 * std::f64::consts::PI / duration;
                    let theta = omega * (k as f64 + 0.5) * self.dt;
                    let s = mismatch.signum();
                    c[0] += -r * omega * theta.sin();
                    c[1] += s * r * omega * theta.cos();
                }
            }
            u.extend_from_slice(&c[..self.rank]);
        }
        u
    }
}

/// Barzilai–Borwein step for the update `u − α g / dt`.
fn bb_step(u: &[f64], prev_u: &[f64], g: &[f64], prev_g: &[f64], dt: f64, fallback: f64) -> f64 {
    let mut ss = 0.0;
    let mut sy = 0.0;
    for i in 0..u.len() {
        let s = u[i] - prev_u[i];
        ss += s * s;
        sy += s * (g[i] - prev_g[i]);
    }
    if sy > 0.0 && ss > 0.0 {
        (ss / sy * dt).clamp(1e-6, 1e6)
    } else {
        fallback.min(1.0)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn gram_matrix(jac: &[Vec<f64>]) -> [[f64; 3]; 3] {
    let mut g = [[0.0; 3]; 3];
    for i in 0..jac.len() {
        for j in 0..=i {
            let v = dot(&jac[i], &jac[j]);
            g[i][j] = v;
            g[j][i] = v;
        }
    }
    g
}

fn is_degenerate(gram: &[[f64; 3]; 3], dim: usize) -> bool {
    let trace: f64 = (0..dim).map(|i| gram[i][i]).sum();
    if !(trace > 0.0) {
        return true;
    }
    let det = match dim {
        1 => gram[0][0],
        2 => gram[0][0] * gram[1][1] - gram[0][1] * gram[1][0],
        _ => {
            gram[0][0] * (gram[1][1] * gram[2][2] - gram[1][2] * gram[2][1])
                - gram[0][1] * (gram[1][0] * gram[2][2] - gram[1][2] * gram[2][0])
                + gram[0][2] * (gram[1][0] * gram[2][1] - gram[1][1] * gram[2][0])
        }
    };
    det / (trace / dim as f64).powi(dim as i32) < 1e-14
}

/// Gaussian elimination with partial pivoting on a `dim × dim` system.
fn solve_small(a: &[[f64; 3]; 3], b: &[f64], dim: usize) -> Option<[f64; 3]> {
    let mut m = *a;
    let mut x = [0.0; 3];
    x[..dim].copy_from_slice(&b[..dim]);
    for col in 0..dim {
        let piv = (col..dim).max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))?;
        if m[piv][col].abs() < 1e-300 {
            return None;
        }
        m.swap(col, piv);
        x.swap(col, piv);
        for row in col + 1..dim {
            let f = m[row][col] / m[col][col];
            for k in col..dim {
                m[row][k] -= f * m[col][k];
            }
            x[row] -= f * x[col];
        }
    }
    for col in (0..dim).rev() {
        let mut s = x[col];
        for k in col + 1..dim {
            s -= m[col][k] * x[k];
        }
        x[col] = s / m[col][col];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

struct Candidate {
    controls: Vec<f64>,
    action: f64,
    endpoint_error: f64,
    stationarity: f64,
}

fn run_minimization(
    lag: &Lagrangian,
    start: &Point,
    lifted_target: &Point,
    duration: f64,
    lambda: f64,
    opts: &MinimizeOptions,
    quotient: bool,
) -> Result<MinimizerResult> {
    opts.validate()?;
    if !(duration > 0.0) || !duration.is_finite() {
        return Err(Error::InvalidInput(format!("duration must be positive, got {duration}")));
    }
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidInput(format!("discount must be non-negative, got {lambda}")));
    }
    let space = lag.space();
    let n = opts.steps_for(duration);
    let problem = Transcription::new(lag, *start, *lifted_target, duration, lambda, n, quotient);
    let guess = problem.straight_guess(lifted_target);
    let scale = guess
        .chunks(problem.rank)
        .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
        .fold(0.0, f64::max)
        .max(1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);

    let mut best: Option<Candidate> = None;
    for s in 0..opts.multistarts {
        let mut u = guess.clone();
        if s > 0 {
            for v in u.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v += 0.5 * scale * z;
            }
        }
        let penalty_stat = problem.penalty_descent(&mut u, opts);
        let mut polished = u.clone();
        let stationarity = match problem.refine(&mut polished, opts) {
            Some(stat) => {
                u = polished;
                stat
            }
            None => penalty_stat,
        };
        let states = problem.rollout(&u);
        let end = states[n];
        let endpoint_error = if quotient {
            space.quotient_chart_distance(&end, lifted_target)
        } else {
            chart_distance_sq(&end, lifted_target).sqrt()
        };
        let cand = Candidate {
            action: problem.action(&u, &states),
            controls: u,
            endpoint_error,
            stationarity,
        };
        best = Some(match best {
            None => cand,
            Some(b) => better(b, cand, opts.endpoint_tol),
        });
    }
    let best = best.expect("at least one start");
    let controls: Vec<Control> = (0..n).map(|k| problem.control(&best.controls, k)).collect();
    let path = integrate(space, start, &controls, -duration, problem.dt)?;
    Ok(MinimizerResult {
        path,
        action_value: best.action,
        endpoint_error: best.endpoint_error,
        stationarity_norm: best.stationarity,
        converged: best.endpoint_error <= opts.endpoint_tol && best.stationarity <= opts.grad_tol,
    })
}

/// Feasible candidates first, then lower action; exact ties go to the
/// lexicographically smaller control vector.
fn better(a: Candidate, b: Candidate, tol: f64) -> Candidate {
    let fa = a.endpoint_error <= tol;
    let fb = b.endpoint_error <= tol;
    if fa != fb {
        return if fa { a } else { b };
    }
    if !fa && a.endpoint_error != b.endpoint_error {
        return if a.endpoint_error < b.endpoint_error { a } else { b };
    }
    match a.action.total_cmp(&b.action) {
        std::cmp::Ordering::Less => a,
        std::cmp::Ordering::Greater => b,
        std::cmp::Ordering::Equal => {
            let ord = a
                .controls
                .iter()
                .zip(&b.controls)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal);
            if ord.is_gt() {
                b
            } else {
                a
            }
        }
    }
}

/// Minimizes the discounted action `∫_{−T}^0 e^{λt} L dt` over horizontal
/// paths from `x` to (any lift of) `y`.
///
/// The initial guess heads for the lift of `y` closest to `x`.  The result
/// carries a `converged` flag rather than failing when stationarity is not
/// reached.
pub fn minimize_endpoint(
    lag: &Lagrangian,
    x: &Point,
    y: &Point,
    duration: f64,
    lambda: f64,
    opts: &MinimizeOptions,
) -> Result<MinimizerResult> {
    let space = lag.space();
    let (lifted, _) = space.nearest_representative(x, y);
    run_minimization(lag, x, &lifted, duration, lambda, opts, true)
}

/// Minimizes towards one fixed chart lift of the endpoint.
pub fn minimize_to_lift(
    lag: &Lagrangian,
    x: &Point,
    lifted_target: &Point,
    duration: f64,
    lambda: f64,
    opts: &MinimizeOptions,
) -> Result<MinimizerResult> {
    run_minimization(lag, x, lifted_target, duration, lambda, opts, false)
}

/// Upper estimate of `h_T(x, y)` (discounted when `λ > 0`).
pub fn minimal_action(lag: &Lagrangian, x: &Point, y: &Point, duration: f64, lambda: f64, opts: &MinimizeOptions) -> Result<f64> {
    minimize_endpoint(lag, x, y, duration, lambda, opts).map(|r| r.action_value)
}

/// Carnot–Carathéodory distance estimate `sqrt(2 h_1(x, y))` for the free
/// Lagrangian `½‖v‖²`.
pub fn cc_distance(space: ModelSpace, x: &Point, y: &Point, opts: &MinimizeOptions) -> Result<f64> {
    let free = Lagrangian::free(space);
    let h = minimal_action(&free, x, y, 1.0, 0.0, opts)?;
    Ok((2.0 * h.max(0.0)).sqrt())
}

pub const KERNEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KernelOptions {
    pub minimize: MinimizeOptions,
    /// Velocity cap; `None` selects `4·sqrt(2(max U − min U) + 1) + 2h/δ`.
    pub v_max: Option<f64>,
    /// Multiplier on the admissibility radius `V_max δ`.
    pub radius_scale: f64,
    /// Largest tolerated fraction of non-converged pair minimizations.
    pub max_failure_fraction: f64,
}

impl Default for KernelOptions {
    fn default() -> Self {
        Self {
            minimize: MinimizeOptions {
                grad_tol: 1e-6,
                ..MinimizeOptions::default()
            },
            v_max: None,
            radius_scale: 1.0,
            max_failure_fraction: 0.01,
        }
    }
}

/// Default kernel velocity cap.
pub fn default_v_max(lag: &Lagrangian, grid: &Grid, delta: f64) -> f64 {
    let pot = lag.potential();
    4.0 * (2.0 * (pot.max_value() - pot.min_value()) + 1.0).sqrt() + 2.0 * grid.horizontal_spacing() / delta
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelHeader {
    pub version: u32,
    pub config_hash: String,
    pub grid: Vec<usize>,
    pub delta: f64,
    pub lambda: f64,
    pub v_max: f64,
    pub radius: f64,
}

/// One admitted pair: the source node, the lattice element placing its lift
/// next to the target, and the minimal action from that lift to the target.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelEntry {
    pub source: u32,
    pub lift: [i32; 3],
    pub cost: f64,
}

/// Short-time minimal actions `h^λ_δ(y, x)` between admitted grid pairs,
/// grouped by target node.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelTable {
    pub header: KernelHeader,
    grid: Grid,
    entries: Vec<Vec<KernelEntry>>,
    /// Pair minimizations that did not meet the tolerances.
    pub failures: usize,
}

#[derive(Serialize)]
struct KernelKey<'a> {
    version: u32,
    lagrangian: LagrangianConfig,
    grid: &'a [usize],
    delta: f64,
    lambda: f64,
    options: &'a KernelOptions,
}

/// Hash identifying a kernel configuration.
pub fn kernel_config_hash(lag: &Lagrangian, grid: &Grid, delta: f64, lambda: f64, opts: &KernelOptions) -> Result<String> {
    config_hash(&KernelKey {
        version: KERNEL_FORMAT_VERSION,
        lagrangian: LagrangianConfig::from(lag),
        grid: grid.resolution(),
        delta,
        lambda,
        options: opts,
    })
}

/// A source lift admitted for a target node.
#[derive(Debug, Clone, Copy)]
struct PairCandidate {
    source: usize,
    lift: [i64; 3],
    source_lift: Point,
}

fn floor_div(a: i64, n: i64) -> (i64, i64) {
    (a.rem_euclid(n), a.div_euclid(n))
}

/// Sources admitted for `target` under the a-priori reachability bound.
fn admissible_sources(grid: &Grid, target: usize, radius: f64) -> Vec<PairCandidate> {
    let space = grid.space();
    let m = grid.multi_index(target);
    let x = grid.point(target);
    let res = grid.resolution();
    let mut out = Vec::new();
    match space.kind() {
        SpaceKind::FlatTorus => {
            let d = space.dim();
            let reach: Vec<i64> = (0..d).map(|a| (radius / grid.spacing(a)).floor() as i64).collect();
            let counts: Vec<i64> = reach.iter().map(|r| 2 * r + 1).collect();
            let total: i64 = counts.iter().product();
            for code in 0..total {
                let mut c = code;
                let mut off = [0i64; 3];
                for a in 0..d {
                    off[a] = c % counts[a] - reach[a];
                    c /= counts[a];
                }
                let dist2: f64 = (0..d).map(|a| (off[a] as f64 * grid.spacing(a)).powi(2)).sum();
                if dist2 > radius * radius * (1.0 + 1e-12) {
                    continue;
                }
                let mut src = [0usize; 3];
                let mut lift = [0i64; 3];
                for a in 0..d {
                    let (r, q) = floor_div(m[a] as i64 - off[a], res[a] as i64);
                    src[a] = r as usize;
                    lift[a] = q;
                }
                let source = grid.index(&src);
                let source_lift = space.shift(&grid.point(source), &lift);
                out.push(PairCandidate { source, lift, source_lift });
            }
        }
        SpaceKind::Heisenberg => {
            let (n0, n1, n2) = (res[0] as i64, res[1] as i64, res[2] as i64);
            let (h0, h1, hz) = (grid.spacing(0), grid.spacing(1), grid.spacing(2));
            let allowance = 0.25 * radius * radius + 0.5 * hz * (1.0 + 1e-9);
            let r0 = (radius / h0).floor() as i64;
            let r1 = (radius / h1).floor() as i64;
            for dj in -r1..=r1 {
                for di in -r0..=r0 {
                    let (dx, dy) = (di as f64 * h0, dj as f64 * h1);
                    if dx * dx + dy * dy > radius * radius * (1.0 + 1e-12) {
                        continue;
                    }
                    let (sx, a) = floor_div(m[0] as i64 - di, n0);
                    let (sy, b) = floor_div(m[1] as i64 - dj, n1);
                    let sy_coord = sy as f64 / n1 as f64;
                    // z of the straight horizontal segment's start, seen from the target
                    let predicted = (x[0] - 0.5 * dx) * dy;
                    let centre = x[2] - predicted - a as f64 * sy_coord;
                    let lo = ((centre - allowance) * n2 as f64).ceil() as i64;
                    let hi = ((centre + allowance) * n2 as f64).floor() as i64;
                    for j in lo..=hi {
                        let (sz, c) = floor_div(j, n2);
                        let source = grid.index(&[sx as usize, sy as usize, sz as usize]);
                        let lift = [a, b, c];
                        let source_lift = space.shift(&grid.point(source), &lift);
                        out.push(PairCandidate { source, lift, source_lift });
                    }
                }
            }
        }
    }
    out
}

impl KernelTable {
    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn delta(&self) -> f64 {
        self.header.delta
    }

    pub fn lambda(&self) -> f64 {
        self.header.lambda
    }

    pub fn entries(&self, target: usize) -> &[KernelEntry] {
        &self.entries[target]
    }

    pub fn pair_count(&self) -> usize {
        self.entries.iter().map(Vec::len).sum()
    }

    /// Smallest cost over all admitted lifts of `source` for `target`.
    pub fn cost(&self, source: usize, target: usize) -> Option<f64> {
        self.entries[target]
            .iter()
            .filter(|e| e.source as usize == source)
            .map(|e| e.cost)
            .min_by(f64::total_cmp)
    }

    pub fn self_cost(&self, node: usize) -> Option<f64> {
        self.entries[node]
            .iter()
            .filter(|e| e.source as usize == node && e.lift == [0, 0, 0])
            .map(|e| e.cost)
            .next()
    }

    pub fn is_admissible(&self, source: usize, target: usize) -> bool {
        self.entries[target].iter().any(|e| e.source as usize == source)
    }

    /// Builds the kernel by one endpoint minimization per admitted pair.
    pub fn build(lag: &Lagrangian, grid: &Grid, delta: f64, lambda: f64, opts: &KernelOptions) -> Result<Self> {
        if grid.space() != lag.space() {
            return Err(Error::GridMismatch("grid and Lagrangian live on different spaces".into()));
        }
        if !(delta > 0.0) || !delta.is_finite() {
            return Err(Error::InvalidInput(format!("kernel time step must be positive, got {delta}")));
        }
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::InvalidInput(format!("discount must be non-negative, got {lambda}")));
        }
        opts.minimize.validate()?;
        let v_max = opts.v_max.unwrap_or_else(|| default_v_max(lag, grid, delta));
        let radius = v_max * delta * opts.radius_scale;
        let results: Vec<Result<(Vec<KernelEntry>, usize)>> = (0..grid.len())
            .into_par_iter()
            .map(|target| {
                let x = grid.point(target);
                let mut entries = Vec::new();
                let mut failed = 0;
                for cand in admissible_sources(grid, target, radius) {
                    let r = minimize_to_lift(lag, &cand.source_lift, &x, delta, lambda, &opts.minimize)?;
                    if !r.converged {
                        failed += 1;
                    }
                    entries.push(KernelEntry {
                        source: cand.source as u32,
                        lift: [cand.lift[0] as i32, cand.lift[1] as i32, cand.lift[2] as i32],
                        cost: r.action_value,
                    });
                }
                Ok((entries, failed))
            })
            .collect();
        let mut entries = Vec::with_capacity(grid.len());
        let mut failures = 0;
        for r in results {
            let (e, f) = r?;
            failures += f;
            entries.push(e);
        }
        let pairs: usize = entries.iter().map(Vec::len).sum();
        if failures as f64 > opts.max_failure_fraction * pairs as f64 {
            return Err(Error::KernelBuild(format!(
                "{failures} of {pairs} pair minimizations did not converge (limit {:.1}%)",
                100.0 * opts.max_failure_fraction
            )));
        }
        let header = KernelHeader {
            version: KERNEL_FORMAT_VERSION,
            config_hash: kernel_config_hash(lag, grid, delta, lambda, opts)?,
            grid: grid.resolution().to_vec(),
            delta,
            lambda,
            v_max,
            radius,
        };
        Ok(Self {
            header,
            grid: *grid,
            entries,
            failures,
        })
    }

    /// Builds from explicit entries (used by tests and by imports).
    pub fn from_entries(grid: Grid, header: KernelHeader, entries: Vec<Vec<KernelEntry>>) -> Result<Self> {
        if entries.len() != grid.len() {
            return Err(Error::GridMismatch("one entry list per node required".into()));
        }
        Ok(Self {
            header,
            grid,
            entries,
            failures: 0,
        })
    }

    /// JSON header line, column header, then `target,source,l1,l2,l3,cost` rows.
    pub fn to_csv(&self) -> Result<String> {
        let mut s = serde_json::to_string(&self.header)?;
        s.push('\n');
        s.push_str("target,source,lift1,lift2,lift3,cost\n");
        for (t, list) in self.entries.iter().enumerate() {
            for e in list {
                let _ = writeln!(s, "{t},{},{},{},{},{}", e.source, e.lift[0], e.lift[1], e.lift[2], e.cost);
            }
        }
        Ok(s)
    }

    pub fn from_csv(space: ModelSpace, text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header: KernelHeader =
            serde_json::from_str(lines.next().ok_or_else(|| Error::Format("empty kernel file".into()))?)?;
        if header.version != KERNEL_FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported kernel format version {}", header.version)));
        }
        let grid = Grid::new(space, &header.grid)?;
        match lines.next() {
            Some(l) if l.starts_with("target,") => {}
            other => return Err(Error::Format(format!("unexpected column header {other:?}"))),
        }
        let mut entries = vec![Vec::new(); grid.len()];
        for line in lines.filter(|l| !l.is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(Error::Format(format!("bad kernel row {line:?}")));
            }
            let bad = || Error::Format(format!("bad kernel row {line:?}"));
            let target: usize = f[0].parse().map_err(|_| bad())?;
            let entry = KernelEntry {
                source: f[1].parse().map_err(|_| bad())?,
                lift: [
                    f[2].parse().map_err(|_| bad())?,
                    f[3].parse().map_err(|_| bad())?,
                    f[4].parse().map_err(|_| bad())?,
                ],
                cost: f[5].parse().map_err(|_| bad())?,
            };
            if target >= grid.len() || entry.source as usize >= grid.len() {
                return Err(bad());
            }
            entries[target].push(entry);
        }
        Self::from_entries(grid, header, entries)
    }
}

/// Path of the cache file for a kernel configuration hash.
pub fn kernel_cache_path(cache_dir: &Path, hash: &str) -> PathBuf {
    cache_dir.join(format!("kernel-{hash}.csv"))
}

/// Loads the kernel from `cache_dir` when a file with a matching header hash
/// exists, otherwise builds and stores it.  Returns the table and whether the
/// cache was hit.
pub fn build_kernel_cached(
    lag: &Lagrangian,
    grid: &Grid,
    delta: f64,
    lambda: f64,
    opts: &KernelOptions,
    cache_dir: &Path,
) -> Result<(KernelTable, bool)> {
    let hash = kernel_config_hash(lag, grid, delta, lambda, opts)?;
    let path = kernel_cache_path(cache_dir, &hash);
    if path.exists() {
        let text = fs::read_to_string(&path)?;
        if let Ok(table) = KernelTable::from_csv(lag.space(), &text) {
            if table.header.config_hash == hash {
                return Ok((table, true));
            }
        }
    }
    let table = KernelTable::build(lag, grid, delta, lambda, opts)?;
    fs::create_dir_all(cache_dir)?;
    let tmp = path.with_extension("csv.tmp");
    fs::write(&tmp, table.to_csv()?)?;
    fs::rename(&tmp, &path)?;
    Ok((table, false))
}
