//! Dense two-phase revised simplex for `min cᵀx, Ax = b, x ≥ 0`.
//!
//! The basis inverse is kept explicitly and refactorized periodically.
//! Pricing is Dantzig's rule; after a run of degenerate pivots it switches to
//! Bland's rule (smallest improving index, smallest leaving index) until a
//! pivot makes progress, which rules out cycling.  Phase two runs on a
//! right-hand side whose basic values are shifted by a small deterministic
//! amount, so that pivots on degenerate vertices still make progress; the
//! true right-hand side is restored afterwards and any negative basic value
//! left over is removed with dual simplex pivots.  The pivot sequence is a
//! pure function of the instance.

use crate::error::{Error, Result};

/// Dense problem in equality form; `columns[j]` is column `j` of `A`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProgram {
    pub cost: Vec<f64>,
    pub columns: Vec<Vec<f64>>,
    pub rhs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimplexSolution {
    pub x: Vec<f64>,
    pub objective: f64,
    /// Dual values `y = c_Bᵀ B⁻¹`, one per equality row.
    pub duals: Vec<f64>,
    /// `min_j c_j − yᵀA_j`; optimality certificate when `≥ −tol`.
    pub min_reduced_cost: f64,
    pub iterations: usize,
    /// `(row, entering column)` per pivot, in order.
    pub pivots: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, Copy)]
pub struct SimplexOptions {
    pub max_iters: usize,
    pub pivot_tol: f64,
    pub optimality_tol: f64,
    pub feasibility_tol: f64,
    pub refactor_every: usize,
    /// Consecutive degenerate pivots before Bland's rule takes over.
    pub degenerate_limit: usize,
    /// Shift of the basic values at the start of phase two; 0 disables it.
    pub perturbation: f64,
}

impl Default for SimplexOptions {
    fn default() -> Self {
        Self {
            max_iters: 200_000,
            pivot_tol: 1e-9,
            optimality_tol: 1e-9,
            feasibility_tol: 1e-7,
            refactor_every: 64,
            degenerate_limit: 20,
            perturbation: 1e-6,
        }
    }
}

impl LinearProgram {
    pub fn rows(&self) -> usize {
        self.rhs.len()
    }

    pub fn cols(&self) -> usize {
        self.cost.len()
    }

    fn validate(&self) -> Result<()> {
        let m = self.rows();
        if self.columns.len() != self.cols() {
            return Err(Error::InvalidInput("one column per cost entry required".into()));
        }
        if self.columns.iter().any(|c| c.len() != m) {
            return Err(Error::InvalidInput("column length differs from row count".into()));
        }
        let finite = self.cost.iter().chain(&self.rhs).chain(self.columns.iter().flatten()).all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidInput("linear program has non-finite data".into()));
        }
        Ok(())
    }

    /// Plain-text export: `rows m cols n`, then the cost line `c c_1 … c_n`,
    /// then one line `b_i a_i1 … a_in` per row.
    pub fn to_text(&self) -> String {
        let mut s = format!("rows {} cols {}\nc", self.rows(), self.cols());
        for c in &self.cost {
            s.push(' ');
            s.push_str(&c.to_string());
        }
        s.push('\n');
        for i in 0..self.rows() {
            s.push_str(&self.rhs[i].to_string());
            for col in &self.columns {
                s.push(' ');
                s.push_str(&col[i].to_string());
            }
            s.push('\n');
        }
        s
    }

    pub fn solve(&self, opts: &SimplexOptions) -> Result<SimplexSolution> {
        self.validate()?;
        Solver::new(self, opts).run()
    }
}

/// Steps at or below this length count as degenerate pivots.
const DEGENERATE_STEP: f64 = 1e-12;

/// Slack of the Harris ratio test; kept well below the perturbation.
const HARRIS_SLACK: f64 = 1e-9;

struct Solver<'a> {
    lp: &'a LinearProgram,
    opts: &'a SimplexOptions,
    m: usize,
    n: usize,
    /// Row signs making `b ≥ 0`.
    sign: Vec<f64>,
    /// Sign-normalized right-hand side currently in use.
    rhs: Vec<f64>,
    basis: Vec<usize>,
    binv: Vec<Vec<f64>>,
    xb: Vec<f64>,
    pivots: Vec<(usize, usize)>,
    iterations: usize,
}

impl<'a> Solver<'a> {
    fn new(lp: &'a LinearProgram, opts: &'a SimplexOptions) -> Self {
        let m = lp.rows();
        let n = lp.cols();
        let sign: Vec<f64> = lp.rhs.iter().map(|b| if *b < 0.0 { -1.0 } else { 1.0 }).collect();
        let mut binv = vec![vec![0.0; m]; m];
        for (i, row) in binv.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        let rhs: Vec<f64> = lp.rhs.iter().zip(&sign).map(|(b, s)| b * s).collect();
        Self {
            lp,
            opts,
            m,
            n,
            sign,
            xb: rhs.clone(),
            rhs,
            basis: (n..n + m).collect(),
            binv,
            pivots: Vec::new(),
            iterations: 0,
        }
    }

    fn is_artificial(&self, j: usize) -> bool {
        j >= self.n
    }

    /// Column `j` of the sign-normalized `[A | I]`.
    fn column(&self, j: usize) -> Vec<f64> {
        if self.is_artificial(j) {
            let mut e = vec![0.0; self.m];
            e[j - self.n] = 1.0;
            e
        } else {
            self.lp.columns[j].iter().zip(&self.sign).map(|(a, s)| a * s).collect()
        }
    }

    fn cost(&self, j: usize, phase_one: bool) -> f64 {
        match (phase_one, self.is_artificial(j)) {
            (true, true) => 1.0,
            (true, false) => 0.0,
            (false, true) => 0.0,
            (false, false) => self.lp.cost[j],
        }
    }

    fn duals(&self, phase_one: bool) -> Vec<f64> {
        let mut y = vec![0.0; self.m];
        for (r, &j) in self.basis.iter().enumerate() {
            let cb = self.cost(j, phase_one);
            if cb != 0.0 {
                for (yi, bi) in y.iter_mut().zip(&self.binv[r]) {
                    *yi += cb * bi;
                }
            }
        }
        y
    }

    fn reduced_cost(&self, j: usize, y: &[f64], phase_one: bool) -> f64 {
        let col = self.column(j);
        self.cost(j, phase_one) - col.iter().zip(y).map(|(a, b)| a * b).sum::<f64>()
    }

    fn refactor(&mut self) -> Result<()> {
        let m = self.m;
        // Gauss–Jordan on [B | I]
        let mut a: Vec<Vec<f64>> = (0..m)
            .map(|i| {
                let mut row = vec![0.0; 2 * m];
                row[m + i] = 1.0;
                row
            })
            .collect();
        for (r, &j) in self.basis.iter().enumerate() {
            let col = self.column(j);
            for i in 0..m {
                a[i][r] = col[i];
            }
        }
        for col in 0..m {
            let piv = (col..m)
                .max_by(|&i, &k| a[i][col].abs().total_cmp(&a[k][col].abs()))
                .expect("non-empty range");
            if a[piv][col].abs() < 1e-13 {
                return Err(Error::InvalidInput("basis matrix became singular".into()));
            }
            a.swap(col, piv);
            let p = a[col][col];
            for v in a[col].iter_mut() {
                *v /= p;
            }
            let pivot_row = a[col].clone();
            for (i, row) in a.iter_mut().enumerate() {
                if i != col && row[col] != 0.0 {
                    let f = row[col];
                    for (v, pv) in row.iter_mut().zip(&pivot_row) {
                        *v -= f * pv;
                    }
                }
            }
        }
        self.binv = a.into_iter().map(|row| row[m..].to_vec()).collect();
        self.xb = self.binv.iter().map(|row| row.iter().zip(&self.rhs).map(|(x, y)| x * y).sum()).collect();
        for v in self.xb.iter_mut() {
            if *v < 0.0 && *v > -self.opts.feasibility_tol {
                *v = 0.0;
            }
        }
        Ok(())
    }

    /// Two-pass Harris ratio test.  The first pass bounds the step with the
    /// feasibility tolerance as slack; the second picks, among rows whose
    /// ratio stays under the bound, the largest pivot (or the smallest basis
    /// index under Bland's rule).  In phase two a basic artificial with a
    /// usable pivot leaves first at step zero.
    fn ratio_test(&self, alpha: &[f64], phase_one: bool, bland: bool) -> Option<(usize, f64)> {
        let tol = self.opts.pivot_tol;
        if !phase_one {
            let art = (0..self.m)
                .filter(|&r| self.is_artificial(self.basis[r]) && alpha[r].abs() > tol)
                .max_by(|&a, &b| alpha[a].abs().total_cmp(&alpha[b].abs()));
            if let Some(r) = art {
                return Some((r, 0.0));
            }
        }
        let slack = HARRIS_SLACK.min(self.opts.feasibility_tol);
        let bound = (0..self.m)
            .filter(|&r| alpha[r] > tol)
            .map(|r| (self.xb[r].max(0.0) + slack) / alpha[r])
            .fold(f64::INFINITY, f64::min);
        if bound == f64::INFINITY {
            return None;
        }
        let mut best: Option<usize> = None;
        for r in (0..self.m).filter(|&r| alpha[r] > tol && self.xb[r].max(0.0) / alpha[r] <= bound) {
            let better = match best {
                None => true,
                Some(b) if bland => self.basis[r] < self.basis[b],
                Some(b) => alpha[r] > alpha[b],
            };
            if better {
                best = Some(r);
            }
        }
        best.map(|r| (r, self.xb[r].max(0.0) / alpha[r]))
    }

    /// Basis exchange at row `r` for column `q` with step `theta`.
    fn pivot(&mut self, r: usize, q: usize, alpha: &[f64], theta: f64) {
        for i in 0..self.m {
            self.xb[i] -= theta * alpha[i];
            // Harris steps may overshoot blocking rows by up to the slack
            if self.xb[i] < 0.0 && self.xb[i] > -self.opts.feasibility_tol {
                self.xb[i] = 0.0;
            }
        }
        self.xb[r] = theta;
        let p = alpha[r];
        let pivot_row: Vec<f64> = self.binv[r].iter().map(|v| v / p).collect();
        for (i, row) in self.binv.iter_mut().enumerate() {
            if i == r {
                row.copy_from_slice(&pivot_row);
            } else if alpha[i] != 0.0 {
                for (v, pv) in row.iter_mut().zip(&pivot_row) {
                    *v -= alpha[i] * pv;
                }
            }
        }
        self.basis[r] = q;
        self.pivots.push((r, q));
        self.iterations += 1;
    }

    fn alpha(&self, q: usize) -> Vec<f64> {
        let col = self.column(q);
        self.binv.iter().map(|row| row.iter().zip(&col).map(|(a, b)| a * b).sum()).collect()
    }

    /// Shifts the structural basic values up by a small amount that differs
    /// from row to row; artificial rows stay at zero.
    fn perturb(&mut self) -> Result<()> {
        let eps = self.opts.perturbation;
        let scale = 1.0 + self.xb.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        for r in 0..self.m {
            let j = self.basis[r];
            if self.is_artificial(j) {
                continue;
            }
            let frac = ((r as f64 + 1.0) * 0.618_033_988_749_895).fract();
            let shift = eps * scale * (1.0 + frac);
            let col = self.column(j);
            for (b, a) in self.rhs.iter_mut().zip(&col) {
                *b += shift * a;
            }
        }
        self.refactor()
    }

    /// Dual simplex pivots until every basic value is nonnegative.
    fn dual_cleanup(&mut self) -> Result<()> {
        loop {
            if self.iterations >= self.opts.max_iters {
                return Err(Error::NotConverged(format!("simplex exceeded {} iterations", self.opts.max_iters)));
            }
            let worst = (0..self.m).min_by(|&a, &b| self.xb[a].total_cmp(&self.xb[b]));
            let Some(r) = worst.filter(|&r| self.xb[r] < -self.opts.feasibility_tol) else {
                return Ok(());
            };
            let y = self.duals(false);
            let mut in_basis = vec![false; self.n + self.m];
            for &j in &self.basis {
                in_basis[j] = true;
            }
            let mut entering: Option<(usize, f64)> = None;
            for j in (0..self.n).filter(|&j| !in_basis[j]) {
                let col = self.column(j);
                let a: f64 = self.binv[r].iter().zip(&col).map(|(x, y)| x * y).sum();
                if a < -self.opts.pivot_tol {
                    let ratio = self.reduced_cost(j, &y, false).max(0.0) / -a;
                    if entering.map_or(true, |(_, best)| ratio < best) {
                        entering = Some((j, ratio));
                    }
                }
            }
            let Some((q, _)) = entering else {
                return Err(Error::Infeasible(format!("row {r} stays negative after restoring the right-hand side")));
            };
            let alpha = self.alpha(q);
            let theta = self.xb[r] / alpha[r];
            self.pivot(r, q, &alpha, theta);
            if self.iterations % self.opts.refactor_every == 0 {
                self.refactor()?;
            }
        }
    }

    fn iterate(&mut self, phase_one: bool) -> Result<()> {
        let total = self.n + self.m;
        let mut degenerate_run = 0;
        loop {
            if self.iterations >= self.opts.max_iters {
                return Err(Error::NotConverged(format!("simplex exceeded {} iterations", self.opts.max_iters)));
            }
            let y = self.duals(phase_one);
            let bland = degenerate_run >= self.opts.degenerate_limit;
            let mut in_basis = vec![false; total];
            for &j in &self.basis {
                in_basis[j] = true;
            }
            let candidates = if phase_one { total } else { self.n };
            let mut entering: Option<(usize, f64)> = None;
            for j in 0..candidates {
                if in_basis[j] {
                    continue;
                }
                let d = self.reduced_cost(j, &y, phase_one);
                if d < -self.opts.optimality_tol {
                    match entering {
                        None => entering = Some((j, d)),
                        Some((_, best)) if !bland && d < best => entering = Some((j, d)),
                        _ => {}
                    }
                    if bland {
                        break;
                    }
                }
            }
            let Some((q, _)) = entering else {
                return Ok(());
            };
            let alpha = self.alpha(q);
            let leave = self.ratio_test(&alpha, phase_one, bland);
            let Some((r, theta)) = leave else {
                return Err(Error::Unbounded(format!("column {q} has no blocking row")));
            };
            self.pivot(r, q, &alpha, theta);
            degenerate_run = if theta <= DEGENERATE_STEP { degenerate_run + 1 } else { 0 };
            if self.iterations % self.opts.refactor_every == 0 {
                self.refactor()?;
            }
        }
    }

    fn run(mut self) -> Result<SimplexSolution> {
        self.iterate(true)?;
        self.refactor()?;
        let infeasibility: f64 = self
            .basis
            .iter()
            .zip(&self.xb)
            .filter(|(j, _)| self.is_artificial(**j))
            .map(|(_, x)| x.abs())
            .sum();
        if infeasibility > self.opts.feasibility_tol {
            return Err(Error::Infeasible(format!("phase one ended with artificial mass {infeasibility:.3e}")));
        }
        if self.opts.perturbation > 0.0 {
            self.perturb()?;
            self.iterate(false)?;
            self.rhs = self.lp.rhs.iter().zip(&self.sign).map(|(b, s)| b * s).collect();
            self.refactor()?;
            self.dual_cleanup()?;
        }
        self.iterate(false)?;
        self.refactor()?;
        let mut x = vec![0.0; self.n];
        for (r, &j) in self.basis.iter().enumerate() {
            if !self.is_artificial(j) {
                x[j] = self.xb[r].max(0.0);
            }
        }
        let y_norm = self.duals(false);
        let min_reduced_cost = (0..self.n)
            .map(|j| self.reduced_cost(j, &y_norm, false))
            .fold(f64::INFINITY, f64::min);
        let duals = y_norm.iter().zip(&self.sign).map(|(y, s)| y * s).collect();
        let objective = x.iter().zip(&self.lp.cost).map(|(a, b)| a * b).sum();
        Ok(SimplexSolution {
            x,
            objective,
            duals,
            min_reduced_cost,
            iterations: self.iterations,
            pivots: self.pivots,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn lp(cost: Vec<f64>, rows: Vec<Vec<f64>>, rhs: Vec<f64>) -> LinearProgram {
        let n = cost.len();
        let columns = (0..n).map(|j| rows.iter().map(|r| r[j]).collect()).collect();
        LinearProgram { cost, columns, rhs }
    }

    #[test]
    fn small_textbook_problem() {
        // min −x − y, x + 2y + s1 = 4, 3x + y + s2 = 6
        let p = lp(
            vec![-1.0, -1.0, 0.0, 0.0],
            vec![vec![1.0, 2.0, 1.0, 0.0], vec![3.0, 1.0, 0.0, 1.0]],
            vec![4.0, 6.0],
        );
        let s = p.solve(&SimplexOptions::default()).unwrap();
        assert_abs_diff_eq!(s.objective, -2.8, epsilon = 1e-12);
        assert_abs_diff_eq!(s.x[0], 1.6, epsilon = 1e-12);
        assert_abs_diff_eq!(s.x[1], 1.2, epsilon = 1e-12);
        assert!(s.min_reduced_cost >= -1e-9);
        // strong duality
        let dual_obj: f64 = s.duals.iter().zip(&p.rhs).map(|(a, b)| a * b).sum();
        assert_abs_diff_eq!(dual_obj, s.objective, epsilon = 1e-12);
    }

    #[test]
    fn detects_infeasible_and_unbounded() {
        let p = lp(vec![1.0, 1.0], vec![vec![1.0, 1.0]], vec![-1.0]);
        assert!(matches!(p.solve(&SimplexOptions::default()), Err(Error::Infeasible(_))));
        let p = lp(vec![-1.0, 0.0], vec![vec![1.0, -1.0]], vec![1.0]);
        assert!(matches!(p.solve(&SimplexOptions::default()), Err(Error::Unbounded(_))));
    }

    #[test]
    fn redundant_rows_are_tolerated() {
        let p = lp(
            vec![1.0, 2.0, 3.0],
            vec![vec![1.0, 1.0, 1.0], vec![2.0, 2.0, 2.0]],
            vec![1.0, 2.0],
        );
        let s = p.solve(&SimplexOptions::default()).unwrap();
        assert_abs_diff_eq!(s.objective, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn degenerate_cycling_example_terminates() {
        // Beale's example, which cycles under the plain largest-coefficient rule
        let p = lp(
            vec![-0.75, 150.0, -0.02, 6.0, 0.0, 0.0, 0.0],
            vec![
                vec![0.25, -60.0, -0.04, 9.0, 1.0, 0.0, 0.0],
                vec![0.5, -90.0, -0.02, 3.0, 0.0, 1.0, 0.0],
                vec![0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
            ],
            vec![0.0, 0.0, 1.0],
        );
        let opts = SimplexOptions { degenerate_limit: 2, ..SimplexOptions::default() };
        let s = p.solve(&opts).unwrap();
        assert_abs_diff_eq!(s.objective, -0.05, epsilon = 1e-12);
    }

    /// Occupation-measure shape: a probability row plus closedness rows, with
    /// a point-mass optimum that sits on a heavily degenerate vertex.
    #[test]
    fn degenerate_point_mass_optimum_terminates() {
        use std::f64::consts::PI;
        let (nodes, speeds) = (24, 9);
        let (mut cost, mut columns) = (Vec::new(), Vec::new());
        for i in 0..nodes {
            let x = i as f64 / nodes as f64;
            for s in 0..speeds {
                let u = -2.0 + 4.0 * s as f64 / (speeds - 1) as f64;
                cost.push(0.5 * u * u - (0.5 + 0.5 * (2.0 * PI * x).cos()));
                let mut col = vec![1.0];
                for k in 1..=4 {
                    let w = 2.0 * PI * k as f64;
                    col.push(-w * (w * x).sin() * u);
                    col.push(w * (w * x).cos() * u);
                }
                columns.push(col);
            }
        }
        let mut rhs = vec![0.0; 9];
        rhs[0] = 1.0;
        let p = LinearProgram { cost, columns, rhs };
        let s = p.solve(&SimplexOptions { max_iters: 5_000, ..SimplexOptions::default() }).unwrap();
        assert_abs_diff_eq!(s.objective, -1.0, epsilon = 1e-9);
        assert!(s.min_reduced_cost > -1e-9);
    }
}
