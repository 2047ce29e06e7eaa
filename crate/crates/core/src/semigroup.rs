//! Discrete Lax–Oleinik semigroup on grid functions: critical value and weak
//! KAM solutions, discounted value functions, long-time and vanishing-discount
//! limits.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::Lagrangian;
use crate::grid::GridFunction;
use crate::tonelli::KernelTable;

fn check_grid(kernel: &KernelTable, u: &GridFunction) -> Result<()> {
    kernel.grid().check_same(&u.grid)
}

/// `x ↦ min_y factor·u(y) + h(y, x)` over admitted pairs, as a Jacobi sweep.
fn apply(kernel: &KernelTable, u: &GridFunction, factor: f64) -> GridFunction {
    let values = (0..u.len())
        .into_par_iter()
        .map(|x| {
            kernel
                .entries(x)
                .iter()
                .map(|e| factor * u.values[e.source as usize] + e.cost)
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    GridFunction { grid: u.grid, values }
}

/// One step `ℒ_δ u(x) = min_y u(y) + h_δ(y, x)` of the undiscounted semigroup.
pub fn lo_step(kernel: &KernelTable, u: &GridFunction) -> Result<GridFunction> {
    check_grid(kernel, u)?;
    if kernel.lambda() != 0.0 {
        return Err(Error::InvalidInput("lo_step needs an undiscounted kernel".into()));
    }
    Ok(apply(kernel, u, 1.0))
}

/// One step `x ↦ min_y e^{−λδ} u(y) + h^λ_δ(y, x)` of the discounted semigroup.
pub fn lo_step_discounted(kernel: &KernelTable, u: &GridFunction) -> Result<GridFunction> {
    check_grid(kernel, u)?;
    let lambda = kernel.lambda();
    if !(lambda > 0.0) {
        return Err(Error::InvalidInput(format!("discounted step needs λ > 0, kernel has {lambda}")));
    }
    Ok(apply(kernel, u, (-lambda * kernel.delta()).exp()))
}

/// `ℒ_{kδ} u` for an undiscounted kernel.
pub fn lo_iterate(kernel: &KernelTable, u: &GridFunction, steps: usize) -> Result<GridFunction> {
    let mut v = u.clone();
    for _ in 0..steps {
        v = lo_step(kernel, &v)?;
    }
    Ok(v)
}

/// Number of kernel steps representing time `t`, which must be a multiple of δ.
pub fn steps_for_time(kernel: &KernelTable, t: f64) -> Result<usize> {
    let k = t / kernel.delta();
    if !(k >= 0.0) || (k - k.round()).abs() > 1e-9 * k.max(1.0) {
        return Err(Error::InvalidInput(format!(
            "time {t} is not a non-negative multiple of the kernel step {}",
            kernel.delta()
        )));
    }
    Ok(k.round() as usize)
}

#[derive(Debug, Clone)]
pub struct DiscountedResult {
    pub lambda: f64,
    pub u: GridFunction,
    pub contraction_residual: f64,
    pub iterations: usize,
}

/// Banach iteration from `u ≡ 0` for the discounted value function.
pub fn solve_discounted(kernel: &KernelTable, tol: f64, max_iters: usize) -> Result<DiscountedResult> {
    let lambda = kernel.lambda();
    if !(lambda > 0.0) {
        return Err(Error::InvalidInput(format!("discounted solve needs λ > 0, kernel has {lambda}")));
    }
    let factor = (-lambda * kernel.delta()).exp();
    let threshold = tol * (1.0 - factor);
    let mut u = GridFunction::constant(*kernel.grid(), 0.0);
    let mut change = f64::INFINITY;
    for it in 1..=max_iters {
        let next = apply(kernel, &u, factor);
        change = next.sup_distance(&u)?;
        u = next;
        if change <= threshold {
            return Ok(DiscountedResult {
                lambda,
                u,
                contraction_residual: change,
                iterations: it,
            });
        }
    }
    Err(Error::NotConverged(format!(
        "discounted iteration at λ={lambda}: sup-change {change:.3e} after {max_iters} iterations (target {threshold:.3e})"
    )))
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct HistoryRow {
    pub iteration: usize,
    pub drift: f64,
    pub sup_change: f64,
}

#[derive(Debug, Clone)]
pub struct CriticalResult {
    pub c_estimate: f64,
    /// Bracket `min(u − ℒu)/δ ≤ c ≤ max(u − ℒu)/δ` from the final iterate.
    pub c_lower: f64,
    pub c_upper: f64,
    pub u: GridFunction,
    pub anchor: usize,
    pub fixed_point_residual: f64,
    pub iterations: usize,
    pub history: Vec<HistoryRow>,
}

/// Normalized value iteration `u ← ℒ_δ u − (ℒ_δ u)(anchor)` from `u ≡ 0`.
pub fn solve_critical(kernel: &KernelTable, tol: f64, max_iters: usize, anchor: usize) -> Result<CriticalResult> {
    let grid = *kernel.grid();
    if anchor >= grid.len() {
        return Err(Error::InvalidInput(format!("anchor {anchor} outside grid of {} nodes", grid.len())));
    }
    let delta = kernel.delta();
    let mut u = GridFunction::constant(grid, 0.0);
    let mut history = Vec::new();
    let mut c_prev = f64::NAN;
    for it in 1..=max_iters {
        let mut next = lo_step(kernel, &u)?;
        let drift = next.values[anchor] - u.values[anchor];
        let c = -drift / delta;
        let shift = next.values[anchor];
        if shift != 0.0 {
            for v in next.values.iter_mut() {
                *v -= shift;
            }
        }
        let change = next.sup_distance(&u)?;
        history.push(HistoryRow {
            iteration: it,
            drift,
            sup_change: change,
        });
        u = next;
        if change <= tol && (c - c_prev).abs() <= tol {
            let image = lo_step(kernel, &u)?;
            let gaps: Vec<f64> = u.values.iter().zip(&image.values).map(|(a, b)| (a - b) / delta).collect();
            let c_lower = gaps.iter().copied().fold(f64::INFINITY, f64::min);
            let c_upper = gaps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let residual = u
                .values
                .iter()
                .zip(&image.values)
                .map(|(a, b)| (a - b - c * delta).abs())
                .fold(0.0, f64::max);
            return Ok(CriticalResult {
                c_estimate: c,
                c_lower,
                c_upper,
                u,
                anchor,
                fixed_point_residual: residual,
                iterations: it,
                history,
            });
        }
        c_prev = c;
    }
    let tail: Vec<String> = history
        .iter()
        .rev()
        .take(6)
        .map(|h| format!("(drift {:.3e}, change {:.3e})", h.drift, h.sup_change))
        .collect();
    Err(Error::NotConverged(format!(
        "critical iteration after {max_iters} steps; last records {}",
        tail.join(", ")
    )))
}

/// `max_{pairs} u(x) − u(y) − h_δ(y, x) − cδ`, positive when `u` fails to be
/// dominated by `L + c` on some admitted pair.
pub fn domination_defect(kernel: &KernelTable, u: &GridFunction, c: f64) -> Result<f64> {
    check_grid(kernel, u)?;
    let cd = c * kernel.delta();
    Ok((0..u.len())
        .into_par_iter()
        .map(|x| {
            kernel
                .entries(x)
                .iter()
                .map(|e| u.values[x] - u.values[e.source as usize] - e.cost - cd)
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .reduce(|| f64::NEG_INFINITY, f64::max))
}

#[derive(Debug, Clone)]
pub struct LongTimeRecord {
    pub times: Vec<f64>,
    /// `sup |w_{n+1} − w_n|` for `w_n = ℒ_{nδ} u + c nδ`.
    pub sup_changes: Vec<f64>,
    pub limit: GridFunction,
    pub converged: bool,
    /// Largest nodewise decrease of `t ↦ ℒ_t u + ct`; zero for dominated data.
    pub max_decrease: f64,
    /// `sup |limit − predicted|` when a prediction was supplied.
    pub distance_to_prediction: Option<f64>,
}

/// Follows `ℒ_t u0 + ct` until its sup-change per step drops below `tol` or
/// `t_max` is reached.
pub fn lo_long_time(
    kernel: &KernelTable,
    u0: &GridFunction,
    c: f64,
    t_max: f64,
    tol: f64,
    predicted: Option<&GridFunction>,
) -> Result<LongTimeRecord> {
    check_grid(kernel, u0)?;
    let delta = kernel.delta();
    let max_steps = (t_max / delta).floor() as usize;
    let mut w = u0.clone();
    let mut times = Vec::new();
    let mut sup_changes = Vec::new();
    let mut max_decrease: f64 = 0.0;
    let mut converged = false;
    for n in 1..=max_steps {
        let next = lo_step(kernel, &w)?.shifted(c * delta);
        let mut change: f64 = 0.0;
        for (a, b) in next.values.iter().zip(&w.values) {
            change = change.max((a - b).abs());
            max_decrease = max_decrease.max(b - a);
        }
        times.push(n as f64 * delta);
        sup_changes.push(change);
        w = next;
        if change <= tol {
            converged = true;
            break;
        }
    }
    let distance_to_prediction = predicted.map(|p| w.sup_distance(p)).transpose()?;
    Ok(LongTimeRecord {
        times,
        sup_changes,
        limit: w,
        converged,
        max_decrease,
        distance_to_prediction,
    })
}

#[derive(Debug, Clone)]
pub struct VanishingRecord {
    pub lambdas: Vec<f64>,
    /// `u_λ + c/λ` per discount.
    pub shifted: Vec<GridFunction>,
    /// Sup-norm differences between consecutive entries of `shifted`.
    pub cauchy: Vec<f64>,
    /// Sup-norm distance of each entry to the candidate limit, if supplied.
    pub candidate_distance: Option<Vec<f64>>,
}

/// Tabulates `u_λ + c/λ` along a decreasing sequence of discounts.
pub fn vanishing_discount(
    solutions: &[DiscountedResult],
    c: f64,
    candidate: Option<&GridFunction>,
) -> Result<VanishingRecord> {
    if solutions.windows(2).any(|w| !(w[1].lambda < w[0].lambda)) {
        return Err(Error::InvalidInput("discounts must be strictly decreasing".into()));
    }
    let shifted: Vec<GridFunction> = solutions.iter().map(|s| s.u.shifted(c / s.lambda)).collect();
    let cauchy = shifted
        .windows(2)
        .map(|w| w[1].sup_distance(&w[0]))
        .collect::<Result<Vec<_>>>()?;
    let candidate_distance = candidate
        .map(|cand| shifted.iter().map(|s| s.sup_distance(cand)).collect::<Result<Vec<_>>>())
        .transpose()?;
    Ok(VanishingRecord {
        lambdas: solutions.iter().map(|s| s.lambda).collect(),
        shifted,
        cauchy,
        candidate_distance,
    })
}

/// Numerical check of `∂_v L · v ≤ C₁ L + C₂` on the phase box `‖u‖ ≤ v_max`.
#[derive(Debug, Clone, Serialize)]
pub struct GrowthReport {
    pub c1: f64,
    pub c2: f64,
    /// Largest sampled value of `∂_v L · v − C₁ L − C₂`.
    pub worst_margin: f64,
    pub holds: bool,
}

/// With `C₁ = 3` the mechanical Lagrangian satisfies the growth bound
/// globally, with `C₂ = 2‖ω‖² + 3 max U`; the samples confirm it.
pub fn growth_condition(lag: &Lagrangian, v_max: f64, samples_per_axis: usize) -> GrowthReport {
    let c1 = 3.0;
    let w2 = lag.one_form_norm().powi(2);
    let c2 = 2.0 * w2 + 3.0 * lag.potential().max_value();
    let space = lag.space();
    let rank = space.rank();
    let n = samples_per_axis.max(2);
    let axis = |i: usize| -v_max + 2.0 * v_max * i as f64 / (n - 1) as f64;
    let mut worst = f64::NEG_INFINITY;
    let pos_samples = 16usize;
    let total = n.pow(rank as u32);
    for code in 0..total {
        let mut u = [0.0; 3];
        let mut k = code;
        for ui in u.iter_mut().take(rank) {
            *ui = axis(k % n);
            k /= n;
        }
        for s in 0..pos_samples {
            let t = s as f64 / pos_samples as f64;
            let p = [t, (t * 7.0).fract(), 0.0];
            let g = lag.control_gradient(&u);
            let dv: f64 = (0..rank).map(|i| g[i] * u[i]).sum();
            worst = worst.max(dv - c1 * lag.value(&p, &u) - c2);
        }
    }
    GrowthReport {
        c1,
        c2,
        worst_margin: worst,
        holds: worst <= 1e-12 * (1.0 + c2.abs()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{ModelSpace, Potential, TrigTerm};
    use crate::grid::Grid;
    use crate::tonelli::{KernelEntry, KernelHeader, KernelOptions};
    use approx::assert_abs_diff_eq;

    fn bump_lagrangian() -> Lagrangian {
        let s = ModelSpace::flat_torus(1).unwrap();
        let pot = Potential::new(
            s,
            vec![
                TrigTerm { wave: vec![0], amplitude: 0.5, phase: 0.0 },
                TrigTerm { wave: vec![1], amplitude: 0.5, phase: 0.0 },
            ],
        )
        .unwrap();
        Lagrangian::new(pot, &[]).unwrap()
    }

    fn coarse_kernel(lag: &Lagrangian, lambda: f64) -> KernelTable {
        let grid = Grid::uniform(lag.space(), 32).unwrap();
        KernelTable::build(lag, &grid, 0.1, lambda, &KernelOptions::default()).unwrap()
    }

    #[test]
    fn free_constant_is_fixed() {
        let lag = Lagrangian::free(ModelSpace::flat_torus(1).unwrap());
        let k = coarse_kernel(&lag, 0.0);
        let u = GridFunction::constant(*k.grid(), 3.0);
        let v = lo_step(&k, &u).unwrap();
        assert!(v.values.iter().all(|&x| x == 3.0));
        let crit = solve_critical(&k, 1e-10, 100, 0).unwrap();
        assert_abs_diff_eq!(crit.c_estimate, 0.0, epsilon = 1e-14);
        assert!(crit.u.values.iter().all(|&x| x.abs() < 1e-14));
    }

    #[test]
    fn constant_shift_commutes() {
        let lag = bump_lagrangian();
        let k = coarse_kernel(&lag, 0.0);
        let u = GridFunction::from_fn(*k.grid(), |p| (6.0 * p[0]).sin());
        let a = lo_step(&k, &u.shifted(5.0)).unwrap();
        let b = lo_step(&k, &u).unwrap().shifted(5.0);
        assert!(a.sup_distance(&b).unwrap() <= 1e-14);
    }

    #[test]
    fn zero_data_step_is_bounded_by_constant_path() {
        let lag = bump_lagrangian();
        let k = coarse_kernel(&lag, 0.0);
        let v = lo_step(&k, &GridFunction::constant(*k.grid(), 0.0)).unwrap();
        for x in 0..v.len() {
            let brute = k.entries(x).iter().map(|e| e.cost).fold(f64::INFINITY, f64::min);
            assert_eq!(v.values[x], brute);
            assert!(v.values[x] <= -0.1 * lag.potential().value(&k.grid().point(x)) + 1e-14);
        }
        // node 0 is the maximum of U
        assert_abs_diff_eq!(v.values[0], -0.1, epsilon = 1e-14);
    }

    #[test]
    fn discounted_contraction_and_bounds() {
        let lag = bump_lagrangian();
        let k = coarse_kernel(&lag, 0.4);
        let a = lo_step_discounted(&k, &GridFunction::constant(*k.grid(), 1.0)).unwrap();
        let b = lo_step_discounted(&k, &GridFunction::constant(*k.grid(), -2.0)).unwrap();
        assert!(a.sup_distance(&b).unwrap() <= (-0.04f64).exp() * 3.0 + 1e-12);
        let sol = solve_discounted(&k, 1e-10, 100_000).unwrap();
        for v in &sol.u.values {
            assert!(lag.min_value() <= 0.4 * v + 1e-9);
            assert!(0.4 * v <= lag.speed_bound(0.0) + 1e-9);
        }
        assert!(lo_step(&k, &sol.u).is_err());
    }

    #[test]
    fn single_node_discounted_fixed_point() {
        let s = ModelSpace::flat_torus(1).unwrap();
        let grid = Grid::uniform(s, 1).unwrap();
        let (lambda, delta, cost) = (0.5, 0.2, -0.3);
        let header = KernelHeader {
            version: 1,
            config_hash: String::new(),
            grid: vec![1],
            delta,
            lambda,
            v_max: 1.0,
            radius: 0.2,
        };
        let k = KernelTable::from_entries(grid, header, vec![vec![KernelEntry { source: 0, lift: [0; 3], cost }]]).unwrap();
        let sol = solve_discounted(&k, 1e-13, 100_000).unwrap();
        assert_abs_diff_eq!(sol.u.values[0], cost / (1.0 - (-lambda * delta).exp()), epsilon = 1e-10);
    }

    #[test]
    fn bump_critical_value_and_anchor_independence() {
        let lag = bump_lagrangian();
        let k = coarse_kernel(&lag, 0.0);
        let mut cs = Vec::new();
        for anchor in [0, 7, 19] {
            let r = solve_critical(&k, 1e-12, 10_000, anchor).unwrap();
            assert!(r.fixed_point_residual <= 1e-10);
            assert!(domination_defect(&k, &r.u, r.c_estimate).unwrap() <= 1e-10);
            assert!(r.c_lower <= r.c_estimate + 1e-12 && r.c_estimate <= r.c_upper + 1e-12);
            cs.push(r.c_estimate);
        }
        for c in &cs {
            assert_abs_diff_eq!(*c, 1.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn long_time_from_weak_kam_solution_is_stationary() {
        let lag = bump_lagrangian();
        let k = coarse_kernel(&lag, 0.0);
        let r = solve_critical(&k, 1e-12, 10_000, 0).unwrap();
        let rec = lo_long_time(&k, &r.u, r.c_estimate, 5.0, 1e-9, Some(&r.u)).unwrap();
        assert!(rec.converged);
        assert_eq!(rec.times.len(), 1);
        assert!(rec.distance_to_prediction.unwrap() <= 1e-9);
        let shifted = lo_long_time(&k, &r.u.shifted(2.0), r.c_estimate, 5.0, 1e-9, None).unwrap();
        assert!(shifted.limit.sup_distance(&rec.limit.shifted(2.0)).unwrap() <= 1e-9);
    }

    #[test]
    fn vanishing_discount_requires_decreasing_lambdas() {
        let lag = Lagrangian::free(ModelSpace::flat_torus(1).unwrap());
        let sols: Vec<DiscountedResult> = [0.4, 0.2]
            .iter()
            .map(|&l| solve_discounted(&coarse_kernel(&lag, l), 1e-12, 10_000).unwrap())
            .collect();
        let rec = vanishing_discount(&sols, 0.0, None).unwrap();
        assert!(rec.cauchy[0] <= 1e-12);
        let rev: Vec<DiscountedResult> = sols.into_iter().rev().collect();
        assert!(vanishing_discount(&rev, 0.0, None).is_err());
    }

    #[test]
    fn growth_condition_holds_with_one_form() {
        let lag = bump_lagrangian().with_added_one_form(&[1.5]).unwrap();
        let r = growth_condition(&lag, 10.0, 41);
        assert!(r.holds, "{r:?}");
        assert!(r.worst_margin > -1.0);
    }
}
