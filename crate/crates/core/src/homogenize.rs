//! Homogenization on flat tori: the rescaled Lax–Oleinik value on the
//! universal cover against the effective Hopf–Lax formula.
//!
//! For `ε > 0` and datum `f` on `ℝ^d`,
//!
//! ```text
//! u_ε(z, t) = min_ξ f(εξ) + ε h̄_{t/ε}(ξ, z/ε)
//! u(z, t)   = min_h f(z − th) + t 𝕃(h)
//! ```
//!
//! `h̄` is the minimal action on the cover, obtained by iterating the kernel
//! on a finite window of lifted grid nodes; the lattice shift stored with
//! every kernel entry says which copy of the source a pair connects to.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{SpaceKind, MAX_DIM};
use crate::mather::BetaRow;
use crate::tonelli::KernelTable;

/// Initial datum on `ℝ^d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Datum {
    Zero,
    /// `|q|`.
    Norm,
    /// `⟨p, q⟩`.
    Linear { slope: Vec<f64> },
    /// `½ a |q|²`, clamped to linear growth.
    Quadratic { curvature: f64 },
}

/// A datum together with the slope `C_f` of its growth clamp
/// `|f(q) − f(0)| ≤ C_f |q|`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClampedDatum {
    pub datum: Datum,
    #[serde(default = "default_clamp")]
    pub clamp_slope: f64,
}

fn default_clamp() -> f64 {
    1.0
}

impl ClampedDatum {
    pub fn new(datum: Datum, clamp_slope: f64) -> Result<Self> {
        if !(clamp_slope >= 0.0) || !clamp_slope.is_finite() {
            return Err(Error::InvalidInput(format!("clamp slope must be non-negative, got {clamp_slope}")));
        }
        Ok(Self { datum, clamp_slope })
    }

    fn raw(&self, q: &[f64]) -> f64 {
        let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        match &self.datum {
            Datum::Zero => 0.0,
            Datum::Norm => norm,
            Datum::Linear { slope } => slope.iter().zip(q).map(|(a, b)| a * b).sum(),
            Datum::Quadratic { curvature } => 0.5 * curvature * norm * norm,
        }
    }

    pub fn value(&self, q: &[f64]) -> f64 {
        let f0 = self.raw(&vec![0.0; q.len()]);
        let reach = self.clamp_slope * q.iter().map(|v| v * v).sum::<f64>().sqrt();
        self.raw(q).clamp(f0 - reach, f0 + reach)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub z: [f64; MAX_DIM],
    pub t: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HomogenizationOptions {
    /// Speed bound used to size the cover window around each probe.
    pub window_speed: f64,
    /// Largest number of kernel steps per evolution.
    pub max_steps: usize,
}

impl Default for HomogenizationOptions {
    fn default() -> Self {
        Self {
            window_speed: 3.0,
            max_steps: 5_000,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct HomogenizationRow {
    pub eps: f64,
    pub z: Vec<f64>,
    pub t: f64,
    pub u_eps: f64,
    pub u: f64,
    pub gap: f64,
    pub truncated: bool,
}

/// Effective Hopf–Lax value `min_h f(z − th) + t 𝕃(h)` over the table.
pub fn hopf_lax(datum: &ClampedDatum, table: &[BetaRow], z: &[f64], t: f64) -> f64 {
    if t == 0.0 {
        return datum.value(z);
    }
    table
        .iter()
        .map(|r| {
            let q: Vec<f64> = z.iter().zip(&r.h).map(|(zi, hi)| zi - t * hi).collect();
            datum.value(&q) + t * r.value
        })
        .fold(f64::INFINITY, f64::min)
}

/// Kernel iteration on a box of lifted grid nodes.
struct CoverWindow<'a> {
    kernel: &'a KernelTable,
    dim: usize,
    res: [usize; MAX_DIM],
    lo: [i64; MAX_DIM],
    /// Windings per axis.
    span: [usize; MAX_DIM],
}

impl<'a> CoverWindow<'a> {
    fn extent(&self, a: usize) -> usize {
        self.span[a] * self.res[a]
    }

    fn len(&self) -> usize {
        (0..self.dim).map(|a| self.extent(a)).product()
    }

    /// Cover index along each axis: `winding · n + node`.
    fn flat(&self, coords: &[i64; MAX_DIM]) -> Option<usize> {
        let mut idx = 0;
        let mut stride = 1;
        for a in 0..self.dim {
            let c = coords[a] - self.lo[a] * self.res[a] as i64;
            if c < 0 || c >= self.extent(a) as i64 {
                return None;
            }
            idx += c as usize * stride;
            stride *= self.extent(a);
        }
        Some(idx)
    }

    fn coords(&self, mut idx: usize) -> [i64; MAX_DIM] {
        let mut c = [0i64; MAX_DIM];
        for a in 0..self.dim {
            let e = self.extent(a);
            c[a] = (idx % e) as i64 + self.lo[a] * self.res[a] as i64;
            idx /= e;
        }
        c
    }

    fn evolve(&self, init: Vec<f64>, steps: usize) -> Vec<f64> {
        let grid = self.kernel.grid();
        let n = self.len();
        // per cover node: (source cover index, cost)
        let pairs: Vec<Vec<(usize, f64)>> = (0..n)
            .map(|i| {
                let c = self.coords(i);
                let mut base = [0usize; MAX_DIM];
                let mut wind = [0i64; MAX_DIM];
                for a in 0..self.dim {
                    let r = self.res[a] as i64;
                    base[a] = c[a].rem_euclid(r) as usize;
                    wind[a] = c[a].div_euclid(r);
                }
                let target = grid.index(&base);
                self.kernel
                    .entries(target)
                    .iter()
                    .filter_map(|e| {
                        let sm = grid.multi_index(e.source as usize);
                        let mut sc = [0i64; MAX_DIM];
                        for a in 0..self.dim {
                            sc[a] = (wind[a] + e.lift[a] as i64) * self.res[a] as i64 + sm[a] as i64;
                        }
                        self.flat(&sc).map(|s| (s, e.cost))
                    })
                    .collect()
            })
            .collect();
        let mut v = init;
        for _ in 0..steps {
            v = pairs
                .iter()
                .map(|list| list.iter().map(|(s, c)| v[*s] + c).fold(f64::INFINITY, f64::min))
                .collect();
        }
        v
    }
}

/// `u_ε` at the probes for every `ε`, compared with the Hopf–Lax value built
/// from `table`.  Probes must sit on lifted nodes (`z/ε` on the grid) and
/// `t` must be a multiple of `εδ`; evolutions longer than `max_steps` are
/// reported with `truncated = true` and `u_eps = NaN`.
pub fn homogenize(
    kernel: &KernelTable,
    datum: &ClampedDatum,
    eps_list: &[f64],
    probes: &[Probe],
    table: &[BetaRow],
    opts: &HomogenizationOptions,
) -> Result<Vec<HomogenizationRow>> {
    let grid = *kernel.grid();
    let space = grid.space();
    if space.kind() != SpaceKind::FlatTorus {
        return Err(Error::InvalidInput("homogenization is implemented on flat tori only".into()));
    }
    if kernel.lambda() != 0.0 {
        return Err(Error::InvalidInput("homogenization needs an undiscounted kernel".into()));
    }
    let dim = space.dim();
    let mut res = [1usize; MAX_DIM];
    res[..dim].copy_from_slice(grid.resolution());
    let delta = kernel.delta();
    let mut rows = Vec::new();
    for &eps in eps_list {
        if !(eps > 0.0) {
            return Err(Error::InvalidInput(format!("ε must be positive, got {eps}")));
        }
        for probe in probes {
            let z = &probe.z[..dim];
            let u = hopf_lax(datum, table, z, probe.t);
            let steps_f = probe.t / (eps * delta);
            if (steps_f - steps_f.round()).abs() > 1e-6 * steps_f.max(1.0) {
                return Err(Error::InvalidInput(format!(
                    "t = {} is not a multiple of εδ = {}",
                    probe.t,
                    eps * delta
                )));
            }
            let steps = steps_f.round() as usize;
            let mut target = [0i64; MAX_DIM];
            for a in 0..dim {
                let c = z[a] / eps * res[a] as f64;
                if (c - c.round()).abs() > 1e-6 {
                    return Err(Error::InvalidInput(format!("probe z/ε = {} is not a grid node", z[a] / eps)));
                }
                target[a] = c.round() as i64;
            }
            if steps > opts.max_steps {
                rows.push(HomogenizationRow {
                    eps,
                    z: z.to_vec(),
                    t: probe.t,
                    u_eps: f64::NAN,
                    u,
                    gap: f64::NAN,
                    truncated: true,
                });
                continue;
            }
            let reach = opts.window_speed * probe.t / eps + 1.0;
            let mut lo = [0i64; MAX_DIM];
            let mut span = [1usize; MAX_DIM];
            for a in 0..dim {
                let centre = z[a] / eps;
                lo[a] = (centre - reach).floor() as i64;
                span[a] = ((centre + reach).ceil() as i64 - lo[a]) as usize + 1;
            }
            let window = CoverWindow {
                kernel,
                dim,
                res,
                lo,
                span,
            };
            let init: Vec<f64> = (0..window.len())
                .map(|i| {
                    let c = window.coords(i);
                    let q: Vec<f64> = (0..dim).map(|a| eps * c[a] as f64 / res[a] as f64).collect();
                    datum.value(&q) / eps
                })
                .collect();
            let v = window.evolve(init, steps);
            let idx = window.flat(&target).expect("probe inside its window");
            let u_eps = eps * v[idx];
            rows.push(HomogenizationRow {
                eps,
                z: z.to_vec(),
                t: probe.t,
                u_eps,
                u,
                gap: (u_eps - u).abs(),
                truncated: false,
            });
        }
    }
    Ok(rows)
}

/// CSV with columns `eps,z1..zd,t,u_eps,u,gap,truncated`.
pub fn rows_to_csv(rows: &[HomogenizationRow]) -> String {
    let dim = rows.first().map_or(1, |r| r.z.len());
    let mut s = String::from("eps");
    for a in 0..dim {
        s.push_str(&format!(",z{}", a + 1));
    }
    s.push_str(",t,u_eps,u,gap,truncated\n");
    for r in rows {
        s.push_str(&r.eps.to_string());
        for z in &r.z {
            s.push_str(&format!(",{z}"));
        }
        s.push_str(&format!(",{},{},{},{},{}\n", r.t, r.u_eps, r.u, r.gap, u8::from(r.truncated)));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Lagrangian, ModelSpace, Potential, TrigTerm};
    use crate::grid::Grid;
    use crate::mather::{beta_table, PhaseGrid, TestBasis};
    use crate::tonelli::KernelOptions;
    use approx::assert_abs_diff_eq;

    #[test]
    fn clamp_enforces_linear_growth() {
        let d = ClampedDatum::new(Datum::Quadratic { curvature: 2.0 }, 1.0).unwrap();
        assert_abs_diff_eq!(d.value(&[0.5]), 0.25);
        assert_abs_diff_eq!(d.value(&[3.0]), 3.0);
        let n = ClampedDatum::new(Datum::Norm, 1.0).unwrap();
        assert_abs_diff_eq!(n.value(&[-2.0]), 2.0);
    }

    #[test]
    fn hopf_lax_of_norm_is_moreau_envelope() {
        let table: Vec<BetaRow> = (0..=80)
            .map(|i| {
                let h = -2.0 + 0.05 * i as f64;
                BetaRow { h: vec![h], value: 0.5 * h * h, certificate: 0.0 }
            })
            .collect();
        let d = ClampedDatum::new(Datum::Norm, 1.0).unwrap();
        assert_abs_diff_eq!(hopf_lax(&d, &table, &[1.0], 0.5), 0.75, epsilon = 1e-12);
        assert_abs_diff_eq!(hopf_lax(&d, &table, &[0.25], 0.5), 0.0625, epsilon = 1e-12);
    }

    #[test]
    fn zero_datum_tends_to_minus_t_max_u() {
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
        let grid = Grid::uniform(s, 20).unwrap();
        let kernel = KernelTable::build(&lag, &grid, 0.1, 0.0, &KernelOptions::default()).unwrap();
        let phase = PhaseGrid::new(grid, 2.0, 9).unwrap();
        let basis = TestBasis::for_space(&grid, 2).unwrap();
        let table = beta_table(&lag, &phase, &basis, 0.0, 2).unwrap();
        let d = ClampedDatum::new(Datum::Zero, 1.0).unwrap();
        let probes = [Probe { z: [0.5, 0.0, 0.0], t: 1.0 }];
        let rows = homogenize(&kernel, &d, &[0.25, 0.125], &probes, &table, &HomogenizationOptions::default()).unwrap();
        for r in &rows {
            assert_abs_diff_eq!(r.u, -1.0, epsilon = 1e-9);
        }
        // the maximum of U is a grid node, so resting there is exact
        for r in &rows {
            assert!(r.gap < 1e-9, "{r:?}");
        }
    }

    #[test]
    fn truncation_is_flagged() {
        let s = ModelSpace::flat_torus(1).unwrap();
        let lag = Lagrangian::free(s);
        let grid = Grid::uniform(s, 10).unwrap();
        let kernel = KernelTable::build(&lag, &grid, 0.1, 0.0, &KernelOptions::default()).unwrap();
        let table = vec![BetaRow { h: vec![0.0], value: 0.0, certificate: 0.0 }];
        let d = ClampedDatum::new(Datum::Norm, 1.0).unwrap();
        let probes = [Probe { z: [0.0; 3], t: 1.0 }];
        let opts = HomogenizationOptions { max_steps: 50, ..HomogenizationOptions::default() };
        let rows = homogenize(&kernel, &d, &[0.5, 0.1], &probes, &table, &opts).unwrap();
        assert!(!rows[0].truncated);
        assert!(rows[1].truncated && rows[1].u_eps.is_nan());
    }
}
