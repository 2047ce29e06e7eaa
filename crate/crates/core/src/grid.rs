//! Uniform spatial grids on the model spaces and scalar fields on them.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{ModelSpace, Point, SpaceKind, MAX_DIM};

/// Uniform grid with nodes `(i_1/n_1, …, i_d/n_d)`; axis 0 varies fastest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid {
    space: ModelSpace,
    res: [usize; MAX_DIM],
}

impl Grid {
    pub fn new(space: ModelSpace, resolution: &[usize]) -> Result<Self> {
        if resolution.len() != space.dim() {
            return Err(Error::InvalidInput(format!(
                "grid needs {} resolutions, got {}",
                space.dim(),
                resolution.len()
            )));
        }
        if resolution.iter().any(|&n| n == 0) {
            return Err(Error::InvalidInput("grid resolution must be positive".into()));
        }
        let mut res = [1; MAX_DIM];
        res[..resolution.len()].copy_from_slice(resolution);
        Ok(Self { space, res })
    }

    /// Same resolution `n` on every axis.
    pub fn uniform(space: ModelSpace, n: usize) -> Result<Self> {
        Self::new(space, &vec![n; space.dim()])
    }

    pub fn space(&self) -> ModelSpace {
        self.space
    }

    pub fn resolution(&self) -> &[usize] {
        &self.res[..self.space.dim()]
    }

    pub fn len(&self) -> usize {
        self.res.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        1.0 / self.res[axis] as f64
    }

    /// Largest spacing over the horizontal axes.
    pub fn horizontal_spacing(&self) -> f64 {
        (0..self.space.rank()).map(|a| self.spacing(a)).fold(0.0, f64::max)
    }

    pub fn index(&self, multi: &[usize; MAX_DIM]) -> usize {
        multi[0] + self.res[0] * (multi[1] + self.res[1] * multi[2])
    }

    pub fn multi_index(&self, idx: usize) -> [usize; MAX_DIM] {
        let i0 = idx % self.res[0];
        let r = idx / self.res[0];
        [i0, r % self.res[1], r / self.res[1]]
    }

    pub fn point(&self, idx: usize) -> Point {
        let m = self.multi_index(idx);
        let mut p = [0.0; MAX_DIM];
        for a in 0..self.space.dim() {
            p[a] = m[a] as f64 / self.res[a] as f64;
        }
        p
    }

    /// Index of the grid node nearest to `p` in the quotient.
    pub fn nearest_node(&self, p: &Point) -> Result<usize> {
        let q = self.space.canonicalize(p)?;
        let mut m = [0usize; MAX_DIM];
        match self.space.kind() {
            SpaceKind::FlatTorus => {
                for a in 0..self.space.dim() {
                    m[a] = ((q[a] * self.res[a] as f64).round() as usize) % self.res[a];
                }
            }
            SpaceKind::Heisenberg => {
                let (n0, n1, n2) = (self.res[0], self.res[1], self.res[2]);
                let mut ix = (q[0] * n0 as f64).round() as usize;
                let mut z = q[2];
                if ix == n0 {
                    // (x, y, z) ≡ (x − 1, y, z − y)
                    ix = 0;
                    z -= q[1];
                }
                let iy = ((q[1] * n1 as f64).round() as usize) % n1;
                let iz = ((z * n2 as f64).round() as i64).rem_euclid(n2 as i64) as usize;
                m = [ix, iy, iz];
            }
        }
        Ok(self.index(&m))
    }

    pub fn check_same(&self, other: &Grid) -> Result<()> {
        if self != other {
            return Err(Error::GridMismatch(format!("{:?} vs {:?}", self.resolution(), other.resolution())));
        }
        Ok(())
    }
}

/// Scalar field sampled at the nodes of a [`Grid`].
#[derive(Debug, Clone, PartialEq)]
pub struct GridFunction {
    pub grid: Grid,
    pub values: Vec<f64>,
}

impl GridFunction {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::GridMismatch(format!(
                "{} values for a grid of {} nodes",
                values.len(),
                grid.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("grid function values must be finite".into()));
        }
        Ok(Self { grid, values })
    }

    pub fn constant(grid: Grid, value: f64) -> Self {
        Self {
            grid,
            values: vec![value; grid.len()],
        }
    }

    pub fn from_fn(grid: Grid, f: impl Fn(&Point) -> f64) -> Self {
        let values = (0..grid.len()).map(|i| f(&grid.point(i))).collect();
        Self { grid, values }
    }

    /// Random trigonometric sum `Σ a_k cos(2π k·x + φ_k)` over the invariant
    /// axes with `|k_i| ≤ modes`, amplitudes uniform in `[−amplitude, amplitude]`.
    pub fn random_trig(grid: Grid, modes: usize, amplitude: f64, seed: u64) -> Self {
        let axes = grid.space.invariant_dims();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = modes as i64;
        let side = (2 * m + 1) as usize;
        let mut terms = Vec::new();
        for code in 0..side.pow(axes as u32) {
            let mut k = [0i64; MAX_DIM];
            let mut c = code;
            for ki in k.iter_mut().take(axes) {
                *ki = (c % side) as i64 - m;
                c /= side;
            }
            if k.iter().all(|v| *v == 0) {
                continue;
            }
            let a: f64 = rng.random_range(-amplitude..=amplitude);
            let phi: f64 = rng.random_range(0.0..1.0);
            terms.push((k, a, phi));
        }
        Self::from_fn(grid, |p| {
            terms
                .iter()
                .map(|(k, a, phi)| {
                    let dot: f64 = (0..axes).map(|i| k[i] as f64 * p[i]).sum();
                    a * (2.0 * std::f64::consts::PI * (dot + phi)).cos()
                })
                .sum()
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn sup_distance(&self, other: &GridFunction) -> Result<f64> {
        self.grid.check_same(&other.grid)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn shifted(&self, c: f64) -> GridFunction {
        GridFunction {
            grid: self.grid,
            values: self.values.iter().map(|v| v + c).collect(),
        }
    }

    pub fn scaled(&self, s: f64) -> GridFunction {
        GridFunction {
            grid: self.grid,
            values: self.values.iter().map(|v| v * s).collect(),
        }
    }

    /// Multilinear interpolation compatible with the identifications.
    pub fn interpolate(&self, p: &Point) -> Result<f64> {
        let space = self.grid.space;
        let q = space.canonicalize(p)?;
        let res = self.grid.res;
        match space.kind() {
            SpaceKind::FlatTorus => {
                let d = space.dim();
                let mut base = [0usize; MAX_DIM];
                let mut frac = [0.0; MAX_DIM];
                for a in 0..d {
                    let s = q[a] * res[a] as f64;
                    let f = s.floor();
                    base[a] = (f as usize) % res[a];
                    frac[a] = s - f;
                }
                let mut acc = 0.0;
                for corner in 0..(1usize << d) {
                    let mut m = [0usize; MAX_DIM];
                    let mut w = 1.0;
                    for a in 0..d {
                        let bit = (corner >> a) & 1;
                        m[a] = (base[a] + bit) % res[a];
                        w *= if bit == 1 { frac[a] } else { 1.0 - frac[a] };
                    }
                    if w != 0.0 {
                        acc += w * self.values[self.grid.index(&m)];
                    }
                }
                Ok(acc)
            }
            SpaceKind::Heisenberg => {
                let (n0, n1) = (res[0] as f64, res[1] as f64);
                let sx = q[0] * n0;
                let sy = q[1] * n1;
                let (bx, by) = (sx.floor(), sy.floor());
                let (fx, fy) = (sx - bx, sy - by);
                let mut acc = 0.0;
                for (cx, wx) in [(bx, 1.0 - fx), (bx + 1.0, fx)] {
                    for (cy, wy) in [(by, 1.0 - fy), (by + 1.0, fy)] {
                        let w = wx * wy;
                        if w == 0.0 {
                            continue;
                        }
                        acc += w * self.column_value(&[cx / n0, cy / n1, q[2]])?;
                    }
                }
                Ok(acc)
            }
        }
    }

    /// Value at a point whose `x, y` chart coordinates are grid aligned,
    /// interpolating linearly in the vertical direction.
    fn column_value(&self, p: &Point) -> Result<f64> {
        let res = self.grid.res;
        let c = self.grid.space.canonicalize(p)?;
        let ix = ((c[0] * res[0] as f64).round() as usize) % res[0];
        let iy = ((c[1] * res[1] as f64).round() as usize) % res[1];
        let s = c[2] * res[2] as f64;
        let k = s.floor();
        let f = s - k;
        let k0 = (k as usize) % res[2];
        let k1 = (k0 + 1) % res[2];
        let v0 = self.values[self.grid.index(&[ix, iy, k0])];
        let v1 = self.values[self.grid.index(&[ix, iy, k1])];
        Ok((1.0 - f) * v0 + f * v1)
    }

    /// CSV with header `node,x1..xd,value`.
    pub fn to_csv(&self) -> String {
        let d = self.grid.space.dim();
        let mut s = String::from("node");
        for i in 1..=d {
            let _ = write!(s, ",x{i}");
        }
        s.push_str(",value\n");
        for (i, v) in self.values.iter().enumerate() {
            let p = self.grid.point(i);
            let _ = write!(s, "{i}");
            for c in &p[..d] {
                let _ = write!(s, ",{c}");
            }
            let _ = writeln!(s, ",{v}");
        }
        s
    }

    /// Parses the format written by [`GridFunction::to_csv`].
    pub fn from_csv(grid: Grid, text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Format("empty grid function file".into()))?;
        if !header.starts_with("node") || !header.ends_with("value") {
            return Err(Error::Format(format!("unexpected header {header:?}")));
        }
        let mut values = vec![f64::NAN; grid.len()];
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let fields: Vec<&str> = line.split(',').collect();
            let node: usize = fields[0]
                .trim()
                .parse()
                .map_err(|_| Error::Format(format!("bad node index in {line:?}")))?;
            let value: f64 = fields
                .last()
                .and_then(|v| v.trim().parse().ok())
                .ok_or_else(|| Error::Format(format!("bad value in {line:?}")))?;
            if node >= values.len() {
                return Err(Error::GridMismatch(format!("node {node} outside grid")));
            }
            values[node] = value;
        }
        if values.iter().any(|v| v.is_nan()) {
            return Err(Error::GridMismatch("grid function file does not cover every node".into()));
        }
        Self::new(grid, values)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn random_trig_is_seeded_and_invariant() {
        let g = Grid::uniform(ModelSpace::heisenberg(), 6).unwrap();
        let a = GridFunction::random_trig(g, 2, 0.3, 7);
        assert_eq!(a, GridFunction::random_trig(g, 2, 0.3, 7));
        assert_ne!(a, GridFunction::random_trig(g, 2, 0.3, 8));
        // no dependence on the vertical coordinate
        let m = g.multi_index(17);
        assert_eq!(a.values[17], a.values[g.index(&[m[0], m[1], (m[2] + 3) % 6])]);
    }

    #[test]
    fn index_roundtrip() {
        let g = Grid::new(ModelSpace::heisenberg(), &[4, 5, 6]).unwrap();
        for i in 0..g.len() {
            assert_eq!(g.index(&g.multi_index(i)), i);
            assert_eq!(g.nearest_node(&g.point(i)).unwrap(), i);
        }
    }

    #[test]
    fn nearest_node_respects_identification() {
        let h = ModelSpace::heisenberg();
        let g = Grid::uniform(h, 8).unwrap();
        let p = [0.999, 0.5, 0.25];
        // (0.999, 0.5, 0.25) ≡ (−0.001, 0.5, −0.25) and rounds to (0, 0.5, 0.75)
        assert_eq!(g.nearest_node(&p).unwrap(), g.index(&[0, 4, 6]));
    }

    #[test]
    fn interpolation_reproduces_invariant_functions() {
        let h = ModelSpace::heisenberg();
        let g = Grid::uniform(h, 16).unwrap();
        // z-independent, so trilinear interpolation only sees the (x, y) part
        let f = |p: &Point| (2.0 * std::f64::consts::PI * p[0]).cos() + (2.0 * std::f64::consts::PI * p[1]).sin();
        let gf = GridFunction::from_fn(g, f);
        for p in [[0.03, 0.97, 0.4], [0.5, 0.5, 0.99], [0.999, 0.2, 0.1]] {
            assert_abs_diff_eq!(gf.interpolate(&p).unwrap(), f(&p), epsilon = 0.05);
            let shifted = h.shift(&p, &[2, -1, 3]);
            assert_abs_diff_eq!(gf.interpolate(&shifted).unwrap(), gf.interpolate(&p).unwrap(), epsilon = 1e-9);
        }
        let t = ModelSpace::flat_torus(2).unwrap();
        let gt = Grid::uniform(t, 10).unwrap();
        let lin = GridFunction::from_fn(gt, |p| p[0] + 2.0 * p[1]);
        assert_abs_diff_eq!(lin.interpolate(&[0.15, 0.25, 0.0]).unwrap(), 0.65, epsilon = 1e-12);
    }

    #[test]
    fn csv_roundtrip() {
        let g = Grid::uniform(ModelSpace::flat_torus(2).unwrap(), 5).unwrap();
        let f = GridFunction::from_fn(g, |p| p[0] * 3.0 - p[1] / 7.0);
        let back = GridFunction::from_csv(g, &f.to_csv()).unwrap();
        assert_eq!(back, f);
    }
}
