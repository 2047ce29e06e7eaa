//! Run configuration: one JSON file per run, every field echoed into the
//! manifest after defaults are filled in.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use wkam::config::LagrangianConfig;
use wkam::geometry::{Lagrangian, TrigTerm};
use wkam::grid::Grid;
use wkam::homogenize::{ClampedDatum, Datum, HomogenizationOptions, Probe};
use wkam::tonelli::{KernelOptions, MinimizeOptions};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub lagrangian: LagrangianConfig,
    /// Nodes per axis; a single entry is used on every axis.
    pub grid: Vec<usize>,
    /// Kernel time step.
    pub delta: f64,
    /// Discounts for `discounted` and `vanishing-discount`.
    #[serde(default)]
    pub lambdas: Vec<f64>,
    /// Sup-change tolerance of the fixed-point iterations.
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub kernel: KernelOptions,
    #[serde(default)]
    pub params: Params,
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

fn default_tolerance() -> f64 {
    1e-10
}

fn default_max_iters() -> usize {
    1_000_000
}

/// Command-specific parameters; each command reads the fields it needs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Params {
    /// Endpoints for `cc-dist` and `minimal-action`.
    pub from: Vec<f64>,
    pub to: Vec<f64>,
    pub duration: f64,
    /// Discount for `minimal-action` and `kernel-build`.
    pub lambda: f64,
    pub minimize: MinimizeOptions,
    /// Normalization node of the critical solve.
    pub anchor: usize,
    /// Critical value to use instead of solving for it (`check`, `lo-evolve`).
    pub c: Option<f64>,
    /// `lo-evolve`: horizon, initial datum (random when empty) and whether to
    /// compare the limit with the barrier formula.
    pub t: f64,
    pub initial: Vec<TrigTerm>,
    pub predict: bool,
    /// `barrier`: source node and optional time window for a slice.
    pub source: usize,
    pub window: Option<[f64; 2]>,
    /// `check`: grid function CSV to certify.
    pub function: Option<PathBuf>,
    pub chain_steps: usize,
    pub sample_paths: usize,
    /// Phase grid and test basis of the Mather LP.
    pub v_max: f64,
    pub per_axis: usize,
    pub k_max: usize,
    pub rotation: Option<Vec<f64>>,
    /// `beta`: table range and resolution per axis.
    pub h_max: f64,
    pub h_per_axis: usize,
    /// `effective-h`: cohomology classes.
    pub classes: Vec<Vec<f64>>,
    /// `vanishing-discount`: build the limit candidate from the LP measure.
    pub candidate: bool,
    /// `homogenize`.
    pub datum: ClampedDatum,
    pub eps: Vec<f64>,
    pub probes: Vec<Probe>,
    pub homogenization: HomogenizationOptions,
}

impl Default for Params {
    fn default() -> Self {
        Self {
            from: Vec::new(),
            to: Vec::new(),
            duration: 1.0,
            lambda: 0.0,
            minimize: MinimizeOptions::default(),
            anchor: 0,
            c: None,
            t: 10.0,
            initial: Vec::new(),
            predict: true,
            source: 0,
            window: None,
            function: None,
            chain_steps: 20,
            sample_paths: 50,
            v_max: 2.0,
            per_axis: 9,
            k_max: 3,
            rotation: None,
            h_max: 1.0,
            h_per_axis: 21,
            classes: Vec::new(),
            candidate: true,
            datum: ClampedDatum {
                datum: Datum::Norm,
                clamp_slope: 1.0,
            },
            eps: vec![0.2, 0.1, 0.05],
            probes: Vec::new(),
            homogenization: HomogenizationOptions::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let cfg: RunConfig = serde_json::from_str(&text).with_context(|| format!("config {} does not match the schema", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        let lag = self.lagrangian()?;
        self.grid_for(&lag)?;
        if !(self.delta > 0.0) || !self.delta.is_finite() {
            bail!("delta must be positive, got {}", self.delta);
        }
        if !(self.tolerance > 0.0) {
            bail!("tolerance must be positive, got {}", self.tolerance);
        }
        if let Some(l) = self.lambdas.iter().find(|l| !(**l > 0.0)) {
            bail!("discounts must be positive, got {l}");
        }
        if self.params.per_axis % 2 == 0 {
            bail!("params.per_axis must be odd, got {}", self.params.per_axis);
        }
        Ok(())
    }

    pub fn lagrangian(&self) -> anyhow::Result<Lagrangian> {
        Ok(self.lagrangian.build()?)
    }

    pub fn grid_for(&self, lag: &Lagrangian) -> anyhow::Result<Grid> {
        let space = lag.space();
        let grid = match self.grid.as_slice() {
            [n] => Grid::uniform(space, *n)?,
            res => Grid::new(space, res)?,
        };
        Ok(grid)
    }
}
