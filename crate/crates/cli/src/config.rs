//! Experiment configuration (TOML or JSON, same schema).

use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use koopman_eig::systems::{DynSystem, SimGrid, SubgridRule, SystemKind};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// One benchmark experiment: data generation, identification and the
/// optional refinement, input-dynamics and control stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    /// Seed of every stochastic stage (swarm, noise, surrogate, excitation).
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    pub system: SystemKind,
    pub data: DataConfig,
    pub search: SearchConfig,
    #[serde(default)]
    pub cost: CostSettings,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub refine: Option<RefineConfig>,
    #[serde(default)]
    pub inputdyn: Option<InputDynConfig>,
    #[serde(default)]
    pub control: Option<ControlConfig>,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs")
}

/// Offset subtracted from all trajectories before identification.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shift {
    #[default]
    None,
    /// Index into the system's known fixed points.
    FixedPoint(usize),
    Point(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub ranges: Vec<(f64, f64)>,
    pub counts: Vec<usize>,
    #[serde(default)]
    pub subgrid: SubgridRule,
    pub dt: f64,
    pub n_samples: usize,
    /// Initial condition of the reference trajectory (must be a grid node).
    pub reference: Vec<f64>,
    #[serde(default)]
    pub shift: Shift,
    /// Variance of additive measurement noise (0 = clean data).
    #[serde(default)]
    pub noise_variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchConfig {
    pub n_free_pairs: usize,
    pub re_bounds: (f64, f64),
    pub im_bounds: (f64, f64),
    /// Fixed `(re, im)` entries, `im ≥ 0`.
    #[serde(default)]
    pub fixed: Vec<(f64, f64)>,
    /// Also fix the principal eigenvalues of the system's fixed point.
    #[serde(default)]
    pub fix_principal: bool,
    /// Estimate the oscillation frequency ω from this state component and
    /// fix `±iω` as the first entry.
    #[serde(default)]
    pub fundamental_from: Option<usize>,
    #[serde(default = "default_d_min")]
    pub d_min: f64,
    #[serde(default = "one")]
    pub penalty_weight: f64,
}

fn default_d_min() -> f64 {
    0.05
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostSettings {
    /// Ridge weight of all projections.
    pub ridge: f64,
    pub gamma: f64,
    pub imag_floor: f64,
    /// Entrywise clamp of KPDE residuals.
    pub clamp: Option<f64>,
    pub edge_trim: usize,
    /// Identification interpolation grid; `interp_ranges` defaults to the data ranges.
    pub interp_counts: Vec<usize>,
    pub interp_ranges: Option<Vec<(f64, f64)>>,
    pub smoothing: f64,
}

impl Default for CostSettings {
    fn default() -> Self {
        CostSettings {
            ridge: 1e-6,
            gamma: 1e-4,
            imag_floor: 0.01,
            clamp: None,
            edge_trim: 1,
            interp_counts: vec![100, 100],
            interp_ranges: None,
            smoothing: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub pop_size: usize,
    pub generations: usize,
    pub nm_iters: usize,
    pub inertia: f64,
    pub cognitive: f64,
    pub social: f64,
    /// Swarm on the temporal cost only, KPDE weight applied by Nelder–Mead.
    pub two_phase: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            pop_size: 50,
            generations: 200,
            nm_iters: 1000,
            inertia: 0.73,
            cognitive: 1.5,
            social: 1.5,
            two_phase: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefineConfig {
    pub counts: Vec<usize>,
    pub interp_counts: Vec<usize>,
    /// Defaults to the data ranges.
    #[serde(default)]
    pub ranges: Option<Vec<(f64, f64)>>,
    #[serde(default)]
    pub dt: Option<f64>,
    #[serde(default)]
    pub n_samples: Option<usize>,
    #[serde(default = "one")]
    pub smoothing: f64,
    #[serde(default)]
    pub indicator: Option<IndicatorConfig>,
}

/// Basin indicator analysis of a zero-eigenvalue eigenfunction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndicatorConfig {
    /// Row of the eigenfunction in the identified set.
    pub eigenfunction: usize,
    /// Half-width of the separatrix band as a fraction of the plateau gap.
    #[serde(default = "default_margin")]
    pub margin_fraction: f64,
}

fn default_margin() -> f64 {
    0.25
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputDynConfig {
    pub hidden: usize,
    #[serde(default = "default_surrogate_ridge")]
    pub ridge: f64,
    #[serde(default = "default_weight_scale")]
    pub weight_scale: f64,
    #[serde(default = "default_adam_iters")]
    pub adam_iters: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    /// Keep every `train_stride`-th field node along each axis for training.
    #[serde(default = "default_stride")]
    pub train_stride: usize,
    pub validation: ValidationConfig,
}

fn default_surrogate_ridge() -> f64 {
    1e-8
}
fn default_weight_scale() -> f64 {
    4.0
}
fn default_adam_iters() -> usize {
    3000
}
fn default_lr() -> f64 {
    1e-3
}
fn default_stride() -> usize {
    10
}

/// Held-out input-driven run: random piecewise-constant excitation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidationConfig {
    pub x0: Vec<f64>,
    pub amplitude: f64,
    pub hold: f64,
    pub duration: f64,
    pub dt: f64,
    /// Offset added to the experiment seed for the excitation.
    #[serde(default = "default_validation_seed")]
    pub seed_offset: u64,
}

fn default_validation_seed() -> u64 {
    6
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum BasisConfig {
    /// Hidden layer of the input-dynamics surrogate.
    Surrogate,
    Random { hidden: usize, weight_scale: f64 },
}

impl Default for BasisConfig {
    fn default() -> Self {
        BasisConfig::Surrogate
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KalmanConfig {
    /// Scale of `Q_o = q·I` (ignored when estimating).
    #[serde(default = "one")]
    pub q_o: f64,
    /// Scale of `R_o = r·I` (ignored when estimating).
    #[serde(default = "default_r_o")]
    pub r_o: f64,
    /// Use covariances estimated on the validation run instead.
    #[serde(default)]
    pub estimate: bool,
    /// Diagonal floor added to estimated covariances.
    #[serde(default = "default_cov_floor")]
    pub floor: f64,
}

fn default_r_o() -> f64 {
    1e-2
}
fn default_cov_floor() -> f64 {
    1e-8
}

impl Default for KalmanConfig {
    fn default() -> Self {
        KalmanConfig { q_o: 1.0, r_o: default_r_o(), estimate: false, floor: default_cov_floor() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PiConfig {
    pub kp: Vec<f64>,
    pub ki: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlConfig {
    /// Tracked state index per input channel.
    pub outputs: Vec<usize>,
    pub time_constants: Vec<f64>,
    pub limits: Vec<(f64, f64)>,
    pub integral_gains: Vec<f64>,
    /// Diagonal of the state-output weight `Q_x`.
    pub q_x: Vec<f64>,
    /// Diagonal regularization added to `Q_Φ = Cᵀ Q_x C`.
    #[serde(default = "default_q_floor")]
    pub q_phi_floor: f64,
    pub q_lag: Vec<f64>,
    pub r: Vec<f64>,
    pub schedule_counts: Vec<usize>,
    #[serde(default)]
    pub schedule_ranges: Option<Vec<(f64, f64)>>,
    #[serde(default = "default_schedule_ridge")]
    pub schedule_ridge: f64,
    #[serde(default)]
    pub basis: BasisConfig,
    #[serde(default)]
    pub kalman: KalmanConfig,
    /// Initial plant state; defaults to the first known fixed point.
    #[serde(default)]
    pub x0: Option<Vec<f64>>,
    pub step_time: f64,
    /// Setpoint of the tracked outputs after the step.
    pub setpoint: Vec<f64>,
    pub dt: f64,
    pub horizon: f64,
    #[serde(default)]
    pub measurement_noise: f64,
    pub pi: PiConfig,
}

fn default_q_floor() -> f64 {
    1e-6
}
fn default_schedule_ridge() -> f64 {
    1e-6
}

impl ExperimentConfig {
    /// Reads a `.toml` or `.json` file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cfg: ExperimentConfig = match path.extension().and_then(|e| e.to_str()) {
            Some("json") => serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?,
            _ => toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// SHA-256 of the canonical JSON form, ignoring the output directory.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        let json = serde_json::to_string(&c).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn build_system(&self) -> Result<DynSystem> {
        Ok(DynSystem::from_kind(&self.system)?)
    }

    pub fn data_grid(&self) -> Result<SimGrid> {
        Ok(SimGrid::new(self.data.ranges.clone(), self.data.counts.clone())?.with_subgrid(self.data.subgrid))
    }

    pub fn interp_grid(&self) -> Result<SimGrid> {
        let ranges = self.cost.interp_ranges.clone().unwrap_or_else(|| self.data.ranges.clone());
        Ok(SimGrid::new(ranges, self.cost.interp_counts.clone())?)
    }

    /// Offset subtracted from trajectories.
    pub fn shift(&self, sys: &DynSystem) -> Result<Vec<f64>> {
        Ok(match &self.data.shift {
            Shift::None => vec![0.0; sys.state_dim],
            Shift::FixedPoint(i) => sys
                .known_fixed_points
                .get(*i)
                .cloned()
                .with_context(|| format!("system has no fixed point {i}"))?,
            Shift::Point(p) => p.clone(),
        })
    }

    /// Structural checks that need no simulation.
    pub fn validate(&self) -> Result<()> {
        let sys = self.build_system()?;
        let m = sys.state_dim;
        let grid = self.data_grid()?;
        ensure!(grid.dim() == m, "data grid is {}-D but the system has {m} states", grid.dim());
        ensure!(self.data.dt > 0.0, "data.dt must be positive");
        ensure!(self.data.n_samples >= 2, "data.n_samples must be at least 2");
        ensure!(self.data.noise_variance >= 0.0, "data.noise_variance must be nonnegative");
        ensure!(
            grid.locate(&self.data.reference).is_some(),
            "reference {:?} is not a node of the data grid",
            self.data.reference
        );
        ensure!(self.shift(&sys)?.len() == m, "shift must have one entry per state");
        let s = &self.search;
        ensure!(
            s.re_bounds.0 <= s.re_bounds.1 && s.im_bounds.0 >= 0.0 && s.im_bounds.0 <= s.im_bounds.1,
            "search bounds must be ordered with nonnegative imaginary parts"
        );
        ensure!(s.fixed.iter().all(|&(_, im)| im >= 0.0), "fixed entries need im ≥ 0");
        if let Some(c) = s.fundamental_from {
            ensure!(c < m, "fundamental_from names state {c} of {m}");
        }
        ensure!(
            s.n_free_pairs > 0 || !s.fixed.is_empty() || s.fix_principal || s.fundamental_from.is_some(),
            "the eigenvalue set is empty"
        );
        let g = self.interp_grid()?;
        ensure!(g.dim() == 2 && m == 2, "identification interpolation supports 2-D systems only");
        ensure!(self.cost.smoothing > 0.0 && self.cost.smoothing <= 1.0, "cost.smoothing must lie in (0, 1]");
        let o = &self.optimizer;
        ensure!(o.pop_size >= 2 || s.n_free_pairs == 0, "optimizer.pop_size must be at least 2");
        if let Some(r) = &self.refine {
            let ranges = r.ranges.clone().unwrap_or_else(|| self.data.ranges.clone());
            SimGrid::new(ranges.clone(), r.counts.clone())?;
            SimGrid::new(ranges, r.interp_counts.clone())?;
            if let Some(ind) = &r.indicator {
                ensure!(ind.margin_fraction > 0.0 && ind.margin_fraction < 0.5, "indicator margin must lie in (0, 0.5)");
            }
        }
        if let Some(d) = &self.inputdyn {
            ensure!(sys.input_dim > 0, "input dynamics need a system with inputs");
            ensure!(d.hidden > 0 && d.train_stride > 0, "inputdyn.hidden and train_stride must be positive");
            let v = &d.validation;
            ensure!(v.x0.len() == m, "validation x0 needs {m} entries");
            ensure!(v.dt > 0.0 && v.hold > 0.0 && v.duration > v.dt, "validation timing must be positive");
        }
        if let Some(c) = &self.control {
            let p = sys.input_dim;
            ensure!(self.inputdyn.is_some(), "the control stage needs an [inputdyn] section");
            ensure!(
                c.outputs.len() == p
                    && c.time_constants.len() == p
                    && c.limits.len() == p
                    && c.integral_gains.len() == p
                    && c.q_lag.len() == p
                    && c.r.len() == p
                    && c.setpoint.len() == p
                    && c.pi.kp.len() == p
                    && c.pi.ki.len() == p,
                "control settings need one entry per input ({p})"
            );
            ensure!(c.outputs.iter().all(|&o| o < m), "control outputs must be state indices");
            ensure!(c.q_x.len() == m, "control.q_x needs one entry per state");
            ensure!(c.dt > 0.0 && c.horizon > c.step_time && c.step_time >= 0.0, "control timing is inconsistent");
            if let Some(x0) = &c.x0 {
                ensure!(x0.len() == m, "control.x0 needs {m} entries");
            }
            let ranges = c.schedule_ranges.clone().unwrap_or_else(|| self.data.ranges.clone());
            SimGrid::new(ranges, c.schedule_counts.clone())?;
        }
        Ok(())
    }
}

/// Config scalars a sweep may vary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Ridge,
    Gamma,
    Subgrid,
    Grid,
    Interp,
    Noise,
    NLambda,
}

impl std::str::FromStr for SweepAxis {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "ridge" | "lambda_reg" | "alpha" => SweepAxis::Ridge,
            "gamma" => SweepAxis::Gamma,
            "subgrid" => SweepAxis::Subgrid,
            "grid" => SweepAxis::Grid,
            "interp" => SweepAxis::Interp,
            "noise" => SweepAxis::Noise,
            "n_lambda" => SweepAxis::NLambda,
            other => bail!(
                "unknown sweep axis '{other}' (expected ridge, gamma, subgrid, grid, interp, noise or n_lambda)"
            ),
        })
    }
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Ridge => "ridge",
            SweepAxis::Gamma => "gamma",
            SweepAxis::Subgrid => "subgrid",
            SweepAxis::Grid => "grid",
            SweepAxis::Interp => "interp",
            SweepAxis::Noise => "noise",
            SweepAxis::NLambda => "n_lambda",
        }
    }

    /// Copy of `cfg` with this axis set to `value`.
    ///
    /// `subgrid` is the step between selected rows and columns, `grid` and
    /// `interp` the node count per axis.
    pub fn apply(self, cfg: &ExperimentConfig, value: f64) -> Result<ExperimentConfig> {
        let count = |v: f64| -> Result<usize> {
            ensure!(v >= 1.0 && v.fract() == 0.0, "axis {} takes positive integers, got {v}", self.name());
            Ok(v as usize)
        };
        let mut c = cfg.clone();
        match self {
            SweepAxis::Ridge => c.cost.ridge = value,
            SweepAxis::Gamma => c.cost.gamma = value,
            SweepAxis::Noise => c.data.noise_variance = value,
            SweepAxis::Subgrid => c.data.subgrid = SubgridRule { offset: 0, step: count(value)? },
            SweepAxis::Grid => {
                let n = count(value)?;
                c.data.counts = vec![n; c.data.counts.len()];
            }
            SweepAxis::Interp => {
                let n = count(value)?;
                c.cost.interp_counts = vec![n; c.cost.interp_counts.len()];
            }
            SweepAxis::NLambda => c.search.n_free_pairs = count(value)?,
        }
        c.validate()?;
        Ok(c)
    }
}
