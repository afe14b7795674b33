//! Stage runner: simulate → optimize → refine → inputdyn → control.
//!
//! Each stage writes its artifacts as soon as it finishes, so a failure
//! later on leaves everything computed so far on disk.

use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use anyhow::{anyhow, Context, Result};
use log::{info, warn};
use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use serde_json::{json, Map, Value};

use koopman_eig::control::{
    design_kalman, design_lqr_grid, estimate_noise_covariances, output_weight, pi_baseline, simulate_closed_loop,
    step_metrics, AntiWindup, ClosedLoopConfig, ClosedLoopInit, ClosedLoopRun, Controller, LqgDesign, LqrWeights,
    NoiseEstimateOptions, PiGains, ScheduleBasis, SetpointStep, StepMetrics,
};
use koopman_eig::inputdyn::{
    fit_sigmoid_surrogate, lifted_input_samples, predict_lpv, sum_mae, GridInputDynamics, InputDynamics,
    LiftedInputField, LpvModel, SurrogateFit, SurrogateSettings,
};
use koopman_eig::io;
use koopman_eig::optimizer::{
    identify, CostConfig, Identification, IdentificationProblem, IdentifySettings, NelderMeadSettings, PsoSettings,
    SearchSpace,
};
use koopman_eig::spatial::{
    indicator_levels, refine_field, separatrix_mask, EigenfunctionField, IndicatorLevels, RefineSettings, Refinement,
    SpectralModel,
};
use koopman_eig::spectral::{estimate_fundamental_frequency, reconstruct, Eigenvalue};
use koopman_eig::systems::{
    integrate, simulate_ensemble, DynSystem, InputSignal, NoiseSpec, SimGrid, TrajectoryEnsemble,
};

use crate::config::{BasisConfig, ExperimentConfig};

/// Pipeline stages in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Simulate,
    Optimize,
    Refine,
    Inputdyn,
    Control,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::Simulate, Stage::Optimize, Stage::Refine, Stage::Inputdyn, Stage::Control];

    /// Process exit code reported when this stage fails.
    pub fn exit_code(self) -> i32 {
        10 + self as i32
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Simulate => "simulate",
            Stage::Optimize => "optimize",
            Stage::Refine => "refine",
            Stage::Inputdyn => "inputdyn",
            Stage::Control => "control",
        }
    }
}

/// Exit code for configuration errors.
pub const EXIT_CONFIG: i32 = 2;

/// A failure tagged with the stage it happened in.
#[derive(Debug)]
pub struct StageError {
    pub stage: Stage,
    pub source: anyhow::Error,
}

impl fmt::Display for StageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "stage '{}' failed: {:#}", self.stage.name(), self.source)
    }
}

impl std::error::Error for StageError {}

/// Products of the identification stage.
pub struct IdentifyOutput {
    pub problem: IdentificationProblem,
    pub space: SearchSpace,
    pub result: Identification,
    pub model: SpectralModel,
    /// Frequency fixed from data, if configured.
    pub fundamental: Option<f64>,
    /// Reconstruction error against noise-free trajectories (noisy data only).
    pub clean_mse: Option<f64>,
}

/// Products of the refinement stage.
pub struct RefineOutput {
    pub refinement: Refinement,
    pub indicator: Option<IndicatorSummary>,
}

#[derive(Debug, Clone, Serialize)]
pub struct IndicatorSummary {
    pub eigenfunction: usize,
    pub low: f64,
    pub high: f64,
    pub margin: f64,
    /// Share of field nodes inside the separatrix band.
    pub band_fraction: f64,
    #[serde(skip)]
    pub band: DMatrix<bool>,
}

/// Products of the input-dynamics stage.
pub struct InputDynOutput {
    pub lifted: LiftedInputField,
    pub surrogate: SurrogateFit,
    pub u: DMatrix<f64>,
    pub t: Vec<f64>,
    pub truth: DMatrix<f64>,
    pub pred_interp: DMatrix<f64>,
    pub pred_surrogate: DMatrix<f64>,
    pub sum_mae_interp: f64,
    pub sum_mae_surrogate: f64,
}

/// One closed-loop run with its step metrics.
pub struct ControlCase {
    pub controller: &'static str,
    pub anti_windup: AntiWindup,
    pub run: Option<ClosedLoopRun>,
    pub metrics: Vec<StepMetrics>,
    /// Share of post-step samples with a command at a limit.
    pub saturated_fraction: f64,
    pub status: String,
}

impl ControlCase {
    pub fn label(&self) -> String {
        let aw = match self.anti_windup {
            AntiWindup::Clamping => "clamping",
            AntiWindup::None => "none",
        };
        format!("{}_{aw}", self.controller)
    }
}

/// Products of the control stage.
pub struct ControlOutput {
    pub design: LqgDesign,
    pub cases: Vec<ControlCase>,
    /// Estimated `(Σ_x, Σ_p)` on the validation run.
    pub noise_estimate: (DMatrix<f64>, DMatrix<f64>),
}

impl ControlOutput {
    pub fn case(&self, controller: &str, aw: AntiWindup) -> Option<&ControlCase> {
        self.cases.iter().find(|c| c.controller == controller && c.anti_windup == aw)
    }
}

/// Everything a run produced, kept in memory for callers and tests.
pub struct RunOutput {
    pub config: ExperimentConfig,
    pub out_dir: PathBuf,
    pub system: DynSystem,
    /// Raw simulated ensemble (nominal coordinates, with noise if configured).
    pub ensemble: Option<TrajectoryEnsemble>,
    /// Noise-free twin of `ensemble` when noise is configured.
    pub clean_ensemble: Option<TrajectoryEnsemble>,
    pub identification: Option<IdentifyOutput>,
    pub refine: Option<RefineOutput>,
    pub inputdyn: Option<InputDynOutput>,
    pub control: Option<ControlOutput>,
    pub stages_run: Vec<Stage>,
    pub wall_seconds: Vec<(Stage, f64)>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    name: &'a str,
    config_hash: String,
    seed: u64,
    version: &'static str,
    parallel_feature: bool,
    stages: &'a [Stage],
    files: Vec<String>,
    config: &'a ExperimentConfig,
}

/// Runs every configured stage up to and including `last` into `out_dir`.
pub fn run(cfg: &ExperimentConfig, out_dir: &Path, last: Stage) -> Result<RunOutput, StageError> {
    let fail = |stage: Stage| move |e: anyhow::Error| StageError { stage, source: e };
    std::fs::create_dir_all(out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))
        .map_err(fail(Stage::Simulate))?;
    let system = cfg.build_system().map_err(fail(Stage::Simulate))?;
    let mut out = RunOutput {
        config: cfg.clone(),
        out_dir: out_dir.to_path_buf(),
        system,
        ensemble: None,
        clean_ensemble: None,
        identification: None,
        refine: None,
        inputdyn: None,
        control: None,
        stages_run: vec![],
        wall_seconds: vec![],
    };
    let mut costs = Map::new();
    let mut files: Vec<String> = vec![];
    let stages: Vec<Stage> = Stage::ALL
        .into_iter()
        .filter(|&s| s <= last)
        .filter(|s| match s {
            Stage::Refine => cfg.refine.is_some(),
            Stage::Inputdyn => cfg.inputdyn.is_some(),
            Stage::Control => cfg.control.is_some(),
            _ => true,
        })
        .collect();
    let field_written_by_refine = stages.contains(&Stage::Refine);

    for &stage in &stages {
        let t0 = Instant::now();
        info!("stage {}", stage.name());
        let written = match stage {
            Stage::Simulate => simulate_stage(&mut out),
            Stage::Optimize => optimize_stage(&mut out, &mut costs, !field_written_by_refine),
            Stage::Refine => refine_stage(&mut out, &mut costs),
            Stage::Inputdyn => inputdyn_stage(&mut out, &mut costs),
            Stage::Control => control_stage(&mut out, &mut costs),
        };
        let elapsed = t0.elapsed().as_secs_f64();
        out.wall_seconds.push((stage, elapsed));
        let result = written.and_then(|w| {
            files.extend(w);
            if !costs.is_empty() {
                io::write_json(&out_dir.join("costs.json"), &Value::Object(costs.clone()))?;
            }
            Ok(())
        });
        // timings and manifest are kept current even when a stage fails
        let _ = write_bookkeeping(&out, &stages, &files, out_dir);
        result.map_err(fail(stage))?;
        out.stages_run.push(stage);
    }
    write_bookkeeping(&out, &stages, &files, out_dir).map_err(fail(last))?;
    Ok(out)
}

fn write_bookkeeping(out: &RunOutput, stages: &[Stage], files: &[String], dir: &Path) -> Result<()> {
    let mut all = files.to_vec();
    if dir.join("costs.json").exists() {
        all.push("costs.json".into());
    }
    all.sort();
    all.dedup();
    let cfg = &out.config;
    let manifest = Manifest {
        name: &cfg.name,
        config_hash: cfg.hash(),
        seed: cfg.seed,
        version: env!("CARGO_PKG_VERSION"),
        parallel_feature: cfg!(feature = "parallel"),
        stages,
        files: all,
        config: cfg,
    };
    io::write_json(&dir.join("manifest.json"), &manifest)?;
    let timings: Map<String, Value> =
        out.wall_seconds.iter().map(|(s, t)| (s.name().to_string(), json!(t))).collect();
    io::write_json(&dir.join("timings.json"), &Value::Object(timings))?;
    Ok(())
}

fn simulate_stage(out: &mut RunOutput) -> Result<Vec<String>> {
    let cfg = &out.config;
    let grid = cfg.data_grid()?;
    let noise = (cfg.data.noise_variance > 0.0).then_some(NoiseSpec { variance: cfg.data.noise_variance, seed: cfg.seed });
    let ens = simulate_ensemble(&out.system, &grid, cfg.data.dt, cfg.data.n_samples, &cfg.data.reference, noise)?;
    io::write_ensemble_csv(&out.out_dir.join("ensemble.csv"), &ens)?;
    if noise.is_some() {
        out.clean_ensemble =
            Some(simulate_ensemble(&out.system, &grid, cfg.data.dt, cfg.data.n_samples, &cfg.data.reference, None)?);
    }
    info!("simulated {} trajectories of {} samples", ens.len(), ens.n_samples);
    out.ensemble = Some(ens);
    Ok(vec!["ensemble.csv".into()])
}

#[derive(Serialize)]
struct EigenvalueEntry {
    re: f64,
    im: f64,
    fixed: bool,
    /// First row of this entry in `Φ` (a complex pair spans two rows).
    row: usize,
}

/// Builds the search space, including a data-estimated fundamental frequency.
pub fn search_space(cfg: &ExperimentConfig, sys: &DynSystem, ens: &TrajectoryEnsemble) -> Result<(SearchSpace, Option<f64>)> {
    let s = &cfg.search;
    let mut fixed = vec![];
    let mut fundamental = None;
    if let Some(component) = s.fundamental_from {
        let w = estimate_fundamental_frequency(ens, component)
            .ok_or_else(|| anyhow!("no oscillation found in state {component} to estimate the frequency"))?;
        info!("estimated fundamental frequency {w:.4} rad/s");
        fixed.push(Eigenvalue::new(0.0, w));
        fundamental = Some(w);
    }
    if s.fix_principal {
        fixed.extend(sys.principal_eigenvalues.iter().map(|&(re, im)| Eigenvalue::new(re, im)));
    }
    fixed.extend(s.fixed.iter().map(|&(re, im)| Eigenvalue::new(re, im)));
    let mut space = SearchSpace::new(s.n_free_pairs, s.re_bounds, s.im_bounds, fixed);
    space.d_min = s.d_min;
    space.penalty_weight = s.penalty_weight;
    Ok((space, fundamental))
}

fn optimize_stage(out: &mut RunOutput, costs: &mut Map<String, Value>, write_field: bool) -> Result<Vec<String>> {
    let cfg = out.config.clone();
    let raw = out.ensemble.as_ref().context("optimize needs the simulate stage")?;
    let shift = cfg.shift(&out.system)?;
    let ens = if shift.iter().any(|&v| v != 0.0) { raw.shift_by(&shift) } else { raw.clone() };
    let (space, fundamental) = search_space(&cfg, &out.system, &ens)?;
    let mut cost = CostConfig::new(cfg.interp_grid()?);
    cost.ridge_weight = cfg.cost.ridge;
    cost.gamma = cfg.cost.gamma;
    cost.imag_floor = cfg.cost.imag_floor;
    cost.kpde.clamp = cfg.cost.clamp;
    cost.kpde.edge_trim = cfg.cost.edge_trim;
    cost.smoothing = cfg.cost.smoothing;
    let problem = IdentificationProblem::new(Some(&out.system), ens, cost)?;
    let o = &cfg.optimizer;
    let settings = IdentifySettings {
        pso: PsoSettings {
            pop_size: o.pop_size,
            generations: o.generations,
            inertia: o.inertia,
            cognitive: o.cognitive,
            social: o.social,
            seed: cfg.seed,
        },
        nelder_mead: NelderMeadSettings { max_iter: o.nm_iters, ..Default::default() },
        two_phase: o.two_phase,
    };
    let result = identify(&problem, &space, &settings, &[])?;
    let model = result.evaluation.model(cfg.cost.ridge, &problem.ens.shift);
    let b = result.evaluation.breakdown;
    info!("identified J = {:.4e} (J_temp {:.4e}, J_KPDE {:.4e})", b.total, b.temporal, b.kpde);

    let clean_mse = out.clean_ensemble.as_ref().map(|clean| {
        let clean = clean.shift_by(&shift);
        let t = clean.time_axis();
        let ev = &result.evaluation;
        let (mut err, mut count) = (0.0, 0usize);
        for (i, s) in clean.states.iter().enumerate() {
            let rec = reconstruct(&ev.c_ref, &ev.eigs, &ev.phi0.column(i).into_owned(), &t);
            err += (s - rec).norm_squared();
            count += s.len();
        }
        err / count as f64
    });

    let dir = &out.out_dir;
    let offsets = result.eigs.offsets();
    let entries: Vec<EigenvalueEntry> = result
        .eigs
        .pairs
        .iter()
        .zip(&result.eigs.fixed)
        .zip(offsets)
        .map(|((p, &fixed), row)| EigenvalueEntry { re: p.re, im: p.im, fixed, row })
        .collect();
    io::write_json(
        &dir.join("eigenvalues.json"),
        &json!({
            "eigenvalues": entries,
            "imag_floor": result.eigs.imag_floor,
            "fundamental_frequency": fundamental,
        }),
    )?;
    let nominal: Vec<Vec<f64>> = (0..problem.ens.grid.len()).map(|i| problem.ens.grid.point(i)).collect();
    io::write_phi0_csv(&dir.join("phi0.csv"), &nominal, &result.evaluation.phi0)?;
    io::write_trace_csv(&dir.join("trace.csv"), &result.trace)?;
    io::write_json(&dir.join("spectral_model.json"), &model)?;
    let mut files: Vec<String> =
        ["eigenvalues.json", "phi0.csv", "trace.csv", "spectral_model.json"].map(String::from).to_vec();
    if write_field {
        if let Some(field) = &result.evaluation.field {
            files.extend(write_field_files(dir, field)?);
        }
    }
    costs.insert(
        "identification".into(),
        json!({
            "total": b.total,
            "temporal": b.temporal,
            "kpde": b.kpde,
            "penalty": result.refined.cost.penalty,
            "pso_best": result.pso_best.cost.total,
            "pso_evaluations": result.pso_best.evaluations,
            "nelder_mead_evaluations": result.refined.evaluations,
            "gamma": cfg.cost.gamma,
            "ridge": cfg.cost.ridge,
            "noise_variance": cfg.data.noise_variance,
            "clean_reconstruction_mse": clean_mse,
        }),
    );
    out.identification = Some(IdentifyOutput { problem, space, result, model, fundamental, clean_mse });
    Ok(files)
}

fn write_field_files(dir: &Path, field: &EigenfunctionField) -> Result<Vec<String>> {
    io::write_field_csv(&dir.join("field.csv"), field)?;
    io::write_gradients_csv(&dir.join("gradients.csv"), field)?;
    Ok(vec!["field.csv".into(), "gradients.csv".into()])
}

fn refine_stage(out: &mut RunOutput, costs: &mut Map<String, Value>) -> Result<Vec<String>> {
    let cfg = &out.config;
    let r = cfg.refine.as_ref().expect("refine stage is only scheduled when configured");
    let id = out.identification.as_ref().context("refine needs the optimize stage")?;
    let ranges = r.ranges.clone().unwrap_or_else(|| cfg.data.ranges.clone());
    let settings = RefineSettings {
        fine_grid: SimGrid::new(ranges.clone(), r.counts.clone())?,
        fine_interp: SimGrid::new(ranges, r.interp_counts.clone())?,
        dt: r.dt.unwrap_or(cfg.data.dt),
        n_samples: r.n_samples.unwrap_or(cfg.data.n_samples),
        smoothing: r.smoothing,
    };
    let refinement = refine_field(&out.system, &id.model, &settings)?;
    let mut files = write_field_files(&out.out_dir, &refinement.field)?;
    let mut section = json!({
        "trajectories": settings.fine_grid.len(),
        "interp_nodes": settings.fine_interp.len(),
    });
    let indicator = match &r.indicator {
        None => None,
        Some(ind) => {
            let field = &refinement.field;
            anyhow::ensure!(ind.eigenfunction < field.n_phi(), "indicator row {} out of range", ind.eigenfunction);
            let values = &field.values[ind.eigenfunction];
            let IndicatorLevels { low, high } = indicator_levels(values.as_slice())
                .ok_or_else(|| anyhow!("indicator eigenfunction {} is not bimodal", ind.eigenfunction))?;
            let margin = ind.margin_fraction * (high - low);
            let band = separatrix_mask(field, ind.eigenfunction, margin)?;
            let band_fraction = band.iter().filter(|&&b| b).count() as f64 / band.len() as f64;
            let summary = IndicatorSummary { eigenfunction: ind.eigenfunction, low, high, margin, band_fraction, band };
            write_indicator_csv(&out.out_dir.join("separatrix.csv"), field, &summary)?;
            files.push("separatrix.csv".into());
            section["indicator"] = serde_json::to_value(&summary)?;
            Some(summary)
        }
    };
    costs.insert("refinement".into(), section);
    out.refine = Some(RefineOutput { refinement, indicator });
    Ok(files)
}

fn write_indicator_csv(path: &Path, field: &EigenfunctionField, s: &IndicatorSummary) -> Result<()> {
    let (a1, a2) = (field.grid.axis(0), field.grid.axis(1));
    let mid = 0.5 * (s.low + s.high);
    let v = &field.values[s.eigenfunction];
    let mut rows = vec![];
    for i in 0..a1.len() {
        for j in 0..a2.len() {
            rows.push(vec![
                a1[i].to_string(),
                a2[j].to_string(),
                v[(i, j)].to_string(),
                u8::from(v[(i, j)] > mid).to_string(),
                u8::from(s.band[(i, j)]).to_string(),
            ]);
        }
    }
    io::write_table(path, &["x1", "x2", "value", "high_basin", "in_band"], &rows)?;
    Ok(())
}

/// Field the input dynamics are lifted from: the refined one if available.
fn latest_field(out: &RunOutput) -> Result<&EigenfunctionField> {
    if let Some(r) = &out.refine {
        return Ok(&r.refinement.field);
    }
    out.identification
        .as_ref()
        .and_then(|id| id.result.evaluation.field.as_ref())
        .context("input dynamics need an eigenfunction field")
}

fn inputdyn_stage(out: &mut RunOutput, costs: &mut Map<String, Value>) -> Result<Vec<String>> {
    let cfg = out.config.clone();
    let d = cfg.inputdyn.as_ref().expect("inputdyn stage is only scheduled when configured");
    let id = out.identification.as_ref().context("inputdyn needs the optimize stage")?;
    let field = latest_field(out)?;
    let sys = &out.system;
    let p = sys.input_dim;
    let lifted = lifted_input_samples(field, sys)?;
    let (x, y) = lifted.training_set(d.train_stride);
    let settings = SurrogateSettings {
        hidden: d.hidden,
        ridge_weight: d.ridge,
        weight_scale: d.weight_scale,
        adam_iters: d.adam_iters,
        learning_rate: d.learning_rate,
        seed: cfg.seed,
        ..Default::default()
    };
    let surrogate = fit_sigmoid_surrogate(&x, &y, lifted.n_phi(), p, &settings)?;
    info!(
        "surrogate on {} nodes: MSE {:.3e} → {:.3e}",
        x.ncols(),
        surrogate.initial_mse,
        surrogate.final_mse
    );

    let v = &d.validation;
    let n = (v.duration / v.dt).round() as usize;
    let signal = InputSignal::random_steps(p, v.amplitude, v.hold, v.duration, cfg.seed.wrapping_add(v.seed_offset));
    let u = signal.sample(v.dt, n, p);
    let truth = integrate(sys, &v.x0, v.dt, n, 0, |k| u.column(k).iter().copied().collect())?;
    let t: Vec<f64> = (0..n).map(|k| k as f64 * v.dt).collect();
    let phi_init = field.eval(&v.x0);
    let offset = DVector::from_vec(id.model.shift.clone());
    let grid_dyn = GridInputDynamics { field: lifted.clone() };
    let predict = |dynamics: &dyn InputDynamics| {
        let lpv = LpvModel { eigs: &id.model.eigs, c_ref: &id.model.c_ref, offset: offset.clone(), dynamics };
        predict_lpv(&lpv, &phi_init, &u, v.dt)
    };
    let pred_interp = predict(&grid_dyn);
    let pred_surrogate = predict(&surrogate.model);
    let sum_mae_interp = sum_mae(&truth, &pred_interp);
    let sum_mae_surrogate = sum_mae(&truth, &pred_surrogate);
    info!("validation ΣMAE: interpolated {sum_mae_interp:.4}, surrogate {sum_mae_surrogate:.4}");

    let dir = &out.out_dir;
    let mut w = io::SeriesWriter::create(&dir.join("predictions.csv"))?;
    w.write("input", &t, "u", &u)?;
    w.write("truth", &t, "x", &truth)?;
    w.write("interpolated", &t, "x", &pred_interp)?;
    w.write("surrogate", &t, "x", &pred_surrogate)?;
    w.finish()?;
    io::write_json(&dir.join("surrogate.json"), &surrogate)?;
    costs.insert(
        "prediction".into(),
        json!({
            "sum_mae_interpolated": sum_mae_interp,
            "sum_mae_surrogate": sum_mae_surrogate,
            "surrogate_initial_mse": surrogate.initial_mse,
            "surrogate_final_mse": surrogate.final_mse,
            "training_nodes": x.ncols(),
        }),
    );
    out.inputdyn = Some(InputDynOutput {
        lifted,
        surrogate,
        u,
        t,
        truth,
        pred_interp,
        pred_surrogate,
        sum_mae_interp,
        sum_mae_surrogate,
    });
    Ok(vec!["predictions.csv".into(), "surrogate.json".into()])
}

fn diag(v: &[f64]) -> DMatrix<f64> {
    DMatrix::from_diagonal(&DVector::from_column_slice(v))
}

fn control_stage(out: &mut RunOutput, costs: &mut Map<String, Value>) -> Result<Vec<String>> {
    let cfg = out.config.clone();
    let c = cfg.control.as_ref().expect("control stage is only scheduled when configured");
    let id = out.identification.as_ref().context("control needs the optimize stage")?;
    let inp = out.inputdyn.as_ref().context("control needs the inputdyn stage")?;
    let field = latest_field(out)?;
    let sys = &out.system;
    let n = id.model.eigs.n_phi();
    let lambda = id.model.eigs.lambda_matrix();
    let c_ref = id.model.c_ref.clone();
    let offset = DVector::from_vec(id.model.shift.clone());
    let surrogate = Arc::new(inp.surrogate.model.clone());

    // LQR schedule
    let q_phi = output_weight(&c_ref, &diag(&c.q_x)) + DMatrix::identity(n, n) * c.q_phi_floor;
    let weights = LqrWeights { q_phi, q_lag: diag(&c.q_lag), r: diag(&c.r) };
    let ranges = c.schedule_ranges.clone().unwrap_or_else(|| cfg.data.ranges.clone());
    let grid = SimGrid::new(ranges, c.schedule_counts.clone())?;
    let basis = match &c.basis {
        BasisConfig::Surrogate => ScheduleBasis::from_surrogate(&surrogate),
        BasisConfig::Random { hidden, weight_scale } => {
            let points: Vec<Vec<f64>> = (0..grid.len()).map(|i| grid.point(i)).collect();
            ScheduleBasis::random(&points, *hidden, *weight_scale, cfg.seed)
        }
    };
    let schedule = design_lqr_grid(
        &lambda,
        surrogate.as_ref(),
        &c.time_constants,
        &weights,
        &grid,
        basis,
        c.schedule_ridge,
    )?;
    let max_re = schedule.max_closed_loop_re();
    info!(
        "gain schedule: {} points, {} failures, max closed-loop Re {max_re:.4}",
        schedule.points.len(),
        schedule.failures.len()
    );

    // noise covariances from the validation run
    let lpv = LpvModel { eigs: &id.model.eigs, c_ref: &c_ref, offset: offset.clone(), dynamics: surrogate.as_ref() };
    let mut phi_meas = DMatrix::zeros(n, inp.truth.ncols());
    let mut phi_dot = phi_meas.clone();
    for k in 0..inp.truth.ncols() {
        let x: Vec<f64> = inp.truth.column(k).iter().copied().collect();
        let phi = field.eval(&x);
        phi_dot.set_column(k, &lpv.phi_dot(&phi, &inp.u.column(k).into_owned()));
        phi_meas.set_column(k, &phi);
    }
    let dt_val = cfg.inputdyn.as_ref().map_or(c.dt, |d| d.validation.dt);
    let noise_estimate = estimate_noise_covariances(
        &inp.pred_interp,
        &inp.truth,
        &phi_meas,
        &phi_dot,
        dt_val,
        NoiseEstimateOptions::default(),
    )?;
    let m = sys.state_dim;
    let (q_o, r_o) = if c.kalman.estimate {
        (
            &noise_estimate.1 + DMatrix::identity(n, n) * c.kalman.floor,
            &noise_estimate.0 + DMatrix::identity(m, m) * c.kalman.floor,
        )
    } else {
        (DMatrix::identity(n, n) * c.kalman.q_o, DMatrix::identity(m, m) * c.kalman.r_o)
    };
    let kalman = design_kalman(&lambda, &c_ref, &q_o, &r_o)?;
    let observer_max_re = koopman_eig::control::max_real_eig(&(&lambda - &kalman.gain * &c_ref));

    let design = LqgDesign {
        eigs: id.model.eigs.clone(),
        lambda: lambda.clone(),
        c_ref: c_ref.clone(),
        offset: offset.clone(),
        outputs: c.outputs.clone(),
        kalman,
        schedule,
        dynamics: surrogate.clone() as Arc<dyn InputDynamics>,
    };
    design.validate()?;

    // closed-loop comparison
    let x0 = match &c.x0 {
        Some(x) => x.clone(),
        None => sys.known_fixed_points.first().cloned().context("system has no fixed point to start from")?,
    };
    let p = sys.input_dim;
    let initial_set: Vec<f64> = c.outputs.iter().map(|&o| x0[o]).collect();
    let steps = (c.horizon / c.dt).round() as usize + 1;
    let loop_cfg = |aw: AntiWindup| ClosedLoopConfig {
        time_constants: c.time_constants.clone(),
        limits: c.limits.clone(),
        integral_gains: c.integral_gains.clone(),
        setpoints: vec![
            SetpointStep { time: 0.0, value: initial_set.clone() },
            SetpointStep { time: c.step_time, value: c.setpoint.clone() },
        ],
        anti_windup: aw,
        dt: c.dt,
        measurement_noise: c.measurement_noise,
        seed: cfg.seed,
    };
    let init = ClosedLoopInit { x0: x0.clone(), u0: vec![0.0; p], phi_hat0: Some(field.eval(&x0)) };
    let pi = PiGains { kp: c.pi.kp.clone(), ki: c.pi.ki.clone(), outputs: c.outputs.clone() };
    let mut cases = vec![];
    for controller in ["lqg", "pi"] {
        for aw in [AntiWindup::Clamping, AntiWindup::None] {
            let lc = loop_cfg(aw);
            let ctrl = match controller {
                "lqg" => Controller::Lqg(&design),
                _ => pi_baseline(pi.clone(), &lc)?,
            };
            let result = simulate_closed_loop(sys, &ctrl, &lc, &init, steps);
            let case = match result {
                Ok(run) => {
                    let t_end = run.t.last().copied().unwrap_or(0.0);
                    let metrics = (0..p).map(|j| step_metrics(&run, j, c.step_time, t_end)).collect();
                    let saturated_fraction = saturation(&run, &c.limits, c.step_time);
                    ControlCase { controller, anti_windup: aw, run: Some(run), metrics, saturated_fraction, status: "ok".into() }
                }
                Err(e) if controller == "pi" => {
                    warn!("PI baseline ({aw:?}) failed: {e}");
                    ControlCase {
                        controller,
                        anti_windup: aw,
                        run: None,
                        metrics: vec![],
                        saturated_fraction: f64::NAN,
                        status: format!("failed: {e}"),
                    }
                }
                Err(e) => return Err(e.into()),
            };
            cases.push(case);
        }
    }

    let dir = &out.out_dir;
    let mut w = io::SeriesWriter::create(&dir.join("control_runs.csv"))?;
    for case in &cases {
        if let Some(run) = &case.run {
            let label = case.label();
            w.write(&label, &run.t, "x", &run.x)?;
            w.write(&label, &run.t, "u", &run.u)?;
            w.write(&label, &run.t, "u_cmd", &run.u_cmd)?;
            w.write(&label, &run.t, "x_hat", &run.x_hat)?;
            w.write(&label, &run.t, "eta", &run.eta)?;
            w.write(&label, &run.t, "setpoint", &run.setpoint)?;
        }
    }
    w.finish()?;
    let mut rows = vec![];
    for case in &cases {
        for j in 0..p {
            let m = case.metrics.get(j).copied();
            let f = |v: Option<f64>| v.map_or("NaN".to_string(), |v| v.to_string());
            rows.push(vec![
                case.controller.to_string(),
                case.label().trim_start_matches(case.controller).trim_start_matches('_').to_string(),
                c.outputs[j].to_string(),
                f(m.map(|m| m.settling_time)),
                f(m.map(|m| m.overshoot_pct)),
                f(m.map(|m| m.steady_state_error)),
                case.saturated_fraction.to_string(),
                if case.controller == "lqg" { max_re.to_string() } else { "NaN".into() },
                case.status.clone(),
            ]);
        }
    }
    io::write_table(
        &dir.join("metrics.csv"),
        &[
            "controller",
            "anti_windup",
            "output",
            "settling_time",
            "overshoot_pct",
            "steady_state_error",
            "saturated_fraction",
            "max_closed_loop_re",
            "status",
        ],
        &rows,
    )?;
    io::write_json(&dir.join("design.json"), &design.export(&loop_cfg(AntiWindup::Clamping)))?;
    costs.insert(
        "control".into(),
        json!({
            "design_points": design.schedule.points.len(),
            "design_failures": design.schedule.failures.len(),
            "raw_max_closed_loop_re": design.schedule.raw_max_re.iter().copied().filter(|v| v.is_finite()).fold(f64::NEG_INFINITY, f64::max),
            "fitted_max_closed_loop_re": max_re,
            "schedule_fit_residual": design.schedule.fit_residual,
            "observer_max_re": observer_max_re,
            "estimated_measurement_cov_trace": noise_estimate.0.trace(),
            "estimated_process_cov_trace": noise_estimate.1.trace(),
        }),
    );
    out.control = Some(ControlOutput { design, cases, noise_estimate });
    Ok(vec!["control_runs.csv".into(), "metrics.csv".into(), "design.json".into()])
}

fn saturation(run: &ClosedLoopRun, limits: &[(f64, f64)], t_step: f64) -> f64 {
    let mut hit = 0usize;
    let mut total = 0usize;
    for (k, &t) in run.t.iter().enumerate() {
        if t + 1e-12 < t_step {
            continue;
        }
        for (j, &(lo, hi)) in limits.iter().enumerate() {
            let u = run.u_cmd[(j, k)];
            total += 1;
            if u <= lo || u >= hi {
                hit += 1;
            }
        }
    }
    hit as f64 / total.max(1) as f64
}
