//! One-parameter sweeps over config scalars.

use std::path::Path;

use anyhow::Result;
use log::info;

use koopman_eig::io;

use crate::config::{ExperimentConfig, SweepAxis};
use crate::pipeline::{self, Stage, StageError};

/// One row of the sweep table.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: f64,
    /// Reported point: for `gamma` the pooled re-selection, otherwise the run itself.
    pub j_temp: f64,
    pub j_kpde: f64,
    pub j_total: f64,
    pub wall_seconds: f64,
    /// Costs of this point's own optimum.
    pub raw_j_temp: f64,
    pub raw_j_kpde: f64,
    /// Sweep value whose optimum was selected.
    pub selected_from: f64,
    pub clean_mse: Option<f64>,
}

/// Result of [`sweep`].
#[derive(Debug, Clone)]
pub struct SweepTable {
    pub axis: SweepAxis,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let f = |v: f64| v.to_string();
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                vec![
                    self.axis.name().to_string(),
                    f(r.value),
                    f(r.j_temp),
                    f(r.j_kpde),
                    f(r.j_total),
                    f(r.wall_seconds),
                    f(r.raw_j_temp),
                    f(r.raw_j_kpde),
                    f(r.selected_from),
                    r.clean_mse.map_or("NaN".into(), f),
                ]
            })
            .collect();
        io::write_table(
            path,
            &[
                "axis",
                "value",
                "j_temp",
                "j_kpde",
                "j_total",
                "wall_seconds",
                "raw_j_temp",
                "raw_j_kpde",
                "selected_from",
                "clean_mse",
            ],
            &rows,
        )?;
        Ok(())
    }
}

/// Identification costs of one finished point (`J_temp`, `J_KPDE`, penalty).
struct Candidate {
    value: f64,
    temporal: f64,
    kpde: f64,
    penalty: f64,
}

/// Runs the pipeline once per value into `out_dir/point_{k}` and tabulates
/// the identification costs.
///
/// For the `gamma` axis every point's optimum is also scored under every
/// other weight (`J_temp` and `J_KPDE` do not depend on `γ`), and each row
/// reports the pooled minimizer of `J_temp + γ·J_KPDE + penalty`. This
/// removes swarm noise from the trade-off curve; the per-point optima stay
/// in the `raw_*` columns.
pub fn sweep(
    cfg: &ExperimentConfig,
    axis: SweepAxis,
    values: &[f64],
    out_dir: &Path,
    last: Stage,
) -> Result<SweepTable, StageError> {
    let last = last.max(Stage::Optimize);
    let mut candidates = vec![];
    let mut rows = vec![];
    for (k, &value) in values.iter().enumerate() {
        let point_cfg = axis
            .apply(cfg, value)
            .map_err(|e| StageError { stage: Stage::Simulate, source: e })?;
        info!("sweep {} = {value:e} ({}/{})", axis.name(), k + 1, values.len());
        let run = pipeline::run(&point_cfg, &out_dir.join(format!("point_{k}")), last)?;
        let id = run.identification.as_ref().expect("optimize stage ran");
        let b = id.result.evaluation.breakdown;
        let wall_seconds = run.wall_seconds.iter().map(|(_, t)| t).sum();
        candidates.push(Candidate { value, temporal: b.temporal, kpde: b.kpde, penalty: id.result.refined.cost.penalty });
        rows.push(SweepRow {
            value,
            j_temp: b.temporal,
            j_kpde: b.kpde,
            j_total: b.total,
            wall_seconds,
            raw_j_temp: b.temporal,
            raw_j_kpde: b.kpde,
            selected_from: value,
            clean_mse: id.clean_mse,
        });
    }
    if axis == SweepAxis::Gamma {
        for row in &mut rows {
            let g = row.value;
            let score = |c: &Candidate| c.temporal + g * c.kpde + c.penalty;
            let best = candidates
                .iter()
                .filter(|c| score(c).is_finite())
                .min_by(|a, b| score(a).total_cmp(&score(b)));
            if let Some(best) = best {
                row.j_temp = best.temporal;
                row.j_kpde = best.kpde;
                row.j_total = best.temporal + g * best.kpde;
                row.selected_from = best.value;
            }
        }
    }
    let table = SweepTable { axis, rows };
    table
        .write_csv(&out_dir.join("sweep.csv"))
        .map_err(|e| StageError { stage: last, source: e })?;
    Ok(table)
}
