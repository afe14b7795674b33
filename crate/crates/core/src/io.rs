//! Long-format CSV and JSON exports.
//!
//! Every table is "tidy": one observation per row, so any plotting tool can
//! pivot it without knowing the producer.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::Result;
use crate::optimizer::OptimizerTrace;
use crate::spatial::EigenfunctionField;
use crate::systems::TrajectoryEnsemble;

fn writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    Ok(csv::Writer::from_writer(BufWriter::new(File::create(path)?)))
}

fn state_headers(prefix: &str, m: usize) -> Vec<String> {
    (1..=m).map(|d| format!("{prefix}{d}")).collect()
}

/// Pretty-printed JSON.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    Ok(())
}

/// `trajectory, t, x1..xm`, one row per sample.
pub fn write_ensemble_csv(path: &Path, ens: &TrajectoryEnsemble) -> Result<()> {
    let mut w = writer(path)?;
    let mut header = vec!["trajectory".to_string(), "t".to_string()];
    header.extend(state_headers("x", ens.state_dim()));
    w.write_record(&header)?;
    let t = ens.time_axis();
    for (i, s) in ens.states.iter().enumerate() {
        for (k, col) in s.column_iter().enumerate() {
            let mut row = vec![i.to_string(), t[k].to_string()];
            row.extend(col.iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// `trajectory, x1..xm, eigenfunction, value` for `Φ₀` (`n_φ × n_t`), with
/// the nominal initial condition of each trajectory.
pub fn write_phi0_csv(path: &Path, initial_conditions: &[Vec<f64>], phi0: &DMatrix<f64>) -> Result<()> {
    let mut w = writer(path)?;
    let m = initial_conditions.first().map_or(0, |x| x.len());
    let mut header = vec!["trajectory".to_string()];
    header.extend(state_headers("x", m));
    header.extend(["eigenfunction".to_string(), "value".to_string()]);
    w.write_record(&header)?;
    for (i, x) in initial_conditions.iter().enumerate() {
        for r in 0..phi0.nrows() {
            let mut row = vec![i.to_string()];
            row.extend(x.iter().map(|v| v.to_string()));
            row.extend([r.to_string(), phi0[(r, i)].to_string()]);
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// `x1, x2, eigenfunction, value, masked` for every node.
pub fn write_field_csv(path: &Path, field: &EigenfunctionField) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["x1", "x2", "eigenfunction", "value", "masked"])?;
    let (a1, a2) = (field.grid.axis(0), field.grid.axis(1));
    for (r, v) in field.values.iter().enumerate() {
        for i in 0..a1.len() {
            for j in 0..a2.len() {
                w.write_record([
                    a1[i].to_string(),
                    a2[j].to_string(),
                    r.to_string(),
                    v[(i, j)].to_string(),
                    u8::from(field.mask[(i, j)]).to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// `x1, x2, eigenfunction, component, value`; writes only the header when
/// the field carries no gradient.
pub fn write_gradients_csv(path: &Path, field: &EigenfunctionField) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["x1", "x2", "eigenfunction", "component", "value"])?;
    let (a1, a2) = (field.grid.axis(0), field.grid.axis(1));
    for (r, g) in field.gradient.iter().flatten().enumerate() {
        for (d, gd) in g.iter().enumerate() {
            for i in 0..a1.len() {
                for j in 0..a2.len() {
                    w.write_record([
                        a1[i].to_string(),
                        a2[j].to_string(),
                        r.to_string(),
                        (d + 1).to_string(),
                        gd[(i, j)].to_string(),
                    ])?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// `generation, evaluations, total, temporal, kpde, penalty`.
///
/// Wall times are left out so that reruns produce identical files.
pub fn write_trace_csv(path: &Path, trace: &OptimizerTrace) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["generation", "evaluations", "total", "temporal", "kpde", "penalty"])?;
    for r in &trace.rows {
        w.write_record([
            r.generation.to_string(),
            r.evaluations.to_string(),
            r.best.total.to_string(),
            r.best.temporal.to_string(),
            r.best.kpde.to_string(),
            r.best.penalty.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Long-format time series: `run, t, variable, value`. Each series is a
/// named `rows × N` matrix whose row `r` becomes variable `{name}{r+1}`.
pub struct SeriesWriter {
    w: csv::Writer<BufWriter<File>>,
}

impl SeriesWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let mut w = writer(path)?;
        w.write_record(["run", "t", "variable", "value"])?;
        Ok(SeriesWriter { w })
    }

    pub fn write(&mut self, run: &str, t: &[f64], name: &str, values: &DMatrix<f64>) -> Result<()> {
        for r in 0..values.nrows() {
            let var = format!("{name}{}", r + 1);
            for (k, &tk) in t.iter().enumerate().take(values.ncols()) {
                self.w.write_record([run, &tk.to_string(), &var, &values[(r, k)].to_string()])?;
            }
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.w.flush()?;
        Ok(())
    }
}

/// Plain table with a header row; every record must match the header width.
pub fn write_table(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::systems::{simulate_ensemble, DynSystem, SimGrid};

    #[test]
    fn ensemble_csv_has_one_row_per_sample() {
        let sys = DynSystem::closure_default();
        let grid = SimGrid::square(-1.0, 1.0, 3).unwrap();
        let ens = simulate_ensemble(&sys, &grid, 0.1, 5, &[-1.0, -1.0], None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ensemble.csv");
        write_ensemble_csv(&path, &ens).unwrap();
        let mut r = csv::Reader::from_path(&path).unwrap();
        assert_eq!(r.headers().unwrap(), vec!["trajectory", "t", "x1", "x2"]);
        let rows: Vec<csv::StringRecord> = r.records().map(|x| x.unwrap()).collect();
        assert_eq!(rows.len(), 9 * 5);
        let x1: f64 = rows[0][2].parse().unwrap();
        assert_eq!(x1, -1.0);
    }

    #[test]
    fn series_writer_is_long_format() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.csv");
        let mut w = SeriesWriter::create(&path).unwrap();
        w.write("a", &[0.0, 0.5], "x", &DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0])).unwrap();
        w.finish().unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "run,t,variable,value");
        assert_eq!(lines[1], "a,0,x1,1");
        assert_eq!(lines[4], "a,0.5,x2,4");
    }
}
