//! Per-layer slice assignments and gate activations of one sample, as CSV.
//!
//! `assign_layer{l}.csv`: columns `x0..x{d-1}` then `s0..s{M-1}`.
//! `gate_layer{l}.csv`: columns `x0..x{d-1}` then `g0..g{C-1}`.
//!
//! Coordinates are the raw sample values printed in shortest round-trip
//! form, so parsing them back yields the stored `f32` bits.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::data::{NormStats, Sample};
use crate::engine::Tensor;
use crate::error::{Error, Result};
use crate::model::PgotModel;
use crate::nn::LayerTrace;

/// Tolerance on the row sums of a dumped assignment matrix.
pub const ROW_SUM_TOL: f64 = 1e-5;

pub fn layer_traces(model: &PgotModel<f32>, sample: &Sample, stats: &NormStats) -> Result<Vec<LayerTrace<f32>>> {
    let input = stats.input.normalize(&sample.input)?;
    let (_, traces) = model.predict_with_traces(&sample.coords, &input)?;
    Ok(traces)
}

fn render(coords: &Tensor<f32>, values: &Tensor<f32>, prefix: char) -> String {
    let (n, d) = coords.rows_cols();
    let (_, k) = values.rows_cols();
    let mut s = String::new();
    let header: Vec<String> = (0..d)
        .map(|a| format!("x{a}"))
        .chain((0..k).map(|j| format!("{prefix}{j}")))
        .collect();
    s.push_str(&header.join(","));
    s.push('\n');
    for i in 0..n {
        for (a, v) in coords.row(i).iter().enumerate() {
            if a > 0 {
                s.push(',');
            }
            write!(s, "{v}").unwrap();
        }
        for v in values.row(i) {
            write!(s, ",{v}").unwrap();
        }
        s.push('\n');
    }
    s
}

/// Checks the dump invariants: rows of `A` sum to one, gates lie in `[0, 1]`.
pub fn validate_trace(layer: usize, trace: &LayerTrace<f32>) -> Result<()> {
    if let Some(a) = &trace.assignment {
        let (n, m) = a.rows_cols();
        for i in 0..n {
            let sum: f64 = a.data()[i * m..(i + 1) * m].iter().map(|&v| f64::from(v)).sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::Numerical {
                    layer: Some(layer + 1),
                    message: format!("assignment row {i} sums to {sum}"),
                });
            }
        }
    }
    if let Some(g) = &trace.gate {
        if let Some(v) = g.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Numerical {
                layer: Some(layer + 1),
                message: format!("gate value {v} outside [0, 1]"),
            });
        }
    }
    Ok(())
}

/// Writes one CSV per layer and artifact kind; returns the paths written.
pub fn write_dump(model: &PgotModel<f32>, sample: &Sample, stats: &NormStats, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let traces = layer_traces(model, sample, stats)?;
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for (l, trace) in traces.iter().enumerate() {
        validate_trace(l, trace)?;
        if let Some(a) = &trace.assignment {
            let path = dir.join(format!("assign_layer{l}.csv"));
            std::fs::write(&path, render(&sample.coords, a, 's'))?;
            written.push(path);
        }
        if let Some(g) = &trace.gate {
            let path = dir.join(format!("gate_layer{l}.csv"));
            std::fs::write(&path, render(&sample.coords, g, 'g'))?;
            written.push(path);
        }
    }
    Ok(written)
}
