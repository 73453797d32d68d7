//! Central finite-difference gradient checking in 64-bit precision.
//!
//! The numeric side only ever evaluates the function forward (on a
//! non-recording tape), so it shares nothing with the backward rules it
//! audits.

use crate::engine::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    /// Finite-difference step.
    pub step: f64,
    /// Relative tolerance against the analytic gradient magnitude.
    pub rtol: f64,
    /// Absolute tolerance floor.
    pub atol: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            step: 1e-5,
            rtol: 1e-4,
            atol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mismatch {
    pub input: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_abs_error: f64,
    pub failures: Vec<Mismatch>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.checked > 0
    }
}

impl GradCheck {
    /// Compares the tape gradient of scalar `f` w.r.t. every element of
    /// every input against central differences.
    pub fn run<F>(&self, inputs: &[Tensor<f64>], f: F) -> Result<GradCheckReport>
    where
        F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
    {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = f(&tape, &vars)?;
        let grads = tape.backward(&loss)?;
        let analytic: Vec<Tensor<f64>> = vars.iter().map(|v| grads.get_or_zeros(v)).collect();
        drop(loss);
        drop(vars);

        let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
            let tape = Tape::no_grad();
            let vars: Vec<_> = perturbed.iter().map(|t| tape.leaf(t.clone())).collect();
            f(&tape, &vars)?.value().item()
        };

        let mut report = GradCheckReport::default();
        let mut work: Vec<Tensor<f64>> = inputs.to_vec();
        for (i, input) in inputs.iter().enumerate() {
            for e in 0..input.len() {
                let bump = |delta: f64| {
                    let mut data = input.to_vec();
                    data[e] += delta;
                    Tensor::new(input.shape(), data)
                };
                work[i] = bump(self.step)?;
                let plus = eval(&work)?;
                work[i] = bump(-self.step)?;
                let minus = eval(&work)?;
                work[i] = input.clone();
                let numeric = (plus - minus) / (2.0 * self.step);
                let a = analytic[i].data()[e];
                if !numeric.is_finite() || !a.is_finite() {
                    return Err(Error::Numerical {
                        layer: None,
                        message: format!("non-finite gradient at input {i} element {e}"),
                    });
                }
                let err = (a - numeric).abs();
                report.max_abs_error = report.max_abs_error.max(err);
                report.checked += 1;
                if err > (self.rtol * a.abs()).max(self.atol) {
                    report.failures.push(Mismatch {
                        input: i,
                        element: e,
                        analytic: a,
                        numeric,
                    });
                }
            }
        }
        Ok(report)
    }
}
