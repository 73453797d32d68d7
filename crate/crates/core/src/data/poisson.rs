//! Poisson problem `−Δu = a` on the unit square with zero Dirichlet data,
//! discretized by the 5-point stencil and solved directly.

use crate::engine::Tensor;
use crate::error::{Error, Result};
use crate::rng::Rng;

use super::{Sample, SampleMeta, Task};

pub const MIN_RESOLUTION: usize = 8;
pub const MAX_RESOLUTION: usize = 64;
pub const MAX_MODES: usize = 5;
pub const MAX_FREQUENCY: usize = 4;

/// One term `c·sin(pπx)·sin(qπy)` of a source field.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SineMode {
    pub p: usize,
    pub q: usize,
    pub coeff: f64,
}

impl SineMode {
    pub fn eval(&self, x: f64, y: f64) -> f64 {
        use std::f64::consts::PI;
        self.coeff * (self.p as f64 * PI * x).sin() * (self.q as f64 * PI * y).sin()
    }
}

/// Between 1 and 5 modes with frequencies in `1..=4` and coefficients in `[-1, 1)`.
pub fn random_modes(rng: &mut Rng) -> Vec<SineMode> {
    let count = 1 + rng.below(MAX_MODES);
    (0..count)
        .map(|_| SineMode {
            p: 1 + rng.below(MAX_FREQUENCY),
            q: 1 + rng.below(MAX_FREQUENCY),
            coeff: rng.uniform_in(-1.0, 1.0),
        })
        .collect()
}

/// Node coordinates of an `n×n` grid over `[0,1]²` including the boundary,
/// row-major with `x` varying fastest.
pub fn grid_nodes(n: usize) -> Vec<(f64, f64)> {
    let h = 1.0 / (n - 1) as f64;
    (0..n)
        .flat_map(|j| (0..n).map(move |i| (i as f64 * h, j as f64 * h)))
        .collect()
}

/// Solves `−Δ_h u = a` on the `n×n` node grid. `source` holds `a` at every
/// node (boundary values are ignored); the returned field is zero on the
/// boundary.
///
/// The interior system is symmetric positive definite with bandwidth
/// `n − 2`; it is factored by a banded Cholesky decomposition.
pub fn solve_dirichlet(n: usize, source: &[f64]) -> Result<Vec<f64>> {
    if n < 3 || source.len() != n * n {
        return Err(Error::Generator(format!("grid {n} needs {} source values", n * n)));
    }
    let m = n - 2;
    let size = m * m;
    let h2 = 1.0 / ((n - 1) * (n - 1)) as f64;
    let node = |k: usize| (k / m + 1) * n + (k % m + 1);

    // Lower band, row k holds columns k-m..=k at offsets 0..=m (offset m is the diagonal).
    let w = m;
    let mut band = vec![0.0f64; size * (w + 1)];
    let at = |k: usize, j: usize| k * (w + 1) + (w + j - k);
    for k in 0..size {
        band[at(k, k)] = 4.0;
        if k % m != 0 {
            band[at(k, k - 1)] = -1.0;
        }
        if k >= m {
            band[at(k, k - m)] = -1.0;
        }
    }
    for k in 0..size {
        let lo = k.saturating_sub(w);
        for j in lo..=k {
            let mut s = band[at(k, j)];
            for l in lo.max(j.saturating_sub(w))..j {
                s -= band[at(k, l)] * band[at(j, l)];
            }
            if j == k {
                if s <= 0.0 {
                    return Err(Error::Generator("Laplacian factorization lost definiteness".into()));
                }
                band[at(k, k)] = s.sqrt();
            } else {
                band[at(k, j)] = s / band[at(j, j)];
            }
        }
    }

    let mut y: Vec<f64> = (0..size).map(|k| h2 * source[node(k)]).collect();
    for k in 0..size {
        let lo = k.saturating_sub(w);
        let mut s = y[k];
        for l in lo..k {
            s -= band[at(k, l)] * y[l];
        }
        y[k] = s / band[at(k, k)];
    }
    for k in (0..size).rev() {
        let hi = (k + w).min(size - 1);
        let mut s = y[k];
        for l in k + 1..=hi {
            s -= band[at(l, k)] * y[l];
        }
        y[k] = s / band[at(k, k)];
    }

    let mut u = vec![0.0; n * n];
    for (k, v) in y.into_iter().enumerate() {
        u[node(k)] = v;
    }
    Ok(u)
}

/// `−Δ_h u` at every interior node (zero on the boundary).
pub fn apply_laplacian(n: usize, u: &[f64]) -> Vec<f64> {
    let inv_h2 = ((n - 1) * (n - 1)) as f64;
    let mut out = vec![0.0; n * n];
    for j in 1..n - 1 {
        for i in 1..n - 1 {
            let c = j * n + i;
            out[c] = inv_h2 * (4.0 * u[c] - u[c - 1] - u[c + 1] - u[c - n] - u[c + n]);
        }
    }
    out
}

pub fn generate_sample(n: usize, seed: u64) -> Result<Sample> {
    if !(MIN_RESOLUTION..=MAX_RESOLUTION).contains(&n) {
        return Err(Error::Generator(format!(
            "resolution must lie in [{MIN_RESOLUTION}, {MAX_RESOLUTION}], got {n}"
        )));
    }
    let mut rng = Rng::new(seed);
    let modes = random_modes(&mut rng);
    let nodes = grid_nodes(n);
    let source: Vec<f64> = nodes
        .iter()
        .map(|&(x, y)| modes.iter().map(|m| m.eval(x, y)).sum())
        .collect();
    let solution = solve_dirichlet(n, &source)?;
    let coords: Vec<f64> = nodes.iter().flat_map(|&(x, y)| [x, y]).collect();
    let np = n * n;
    Sample::new(
        Tensor::from_f64(&[np, 2], &coords)?,
        Tensor::from_f64(&[np, 1], &source)?,
        Tensor::from_f64(&[np, 1], &solution)?,
        SampleMeta {
            task: Task::Poisson2d,
            seed,
            resolution: n,
        },
    )
}
