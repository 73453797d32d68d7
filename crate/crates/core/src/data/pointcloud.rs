//! Scattered points in an annulus carrying the harmonic radial field
//! `u(r) = ln(r/r_in) / ln(r_out/r_in)`.

use crate::engine::Tensor;
use crate::error::{Error, Result};
use crate::rng::Rng;

use super::{Sample, SampleMeta, Task};

pub const OUTER_RADIUS: f64 = 1.0;
pub const INNER_RADIUS_RANGE: (f64, f64) = (0.2, 0.5);
pub const MIN_POINTS: usize = 64;
pub const MAX_POINTS: usize = 2048;
pub const MAX_ATTEMPTS: usize = 1_000_000;

/// Harmonic in the annulus, 0 on the inner circle and 1 on the outer.
pub fn radial_field(r: f64, r_in: f64, r_out: f64) -> f64 {
    (r / r_in).ln() / (r_out / r_in).ln()
}

/// Dart throwing with a minimum spacing of half the mean point spacing.
pub fn sample_annulus(rng: &mut Rng, n: usize, r_in: f64, r_out: f64) -> Result<Vec<(f64, f64)>> {
    throw_darts(rng, n, r_in, r_out, MAX_ATTEMPTS)
}

fn throw_darts(rng: &mut Rng, n: usize, r_in: f64, r_out: f64, max_attempts: usize) -> Result<Vec<(f64, f64)>> {
    let area = std::f64::consts::PI * (r_out * r_out - r_in * r_in);
    let min_dist2 = 0.25 * area / n as f64;
    let mut points: Vec<(f64, f64)> = Vec::with_capacity(n);
    let mut attempts = 0;
    while points.len() < n {
        if attempts == max_attempts {
            return Err(Error::Generator(format!(
                "placed {} of {n} points after {max_attempts} attempts",
                points.len()
            )));
        }
        attempts += 1;
        let x = rng.uniform_in(-r_out, r_out);
        let y = rng.uniform_in(-r_out, r_out);
        let r = x.hypot(y);
        if r < r_in || r > r_out {
            continue;
        }
        if points
            .iter()
            .all(|&(px, py)| (px - x) * (px - x) + (py - y) * (py - y) >= min_dist2)
        {
            points.push((x, y));
        }
    }
    Ok(points)
}

pub fn generate_sample(n: usize, seed: u64) -> Result<Sample> {
    if !(MIN_POINTS..=MAX_POINTS).contains(&n) {
        return Err(Error::Generator(format!(
            "point count must lie in [{MIN_POINTS}, {MAX_POINTS}], got {n}"
        )));
    }
    let mut rng = Rng::new(seed);
    let r_in = rng.uniform_in(INNER_RADIUS_RANGE.0, INNER_RADIUS_RANGE.1);
    let points = sample_annulus(&mut rng, n, r_in, OUTER_RADIUS)?;
    let mut coords = Vec::with_capacity(2 * n);
    let mut input = Vec::with_capacity(2 * n);
    let mut target = Vec::with_capacity(n);
    for &(x, y) in &points {
        let r = x.hypot(y);
        coords.extend([x, y]);
        input.extend([r_in, (r - r_in).min(OUTER_RADIUS - r)]);
        target.push(radial_field(r, r_in, OUTER_RADIUS));
    }
    Sample::new(
        Tensor::from_f64(&[n, 2], &coords)?,
        Tensor::from_f64(&[n, 2], &input)?,
        Tensor::from_f64(&[n, 1], &target)?,
        SampleMeta {
            task: Task::PointcloudStress,
            seed,
            resolution: n,
        },
    )
}
