//! Wall-time and allocated-memory scaling of the forward and backward pass.

use std::io::Write;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::engine::{alloc, Tape, Tensor};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, PgotModel};
use crate::nn::Forward;
use crate::rng::Rng;

pub const CSV_HEADER: &str = "n,fwd_us_med,fwd_us_min,fwd_us_max,fwdbwd_us_med,peak_bytes,config_hash";
pub const MIN_REPEATS: usize = 5;
/// Measurements shorter than this many timer ticks trigger a warning.
pub const MIN_TICKS: u64 = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub n: usize,
    pub fwd_us_med: f64,
    pub fwd_us_min: f64,
    pub fwd_us_max: f64,
    pub fwdbwd_us_med: f64,
    /// Peak allocated tensor bytes during one inference forward pass.
    pub peak_bytes: usize,
    pub config_hash: String,
}

impl BenchRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.1},{:.1},{:.1},{:.1},{},{}",
            self.n, self.fwd_us_med, self.fwd_us_min, self.fwd_us_max, self.fwdbwd_us_med, self.peak_bytes, self.config_hash
        )
    }
}

pub fn write_csv(records: &[BenchRecord], mut out: impl Write) -> Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for r in records {
        writeln!(out, "{}", r.csv_row())?;
    }
    Ok(())
}

/// `peak_bytes[i+1] / peak_bytes[i]` for consecutive records.
pub fn memory_ratios(records: &[BenchRecord]) -> Vec<f64> {
    records
        .windows(2)
        .map(|w| w[1].peak_bytes as f64 / w[0].peak_bytes as f64)
        .collect()
}

/// Smallest observable step of the monotonic clock.
pub fn timer_tick() -> Duration {
    let mut best = Duration::MAX;
    for _ in 0..200 {
        let a = Instant::now();
        let mut b = Instant::now();
        while b == a {
            b = Instant::now();
        }
        best = best.min(b - a);
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRun {
    pub records: Vec<BenchRecord>,
    pub warnings: Vec<String>,
}

/// Random points in the unit box with random input channels.
pub fn bench_inputs(config: &ModelConfig, n: usize, seed: u64) -> (Tensor<f32>, Tensor<f32>) {
    let mut rng = Rng::new(seed ^ n as u64);
    let coords = Tensor::from_fn(&[n, config.coord_dim], |_| rng.uniform() as f32);
    let input = Tensor::from_fn(&[n, config.input_dim], |_| rng.uniform_in(-1.0, 1.0) as f32);
    (coords, input)
}

fn micros(d: Duration) -> f64 {
    d.as_secs_f64() * 1e6
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let k = v.len();
    if k % 2 == 1 {
        v[k / 2]
    } else {
        (v[k / 2 - 1] + v[k / 2]) / 2.0
    }
}

/// Benchmarks `config` (in `f32`, single-threaded) at each size.
pub fn run_bench(config: &ModelConfig, sizes: &[usize], repeats: usize, seed: u64) -> Result<BenchRun> {
    if sizes.is_empty() || sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!("sizes must be non-empty and strictly ascending, got {sizes:?}")));
    }
    if sizes[0] < 1 {
        return Err(Error::Config("sizes must be positive".into()));
    }
    if repeats < MIN_REPEATS {
        return Err(Error::Config(format!("repeats must be at least {MIN_REPEATS}, got {repeats}")));
    }
    let model = PgotModel::<f32>::new(config.clone())?;
    let hash = config.hash();
    let tick = timer_tick();
    let mut records = Vec::with_capacity(sizes.len());
    let mut warnings = Vec::new();
    for &n in sizes {
        let (coords, input) = bench_inputs(config, n, seed);
        let (out, mem) = alloc::measure(|| model.predict(&coords, &input));
        out?;
        let mut fwd = Vec::with_capacity(repeats);
        let mut fwdbwd = Vec::with_capacity(repeats);
        for _ in 0..repeats {
            let t = Instant::now();
            model.predict(&coords, &input)?;
            fwd.push(t.elapsed());

            let t = Instant::now();
            let tape = Tape::new();
            let ctx = Forward::new(&tape, model.params(), false, 0);
            let out = model.forward(&ctx, &coords, &tape.constant(input.clone()))?;
            tape.backward(&out.mean())?;
            fwdbwd.push(t.elapsed());
        }
        if let Some(short) = fwd.iter().chain(&fwdbwd).min().filter(|d| **d < tick * MIN_TICKS as u32) {
            warnings.push(format!(
                "n={n}: measurement of {short:?} is under {MIN_TICKS} timer ticks ({tick:?} each)"
            ));
        }
        let fwd_us: Vec<f64> = fwd.into_iter().map(micros).collect();
        records.push(BenchRecord {
            n,
            fwd_us_med: median(fwd_us.clone()),
            fwd_us_min: fwd_us.iter().copied().fold(f64::INFINITY, f64::min),
            fwd_us_max: fwd_us.iter().copied().fold(0.0, f64::max),
            fwdbwd_us_med: median(fwdbwd.into_iter().map(micros).collect()),
            peak_bytes: mem.peak,
            config_hash: hash.clone(),
        });
    }
    Ok(BenchRun { records, warnings })
}

/// Peak bytes of one inference pass at each size, without timing.
pub fn peak_bytes(config: &ModelConfig, sizes: &[usize], seed: u64) -> Result<Vec<usize>> {
    let model = PgotModel::<f32>::new(config.clone())?;
    sizes
        .iter()
        .map(|&n| {
            let (coords, input) = bench_inputs(config, n, seed);
            let (out, mem) = alloc::measure(|| model.predict(&coords, &input));
            out.map(|_| mem.peak)
        })
        .collect()
}
