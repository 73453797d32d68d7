//! Invariant checks shared by the property tests and the acceptance suite.
//! Each check takes a case seed and a point count and reports a violation
//! as an error string.

#![allow(dead_code)]

use pgot::model::{FeedForward, Mixer, ModelConfig, PgotModel};
use pgot::nn::Forward;
use pgot::{Rng, Tape, Tensor};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestError, TestRunner};

pub type Check = fn(u64, usize) -> Result<(), String>;

pub const ROW_SUM_TOL: f64 = 1e-5;
pub const CONSTANT_TOL: f64 = 1e-5;

pub fn small_config(seed: u64) -> ModelConfig {
    ModelConfig {
        layers: 2,
        width: 8,
        slices: 4,
        heads: 2,
        embed_freqs: 3,
        gate_freqs: 3,
        seed,
        ..ModelConfig::default()
    }
}

/// Coordinates at a random offset and scale (optionally with repeated
/// points) plus inputs in `[-1, 1]`.
pub fn random_inputs(cfg: &ModelConfig, n: usize, seed: u64) -> (Tensor<f32>, Tensor<f32>) {
    let mut rng = Rng::new(seed ^ 0x5eed);
    let scale = rng.uniform_in(0.01, 100.0);
    let offset = rng.uniform_in(-10.0, 10.0);
    let mut coords = Tensor::from_fn(&[n, cfg.coord_dim], |_| (offset + scale * rng.uniform()) as f32).to_vec();
    if seed % 4 == 0 {
        let d = cfg.coord_dim;
        for i in (0..n).step_by(3).skip(1) {
            let src = rng.below(n);
            for a in 0..d {
                coords[i * d + a] = coords[src * d + a];
            }
        }
    }
    let coords = Tensor::new(&[n, cfg.coord_dim], coords).unwrap();
    let input = Tensor::from_fn(&[n, cfg.input_dim], |_| rng.uniform_in(-1.0, 1.0) as f32);
    (coords, input)
}

fn permute_rows(t: &Tensor<f32>, perm: &[usize]) -> Tensor<f32> {
    let (_, k) = t.rows_cols();
    let data: Vec<f32> = perm.iter().flat_map(|&p| t.row(p).to_vec()).collect();
    Tensor::new(&[perm.len(), k], data).unwrap()
}

pub fn assignment_rows_are_stochastic(seed: u64, n: usize) -> Result<(), String> {
    let cfg = small_config(seed);
    let model = PgotModel::<f32>::new(cfg.clone()).map_err(|e| e.to_string())?;
    let (coords, input) = random_inputs(&cfg, n, seed);
    let (_, traces) = model.predict_with_traces(&coords, &input).map_err(|e| e.to_string())?;
    for (l, t) in traces.iter().enumerate() {
        let a = t.assignment.as_ref().ok_or("missing assignment trace")?;
        for i in 0..n {
            let row = a.row(i);
            let sum: f64 = row.iter().map(|&v| f64::from(v)).sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL || row.iter().any(|&v| v < 0.0) {
                return Err(format!("layer {l} row {i} sums to {sum}"));
            }
        }
    }
    Ok(())
}

pub fn permutation_equivariance(seed: u64, n: usize) -> Result<(), String> {
    let cfg = small_config(seed);
    let model = PgotModel::<f32>::new(cfg.clone()).map_err(|e| e.to_string())?;
    let (coords, input) = random_inputs(&cfg, n, seed);
    let mut perm: Vec<usize> = (0..n).collect();
    Rng::new(seed).shuffle(&mut perm);
    let out = model.predict(&coords, &input).map_err(|e| e.to_string())?;
    let out_p = model
        .predict(&permute_rows(&coords, &perm), &permute_rows(&input, &perm))
        .map_err(|e| e.to_string())?;
    for (i, &p) in perm.iter().enumerate() {
        let (a, b) = (out_p.row(i), out.row(p));
        if a.iter().zip(b).any(|(x, y)| x.to_bits() != y.to_bits()) {
            return Err(format!("row {i} (source {p}): {a:?} vs {b:?}"));
        }
    }
    Ok(())
}

pub fn gate_in_open_unit_interval(seed: u64, n: usize) -> Result<(), String> {
    let cfg = small_config(seed);
    let model = PgotModel::<f32>::new(cfg.clone()).map_err(|e| e.to_string())?;
    let (coords, input) = random_inputs(&cfg, n, seed);
    let (_, traces) = model.predict_with_traces(&coords, &input).map_err(|e| e.to_string())?;
    for (l, t) in traces.iter().enumerate() {
        let g = t.gate.as_ref().ok_or("missing gate trace")?;
        if let Some(v) = g.data().iter().find(|&&v| !(v > 0.0 && v < 1.0)) {
            return Err(format!("layer {l} gate value {v}"));
        }
    }
    Ok(())
}

/// Gates must not move when only the physical inputs change.
pub fn gate_depends_only_on_coordinates(seed: u64, n: usize) -> Result<(), String> {
    let cfg = small_config(seed);
    let model = PgotModel::<f32>::new(cfg.clone()).map_err(|e| e.to_string())?;
    let (coords, input) = random_inputs(&cfg, n, seed);
    let (_, other) = random_inputs(&cfg, n, seed.wrapping_add(1));
    let (_, a) = model.predict_with_traces(&coords, &input).map_err(|e| e.to_string())?;
    let (_, b) = model.predict_with_traces(&coords, &other).map_err(|e| e.to_string())?;
    for (l, (ta, tb)) in a.iter().zip(&b).enumerate() {
        let (ga, gb) = (ta.gate.as_ref().unwrap(), tb.gate.as_ref().unwrap());
        if !ga.bit_eq(gb) {
            return Err(format!("layer {l} gate changed with the input field"));
        }
    }
    Ok(())
}

/// With the gate forced to 0 (1) the feed-forward output equals the linear
/// (non-linear) expert exactly.
pub fn expert_forcing(seed: u64, n: usize) -> Result<(), String> {
    use pgot::taylor::GateMode;
    for (mode, linear) in [(GateMode::Zero, true), (GateMode::One, false)] {
        let cfg = ModelConfig {
            gate_mode: mode,
            ..small_config(seed)
        };
        let model = PgotModel::<f32>::new(cfg.clone()).map_err(|e| e.to_string())?;
        let (coords, _) = random_inputs(&cfg, n, seed);
        let geo = model.geometry(&coords).map_err(|e| e.to_string())?;
        let mut rng = Rng::new(seed);
        let x = Tensor::from_fn(&[n, cfg.width], |_| rng.uniform_in(-2.0, 2.0) as f32);
        let tape = Tape::no_grad();
        let ctx = Forward::new(&tape, model.params(), false, 0);
        let FeedForward::Taylor(ffn) = &model.architecture().blocks[0].ffn else {
            return Err("expected a Taylor feed-forward".into());
        };
        let xv = tape.constant(x);
        let e = tape.constant(geo.gate_features);
        let out = ffn.forward(&ctx, 0, &xv, &e).map_err(|e| e.to_string())?;
        let expert = if linear {
            ffn.linear_expert(&ctx, &xv)
        } else {
            ffn.nonlinear_expert(&ctx, &xv)
        }
        .map_err(|e| e.to_string())?;
        if out.value().data().iter().zip(expert.value().data()).any(|(a, b)| a != b) {
            return Err(format!("{mode:?}: output differs from the forced expert"));
        }
    }
    Ok(())
}

/// With `W_f`, the value and output projections set to identity (zero
/// bias), a constant field passes through slice, mix and deslice unchanged.
pub fn constant_field_is_preserved(seed: u64, n: usize) -> Result<(), String> {
    let cfg = small_config(seed);
    let c = cfg.width;
    let model = PgotModel::<f32>::new(cfg.clone()).map_err(|e| e.to_string())?;
    let mut params = model.params().clone();
    let eye = Tensor::<f32>::eye(c);
    for name in ["attn.w_f", "attn.mhsa.v.weight", "attn.mhsa.o.weight"] {
        params.set_by_name(&format!("blocks.0.{name}"), eye.clone()).map_err(|e| e.to_string())?;
    }
    for name in ["attn.mhsa.v.bias", "attn.mhsa.o.bias"] {
        params
            .set_by_name(&format!("blocks.0.{name}"), Tensor::zeros(&[c]))
            .map_err(|e| e.to_string())?;
    }
    let model = PgotModel::from_params(cfg.clone(), params).map_err(|e| e.to_string())?;
    let Mixer::SpecGeo(attn) = &model.architecture().blocks[0].mixer else {
        return Err("expected slice attention".into());
    };
    let (coords, _) = random_inputs(&cfg, n, seed);
    let geo = model.geometry(&coords).map_err(|e| e.to_string())?;
    let mut rng = Rng::new(seed);
    let value: Vec<f32> = (0..c).map(|_| rng.uniform_in(-3.0, 3.0) as f32).collect();
    let field = Tensor::from_fn(&[n, c], |i| value[i % c]);
    let tape = Tape::no_grad();
    let ctx = Forward::new(&tape, model.params(), false, 0);
    let out = attn
        .forward(&ctx, 0, &tape.constant(field.clone()), &tape.constant(geo.normalized))
        .map_err(|e| e.to_string())?;
    let diff = out.value().max_abs_diff(&field).ok_or("shape changed")?;
    if diff > CONSTANT_TOL {
        return Err(format!("constant field drifted by {diff:e}"));
    }
    Ok(())
}

pub const STRUCTURAL: [(&str, Check); 6] = [
    ("assignment rows sum to 1", assignment_rows_are_stochastic),
    ("permutation equivariance", permutation_equivariance),
    ("gate in (0, 1)", gate_in_open_unit_interval),
    ("gate depends on coordinates only", gate_depends_only_on_coordinates),
    ("expert forcing", expert_forcing),
    ("constant preservation", constant_field_is_preserved),
];

pub fn case_strategy() -> impl Strategy<Value = (u64, usize)> {
    (any::<u64>(), 4usize..48)
}

/// Runs `check` on `cases` random cases with shrinking; returns the
/// minimal failing case on error.
pub fn run_property(check: Check, cases: u32) -> Result<(), String> {
    let mut runner = TestRunner::new(Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    });
    runner
        .run(&case_strategy(), |(seed, n)| check(seed, n).map_err(TestCaseError::fail))
        .map_err(|e| match e {
            TestError::Fail(why, (seed, n)) => format!("seed {seed}, n {n}: {why}"),
            TestError::Abort(why) => why.to_string(),
        })
}
