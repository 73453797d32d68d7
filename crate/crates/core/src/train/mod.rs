//! Loss, metrics, optimizer and the training loop.
//!
//! Inputs and targets are z-scored with the train-split statistics before
//! they reach the model; every loss and metric here is computed in that
//! normalized space.

pub mod metrics;
pub mod optim;

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, NormStats, Sample};
use crate::engine::{alloc, Tape, Tensor};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, PgotModel};
use crate::nn::Forward;
use crate::rng::Rng;
use crate::scalar::Scalar;

pub use metrics::{average_ranks, relative_l2, relative_l2_loss, spearman};
pub use optim::{clip_grad_norm, cosine_lr, AdamW, OptimState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Optimizer steps.
    pub steps: usize,
    /// Peak learning rate; decays by cosine to a tenth of this value.
    pub lr: f64,
    pub weight_decay: f64,
    /// Global gradient-norm cap; 0 disables clipping.
    pub clip_norm: f64,
    /// Samples per optimizer step.
    pub batch_size: usize,
    /// Evaluate (and possibly keep the best model) every this many steps.
    pub eval_every: usize,
    /// Seed for shuffling and dropout.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 500,
            lr: 1e-3,
            weight_decay: 1e-4,
            clip_norm: 1.0,
            batch_size: 8,
            eval_every: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config("batch_size and eval_every must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be finite and non-negative, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0 && self.clip_norm >= 0.0) {
            return Err(Error::Config("weight_decay and clip_norm must be non-negative".into()));
        }
        Ok(())
    }
}

/// The JSON document accepted by `pgot train --config`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub training: TrainConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.training.validate()
    }

    /// Checks model field widths against a dataset.
    pub fn check_dataset(&self, ds: &Dataset) -> Result<()> {
        check_dims(&self.model, ds)
    }
}

pub fn check_dims(model: &ModelConfig, ds: &Dataset) -> Result<()> {
    let (d, da, du) = ds.dims();
    let mut bad = Vec::new();
    if model.coord_dim != d {
        bad.push(format!("coord_dim {} vs data {d}", model.coord_dim));
    }
    if model.input_dim != da {
        bad.push(format!("input_dim {} vs data {da}", model.input_dim));
    }
    if model.output_dim != du {
        bad.push(format!("output_dim {} vs data {du}", model.output_dim));
    }
    if bad.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(format!("model/dataset mismatch: {}", bad.join(", "))))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    pub rel_l2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResourceSample {
    pub step: usize,
    pub elapsed_s: f64,
    pub peak_bytes: usize,
}

/// Everything logged by one training run. All fields except `resources`
/// are deterministic given the configuration and data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config_hash: String,
    pub seed: u64,
    pub model_seed: u64,
    pub param_count: usize,
    pub steps: usize,
    pub steps_completed: usize,
    /// Mean per-sample loss of each epoch (the last one may be partial).
    pub train_loss: Vec<f64>,
    pub eval: Vec<EvalPoint>,
    pub best_step: usize,
    pub best_eval_rel_l2: f64,
    /// Mean relative L2 of the returned model on the training set.
    pub final_train_rel_l2: f64,
    /// Relative L2 per output channel on the evaluation set.
    pub eval_rel_l2_per_field: Vec<f64>,
    pub eval_spearman: Option<f64>,
    pub dead_slices: usize,
    pub resources: Vec<ResourceSample>,
}

impl RunReport {
    /// The report without wall-time and memory samples.
    pub fn deterministic(&self) -> RunReport {
        RunReport {
            resources: Vec::new(),
            ..self.clone()
        }
    }
}

/// A sample converted to the model's scalar type and normalized.
#[derive(Debug, Clone)]
pub struct Prepared<T: Scalar> {
    pub coords: Tensor<T>,
    pub input: Tensor<T>,
    pub target: Tensor<T>,
}

pub fn prepare<T: Scalar>(samples: &[Sample], stats: &NormStats) -> Result<Vec<Prepared<T>>> {
    samples
        .iter()
        .map(|s| {
            Ok(Prepared {
                coords: s.coords.cast(),
                input: stats.input.normalize(&s.input)?,
                target: stats.target.normalize(&s.target)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Mean per-sample relative L2 over all channels.
    pub rel_l2: f64,
    pub rel_l2_per_field: Vec<f64>,
    pub per_sample: Vec<f64>,
    /// Rank correlation of per-sample mean target vs mean prediction;
    /// `None` when undefined (fewer than 3 samples or all tied).
    pub spearman: Option<f64>,
}

/// Metrics from paired target/prediction fields (`N×d_u` each).
pub fn metrics_from_predictions<T: Scalar>(targets: &[Tensor<T>], preds: &[Tensor<T>]) -> Result<Metrics> {
    if targets.is_empty() || targets.len() != preds.len() {
        return Err(Error::Contract(format!(
            "{} targets vs {} predictions",
            targets.len(),
            preds.len()
        )));
    }
    let per_sample = targets
        .iter()
        .zip(preds)
        .map(|(u, p)| relative_l2(u, p))
        .collect::<Result<Vec<_>>>()?;
    let fields = targets[0].shape()[1];
    let mut per_field = vec![0.0; fields];
    for (u, p) in targets.iter().zip(preds) {
        for (c, acc) in per_field.iter_mut().enumerate() {
            let col = |t: &Tensor<T>| Tensor::from_fn(&[t.shape()[0]], |i| t.data()[i * fields + c]);
            *acc += relative_l2(&col(u), &col(p))?;
        }
    }
    let k = targets.len() as f64;
    let mean = |t: &Tensor<T>| t.data().iter().map(|v| v.as_f64()).sum::<f64>() / t.len() as f64;
    let truth: Vec<f64> = targets.iter().map(mean).collect();
    let guess: Vec<f64> = preds.iter().map(mean).collect();
    Ok(Metrics {
        rel_l2: per_sample.iter().sum::<f64>() / k,
        rel_l2_per_field: per_field.into_iter().map(|v| v / k).collect(),
        per_sample,
        spearman: spearman(&truth, &guess).ok(),
    })
}

pub fn predict_all<T: Scalar>(model: &PgotModel<T>, data: &[Prepared<T>]) -> Result<Vec<Tensor<T>>> {
    data.iter().map(|p| model.predict(&p.coords, &p.input)).collect()
}

/// Evaluates `model` on normalized samples.
pub fn evaluate_prepared<T: Scalar>(model: &PgotModel<T>, data: &[Prepared<T>]) -> Result<Metrics> {
    let preds = predict_all(model, data)?;
    let targets: Vec<Tensor<T>> = data.iter().map(|p| p.target.clone()).collect();
    metrics_from_predictions(&targets, &preds)
}

/// Evaluates `model` on a dataset, normalizing with `stats` (the train-split
/// statistics the model was fitted with).
pub fn evaluate<T: Scalar>(model: &PgotModel<T>, ds: &Dataset, stats: &NormStats) -> Result<Metrics> {
    check_dims(model.config(), ds)?;
    evaluate_prepared(model, &prepare(&ds.samples, stats)?)
}

/// Mean loss of one batch and the gradient of every parameter.
pub fn loss_and_grads<T: Scalar>(
    model: &PgotModel<T>,
    batch: &[&Prepared<T>],
    training: bool,
    seed: u64,
) -> Result<(Vec<f64>, Vec<Tensor<T>>, usize)> {
    let tape = Tape::new();
    let ctx = Forward::new(&tape, model.params(), training, seed);
    let mut losses = Vec::with_capacity(batch.len());
    let mut total = None;
    for p in batch {
        let out = model.forward(&ctx, &p.coords, &tape.constant(p.input.clone()))?;
        let loss = relative_l2_loss(&out, &p.target)?;
        losses.push(loss.value().item()?.as_f64());
        total = Some(match total {
            None => loss,
            Some(acc) => loss.add(&acc)?,
        });
    }
    let total = total
        .ok_or_else(|| Error::Contract("empty batch".into()))?
        .scale(1.0 / batch.len() as f64);
    let grads = tape.backward(&total)?;
    let grads = ctx.params().iter().map(|v| grads.get_or_zeros(v)).collect();
    Ok((losses, grads, ctx.dead_slices()))
}

pub struct TrainOutcome<T: Scalar> {
    pub model: PgotModel<T>,
    pub report: RunReport,
}

/// A run that stopped on a numerical failure, with the log up to that point.
#[derive(Debug)]
pub struct TrainFailure {
    pub error: Error,
    pub report: Option<RunReport>,
}

impl From<Error> for TrainFailure {
    fn from(error: Error) -> Self {
        TrainFailure { error, report: None }
    }
}

/// Trains from `model`'s current parameters. `eval_set` (already
/// normalized) selects the best model; pass the training set to select on
/// training loss.
pub fn train<T: Scalar>(
    model: PgotModel<T>,
    train_set: &[Prepared<T>],
    eval_set: &[Prepared<T>],
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>, TrainFailure> {
    train_with(model, train_set, eval_set, cfg, |_, _| {})
}

/// [`train`] with a callback invoked after each optimizer step with the step
/// number (1-based) and the batch mean loss.
pub fn train_with<T: Scalar>(
    mut model: PgotModel<T>,
    train_set: &[Prepared<T>],
    eval_set: &[Prepared<T>],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(usize, f64),
) -> Result<TrainOutcome<T>, TrainFailure> {
    cfg.validate()?;
    if train_set.is_empty() || eval_set.is_empty() {
        return Err(Error::Data("training and evaluation sets must be non-empty".into()).into());
    }
    let start = Instant::now();
    alloc::reset_peak();
    let hp = AdamW {
        weight_decay: cfg.weight_decay,
        ..AdamW::default()
    };
    let mut state = OptimState::new(model.params());
    let mut rng = Rng::new(cfg.seed);
    let batch = cfg.batch_size.min(train_set.len());
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut cursor = order.len();

    let mut report = RunReport {
        config_hash: model.config().hash(),
        seed: cfg.seed,
        model_seed: model.config().seed,
        param_count: model.param_count(),
        steps: cfg.steps,
        steps_completed: 0,
        train_loss: Vec::new(),
        eval: Vec::new(),
        best_step: 0,
        best_eval_rel_l2: f64::INFINITY,
        final_train_rel_l2: f64::NAN,
        eval_rel_l2_per_field: Vec::new(),
        eval_spearman: None,
        dead_slices: 0,
        resources: Vec::new(),
    };
    let mut epoch_sum = 0.0;
    let mut epoch_count = 0usize;
    let mut best = model.params().clone();

    let evaluate_now = |model: &PgotModel<T>, step: usize, report: &mut RunReport, best: &mut _| -> Result<()> {
        let m = evaluate_prepared(model, eval_set)?;
        report.eval.push(EvalPoint { step, rel_l2: m.rel_l2 });
        report.resources.push(ResourceSample {
            step,
            elapsed_s: start.elapsed().as_secs_f64(),
            peak_bytes: alloc::stats().peak,
        });
        if m.rel_l2 < report.best_eval_rel_l2 {
            report.best_eval_rel_l2 = m.rel_l2;
            report.best_step = step;
            *best = model.params().clone();
        }
        Ok(())
    };

    let fail = |error: Error, report: &RunReport| TrainFailure {
        error,
        report: Some(report.clone()),
    };

    if let Err(e) = evaluate_now(&model, 0, &mut report, &mut best) {
        return Err(fail(e, &report));
    }

    for step in 0..cfg.steps {
        let mut members = Vec::with_capacity(batch);
        while members.len() < batch {
            if cursor == order.len() {
                if epoch_count > 0 {
                    report.train_loss.push(epoch_sum / epoch_count as f64);
                    epoch_sum = 0.0;
                    epoch_count = 0;
                }
                rng.shuffle(&mut order);
                cursor = 0;
            }
            members.push(&train_set[order[cursor]]);
            cursor += 1;
        }
        let dropout_seed = rng.next_u64();
        let (losses, mut grads, dead) = match loss_and_grads(&model, &members, true, dropout_seed) {
            Ok(v) => v,
            Err(e) => return Err(fail(e, &report)),
        };
        let mean = losses.iter().sum::<f64>() / losses.len() as f64;
        if !mean.is_finite() {
            let e = Error::Numerical {
                layer: None,
                message: format!("loss became {mean} at step {}", step + 1),
            };
            return Err(fail(e, &report));
        }
        report.dead_slices += dead;
        epoch_sum += losses.iter().sum::<f64>();
        epoch_count += losses.len();
        clip_grad_norm(&mut grads, cfg.clip_norm);
        let lr = cosine_lr(cfg.lr, step, cfg.steps);
        if let Err(e) = state.step(&hp, lr, model.params_mut(), &grads) {
            return Err(fail(e, &report));
        }
        report.steps_completed = step + 1;
        on_step(step + 1, mean);
        if (step + 1) % cfg.eval_every == 0 || step + 1 == cfg.steps {
            if let Err(e) = evaluate_now(&model, step + 1, &mut report, &mut best) {
                return Err(fail(e, &report));
            }
        }
    }
    if epoch_count > 0 {
        report.train_loss.push(epoch_sum / epoch_count as f64);
    }

    let model = PgotModel::from_params(model.config().clone(), best).map_err(|e| fail(e, &report))?;
    let summary = evaluate_prepared(&model, train_set)
        .and_then(|train_metrics| Ok((train_metrics, evaluate_prepared(&model, eval_set)?)));
    match summary {
        Ok((train_metrics, eval_metrics)) => {
            report.final_train_rel_l2 = train_metrics.rel_l2;
            report.eval_rel_l2_per_field = eval_metrics.rel_l2_per_field;
            report.eval_spearman = eval_metrics.spearman;
        }
        Err(e) => return Err(fail(e, &report)),
    }
    Ok(TrainOutcome { model, report })
}
