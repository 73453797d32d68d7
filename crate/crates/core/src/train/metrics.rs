use crate::engine::{Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// `‖u − û‖₂ / ‖u‖₂` over the flattened field.
pub fn relative_l2<T: Scalar>(target: &Tensor<T>, pred: &Tensor<T>) -> Result<f64> {
    if target.shape() != pred.shape() {
        return Err(Error::shape("relative_l2", target.shape(), pred.shape()));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for (&u, &p) in target.data().iter().zip(pred.data()) {
        let (u, p) = (u.as_f64(), p.as_f64());
        num += (u - p) * (u - p);
        den += u * u;
    }
    if den == 0.0 {
        return Err(Error::UndefinedMetric("relative L2 of a zero target field".into()));
    }
    Ok((num / den).sqrt())
}

/// Differentiable relative L2 of `pred` against a fixed target.
pub fn relative_l2_loss<'t, T: Scalar>(pred: &Var<'t, T>, target: &Tensor<T>) -> Result<Var<'t, T>> {
    if pred.shape() != target.shape() {
        return Err(Error::shape("relative_l2_loss", pred.shape(), target.shape()));
    }
    let norm = target.data().iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::UndefinedMetric("relative L2 of a zero target field".into()));
    }
    let diff = pred.sub(&pred.tape().constant(target.clone()))?;
    Ok(diff.square().sum().sqrt().scale(1.0 / norm))
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return Err(Error::UndefinedMetric("rank variance is zero (all values tied)".into()));
    }
    Ok((cov / (va * vb).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman's ρ: Pearson correlation of the average-rank vectors.
pub fn spearman(truth: &[f64], pred: &[f64]) -> Result<f64> {
    if truth.len() != pred.len() {
        return Err(Error::shape("spearman", &[truth.len()], &[pred.len()]));
    }
    if truth.len() < 3 {
        return Err(Error::UndefinedMetric(format!(
            "rank correlation needs at least 3 values, got {}",
            truth.len()
        )));
    }
    if truth.iter().chain(pred).any(|v| !v.is_finite()) {
        return Err(Error::UndefinedMetric("rank correlation of non-finite values".into()));
    }
    pearson(&average_ranks(truth), &average_ranks(pred))
}
