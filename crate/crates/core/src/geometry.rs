//! Geometry-derived signals: coordinate normalization, the sinusoidal
//! coordinate embedding used by the lifting encoder and the spatial gate,
//! and the multi-scale geometric encoder bank injected into slicing.

use serde::{Deserialize, Serialize};

use crate::engine::{Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{Builder, Forward, Linear, Mlp};
use crate::scalar::Scalar;

/// Affinely maps each axis of the `N×d` point set onto `[0, 1]`.
///
/// A degenerate axis (all points share one value) maps to `0.5`.
pub fn normalize_coords<T: Scalar>(coords: &Tensor<T>) -> Result<Tensor<T>> {
    if coords.rank() != 2 {
        return Err(Error::shape("normalize_coords", coords.shape(), &[0, 0]));
    }
    if !coords.is_finite() {
        return Err(Error::Data("coordinates contain NaN or Inf".into()));
    }
    let (n, d) = coords.rows_cols();
    let data = coords.data();
    let mut lo = vec![T::infinity(); d];
    let mut hi = vec![T::neg_infinity(); d];
    for i in 0..n {
        for a in 0..d {
            lo[a] = lo[a].min(data[i * d + a]);
            hi[a] = hi[a].max(data[i * d + a]);
        }
    }
    let half = T::lit(0.5);
    Ok(Tensor::from_fn(coords.shape(), |idx| {
        let a = idx % d;
        let span = hi[a] - lo[a];
        if span > T::zero() {
            // Clamp guards the last-ulp overshoot of (x - lo) / span.
            ((data[idx] - lo[a]) / span).min(T::one())
        } else {
            half
        }
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EmbedMode {
    Sinusoidal,
    Raw,
    #[default]
    Both,
}

/// Fixed multi-frequency coordinate features.
///
/// Column layout for a point `g ∈ [0,1]^d`: for each axis in order, the `K`
/// values `sin(2^k·π·g_a)` followed by the `K` values `cos(2^k·π·g_a)`; in
/// `Both` mode the `d` raw coordinates are appended last.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoordinateEmbedding {
    pub freqs: usize,
    pub mode: EmbedMode,
}

impl CoordinateEmbedding {
    pub fn new(freqs: usize, mode: EmbedMode) -> Result<Self> {
        if freqs < 1 && mode != EmbedMode::Raw {
            return Err(Error::Parameter(format!(
                "coordinate embedding needs at least one frequency, got {freqs}"
            )));
        }
        Ok(CoordinateEmbedding { freqs, mode })
    }

    pub fn dim(&self, d: usize) -> usize {
        match self.mode {
            EmbedMode::Sinusoidal => 2 * d * self.freqs,
            EmbedMode::Raw => d,
            EmbedMode::Both => 2 * d * self.freqs + d,
        }
    }

    pub fn embed<T: Scalar>(&self, normalized: &Tensor<T>) -> Result<Tensor<T>> {
        if self.freqs < 1 && self.mode != EmbedMode::Raw {
            return Err(Error::Parameter("coordinate embedding with zero frequencies".into()));
        }
        let (n, d) = normalized.rows_cols();
        let width = self.dim(d);
        let k = self.freqs;
        let sin_cos = self.mode != EmbedMode::Raw;
        let mut out = Vec::with_capacity(n * width);
        for row in 0..n {
            let g = normalized.row(row);
            if sin_cos {
                for &ga in g {
                    let ga = ga.as_f64();
                    for f in 0..k {
                        out.push(T::lit((f64::from(1u32 << f) * std::f64::consts::PI * ga).sin()));
                    }
                    for f in 0..k {
                        out.push(T::lit((f64::from(1u32 << f) * std::f64::consts::PI * ga).cos()));
                    }
                }
            }
            if self.mode != EmbedMode::Sinusoidal {
                out.extend_from_slice(g);
            }
        }
        Tensor::new(&[n, width], out)
    }
}

/// Per-scale two-layer perceptrons over scaled coordinates, fused into the
/// hidden width by a linear map and an activation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GeometricEncoderBank {
    pub scales: Vec<Mlp>,
    pub fuse: Linear,
}

impl GeometricEncoderBank {
    pub fn build<T: Scalar>(b: &mut Builder<'_, T>, name: &str, d: usize, width: usize, scales: usize) -> Self {
        let geo = Self::scale_width(width);
        let scales = (0..scales)
            .map(|s| b.mlp(&format!("{name}.scale{s}"), d, geo, geo, true))
            .collect::<Vec<_>>();
        let fuse = b.linear(&format!("{name}.fuse"), scales.len() * geo, width, false);
        GeometricEncoderBank { scales, fuse }
    }

    /// Per-scale feature width: half the hidden width.
    pub fn scale_width(width: usize) -> usize {
        (width / 2).max(1)
    }

    pub fn param_count(d: usize, width: usize, scales: usize) -> usize {
        let geo = Self::scale_width(width);
        scales * Mlp::param_count(d, geo, geo, true) + Linear::param_count(scales * geo, width, false)
    }

    /// Multiplier applied to the coordinates of scale `s` (zero-based): `10^s`.
    pub fn scale_factor(s: usize) -> f64 {
        10f64.powi(s as i32)
    }

    /// `N×d` normalized coordinates to `N×C` geometric features.
    pub fn forward<'t, T: Scalar>(&self, ctx: &Forward<'t, T>, coords: &Var<'t, T>) -> Result<Var<'t, T>> {
        let feats = self
            .scales
            .iter()
            .enumerate()
            .map(|(s, mlp)| mlp.forward(ctx, &coords.scale(Self::scale_factor(s))))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Var<'t, T>> = feats.iter().collect();
        let fused = if refs.len() == 1 {
            refs[0].clone()
        } else {
            Var::concat(&refs, 1)?
        };
        Ok(self.fuse.forward(ctx, &fused)?.gelu())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::Tape;
    use crate::nn::ParamStore;
    use crate::rng::Rng;

    fn coords(v: &[f64], d: usize) -> Tensor<f64> {
        Tensor::from_f64(&[v.len() / d, d], v).unwrap()
    }

    #[test]
    fn normalizes_bounding_box_corners() {
        let out = normalize_coords(&coords(&[0., 0., 2., 4.], 2)).unwrap();
        assert_eq!(out.data(), &[0., 0., 1., 1.]);
    }

    #[test]
    fn single_point_maps_to_center() {
        let out = normalize_coords(&coords(&[3., 3.], 2)).unwrap();
        assert_eq!(out.data(), &[0.5, 0.5]);
    }

    #[test]
    fn non_finite_coordinates_are_data_errors() {
        let err = normalize_coords(&coords(&[0., f64::NAN], 2)).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
        assert!(normalize_coords(&coords(&[f64::INFINITY, 0.], 2)).is_err());
    }

    #[test]
    fn random_cloud_hits_unit_box_exactly() {
        let mut rng = Rng::new(11);
        let pts: Vec<f64> = (0..300).map(|_| rng.uniform_in(-7.0, 13.0)).collect();
        let out = normalize_coords(&coords(&pts, 3)).unwrap();
        for a in 0..3 {
            let col: Vec<f64> = (0..100).map(|i| out.data()[i * 3 + a]).collect();
            assert!(col.iter().all(|v| (0.0..=1.0).contains(v)));
            assert_eq!(col.iter().cloned().fold(f64::INFINITY, f64::min), 0.0);
            assert_eq!(col.iter().cloned().fold(f64::NEG_INFINITY, f64::max), 1.0);
        }
    }

    #[test]
    fn embedding_values_and_width() {
        let emb = CoordinateEmbedding::new(4, EmbedMode::Both).unwrap();
        assert_eq!(emb.dim(2), 18);
        let zero = emb.embed(&coords(&[0., 0.], 2)).unwrap();
        // axis 0: sin x4, cos x4, axis 1: sin x4, cos x4, raw x2
        for axis in 0..2 {
            let base = axis * 8;
            assert!(zero.data()[base..base + 4].iter().all(|&v| v == 0.0));
            assert!(zero.data()[base + 4..base + 8].iter().all(|&v| v == 1.0));
        }
        let half = emb.embed(&coords(&[0.5, 0.5], 2)).unwrap();
        assert!((half.data()[0] - 1.0).abs() < 1e-15);
        assert!(half.data()[4].abs() < 1e-15);
        assert_eq!(&half.data()[16..], &[0.5, 0.5]);
        assert!(CoordinateEmbedding::new(0, EmbedMode::Both).is_err());
        assert_eq!(CoordinateEmbedding::new(3, EmbedMode::Raw).unwrap().dim(2), 2);
        assert_eq!(CoordinateEmbedding::new(3, EmbedMode::Sinusoidal).unwrap().dim(2), 12);
    }

    #[test]
    fn embedding_is_bounded() {
        let mut rng = Rng::new(5);
        let pts: Vec<f64> = (0..200).map(|_| rng.uniform()).collect();
        let emb = CoordinateEmbedding::new(8, EmbedMode::Both).unwrap();
        let e = emb.embed(&coords(&pts, 2)).unwrap();
        assert!(e.data().iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn bank_scales_are_powers_of_ten() {
        assert_eq!(GeometricEncoderBank::scale_factor(0), 1.0);
        assert_eq!(GeometricEncoderBank::scale_factor(1), 10.0);
    }

    fn bank(scales: usize) -> (GeometricEncoderBank, ParamStore<f64>) {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(3);
        let mut b = Builder {
            store: &mut store,
            rng: &mut rng,
        };
        let bank = GeometricEncoderBank::build(&mut b, "geo", 2, 8, scales);
        (bank, store)
    }

    #[test]
    fn bank_param_count_matches_build() {
        for s in 1..4 {
            let (_, store) = bank(s);
            assert_eq!(store.scalar_count(), GeometricEncoderBank::param_count(2, 8, s));
        }
    }

    #[test]
    fn zero_weights_give_zero_features() {
        let (bank, mut store) = bank(2);
        let ids: Vec<_> = store.iter().map(|(id, _, _)| id).collect();
        for id in ids {
            let shape = store.get(id).shape().to_vec();
            store.set(id, Tensor::zeros(&shape)).unwrap();
        }
        let tape = Tape::no_grad();
        let ctx = Forward::new(&tape, &store, false, 0);
        let g = tape.constant(coords(&[0.1, 0.2, 0.9, 0.4, 0.3, 0.3], 2));
        let out = bank.forward(&ctx, &g).unwrap();
        assert_eq!(out.shape(), &[3, 8]);
        assert!(out.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bank_is_pointwise() {
        let (bank, store) = bank(2);
        let tape = Tape::no_grad();
        let ctx = Forward::new(&tape, &store, false, 0);
        let pts = coords(&[0.1, 0.2, 0.9, 0.4, 0.3, 0.3, 0.7, 0.05], 2);
        let perm = [2usize, 0, 3, 1];
        let permuted = Tensor::from_fn(&[4, 2], |i| pts.data()[perm[i / 2] * 2 + i % 2]);
        let a = bank.forward(&ctx, &tape.constant(pts)).unwrap();
        let b = bank.forward(&ctx, &tape.constant(permuted)).unwrap();
        for (row, &src) in perm.iter().enumerate() {
            assert_eq!(b.value().row(row), a.value().row(src));
        }
    }
}
