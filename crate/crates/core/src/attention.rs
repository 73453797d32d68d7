//! Geometry-aware slice attention.
//!
//! Mesh points are softly assigned to `M` learnable slice prototypes using
//! queries that carry multi-scale geometric features, pooled into `M`
//! latent tokens, mixed by multi-head self-attention, and scattered back
//! to the points through the same assignment. Cost is `O(N·M)`; no `N×N`
//! intermediate is ever formed.

use crate::engine::{Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::GeometricEncoderBank;
use crate::nn::{Builder, Forward, Linear, ParamId};
use crate::scalar::Scalar;

/// Floor below which a slice's total assignment mass counts as dead.
pub const SLICE_EPS: f64 = 1e-8;

/// Initial effective temperature.
pub const TAU_INIT: f64 = 0.5;

/// Raw (pre-softplus) temperature value giving `softplus(raw) = TAU_INIT`.
pub fn tau_raw_init() -> f64 {
    TAU_INIT.exp_m1().ln()
}

/// `X·W_x + Φ_geo`; without geometry this is the plain projection.
pub fn geometry_informed_query<'t, T: Scalar>(
    x: &Var<'t, T>,
    w_x: &Var<'t, T>,
    geometry: Option<&Var<'t, T>>,
) -> Result<Var<'t, T>> {
    let q = x.matmul(w_x)?;
    match geometry {
        Some(g) => {
            if g.shape() != q.shape() {
                return Err(Error::shape("geometry_informed_query", q.shape(), g.shape()));
            }
            q.add(g)
        }
        None => Ok(q),
    }
}

/// Row-wise softmax over `M` of `(X̃_q · w_j) / τ`. `tau` is the effective
/// (already positive) temperature as a one-element value.
pub fn compute_assignment<'t, T: Scalar>(
    query: &Var<'t, T>,
    prototypes: &Var<'t, T>,
    tau: &Var<'t, T>,
) -> Result<Var<'t, T>> {
    let logits = query.matmul(&prototypes.t()?)?;
    logits.div(tau)?.softmax(1)
}

/// Pools `N×C` point values into `M×C` tokens: each token is the
/// assignment-weighted mean of the values. Returns the tokens and the number
/// of dead slices, whose tokens are zero.
pub fn slice_tokens<'t, T: Scalar>(assignment: &Var<'t, T>, values: &Var<'t, T>) -> Result<(Var<'t, T>, usize)> {
    let n = assignment.shape()[0];
    let ones = assignment.tape().constant(Tensor::ones(&[n, 1]));
    let mass = assignment.point_pool(&ones)?;
    let dead = mass
        .value()
        .data()
        .iter()
        .filter(|&&m| m < T::lit(SLICE_EPS))
        .count();
    let pooled = assignment.point_pool(values)?;
    Ok((pooled.mul(&mass.safe_recip(SLICE_EPS))?, dead))
}

/// Scatters tokens back to points: `A · Z'`.
pub fn deslice<'t, T: Scalar>(assignment: &Var<'t, T>, tokens: &Var<'t, T>) -> Result<Var<'t, T>> {
    assignment.matmul(tokens)
}

/// Standard multi-head self-attention over a short token sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mhsa {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl Mhsa {
    pub fn build<T: Scalar>(b: &mut Builder<'_, T>, name: &str, width: usize, heads: usize) -> Self {
        Mhsa {
            query: b.linear(&format!("{name}.q"), width, width, true),
            key: b.linear(&format!("{name}.k"), width, width, true),
            value: b.linear(&format!("{name}.v"), width, width, true),
            out: b.linear(&format!("{name}.o"), width, width, true),
            heads,
        }
    }

    pub fn param_count(width: usize) -> usize {
        4 * Linear::param_count(width, width, true)
    }

    pub fn forward<'t, T: Scalar>(&self, ctx: &Forward<'t, T>, tokens: &Var<'t, T>) -> Result<Var<'t, T>> {
        multi_head_attention(ctx, self, tokens)
    }
}

/// `[L, C]` → `[H, L, C/H]`.
fn split_heads<'t, T: Scalar>(x: &Var<'t, T>, heads: usize) -> Result<Var<'t, T>> {
    let (len, width) = (x.shape()[0], x.shape()[1]);
    x.reshape(&[len, heads, width / heads])?.permute(&[1, 0, 2])
}

/// `[H, L, C/H]` → `[L, C]`.
fn merge_heads<'t, T: Scalar>(x: &Var<'t, T>) -> Result<Var<'t, T>> {
    let (heads, len, dh) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    x.permute(&[1, 0, 2])?.reshape(&[len, heads * dh])
}

/// Scaled dot-product attention with projections taken from `proj`. Used
/// both over latent tokens and, in the dense baseline, over all points.
fn multi_head_attention<'t, T: Scalar>(ctx: &Forward<'t, T>, proj: &Mhsa, x: &Var<'t, T>) -> Result<Var<'t, T>> {
    let width = x.shape()[1];
    if proj.heads == 0 || width % proj.heads != 0 {
        return Err(Error::Config(format!(
            "width {width} is not divisible by {} heads",
            proj.heads
        )));
    }
    let dh = width / proj.heads;
    let q = split_heads(&proj.query.forward(ctx, x)?, proj.heads)?.scale(1.0 / (dh as f64).sqrt());
    let k = split_heads(&proj.key.forward(ctx, x)?, proj.heads)?;
    let v = split_heads(&proj.value.forward(ctx, x)?, proj.heads)?;
    let weights = q.matmul(&k.t()?)?.softmax(2)?;
    let mixed = merge_heads(&weights.matmul(&v)?)?;
    proj.out.forward(ctx, &mixed)
}

/// The slice-attention mixer of one block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpecGeoAttention {
    pub w_x: ParamId,
    pub w_f: ParamId,
    pub prototypes: ParamId,
    /// Unconstrained temperature; the effective value is `softplus(tau_raw)`.
    pub tau_raw: ParamId,
    pub mhsa: Mhsa,
    /// `None` disables geometry injection (plain slice attention).
    pub geometry: Option<GeometricEncoderBank>,
    pub slices: usize,
}

impl SpecGeoAttention {
    #[allow(clippy::too_many_arguments)]
    pub fn build<T: Scalar>(
        b: &mut Builder<'_, T>,
        name: &str,
        d: usize,
        width: usize,
        slices: usize,
        heads: usize,
        scales: usize,
        with_geometry: bool,
    ) -> Self {
        let w_x = b.uniform(&format!("{name}.w_x"), &[width, width], width);
        let w_f = b.uniform(&format!("{name}.w_f"), &[width, width], width);
        let prototypes = b.uniform(&format!("{name}.prototypes"), &[slices, width], width);
        let tau_raw = b.constant(&format!("{name}.tau"), &[1], tau_raw_init());
        let mhsa = Mhsa::build(b, &format!("{name}.mhsa"), width, heads);
        let geometry =
            with_geometry.then(|| GeometricEncoderBank::build(b, &format!("{name}.geo"), d, width, scales));
        SpecGeoAttention {
            w_x,
            w_f,
            prototypes,
            tau_raw,
            mhsa,
            geometry,
            slices,
        }
    }

    pub fn param_count(d: usize, width: usize, slices: usize, scales: usize, with_geometry: bool) -> usize {
        2 * width * width
            + slices * width
            + 1
            + Mhsa::param_count(width)
            + if with_geometry {
                GeometricEncoderBank::param_count(d, width, scales)
            } else {
                0
            }
    }

    pub fn tau<'t, T: Scalar>(&self, ctx: &Forward<'t, T>) -> Var<'t, T> {
        ctx.param(self.tau_raw).softplus()
    }

    /// Assignment matrix for `x` (already layer-normed) at normalized coordinates.
    pub fn assignment<'t, T: Scalar>(
        &self,
        ctx: &Forward<'t, T>,
        x: &Var<'t, T>,
        coords: &Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let geo = match &self.geometry {
            Some(bank) => Some(bank.forward(ctx, coords)?),
            None => None,
        };
        let query = geometry_informed_query(x, ctx.param(self.w_x), geo.as_ref())?;
        compute_assignment(&query, ctx.param(self.prototypes), &self.tau(ctx))
    }

    pub fn forward<'t, T: Scalar>(
        &self,
        ctx: &Forward<'t, T>,
        layer: usize,
        x: &Var<'t, T>,
        coords: &Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let assignment = self.assignment(ctx, x, coords)?;
        let values = x.matmul(ctx.param(self.w_f))?;
        let (tokens, dead) = slice_tokens(&assignment, &values)?;
        ctx.note_dead_slices(dead);
        let mixed = self.mhsa.forward(ctx, &tokens)?;
        ctx.trace(layer, |t| t.assignment = Some(assignment.value().clone()));
        deslice(&assignment, &mixed)
    }
}

/// Full softmax attention over all `N` points. Quadratic in `N`; exists only
/// as the benchmark contrast to slice attention.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DenseAttention {
    pub proj: Mhsa,
}

impl DenseAttention {
    pub fn build<T: Scalar>(b: &mut Builder<'_, T>, name: &str, width: usize, heads: usize) -> Self {
        DenseAttention {
            proj: Mhsa::build(b, name, width, heads),
        }
    }

    pub fn param_count(width: usize) -> usize {
        Mhsa::param_count(width)
    }

    pub fn forward<'t, T: Scalar>(&self, ctx: &Forward<'t, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        multi_head_attention(ctx, &self.proj, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::Tape;
    use crate::nn::ParamStore;
    use crate::rng::Rng;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn tau_initializes_to_half() {
        let tape = Tape::<f64>::no_grad();
        let raw = tape.constant(Tensor::scalar(tau_raw_init()));
        assert!((raw.softplus().value().data()[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn query_without_geometry_is_projection() {
        let tape = Tape::<f64>::no_grad();
        let x = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let eye = tape.constant(Tensor::eye(2));
        let q = geometry_informed_query(&x, &eye, None).unwrap();
        assert_eq!(q.value(), x.value());
        let bad = tape.constant(Tensor::zeros(&[3, 2]));
        assert!(geometry_informed_query(&x, &eye, Some(&bad)).is_err());
    }

    #[test]
    fn identical_prototypes_give_uniform_rows() {
        let tape = Tape::<f64>::no_grad();
        let mut rng = Rng::new(1);
        let q = tape.constant(Tensor::from_fn(&[5, 3], |_| rng.uniform_in(-1., 1.)));
        let protos = tape.constant(Tensor::from_fn(&[4, 3], |i| [0.3, -0.2, 0.9][i % 3]));
        let tau = tape.constant(Tensor::scalar(0.7));
        let a = compute_assignment(&q, &protos, &tau).unwrap();
        for v in a.value().data() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn huge_temperature_flattens_rows() {
        let tape = Tape::<f64>::no_grad();
        let mut rng = Rng::new(2);
        let q = tape.constant(Tensor::from_fn(&[6, 3], |_| rng.uniform_in(-1., 1.)));
        let protos = tape.constant(Tensor::from_fn(&[3, 3], |_| rng.uniform_in(-1., 1.)));
        let tau = tape.constant(Tensor::scalar(1e6));
        let a = compute_assignment(&q, &protos, &tau).unwrap();
        for v in a.value().data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-3);
        }
    }

    #[test]
    fn hand_set_logits() {
        // Query rows picked so that X̃_q·protoᵀ = [[1,0],[0,1],[0,0]].
        let tape = Tape::<f64>::no_grad();
        let q = tape.constant(t(&[3, 2], &[1., 0., 0., 1., 0., 0.]));
        let protos = tape.constant(Tensor::eye(2));
        let tau = tape.constant(Tensor::scalar(1.0));
        let a = compute_assignment(&q, &protos, &tau).unwrap();
        let e = std::f64::consts::E;
        let hi = e / (e + 1.0);
        let lo = 1.0 / (e + 1.0);
        let expect = [hi, lo, lo, hi, 0.5, 0.5];
        for (got, want) in a.value().data().iter().zip(expect) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn single_slice_averages() {
        let tape = Tape::<f64>::no_grad();
        let a = tape.constant(t(&[2, 1], &[1., 1.]));
        let x = tape.constant(t(&[2, 2], &[1., 2., 3., 6.]));
        let (z, dead) = slice_tokens(&a, &x).unwrap();
        assert_eq!(dead, 0);
        assert_eq!(z.value().data(), &[2., 4.]);
    }

    #[test]
    fn one_hot_assignment_is_grouped_mean() {
        let tape = Tape::<f64>::no_grad();
        let mut rng = Rng::new(8);
        let (n, m, c) = (9, 3, 2);
        let groups: Vec<usize> = (0..n).map(|i| i % m).collect();
        let a = tape.constant(Tensor::from_fn(&[n, m], |i| {
            if groups[i / m] == i % m { 1.0 } else { 0.0 }
        }));
        let x = Tensor::from_fn(&[n, c], |_| rng.uniform_in(-1., 1.));
        let (z, _) = slice_tokens(&a, &tape.constant(x.clone())).unwrap();
        for j in 0..m {
            for ch in 0..c {
                let members: Vec<f64> = (0..n).filter(|&i| groups[i] == j).map(|i| x.at(&[i, ch])).collect();
                let mean = members.iter().sum::<f64>() / members.len() as f64;
                assert!((z.value().at(&[j, ch]) - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dead_slice_token_is_zero() {
        let tape = Tape::<f64>::no_grad();
        let a = tape.constant(t(&[2, 2], &[1., 0., 1., 0.]));
        let x = tape.constant(t(&[2, 1], &[3., 5.]));
        let (z, dead) = slice_tokens(&a, &x).unwrap();
        assert_eq!(dead, 1);
        assert_eq!(z.value().data(), &[4., 0.]);
    }

    #[test]
    fn deslice_broadcasts_single_token() {
        let tape = Tape::<f64>::no_grad();
        let a = tape.constant(Tensor::ones(&[3, 1]));
        let z = tape.constant(t(&[1, 2], &[7., -1.]));
        let x = deslice(&a, &z).unwrap();
        assert_eq!(x.value().data(), &[7., -1., 7., -1., 7., -1.]);
    }

    #[test]
    fn single_token_attention_is_value_chain() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = Rng::new(4);
        let mhsa = Mhsa::build(
            &mut Builder {
                store: &mut store,
                rng: &mut rng,
            },
            "m",
            4,
            2,
        );
        let tape = Tape::no_grad();
        let ctx = Forward::new(&tape, &store, false, 0);
        let z = tape.constant(t(&[1, 4], &[0.1, -0.4, 0.8, 0.2]));
        let out = mhsa.forward(&ctx, &z).unwrap();
        let chain = mhsa.out.forward(&ctx, &mhsa.value.forward(&ctx, &z).unwrap()).unwrap();
        assert!(out.value().max_abs_diff(chain.value()).unwrap() < 1e-15);
    }
}
