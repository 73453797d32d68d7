//! Feed-forward layer that blends a linear expert with a non-linear expert
//! through a per-point, per-channel gate computed from coordinates alone.

use serde::{Deserialize, Serialize};

use crate::engine::{Tensor, Var};
use crate::error::Result;
use crate::nn::{Builder, Forward, Linear, Mlp};
use crate::scalar::Scalar;

/// Hidden width of both experts and the gate, as a multiple of the model width.
pub const HIDDEN_RATIO: usize = 2;

/// Where the gate value comes from. The forced modes are debugging and
/// ablation hooks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    #[default]
    Learned,
    /// α ≡ 0: linear expert only.
    Zero,
    /// α ≡ 1: non-linear expert only.
    One,
    /// α ≡ 0.5: equal blend.
    Half,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaylorDecompFfn {
    pub lin_in: Linear,
    pub lin_out: Linear,
    pub non_in: Linear,
    pub non_out: Linear,
    pub gate: Mlp,
    pub dropout: f64,
    pub gate_mode: GateMode,
}

impl TaylorDecompFfn {
    pub fn build<T: Scalar>(
        b: &mut Builder<'_, T>,
        name: &str,
        width: usize,
        embed_dim: usize,
        dropout: f64,
        gate_mode: GateMode,
    ) -> Self {
        let hidden = HIDDEN_RATIO * width;
        TaylorDecompFfn {
            lin_in: b.linear(&format!("{name}.lin.0"), width, hidden, false),
            lin_out: b.linear(&format!("{name}.lin.1"), hidden, width, false),
            non_in: b.linear(&format!("{name}.non.0"), width, hidden, false),
            non_out: b.linear(&format!("{name}.non.1"), hidden, width, false),
            gate: b.mlp(&format!("{name}.gate"), embed_dim, hidden, width, true),
            dropout,
            gate_mode,
        }
    }

    pub fn param_count(width: usize, embed_dim: usize) -> usize {
        let hidden = HIDDEN_RATIO * width;
        4 * width * hidden + Mlp::param_count(embed_dim, hidden, width, true)
    }

    /// `W_l2 · Dropout(W_l1 · x)`.
    pub fn linear_expert<'t, T: Scalar>(&self, ctx: &Forward<'t, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let h = ctx.dropout(&self.lin_in.forward(ctx, x)?, self.dropout)?;
        self.lin_out.forward(ctx, &h)
    }

    /// `W_n2 · GELU(W_n1 · x)`.
    pub fn nonlinear_expert<'t, T: Scalar>(&self, ctx: &Forward<'t, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let h = self.non_in.forward(ctx, x)?.gelu();
        self.non_out.forward(ctx, &h)
    }

    /// `α = sigmoid(MLP_gate(PosEmbed(g)))`, shape `N×C`.
    pub fn spatial_gate<'t, T: Scalar>(&self, ctx: &Forward<'t, T>, embedded: &Var<'t, T>) -> Result<Var<'t, T>> {
        let n = embedded.shape()[0];
        let width = self.lin_out.fan_out;
        let forced = |v: f64| Ok(ctx.constant(Tensor::full(&[n, width], T::lit(v))));
        match self.gate_mode {
            GateMode::Learned => Ok(self.gate.forward(ctx, embedded)?.sigmoid()),
            GateMode::Zero => forced(0.0),
            GateMode::One => forced(1.0),
            GateMode::Half => forced(0.5),
        }
    }

    /// `(1 − α) ⊙ F_lin(x) + α ⊙ F_non(x)`.
    pub fn forward<'t, T: Scalar>(
        &self,
        ctx: &Forward<'t, T>,
        layer: usize,
        x: &Var<'t, T>,
        embedded: &Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let alpha = self.spatial_gate(ctx, embedded)?;
        ctx.trace(layer, |t| t.gate = Some(alpha.value().clone()));
        let lin = self.linear_expert(ctx, x)?;
        let non = self.nonlinear_expert(ctx, x)?;
        blend(&alpha, &lin, &non)
    }
}

/// `(1 − α) ⊙ low + α ⊙ high`; exact at α ∈ {0, 1}.
pub fn blend<'t, T: Scalar>(alpha: &Var<'t, T>, low: &Var<'t, T>, high: &Var<'t, T>) -> Result<Var<'t, T>> {
    alpha.rsub_scalar(1.0).mul(low)?.add(&alpha.mul(high)?)
}

/// Ordinary two-layer GELU feed-forward (the layer without the Taylor split).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlainFfn {
    pub mlp: Mlp,
}

impl PlainFfn {
    pub fn build<T: Scalar>(b: &mut Builder<'_, T>, name: &str, width: usize) -> Self {
        PlainFfn {
            mlp: b.mlp(name, width, HIDDEN_RATIO * width, width, true),
        }
    }

    pub fn param_count(width: usize) -> usize {
        Mlp::param_count(width, HIDDEN_RATIO * width, width, true)
    }

    pub fn forward<'t, T: Scalar>(&self, ctx: &Forward<'t, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.mlp.forward(ctx, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::Tape;
    use crate::nn::ParamStore;
    use crate::rng::Rng;

    fn setup(mode: GateMode) -> (TaylorDecompFfn, ParamStore<f64>) {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(21);
        let ffn = TaylorDecompFfn::build(
            &mut Builder {
                store: &mut store,
                rng: &mut rng,
            },
            "ffn",
            4,
            6,
            0.0,
            mode,
        );
        (ffn, store)
    }

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = Rng::new(seed);
        Tensor::from_fn(shape, |_| rng.uniform_in(-1., 1.))
    }

    #[test]
    fn experts_preserve_zero() {
        let (ffn, store) = setup(GateMode::Learned);
        let tape = Tape::no_grad();
        let ctx = Forward::new(&tape, &store, false, 0);
        let zero = tape.constant(Tensor::zeros(&[3, 4]));
        assert!(ffn.linear_expert(&ctx, &zero).unwrap().value().data().iter().all(|&v| v == 0.0));
        assert!(ffn.nonlinear_expert(&ctx, &zero).unwrap().value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_expert_is_additive_and_nonlinear_is_not() {
        let (ffn, store) = setup(GateMode::Learned);
        let tape = Tape::no_grad();
        let ctx = Forward::new(&tape, &store, false, 0);
        let x = tape.constant(random(&[5, 4], 1).map(|v| 3.0 * v));
        let y = tape.constant(random(&[5, 4], 2).map(|v| 3.0 * v));
        let xy = x.add(&y).unwrap();
        let f = |v: &Var<'_, f64>| ffn.linear_expert(&ctx, v).unwrap().value().clone();
        let sum = f(&x).zip_map(&f(&y), |a, b| a + b).unwrap();
        assert!(f(&xy).max_abs_diff(&sum).unwrap() < 1e-12);
        let g = |v: &Var<'_, f64>| ffn.nonlinear_expert(&ctx, v).unwrap().value().clone();
        let sum = g(&x).zip_map(&g(&y), |a, b| a + b).unwrap();
        let gap = g(&xy).zip_map(&sum, |a, b| (a - b) * (a - b)).unwrap().sum_all().sqrt();
        assert!(gap > 1e-3, "{gap}");
    }

    #[test]
    fn zeroed_gate_is_half_and_big_bias_saturates() {
        let (ffn, mut store) = setup(GateMode::Learned);
        for id in [ffn.gate.first.weight, ffn.gate.second.weight, ffn.gate.first.bias.unwrap()] {
            let shape = store.get(id).shape().to_vec();
            store.set(id, Tensor::zeros(&shape)).unwrap();
        }
        let out_bias = ffn.gate.second.bias.unwrap();
        store.set(out_bias, Tensor::zeros(&[4])).unwrap();
        let tape = Tape::no_grad();
        let emb = tape.constant(random(&[3, 6], 5));
        {
            let ctx = Forward::new(&tape, &store, false, 0);
            let a = ffn.spatial_gate(&ctx, &emb).unwrap();
            assert!(a.value().data().iter().all(|&v| v == 0.5));
        }
        store.set(out_bias, Tensor::full(&[4], 20.0)).unwrap();
        let ctx = Forward::new(&tape, &store, false, 0);
        let a = ffn.spatial_gate(&ctx, &emb).unwrap();
        assert!(a.value().data().iter().all(|&v| v > 0.999));
    }

    #[test]
    fn forced_gates_select_experts() {
        let x = random(&[4, 4], 9);
        let emb = random(&[4, 6], 10);
        let run = |mode| {
            let (ffn, store) = setup(mode);
            let tape = Tape::no_grad();
            let ctx = Forward::new(&tape, &store, false, 0);
            let xv = tape.constant(x.clone());
            let out = ffn.forward(&ctx, 0, &xv, &tape.constant(emb.clone())).unwrap();
            let lin = ffn.linear_expert(&ctx, &xv).unwrap();
            let non = ffn.nonlinear_expert(&ctx, &xv).unwrap();
            (out.value().clone(), lin.value().clone(), non.value().clone())
        };
        let (out, lin, _) = run(GateMode::Zero);
        assert!(out.bit_eq(&lin));
        let (out, _, non) = run(GateMode::One);
        assert!(out.bit_eq(&non));
        let (out, lin, non) = run(GateMode::Half);
        let mean = lin.zip_map(&non, |a, b| (a + b) / 2.0).unwrap();
        assert!(out.max_abs_diff(&mean).unwrap() < 1e-6);
    }

    #[test]
    fn plain_ffn_param_count() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = Rng::new(0);
        PlainFfn::build(
            &mut Builder {
                store: &mut store,
                rng: &mut rng,
            },
            "p",
            8,
        );
        assert_eq!(store.scalar_count(), PlainFfn::param_count(8));
    }
}
