//! The full operator network: a lifting encoder over inputs and coordinate
//! features, a stack of pre-norm residual blocks that re-inject the
//! geometry at every layer, and a decoding head.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::{DenseAttention, SpecGeoAttention};
use crate::engine::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{normalize_coords, CoordinateEmbedding, EmbedMode};
use crate::nn::{Builder, Forward, LayerNorm, LayerTrace, Mlp, ParamStore};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::taylor::{GateMode, PlainFfn, TaylorDecompFfn};

/// Hyperparameters of [`PgotModel`]. JSON field names are the serde names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of blocks `L`.
    pub layers: usize,
    /// Hidden width `C`.
    pub width: usize,
    /// Number of slices `M`.
    pub slices: usize,
    /// Number of geometric scales `S`.
    pub scales: usize,
    /// Attention heads `H`.
    pub heads: usize,
    /// Coordinate dimension `d`.
    pub coord_dim: usize,
    /// Input channels `d_a`.
    pub input_dim: usize,
    /// Output channels `d_u`.
    pub output_dim: usize,
    pub dropout: f64,
    /// Drop the multi-scale geometry from the slicing query.
    pub disable_sga: bool,
    /// Replace the gated two-expert feed-forward by a plain GELU perceptron.
    pub disable_tdf: bool,
    pub gate_mode: GateMode,
    /// Frequencies of the lifting encoder's coordinate features.
    pub embed_freqs: usize,
    /// Frequencies of the gate's coordinate features.
    pub gate_freqs: usize,
    /// Swap slice attention for full `N×N` attention (benchmark contrast only).
    pub dense_attention: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 2,
            width: 32,
            slices: 8,
            scales: 2,
            heads: 2,
            coord_dim: 2,
            input_dim: 1,
            output_dim: 1,
            dropout: 0.0,
            disable_sga: false,
            disable_tdf: false,
            gate_mode: GateMode::Learned,
            embed_freqs: 8,
            gate_freqs: 8,
            dense_attention: false,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Desk-scale defaults: L=2, C=32, M=8, S=2, H=2.
    pub fn desk() -> Self {
        Self::default()
    }

    /// Reference scale: L=8, C=128, M=64, S=2, H=8.
    pub fn paper_scale() -> Self {
        ModelConfig {
            layers: 8,
            width: 128,
            slices: 64,
            scales: 2,
            heads: 8,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.layers < 1 {
            return fail(format!("layers must be >= 1, got {}", self.layers));
        }
        if self.width < 1 || self.heads < 1 || self.width % self.heads != 0 {
            return fail(format!(
                "width {} must be a positive multiple of heads {}",
                self.width, self.heads
            ));
        }
        if self.slices < 2 {
            return fail(format!("slices must be >= 2, got {}", self.slices));
        }
        if self.scales < 1 {
            return fail(format!("scales must be >= 1, got {}", self.scales));
        }
        if self.coord_dim < 1 || self.input_dim < 1 || self.output_dim < 1 {
            return fail("coord_dim, input_dim and output_dim must be >= 1".into());
        }
        if self.embed_freqs < 1 || self.gate_freqs < 1 {
            return fail("embed_freqs and gate_freqs must be >= 1".into());
        }
        if self.embed_freqs > 30 || self.gate_freqs > 30 {
            return fail("embed_freqs and gate_freqs must be <= 30".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        Ok(())
    }

    pub fn input_embedding(&self) -> CoordinateEmbedding {
        CoordinateEmbedding {
            freqs: self.embed_freqs,
            mode: EmbedMode::Both,
        }
    }

    pub fn gate_embedding(&self) -> CoordinateEmbedding {
        CoordinateEmbedding {
            freqs: self.gate_freqs,
            mode: EmbedMode::Both,
        }
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&json);
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Exact number of learnable scalars, computed without building the model.
    pub fn param_count(&self) -> Result<usize> {
        self.validate()?;
        let c = self.width;
        let lift_in = self.input_dim + self.input_embedding().dim(self.coord_dim);
        let lift = Mlp::param_count(lift_in, c, c, true);
        let mixer = if self.dense_attention {
            DenseAttention::param_count(c)
        } else {
            SpecGeoAttention::param_count(self.coord_dim, c, self.slices, self.scales, !self.disable_sga)
        };
        let ffn = if self.disable_tdf {
            PlainFfn::param_count(c)
        } else {
            TaylorDecompFfn::param_count(c, self.gate_embedding().dim(self.coord_dim))
        };
        let block = 4 * c + mixer + ffn;
        let decoder = Mlp::param_count(c, c, self.output_dim, true);
        Ok(lift + self.layers * block + decoder)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Mixer {
    SpecGeo(SpecGeoAttention),
    Dense(DenseAttention),
}

#[derive(Debug, Clone, PartialEq)]
pub enum FeedForward {
    Taylor(TaylorDecompFfn),
    Plain(PlainFfn),
}

/// One pre-norm residual layer: attention then feed-forward.
#[derive(Debug, Clone, PartialEq)]
pub struct PhysGeoBlock {
    pub norm_attn: LayerNorm,
    pub mixer: Mixer,
    pub norm_ffn: LayerNorm,
    pub ffn: FeedForward,
}

impl PhysGeoBlock {
    fn build<T: Scalar>(b: &mut Builder<'_, T>, name: &str, cfg: &ModelConfig) -> Self {
        let c = cfg.width;
        let norm_attn = b.layer_norm(&format!("{name}.norm_attn"), c);
        let mixer = if cfg.dense_attention {
            Mixer::Dense(DenseAttention::build(b, &format!("{name}.attn"), c, cfg.heads))
        } else {
            Mixer::SpecGeo(SpecGeoAttention::build(
                b,
                &format!("{name}.attn"),
                cfg.coord_dim,
                c,
                cfg.slices,
                cfg.heads,
                cfg.scales,
                !cfg.disable_sga,
            ))
        };
        let norm_ffn = b.layer_norm(&format!("{name}.norm_ffn"), c);
        let ffn = if cfg.disable_tdf {
            FeedForward::Plain(PlainFfn::build(b, &format!("{name}.ffn"), c))
        } else {
            FeedForward::Taylor(TaylorDecompFfn::build(
                b,
                &format!("{name}.ffn"),
                c,
                cfg.gate_embedding().dim(cfg.coord_dim),
                cfg.dropout,
                cfg.gate_mode,
            ))
        };
        PhysGeoBlock {
            norm_attn,
            mixer,
            norm_ffn,
            ffn,
        }
    }

    /// `X̂ = X + Attn(LN(X); G)`, then `X̂ + FFN(LN(X̂); G)`.
    ///
    /// `coords` are the normalized coordinates, `gate_features` their gate
    /// embedding (unused by the plain feed-forward).
    pub fn forward<'t, T: Scalar>(
        &self,
        ctx: &Forward<'t, T>,
        layer: usize,
        x: &Var<'t, T>,
        coords: &Var<'t, T>,
        gate_features: &Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let normed = self.norm_attn.forward(ctx, x)?;
        let mixed = match &self.mixer {
            Mixer::SpecGeo(attn) => attn.forward(ctx, layer, &normed, coords)?,
            Mixer::Dense(attn) => attn.forward(ctx, &normed)?,
        };
        let hidden = x.add(&mixed)?;
        let normed = self.norm_ffn.forward(ctx, &hidden)?;
        let ff = match &self.ffn {
            FeedForward::Taylor(ffn) => ffn.forward(ctx, layer, &normed, gate_features)?,
            FeedForward::Plain(ffn) => ffn.forward(ctx, &normed)?,
        };
        hidden.add(&ff)
    }
}

/// Parameter-free layout of the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    pub lift: Mlp,
    pub blocks: Vec<PhysGeoBlock>,
    pub decoder: Mlp,
}

impl Architecture {
    fn build<T: Scalar>(b: &mut Builder<'_, T>, cfg: &ModelConfig) -> Self {
        let c = cfg.width;
        let lift_in = cfg.input_dim + cfg.input_embedding().dim(cfg.coord_dim);
        let lift = b.mlp("lift", lift_in, c, c, true);
        let blocks = (0..cfg.layers)
            .map(|l| PhysGeoBlock::build(b, &format!("blocks.{l}"), cfg))
            .collect();
        let decoder = b.mlp("decoder", c, c, cfg.output_dim, true);
        Architecture {
            lift,
            blocks,
            decoder,
        }
    }
}

/// Geometry features shared by every block of one forward pass.
pub struct GeometryInputs<T: Scalar> {
    pub normalized: Tensor<T>,
    pub input_features: Tensor<T>,
    pub gate_features: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PgotModel<T: Scalar> {
    config: ModelConfig,
    params: ParamStore<T>,
    arch: Architecture,
}

impl<T: Scalar> PgotModel<T> {
    /// Builds and initializes from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = Rng::new(config.seed);
        let arch = Architecture::build(
            &mut Builder {
                store: &mut params,
                rng: &mut rng,
            },
            &config,
        );
        Ok(PgotModel {
            config,
            params,
            arch,
        })
    }

    /// Wraps existing parameter values; names and shapes must match what
    /// `config` builds.
    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        let fresh = Self::new(config)?;
        if fresh.params.len() != params.len() {
            return Err(Error::Config(format!(
                "parameter count mismatch: config builds {} tensors, got {}",
                fresh.params.len(),
                params.len()
            )));
        }
        for ((_, name_a, a), (_, name_b, b)) in fresh.params.iter().zip(params.iter()) {
            if name_a != name_b || a.shape() != b.shape() {
                return Err(Error::Config(format!(
                    "parameter {name_b} {:?} does not match expected {name_a} {:?}",
                    b.shape(),
                    a.shape()
                )));
            }
        }
        Ok(PgotModel {
            config: fresh.config,
            params,
            arch: fresh.arch,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn param_count(&self) -> usize {
        self.params.scalar_count()
    }

    pub fn cast<U: Scalar>(&self) -> PgotModel<U> {
        PgotModel {
            config: self.config.clone(),
            params: self.params.cast(),
            arch: self.arch.clone(),
        }
    }

    /// Validates shapes against the config and computes coordinate features.
    pub fn geometry(&self, coords: &Tensor<T>) -> Result<GeometryInputs<T>> {
        if coords.rank() != 2 || coords.shape()[1] != self.config.coord_dim {
            return Err(Error::Config(format!(
                "coords shape {:?} does not match coord_dim {}",
                coords.shape(),
                self.config.coord_dim
            )));
        }
        let normalized = normalize_coords(coords)?;
        let input_features = self.config.input_embedding().embed(&normalized)?;
        let gate_features = self.config.gate_embedding().embed(&normalized)?;
        Ok(GeometryInputs {
            normalized,
            input_features,
            gate_features,
        })
    }

    /// `X⁰ = P_θ([a ; E_pos(G)])`.
    pub fn lift<'t>(&self, ctx: &Forward<'t, T>, input: &Var<'t, T>, geo: &GeometryInputs<T>) -> Result<Var<'t, T>> {
        self.check_input(input.shape(), geo.normalized.shape()[0])?;
        let features = ctx.constant(geo.input_features.clone());
        let joined = Var::concat(&[input, &features], 1)?;
        self.arch.lift.forward(ctx, &joined)
    }

    fn check_input(&self, shape: &[usize], n: usize) -> Result<()> {
        if shape.len() != 2 || shape[0] != n || shape[1] != self.config.input_dim {
            return Err(Error::Config(format!(
                "input shape {shape:?} does not match N={n}, input_dim={}",
                self.config.input_dim
            )));
        }
        Ok(())
    }

    /// Full forward pass to `N×d_u` on the given context.
    pub fn forward<'t>(&self, ctx: &Forward<'t, T>, coords: &Tensor<T>, input: &Var<'t, T>) -> Result<Var<'t, T>> {
        let geo = self.geometry(coords)?;
        let mut x = self.lift(ctx, input, &geo)?;
        ensure_finite(&x, 0)?;
        let normalized = ctx.constant(geo.normalized.clone());
        let gate_features = ctx.constant(geo.gate_features.clone());
        for (l, block) in self.arch.blocks.iter().enumerate() {
            x = block.forward(ctx, l, &x, &normalized, &gate_features)?;
            ensure_finite(&x, l + 1)?;
        }
        let out = self.arch.decoder.forward(ctx, &x)?;
        ensure_finite(&out, self.arch.blocks.len() + 1)?;
        Ok(out)
    }

    /// Deterministic inference (dropout off, nothing recorded).
    pub fn predict(&self, coords: &Tensor<T>, input: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::no_grad();
        let ctx = Forward::new(&tape, &self.params, false, 0);
        let out = self.forward(&ctx, coords, &tape.constant(input.clone()))?;
        Ok(out.value().clone())
    }

    /// Inference that also returns per-block assignment matrices and gate values.
    pub fn predict_with_traces(
        &self,
        coords: &Tensor<T>,
        input: &Tensor<T>,
    ) -> Result<(Tensor<T>, Vec<LayerTrace<T>>)> {
        let tape = Tape::no_grad();
        let ctx = Forward::new(&tape, &self.params, false, 0).with_traces();
        let out = self.forward(&ctx, coords, &tape.constant(input.clone()))?;
        let mut traces = ctx.take_traces();
        traces.resize_with(self.arch.blocks.len(), LayerTrace::default);
        Ok((out.value().clone(), traces))
    }
}

/// Layer index convention: 0 is the lifting encoder, `1..=L` the blocks,
/// `L+1` the decoder.
fn ensure_finite<T: Scalar>(x: &Var<'_, T>, layer: usize) -> Result<()> {
    if x.value().is_finite() {
        Ok(())
    } else {
        Err(Error::Numerical {
            layer: Some(layer),
            message: "non-finite activation".into(),
        })
    }
}

pub type PgotModel32 = PgotModel<f32>;
pub type PgotModel64 = PgotModel<f64>;

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            layers: 1,
            width: 8,
            slices: 3,
            heads: 2,
            embed_freqs: 2,
            gate_freqs: 2,
            ..ModelConfig::default()
        }
    }

    fn inputs(n: usize, seed: u64) -> (Tensor<f64>, Tensor<f64>) {
        let mut rng = Rng::new(seed);
        let coords = Tensor::from_fn(&[n, 2], |_| rng.uniform());
        let input = Tensor::from_fn(&[n, 1], |_| rng.uniform_in(-1., 1.));
        (coords, input)
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::desk().validate().is_ok());
        assert!(ModelConfig::paper_scale().validate().is_ok());
        for bad in [
            ModelConfig { layers: 0, ..small() },
            ModelConfig { heads: 3, ..small() },
            ModelConfig { slices: 1, ..small() },
            ModelConfig { scales: 0, ..small() },
            ModelConfig { dropout: 1.0, ..small() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))), "{bad:?}");
        }
    }

    #[test]
    fn param_count_formula_matches_built_model() {
        for cfg in [
            small(),
            ModelConfig::desk(),
            ModelConfig { disable_sga: true, ..small() },
            ModelConfig { disable_tdf: true, ..small() },
            ModelConfig { dense_attention: true, ..small() },
            ModelConfig { scales: 3, layers: 3, ..small() },
        ] {
            let model = PgotModel::<f32>::new(cfg.clone()).unwrap();
            assert_eq!(model.param_count(), cfg.param_count().unwrap(), "{cfg:?}");
        }
    }

    #[test]
    fn param_count_scaling() {
        let base = ModelConfig::desk();
        let c1 = base.param_count().unwrap() as f64;
        let c2 = ModelConfig { width: 64, ..base.clone() }.param_count().unwrap() as f64;
        let ratio = c2 / c1;
        assert!((3.0..4.2).contains(&ratio), "{ratio}");

        let one = ModelConfig { layers: 1, ..base.clone() }.param_count().unwrap();
        let two = ModelConfig { layers: 2, ..base.clone() }.param_count().unwrap();
        let three = ModelConfig { layers: 3, ..base.clone() }.param_count().unwrap();
        assert_eq!(two - one, three - two);
        assert!(ModelConfig { layers: 0, ..base.clone() }.param_count().is_err());

        let m8 = base.param_count().unwrap();
        let m16 = ModelConfig { slices: 16, ..base.clone() }.param_count().unwrap();
        assert_eq!(m16 - m8, base.layers * 8 * base.width);
    }

    #[test]
    fn predict_shape_and_determinism() {
        let model = PgotModel::<f64>::new(small()).unwrap();
        let (coords, input) = inputs(10, 1);
        let a = model.predict(&coords, &input).unwrap();
        let b = PgotModel::<f64>::new(small()).unwrap().predict(&coords, &input).unwrap();
        assert_eq!(a.shape(), &[10, 1]);
        assert!(a.bit_eq(&b));
    }

    #[test]
    fn mismatched_input_dim_is_config_error() {
        let model = PgotModel::<f32>::new(small()).unwrap();
        let coords = Tensor::zeros(&[4, 2]);
        assert!(matches!(model.predict(&coords, &Tensor::zeros(&[4, 2])), Err(Error::Config(_))));
        assert!(matches!(
            model.predict(&Tensor::zeros(&[4, 3]), &Tensor::zeros(&[4, 1])),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn nan_input_reports_layer() {
        let model = PgotModel::<f32>::new(small()).unwrap();
        let mut rng = Rng::new(2);
        let coords = Tensor::from_fn(&[4, 2], |_| rng.uniform() as f32);
        let input = Tensor::from_fn(&[4, 1], |i| if i == 2 { f32::NAN } else { 0.1 });
        match model.predict(&coords, &input) {
            Err(Error::Numerical { layer, .. }) => assert_eq!(layer, Some(0)),
            other => panic!("expected numerical failure, got {other:?}"),
        }
    }

    #[test]
    fn f64_and_f32_models_share_initialization() {
        let m64 = PgotModel::<f64>::new(small()).unwrap();
        let m32 = PgotModel::<f32>::new(small()).unwrap();
        assert_eq!(m64.cast::<f32>().params(), m32.params());
    }

    #[test]
    fn from_params_rejects_foreign_layout() {
        let a = PgotModel::<f32>::new(small()).unwrap();
        let other = ModelConfig { width: 16, ..small() };
        assert!(PgotModel::from_params(other, a.params().clone()).is_err());
        assert!(PgotModel::from_params(small(), a.params().clone()).is_ok());
    }

    #[test]
    fn traces_cover_every_block() {
        let cfg = ModelConfig { layers: 2, ..small() };
        let model = PgotModel::<f32>::new(cfg).unwrap();
        let (coords, input) = inputs(7, 3);
        let (_, traces) = model.predict_with_traces(&coords.cast(), &input.cast()).unwrap();
        assert_eq!(traces.len(), 2);
        for t in &traces {
            assert_eq!(t.assignment.as_ref().unwrap().shape(), &[7, 3]);
            assert_eq!(t.gate.as_ref().unwrap().shape(), &[7, 8]);
        }
    }

    #[test]
    fn block_with_zeroed_branch_outputs_is_identity() {
        let model = PgotModel::<f64>::new(small()).unwrap();
        let mut params = model.params().clone();
        let ids: Vec<_> = params
            .iter()
            .filter(|(_, n, _)| n.contains(".mhsa.o.") || n.contains(".lin.1.") || n.contains(".non.1."))
            .map(|(id, _, _)| id)
            .collect();
        assert_eq!(ids.len(), 4);
        for id in ids {
            let shape = params.get(id).shape().to_vec();
            params.set(id, Tensor::zeros(&shape)).unwrap();
        }
        let model = PgotModel::from_params(small(), params).unwrap();
        let (coords, input) = inputs(9, 4);
        let tape = Tape::no_grad();
        let ctx = Forward::new(&tape, model.params(), false, 0);
        let geo = model.geometry(&coords).unwrap();
        let x = model.lift(&ctx, &tape.constant(input), &geo).unwrap();
        let g = ctx.constant(geo.normalized.clone());
        let e = ctx.constant(geo.gate_features.clone());
        let y = model.architecture().blocks[0].forward(&ctx, 0, &x, &g, &e).unwrap();
        assert!(y.value().bit_eq(x.value()));
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        use crate::gradcheck::GradCheck;
        let cfg = ModelConfig {
            slices: 3,
            ..small()
        };
        let model = PgotModel::<f64>::new(cfg).unwrap();
        let (coords, input) = inputs(6, 8);
        let weights = Tensor::from_fn(&[6, 1], |i| 0.3 + 0.1 * i as f64);
        let mut tensors = model.params().values().to_vec();
        tensors.push(input);
        let report = GradCheck::default()
            .run(&tensors, |tape, vars| {
                let (params, input) = vars.split_at(vars.len() - 1);
                let ctx = Forward::from_vars(tape, params.to_vec(), false, 0);
                let out = model.forward(&ctx, &coords, &input[0])?;
                Ok(out.mul(&tape.constant(weights.clone()))?.sum())
            })
            .unwrap();
        assert!(report.passed(), "{:?}", &report.failures[..report.failures.len().min(5)]);
    }

    #[test]
    fn config_json_defaults_and_unknown_fields() {
        let cfg: ModelConfig = serde_json::from_str(r#"{"layers": 3}"#).unwrap();
        assert_eq!(cfg.layers, 3);
        assert_eq!(cfg.width, 32);
        assert!(serde_json::from_str::<ModelConfig>(r#"{"layerz": 3}"#).is_err());
        assert_ne!(cfg.hash(), ModelConfig::default().hash());
        assert_eq!(cfg.hash().len(), 16);
    }
}
