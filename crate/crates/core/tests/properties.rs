mod common;

use pgot::checkpoint::{decode_checkpoint, encode_checkpoint};
use pgot::data::{ChannelStats, Sample, Task};
use pgot::engine::alloc;
use pgot::geometry::{normalize_coords, CoordinateEmbedding, EmbedMode};
use pgot::model::{ModelConfig, PgotModel};
use pgot::taylor::blend;
use pgot::train::{evaluate_prepared, prepare, train, TrainConfig};
use pgot::{Error, FormatError, Rng, Tape, Tensor};
use proptest::prelude::*;

use common::*;

fn assert_check(result: Result<(), String>) -> Result<(), TestCaseError> {
    result.map_err(TestCaseError::fail)
}

fn finite_matrix(max_rows: usize, max_cols: usize, magnitude: f64) -> impl Strategy<Value = Tensor<f64>> {
    (1..=max_rows, 1..=max_cols).prop_flat_map(move |(r, c)| {
        prop::collection::vec(-magnitude..magnitude, r * c).prop_map(move |v| Tensor::new(&[r, c], v).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 100, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn assignment_rows_sum_to_one((seed, n) in case_strategy()) {
        assert_check(assignment_rows_are_stochastic(seed, n))?;
    }

    #[test]
    fn model_is_permutation_equivariant((seed, n) in case_strategy()) {
        assert_check(permutation_equivariance(seed, n))?;
    }

    #[test]
    fn gate_stays_inside_unit_interval((seed, n) in case_strategy()) {
        assert_check(gate_in_open_unit_interval(seed, n))?;
    }

    #[test]
    fn gate_ignores_the_input_field((seed, n) in case_strategy()) {
        assert_check(gate_depends_only_on_coordinates(seed, n))?;
    }

    #[test]
    fn forced_gate_selects_one_expert((seed, n) in case_strategy()) {
        assert_check(expert_forcing(seed, n))?;
    }

    #[test]
    fn slice_then_deslice_keeps_constants((seed, n) in case_strategy()) {
        assert_check(constant_field_is_preserved(seed, n))?;
    }

    #[test]
    fn softmax_rows_sum_to_one(x in finite_matrix(6, 9, 1e4)) {
        let tape = Tape::no_grad();
        let y = tape.constant(x.cast::<f32>()).softmax(1).unwrap();
        for i in 0..x.shape()[0] {
            let s: f64 = y.value().row(i).iter().map(|&v| f64::from(v)).sum();
            prop_assert!((s - 1.0).abs() < 1e-5, "row {i} sums to {s}");
        }
    }

    #[test]
    fn position_features_are_bounded(x in finite_matrix(8, 3, 1e3), k in 1usize..12) {
        let g = normalize_coords(&x).unwrap();
        for mode in [EmbedMode::Sinusoidal, EmbedMode::Raw, EmbedMode::Both] {
            let emb = CoordinateEmbedding::new(k, mode).unwrap();
            let e = emb.embed(&g).unwrap();
            prop_assert_eq!(e.shape(), &[x.shape()[0], emb.dim(x.shape()[1])][..]);
            prop_assert!(e.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn blend_lies_between_experts(
        (alpha, low, high) in (1usize..5, 1usize..5).prop_flat_map(|(r, c)| {
            let m = move |lo: f64, hi: f64| prop::collection::vec(lo..hi, r * c)
                .prop_map(move |v| Tensor::new(&[r, c], v).unwrap());
            (m(0.0, 1.0), m(-5.0, 5.0), m(-5.0, 5.0))
        })
    ) {
        let tape = Tape::no_grad();
        let out = blend(&tape.constant(alpha), &tape.constant(low.clone()), &tape.constant(high.clone())).unwrap();
        for ((&o, &l), &h) in out.value().data().iter().zip(low.data()).zip(high.data()) {
            let (lo, hi) = (l.min(h), l.max(h));
            prop_assert!(o >= lo - 1e-12 && o <= hi + 1e-12, "{o} outside [{lo}, {hi}]");
        }
    }

    #[test]
    fn gate_channels_are_independent(seed in any::<u64>(), c in 0usize..4, delta in 0.01f64..0.5) {
        let mut rng = Rng::new(seed);
        let mut make = || Tensor::from_fn(&[5, 4], |_| rng.uniform_in(0.0, 1.0));
        let (alpha, low, high) = (make(), make(), make());
        let mut bumped = alpha.to_vec();
        for i in 0..5 {
            bumped[i * 4 + c] = (bumped[i * 4 + c] + delta).min(1.0);
        }
        let bumped = Tensor::new(&[5, 4], bumped).unwrap();
        let tape = Tape::no_grad();
        let (l, h) = (tape.constant(low), tape.constant(high));
        let a = blend(&tape.constant(alpha), &l, &h).unwrap();
        let b = blend(&tape.constant(bumped), &l, &h).unwrap();
        for (idx, (x, y)) in a.value().data().iter().zip(b.value().data()).enumerate() {
            if idx % 4 != c {
                prop_assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn normalization_round_trips(values in prop::collection::vec(-1e3f32..1e3, 8..64), channels in 1usize..4) {
        let rows = values.len() / channels;
        let t = Tensor::new(&[rows, channels], values[..rows * channels].to_vec()).unwrap();
        let stats = ChannelStats::from_tensors([&t]);
        let z = stats.normalize::<f64>(&t).unwrap();
        let back = stats.denormalize(&z).unwrap();
        for (&a, &b) in t.data().iter().zip(back.data()) {
            prop_assert!(f64::from((a - b).abs()) <= 1e-6 * f64::from(a.abs()).max(1.0), "{a} -> {b}");
        }
    }
}

fn sample_bytes() -> Vec<u8> {
    Task::Poisson2d.generate(8, 3).unwrap().encode()
}

fn checkpoint_bytes() -> Vec<u8> {
    let cfg = ModelConfig {
        layers: 1,
        width: 4,
        slices: 2,
        heads: 1,
        embed_freqs: 1,
        gate_freqs: 1,
        ..ModelConfig::default()
    };
    encode_checkpoint(&PgotModel::<f32>::new(cfg).unwrap())
}

fn is_documented_format_error(e: &Error) -> bool {
    matches!(e, Error::Format(_))
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 200, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn truncated_files_report_truncation(cut in 0.0f64..1.0) {
        for bytes in [sample_bytes(), checkpoint_bytes()] {
            let len = (cut * bytes.len() as f64) as usize;
            let err = if bytes.starts_with(b"PGDS") {
                Sample::decode(&bytes[..len]).err()
            } else {
                decode_checkpoint::<f32>(&bytes[..len]).err()
            };
            match err {
                Some(Error::Format(FormatError::Truncated { expected, actual })) => {
                    prop_assert_eq!(actual, len);
                    prop_assert!(expected > len);
                }
                other => prop_assert!(false, "prefix of {len} bytes gave {other:?}"),
            }
        }
    }

    #[test]
    fn bad_magic_is_reported(byte in 0usize..4, value in any::<u8>()) {
        for mut bytes in [sample_bytes(), checkpoint_bytes()] {
            prop_assume!(bytes[byte] != value);
            let pgds = bytes.starts_with(b"PGDS");
            bytes[byte] = value;
            let err = if pgds { Sample::decode(&bytes).err() } else { decode_checkpoint::<f32>(&bytes).err() };
            prop_assert!(matches!(err, Some(Error::Format(FormatError::BadMagic { .. }))), "{err:?}");
        }
    }

    #[test]
    fn corrupted_bytes_never_panic(flips in prop::collection::vec((any::<prop::sample::Index>(), any::<u8>()), 1..8)) {
        for mut bytes in [sample_bytes(), checkpoint_bytes()] {
            let pgds = bytes.starts_with(b"PGDS");
            for (at, v) in &flips {
                let i = at.index(bytes.len());
                bytes[i] = *v;
            }
            let result = if pgds {
                Sample::decode(&bytes).map(|_| ())
            } else {
                decode_checkpoint::<f32>(&bytes).map(|_| ())
            };
            if let Err(e) = result {
                prop_assert!(is_documented_format_error(&e) || matches!(e, Error::Data(_)), "{e:?}");
            }
        }
    }
}

#[test]
fn identical_seeds_give_identical_parameters_at_step_100() {
    let samples = pgot::data::generate(Task::Poisson2d, 8, 11, 0, 3).unwrap();
    let stats = pgot::data::NormStats::from_samples(&samples);
    let data = prepare::<f32>(&samples, &stats).unwrap();
    let cfg = small_config(3);
    let tc = TrainConfig {
        steps: 100,
        batch_size: 2,
        eval_every: 50,
        seed: 9,
        ..TrainConfig::default()
    };
    let run = || train(PgotModel::<f32>::new(cfg.clone()).unwrap(), &data, &data, &tc).map_err(|f| f.error).unwrap();
    let (a, b) = (run(), run());
    for (x, y) in a.model.params().values().iter().zip(b.model.params().values()) {
        assert!(x.bit_eq(y));
    }
    assert_eq!(a.report.deterministic(), b.report.deterministic());
    let own = evaluate_prepared(&a.model, &data).unwrap();
    assert!((own.rel_l2 - a.report.final_train_rel_l2).abs() < 1e-6);
}

#[test]
fn no_quadratic_intermediate_in_forward() {
    let cfg = ModelConfig::desk();
    let model = PgotModel::<f32>::new(cfg.clone()).unwrap();
    let mut peaks = Vec::new();
    for n in [1024usize, 2048] {
        let (coords, input) = random_inputs(&cfg, n, 1);
        let (out, mem) = alloc::measure(|| model.predict(&coords, &input));
        out.unwrap();
        assert!(mem.peak < n * n * std::mem::size_of::<f32>(), "n={n}: peak {} bytes", mem.peak);
        peaks.push(mem.peak as f64);
    }
    let ratio = peaks[1] / peaks[0];
    assert!((1.7..=2.3).contains(&ratio), "{ratio}");
}

#[test]
fn dead_slices_do_not_produce_nan() {
    let cfg = small_config(0);
    let mut model = PgotModel::<f32>::new(cfg.clone()).unwrap();
    // One overwhelming prototype starves every other slice.
    let protos = Tensor::from_fn(&[cfg.slices, cfg.width], |i| if i < cfg.width { 1e3 } else { -1e3 });
    model.params_mut().set_by_name("blocks.0.attn.prototypes", protos).unwrap();
    let (coords, input) = random_inputs(&cfg, 16, 2);
    let out = model.predict(&coords, &input).unwrap();
    assert!(out.is_finite());
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let bytes = checkpoint_bytes();
    let model = decode_checkpoint::<f32>(&bytes).unwrap();
    assert_eq!(encode_checkpoint(&model), bytes);
}
