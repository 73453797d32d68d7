//! PGCK checkpoint files.
//!
//! Layout (all integers little-endian `u32` unless noted):
//!
//! ```text
//! "PGCK"            4 bytes magic
//! version           = 1
//! config_len        byte length of the JSON-encoded ModelConfig
//! config            UTF-8 JSON
//! param_count       number of tensors
//! per tensor, in build order:
//!   name_len, name  UTF-8
//!   rank, dims[rank]
//!   data            f32 × prod(dims), row-major
//! ```

use std::path::Path;

use crate::binfmt::{put_f32s, put_str, put_u32, Reader};
use crate::engine::Tensor;
use crate::error::{Error, FormatError, Result};
use crate::model::{ModelConfig, PgotModel};
use crate::nn::ParamStore;
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PGCK";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_checkpoint<T: Scalar>(model: &PgotModel<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION as usize);
    let config = serde_json::to_string(model.config()).expect("config serializes");
    put_str(&mut out, &config);
    put_u32(&mut out, model.params().len());
    for (_, name, value) in model.params().iter() {
        put_str(&mut out, name);
        put_u32(&mut out, value.rank());
        for &d in value.shape() {
            put_u32(&mut out, d);
        }
        put_f32s(&mut out, value.data().iter().map(|v| v.to_f32().unwrap_or(f32::NAN)));
    }
    out
}

pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<PgotModel<T>> {
    let mut r = Reader::new(bytes);
    r.magic(CHECKPOINT_MAGIC)?;
    r.version(CHECKPOINT_VERSION)?;
    let config: ModelConfig = serde_json::from_str(&r.string()?)
        .map_err(|e| FormatError::Malformed(format!("checkpoint config: {e}")))?;
    let count = r.len32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name = r.string()?;
        let rank = r.len32()?;
        let dims = (0..rank).map(|_| r.len32()).collect::<Result<Vec<_>, _>>()?;
        let len = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let Some(len) = len.filter(|&n| n > 0 && rank > 0) else {
            return Err(FormatError::Malformed(format!("parameter {name} has dims {dims:?}")).into());
        };
        let data = r.f32s(len)?.into_iter().map(|v| T::lit(f64::from(v))).collect();
        if store.find(&name).is_some() {
            return Err(FormatError::Malformed(format!("duplicate parameter {name}")).into());
        }
        store.add(name, Tensor::new(&dims, data)?);
    }
    r.finish()?;
    PgotModel::from_params(config, store).map_err(|e| match e {
        Error::Config(m) => FormatError::Malformed(format!("checkpoint does not match its config: {m}")).into(),
        other => other,
    })
}

pub fn save_checkpoint<T: Scalar>(model: &PgotModel<T>, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_checkpoint(model))?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<PgotModel<T>> {
    decode_checkpoint(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> PgotModel<f32> {
        PgotModel::new(ModelConfig {
            width: 8,
            slices: 3,
            layers: 1,
            seed: 4,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = model();
        let bytes = encode_checkpoint(&m);
        let back: PgotModel<f32> = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back.config(), m.config());
        for ((_, na, a), (_, nb, b)) in m.params().iter().zip(back.params().iter()) {
            assert_eq!(na, nb);
            assert!(a.bit_eq(b));
        }
        assert_eq!(encode_checkpoint(&back), bytes);
    }

    #[test]
    fn corrupted_headers_are_distinct_errors() {
        let bytes = encode_checkpoint(&model());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            decode_checkpoint::<f32>(&bad),
            Err(Error::Format(FormatError::BadMagic { .. }))
        ));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(
            decode_checkpoint::<f32>(&bad),
            Err(Error::Format(FormatError::UnsupportedVersion { found: 9, .. }))
        ));
        let cut = &bytes[..bytes.len() - 3];
        match decode_checkpoint::<f32>(cut) {
            Err(Error::Format(FormatError::Truncated { expected, actual })) => {
                assert_eq!(expected, bytes.len());
                assert_eq!(actual, cut.len());
            }
            other => panic!("{other:?}"),
        }
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(
            decode_checkpoint::<f32>(&long),
            Err(Error::Format(FormatError::Malformed(_)))
        ));
    }
}
