//! Synthetic operator-learning tasks and their on-disk format.
//!
//! A dataset directory holds one PGDS file per sample and one JSON manifest
//! per split (`train.json`, optionally `test.json`).
//!
//! PGDS layout (little-endian):
//!
//! ```text
//! "PGDS"        4 bytes magic
//! version       u32 = 1
//! N, d, d_a, d_u  u32 each
//! seed          u64
//! resolution    u32
//! task_len      u32, then task name as UTF-8
//! coords        f32 × N·d      row-major
//! input         f32 × N·d_a
//! target        f32 × N·d_u
//! ```

pub mod pointcloud;
pub mod poisson;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::binfmt::{put_f32s, put_str, put_u32, put_u64, Reader};
use crate::engine::Tensor;
use crate::error::{Error, FormatError, Result};
use crate::scalar::Scalar;

pub const DATASET_MAGIC: &[u8; 4] = b"PGDS";
pub const DATASET_VERSION: u32 = 1;
pub const MIN_POINTS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Poisson2d,
    PointcloudStress,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Poisson2d => "poisson2d",
            Task::PointcloudStress => "pointcloud_stress",
        }
    }

    /// `(d, d_a, d_u)`.
    pub fn dims(self) -> (usize, usize, usize) {
        match self {
            Task::Poisson2d => (2, 1, 1),
            Task::PointcloudStress => (2, 2, 1),
        }
    }

    /// `resolution` is the grid side for `poisson2d` and the point count
    /// for `pointcloud_stress`.
    pub fn generate(self, resolution: usize, seed: u64) -> Result<Sample> {
        match self {
            Task::Poisson2d => poisson::generate_sample(resolution, seed),
            Task::PointcloudStress => pointcloud::generate_sample(resolution, seed),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "poisson2d" => Ok(Task::Poisson2d),
            "pointcloud_stress" => Ok(Task::PointcloudStress),
            other => Err(Error::Config(format!(
                "unknown task {other:?} (expected poisson2d or pointcloud_stress)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleMeta {
    pub task: Task,
    pub seed: u64,
    pub resolution: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub coords: Tensor<f32>,
    pub input: Tensor<f32>,
    pub target: Tensor<f32>,
    pub meta: SampleMeta,
}

impl Sample {
    pub fn new(coords: Tensor<f32>, input: Tensor<f32>, target: Tensor<f32>, meta: SampleMeta) -> Result<Self> {
        let n = coords.shape()[0];
        for (field, t) in [("coords", &coords), ("input", &input), ("target", &target)] {
            if t.rank() != 2 || t.shape()[0] != n {
                return Err(Error::Data(format!("{field} has shape {:?}, expected [{n}, _]", t.shape())));
            }
            if !t.is_finite() {
                return Err(Error::Data(format!("{field} contains NaN or Inf")));
            }
        }
        if n < MIN_POINTS {
            return Err(Error::Data(format!("sample has {n} points, need at least {MIN_POINTS}")));
        }
        Ok(Sample {
            coords,
            input,
            target,
            meta,
        })
    }

    pub fn len(&self) -> usize {
        self.coords.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// `(d, d_a, d_u)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.coords.shape()[1], self.input.shape()[1], self.target.shape()[1])
    }

    pub fn encode(&self) -> Vec<u8> {
        let (d, da, du) = self.dims();
        let mut out = Vec::with_capacity(64 + 4 * self.len() * (d + da + du));
        out.extend_from_slice(DATASET_MAGIC);
        put_u32(&mut out, DATASET_VERSION as usize);
        for v in [self.len(), d, da, du] {
            put_u32(&mut out, v);
        }
        put_u64(&mut out, self.meta.seed);
        put_u32(&mut out, self.meta.resolution);
        put_str(&mut out, self.meta.task.name());
        for t in [&self.coords, &self.input, &self.target] {
            put_f32s(&mut out, t.data().iter().copied());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(DATASET_MAGIC)?;
        r.version(DATASET_VERSION)?;
        let n = r.len32()?;
        let d = r.len32()?;
        let da = r.len32()?;
        let du = r.len32()?;
        let seed = r.u64()?;
        let resolution = r.len32()?;
        let task: Task = r
            .string()?
            .parse()
            .map_err(|e: Error| FormatError::Malformed(e.to_string()))?;
        if n == 0 || d == 0 || da == 0 || du == 0 {
            return Err(FormatError::Malformed(format!("zero dimension in header: N={n} d={d} d_a={da} d_u={du}")).into());
        }
        let payload = [n * d, n * da, n * du]
            .iter()
            .try_fold(0usize, |acc, &k| acc.checked_add(k.checked_mul(4)?))
            .ok_or_else(|| FormatError::Malformed("payload size overflows".into()))?;
        let expected = r.position() + payload;
        if bytes.len() < expected {
            return Err(FormatError::Truncated {
                expected,
                actual: bytes.len(),
            }
            .into());
        }
        let coords = Tensor::new(&[n, d], r.f32s(n * d)?)?;
        let input = Tensor::new(&[n, da], r.f32s(n * da)?)?;
        let target = Tensor::new(&[n, du], r.f32s(n * du)?)?;
        r.finish()?;
        Sample::new(coords, input, target, SampleMeta { task, seed, resolution })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}

/// Per-channel mean and standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Floor below which a channel is treated as constant and left unscaled.
pub const STD_FLOOR: f64 = 1e-12;

impl ChannelStats {
    /// Population statistics over every point of every tensor.
    pub fn from_tensors<'a>(tensors: impl IntoIterator<Item = &'a Tensor<f32>>) -> Self {
        let mut sum = Vec::new();
        let mut sq = Vec::new();
        let mut count = 0usize;
        let tensors: Vec<_> = tensors.into_iter().collect();
        for t in &tensors {
            let (_, c) = t.rows_cols();
            sum.resize(c, 0.0);
            for row in t.data().chunks_exact(c) {
                for (s, &v) in sum.iter_mut().zip(row) {
                    *s += f64::from(v);
                }
                count += 1;
            }
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count.max(1) as f64).collect();
        sq.resize(mean.len(), 0.0);
        for t in &tensors {
            for row in t.data().chunks_exact(mean.len()) {
                for ((s, &v), m) in sq.iter_mut().zip(row).zip(&mean) {
                    *s += (f64::from(v) - m).powi(2);
                }
            }
        }
        let std = sq
            .iter()
            .map(|s| {
                let sd = (s / count.max(1) as f64).sqrt();
                if sd > STD_FLOOR {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        ChannelStats { mean, std }
    }

    pub fn normalize<T: Scalar>(&self, t: &Tensor<f32>) -> Result<Tensor<T>> {
        self.check(t)?;
        let c = self.mean.len();
        Ok(Tensor::from_fn(t.shape(), |i| {
            T::lit((f64::from(t.data()[i]) - self.mean[i % c]) / self.std[i % c])
        }))
    }

    pub fn denormalize<T: Scalar>(&self, t: &Tensor<T>) -> Result<Tensor<f32>> {
        let c = self.mean.len();
        if t.rank() != 2 || t.shape()[1] != c {
            return Err(Error::Config(format!("field has {:?} channels, stats have {c}", t.shape())));
        }
        Ok(Tensor::from_fn(t.shape(), |i| {
            (t.data()[i].as_f64() * self.std[i % c] + self.mean[i % c]) as f32
        }))
    }

    fn check(&self, t: &Tensor<f32>) -> Result<()> {
        if t.rank() != 2 || t.shape()[1] != self.mean.len() {
            return Err(Error::Config(format!(
                "field shape {:?} does not match {} normalization channels",
                t.shape(),
                self.mean.len()
            )));
        }
        Ok(())
    }
}

/// Normalization statistics, always computed on the train split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub input: ChannelStats,
    pub target: ChannelStats,
}

impl NormStats {
    pub fn from_samples(samples: &[Sample]) -> Self {
        NormStats {
            input: ChannelStats::from_tensors(samples.iter().map(|s| &s.input)),
            target: ChannelStats::from_tensors(samples.iter().map(|s| &s.target)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub task: Task,
    pub split: Split,
    pub seed: u64,
    pub resolution: usize,
    pub count: usize,
    pub coord_dim: usize,
    pub input_dim: usize,
    pub output_dim: usize,
    pub files: Vec<String>,
    pub normalization: NormStats,
}

impl Manifest {
    pub fn file_name(split: Split) -> String {
        format!("{}.json", split.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn stats(&self) -> &NormStats {
        &self.manifest.normalization
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.manifest.coord_dim, self.manifest.input_dim, self.manifest.output_dim)
    }
}

/// Seed of sample `index` within a split generated from `seed`.
pub fn sample_seed(seed: u64, index: usize) -> u64 {
    seed ^ index as u64
}

/// Generates `count` samples; sample `i` is drawn from its own stream
/// seeded with `sample_seed(seed, offset + i)`.
pub fn generate(task: Task, resolution: usize, seed: u64, offset: usize, count: usize) -> Result<Vec<Sample>> {
    if count == 0 {
        return Err(Error::Config("sample count must be positive".into()));
    }
    (offset..offset + count)
        .map(|i| task.generate(resolution, sample_seed(seed, i)))
        .collect()
}

/// Writes samples as `{split}_{index:04}.pgds` plus `{split}.json`.
pub fn write_split(
    dir: impl AsRef<Path>,
    split: Split,
    seed: u64,
    samples: &[Sample],
    normalization: &NormStats,
) -> Result<Manifest> {
    let dir = dir.as_ref();
    let first = samples
        .first()
        .ok_or_else(|| Error::Data("cannot write an empty split".into()))?;
    let (d, da, du) = first.dims();
    if let Some(bad) = samples.iter().find(|s| s.dims() != (d, da, du) || s.meta.task != first.meta.task) {
        return Err(Error::Data(format!(
            "sample dims {:?} differ from first sample {:?}",
            bad.dims(),
            (d, da, du)
        )));
    }
    std::fs::create_dir_all(dir)?;
    let mut files = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let name = format!("{}_{i:04}.pgds", split.name());
        s.write(dir.join(&name))?;
        files.push(name);
    }
    let manifest = Manifest {
        format: "PGDS".into(),
        version: DATASET_VERSION,
        task: first.meta.task,
        split,
        seed,
        resolution: first.meta.resolution,
        count: samples.len(),
        coord_dim: d,
        input_dim: da,
        output_dim: du,
        files,
        normalization: normalization.clone(),
    };
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    std::fs::write(dir.join(Manifest::file_name(split)), json)?;
    Ok(manifest)
}

pub fn has_split(dir: impl AsRef<Path>, split: Split) -> bool {
    dir.as_ref().join(Manifest::file_name(split)).is_file()
}

pub fn read_split(dir: impl AsRef<Path>, split: Split) -> Result<Dataset> {
    let dir = dir.as_ref();
    let path = dir.join(Manifest::file_name(split));
    let text = std::fs::read_to_string(&path)
        .map_err(|e| Error::Data(format!("cannot read manifest {}: {e}", path.display())))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("manifest {}: {e}", path.display())))?;
    if manifest.files.len() != manifest.count {
        return Err(Error::Data(format!(
            "manifest lists {} files but count is {}",
            manifest.files.len(),
            manifest.count
        )));
    }
    let dims = (manifest.coord_dim, manifest.input_dim, manifest.output_dim);
    let samples = manifest
        .files
        .iter()
        .map(|f| {
            let s = Sample::read(dir.join(f))?;
            if s.dims() != dims {
                return Err(Error::Data(format!("{f}: dims {:?} differ from manifest {dims:?}", s.dims())));
            }
            Ok(s)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { manifest, samples })
}
