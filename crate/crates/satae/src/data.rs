//! Dataset handling: synthetic 2-D manifolds, IDX and CIFAR-10 loaders,
//! patch extraction, normalization, and a bit-exact binary cache.

use std::fmt;
use std::fs;
use std::io::Cursor;
use std::path::Path;
use std::str::FromStr;

use byteorder::{BigEndian, LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::seed::{stream_rng, SeedStream};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("dataset must contain at least one sample and one dimension")]
    EmptyDataset,
    #[error("bad magic: expected {expected:#010x}, found {found:#010x}")]
    BadMagic { expected: u32, found: u32 },
    #[error("file size mismatch: {0}")]
    TruncatedFile(String),
    #[error("patch size {patch} does not fit a {rows}x{cols} image")]
    PatchTooLarge { patch: usize, rows: usize, cols: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("not a dataset cache (bad magic)")]
    BadCacheMagic,
    #[error("dataset cache corrupt: {0}")]
    CacheCorrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// How [`Dataset::normalize`] computes its statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// Standardize each dimension with its own mean and standard deviation.
    PerDim,
    /// One scalar mean and standard deviation over every entry.
    Global,
}

/// A sample matrix (rows are samples) plus the normalization statistics that
/// map it back to its raw values. Unnormalized datasets carry the neutral
/// statistics (mean 0, standard deviation 1).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Array2<f64>,
    mean: Array1<f64>,
    std: Array1<f64>,
    normalized: bool,
    constant_dims: Vec<usize>,
    source_tag: String,
}

const STD_FLOOR: f64 = 1e-12;

fn find_constant_dims(samples: &Array2<f64>) -> Vec<usize> {
    let n = samples.nrows() as f64;
    let mut out = Vec::new();
    for (j, col) in samples.axis_iter(Axis(1)).enumerate() {
        let mean = col.sum() / n;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        if var.sqrt() < STD_FLOOR {
            out.push(j);
        }
    }
    out
}

impl Dataset {
    /// Wrap raw samples. The tag is a short free-form description used in run
    /// manifests ("toy:arc", "idx:train-images", ...).
    pub fn from_samples(samples: Array2<f64>, source_tag: &str) -> Result<Self, DataError> {
        if samples.nrows() == 0 || samples.ncols() == 0 {
            return Err(DataError::EmptyDataset);
        }
        let d = samples.ncols();
        let constant_dims = find_constant_dims(&samples);
        Ok(Dataset {
            samples,
            mean: Array1::zeros(d),
            std: Array1::ones(d),
            normalized: false,
            constant_dims,
            source_tag: source_tag.to_string(),
        })
    }

    pub fn len(&self) -> usize {
        self.samples.nrows()
    }

    pub fn is_empty(&self) -> bool {
        false // the constructor guarantees at least one sample
    }

    pub fn dim(&self) -> usize {
        self.samples.ncols()
    }

    pub fn samples(&self) -> &Array2<f64> {
        &self.samples
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.samples.row(i)
    }

    pub fn mean(&self) -> &Array1<f64> {
        &self.mean
    }

    pub fn std(&self) -> &Array1<f64> {
        &self.std
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    /// Indices of dimensions whose standard deviation is (numerically) zero.
    pub fn constant_dims(&self) -> &[usize] {
        &self.constant_dims
    }

    pub fn source_tag(&self) -> &str {
        &self.source_tag
    }

    /// Threshold the data: entries strictly above `threshold` become `high`,
    /// everything else `low`.
    pub fn binarize(&self, threshold: f64, low: f64, high: f64) -> Dataset {
        let samples = self.samples.mapv(|v| if v > threshold { high } else { low });
        let constant_dims = find_constant_dims(&samples);
        Dataset {
            samples,
            mean: Array1::zeros(self.dim()),
            std: Array1::ones(self.dim()),
            normalized: false,
            constant_dims,
            source_tag: self.source_tag.clone(),
        }
    }

    /// Standardize the data. Per-dimension mode maps each column through its
    /// own `(x - mean) / std`; global mode uses one scalar pair for every
    /// entry. Constant dimensions (and, in global mode, wholly constant data)
    /// are passed through untouched with neutral statistics, so
    /// [`denormalize`](Self::denormalize) is always exact.
    ///
    /// The divisor is the population standard deviation (divide by `n`).
    pub fn normalize(&self, mode: NormMode) -> Dataset {
        let n = self.len() as f64;
        let d = self.dim();
        let (mut mean, mut std) = (Array1::zeros(d), Array1::ones(d));
        match mode {
            NormMode::PerDim => {
                for (j, col) in self.samples.axis_iter(Axis(1)).enumerate() {
                    let m = col.sum() / n;
                    let s = (col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n).sqrt();
                    if s >= STD_FLOOR {
                        mean[j] = m;
                        std[j] = s;
                    }
                }
            }
            NormMode::Global => {
                let total = n * d as f64;
                let m = self.samples.sum() / total;
                let s = (self.samples.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / total)
                    .sqrt();
                if s >= STD_FLOOR {
                    mean.fill(m);
                    std.fill(s);
                }
            }
        }
        let mut samples = self.samples.clone();
        for mut row in samples.axis_iter_mut(Axis(0)) {
            for j in 0..d {
                row[j] = (row[j] - mean[j]) / std[j];
            }
        }
        let constant_dims = find_constant_dims(&samples);
        Dataset {
            samples,
            mean,
            std,
            normalized: true,
            constant_dims,
            source_tag: self.source_tag.clone(),
        }
    }

    /// Map the data through existing statistics (for example, applying a
    /// training set's normalization to held-out points).
    pub fn normalize_with(&self, mean: &Array1<f64>, std: &Array1<f64>) -> Result<Dataset, DataError> {
        let d = self.dim();
        if mean.len() != d || std.len() != d {
            return Err(DataError::ShapeMismatch(format!(
                "statistics have lengths {} and {}, data has {d} dimensions",
                mean.len(),
                std.len()
            )));
        }
        if std.iter().any(|&s| !(s > 0.0)) {
            return Err(DataError::ShapeMismatch("standard deviations must be positive".into()));
        }
        let mut samples = self.samples.clone();
        for mut row in samples.axis_iter_mut(Axis(0)) {
            for j in 0..d {
                row[j] = (row[j] - mean[j]) / std[j];
            }
        }
        let constant_dims = find_constant_dims(&samples);
        Ok(Dataset {
            samples,
            mean: mean.clone(),
            std: std.clone(),
            normalized: true,
            constant_dims,
            source_tag: self.source_tag.clone(),
        })
    }

    /// Undo [`normalize`](Self::normalize), restoring raw values.
    pub fn denormalize(&self) -> Dataset {
        let d = self.dim();
        let mut samples = self.samples.clone();
        for mut row in samples.axis_iter_mut(Axis(0)) {
            for j in 0..d {
                row[j] = row[j] * self.std[j] + self.mean[j];
            }
        }
        let constant_dims = find_constant_dims(&samples);
        Dataset {
            samples,
            mean: Array1::zeros(d),
            std: Array1::ones(d),
            normalized: false,
            constant_dims,
            source_tag: self.source_tag.clone(),
        }
    }

    /// Serialize to the cache layout: magic `SATD0001`, little-endian `u32`
    /// sample count and dimension, `u8` normalized flag, then row-major `f64`
    /// samples followed by the mean and standard-deviation vectors.
    pub fn to_cache_bytes(&self) -> Vec<u8> {
        let (n, d) = (self.len(), self.dim());
        let mut out = Vec::with_capacity(17 + 8 * (n * d + 2 * d));
        out.extend_from_slice(b"SATD0001");
        out.write_u32::<LittleEndian>(n as u32).expect("vec write");
        out.write_u32::<LittleEndian>(d as u32).expect("vec write");
        out.write_u8(self.normalized as u8).expect("vec write");
        for &v in self.samples.iter().chain(&self.mean).chain(&self.std) {
            out.write_f64::<LittleEndian>(v).expect("vec write");
        }
        out
    }

    /// Parse the layout written by [`to_cache_bytes`](Self::to_cache_bytes).
    pub fn from_cache_bytes(bytes: &[u8], source_tag: &str) -> Result<Dataset, DataError> {
        if bytes.len() < 17 {
            return Err(DataError::CacheCorrupt("shorter than header".into()));
        }
        if &bytes[..8] != b"SATD0001" {
            return Err(DataError::BadCacheMagic);
        }
        let mut cur = Cursor::new(&bytes[8..]);
        let n = cur.read_u32::<LittleEndian>()? as usize;
        let d = cur.read_u32::<LittleEndian>()? as usize;
        let flag = cur.read_u8()?;
        if n == 0 || d == 0 {
            return Err(DataError::EmptyDataset);
        }
        if flag > 1 {
            return Err(DataError::CacheCorrupt(format!("bad normalized flag {flag}")));
        }
        let expect = 17 + 8 * (n * d + 2 * d);
        if bytes.len() != expect {
            return Err(DataError::CacheCorrupt(format!(
                "expected {expect} bytes for {n}x{d}, got {}",
                bytes.len()
            )));
        }
        let mut read_vec = |len: usize| -> Result<Vec<f64>, DataError> {
            let mut v = Vec::with_capacity(len);
            for _ in 0..len {
                v.push(cur.read_f64::<LittleEndian>()?);
            }
            Ok(v)
        };
        let samples = Array2::from_shape_vec((n, d), read_vec(n * d)?)
            .expect("shape checked against length");
        let mean = Array1::from_vec(read_vec(d)?);
        let std = Array1::from_vec(read_vec(d)?);
        let constant_dims = find_constant_dims(&samples);
        Ok(Dataset {
            samples,
            mean,
            std,
            normalized: flag == 1,
            constant_dims,
            source_tag: source_tag.to_string(),
        })
    }

    pub fn save_cache(&self, path: &Path) -> Result<(), DataError> {
        Ok(fs::write(path, self.to_cache_bytes())?)
    }

    pub fn load_cache(path: &Path) -> Result<Dataset, DataError> {
        let tag = format!("cache:{}", path.file_name().unwrap_or_default().to_string_lossy());
        Dataset::from_cache_bytes(&fs::read(path)?, &tag)
    }
}

/// The synthetic 2-D manifolds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ToyKind {
    /// Upper half of the circle of radius 0.8.
    Arc,
    /// One period of `y = 0.8 sin(pi x)` over `x in [-1, 1]`.
    Sine,
    /// The main diagonal `y = x` over `x in [-1, 1]`.
    LineSegment,
}

impl fmt::Display for ToyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ToyKind::Arc => "arc",
            ToyKind::Sine => "sine",
            ToyKind::LineSegment => "line-segment",
        })
    }
}

impl FromStr for ToyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "arc" => Ok(ToyKind::Arc),
            "sine" => Ok(ToyKind::Sine),
            "line-segment" => Ok(ToyKind::LineSegment),
            other => Err(format!("unknown manifold '{other}' (arc, sine, line-segment)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyManifoldSpec {
    pub kind: ToyKind,
    pub n: usize,
    pub noise_std: f64,
    pub seed: u64,
}

/// Sample a 2-D toy manifold inside `[-1, 1]^2`, optionally with isotropic
/// Gaussian noise. One uniform parameter draw and two noise draws per point,
/// in sample order, all from the data-generation stream of `seed`.
pub fn gen_toy(spec: &ToyManifoldSpec) -> Result<Dataset, DataError> {
    if spec.n == 0 {
        return Err(DataError::EmptyDataset);
    }
    assert!(spec.noise_std >= 0.0, "noise_std must be >= 0");
    let mut rng = stream_rng(spec.seed, SeedStream::DataGen);
    let mut samples = Array2::zeros((spec.n, 2));
    for i in 0..spec.n {
        let t: f64 = rng.random();
        let (x, y) = match spec.kind {
            ToyKind::Arc => {
                let theta = t * std::f64::consts::PI;
                (0.8 * theta.cos(), 0.8 * theta.sin())
            }
            ToyKind::Sine => {
                let x = 2.0 * t - 1.0;
                (x, 0.8 * (std::f64::consts::PI * x).sin())
            }
            ToyKind::LineSegment => {
                let x = 2.0 * t - 1.0;
                (x, x)
            }
        };
        let gx: f64 = rng.sample(StandardNormal);
        let gy: f64 = rng.sample(StandardNormal);
        samples[[i, 0]] = x + spec.noise_std * gx;
        samples[[i, 1]] = y + spec.noise_std * gy;
    }
    Dataset::from_samples(samples, &format!("toy:{}", spec.kind))
}

const IDX_MAGIC: u32 = 0x0000_0803;

/// Load an IDX file of unsigned-byte images (the MNIST container): big-endian
/// magic 0x00000803, then counts `n`, `rows`, `cols`, then `n*rows*cols`
/// pixel bytes. Pixels are scaled to `[0, 1]` and images flattened row-major.
pub fn load_idx(path: &Path) -> Result<Dataset, DataError> {
    let bytes = fs::read(path)?;
    if bytes.len() < 16 {
        return Err(DataError::TruncatedFile(format!(
            "IDX header needs 16 bytes, file has {}",
            bytes.len()
        )));
    }
    let mut cur = Cursor::new(&bytes);
    let magic = cur.read_u32::<BigEndian>()?;
    if magic != IDX_MAGIC {
        return Err(DataError::BadMagic { expected: IDX_MAGIC, found: magic });
    }
    let n = cur.read_u32::<BigEndian>()? as usize;
    let rows = cur.read_u32::<BigEndian>()? as usize;
    let cols = cur.read_u32::<BigEndian>()? as usize;
    if n == 0 || rows == 0 || cols == 0 {
        return Err(DataError::EmptyDataset);
    }
    let expect = 16 + n * rows * cols;
    if bytes.len() != expect {
        return Err(DataError::TruncatedFile(format!(
            "expected {expect} bytes for {n} images of {rows}x{cols}, got {}",
            bytes.len()
        )));
    }
    let d = rows * cols;
    let data: Vec<f64> = bytes[16..].iter().map(|&b| b as f64 / 255.0).collect();
    let samples = Array2::from_shape_vec((n, d), data).expect("shape checked against length");
    let tag = format!("idx:{}", path.file_name().unwrap_or_default().to_string_lossy());
    Dataset::from_samples(samples, &tag)
}

const CIFAR_RECORD: usize = 3073; // 1 label byte + 3 * 32 * 32 pixels

/// Load one CIFAR-10 binary batch: records of 3073 bytes (label byte followed
/// by 3072 channel-major pixels). Labels are dropped, pixels scaled to `[0, 1]`.
pub fn load_cifar_batch(path: &Path) -> Result<Dataset, DataError> {
    let bytes = fs::read(path)?;
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(DataError::TruncatedFile(format!(
            "CIFAR batch length {} is not a positive multiple of {CIFAR_RECORD}",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let d = CIFAR_RECORD - 1;
    let mut data = Vec::with_capacity(n * d);
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        data.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
    }
    let samples = Array2::from_shape_vec((n, d), data).expect("n*d values pushed");
    let tag = format!("cifar:{}", path.file_name().unwrap_or_default().to_string_lossy());
    Dataset::from_samples(samples, &tag)
}

/// Sample `count` random square patches from a dataset of `rows x cols`
/// images. Each patch draws an image index and a top-left corner (row, then
/// column) from the data-generation stream of `seed`.
pub fn extract_patches(
    ds: &Dataset,
    rows: usize,
    cols: usize,
    patch: usize,
    count: usize,
    seed: u64,
) -> Result<Dataset, DataError> {
    if ds.dim() != rows * cols {
        return Err(DataError::ShapeMismatch(format!(
            "dataset dimension {} is not {rows}x{cols}",
            ds.dim()
        )));
    }
    if patch == 0 || patch > rows || patch > cols {
        return Err(DataError::PatchTooLarge { patch, rows, cols });
    }
    if count == 0 {
        return Err(DataError::EmptyDataset);
    }
    let mut rng = stream_rng(seed, SeedStream::DataGen);
    let mut out = Array2::zeros((count, patch * patch));
    for k in 0..count {
        let img = rng.random_range(0..ds.len());
        let r0 = rng.random_range(0..=rows - patch);
        let c0 = rng.random_range(0..=cols - patch);
        for pr in 0..patch {
            for pc in 0..patch {
                out[[k, pr * patch + pc]] = ds.samples[[img, (r0 + pr) * cols + (c0 + pc)]];
            }
        }
    }
    Dataset::from_samples(out, &format!("{}+patch{patch}", ds.source_tag))
}
