//! IDX file parsing (MNIST / Fashion-MNIST), normalization and seeded batching.

use std::fs;
use std::io::Read;
use std::ops::Range;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{Error, Result};
use crate::nn::Shape;

pub const DTYPE_U8: u8 = 0x08;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum IdxError {
    #[error("idx stream is {0} bytes, shorter than the 4-byte header")]
    TooShort(usize),
    #[error("bad idx magic {0:02x?}: the first two bytes must be zero")]
    BadMagic([u8; 4]),
    #[error("unsupported idx dtype 0x{0:02x}; only unsigned bytes (0x08) are supported")]
    UnsupportedDtype(u8),
    #[error("idx header declares {dims} dimensions but the stream ends inside the header")]
    TruncatedHeader { dims: usize },
    #[error("idx payload truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("idx payload has {0} trailing bytes")]
    TrailingBytes(usize),
}

/// A decoded IDX file: dtype byte, dimensions and raw row-major payload.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxTensor {
    pub dtype: u8,
    pub dims: Vec<u32>,
    pub payload: Vec<u8>,
}

impl IdxTensor {
    pub fn element_count(&self) -> usize {
        self.dims.iter().map(|&d| d as usize).product()
    }

    /// Encodes back to the on-disk byte layout.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + 4 * self.dims.len() + self.payload.len());
        out.extend_from_slice(&[0, 0, self.dtype, self.dims.len() as u8]);
        for d in &self.dims {
            out.extend_from_slice(&d.to_be_bytes());
        }
        out.extend_from_slice(&self.payload);
        out
    }
}

pub fn parse_idx(bytes: &[u8]) -> std::result::Result<IdxTensor, IdxError> {
    if bytes.len() < 4 {
        return Err(IdxError::TooShort(bytes.len()));
    }
    let magic = [bytes[0], bytes[1], bytes[2], bytes[3]];
    if magic[0] != 0 || magic[1] != 0 {
        return Err(IdxError::BadMagic(magic));
    }
    let dtype = magic[2];
    if dtype != DTYPE_U8 {
        return Err(IdxError::UnsupportedDtype(dtype));
    }
    let ndims = magic[3] as usize;
    let header = 4 + 4 * ndims;
    if bytes.len() < header {
        return Err(IdxError::TruncatedHeader { dims: ndims });
    }
    let dims: Vec<u32> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let expected: usize = dims.iter().map(|&d| d as usize).product();
    let found = bytes.len() - header;
    if found < expected {
        return Err(IdxError::Truncated { expected, found });
    }
    if found > expected {
        return Err(IdxError::TrailingBytes(found - expected));
    }
    Ok(IdxTensor { dtype, dims, payload: bytes[header..].to_vec() })
}

/// Reads an IDX file, inflating it first when the name ends in `.gz`.
pub fn read_idx_file(path: &Path) -> Result<IdxTensor> {
    let raw = fs::read(path)?;
    let bytes = if path.extension().is_some_and(|e| e == "gz") {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(raw.as_slice()).read_to_end(&mut out)?;
        out
    } else {
        raw
    };
    Ok(parse_idx(&bytes)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: f64,
    pub std: f64,
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization { mean: 0.1307, std: 0.3081 }
    }
}

/// Maps raw bytes to `(p / 255 - mean) / std`, one row per leading-dimension entry.
pub fn normalize(raw: &IdxTensor, norm: Normalization) -> Result<Array2<f32>> {
    if !(norm.std > 0.0) || !norm.std.is_finite() || !norm.mean.is_finite() {
        return Err(Error::Config(format!("normalization std must be positive, got {}", norm.std)));
    }
    if raw.dims.is_empty() {
        return Err(Error::Format("idx tensor has no dimensions".into()));
    }
    let n = raw.dims[0] as usize;
    let per = raw.dims[1..].iter().map(|&d| d as usize).product::<usize>();
    let values = raw
        .payload
        .iter()
        .map(|&p| ((p as f64 / 255.0 - norm.mean) / norm.std) as f32)
        .collect();
    Array2::from_shape_vec((n, per), values).map_err(|e| Error::Format(e.to_string()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn file_stem(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "t10k",
        }
    }
}

/// Images `(N, c*h*w)` with class labels.
#[derive(Clone, Debug)]
pub struct LabeledDataset {
    images: Array2<f32>,
    labels: Vec<u8>,
    shape: Shape,
    split: Split,
    classes: usize,
}

impl LabeledDataset {
    pub fn new(
        images: Array2<f32>,
        labels: Vec<u8>,
        shape: Shape,
        split: Split,
        classes: usize,
    ) -> Result<Self> {
        if images.nrows() != labels.len() {
            return Err(Error::Format(format!(
                "{} images but {} labels",
                images.nrows(),
                labels.len()
            )));
        }
        if images.ncols() != shape.features() {
            return Err(Error::Format(format!(
                "images have {} features, shape implies {}",
                images.ncols(),
                shape.features()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(Error::Format(format!("label {bad} outside [0, {classes})")));
        }
        if images.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format("non-finite pixel after normalization".into()));
        }
        Ok(LabeledDataset { images, labels, shape, split, classes })
    }

    pub fn from_idx(images: &IdxTensor, labels: &IdxTensor, norm: Normalization, split: Split) -> Result<Self> {
        if images.dims.len() != 3 || labels.dims.len() != 1 {
            return Err(Error::Format(format!(
                "expected 3-d images and 1-d labels, got {} and {} dimensions",
                images.dims.len(),
                labels.dims.len()
            )));
        }
        let shape = Shape::new(1, images.dims[1] as usize, images.dims[2] as usize);
        Self::new(normalize(images, norm)?, labels.payload.clone(), shape, split, 10)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Array2<f32> {
        &self.images
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }

    /// Consecutive index ranges of at most `size` samples.
    pub fn chunks(&self, size: usize) -> impl Iterator<Item = Range<usize>> {
        let n = self.len();
        let size = size.max(1);
        (0..n.div_ceil(size)).map(move |i| i * size..((i + 1) * size).min(n))
    }

    /// Copies the given samples into a batch.
    pub fn gather(&self, indices: &[usize]) -> (Array2<f32>, Vec<u8>) {
        let x = self.images.select(Axis(0), indices);
        let y = indices.iter().map(|&i| self.labels[i]).collect();
        (x, y)
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let (images, labels) = self.gather(indices);
        LabeledDataset { images, labels, shape: self.shape, split: self.split, classes: self.classes }
    }

    /// The first `n` samples (all of them when `n >= len`).
    pub fn take(&self, n: usize) -> Self {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    /// `n` samples drawn without replacement by a seeded shuffle, kept in index order.
    pub fn seeded_subset(&self, n: usize, seed: u64) -> (Self, Vec<usize>) {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        idx.truncate(n.min(self.len()));
        idx.sort_unstable();
        (self.subset(&idx), idx)
    }

    /// Shuffled mini-batches for one epoch; see [`batch_indices`].
    pub fn batches(&self, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
        batch_indices(self.len(), batch_size, seed, epoch)
    }
}

/// Partition of `0..len` into shuffled batches. The permutation is a pure
/// function of `(seed, epoch)`; the final batch may be short.
pub fn batch_indices(len: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if len == 0 {
        return Err(Error::EmptyDataset);
    }
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng);
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Paths of the four standard files, accepting an optional `.gz` suffix.
fn idx_path(dir: &Path, split: Split, kind: &str) -> Result<PathBuf> {
    let stem = match kind {
        "images" => format!("{}-images-idx3-ubyte", split.file_stem()),
        _ => format!("{}-labels-idx1-ubyte", split.file_stem()),
    };
    for name in [stem.clone(), format!("{stem}.gz")] {
        let p = dir.join(&name);
        if p.is_file() {
            return Ok(p);
        }
    }
    Err(Error::Io(std::io::Error::new(
        std::io::ErrorKind::NotFound,
        format!("{} (or .gz) not found in {}", stem, dir.display()),
    )))
}

/// Loads one split of an MNIST-format directory. Fashion-MNIST uses the same file names.
pub fn load_split(dir: &Path, split: Split, norm: Normalization) -> Result<LabeledDataset> {
    let images = read_idx_file(&idx_path(dir, split, "images")?)?;
    let labels = read_idx_file(&idx_path(dir, split, "labels")?)?;
    LabeledDataset::from_idx(&images, &labels, norm, split)
}
