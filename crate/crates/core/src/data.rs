//! IDX (MNIST) and CIFAR-10 binary readers.
//!
//! IDX files start with a big-endian magic number followed by one
//! big-endian `u32` per dimension, then the unsigned-byte payload.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const MNIST_CLASSES: usize = 10;

const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(Error::Truncated {
            expected: offset + 4,
            found: bytes.len(),
        })
}

/// Parses an IDX3 image file into `[N, 1, H, W]` with pixels scaled to `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::BadMagic {
            expected: IDX_IMAGES_MAGIC,
            found: magic,
        });
    }
    let n = be_u32(bytes, 4)? as usize;
    let h = be_u32(bytes, 8)? as usize;
    let w = be_u32(bytes, 12)? as usize;
    let expected = 16 + n * h * w;
    let payload = bytes.get(16..expected).ok_or(Error::Truncated {
        expected,
        found: bytes.len(),
    })?;
    let data = payload.iter().map(|&p| f64::from(p) / 255.0).collect();
    Ok(Tensor::from_parts(vec![n, 1, h, w], data))
}

/// Parses an IDX1 label file, rejecting labels `>= classes`.
pub fn parse_idx_labels(bytes: &[u8], classes: usize) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::BadMagic {
            expected: IDX_LABELS_MAGIC,
            found: magic,
        });
    }
    let n = be_u32(bytes, 4)? as usize;
    let payload = bytes.get(8..8 + n).ok_or(Error::Truncated {
        expected: 8 + n,
        found: bytes.len(),
    })?;
    payload
        .iter()
        .map(|&l| {
            let label = usize::from(l);
            if label < classes {
                Ok(label)
            } else {
                Err(Error::LabelOutOfRange { label, classes })
            }
        })
        .collect()
}

pub fn load_idx_images(path: impl AsRef<Path>) -> Result<Tensor> {
    parse_idx_images(&read_file(path.as_ref())?)
}

pub fn load_idx_labels(path: impl AsRef<Path>, classes: usize) -> Result<Vec<usize>> {
    parse_idx_labels(&read_file(path.as_ref())?, classes)
}

/// `[N, classes]` indicator matrix.
pub fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut data = vec![0.0; labels.len() * classes];
    for (i, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        data[i * classes + label] = 1.0;
    }
    Ok(Tensor::from_parts(vec![labels.len(), classes], data))
}

/// Images with integer labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        Ok(Dataset {
            images: self.images.gather_outer(indices)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        })
    }

    /// First `n` samples (all of them when `n` exceeds the size).
    pub fn head(&self, n: usize) -> Result<Dataset> {
        let n = n.min(self.len());
        Ok(Dataset {
            images: self.images.slice_outer(0, n)?,
            labels: self.labels[..n].to_vec(),
        })
    }

    /// Seeded split into `(train, validation)` with `validation` holding
    /// `val_size` samples.
    pub fn split(&self, val_size: usize, seed: u64) -> Result<(Dataset, Dataset)> {
        let (train_idx, val_idx) = split_indices(self.len(), val_size, seed)?;
        Ok((self.subset(&train_idx)?, self.subset(&val_idx)?))
    }
}

/// Deterministic partition of `0..n`; both halves come back sorted.
pub fn split_indices(n: usize, val_size: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if val_size > n {
        return Err(Error::InvalidArgument(format!(
            "validation size {val_size} exceeds dataset size {n}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut val = order[..val_size].to_vec();
    let mut train = order[val_size..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    Ok((train, val))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split {other:?}"))),
        }
    }
}

/// Paths of the four standard MNIST files inside `dir`.
pub fn mnist_paths(dir: &Path, split: Split) -> (PathBuf, PathBuf) {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    (
        dir.join(format!("{prefix}-images-idx3-ubyte")),
        dir.join(format!("{prefix}-labels-idx1-ubyte")),
    )
}

/// Loads one MNIST split from a directory holding the uncompressed files.
pub fn load_mnist(dir: impl AsRef<Path>, split: Split) -> Result<Dataset> {
    let (images, labels) = mnist_paths(dir.as_ref(), split);
    let images = load_idx_images(images)?;
    let labels = load_idx_labels(labels, MNIST_CLASSES)?;
    if images.shape()[0] != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} images but {} labels",
            images.shape()[0],
            labels.len()
        )));
    }
    Ok(Dataset { images, labels })
}

/// Parses a CIFAR-10 binary batch: records of one label byte followed by
/// 3072 channel-major pixel bytes.
pub fn parse_cifar10(bytes: &[u8]) -> Result<Dataset> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::Truncated {
            expected: (bytes.len() / CIFAR_RECORD + 1) * CIFAR_RECORD,
            found: bytes.len(),
        });
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    for record in bytes.chunks(CIFAR_RECORD) {
        let label = usize::from(record[0]);
        if label >= 10 {
            return Err(Error::LabelOutOfRange { label, classes: 10 });
        }
        labels.push(label);
        data.extend(record[1..].iter().map(|&p| f64::from(p) / 255.0));
    }
    Ok(Dataset {
        images: Tensor::from_parts(vec![n, 3, 32, 32], data),
        labels,
    })
}

pub fn load_cifar10(path: impl AsRef<Path>) -> Result<Dataset> {
    parse_cifar10(&read_file(path.as_ref())?)
}

/// Encodes an IDX3 image file; the inverse of [`parse_idx_images`] for raw bytes.
pub fn encode_idx_images(n: usize, h: usize, w: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGES_MAGIC, n as u32, h as u32, w as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

/// Encodes an IDX1 label file.
pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}
