//! MNIST IDX ingestion and the five-task digit-pair split.
//!
//! IDX is a big-endian container: a 4-byte magic (`0x00000803` for images,
//! `0x00000801` for labels), one big-endian `u32` per dimension, then the raw
//! unsigned bytes. Gzip-compressed files are detected by their `1F 8B`
//! signature and decompressed transparently.

use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
pub const ROWS: usize = 28;
pub const COLS: usize = 28;
pub const PIXELS: usize = ROWS * COLS;
pub const NUM_CLASSES: usize = 10;

/// The digit pairs of the sequential tasks, in training order.
pub const TASK_PAIRS: [[u8; 2]; 5] = [[0, 1], [2, 3], [4, 5], [6, 7], [8, 9]];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DataError {
    #[error("bad magic word: expected {expected:#010x}, found {found:#010x}")]
    BadMagic { expected: u32, found: u32 },
    #[error("truncated IDX data: header promises {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("unsupported image shape {rows}x{cols} (expected 28x28)")]
    BadShape { rows: usize, cols: usize },
    #[error("label byte {value} at index {index} is outside 0..=9")]
    BadLabel { index: usize, value: u8 },
    #[error("digit class {0} is absent from the input")]
    MissingClass(u8),
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("gzip decode failed: {0}")]
    Gzip(String),
    #[error("cannot read {path}: {message}")]
    Read { path: String, message: String },
}

/// Images flattened to 784 values in `[0, 1]`, with one label per image.
///
/// Pixels are stored contiguously (`count * 784`) so batches can be handed to
/// the matrix kernels without copying.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageSet {
    pixels: Vec<f64>,
    labels: Vec<u8>,
}

impl ImageSet {
    pub fn new(pixels: Vec<f64>, labels: Vec<u8>) -> Result<Self, DataError> {
        if !pixels.len().is_multiple_of(PIXELS) {
            return Err(DataError::Truncated {
                expected: pixels.len().div_ceil(PIXELS) * PIXELS,
                found: pixels.len(),
            });
        }
        let images = pixels.len() / PIXELS;
        if images != labels.len() {
            return Err(DataError::CountMismatch {
                images,
                labels: labels.len(),
            });
        }
        if let Some((index, &value)) = labels.iter().enumerate().find(|(_, &l)| l > 9) {
            return Err(DataError::BadLabel { index, value });
        }
        Ok(Self { pixels, labels })
    }

    /// Attach labels to an image-only set produced by [`parse_idx_images`].
    pub fn with_labels(self, labels: Vec<u8>) -> Result<Self, DataError> {
        Self::new(self.pixels, labels)
    }

    pub fn len(&self) -> usize {
        self.pixels.len() / PIXELS
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f64] {
        &self.pixels[i * PIXELS..(i + 1) * PIXELS]
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    /// Labels; empty when the set came straight out of [`parse_idx_images`].
    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> u8 {
        self.labels[i]
    }

    /// Rows `indices` gathered into a new set, in the given order.
    pub fn select(&self, indices: &[usize]) -> ImageSet {
        let mut pixels = Vec::with_capacity(indices.len() * PIXELS);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            pixels.extend_from_slice(self.image(i));
            if !self.labels.is_empty() {
                labels.push(self.labels[i]);
            }
        }
        ImageSet { pixels, labels }
    }

    /// The first `n` samples (or all of them if fewer).
    pub fn head(&self, n: usize) -> ImageSet {
        let n = n.min(self.len());
        ImageSet {
            pixels: self.pixels[..n * PIXELS].to_vec(),
            labels: self.labels[..n.min(self.labels.len())].to_vec(),
        }
    }

    /// Concatenation of several sets, in order.
    pub fn concat<'a>(sets: impl IntoIterator<Item = &'a ImageSet>) -> ImageSet {
        let mut pixels = Vec::new();
        let mut labels = Vec::new();
        for s in sets {
            pixels.extend_from_slice(&s.pixels);
            labels.extend_from_slice(&s.labels);
        }
        ImageSet { pixels, labels }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSplit {
    /// 1-based task index.
    pub task_id: usize,
    pub digit_pair: [u8; 2],
    pub train: ImageSet,
    pub test: ImageSet,
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32, DataError> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(DataError::Truncated {
            expected: offset + 4,
            found: bytes.len(),
        })
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<(), DataError> {
    let found = be_u32(bytes, 0)?;
    if found != expected {
        return Err(DataError::BadMagic { expected, found });
    }
    Ok(())
}

/// Returns the input unchanged, or its decompressed form when it starts with
/// the gzip signature.
pub fn maybe_gunzip(bytes: &[u8]) -> Result<std::borrow::Cow<'_, [u8]>, DataError> {
    if bytes.starts_with(&[0x1F, 0x8B]) {
        let mut out = Vec::new();
        GzDecoder::new(bytes)
            .read_to_end(&mut out)
            .map_err(|e| DataError::Gzip(e.to_string()))?;
        Ok(std::borrow::Cow::Owned(out))
    } else {
        Ok(std::borrow::Cow::Borrowed(bytes))
    }
}

/// Parse an IDX3 image file. The returned set has no labels attached.
pub fn parse_idx_images(bytes: &[u8]) -> Result<ImageSet, DataError> {
    let bytes = maybe_gunzip(bytes)?;
    check_magic(&bytes, IMAGE_MAGIC)?;
    let n = be_u32(&bytes, 4)? as usize;
    let rows = be_u32(&bytes, 8)? as usize;
    let cols = be_u32(&bytes, 12)? as usize;
    if rows != ROWS || cols != COLS {
        return Err(DataError::BadShape { rows, cols });
    }
    let expected = 16 + n * PIXELS;
    if bytes.len() < expected {
        return Err(DataError::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    let pixels = bytes[16..expected]
        .iter()
        .map(|&p| f64::from(p) / 255.0)
        .collect();
    Ok(ImageSet {
        pixels,
        labels: Vec::new(),
    })
}

/// Parse an IDX1 label file.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>, DataError> {
    let bytes = maybe_gunzip(bytes)?;
    check_magic(&bytes, LABEL_MAGIC)?;
    let n = be_u32(&bytes, 4)? as usize;
    let expected = 8 + n;
    if bytes.len() < expected {
        return Err(DataError::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    let labels = bytes[8..expected].to_vec();
    if let Some((index, &value)) = labels.iter().enumerate().find(|(_, &l)| l > 9) {
        return Err(DataError::BadLabel { index, value });
    }
    Ok(labels)
}

/// Serialize images back to uncompressed IDX3. Pixels are requantized with
/// `round(p * 255)`, which is exact for anything produced by the parser.
pub fn encode_idx_images(set: &ImageSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + set.pixels.len());
    out.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
    out.extend_from_slice(&(set.len() as u32).to_be_bytes());
    out.extend_from_slice(&(ROWS as u32).to_be_bytes());
    out.extend_from_slice(&(COLS as u32).to_be_bytes());
    out.extend(
        set.pixels
            .iter()
            .map(|&p| (p * 255.0).round().clamp(0.0, 255.0) as u8),
    );
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    std::fs::read(path).map_err(|e| DataError::Read {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

/// Load an image file and its label file into one labelled set.
pub fn load_image_set(images: &Path, labels: &Path) -> Result<ImageSet, DataError> {
    let set = parse_idx_images(&read_file(images)?)?;
    let labels = parse_idx_labels(&read_file(labels)?)?;
    set.with_labels(labels)
}

/// Split train and test sets into the five digit-pair tasks.
///
/// Within each task, samples keep their order from the source set.
pub fn split_tasks(train: &ImageSet, test: &ImageSet) -> Result<Vec<TaskSplit>, DataError> {
    for set in [train, test] {
        let mut seen = [false; NUM_CLASSES];
        for &l in set.labels() {
            seen[l as usize] = true;
        }
        if let Some(missing) = seen.iter().position(|&s| !s) {
            return Err(DataError::MissingClass(missing as u8));
        }
    }
    let pick = |set: &ImageSet, pair: [u8; 2]| {
        let idx: Vec<usize> = (0..set.len())
            .filter(|&i| pair.contains(&set.label(i)))
            .collect();
        set.select(&idx)
    };
    Ok(TASK_PAIRS
        .iter()
        .enumerate()
        .map(|(i, &pair)| TaskSplit {
            task_id: i + 1,
            digit_pair: pair,
            train: pick(train, pair),
            test: pick(test, pair),
        })
        .collect())
}

/// A seeded permutation of `0..n`.
pub fn shuffled_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx
}
