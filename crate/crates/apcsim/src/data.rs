//! Dataset ingestion and batching.
//!
//! Two on-disk formats are supported: IDX (big-endian dims, magic
//! 0x00000801 for labels and 0x00000803 for images) and headerless
//! label-first CSV. A deterministic synthetic grating corpus is provided for
//! self-contained experiments.

use crate::error::{Error, Result};
use crate::num::Element;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::Read;
use std::path::Path;

/// A labeled feature set. Features carry the batch axis first.
#[derive(Debug, Clone)]
pub struct Dataset<T: Element> {
    pub features: Tensor<T>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: String,
}

impl<T: Element> Dataset<T> {
    pub fn new(
        features: Tensor<T>,
        labels: Vec<usize>,
        classes: usize,
        split: impl Into<String>,
    ) -> Result<Self> {
        let n = *features
            .shape()
            .first()
            .ok_or_else(|| Error::data("features must have a batch axis"))?;
        if labels.len() != n {
            return Err(Error::data(format!(
                "{} feature rows but {} labels",
                n,
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::data(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        Ok(Dataset {
            features,
            labels,
            classes,
            split: split.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn row_len(&self) -> usize {
        self.features.shape()[1..].iter().product()
    }

    /// Reinterprets per-example features with a new shape of equal size.
    pub fn reshape_features(&self, per_example: Vec<usize>) -> Result<Self> {
        let mut shape = vec![self.len()];
        shape.extend_from_slice(&per_example);
        Ok(Dataset {
            features: self.features.reshape(shape)?,
            labels: self.labels.clone(),
            classes: self.classes,
            split: self.split.clone(),
        })
    }

    /// Gathers the examples at `indices` into a batch.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
        let row = self.row_len();
        let data = self.features.data();
        let mut out = Vec::with_capacity(indices.len() * row);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::data(format!("example index {i} out of range")));
            }
            out.extend_from_slice(&data[i * row..(i + 1) * row]);
            labels.push(self.labels[i]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(&self.features.shape()[1..]);
        Ok((Tensor::from_vec(out, shape)?, labels))
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let (features, labels) = self.batch(indices)?;
        Dataset::new(features, labels, self.classes, self.split.clone())
    }

    /// Splits off the first `n` examples; remainder keeps the split tag.
    pub fn split_at(&self, n: usize, head_tag: &str) -> Result<(Self, Self)> {
        if n > self.len() {
            return Err(Error::data(format!(
                "cannot take {n} of {} examples",
                self.len()
            )));
        }
        let head: Vec<usize> = (0..n).collect();
        let tail: Vec<usize> = (n..self.len()).collect();
        let mut h = self.subset(&head)?;
        h.split = head_tag.to_string();
        Ok((h, self.subset(&tail)?))
    }

    /// Seeded random subset of `n` examples, without replacement.
    pub fn sample(&self, n: usize, seed: u64) -> Result<Self> {
        let mut idx = shuffled_indices(self.len(), seed);
        idx.truncate(n.min(self.len()));
        self.subset(&idx)
    }
}

/// Fisher-Yates permutation of `0..n` from a seeded stream.
pub fn shuffled_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

/// Contiguous index ranges covering `0..n` in chunks of `batch_size`.
pub fn batch_ranges(n: usize, batch_size: usize) -> Vec<std::ops::Range<usize>> {
    assert!(batch_size > 0, "batch size must be positive");
    (0..n)
        .step_by(batch_size)
        .map(|s| s..(s + batch_size).min(n))
        .collect()
}

fn read_be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    let end = at + 4;
    if end > bytes.len() {
        return Err(Error::data("idx file truncated"));
    }
    Ok(u32::from_be_bytes(bytes[at..end].try_into().unwrap()))
}

const IDX_LABEL_MAGIC: u32 = 0x0000_0801;
const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;

fn read_idx(path: &Path, magic: u32) -> Result<(Vec<usize>, Vec<u8>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let got = read_be_u32(&bytes, 0)?;
    if got != magic {
        return Err(Error::data(format!(
            "{}: idx magic {got:#010x}, expected {magic:#010x}",
            path.display()
        )));
    }
    let ndim = (magic & 0xff) as usize;
    let mut dims = Vec::with_capacity(ndim);
    for d in 0..ndim {
        dims.push(read_be_u32(&bytes, 4 + 4 * d)? as usize);
    }
    let header = 4 + 4 * ndim;
    let total: usize = dims.iter().product();
    if bytes.len() != header + total {
        return Err(Error::data(format!(
            "{}: payload is {} bytes, dims imply {}",
            path.display(),
            bytes.len() - header,
            total
        )));
    }
    Ok((dims, bytes[header..].to_vec()))
}

/// Loads an IDX image/label file pair. Pixels are scaled by `scale`
/// (1/255 for unit-range features).
pub fn load_idx_dataset<T: Element>(
    images: &Path,
    labels: &Path,
    classes: usize,
    scale: f64,
    split: &str,
) -> Result<Dataset<T>> {
    let (dims, pixels) = read_idx(images, IDX_IMAGE_MAGIC)?;
    let (ldims, raw_labels) = read_idx(labels, IDX_LABEL_MAGIC)?;
    if ldims[0] != dims[0] {
        return Err(Error::data(format!(
            "{} images but {} labels",
            dims[0], ldims[0]
        )));
    }
    let s = T::from_f64_(scale);
    let feats: Vec<T> = pixels.iter().map(|&p| T::from_usize_(p as usize) * s).collect();
    let shape = vec![dims[0], 1, dims[1], dims[2]];
    let labels = raw_labels.iter().map(|&l| l as usize).collect();
    Dataset::new(Tensor::from_vec(feats, shape)?, labels, classes, split)
}

/// Loads a headerless CSV where each row is `label,f1,f2,...`. Features are
/// scaled by `scale`; all rows must have the same width.
pub fn load_csv_dataset<T: Element>(
    path: &Path,
    classes: usize,
    scale: f64,
    split: &str,
) -> Result<Dataset<T>> {
    let text = std::fs::read_to_string(path)?;
    let s = T::from_f64_(scale);
    let mut feats = Vec::new();
    let mut labels = Vec::new();
    let mut width = None;
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let label: usize = fields
            .next()
            .unwrap()
            .trim()
            .parse()
            .map_err(|e| Error::data(format!("line {}: bad label: {e}", lineno + 1)))?;
        let mut row = 0usize;
        for f in fields {
            let v: f64 = f
                .trim()
                .parse()
                .map_err(|e| Error::data(format!("line {}: bad value: {e}", lineno + 1)))?;
            feats.push(T::from_f64_(v) * s);
            row += 1;
        }
        match width {
            None => width = Some(row),
            Some(w) if w != row => {
                return Err(Error::data(format!(
                    "line {}: {} features, expected {}",
                    lineno + 1,
                    row,
                    w
                )))
            }
            _ => {}
        }
        labels.push(label);
    }
    let width = width.ok_or_else(|| Error::data("csv file has no rows"))?;
    let n = labels.len();
    Dataset::new(Tensor::from_vec(feats, vec![n, width])?, labels, classes, split)
}

/// Side length of the synthetic grating images.
pub const SYNTH_SIDE: usize = 16;
/// Class count of the synthetic corpus.
pub const SYNTH_CLASSES: usize = 10;

const SYNTH_FREQS: [(f64, f64); SYNTH_CLASSES] = [
    (1.0, 0.0),
    (0.0, 1.0),
    (1.0, 1.0),
    (2.0, 0.0),
    (0.0, 2.0),
    (2.0, 1.0),
    (1.0, 2.0),
    (2.0, 2.0),
    (3.0, 0.0),
    (0.0, 3.0),
];

/// Deterministic 10-class corpus of 16x16 oriented gratings with small
/// phase, amplitude, and pixel perturbations. Classes are interleaved so any
/// prefix is roughly balanced.
pub fn synthetic_dataset<T: Element>(per_class: usize, seed: u64, split: &str) -> Dataset<T> {
    let n = per_class * SYNTH_CLASSES;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut feats = Vec::with_capacity(n * SYNTH_SIDE * SYNTH_SIDE);
    let mut labels = Vec::with_capacity(n);
    let tau = std::f64::consts::TAU;
    for i in 0..n {
        let c = i % SYNTH_CLASSES;
        let (fx, fy) = SYNTH_FREQS[c];
        let phase: f64 = rng.gen_range(-0.5..0.5);
        let amp: f64 = rng.gen_range(0.40..0.50);
        for y in 0..SYNTH_SIDE {
            for x in 0..SYNTH_SIDE {
                let arg = tau * (fx * x as f64 + fy * y as f64) / SYNTH_SIDE as f64 + phase;
                let noise: f64 = rng.gen_range(-0.08..0.08);
                let v = (0.5 + amp * arg.sin() + noise).clamp(0.0, 1.0);
                feats.push(T::from_f64_(v));
            }
        }
        labels.push(c);
    }
    let features = Tensor::from_vec(feats, vec![n, 1, SYNTH_SIDE, SYNTH_SIDE]).unwrap();
    Dataset::new(features, labels, SYNTH_CLASSES, split).unwrap()
}
