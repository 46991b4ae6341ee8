//! Datasets: Gaussian blobs (optionally drifting), IDX image files, CSV
//! tables, and seeded mini-batching.

use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng::{substream, Stream};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `N x D` or `N x C x H x W`.
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, num_classes: usize, split: Split) -> Result<Self> {
        let n = features.shape().first().copied().unwrap_or(0);
        if features.rank() < 2 {
            return Err(Error::arg("dataset features need a batch axis and at least one feature axis"));
        }
        if n != labels.len() {
            return Err(Error::arg(format!(
                "{} samples but {} labels",
                n,
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::arg(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Dataset {
            features,
            labels,
            num_classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample feature shape.
    pub fn sample_shape(&self) -> &[usize] {
        &self.features.shape()[1..]
    }

    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let x = self.features.select_rows(indices)?;
        let y = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((x, y))
    }

    /// The first `n` samples (all of them if `n` is 0 or too large).
    pub fn truncate(mut self, n: usize) -> Result<Self> {
        if n == 0 || n >= self.len() {
            return Ok(self);
        }
        let idx: Vec<usize> = (0..n).collect();
        self.features = self.features.select_rows(&idx)?;
        self.labels.truncate(n);
        Ok(self)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainTest {
    pub train: Dataset,
    pub test: Dataset,
}

/// Gaussian class clusters with identity covariance.
///
/// Class means are random unit directions scaled by `separation`. Samples are
/// generated in rounds of one sample per class; with `drift_per_batch > 0`
/// round `t` is translated by `t * drift_per_batch` in every coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct BlobSpec {
    pub num_classes: usize,
    pub dim: usize,
    pub separation: f64,
    pub drift_per_batch: f64,
}

impl BlobSpec {
    pub fn class_means(&self, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = substream(seed, Stream::DataMeans);
        (0..self.num_classes)
            .map(|_| {
                let v: Vec<f64> = (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                v.into_iter().map(|x| x / norm * self.separation).collect()
            })
            .collect()
    }

    /// `n_per_class` samples per class. Class means depend on `seed` only, so
    /// the train and test splits of one seed share them.
    pub fn generate(&self, seed: u64, split: Split, n_per_class: usize) -> Result<Dataset> {
        if self.num_classes == 0 || self.dim == 0 {
            return Err(Error::arg("blobs need at least one class and one dimension"));
        }
        if !(self.drift_per_batch >= 0.0) {
            return Err(Error::arg("drift_per_batch must be non-negative"));
        }
        let means = self.class_means(seed);
        let mut rng = substream(
            seed,
            match split {
                Split::Train => Stream::DataTrain,
                Split::Test => Stream::DataTest,
            },
        );
        let n = n_per_class * self.num_classes;
        let mut data = Vec::with_capacity(n * self.dim);
        let mut labels = Vec::with_capacity(n);
        for round in 0..n_per_class {
            let shift = round as f64 * self.drift_per_batch;
            for (c, mean) in means.iter().enumerate() {
                for m in mean {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    data.push(m + shift + z);
                }
                labels.push(c);
            }
        }
        Dataset::new(
            Tensor::new(vec![n, self.dim], data)?,
            labels,
            self.num_classes,
            split,
        )
    }
}

/// Training split of [`BlobSpec`] blobs.
pub fn gen_blobs(
    seed: u64,
    n_per_class: usize,
    num_classes: usize,
    dim: usize,
    class_separation: f64,
    drift_per_batch: f64,
) -> Result<Dataset> {
    BlobSpec {
        num_classes,
        dim,
        separation: class_separation,
        drift_per_batch,
    }
    .generate(seed, Split::Train, n_per_class)
}

const IDX_UBYTE: u8 = 0x08;
pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Parses an unsigned-byte IDX buffer: returns the dimension sizes and the
/// payload. `what` names the file in error messages.
pub fn parse_idx<'a>(bytes: &'a [u8], what: &str, expected_magic: u32) -> Result<(Vec<usize>, &'a [u8])> {
    if bytes.len() < 4 {
        return Err(Error::format(format!("{what}.magic"), "file shorter than the 4-byte magic"));
    }
    let magic = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    if magic != expected_magic {
        return Err(Error::format(
            format!("{what}.magic"),
            format!("expected {expected_magic:#010x}, found {magic:#010x}"),
        ));
    }
    debug_assert_eq!(bytes[2], IDX_UBYTE);
    let rank = bytes[3] as usize;
    let header = 4 + 4 * rank;
    if bytes.len() < header {
        return Err(Error::format(
            format!("{what}.dims"),
            format!("header needs {header} bytes, file has {}", bytes.len()),
        ));
    }
    let dims: Vec<usize> = (0..rank)
        .map(|i| {
            let o = 4 + 4 * i;
            u32::from_be_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as usize
        })
        .collect();
    let need: usize = dims.iter().product();
    let payload = &bytes[header..];
    if payload.len() < need {
        return Err(Error::format(
            format!("{what}.payload"),
            format!("expected {need} bytes, found {}", payload.len()),
        ));
    }
    Ok((dims, &payload[..need]))
}

/// Images scaled to `[0, 1]` with shape `N x 1 x H x W`; labels as class
/// indices (`num_classes` is the largest label plus one).
pub fn parse_idx_pair(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let (idims, pixels) = parse_idx(images, "images", IDX_IMAGES_MAGIC)?;
    let (ldims, raw_labels) = parse_idx(labels, "labels", IDX_LABELS_MAGIC)?;
    let [n, h, w] = idims[..] else {
        return Err(Error::format("images.dims", format!("expected 3 dims, found {}", idims.len())));
    };
    if ldims[0] != n {
        return Err(Error::format(
            "labels.count",
            format!("{} labels for {} images", ldims[0], n),
        ));
    }
    let data = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let labels: Vec<usize> = raw_labels.iter().map(|&l| l as usize).collect();
    let classes = labels.iter().max().map_or(1, |m| m + 1);
    Dataset::new(Tensor::new(vec![n, 1, h, w], data)?, labels, classes, Split::Train)
}

/// Reads an IDX image/label file pair; see [`parse_idx_pair`].
pub fn load_idx(images_path: &Path, labels_path: &Path, standardize: bool) -> Result<Dataset> {
    let read = |p: &Path| fs::read(p).map_err(|e| Error::io(format!("reading {}", p.display()), e));
    let mut ds = parse_idx_pair(&read(images_path)?, &read(labels_path)?)?;
    if standardize {
        Standardizer::fit(&ds).apply(&mut ds);
    }
    Ok(ds)
}

/// Encodes an image dataset (`N x 1 x H x W` or `N x H x W`-like, values in
/// `[0, 1]`) and its labels as IDX byte buffers.
pub fn encode_idx(ds: &Dataset) -> Result<(Vec<u8>, Vec<u8>)> {
    let (n, h, w) = match *ds.features.shape() {
        [n, 1, h, w] => (n, h, w),
        ref s => return Err(Error::arg(format!("cannot encode shape {s:?} as IDX images"))),
    };
    let mut images = Vec::with_capacity(16 + ds.features.len());
    images.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    for d in [n, h, w] {
        images.extend_from_slice(&(d as u32).to_be_bytes());
    }
    images.extend(
        ds.features
            .data()
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8),
    );
    let mut labels = Vec::with_capacity(8 + n);
    labels.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    labels.extend_from_slice(&(n as u32).to_be_bytes());
    for &l in &ds.labels {
        let b = u8::try_from(l).map_err(|_| Error::arg(format!("label {l} does not fit a byte")))?;
        labels.push(b);
    }
    Ok((images, labels))
}

/// Per-feature affine standardization fitted on one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    mean: Vec<f64>,
    inv_std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(ds: &Dataset) -> Self {
        let n = ds.len().max(1);
        let d = ds.features.len() / n;
        let mut mean = vec![0.0; d];
        for row in ds.features.data().chunks(d.max(1)) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for row in ds.features.data().chunks(d.max(1)) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let inv_std = var
            .into_iter()
            .map(|s| {
                let sd = (s / n as f64).sqrt();
                if sd > 1e-12 {
                    1.0 / sd
                } else {
                    1.0
                }
            })
            .collect();
        Standardizer { mean, inv_std }
    }

    pub fn apply(&self, ds: &mut Dataset) {
        let d = self.mean.len().max(1);
        for row in ds.features.data_mut().chunks_mut(d) {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.inv_std) {
                *v = (*v - m) * s;
            }
        }
    }
}

/// CSV with a header row; the column named `label` holds class indices and
/// every other column is a numeric feature.
pub fn load_csv(path: &Path, split: Split) -> Result<Dataset> {
    let field = path.display().to_string();
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| Error::format(field.clone(), e.to_string()))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::format(field.clone(), e.to_string()))?
        .clone();
    let label_col = headers
        .iter()
        .position(|h| h.trim() == "label")
        .ok_or_else(|| Error::format(format!("{field}.header"), "no `label` column"))?;
    let dim = headers.len() - 1;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (row, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::format(field.clone(), e.to_string()))?;
        for (col, v) in rec.iter().enumerate() {
            let bad = || Error::format(format!("{field}:{}:{}", row + 2, &headers[col]), format!("cannot parse `{v}`"));
            if col == label_col {
                labels.push(v.trim().parse::<usize>().map_err(|_| bad())?);
            } else {
                data.push(v.trim().parse::<f64>().map_err(|_| bad())?);
            }
        }
    }
    let n = labels.len();
    let classes = labels.iter().max().map_or(1, |m| m + 1);
    Dataset::new(Tensor::new(vec![n, dim], data)?, labels, classes, split)
}

/// One epoch of mini-batch index lists from a seeded permutation of
/// `0..n`. Without `drop_last` every index appears exactly once; with it,
/// a short tail batch is discarded.
pub fn batches(n: usize, batch_size: usize, seed: u64, drop_last: bool) -> Result<Vec<Vec<usize>>> {
    let mut rng = substream(seed, Stream::Shuffle);
    batches_with(n, batch_size, &mut rng, drop_last)
}

pub fn batches_with<R: Rng>(
    n: usize,
    batch_size: usize,
    rng: &mut R,
    drop_last: bool,
) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::arg("batch size must be at least 1"));
    }
    if drop_last && batch_size > n {
        return Err(Error::arg(format!(
            "batch size {batch_size} exceeds {n} samples with drop_last: the epoch would be empty"
        )));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    Ok(perm
        .chunks(batch_size)
        .filter(|c| !drop_last || c.len() == batch_size)
        .map(|c| c.to_vec())
        .collect())
}
