//! Datasets, IDX (MNIST) I/O, non-IID partitioning and label poisoning.

use std::path::Path;
use std::sync::Arc;

use ndarray::{Array2, Axis};
use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{gather_batch, Batch};
use crate::rng::{stream_rng, Stream};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Standard deviation of the synthetic class blobs around their means.
pub const DEFAULT_SYNTHETIC_SPREAD: f64 = 0.3;

/// Samples with inputs scaled to `[0, 1]`.
///
/// The input matrix is shared behind an `Arc`: poisoning only rewrites labels,
/// so poisoned copies reuse the original pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Arc<Array2<f64>>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(inputs: Array2<f64>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if inputs.nrows() != labels.len() {
            return Err(Error::CountMismatch {
                images: inputs.nrows(),
                labels: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::DataLoadFailure(format!(
                "label {bad} outside [0, {num_classes})"
            )));
        }
        Ok(Dataset {
            inputs: Arc::new(inputs),
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            inputs: Arc::new(self.inputs.select(Axis(0), indices)),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    pub fn batch(&self, indices: &[usize]) -> Batch {
        gather_batch(&self.inputs, &self.labels, indices)
    }

    pub fn to_batch(&self) -> Batch {
        Batch {
            inputs: (*self.inputs).clone(),
            labels: self.labels.clone(),
        }
    }

    pub fn class_counts(&self, indices: &[usize]) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &i in indices {
            counts[self.labels[i]] += 1;
        }
        counts
    }
}

struct IdxReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> IdxReader<'a> {
    fn u32(&mut self) -> Result<u32> {
        let chunk = self.take(4)?;
        Ok(u32::from_be_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]))
    }

    fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(len).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::TruncatedFile {
                path: self.path.to_path_buf(),
            });
        };
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn magic(&mut self, expected: u32) -> Result<()> {
        let found = self.u32()?;
        if found != expected {
            return Err(Error::BadMagic { expected, found });
        }
        Ok(())
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::DataLoadFailure(format!("{}: {e}", path.display())))
}

/// Loads an IDX image/label pair; pixels are scaled by 1/255.
///
/// The label file carries no class count, so it is taken as
/// `max(10, largest label + 1)`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let image_bytes = read_file(images_path)?;
    let mut images = IdxReader {
        bytes: &image_bytes,
        pos: 0,
        path: images_path,
    };
    images.magic(IDX_IMAGES_MAGIC)?;
    let count = images.u32()? as usize;
    let rows = images.u32()? as usize;
    let cols = images.u32()? as usize;
    let pixels = images.take(count * rows * cols)?;

    let label_bytes = read_file(labels_path)?;
    let mut labels = IdxReader {
        bytes: &label_bytes,
        pos: 0,
        path: labels_path,
    };
    labels.magic(IDX_LABELS_MAGIC)?;
    let label_count = labels.u32()? as usize;
    if label_count != count {
        return Err(Error::CountMismatch {
            images: count,
            labels: label_count,
        });
    }
    let raw_labels = labels.take(label_count)?;

    let inputs = Array2::from_shape_vec(
        (count, rows * cols),
        pixels.iter().map(|&p| p as f64 / 255.0).collect(),
    )
    .expect("pixel buffer length checked above");
    let labels: Vec<usize> = raw_labels.iter().map(|&l| l as usize).collect();
    let num_classes = labels.iter().max().map_or(0, |m| m + 1).max(10);
    Dataset::new(inputs, labels, num_classes)
}

/// Writes a dataset as an IDX pair; inputs are quantized to `round(v * 255)`.
pub fn write_idx(
    dataset: &Dataset,
    rows: usize,
    cols: usize,
    images_path: &Path,
    labels_path: &Path,
) -> Result<()> {
    if rows * cols != dataset.input_dim() {
        return Err(Error::dims(dataset.input_dim(), rows * cols));
    }
    if dataset.num_classes > 256 {
        return Err(Error::ConfigInvalid(
            "IDX labels hold at most 256 classes".into(),
        ));
    }
    let n = dataset.len();
    let mut images = Vec::with_capacity(16 + n * rows * cols);
    images.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    for dim in [n, rows, cols] {
        images.extend_from_slice(&(dim as u32).to_be_bytes());
    }
    images.extend(
        dataset
            .inputs
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );

    let mut labels = Vec::with_capacity(8 + n);
    labels.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    labels.extend_from_slice(&(n as u32).to_be_bytes());
    labels.extend(dataset.labels.iter().map(|&y| y as u8));

    std::fs::write(images_path, images).map_err(|e| Error::io(images_path, e))?;
    std::fs::write(labels_path, labels).map_err(|e| Error::io(labels_path, e))?;
    Ok(())
}

/// Gaussian class blobs, exactly balanced (class counts differ by at most one).
pub fn generate_synthetic(n: usize, input_dim: usize, num_classes: usize, seed: u64) -> Dataset {
    generate_blobs(n, input_dim, num_classes, DEFAULT_SYNTHETIC_SPREAD, seed)
}

pub fn generate_blobs(
    n: usize,
    input_dim: usize,
    num_classes: usize,
    spread: f64,
    seed: u64,
) -> Dataset {
    assert!(num_classes >= 2 && input_dim >= 1);
    let mut means_rng = stream_rng(seed, Stream::Data, &[0]);
    let means = Array2::from_shape_fn((num_classes, input_dim), |_| means_rng.gen_range(0.1..0.9));

    let mut rng = stream_rng(seed, Stream::Data, &[1]);
    let mut labels: Vec<usize> = (0..n).map(|i| i % num_classes).collect();
    labels.shuffle(&mut rng);

    let noise = Normal::new(0.0, spread).expect("spread must be finite and nonnegative");
    let mut inputs = Array2::zeros((n, input_dim));
    for (mut row, &y) in inputs.rows_mut().into_iter().zip(&labels) {
        for (v, &m) in row.iter_mut().zip(means.row(y)) {
            *v = (m + noise.sample(&mut rng)).clamp(0.0, 1.0);
        }
    }
    Dataset {
        inputs: Arc::new(inputs),
        labels,
        num_classes,
    }
}

/// Per-client index lists into a parent dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub client_indices: Vec<Vec<usize>>,
}

impl Partition {
    pub fn num_clients(&self) -> usize {
        self.client_indices.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.client_indices.iter().map(Vec::len).collect()
    }

    pub fn total(&self) -> usize {
        self.client_indices.iter().map(Vec::len).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quotas {
    /// Heavy-tailed per-client shares of each class.
    Skewed,
    /// Each class split evenly among the clients holding it.
    Equal,
}

/// Class-skewed partition with unequal per-class quotas.
pub fn partition_noniid(
    dataset: &Dataset,
    num_clients: usize,
    classes_per_client: usize,
    seed: u64,
) -> Result<Partition> {
    partition_with_quotas(
        dataset,
        num_clients,
        classes_per_client,
        Quotas::Skewed,
        seed,
    )
}

/// Shard-style partitioner.
///
/// Each client draws `classes_per_client` distinct classes. Every class is
/// then shuffled and handed out in contiguous slices to the clients that drew
/// it: one guaranteed sample each, the rest split by quota weights. Samples
/// are never shared, and a class nobody drew is left unused.
pub fn partition_with_quotas(
    dataset: &Dataset,
    num_clients: usize,
    classes_per_client: usize,
    quotas: Quotas,
    seed: u64,
) -> Result<Partition> {
    let classes = dataset.num_classes;
    if num_clients == 0 {
        return Err(Error::InfeasiblePartition(
            "need at least one client".into(),
        ));
    }
    if classes_per_client == 0 || classes_per_client > classes {
        return Err(Error::InfeasiblePartition(format!(
            "classes_per_client must be in [1, {classes}], got {classes_per_client}"
        )));
    }
    let mut rng = stream_rng(seed, Stream::Partition, &[]);

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &y) in dataset.labels.iter().enumerate() {
        by_class[y].push(i);
    }
    for members in &mut by_class {
        members.shuffle(&mut rng);
    }

    let mut requesters: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for client in 0..num_clients {
        let mut chosen = if classes_per_client == classes {
            (0..classes).collect::<Vec<_>>()
        } else {
            index::sample(&mut rng, classes, classes_per_client).into_vec()
        };
        chosen.sort_unstable();
        for c in chosen {
            requesters[c].push(client);
        }
    }

    let mut client_indices: Vec<Vec<usize>> = vec![Vec::new(); num_clients];
    for (class, holders) in requesters.iter().enumerate() {
        if holders.is_empty() {
            continue;
        }
        let available = by_class[class].len();
        if available < holders.len() {
            return Err(Error::InfeasiblePartition(format!(
                "class {class} has {available} samples but {} clients need it",
                holders.len()
            )));
        }
        let weights: Vec<f64> = match quotas {
            // u^3 with u bounded away from 0 gives ratios up to ~10^5 between shares
            Quotas::Skewed => holders
                .iter()
                .map(|_| rng.gen_range(0.02f64..1.0).powi(3))
                .collect(),
            Quotas::Equal => vec![1.0; holders.len()],
        };
        let total_weight: f64 = weights.iter().sum();
        let spare = available - holders.len();
        let mut cursor = 0;
        for (&client, w) in holders.iter().zip(&weights) {
            let take = 1 + ((w / total_weight) * spare as f64).floor() as usize;
            let take = take.min(available - cursor);
            client_indices[client].extend_from_slice(&by_class[class][cursor..cursor + take]);
            cursor += take;
        }
    }
    for list in &mut client_indices {
        list.sort_unstable();
    }
    Ok(Partition { client_indices })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoisonMode {
    /// `y -> num_classes - 1 - y`
    FlipMap,
    /// A uniformly drawn label different from the original.
    Random,
}

/// Returns a copy of `dataset` with the labels at `indices` corrupted.
///
/// With an odd class count, `FlipMap` leaves the middle class unchanged.
pub fn poison_labels(
    dataset: &Dataset,
    indices: &[usize],
    mode: PoisonMode,
    seed: u64,
) -> Result<Dataset> {
    if let Some(&bad) = indices.iter().find(|&&i| i >= dataset.len()) {
        return Err(Error::IndexOutOfRange {
            index: bad,
            len: dataset.len(),
        });
    }
    let classes = dataset.num_classes;
    let mut labels = dataset.labels.clone();
    let mut rng = stream_rng(seed, Stream::Poison, &[]);
    for &i in indices {
        let y = labels[i];
        labels[i] = match mode {
            PoisonMode::FlipMap => classes - 1 - y,
            PoisonMode::Random => {
                let shift = rng.gen_range(1..classes);
                (y + shift) % classes
            }
        };
    }
    Ok(Dataset {
        inputs: Arc::clone(&dataset.inputs),
        labels,
        num_classes: classes,
    })
}
