//! Datasets and task streams.
//!
//! * IDX (MNIST) parsing, optionally gzip-compressed.
//! * Permuted-pixel, split-class and synthetic rotated-cluster task streams.
//! * Stratified, seeded train/validation/test splitting.

use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_for;
use crate::tensor::Tensor;
use crate::TaskId;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Inputs `[N, D]` with integer labels in `[0, classes)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl LabeledDataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Dataset(
                "dataset must contain at least one sample".into(),
            ));
        }
        if inputs.rows() != labels.len() {
            return Err(Error::Dataset(format!(
                "{} input rows but {} labels",
                inputs.rows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Dataset(format!(
                "label {bad} >= class count {classes}"
            )));
        }
        Ok(LabeledDataset {
            inputs,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> usize {
        self.inputs.row_len()
    }

    pub fn subset(&self, idx: &[usize]) -> LabeledDataset {
        LabeledDataset {
            inputs: self.inputs.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }

    /// Keep at most the first `n` samples.
    pub fn truncate(&self, n: usize) -> LabeledDataset {
        if n >= self.len() {
            return self.clone();
        }
        self.subset(&(0..n).collect::<Vec<_>>())
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

/// Contents of one IDX file.
#[derive(Debug, Clone, PartialEq)]
pub enum IdxData {
    /// Pixels scaled to `[0, 1]`, shape `[N, rows * cols]`.
    Images {
        rows: usize,
        cols: usize,
        pixels: Tensor,
    },
    Labels(Vec<u8>),
}

fn read_be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Idx {
            offset,
            reason: format!("truncated header, file has {} bytes", bytes.len()),
        })
}

/// Parse an uncompressed IDX buffer (unsigned-byte payload only).
pub fn parse_idx(bytes: &[u8]) -> Result<IdxData> {
    let magic = read_be_u32(bytes, 0)?;
    let ndims = match magic {
        IDX_IMAGES_MAGIC => 3,
        IDX_LABELS_MAGIC => 1,
        other => {
            return Err(Error::Idx {
                offset: 0,
                reason: format!("bad magic 0x{other:08X}"),
            })
        }
    };
    let mut dims = Vec::with_capacity(ndims);
    for i in 0..ndims {
        dims.push(read_be_u32(bytes, 4 + 4 * i)? as usize);
    }
    let header = 4 + 4 * ndims;
    let total = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Idx {
            offset: 4,
            reason: format!("dimension product overflows: {dims:?}"),
        })?;
    if dims.contains(&0) {
        return Err(Error::Idx {
            offset: 4,
            reason: format!("zero dimension in {dims:?}"),
        });
    }
    let payload = &bytes[header..];
    if payload.len() < total {
        return Err(Error::Idx {
            offset: header + payload.len(),
            reason: format!(
                "truncated payload: need {total} bytes, found {}",
                payload.len()
            ),
        });
    }
    let payload = &payload[..total];
    Ok(match magic {
        IDX_IMAGES_MAGIC => {
            let (n, rows, cols) = (dims[0], dims[1], dims[2]);
            let data = payload.iter().map(|&b| f64::from(b) / 255.0).collect();
            IdxData::Images {
                rows,
                cols,
                pixels: Tensor::new(vec![n, rows * cols], data)?,
            }
        }
        _ => IdxData::Labels(payload.to_vec()),
    })
}

/// Read an IDX file, transparently gunzipping `.gz` content.
pub fn load_idx_file(path: &Path) -> Result<IdxData> {
    let raw = std::fs::read(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out)?;
        parse_idx(&out)
    } else {
        parse_idx(&raw)
    }
}

/// Load an image/label IDX pair into a dataset of flattened images.
pub fn load_mnist(images: &Path, labels: &Path) -> Result<(LabeledDataset, (usize, usize))> {
    let IdxData::Images { rows, cols, pixels } = load_idx_file(images)? else {
        return Err(Error::Dataset(format!(
            "{} is not an image file",
            images.display()
        )));
    };
    let IdxData::Labels(l) = load_idx_file(labels)? else {
        return Err(Error::Dataset(format!(
            "{} is not a label file",
            labels.display()
        )));
    };
    let labels: Vec<usize> = l.into_iter().map(usize::from).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1).max(10);
    Ok((LabeledDataset::new(pixels, labels, classes)?, (rows, cols)))
}

/// Average-pool flattened `rows x cols` images by `factor`.
pub fn downsample(
    ds: &LabeledDataset,
    rows: usize,
    cols: usize,
    factor: usize,
) -> Result<LabeledDataset> {
    if factor == 0
        || !rows.is_multiple_of(factor)
        || !cols.is_multiple_of(factor)
        || ds.features() != rows * cols
    {
        return Err(Error::InvalidArgument(format!(
            "cannot pool {rows}x{cols} images of {} features by {factor}",
            ds.features()
        )));
    }
    let (oh, ow) = (rows / factor, cols / factor);
    let norm = (factor * factor) as f64;
    let mut out = Vec::with_capacity(ds.len() * oh * ow);
    for i in 0..ds.len() {
        let img = ds.inputs.row(i);
        for y in 0..oh {
            for x in 0..ow {
                let mut s = 0.0;
                for dy in 0..factor {
                    for dx in 0..factor {
                        s += img[(y * factor + dy) * cols + x * factor + dx];
                    }
                }
                out.push(s / norm);
            }
        }
    }
    LabeledDataset::new(
        Tensor::new(vec![ds.len(), oh * ow], out)?,
        ds.labels.clone(),
        ds.classes,
    )
}

/// Train / validation / test partition of one task.
#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: LabeledDataset,
    pub val: LabeledDataset,
    pub test: LabeledDataset,
}

impl Splits {
    fn map(&self, f: impl Fn(&LabeledDataset) -> Result<LabeledDataset>) -> Result<Splits> {
        Ok(Splits {
            train: f(&self.train)?,
            val: f(&self.val)?,
            test: f(&self.test)?,
        })
    }
}

/// Stratified seeded split. Per class, the cut points are the rounded
/// cumulative fractions, so every split holds its ideal share of each class
/// to within one sample.
pub fn split(ds: &LabeledDataset, fractions: [f64; 3], seed: u64) -> Result<Splits> {
    if fractions.iter().any(|&f| !(f > 0.0)) || fractions.iter().sum::<f64>() > 1.0 + 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "split fractions must be positive and sum to at most 1, got {fractions:?}"
        )));
    }
    let mut rng = rng_for(seed, &[0x5011]);
    let mut parts: [Vec<usize>; 3] = Default::default();
    for class in 0..ds.classes {
        let mut idx: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == class).collect();
        idx.shuffle(&mut rng);
        let n = idx.len() as f64;
        let mut cum = 0.0;
        let mut start = 0;
        for (part, &f) in parts.iter_mut().zip(&fractions) {
            cum += f;
            let end = ((n * cum).round() as usize).min(idx.len());
            part.extend_from_slice(&idx[start..end]);
            start = end;
        }
    }
    for (name, part) in ["train", "validation", "test"].iter().zip(parts.iter_mut()) {
        if part.is_empty() {
            return Err(Error::Dataset(format!("{name} split is empty")));
        }
        part.shuffle(&mut rng);
    }
    Ok(Splits {
        train: ds.subset(&parts[0]),
        val: ds.subset(&parts[1]),
        test: ds.subset(&parts[2]),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    /// One classifier shared by every task.
    Shared,
    /// A fresh classifier per task.
    PerTask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TaskTransform {
    PermutePixels { seed: u64 },
    ClassSubset { classes: Vec<usize> },
    Synthetic { angle_deg: f64, cluster_seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: TaskId,
    pub transform: TaskTransform,
    pub class_count: usize,
    pub head_mode: HeadMode,
}

/// A task of a stream together with its data.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub spec: TaskSpec,
    pub splits: Splits,
}

impl TaskData {
    pub fn id(&self) -> TaskId {
        self.spec.task_id
    }
}

/// Pixel permutation for a task. Task 0 keeps the canonical pixel order.
pub fn task_permutation(task: TaskId, seed: u64, dim: usize) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..dim).collect();
    if task > 0 {
        perm.shuffle(&mut rng_for(seed, &[0xbe4e, task as u64]));
    }
    perm
}

/// `out[j] = in[perm[j]]` for every row.
pub fn apply_permutation(ds: &LabeledDataset, perm: &[usize]) -> Result<LabeledDataset> {
    let d = ds.features();
    if perm.len() != d {
        return Err(Error::InvalidArgument(format!(
            "permutation of length {} for {d} features",
            perm.len()
        )));
    }
    let mut out = Vec::with_capacity(ds.len() * d);
    for i in 0..ds.len() {
        let row = ds.inputs.row(i);
        out.extend(perm.iter().map(|&p| row[p]));
    }
    LabeledDataset::new(
        Tensor::new(ds.inputs.shape().to_vec(), out)?,
        ds.labels.clone(),
        ds.classes,
    )
}

pub fn invert_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (j, &p) in perm.iter().enumerate() {
        inv[p] = j;
    }
    inv
}

/// Permuted-pixel stream. Every split of a task shares the task's permutation
/// and labels are never touched.
pub fn make_permuted_tasks(base: &Splits, count: usize, seed: u64) -> Result<Vec<TaskData>> {
    if count == 0 {
        return Err(Error::InvalidArgument(
            "task count must be at least 1".into(),
        ));
    }
    let dim = base.train.features();
    (0..count)
        .map(|task| {
            let perm = task_permutation(task, seed, dim);
            Ok(TaskData {
                spec: TaskSpec {
                    task_id: task,
                    transform: TaskTransform::PermutePixels { seed },
                    class_count: base.train.classes,
                    head_mode: HeadMode::Shared,
                },
                splits: base.map(|d| apply_permutation(d, &perm))?,
            })
        })
        .collect()
}

/// Restrict to `classes` and relabel them `0..classes.len()` in list order.
fn class_subset(ds: &LabeledDataset, classes: &[usize]) -> Result<LabeledDataset> {
    let idx: Vec<usize> = (0..ds.len())
        .filter(|&i| classes.contains(&ds.labels[i]))
        .collect();
    if idx.is_empty() {
        return Err(Error::Dataset(format!(
            "no samples for classes {classes:?}"
        )));
    }
    let mut sub = ds.subset(&idx);
    for l in &mut sub.labels {
        *l = classes.iter().position(|c| c == l).expect("filtered");
    }
    sub.classes = classes.len();
    Ok(sub)
}

/// Split-class stream: task `i` owns classes `[i*k, (i+1)*k)`, relabelled to `[0, k)`.
pub fn make_split_tasks(base: &Splits, count: usize) -> Result<Vec<TaskData>> {
    let classes = base.train.classes;
    if count == 0 || !classes.is_multiple_of(count) {
        return Err(Error::InvalidArgument(format!(
            "{classes} classes cannot be divided evenly into {count} tasks"
        )));
    }
    let k = classes / count;
    (0..count)
        .map(|task| {
            let subset: Vec<usize> = (task * k..(task + 1) * k).collect();
            Ok(TaskData {
                spec: TaskSpec {
                    task_id: task,
                    transform: TaskTransform::ClassSubset {
                        classes: subset.clone(),
                    },
                    class_count: k,
                    head_mode: HeadMode::PerTask,
                },
                splits: base.map(|d| class_subset(d, &subset))?,
            })
        })
        .collect()
}

/// Gaussian-cluster tasks whose class means are rotations of task 0's means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub clusters: usize,
    pub dim: usize,
    /// Per-coordinate standard deviation of every cluster.
    pub noise_std: f64,
    /// Standard deviation of the random cluster means.
    pub mean_scale: f64,
    /// One rotation angle (degrees) per task.
    pub angles_deg: Vec<f64>,
    pub samples_per_task: usize,
    pub cluster_seed: u64,
    pub sample_seed: u64,
    pub split: [f64; 3],
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            clusters: 4,
            dim: 8,
            noise_std: 1.0,
            mean_scale: 1.0,
            angles_deg: vec![0.0, 90.0, 0.0],
            samples_per_task: 1200,
            cluster_seed: 11,
            sample_seed: 12,
            split: [0.6, 0.2, 0.2],
        }
    }
}

/// Rotate every coordinate pair `(2i, 2i+1)` by `angle_deg`; an odd last
/// coordinate is left in place.
pub fn rotate_pairs(v: &[f64], angle_deg: f64) -> Vec<f64> {
    let (s, c) = angle_deg.to_radians().sin_cos();
    let mut out = v.to_vec();
    for pair in out.chunks_exact_mut(2) {
        let (x, y) = (pair[0], pair[1]);
        pair[0] = c * x - s * y;
        pair[1] = s * x + c * y;
    }
    out
}

/// Random cluster means of task 0.
pub fn synthetic_means(cfg: &SyntheticConfig) -> Vec<Vec<f64>> {
    let mut rng = rng_for(cfg.cluster_seed, &[0xc105]);
    (0..cfg.clusters)
        .map(|_| {
            (0..cfg.dim)
                .map(|_| cfg.mean_scale * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect()
}

/// Draw a balanced sample around the given class means.
pub fn sample_clusters(
    means: &[Vec<f64>],
    noise_std: f64,
    n: usize,
    seed: u64,
) -> Result<LabeledDataset> {
    let mut rng = rng_for(seed, &[0x5a3]);
    let dim = means.first().map_or(0, Vec::len);
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % means.len();
        for &m in &means[class] {
            data.push(m + noise_std * rng.sample::<f64, _>(StandardNormal));
        }
        labels.push(class);
    }
    LabeledDataset::new(Tensor::new(vec![n, dim], data)?, labels, means.len())
}

pub fn make_synthetic_tasks(cfg: &SyntheticConfig) -> Result<Vec<TaskData>> {
    if cfg.clusters < 2 || cfg.dim < 2 || cfg.angles_deg.is_empty() || cfg.samples_per_task < 3 {
        return Err(Error::InvalidArgument(
            "synthetic tasks need >= 2 clusters, >= 2 dims, >= 1 angle and >= 3 samples".into(),
        ));
    }
    let base = synthetic_means(cfg);
    cfg.angles_deg
        .iter()
        .enumerate()
        .map(|(task, &angle)| {
            let means: Vec<Vec<f64>> = base.iter().map(|m| rotate_pairs(m, angle)).collect();
            let seed = crate::rng::derive_seed(cfg.sample_seed, &[task as u64]);
            let ds = sample_clusters(&means, cfg.noise_std, cfg.samples_per_task, seed)?;
            Ok(TaskData {
                spec: TaskSpec {
                    task_id: task,
                    transform: TaskTransform::Synthetic {
                        angle_deg: angle,
                        cluster_seed: cfg.cluster_seed,
                    },
                    class_count: cfg.clusters,
                    head_mode: HeadMode::PerTask,
                },
                splits: split(&ds, cfg.split, seed)?,
            })
        })
        .collect()
}
