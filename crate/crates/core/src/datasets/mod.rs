//! Data ingestion and out-of-distribution split construction.

mod idx;
mod rotation;

pub use idx::{
    load_idx_file, load_mnist_images, parse_idx, parse_idx_header, IdxData, IdxHeader, ImageSet,
    IMAGES_MAGIC, LABELS_MAGIC,
};
pub use rotation::{angle_grid, build_rotation_dataset, rotate_image};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("unsupported IDX magic number {0:#010x}")]
    BadMagic(u32),
    #[error("truncated data: need {expected} bytes, have {got}")]
    Truncated { expected: usize, got: usize },
    #[error("IDX dimensions overflow the address space")]
    DimOverflow,
    #[error("need {needed} base images, only {available} available")]
    InsufficientImages { needed: usize, available: usize },
    #[error("slice pattern {keep}+{slice} does not fit {unique} unique targets")]
    SliceTooWide {
        keep: usize,
        slice: usize,
        unique: usize,
    },
    #[error("missing data file {0}")]
    Missing(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid data configuration: {0}")]
    Config(String),
}

/// One `(input, target)` pair borrowed from a [`Dataset`].
#[derive(Clone, Copy, Debug)]
pub struct LabeledSample<'a> {
    pub input: &'a [f32],
    pub shape: &'a [usize],
    pub target: f32,
}

/// Samples stored contiguously: inputs `[len, sample_shape...]` and scalar targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    sample_shape: Vec<usize>,
    inputs: Vec<f32>,
    targets: Vec<f32>,
}

impl Dataset {
    pub fn new(sample_shape: Vec<usize>, inputs: Vec<f32>, targets: Vec<f32>) -> Result<Self, DataError> {
        let per: usize = sample_shape.iter().product();
        if per == 0 || inputs.len() != per * targets.len() {
            return Err(DataError::Config(format!(
                "{} input values cannot hold {} samples of shape {:?}",
                inputs.len(),
                targets.len(),
                sample_shape
            )));
        }
        if let Some(t) = targets.iter().find(|t| !t.is_finite()) {
            return Err(DataError::Config(format!("non-finite target {t}")));
        }
        Ok(Self {
            sample_shape,
            inputs,
            targets,
        })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.sample_shape
    }

    pub fn sample_len(&self) -> usize {
        self.sample_shape.iter().product()
    }

    pub fn inputs(&self) -> &[f32] {
        &self.inputs
    }

    pub fn targets(&self) -> &[f32] {
        &self.targets
    }

    pub fn input(&self, i: usize) -> &[f32] {
        let n = self.sample_len();
        &self.inputs[i * n..(i + 1) * n]
    }

    pub fn sample(&self, i: usize) -> LabeledSample<'_> {
        LabeledSample {
            input: self.input(i),
            shape: &self.sample_shape,
            target: self.targets[i],
        }
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut inputs = Vec::with_capacity(indices.len() * self.sample_len());
        for &i in indices {
            inputs.extend_from_slice(self.input(i));
        }
        Dataset {
            sample_shape: self.sample_shape.clone(),
            inputs,
            targets: indices.iter().map(|&i| self.targets[i]).collect(),
        }
    }

    /// Gathers the inputs of `indices` into one flat batch buffer.
    pub fn gather(&self, indices: &[usize]) -> (Vec<f32>, Vec<f32>) {
        let mut inputs = Vec::with_capacity(indices.len() * self.sample_len());
        for &i in indices {
            inputs.extend_from_slice(self.input(i));
        }
        (inputs, indices.iter().map(|&i| self.targets[i]).collect())
    }

    /// Distinct target values in ascending order.
    pub fn unique_targets(&self) -> Vec<f32> {
        let mut t = self.targets.clone();
        t.sort_by(|a, b| a.total_cmp(b));
        t.dedup();
        t
    }
}

/// Periodic removal pattern over the sorted unique targets: `keep_width`
/// kept, then `slice_width` removed, starting with a kept run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub slice_width: usize,
    pub keep_width: usize,
}

impl SplitSpec {
    pub fn symmetric(width: usize) -> Self {
        Self {
            slice_width: width,
            keep_width: width,
        }
    }

    /// Whether the `rank`-th smallest unique target is kept.
    pub fn keeps(&self, rank: usize) -> bool {
        rank % (self.keep_width + self.slice_width) < self.keep_width
    }
}

/// A contiguous run of sorted unique targets sharing the same fate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetRun {
    pub kept: bool,
    pub first: f32,
    pub last: f32,
    pub count: usize,
}

#[derive(Clone, Debug)]
pub struct SliceSplit {
    pub train: Dataset,
    pub removed: Dataset,
    pub kept_targets: Vec<f32>,
    pub removed_targets: Vec<f32>,
    pub runs: Vec<TargetRun>,
}

/// Splits a dataset into retained and removed samples by target value.
pub fn apply_slice_removal(ds: &Dataset, spec: SplitSpec) -> Result<SliceSplit, DataError> {
    let unique = ds.unique_targets();
    if spec.slice_width == 0 || spec.keep_width == 0 {
        return Err(DataError::Config("slice and keep widths must be positive".into()));
    }
    if spec.slice_width + spec.keep_width > unique.len() {
        return Err(DataError::SliceTooWide {
            keep: spec.keep_width,
            slice: spec.slice_width,
            unique: unique.len(),
        });
    }
    let mut kept_targets = Vec::new();
    let mut removed_targets = Vec::new();
    let mut runs: Vec<TargetRun> = Vec::new();
    for (rank, &t) in unique.iter().enumerate() {
        let kept = spec.keeps(rank);
        if kept {
            kept_targets.push(t);
        } else {
            removed_targets.push(t);
        }
        match runs.last_mut() {
            Some(run) if run.kept == kept => {
                run.last = t;
                run.count += 1;
            }
            _ => runs.push(TargetRun {
                kept,
                first: t,
                last: t,
                count: 1,
            }),
        }
    }
    let (mut keep_idx, mut drop_idx) = (Vec::new(), Vec::new());
    for (i, t) in ds.targets().iter().enumerate() {
        if kept_targets.binary_search_by(|k| k.total_cmp(t)).is_ok() {
            keep_idx.push(i);
        } else {
            drop_idx.push(i);
        }
    }
    Ok(SliceSplit {
        train: ds.subset(&keep_idx),
        removed: ds.subset(&drop_idx),
        kept_targets,
        removed_targets,
        runs,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SmoothFn {
    /// `sin(2 pi x)`
    Sine,
    /// `x^3`
    Cubic,
}

impl SmoothFn {
    pub fn eval(self, x: f64) -> f64 {
        match self {
            SmoothFn::Sine => (2.0 * std::f64::consts::PI * x).sin(),
            SmoothFn::Cubic => x * x * x,
        }
    }

    /// Integral of the function over `[0, 1]`.
    pub fn mean_on_unit_interval(self) -> f64 {
        match self {
            SmoothFn::Sine => 0.0,
            SmoothFn::Cubic => 0.25,
        }
    }
}

/// `x ~ U[0, 1]`, `y = f(x) + N(0, noise_sd^2)`.
pub fn synth_smooth_regression<R: Rng + ?Sized>(
    f: SmoothFn,
    n_points: usize,
    noise_sd: f64,
    rng: &mut R,
) -> Result<Dataset, DataError> {
    if n_points < 2 {
        return Err(DataError::Config("need at least two points".into()));
    }
    let noise = Normal::new(0.0, noise_sd.max(0.0)).map_err(|e| DataError::Config(e.to_string()))?;
    let mut xs = Vec::with_capacity(n_points);
    let mut ys = Vec::with_capacity(n_points);
    for _ in 0..n_points {
        let x: f64 = rng.gen();
        let eps = if noise_sd > 0.0 { noise.sample(rng) } else { 0.0 };
        xs.push(x as f32);
        ys.push((f.eval(x) + eps) as f32);
    }
    Dataset::new(vec![1], xs, ys)
}

/// Two aligned index batches: sample `i[k]` is paired with anchor `j[k]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairBatch {
    pub i: Vec<usize>,
    pub j: Vec<usize>,
}

/// Two independently shuffled passes over the same dataset, zipped batch by
/// batch. The trailing partial batch is dropped.
#[derive(Clone, Debug)]
pub struct PairLoader {
    len: usize,
    batch_size: usize,
}

impl PairLoader {
    pub fn new(len: usize, batch_size: usize) -> Result<Self, DataError> {
        if batch_size == 0 || batch_size > len {
            return Err(DataError::Config(format!(
                "batch size {batch_size} must be in 1..={len}"
            )));
        }
        Ok(Self { len, batch_size })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.len / self.batch_size
    }

    /// Reshuffles both streams and returns the epoch's pair batches.
    pub fn epoch<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<PairBatch> {
        let mut a: Vec<usize> = (0..self.len).collect();
        let mut b = a.clone();
        a.shuffle(rng);
        b.shuffle(rng);
        a.chunks_exact(self.batch_size)
            .zip(b.chunks_exact(self.batch_size))
            .map(|(i, j)| PairBatch {
                i: i.to_vec(),
                j: j.to_vec(),
            })
            .collect()
    }
}

/// Convenience wrapper matching the loader contract: a full epoch of pair batches.
pub fn pair_loader<R: Rng + ?Sized>(
    ds: &Dataset,
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<PairBatch>, DataError> {
    Ok(PairLoader::new(ds.len(), batch_size)?.epoch(rng))
}
