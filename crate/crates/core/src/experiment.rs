//! Experiment configuration, dataset preparation and caching, and the
//! per-seed training driver with best-by-train-MAE selection.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::datasets::{
    apply_slice_removal, build_rotation_dataset, load_mnist_images, DataError, Dataset, PairLoader, SmoothFn,
    SplitSpec, TargetRun,
};
use crate::models::{read_container, write_container, CnnSpec, ModelError, ModelSpec, SplitModel};
use crate::regularizers::{Method, MixupConfig, RegularizerError};
use crate::trainer::{mae, predict_dataset, train_epoch, EpochStats, Sgd, TrainConfig, TrainError};

/// Environment variable overriding the MNIST directory.
pub const DATA_DIR_ENV: &str = "AMIX_DATA_DIR";

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl From<RegularizerError> for ExperimentError {
    fn from(e: RegularizerError) -> Self {
        ExperimentError::Config(e.to_string())
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RotationConfig {
    /// Number of equally spaced angles on `[0, 180)`.
    pub angle_count: usize,
    /// Training images rendered per angle.
    pub per_angle: usize,
    /// Test images rendered per angle from the held-out base images.
    pub test_per_angle: usize,
    /// Use at most this many base images (all when absent).
    pub base_images: Option<usize>,
    /// Fraction of base images reserved for the test set.
    pub test_fraction: f64,
    pub split: Option<SplitSpec>,
    pub seed: u64,
}

impl Default for RotationConfig {
    fn default() -> Self {
        Self {
            angle_count: 360,
            per_angle: 20,
            test_per_angle: 3,
            base_images: None,
            test_fraction: 0.2,
            split: Some(SplitSpec::symmetric(100)),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub function: SmoothFn,
    pub n_train: usize,
    /// Noise-free test points on an even grid over `[0, 1]`.
    pub n_test: usize,
    pub noise_sd: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            function: SmoothFn::Sine,
            n_train: 256,
            n_test: 64,
            noise_sd: 0.05,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case")]
pub enum DataConfig {
    RotationMnist(RotationConfig),
    Synthetic(SyntheticConfig),
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::RotationMnist(RotationConfig::default())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Training seed: model init, loader shuffles, and mixup draws.
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub mixup: MixupConfig,
    pub data_dir: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig::default(),
            model: ModelSpec::Cnn(CnnSpec::default()),
            train: TrainConfig::default(),
            mixup: MixupConfig::default(),
            data_dir: None,
            cache_dir: None,
            output_dir: None,
        }
    }
}

/// Hex SHA-256 of the canonical JSON form (object keys sorted).
pub fn stable_hash<S: Serialize>(value: &S) -> String {
    let v = serde_json::to_value(value).expect("config serializes");
    let canonical = serde_json::to_string(&v).expect("value serializes");
    hex::encode(Sha256::digest(canonical.as_bytes()))
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ExperimentError> {
        self.mixup.validate()?;
        self.train.validate()?;
        match &self.data {
            DataConfig::RotationMnist(r) => {
                if r.angle_count == 0 || r.per_angle == 0 || r.test_per_angle == 0 {
                    return Err(ExperimentError::Config("angle and image counts must be positive".into()));
                }
                if !(r.test_fraction > 0.0 && r.test_fraction < 1.0) {
                    return Err(ExperimentError::Config("test_fraction must lie in (0, 1)".into()));
                }
            }
            DataConfig::Synthetic(s) => {
                if s.n_train < 2 || s.n_test < 2 {
                    return Err(ExperimentError::Config("synthetic sets need at least two points".into()));
                }
            }
        }
        let expected = match &self.data {
            DataConfig::RotationMnist(_) => None,
            DataConfig::Synthetic(_) => Some(vec![1]),
        };
        if let Some(shape) = expected {
            if self.model.input_shape() != shape {
                return Err(ExperimentError::Config(format!(
                    "model input {:?} does not match data shape {shape:?}",
                    self.model.input_shape()
                )));
            }
        }
        Ok(())
    }

    /// Identity of a run family: everything except the training seed and
    /// filesystem locations.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.seed = 0;
        c.data_dir = None;
        c.cache_dir = None;
        c.output_dir = None;
        stable_hash(&c)
    }

    pub fn data_hash(&self) -> String {
        stable_hash(&self.data)
    }

    /// MNIST directory: the config value, then the environment, then `data/mnist5k`.
    pub fn resolved_data_dir(&self) -> PathBuf {
        self.data_dir
            .clone()
            .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("data/mnist5k"))
    }

    pub fn from_toml_str(s: &str) -> Result<Self, ExperimentError> {
        let cfg: Self = toml::from_str(s).map_err(|e| ExperimentError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = fs::read_to_string(path).map_err(|e| ExperimentError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }
}

/// Training and test sets plus the bookkeeping of the target split.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedData {
    pub train: Dataset,
    pub test: Dataset,
    /// Targets present in training; empty when no split was applied.
    pub kept_targets: Vec<f32>,
    pub removed_targets: Vec<f32>,
    pub runs: Vec<TargetRun>,
}

impl PreparedData {
    pub fn is_in_distribution(&self, target: f32) -> bool {
        self.removed_targets.is_empty()
            || self
                .removed_targets
                .binary_search_by(|t| t.total_cmp(&target))
                .is_err()
    }
}

/// Builds the datasets described by `cfg` from scratch.
pub fn prepare_data(cfg: &DataConfig, data_dir: &Path) -> Result<PreparedData, ExperimentError> {
    match cfg {
        DataConfig::RotationMnist(r) => {
            let mut base = load_mnist_images(data_dir)?;
            if let Some(limit) = r.base_images {
                base = base.slice(0..limit.min(base.count));
            }
            let mut order: Vec<usize> = (0..base.count).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(r.seed ^ 0x5eed_ba5e));
            let n_test = ((base.count as f64) * r.test_fraction).round() as usize;
            let pick = |idx: &[usize]| {
                let mut set = base.slice(0..0);
                set.count = idx.len();
                for &i in idx {
                    set.pixels.extend_from_slice(base.image(i));
                }
                set
            };
            let test_pool = pick(&order[..n_test]);
            let train_pool = pick(&order[n_test..]);
            let train = build_rotation_dataset(&train_pool, r.angle_count, r.per_angle, r.seed)?;
            let test = build_rotation_dataset(&test_pool, r.angle_count, r.test_per_angle, r.seed.wrapping_add(1))?;
            match r.split {
                Some(spec) => {
                    let split = apply_slice_removal(&train, spec)?;
                    Ok(PreparedData {
                        train: split.train,
                        test,
                        kept_targets: split.kept_targets,
                        removed_targets: split.removed_targets,
                        runs: split.runs,
                    })
                }
                None => Ok(PreparedData {
                    train,
                    test,
                    kept_targets: Vec::new(),
                    removed_targets: Vec::new(),
                    runs: Vec::new(),
                }),
            }
        }
        DataConfig::Synthetic(s) => {
            let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
            let train = crate::datasets::synth_smooth_regression(s.function, s.n_train, s.noise_sd, &mut rng)?;
            let xs: Vec<f32> = (0..s.n_test).map(|k| k as f32 / (s.n_test - 1) as f32).collect();
            let ys = xs.iter().map(|&x| s.function.eval(x as f64) as f32).collect();
            let test = Dataset::new(vec![1], xs, ys)?;
            Ok(PreparedData {
                train,
                test,
                kept_targets: Vec::new(),
                removed_targets: Vec::new(),
                runs: Vec::new(),
            })
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CacheSidecar {
    data_hash: String,
    data: DataConfig,
    sample_shape: Vec<usize>,
    train_len: usize,
    test_len: usize,
    runs: Vec<TargetRun>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CacheStatus {
    Hit,
    Written,
}

pub fn cache_paths(cache_dir: &Path, data_hash: &str) -> (PathBuf, PathBuf) {
    (
        cache_dir.join(format!("{data_hash}.amxm")),
        cache_dir.join(format!("{data_hash}.json")),
    )
}

fn vec_tensor(v: &[f32]) -> Tensor<f32> {
    Tensor::new(vec![v.len()], v.to_vec()).expect("1-d tensor")
}

pub fn write_cache(cache_dir: &Path, cfg: &DataConfig, data: &PreparedData) -> Result<(), ExperimentError> {
    fs::create_dir_all(cache_dir).map_err(io_err(cache_dir))?;
    let hash = stable_hash(cfg);
    let (bin, json) = cache_paths(cache_dir, &hash);
    let tensors = [
        vec_tensor(data.train.inputs()),
        vec_tensor(data.train.targets()),
        vec_tensor(data.test.inputs()),
        vec_tensor(data.test.targets()),
        vec_tensor(&data.kept_targets),
        vec_tensor(&data.removed_targets),
    ];
    let mut buf = Vec::new();
    write_container(&mut buf, &hash, &tensors).map_err(ModelError::from)?;
    fs::write(&bin, buf).map_err(io_err(&bin))?;
    let sidecar = CacheSidecar {
        data_hash: hash,
        data: cfg.clone(),
        sample_shape: data.train.sample_shape().to_vec(),
        train_len: data.train.len(),
        test_len: data.test.len(),
        runs: data.runs.clone(),
    };
    let text = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
    fs::write(&json, text).map_err(io_err(&json))?;
    Ok(())
}

pub fn read_cache(cache_dir: &Path, cfg: &DataConfig) -> Result<Option<PreparedData>, ExperimentError> {
    let hash = stable_hash(cfg);
    let (bin, json) = cache_paths(cache_dir, &hash);
    if !bin.exists() || !json.exists() {
        return Ok(None);
    }
    let sidecar: CacheSidecar = serde_json::from_str(&fs::read_to_string(&json).map_err(io_err(&json))?)
        .map_err(|e| DataError::Config(format!("{}: {e}", json.display())))?;
    let bytes = fs::read(&bin).map_err(io_err(&bin))?;
    let (tag, tensors) = read_container(&bytes[..]).map_err(ModelError::from)?;
    if tag != hash || sidecar.data_hash != hash || tensors.len() != 6 {
        return Err(DataError::Config(format!("cache entry {} is inconsistent", bin.display())).into());
    }
    let mut it = tensors.into_iter().map(Tensor::into_data);
    let mut next = || it.next().expect("six tensors");
    let train = Dataset::new(sidecar.sample_shape.clone(), next(), next())?;
    let test = Dataset::new(sidecar.sample_shape, next(), next())?;
    Ok(Some(PreparedData {
        train,
        test,
        kept_targets: next(),
        removed_targets: next(),
        runs: sidecar.runs,
    }))
}

/// Loads the prepared data from the cache, building and storing it on a miss.
pub fn prepare_cached(
    cfg: &DataConfig,
    data_dir: &Path,
    cache_dir: &Path,
) -> Result<(PreparedData, CacheStatus), ExperimentError> {
    if let Some(data) = read_cache(cache_dir, cfg)? {
        return Ok((data, CacheStatus::Hit));
    }
    let data = prepare_data(cfg, data_dir)?;
    write_cache(cache_dir, cfg, &data)?;
    Ok((data, CacheStatus::Written))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mae: f64,
    pub test_mae: f64,
    pub loss: f64,
    pub penalty_mean: f64,
    pub skipped_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinError {
    pub target: f64,
    pub mae: f64,
    pub count: usize,
    pub in_distribution: bool,
}

/// Training-recipe values that the reference setup leaves open.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecipeNote {
    pub batch_size: usize,
    pub epochs: usize,
    pub chosen_defaults: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub config_hash: String,
    pub seed: u64,
    pub method: Method,
    pub beta: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub epochs: Vec<EpochRecord>,
    /// Epoch with the lowest training MAE; its test MAE is the reported one.
    pub best_epoch: usize,
    pub train_mae: f64,
    pub test_mae: f64,
    /// Test MAE over targets seen in training, and over removed targets.
    pub id_test_mae: Option<f64>,
    pub ood_test_mae: Option<f64>,
    /// Per-target test error of the selected checkpoint.
    pub bins: Vec<BinError>,
    pub kept_runs: Vec<TargetRun>,
    pub wallclock_s: f64,
    pub recipe: RecipeNote,
    pub config: ExperimentConfig,
}

impl ExperimentRecord {
    pub fn file_stem(&self) -> String {
        format!("{}-s{}", &self.config_hash[..12], self.seed)
    }
}

fn bin_errors(preds: &[f64], data: &PreparedData) -> Vec<BinError> {
    let mut acc: BTreeMap<u32, (f32, f64, usize)> = BTreeMap::new();
    for (p, &y) in preds.iter().zip(data.test.targets()) {
        // order-preserving key for non-negative and negative floats alike
        let bits = y.to_bits();
        let key = if y.is_sign_negative() { !bits } else { bits | 0x8000_0000 };
        let e = acc.entry(key).or_insert((y, 0.0, 0));
        e.1 += (p - y as f64).abs();
        e.2 += 1;
    }
    acc.into_values()
        .map(|(t, sum, n)| BinError {
            target: t as f64,
            mae: sum / n as f64,
            count: n,
            in_distribution: data.is_in_distribution(t),
        })
        .collect()
}

fn subset_mae(bins: &[BinError], in_distribution: bool) -> Option<f64> {
    let (sum, n) = bins
        .iter()
        .filter(|b| b.in_distribution == in_distribution)
        .fold((0.0, 0usize), |(s, n), b| (s + b.mae * b.count as f64, n + b.count));
    (n > 0).then(|| sum / n as f64)
}

fn save_model(model: &SplitModel<f32>, path: &Path) -> Result<(), ExperimentError> {
    let mut buf = Vec::new();
    model.save_checkpoint(&mut buf)?;
    fs::write(path, buf).map_err(io_err(path))
}

/// Trains one seed on prepared data.
pub fn run_with_data(cfg: &ExperimentConfig, data: &PreparedData) -> Result<ExperimentRecord, ExperimentError> {
    cfg.validate()?;
    if data.train.sample_shape() != cfg.model.input_shape().as_slice() {
        return Err(ExperimentError::Config(format!(
            "model input {:?} does not match data shape {:?}",
            cfg.model.input_shape(),
            data.train.sample_shape()
        )));
    }
    let start = Instant::now();
    let hash = cfg.hash();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = SplitModel::<f32>::from_spec(&cfg.model, &mut rng)?;
    let mut opt = Sgd::new(cfg.train.learning_rate, cfg.train.momentum, model.params());
    let loader = PairLoader::new(data.train.len(), cfg.train.batch_size)?;
    let ckpt_dir = cfg
        .output_dir
        .as_ref()
        .map(|d| d.join("checkpoints").join(format!("{}-s{}", &hash[..12], cfg.seed)));
    if let Some(d) = &ckpt_dir {
        fs::create_dir_all(d).map_err(io_err(d))?;
    }

    let mut epochs = Vec::with_capacity(cfg.train.epochs);
    let mut best: Option<(usize, f64, SplitModel<f32>)> = None;
    for epoch in 0..cfg.train.epochs {
        let batches = loader.epoch(&mut rng);
        let stats: EpochStats = train_epoch(
            &mut model,
            &data.train,
            &batches,
            &cfg.mixup,
            &cfg.train,
            &mut opt,
            &mut rng,
            epoch,
        )?;
        let train_mae = mae(&model, &data.train, cfg.train.eval_batch)?;
        let test_mae = mae(&model, &data.test, cfg.train.eval_batch)?;
        if !train_mae.is_finite() || !test_mae.is_finite() {
            return Err(TrainError::NonFinite {
                epoch,
                batch: batches.len(),
                penalty: stats.penalty_mean,
                skipped_ratio: stats.skipped_ratio(),
            }
            .into());
        }
        epochs.push(EpochRecord {
            epoch,
            train_mae,
            test_mae,
            loss: stats.loss_mean,
            penalty_mean: stats.penalty_mean,
            skipped_ratio: stats.skipped_ratio(),
        });
        if best.as_ref().is_none_or(|(_, m, _)| train_mae < *m) {
            best = Some((epoch, train_mae, model.clone()));
            if let Some(d) = &ckpt_dir {
                save_model(&model, &d.join("best.amxm"))?;
            }
        }
        if let Some(d) = &ckpt_dir {
            save_model(&model, &d.join("last.amxm"))?;
        }
    }
    let (best_epoch, train_mae, best_model) = best.expect("at least one epoch");
    let preds = predict_dataset(&best_model, &data.test, cfg.train.eval_batch)?;
    let bins = bin_errors(&preds, data);
    let has_split = !data.removed_targets.is_empty();
    Ok(ExperimentRecord {
        config_hash: hash,
        seed: cfg.seed,
        method: cfg.mixup.method,
        beta: cfg.mixup.beta,
        lambda: cfg.mixup.lambda,
        alpha: cfg.mixup.alpha,
        test_mae: epochs[best_epoch].test_mae,
        epochs,
        best_epoch,
        train_mae,
        id_test_mae: if has_split { subset_mae(&bins, true) } else { None },
        ood_test_mae: if has_split { subset_mae(&bins, false) } else { None },
        bins,
        kept_runs: data.runs.clone(),
        wallclock_s: start.elapsed().as_secs_f64(),
        recipe: RecipeNote {
            batch_size: cfg.train.batch_size,
            epochs: cfg.train.epochs,
            chosen_defaults: vec!["batch_size".into(), "epochs".into()],
        },
        config: cfg.clone(),
    })
}

/// Prepares (or loads cached) data and trains one seed.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentRecord, ExperimentError> {
    cfg.validate()?;
    let data = match &cfg.cache_dir {
        Some(dir) => prepare_cached(&cfg.data, &cfg.resolved_data_dir(), dir)?.0,
        None => prepare_data(&cfg.data, &cfg.resolved_data_dir())?,
    };
    run_with_data(cfg, &data)
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub test_mae_mean: f64,
    pub test_mae_std: f64,
    pub records: Vec<ExperimentRecord>,
}

/// Runs seeds `cfg.seed .. cfg.seed + k`, using up to `workers` threads.
/// Records are returned in seed order whatever the scheduling.
pub fn run_seeds(
    cfg: &ExperimentConfig,
    data: &PreparedData,
    k: usize,
    workers: usize,
) -> Result<SeedSummary, ExperimentError> {
    if k == 0 {
        return Err(ExperimentError::Config("need at least one seed".into()));
    }
    let seeds: Vec<u64> = (0..k as u64).map(|s| cfg.seed + s).collect();
    let configs: Vec<ExperimentConfig> = seeds
        .iter()
        .map(|&seed| ExperimentConfig { seed, ..cfg.clone() })
        .collect();
    let workers = workers.clamp(1, k);
    let mut slots: Vec<Option<Result<ExperimentRecord, ExperimentError>>> = (0..k).map(|_| None).collect();
    std::thread::scope(|scope| {
        let chunks: Vec<_> = slots.chunks_mut(k.div_ceil(workers)).enumerate().collect();
        let per = k.div_ceil(workers);
        for (c, chunk) in chunks {
            let configs = &configs;
            scope.spawn(move || {
                for (o, slot) in chunk.iter_mut().enumerate() {
                    *slot = Some(run_with_data(&configs[c * per + o], data));
                }
            });
        }
    });
    let records = slots
        .into_iter()
        .map(|s| s.expect("every slot filled"))
        .collect::<Result<Vec<_>, _>>()?;
    let maes: Vec<f64> = records.iter().map(|r| r.test_mae).collect();
    let (test_mae_mean, test_mae_std) = mean_std(&maes);
    Ok(SeedSummary {
        config_hash: cfg.hash(),
        seeds,
        test_mae_mean,
        test_mae_std,
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::MlpSpec;

    fn smoke() -> ExperimentConfig {
        ExperimentConfig {
            data: DataConfig::Synthetic(SyntheticConfig {
                n_train: 64,
                n_test: 16,
                ..SyntheticConfig::default()
            }),
            model: ModelSpec::Mlp(MlpSpec {
                input_dim: 1,
                hidden: vec![8],
                z_dim: 4,
            }),
            train: TrainConfig {
                epochs: 3,
                batch_size: 16,
                ..TrainConfig::default()
            },
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn mean_std_edges() {
        assert_eq!(mean_std(&[3.0]), (3.0, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn hash_ignores_seed_and_paths() {
        let a = smoke();
        let b = ExperimentConfig {
            seed: 9,
            output_dir: Some("x".into()),
            ..smoke()
        };
        assert_eq!(a.hash(), b.hash());
        let mut c = smoke();
        c.mixup.lambda = 0.5;
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn toml_round_trip() {
        let cfg = smoke();
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(back, cfg);
        assert!(ExperimentConfig::from_toml_str("bogus_key = 1").is_err());
    }

    #[test]
    fn selection_uses_min_train_mae() {
        let cfg = smoke();
        let data = prepare_data(&cfg.data, Path::new(".")).unwrap();
        let rec = run_with_data(&cfg, &data).unwrap();
        let best = rec
            .epochs
            .iter()
            .min_by(|a, b| a.train_mae.total_cmp(&b.train_mae))
            .unwrap();
        assert_eq!(rec.best_epoch, best.epoch);
        assert_eq!(rec.test_mae, best.test_mae);
        assert_eq!(rec.bins.len(), 16);
        let weighted: f64 = rec.bins.iter().map(|b| b.mae * b.count as f64).sum::<f64>() / 16.0;
        assert!((weighted - rec.test_mae).abs() < 1e-9);
    }

    #[test]
    fn in_distribution_lookup() {
        let d = Dataset::new(vec![1], vec![0.0; 2], vec![1.0, 2.0]).unwrap();
        let data = PreparedData {
            train: d.clone(),
            test: d,
            kept_targets: vec![1.0],
            removed_targets: vec![2.0],
            runs: vec![],
        };
        assert!(data.is_in_distribution(1.0));
        assert!(!data.is_in_distribution(2.0));
    }
}
