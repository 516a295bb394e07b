//! `prepare`, `train` and `report`.

use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};

use amix_core::experiment::{
    mean_std, prepare_cached, run_seeds, CacheStatus, ExperimentConfig, ExperimentRecord, PreparedData,
};
use amix_core::regularizers::Method;
use serde::Serialize;

use crate::error::CliError;

/// Command-line values layered over the config file.
#[derive(Clone, Debug, Default, clap::Args)]
pub struct Overrides {
    /// MNIST directory (IDX files, optionally gzipped).
    #[arg(long, env = "AMIX_DATA_DIR")]
    pub data_dir: Option<PathBuf>,
    /// Where cached datasets live (default: <output>/cache).
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
    /// Output directory for records, checkpoints and CSVs.
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub method: Option<Method>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
}

pub fn load_config(path: &Path, o: &Overrides) -> Result<ExperimentConfig, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let mut cfg: ExperimentConfig =
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    apply_overrides(&mut cfg, o);
    cfg.validate()?;
    Ok(cfg)
}

pub fn apply_overrides(cfg: &mut ExperimentConfig, o: &Overrides) {
    if let Some(d) = &o.data_dir {
        cfg.data_dir = Some(d.clone());
    }
    if let Some(d) = &o.cache_dir {
        cfg.cache_dir = Some(d.clone());
    }
    if let Some(d) = &o.output {
        cfg.output_dir = Some(d.clone());
    }
    if let Some(s) = o.seed {
        cfg.seed = s;
    }
    if let Some(e) = o.epochs {
        cfg.train.epochs = e;
    }
    if let Some(m) = o.method {
        cfg.mixup.method = m;
    }
    if let Some(b) = o.beta {
        cfg.mixup.beta = b;
    }
    if let Some(l) = o.lambda {
        cfg.mixup.lambda = l;
    }
    if let Some(a) = o.alpha {
        cfg.mixup.alpha = a;
    }
}

pub fn output_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_dir.clone().unwrap_or_else(|| PathBuf::from("runs"))
}

pub fn cache_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.cache_dir.clone().unwrap_or_else(|| output_dir(cfg).join("cache"))
}

pub fn load_data(cfg: &ExperimentConfig) -> Result<(PreparedData, CacheStatus), CliError> {
    Ok(prepare_cached(&cfg.data, &cfg.resolved_data_dir(), &cache_dir(cfg))?)
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let (data, status) = load_data(cfg)?;
    println!(
        "{} {} (train {}, test {}, removed targets {})",
        match status {
            CacheStatus::Hit => "cache hit",
            CacheStatus::Written => "cache written",
        },
        cfg.data_hash(),
        data.train.len(),
        data.test.len(),
        data.removed_targets.len()
    );
    Ok(())
}

/// One line of `runs.csv`.
#[derive(Debug, Serialize)]
pub struct RunRow {
    #[serde(rename = "config-hash")]
    pub config_hash: String,
    pub method: String,
    pub beta: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub seed: u64,
    #[serde(rename = "train-mae")]
    pub train_mae: f64,
    #[serde(rename = "test-mae")]
    pub test_mae: f64,
    #[serde(rename = "wallclock-s")]
    pub wallclock_s: f64,
}

impl From<&ExperimentRecord> for RunRow {
    fn from(r: &ExperimentRecord) -> Self {
        Self {
            config_hash: r.config_hash.clone(),
            method: r.method.as_str().to_string(),
            beta: r.beta,
            lambda: r.lambda,
            alpha: r.alpha,
            seed: r.seed,
            train_mae: r.train_mae,
            test_mae: r.test_mae,
            wallclock_s: r.wallclock_s,
        }
    }
}

/// Appends serialized rows to `path`, writing the header only for a new file.
pub fn append_rows<S: Serialize>(path: &Path, rows: &[S]) -> Result<(), CliError> {
    let fresh = !path.exists() || fs::metadata(path)?.len() == 0;
    let file = OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_record(out: &Path, rec: &ExperimentRecord) -> Result<PathBuf, CliError> {
    let dir = out.join("records");
    fs::create_dir_all(&dir)?;
    let path = dir.join(format!("{}.json", rec.file_stem()));
    fs::write(&path, serde_json::to_string_pretty(rec).expect("record serializes"))?;
    Ok(path)
}

pub fn train(cfg: &ExperimentConfig, seeds: usize, workers: usize) -> Result<(), CliError> {
    let (data, _) = load_data(cfg)?;
    let out = output_dir(cfg);
    fs::create_dir_all(&out)?;
    let summary = run_seeds(cfg, &data, seeds, workers)?;
    for rec in &summary.records {
        let path = write_record(&out, rec)?;
        println!(
            "seed {}: best epoch {} train MAE {:.4} test MAE {:.4} ({:.1}s) -> {}",
            rec.seed,
            rec.best_epoch,
            rec.train_mae,
            rec.test_mae,
            rec.wallclock_s,
            path.display()
        );
    }
    let rows: Vec<RunRow> = summary.records.iter().map(RunRow::from).collect();
    append_rows(&out.join("runs.csv"), &rows)?;
    if seeds > 1 {
        println!(
            "{} over {} seeds: test MAE {:.4} ± {:.4}",
            cfg.mixup.method.as_str(),
            seeds,
            summary.test_mae_mean,
            summary.test_mae_std
        );
    }
    Ok(())
}

/// Reads records from files, or from every `*.json` in a directory.
pub fn read_records(paths: &[PathBuf]) -> Result<Vec<ExperimentRecord>, CliError> {
    let mut files = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut entries: Vec<PathBuf> = fs::read_dir(p)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "json"))
                .collect();
            entries.sort();
            files.extend(entries);
        } else {
            files.push(p.clone());
        }
    }
    if files.is_empty() {
        return Err(CliError::Data("no record files given".into()));
    }
    files
        .iter()
        .map(|f| {
            let text = fs::read_to_string(f).map_err(|e| CliError::Data(format!("{}: {e}", f.display())))?;
            serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", f.display())))
        })
        .collect()
}

/// Aggregated view of the records sharing one config hash.
#[derive(Debug, Serialize)]
pub struct ReportRow {
    #[serde(rename = "config-hash")]
    pub config_hash: String,
    pub method: String,
    pub beta: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub seeds: String,
    #[serde(rename = "test-mae-mean")]
    pub test_mae_mean: f64,
    #[serde(rename = "test-mae-std")]
    pub test_mae_std: f64,
    #[serde(rename = "ood-mae-mean")]
    pub ood_mae_mean: Option<f64>,
    #[serde(rename = "id-mae-mean")]
    pub id_mae_mean: Option<f64>,
    pub epochs: usize,
    #[serde(rename = "batch-size")]
    pub batch_size: usize,
}

pub fn report_rows(records: &[ExperimentRecord]) -> Vec<ReportRow> {
    let mut groups: Vec<(String, Vec<&ExperimentRecord>)> = Vec::new();
    for r in records {
        match groups.iter_mut().find(|(h, _)| *h == r.config_hash) {
            Some((_, g)) => g.push(r),
            None => groups.push((r.config_hash.clone(), vec![r])),
        }
    }
    groups
        .into_iter()
        .map(|(hash, mut g)| {
            g.sort_by_key(|r| r.seed);
            let (mean, std) = mean_std(&g.iter().map(|r| r.test_mae).collect::<Vec<_>>());
            let opt_mean = |f: fn(&ExperimentRecord) -> Option<f64>| {
                let v: Option<Vec<f64>> = g.iter().map(|r| f(r)).collect();
                v.map(|v| mean_std(&v).0)
            };
            let first = g[0];
            ReportRow {
                config_hash: hash,
                method: first.method.as_str().to_string(),
                beta: first.beta,
                lambda: first.lambda,
                alpha: first.alpha,
                seeds: g.iter().map(|r| r.seed.to_string()).collect::<Vec<_>>().join(" "),
                test_mae_mean: mean,
                test_mae_std: std,
                ood_mae_mean: opt_mean(|r| r.ood_test_mae),
                id_mae_mean: opt_mean(|r| r.id_test_mae),
                epochs: first.recipe.epochs,
                batch_size: first.recipe.batch_size,
            }
        })
        .collect()
}

pub fn report(paths: &[PathBuf], csv_out: Option<&Path>) -> Result<(), CliError> {
    let records = read_records(paths)?;
    let rows = report_rows(&records);
    let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.3}"));
    println!("| config | method | beta | lambda | alpha | seeds | test MAE | OOD MAE | ID MAE | epochs | batch |");
    println!("|---|---|---|---|---|---|---|---|---|---|---|");
    for r in &rows {
        println!(
            "| {} | {} | {} | {} | {} | {} | {:.3} ± {:.3} | {} | {} | {} | {} |",
            &r.config_hash[..12],
            r.method,
            r.beta,
            r.lambda,
            r.alpha,
            r.seeds,
            r.test_mae_mean,
            r.test_mae_std,
            fmt(r.ood_mae_mean),
            fmt(r.id_mae_mean),
            r.epochs,
            r.batch_size
        );
    }
    println!("(epochs and batch size are chosen defaults, not taken from a reference recipe)");
    if let Some(path) = csv_out {
        let mut w = csv::Writer::from_path(path)?;
        for r in &rows {
            w.serialize(r)?;
        }
        w.flush()?;
    }
    Ok(())
}
