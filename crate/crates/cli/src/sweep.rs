//! Cartesian beta x lambda x seed sweeps with a pivot of mean test MAE.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;

use amix_core::experiment::{run_with_data, stable_hash, ExperimentConfig, PreparedData};
use serde::{Deserialize, Serialize};

use crate::commands::{append_rows, load_config, load_data, output_dir, write_record, Overrides};
use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    /// Base experiment config, relative to the grid file.
    pub config: Option<PathBuf>,
    /// Inline base config, used when `config` is absent.
    pub base: Option<ExperimentConfig>,
    pub betas: Vec<f64>,
    pub lambdas: Vec<f64>,
    pub seeds: Vec<u64>,
    pub workers: Option<usize>,
    pub output_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepRow {
    #[serde(rename = "config-hash")]
    pub config_hash: String,
    pub method: String,
    pub beta: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub seed: u64,
    pub status: String,
    #[serde(rename = "train-mae")]
    pub train_mae: Option<f64>,
    #[serde(rename = "test-mae")]
    pub test_mae: Option<f64>,
    #[serde(rename = "wallclock-s")]
    pub wallclock_s: Option<f64>,
    pub error: String,
}

pub struct Job {
    pub index: usize,
    pub cfg: ExperimentConfig,
}

pub fn load_grid(path: &Path, o: &Overrides) -> Result<(GridSpec, ExperimentConfig), CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let grid: GridSpec = toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    if grid.betas.is_empty() || grid.lambdas.is_empty() || grid.seeds.is_empty() {
        return Err(CliError::Config("grid needs at least one beta, lambda and seed".into()));
    }
    let mut base = match (&grid.config, &grid.base) {
        (Some(rel), _) => {
            let p = path.parent().unwrap_or(Path::new(".")).join(rel);
            load_config(&p, &Overrides::default())?
        }
        (None, Some(b)) => b.clone(),
        (None, None) => return Err(CliError::Config("grid needs `config` or a [base] table".into())),
    };
    if base.output_dir.is_none() {
        base.output_dir = grid.output_dir.clone();
    }
    crate::commands::apply_overrides(&mut base, o);
    base.validate()?;
    Ok((grid, base))
}

pub fn jobs(grid: &GridSpec, base: &ExperimentConfig) -> Vec<Job> {
    let mut out = Vec::new();
    for &beta in &grid.betas {
        for &lambda in &grid.lambdas {
            for &seed in &grid.seeds {
                let mut cfg = base.clone();
                cfg.mixup.beta = beta;
                cfg.mixup.lambda = lambda;
                cfg.seed = seed;
                out.push(Job { index: out.len(), cfg });
            }
        }
    }
    out
}

/// Runs `jobs` on up to `workers` threads. Each finished row goes through
/// one channel to `sink`, called on the calling thread in completion order.
pub fn execute<F>(jobs: &[Job], data: &PreparedData, workers: usize, out: Option<&Path>, mut sink: F)
where
    F: FnMut(usize, SweepRow),
{
    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel();
    std::thread::scope(|scope| {
        for _ in 0..workers.clamp(1, jobs.len().max(1)) {
            let tx = tx.clone();
            let next = &next;
            scope.spawn(move || loop {
                let k = next.fetch_add(1, Ordering::SeqCst);
                let Some(job) = jobs.get(k) else { break };
                let row = run_job(job, data, out);
                if tx.send((job.index, row)).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        for (index, row) in rx {
            sink(index, row);
        }
    });
}

fn run_job(job: &Job, data: &PreparedData, out: Option<&Path>) -> SweepRow {
    let cfg = &job.cfg;
    let mut row = SweepRow {
        config_hash: cfg.hash(),
        method: cfg.mixup.method.as_str().to_string(),
        beta: cfg.mixup.beta,
        lambda: cfg.mixup.lambda,
        alpha: cfg.mixup.alpha,
        seed: cfg.seed,
        status: "ok".into(),
        train_mae: None,
        test_mae: None,
        wallclock_s: None,
        error: String::new(),
    };
    match run_with_data(cfg, data).map_err(CliError::from) {
        Ok(rec) => {
            row.train_mae = Some(rec.train_mae);
            row.test_mae = Some(rec.test_mae);
            row.wallclock_s = Some(rec.wallclock_s);
            if let Some(dir) = out {
                if let Err(e) = write_record(dir, &rec) {
                    row.status = format!("failed-{}", e.kind());
                    row.error = e.to_string();
                }
            }
        }
        Err(e) => {
            row.status = format!("failed-{}", e.kind());
            row.error = e.to_string();
        }
    }
    row
}

/// Mean test MAE per (beta, lambda) over successful rows; `None` where every seed failed.
pub fn pivot(betas: &[f64], lambdas: &[f64], rows: &[SweepRow]) -> Vec<Vec<Option<f64>>> {
    betas
        .iter()
        .map(|&b| {
            lambdas
                .iter()
                .map(|&l| {
                    let v: Vec<f64> = rows
                        .iter()
                        .filter(|r| r.beta == b && r.lambda == l)
                        .filter_map(|r| r.test_mae)
                        .collect();
                    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
                })
                .collect()
        })
        .collect()
}

pub fn write_pivot(
    path: &Path,
    grid: &GridSpec,
    grid_hash: &str,
    cells: &[Vec<Option<f64>>],
) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["beta".to_string()];
    header.extend(grid.lambdas.iter().map(|l| format!("lambda={l:e}")));
    header.extend(["grid-hash".to_string(), "seeds".to_string()]);
    w.write_record(&header)?;
    let seeds = grid.seeds.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(" ");
    for (b, row) in grid.betas.iter().zip(cells) {
        let mut rec = vec![b.to_string()];
        rec.extend(row.iter().map(|c| c.map_or(String::new(), |v| format!("{v:.6}"))));
        rec.extend([grid_hash.to_string(), seeds.clone()]);
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn sweep(grid_path: &Path, o: &Overrides, workers: Option<usize>) -> Result<(), CliError> {
    let (grid, base) = load_grid(grid_path, o)?;
    let out = output_dir(&base);
    fs::create_dir_all(&out)?;
    let (data, _) = load_data(&base)?;
    let jobs = jobs(&grid, &base);
    let workers = workers
        .or(grid.workers)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let csv_path = out.join("sweep.csv");
    if csv_path.exists() {
        fs::remove_file(&csv_path)?;
    }
    let mut rows: Vec<Option<SweepRow>> = vec![None; jobs.len()];
    let mut write_err = None;
    let total = jobs.len();
    let mut done = 0;
    execute(&jobs, &data, workers, Some(&out), |index, row| {
        done += 1;
        println!(
            "[{done}/{total}] beta {} lambda {} seed {}: {}",
            row.beta,
            row.lambda,
            row.seed,
            match row.test_mae {
                Some(m) if row.status == "ok" => format!("test MAE {m:.4}"),
                _ => row.status.clone(),
            }
        );
        if let Err(e) = append_rows(&csv_path, std::slice::from_ref(&row)) {
            write_err.get_or_insert(e);
        }
        rows[index] = Some(row);
    });
    if let Some(e) = write_err {
        return Err(e);
    }
    let rows: Vec<SweepRow> = rows.into_iter().flatten().collect();
    let cells = pivot(&grid.betas, &grid.lambdas, &rows);
    let grid_hash = stable_hash(&(&grid.betas, &grid.lambdas, &grid.seeds, base.hash()));
    write_pivot(&out.join("pivot.csv"), &grid, &grid_hash, &cells)?;
    print!("beta \\ lambda");
    for l in &grid.lambdas {
        print!("\t{l:e}");
    }
    println!();
    for (b, row) in grid.betas.iter().zip(&cells) {
        print!("{b}");
        for c in row {
            print!("\t{}", c.map_or("-".to_string(), |v| format!("{v:.3}")));
        }
        println!();
    }
    let failed = rows.iter().filter(|r| r.status != "ok").count();
    if failed > 0 {
        println!("{failed} of {} runs failed; see the status column of sweep.csv", rows.len());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(beta: f64, lambda: f64, mae: Option<f64>) -> SweepRow {
        SweepRow {
            config_hash: String::new(),
            method: "anchored-regression-mixup".into(),
            beta,
            lambda,
            alpha: 1.0,
            seed: 0,
            status: if mae.is_some() { "ok".into() } else { "failed-numeric".into() },
            train_mae: mae,
            test_mae: mae,
            wallclock_s: None,
            error: String::new(),
        }
    }

    #[test]
    fn pivot_cells_are_row_means() {
        let rows = vec![
            row(1.0, 0.1, Some(2.0)),
            row(1.0, 0.1, Some(4.0)),
            row(1.0, 0.2, Some(5.0)),
            row(2.0, 0.1, None),
            row(2.0, 0.2, Some(1.0)),
        ];
        let p = pivot(&[1.0, 2.0], &[0.1, 0.2], &rows);
        assert_eq!(p, vec![vec![Some(3.0), Some(5.0)], vec![None, Some(1.0)]]);
    }

    #[test]
    fn grid_expands_cartesian() {
        let grid = GridSpec {
            config: None,
            base: Some(ExperimentConfig::default()),
            betas: vec![0.1, 0.5, 1.1],
            lambdas: vec![1e-5, 1e-4],
            seeds: vec![0, 1],
            workers: None,
            output_dir: None,
        };
        let j = jobs(&grid, grid.base.as_ref().unwrap());
        assert_eq!(j.len(), 12);
        assert_eq!(j[3].cfg.mixup.lambda, 1e-4);
        assert_eq!(j[3].cfg.seed, 1);
        assert!(j.iter().enumerate().all(|(k, job)| job.index == k));
    }
}
