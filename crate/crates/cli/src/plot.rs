//! Test error against target: PNG curve plus the numbers behind it.

use std::path::{Path, PathBuf};

use amix_core::datasets::TargetRun;
use amix_core::experiment::ExperimentRecord;
use plotters::prelude::*;
use serde::Serialize;

use crate::error::CliError;

/// One curve: the records of one configuration, averaged per bin.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Series {
    pub method: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub mae: Vec<f64>,
}

impl Series {
    pub fn label(&self) -> String {
        format!("{}@{}", self.method, &self.config_hash[..12.min(self.config_hash.len())])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CurveData {
    pub targets: Vec<f64>,
    pub in_distribution: Vec<bool>,
    pub series: Vec<Series>,
    pub bands: Vec<(f64, f64)>,
}

/// Groups records by config hash and checks they share one set of bins.
pub fn curve_data(records: &[ExperimentRecord]) -> Result<CurveData, CliError> {
    let first = records.first().ok_or_else(|| CliError::Data("no records to plot".into()))?;
    if first.bins.is_empty() {
        return Err(CliError::Data("record has no per-target bins".into()));
    }
    let targets: Vec<f64> = first.bins.iter().map(|b| b.target).collect();
    let in_distribution: Vec<bool> = first.bins.iter().map(|b| b.in_distribution).collect();
    let mut series: Vec<(Series, usize)> = Vec::new();
    for r in records {
        let t: Vec<f64> = r.bins.iter().map(|b| b.target).collect();
        if t != targets {
            return Err(CliError::Data(format!(
                "bin mismatch: record {} has {} bins, expected the {} bins of {}",
                r.file_stem(),
                t.len(),
                targets.len(),
                first.file_stem()
            )));
        }
        let idx = match series.iter().position(|(s, _)| s.config_hash == r.config_hash) {
            Some(i) => i,
            None => {
                series.push((
                    Series {
                        method: r.method.as_str().to_string(),
                        config_hash: r.config_hash.clone(),
                        seeds: vec![],
                        mae: vec![0.0; t.len()],
                    },
                    0,
                ));
                series.len() - 1
            }
        };
        let (s, n) = &mut series[idx];
        s.seeds.push(r.seed);
        for (acc, b) in s.mae.iter_mut().zip(&r.bins) {
            *acc += b.mae;
        }
        *n += 1;
    }
    let series = series
        .into_iter()
        .map(|(mut s, n)| {
            s.mae.iter_mut().for_each(|v| *v /= n as f64);
            s
        })
        .collect();
    Ok(CurveData {
        targets,
        in_distribution,
        series,
        bands: kept_bands(&first.kept_runs),
    })
}

/// `[first, last]` target of every kept run.
pub fn kept_bands(runs: &[TargetRun]) -> Vec<(f64, f64)> {
    runs.iter()
        .filter(|r| r.kept)
        .map(|r| (r.first as f64, r.last as f64))
        .collect()
}

pub fn write_csv(path: &Path, data: &CurveData) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["target".to_string(), "in-distribution".to_string()];
    header.extend(data.series.iter().map(Series::label));
    w.write_record(&header)?;
    for (k, t) in data.targets.iter().enumerate() {
        let mut rec = vec![t.to_string(), data.in_distribution[k].to_string()];
        rec.extend(data.series.iter().map(|s| format!("{:.6}", s.mae[k])));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

const PALETTE: [RGBColor; 6] = [
    RGBColor(31, 119, 180),
    RGBColor(214, 39, 40),
    RGBColor(44, 160, 44),
    RGBColor(255, 127, 14),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
];

fn draw_err<E: std::fmt::Debug>(e: E) -> CliError {
    CliError::Io(format!("plot: {e:?}"))
}

/// Text-free render; labels live in the CSV header and the JSON sidecar.
pub fn render_png(path: &Path, data: &CurveData) -> Result<(), CliError> {
    let x0 = data.targets.first().copied().unwrap_or(0.0);
    let x1 = data.targets.last().copied().unwrap_or(1.0).max(x0 + 1e-9);
    let y1 = data
        .series
        .iter()
        .flat_map(|s| s.mae.iter().copied())
        .fold(0.0f64, f64::max)
        .max(1e-9)
        * 1.05;
    let root = BitMapBackend::new(path, (960, 540)).into_drawing_area();
    root.fill(&WHITE).map_err(draw_err)?;
    let mut chart = ChartBuilder::on(&root)
        .margin(30)
        .build_cartesian_2d(x0..x1, 0.0..y1)
        .map_err(draw_err)?;
    chart
        .draw_series(
            data.bands
                .iter()
                .map(|&(a, b)| Rectangle::new([(a, 0.0), (b, y1)], RGBColor(220, 220, 220).filled())),
        )
        .map_err(draw_err)?;
    chart
        .draw_series(std::iter::once(PathElement::new(vec![(x0, 0.0), (x1, 0.0)], BLACK)))
        .map_err(draw_err)?;
    chart
        .draw_series(std::iter::once(PathElement::new(vec![(x0, 0.0), (x0, y1)], BLACK)))
        .map_err(draw_err)?;
    for (k, s) in data.series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let pts: Vec<(f64, f64)> = data.targets.iter().copied().zip(s.mae.iter().copied()).collect();
        chart
            .draw_series(LineSeries::new(pts, color.stroke_width(2)))
            .map_err(draw_err)?;
    }
    root.present().map_err(draw_err)?;
    Ok(())
}

pub fn plot(records: &[ExperimentRecord], prefix: &Path) -> Result<Vec<PathBuf>, CliError> {
    let data = curve_data(records)?;
    if let Some(dir) = prefix.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let with_ext = |ext: &str| {
        let mut p = prefix.as_os_str().to_owned();
        p.push(ext);
        PathBuf::from(p)
    };
    let (png, csv_path, json) = (with_ext(".png"), with_ext(".csv"), with_ext(".json"));
    write_csv(&csv_path, &data)?;
    render_png(&png, &data)?;
    let meta = serde_json::json!({
        "series": data.series.iter().map(|s| serde_json::json!({
            "label": s.label(),
            "method": s.method,
            "config_hash": s.config_hash,
            "seeds": s.seeds,
            "color": PALETTE[data.series.iter().position(|x| x == s).unwrap() % PALETTE.len()].rgb(),
        })).collect::<Vec<_>>(),
        "kept_bands": data.bands,
        "bins": data.targets.len(),
    });
    std::fs::write(&json, serde_json::to_string_pretty(&meta).expect("json"))?;
    Ok(vec![png, csv_path, json])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bands_cover_kept_runs_only() {
        let runs = vec![
            TargetRun {
                kept: true,
                first: 0.0,
                last: 49.5,
                count: 100,
            },
            TargetRun {
                kept: false,
                first: 50.0,
                last: 99.5,
                count: 100,
            },
            TargetRun {
                kept: true,
                first: 100.0,
                last: 149.5,
                count: 100,
            },
        ];
        assert_eq!(kept_bands(&runs), vec![(0.0, 49.5), (100.0, 149.5)]);
    }
}
