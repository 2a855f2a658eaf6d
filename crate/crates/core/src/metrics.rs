//! Learning curves and result files: per-round CSV, a JSON summary and an
//! SVG plot of mean accuracy against labeled-set size.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use crate::acquisition::Strategy;
use crate::config::ExperimentConfig;
use crate::edge::ExperimentOutcome;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    /// Acquisitions completed so far.
    pub round: usize,
    pub labeled_count: usize,
    pub test_accuracy: f64,
}

/// Accuracy of one entity (a device, the fog node or a baseline) over time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearningCurve {
    pub entity: String,
    pub strategy: Strategy,
    pub seed: u64,
    pub points: Vec<CurvePoint>,
}

impl LearningCurve {
    pub fn new(entity: impl Into<String>, strategy: Strategy, seed: u64) -> Self {
        Self {
            entity: entity.into(),
            strategy,
            seed,
            points: Vec::new(),
        }
    }

    pub fn push(&mut self, round: usize, labeled_count: usize, test_accuracy: f64) {
        self.points.push(CurvePoint {
            round,
            labeled_count,
            test_accuracy,
        });
    }

    pub fn last(&self) -> Option<&CurvePoint> {
        self.points.last()
    }

    pub fn accuracy_at(&self, round: usize) -> Option<f64> {
        self.points.iter().find(|p| p.round == round).map(|p| p.test_accuracy)
    }
}

#[derive(Debug, Serialize)]
struct CsvRow<'a> {
    entity: &'a str,
    round: usize,
    labeled_count: usize,
    test_accuracy: f64,
    strategy: Strategy,
    seed: u64,
}

pub const CSV_HEADER: &str = "entity,round,labeled_count,test_accuracy,strategy,seed";

/// One row per curve point, curves in the given order.
pub fn write_csv(curves: &[LearningCurve], path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    for c in curves {
        for p in &c.points {
            w.serialize(CsvRow {
                entity: &c.entity,
                round: p.round,
                labeled_count: p.labeled_count,
                test_accuracy: p.test_accuracy,
                strategy: c.strategy,
                seed: c.seed,
            })?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    /// Sample mean and (population) standard deviation. `None` when empty.
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Some(Self {
            mean,
            std: var.sqrt(),
            n: values.len(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryPoint {
    pub round: usize,
    pub labeled_count: usize,
    pub accuracy: MeanStd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveSummary {
    pub entity: String,
    pub points: Vec<SummaryPoint>,
}

/// Averages curves of the same entity across seeds, round by round.
pub fn summarize_curves(curves: &[LearningCurve]) -> Vec<CurveSummary> {
    let mut by_entity: BTreeMap<&str, BTreeMap<usize, (usize, Vec<f64>)>> = BTreeMap::new();
    for c in curves {
        let rounds = by_entity.entry(&c.entity).or_default();
        for p in &c.points {
            let slot = rounds.entry(p.round).or_insert((p.labeled_count, Vec::new()));
            slot.1.push(p.test_accuracy);
        }
    }
    by_entity
        .into_iter()
        .map(|(entity, rounds)| CurveSummary {
            entity: entity.to_string(),
            points: rounds
                .into_iter()
                .filter_map(|(round, (labeled_count, accs))| {
                    MeanStd::of(&accs).map(|accuracy| SummaryPoint {
                        round,
                        labeled_count,
                        accuracy,
                    })
                })
                .collect(),
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Summary {
    pub config: ExperimentConfig,
    pub runs: Vec<ExperimentOutcome>,
    pub curves: Vec<CurveSummary>,
}

impl Summary {
    pub fn new(config: &ExperimentConfig, runs: &[ExperimentOutcome]) -> Self {
        let curves: Vec<LearningCurve> = runs.iter().flat_map(|r| r.curves.iter().cloned()).collect();
        Self {
            config: config.clone(),
            runs: runs.to_vec(),
            curves: summarize_curves(&curves),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EmittedFiles {
    pub csv: PathBuf,
    pub summary: PathBuf,
    pub plot: PathBuf,
}

/// Writes `<name>.csv`, `<name>.json` and `<name>.svg` under `dir`.
pub fn emit_results(
    config: &ExperimentConfig,
    runs: &[ExperimentOutcome],
    dir: &Path,
    name: &str,
) -> Result<EmittedFiles> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = EmittedFiles {
        csv: dir.join(format!("{name}.csv")),
        summary: dir.join(format!("{name}.json")),
        plot: dir.join(format!("{name}.svg")),
    };
    let curves: Vec<LearningCurve> = runs.iter().flat_map(|r| r.curves.iter().cloned()).collect();
    write_csv(&curves, &files.csv)?;
    let summary = Summary::new(config, runs);
    let text = serde_json::to_string_pretty(&summary)?;
    fs::write(&files.summary, text).map_err(|e| Error::io(&files.summary, e))?;
    plot_curves(&summary.curves, name, &files.plot)?;
    Ok(files)
}

/// Mean accuracy against labeled-set size, one line per entity.
pub fn plot_curves(curves: &[CurveSummary], title: &str, path: &Path) -> Result<()> {
    let plot_err = |e: &dyn std::fmt::Display| Error::Plot(e.to_string());
    let max_x = curves
        .iter()
        .flat_map(|c| c.points.iter().map(|p| p.labeled_count))
        .max()
        .unwrap_or(1)
        .max(1) as f64;
    let root = SVGBackend::new(path, (800, 500)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(&e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(10)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d(0.0..max_x * 1.05, 0.0..1.0)
        .map_err(|e| plot_err(&e))?;
    chart
        .configure_mesh()
        .x_desc("labeled images")
        .y_desc("test accuracy")
        .draw()
        .map_err(|e| plot_err(&e))?;
    for (i, c) in curves.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        let series: Vec<(f64, f64)> = c
            .points
            .iter()
            .map(|p| (p.labeled_count as f64, p.accuracy.mean))
            .collect();
        chart
            .draw_series(LineSeries::new(series, color.stroke_width(2)))
            .map_err(|e| plot_err(&e))?
            .label(c.entity.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| plot_err(&e))?;
    root.present().map_err(|e| plot_err(&e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn curve(entity: &str, seed: u64, accs: &[f64]) -> LearningCurve {
        let mut c = LearningCurve::new(entity, Strategy::Entropy, seed);
        for (r, &a) in accs.iter().enumerate() {
            c.push(r, 20 + 10 * r, a);
        }
        c
    }

    #[test]
    fn csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.csv");
        let curves: Vec<_> = (0..4).map(|d| curve(&format!("device-{d}"), 0, &[0.1; 11])).collect();
        let mut all = curves;
        all.push(curve("fog", 0, &[0.5]));
        write_csv(&all, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), CSV_HEADER);
        assert_eq!(lines.count(), 4 * 11 + 1);
        assert!(text.contains("device-3,10,120,0.1,entropy,0"));
    }

    #[test]
    fn mean_and_std_across_seeds() {
        let s = summarize_curves(&[curve("fog", 0, &[0.2, 0.4]), curve("fog", 1, &[0.4, 0.8])]);
        assert_eq!(s.len(), 1);
        let p = &s[0].points;
        assert!((p[0].accuracy.mean - 0.3).abs() < 1e-12);
        assert!((p[1].accuracy.std - 0.2).abs() < 1e-12);
        assert_eq!(p[1].accuracy.n, 2);
        assert!(MeanStd::of(&[]).is_none());
    }

    #[test]
    fn plot_renders_svg() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.svg");
        let s = summarize_curves(&[curve("device-0", 0, &[0.1, 0.5, 0.7])]);
        plot_curves(&s, "test", &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("<svg"));
        assert!(text.contains("device-0"));
    }
}
