//! Named experiment families built on top of a base configuration.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::acquisition::Strategy;
use crate::config::{Aggregation, ExperimentConfig, Preset};
use crate::dataset::{Dataset, Mnist};
use crate::edge::{run_experiment_shared, ExperimentOutcome};
use crate::error::Result;
use crate::metrics::{emit_results, EmittedFiles, MeanStd};

/// One configuration of a suite with its seeded runs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuiteRun {
    pub name: String,
    pub config: ExperimentConfig,
    pub runs: Vec<ExperimentOutcome>,
}

impl SuiteRun {
    /// Mean and spread of the fog accuracy over seeds, at the given
    /// acquisition count of the first round.
    pub fn fog_accuracy(&self, acquisitions: usize, strategy: Aggregation) -> Option<MeanStd> {
        let accs: Vec<f64> = self
            .runs
            .iter()
            .filter_map(|r| r.report_at(1, acquisitions))
            .map(|r| r.accuracy_of(strategy))
            .collect();
        MeanStd::of(&accs)
    }

    /// Mean accuracy of the centrally trained baseline matched to an
    /// acquisition count (`None` selects the fixed-size baseline).
    pub fn baseline_accuracy(&self, acquisitions: Option<usize>) -> Option<MeanStd> {
        let accs: Vec<f64> = self
            .runs
            .iter()
            .flat_map(|r| r.baselines.iter())
            .filter(|b| b.acquisitions == acquisitions)
            .map(|b| b.accuracy)
            .collect();
        MeanStd::of(&accs)
    }

    /// Mean accuracy of one entity's curve at every recorded round.
    pub fn mean_curve(&self, entity: &str) -> Vec<(usize, f64)> {
        let curves: Vec<_> = self
            .runs
            .iter()
            .flat_map(|r| r.curves.iter())
            .filter(|c| c.entity == entity)
            .cloned()
            .collect();
        crate::metrics::summarize_curves(&curves)
            .into_iter()
            .flat_map(|s| s.points)
            .map(|p| (p.round, p.accuracy.mean))
            .collect()
    }
}

fn single_device(base: &ExperimentConfig) -> ExperimentConfig {
    ExperimentConfig {
        n_devices: 1,
        cascade: 1,
        snapshots: Vec::new(),
        proportions: None,
        dropped_devices: Vec::new(),
        ..base.clone()
    }
}

/// The named configurations a preset runs, in order.
pub fn preset_configs(preset: Preset, base: &ExperimentConfig) -> Vec<(String, ExperimentConfig)> {
    let mut out = Vec::new();
    match preset {
        Preset::Window => {
            for (regime, m_init, acquisitions, epochs) in [
                ("no-init", 0, 20, base.epochs),
                ("init", 20, 20, base.epochs),
                ("trained", 2000, 10, 10),
            ] {
                for strategy in [Strategy::Entropy, Strategy::Random] {
                    out.push((
                        format!("{regime}-{strategy}"),
                        ExperimentConfig {
                            m_init,
                            acquisitions,
                            epochs,
                            strategy,
                            fog_reserve: base.fog_reserve.max(3 * m_init),
                            ..single_device(base)
                        },
                    ));
                }
            }
        }
        Preset::AcqCount => {
            for strategy in Strategy::ALL {
                out.push((
                    format!("acq40-{strategy}"),
                    ExperimentConfig {
                        acquisitions: 40,
                        snapshots: vec![10, 20, 30],
                        strategy,
                        ..base.clone()
                    },
                ));
            }
        }
        Preset::FlVsCentral => out.push((
            "fl-vs-central".to_string(),
            ExperimentConfig {
                acquisitions: 40,
                snapshots: vec![10, 20, 30],
                matched_baseline: true,
                curve_every: 10,
                aggregation: Aggregation::Average,
                ..base.clone()
            },
        )),
        Preset::Massive => {
            for cascade in [1, 2, 4] {
                out.push((
                    format!("massive-cascade{cascade}"),
                    ExperimentConfig {
                        n_devices: 20,
                        acquisitions: 4,
                        cascade,
                        snapshots: Vec::new(),
                        proportions: None,
                        dropped_devices: Vec::new(),
                        baseline_images: (cascade == 1).then_some(1200),
                        // Twenty device curves per run; start and end suffice.
                        curve_every: 4,
                        ..base.clone()
                    },
                ));
            }
        }
    }
    out
}

/// Runs a configuration once per seed, sharing one copy of the training set.
pub fn run_repeats(cfg: &ExperimentConfig, train: &Arc<Dataset>, test: &Dataset) -> Result<Vec<ExperimentOutcome>> {
    cfg.validate()?;
    cfg.run_seeds()
        .into_iter()
        .map(|seed| run_experiment_shared(cfg, Arc::clone(train), test, seed))
        .collect()
}

/// Runs every configuration of a preset and writes each one's files under
/// `out_dir/<preset>/`.
pub fn run_suite(
    preset: Preset,
    base: &ExperimentConfig,
    mnist: &Mnist,
    out_dir: Option<&Path>,
) -> Result<Vec<(SuiteRun, Option<EmittedFiles>)>> {
    let train = Arc::new(mnist.train.clone());
    let mut results = Vec::new();
    for (name, cfg) in preset_configs(preset, base) {
        log::info!("{}: running {name}", preset.name());
        let runs = run_repeats(&cfg, &train, &mnist.test)?;
        let files = match out_dir {
            Some(dir) => Some(emit_results(&cfg, &runs, &dir.join(preset.name()), &name)?),
            None => None,
        };
        results.push((
            SuiteRun {
                name,
                config: cfg,
                runs,
            },
            files,
        ));
    }
    Ok(results)
}

/// Human-readable headline numbers of a suite run.
pub fn digest(run: &SuiteRun) -> Vec<String> {
    let cfg = &run.config;
    let fmt = |m: Option<MeanStd>| match m {
        Some(m) => format!("{:.4} ± {:.4}", m.mean, m.std),
        None => "n/a".to_string(),
    };
    let mut lines = Vec::new();
    if cfg.n_devices == 1 {
        lines.push(format!(
            "{}: final accuracy {}",
            run.name,
            fmt(MeanStd::of(
                &run.runs
                    .iter()
                    .filter_map(|r| r.curves.first().and_then(|c| c.last()).map(|p| p.test_accuracy))
                    .collect::<Vec<_>>()
            ))
        ));
        return lines;
    }
    for a in cfg.aggregation_points() {
        let mut line = format!(
            "{} acq {a}: fog average {}, optimal {}",
            run.name,
            fmt(run.fog_accuracy(a, Aggregation::Average)),
            fmt(run.fog_accuracy(a, Aggregation::Optimal)),
        );
        if cfg.matched_baseline {
            line.push_str(&format!(", central {}", fmt(run.baseline_accuracy(Some(a)))));
        }
        lines.push(line);
    }
    if let Some(n) = cfg.baseline_images {
        lines.push(format!(
            "{}: central on {n} images {}",
            run.name,
            fmt(run.baseline_accuracy(None))
        ));
    }
    lines
}
