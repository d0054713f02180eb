//! Sweeps over kernel width, centers per class, and loss variant, with
//! several runs per cell, reported as mean ± sample standard deviation.
//! Runs may execute on parallel worker threads; each run is a pure function
//! of its own config, so workers share nothing mutable. A failed run is
//! recorded and the sweep continues.

use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::config::TrainConfig;
use crate::harness::run::{train, RunRecord};
use crate::losses::LossVariant;

/// How the runs of one cell differ from each other.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    /// Run r trains on fold r of the base config's split.
    #[default]
    Folds,
    /// Run r trains with seed `base seed + r` on the configured fold.
    Seeds,
}

fn default_runs() -> usize {
    1
}

fn default_workers() -> usize {
    1
}

/// A sweep specification: a base config plus the axes to vary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub base: TrainConfig,
    /// Kernel widths to sweep; empty keeps the base value.
    #[serde(default)]
    pub sigmas: Vec<f64>,
    /// Centers-per-class values to sweep; empty keeps the base value.
    #[serde(default)]
    pub centers: Vec<usize>,
    /// Loss variants to sweep; empty keeps the base variant.
    #[serde(default)]
    pub variants: Vec<LossVariant>,
    #[serde(default = "default_runs")]
    pub runs: usize,
    #[serde(default)]
    pub run_mode: RunMode,
    #[serde(default = "default_workers")]
    pub workers: usize,
}

impl GridSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: GridSpec =
            toml::from_str(text).map_err(|e| Error::Config(format!("bad grid spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        if self.runs == 0 {
            return Err(Error::Config("a grid needs at least one run per cell".to_string()));
        }
        if self.workers == 0 {
            return Err(Error::Config("worker count must be at least 1".to_string()));
        }
        if self.sigmas.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Config("swept sigmas must be positive and finite".to_string()));
        }
        if self.centers.iter().any(|&c| c == 0) {
            return Err(Error::Config("swept center counts must be at least 1".to_string()));
        }
        Ok(())
    }

    fn sigma_axis(&self) -> Vec<f64> {
        if self.sigmas.is_empty() {
            vec![self.base.kernel.sigma]
        } else {
            self.sigmas.clone()
        }
    }

    fn center_axis(&self) -> Vec<usize> {
        if self.centers.is_empty() {
            vec![self.base.kernel.centers_per_class]
        } else {
            self.centers.clone()
        }
    }

    fn variant_axis(&self) -> Vec<LossVariant> {
        if self.variants.is_empty() {
            vec![self.base.loss.variant]
        } else {
            self.variants.clone()
        }
    }

    /// The full Cartesian product of configs, cell-major, runs innermost.
    pub fn expand(&self) -> Vec<GridJob> {
        let mut jobs = Vec::new();
        for &variant in &self.variant_axis() {
            for &sigma in &self.sigma_axis() {
                for &centers in &self.center_axis() {
                    for run in 0..self.runs {
                        let mut cfg = self.base.clone();
                        cfg.loss.variant = variant;
                        cfg.kernel.sigma = sigma;
                        cfg.kernel.centers_per_class = centers;
                        match self.run_mode {
                            RunMode::Folds => cfg.fold_index = run,
                            RunMode::Seeds => cfg.seed = self.base.seed + run as u64,
                        }
                        jobs.push(GridJob {
                            cell: CellKey {
                                variant,
                                sigma,
                                centers_per_class: centers,
                            },
                            run_index: run,
                            config: cfg,
                        });
                    }
                }
            }
        }
        jobs
    }
}

/// One cell of the sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellKey {
    pub variant: LossVariant,
    pub sigma: f64,
    pub centers_per_class: usize,
}

/// One run to execute.
#[derive(Debug, Clone)]
pub struct GridJob {
    pub cell: CellKey,
    pub run_index: usize,
    pub config: TrainConfig,
}

impl GridJob {
    /// Stable directory name for this run's artifacts.
    pub fn dir_name(&self) -> String {
        format!(
            "{}-sig{}-c{}-run{}",
            self.cell.variant.name(),
            self.cell.sigma,
            self.cell.centers_per_class,
            self.run_index
        )
    }
}

/// Outcome of one grid run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRun {
    pub cell: CellKey,
    pub run_index: usize,
    pub record: Option<RunRecord>,
    pub error: Option<String>,
}

/// Mean ± sample standard deviation of one cell's final accuracies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub cell: CellKey,
    pub completed: usize,
    pub failed: usize,
    pub mean_accuracy: f64,
    /// Sample standard deviation (n − 1 denominator); 0 for a single run.
    pub std_accuracy: f64,
}

impl CellSummary {
    /// "mean ± std" with two decimals, the table format of the experiments.
    pub fn display(&self) -> String {
        format!("{:.2} ± {:.2}", self.mean_accuracy, self.std_accuracy)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub cells: Vec<CellSummary>,
    pub runs: Vec<GridRun>,
}

impl GridReport {
    /// Plain-text summary table, one row per cell.
    pub fn table(&self) -> String {
        let mut out = String::from(
            "variant      sigma   centers  accuracy (mean ± sample std)\n",
        );
        for cell in &self.cells {
            out.push_str(&format!(
                "{:<12} {:<7} {:<8} {}{}\n",
                cell.cell.variant.name(),
                cell.cell.sigma,
                cell.cell.centers_per_class,
                if cell.completed > 0 {
                    cell.display()
                } else {
                    "no completed runs".to_string()
                },
                if cell.failed > 0 {
                    format!("  [{} failed]", cell.failed)
                } else {
                    String::new()
                },
            ));
        }
        out
    }
}

fn mean_and_sample_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Executes the sweep, optionally writing per-run artifacts into
/// `<out_dir>/<job name>/` and the report into `<out_dir>/grid.json`.
pub fn run_grid(spec: &GridSpec, out_dir: Option<&Path>) -> Result<GridReport> {
    spec.validate()?;
    let jobs = spec.expand();
    if jobs.is_empty() {
        return Err(Error::Config("the sweep is empty".to_string()));
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|source| Error::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }

    let job_dir = |job: &GridJob| -> Option<PathBuf> {
        out_dir.map(|d| d.join(job.dir_name()))
    };
    let execute = |job: &GridJob| -> GridRun {
        let dir = job_dir(job);
        match train(&job.config, dir.as_deref()) {
            Ok(record) => GridRun {
                cell: job.cell,
                run_index: job.run_index,
                record: Some(record),
                error: None,
            },
            Err(e) => GridRun {
                cell: job.cell,
                run_index: job.run_index,
                record: None,
                error: Some(e.to_string()),
            },
        }
    };

    let mut results: Vec<Option<GridRun>> = vec![None; jobs.len()];
    if spec.workers <= 1 {
        for (i, job) in jobs.iter().enumerate() {
            results[i] = Some(execute(job));
        }
    } else {
        let next = Mutex::new(0usize);
        let slots = Mutex::new(&mut results);
        std::thread::scope(|scope| {
            for _ in 0..spec.workers.min(jobs.len()) {
                scope.spawn(|| loop {
                    let i = {
                        let mut guard = next.lock().expect("queue lock");
                        let i = *guard;
                        if i >= jobs.len() {
                            break;
                        }
                        *guard += 1;
                        i
                    };
                    let outcome = execute(&jobs[i]);
                    slots.lock().expect("result lock")[i] = Some(outcome);
                });
            }
        });
    }
    let runs: Vec<GridRun> = results
        .into_iter()
        .map(|r| r.expect("every job executed"))
        .collect();

    // summarize cell by cell, in job order
    let mut cells: Vec<CellSummary> = Vec::new();
    for run in &runs {
        if !cells.iter().any(|c| c.cell == run.cell) {
            let members: Vec<&GridRun> = runs.iter().filter(|r| r.cell == run.cell).collect();
            let accuracies: Vec<f64> = members
                .iter()
                .filter_map(|r| r.record.as_ref().map(|rec| rec.final_accuracy))
                .collect();
            let (mean, std) = mean_and_sample_std(&accuracies);
            cells.push(CellSummary {
                cell: run.cell,
                completed: accuracies.len(),
                failed: members.len() - accuracies.len(),
                mean_accuracy: mean,
                std_accuracy: std,
            });
        }
    }

    let report = GridReport { cells, runs };
    if let Some(dir) = out_dir {
        let path = dir.join("grid.json");
        let json = serde_json::to_string_pretty(&report)
            .map_err(|e| Error::Config(format!("could not encode grid report: {e}")))?;
        std::fs::write(&path, json).map_err(|source| Error::Io { path, source })?;
    }
    Ok(report)
}

/// Percentage improvement of `new` over `baseline` accuracy.
pub fn relative_gain(baseline: f64, new: f64) -> Result<f64> {
    if !(baseline > 0.0) || !baseline.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "relative gain needs a positive baseline accuracy, got {baseline}"
        )));
    }
    Ok(100.0 * (new - baseline) / baseline)
}

/// Two-decimal rounding used when displaying gains.
pub fn round2(value: f64) -> f64 {
    (value * 100.0).round() / 100.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::split::SplitMode;
    use crate::harness::config::tests_support::blobs_config;

    fn quick_grid(runs: usize) -> GridSpec {
        let mut base = blobs_config(LossVariant::Kernel);
        base.epochs = 0; // evaluation-only runs keep the sweep fast
        GridSpec {
            base,
            sigmas: vec![1.0, 2.0],
            centers: vec![3, 5],
            variants: vec![],
            runs,
            run_mode: RunMode::Seeds,
            workers: 1,
        }
    }

    #[test]
    fn a_two_by_two_sweep_with_ten_runs_yields_forty_records() {
        let spec = quick_grid(10);
        let report = run_grid(&spec, None).unwrap();
        assert_eq!(report.runs.len(), 40);
        assert!(report.runs.iter().all(|r| r.record.is_some()));
        assert_eq!(report.cells.len(), 4);
        assert!(report.cells.iter().all(|c| c.completed == 10));
    }

    #[test]
    fn seed_mode_gives_each_run_its_own_seed() {
        let spec = quick_grid(3);
        let jobs = spec.expand();
        let seeds: Vec<u64> = jobs.iter().take(3).map(|j| j.config.seed).collect();
        assert_eq!(seeds, vec![7, 8, 9]);
        assert!(jobs.iter().take(3).all(|j| j.config.fold_index == 0));
    }

    #[test]
    fn sample_std_dev_matches_the_hand_value() {
        let (mean, std) = mean_and_sample_std(&[78.9, 79.0, 78.8]);
        assert!((mean - 78.9).abs() < 1e-12);
        assert!((std - 0.1).abs() < 1e-12);
    }

    #[test]
    fn summary_rows_print_mean_plus_minus_std() {
        let summary = CellSummary {
            cell: CellKey {
                variant: LossVariant::Kernel,
                sigma: 5.0,
                centers_per_class: 10,
            },
            completed: 10,
            failed: 0,
            mean_accuracy: 77.0711,
            std_accuracy: 0.3449,
        };
        assert_eq!(summary.display(), "77.07 ± 0.34");
    }

    #[test]
    fn failed_runs_are_recorded_and_the_sweep_continues() {
        let mut base = blobs_config(LossVariant::Kernel);
        base.epochs = 0;
        base.labeled_fraction = 0.5; // two folds, so run index 2 has no fold
        base.split_mode = SplitMode::Folds;
        let spec = GridSpec {
            base,
            sigmas: vec![],
            centers: vec![],
            variants: vec![],
            runs: 3,
            run_mode: RunMode::Folds,
            workers: 1,
        };
        let report = run_grid(&spec, None).unwrap();
        assert_eq!(report.runs.len(), 3);
        assert!(report.runs[0].record.is_some());
        assert!(report.runs[1].record.is_some());
        let failed = &report.runs[2];
        assert!(failed.record.is_none());
        assert!(failed.error.as_ref().unwrap().contains("out of range"));
        assert_eq!(report.cells[0].completed, 2);
        assert_eq!(report.cells[0].failed, 1);
    }

    #[test]
    fn parallel_and_sequential_sweeps_agree() {
        let mut spec = quick_grid(2);
        let sequential = run_grid(&spec, None).unwrap();
        spec.workers = 4;
        let parallel = run_grid(&spec, None).unwrap();
        assert_eq!(sequential, parallel);
    }

    #[test]
    fn gains_reproduce_the_published_comparison_rows() {
        assert_eq!(round2(relative_gain(87.80, 91.09).unwrap()), 3.75);
        assert_eq!(round2(relative_gain(82.73, 88.10).unwrap()), 6.49);
        assert_eq!(round2(relative_gain(90.40, 92.85).unwrap()), 2.71);
        assert_eq!(round2(relative_gain(50.0, 50.0).unwrap()), 0.0);
        assert!(relative_gain(0.0, 10.0).is_err());
    }
}
