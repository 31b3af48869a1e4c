//! Ablation sweeps: the cross product of override axes, each cell run once
//! per seed, aggregated into mean and standard deviation.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::DatasetSplit;
use crate::error::{Error, Result};
use crate::gbair::{self, ExperimentConfig, Intervention, Method, RunOutput, RunSummary, Stage};
use crate::output;
use crate::plot::{self, Series};
use crate::tracin::Measure;

/// Override values per axis. Unset axes keep the base config value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepAxes {
    pub method: Option<Vec<Method>>,
    pub corruption_rate: Option<Vec<f64>>,
    pub val_subset_size: Option<Vec<usize>>,
    pub measure: Option<Vec<Measure>>,
    pub intervention: Option<Vec<Intervention>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub base: ExperimentConfig,
    pub axes: SweepAxes,
    pub seeds: Vec<u64>,
}

/// One grid point.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    /// Directory-safe key, e.g. `corruption_rate-0.1_measure-dot`; `base` for an empty grid.
    pub key: String,
    pub overrides: Vec<(String, String)>,
    pub config: ExperimentConfig,
}

type Apply = Box<dyn Fn(&mut ExperimentConfig)>;

impl SweepSpec {
    fn axis_values(&self) -> Vec<(&'static str, Vec<(String, Apply)>)> {
        let mut axes: Vec<(&'static str, Vec<(String, Apply)>)> = Vec::new();
        if let Some(vs) = &self.axes.method {
            axes.push((
                "method",
                vs.iter()
                    .map(|&v| {
                        (
                            v.to_string(),
                            Box::new(move |c: &mut ExperimentConfig| c.method = v) as Apply,
                        )
                    })
                    .collect(),
            ));
        }
        if let Some(vs) = &self.axes.corruption_rate {
            axes.push((
                "corruption_rate",
                vs.iter()
                    .map(|&v| {
                        (
                            v.to_string(),
                            Box::new(move |c: &mut ExperimentConfig| c.corruption_rate = v) as Apply,
                        )
                    })
                    .collect(),
            ));
        }
        if let Some(vs) = &self.axes.val_subset_size {
            axes.push((
                "val_subset_size",
                vs.iter()
                    .map(|&v| {
                        (
                            v.to_string(),
                            Box::new(move |c: &mut ExperimentConfig| c.val_subset_size = v) as Apply,
                        )
                    })
                    .collect(),
            ));
        }
        if let Some(vs) = &self.axes.measure {
            axes.push((
                "measure",
                vs.iter()
                    .map(|&v| {
                        (
                            v.to_string(),
                            Box::new(move |c: &mut ExperimentConfig| c.measure = v) as Apply,
                        )
                    })
                    .collect(),
            ));
        }
        if let Some(vs) = &self.axes.intervention {
            axes.push((
                "intervention",
                vs.iter()
                    .map(|&v| {
                        (
                            v.to_string(),
                            Box::new(move |c: &mut ExperimentConfig| c.intervention = v) as Apply,
                        )
                    })
                    .collect(),
            ));
        }
        axes
    }

    /// Cross product of all set axes, in axis declaration order.
    pub fn cells(&self) -> Vec<Cell> {
        let mut cells = vec![Cell {
            key: String::new(),
            overrides: Vec::new(),
            config: self.base.clone(),
        }];
        for (name, values) in self.axis_values() {
            let mut next = Vec::with_capacity(cells.len() * values.len());
            for cell in &cells {
                for (label, apply) in &values {
                    let mut c = cell.clone();
                    apply(&mut c.config);
                    c.overrides.push((name.to_string(), label.clone()));
                    next.push(c);
                }
            }
            cells = next;
        }
        for c in &mut cells {
            c.key = if c.overrides.is_empty() {
                "base".into()
            } else {
                c.overrides
                    .iter()
                    .map(|(k, v)| format!("{k}-{v}"))
                    .collect::<Vec<_>>()
                    .join("_")
            };
        }
        cells
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::invalid("sweep.seeds", "at least one seed is required"));
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = self.seeds.iter().find(|s| !seen.insert(**s)) {
            return Err(Error::invalid("sweep.seeds", format!("seed {dup} listed twice")));
        }
        let empty = [
            ("sweep.method", self.axes.method.as_ref().map(Vec::len)),
            (
                "sweep.corruption_rate",
                self.axes.corruption_rate.as_ref().map(Vec::len),
            ),
            (
                "sweep.val_subset_size",
                self.axes.val_subset_size.as_ref().map(Vec::len),
            ),
            ("sweep.measure", self.axes.measure.as_ref().map(Vec::len)),
            ("sweep.intervention", self.axes.intervention.as_ref().map(Vec::len)),
        ];
        if let Some((field, _)) = empty.iter().find(|(_, n)| *n == Some(0)) {
            return Err(Error::invalid(*field, "axis must list at least one value"));
        }
        for cell in self.cells() {
            cell.config.validate().map_err(|e| match e {
                Error::InvalidConfig { field, message } => Error::InvalidConfig {
                    field,
                    message: format!("{message} (cell {})", cell.key),
                },
                other => other,
            })?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Stat {
        if values.is_empty() {
            return Stat {
                mean: f64::NAN,
                std: f64::NAN,
            };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Stat { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedRun {
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub key: String,
    pub overrides: Vec<(String, String)>,
    pub completed: usize,
    pub failures: Vec<FailedRun>,
    pub clean_ap: Stat,
    pub corrupted_ap: Stat,
    pub final_ap: Stat,
    pub best_ap: Stat,
    pub ci2r: Stat,
    /// Indexed by iteration number.
    pub ap_series: Vec<Stat>,
    /// Recovery iterations only, starting at iteration 1.
    pub hit_series: Vec<Stat>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub cells: Vec<CellSummary>,
}

impl SweepSummary {
    pub fn cell(&self, key: &str) -> Option<&CellSummary> {
        self.cells.iter().find(|c| c.key == key)
    }

    pub fn has_failures(&self) -> bool {
        self.cells.iter().any(|c| !c.failures.is_empty())
    }
}

pub struct CellRuns {
    pub cell: Cell,
    pub runs: Vec<(u64, std::result::Result<RunOutput, String>)>,
}

pub struct SweepResult {
    pub cells: Vec<CellRuns>,
    pub summary: SweepSummary,
}

fn series(runs: &[&RunOutput], pick: impl Fn(&gbair::IterationReport) -> Option<f64>) -> Vec<Stat> {
    let len = runs.iter().map(|r| r.reports.len()).max().unwrap_or(0);
    (0..len)
        .filter_map(|i| {
            let vals: Vec<f64> = runs.iter().filter_map(|r| r.reports.get(i).and_then(&pick)).collect();
            (!vals.is_empty()).then(|| Stat::of(&vals))
        })
        .collect()
}

pub fn summarize_cell(cell: &Cell, runs: &[(u64, std::result::Result<RunOutput, String>)]) -> CellSummary {
    let ok: Vec<&RunOutput> = runs.iter().filter_map(|(_, r)| r.as_ref().ok()).collect();
    let failures = runs
        .iter()
        .filter_map(|(seed, r)| {
            r.as_ref().err().map(|e| FailedRun {
                seed: *seed,
                error: e.clone(),
            })
        })
        .collect();
    let sums: Vec<RunSummary> = ok.iter().map(|r| r.summary()).collect();
    let stat = |f: fn(&RunSummary) -> f64| Stat::of(&sums.iter().map(f).collect::<Vec<_>>());
    CellSummary {
        key: cell.key.clone(),
        overrides: cell.overrides.clone(),
        completed: ok.len(),
        failures,
        clean_ap: stat(|s| s.clean_ap),
        corrupted_ap: stat(|s| s.corrupted_ap),
        final_ap: stat(|s| s.final_ap),
        best_ap: stat(|s| s.best_ap),
        ci2r: stat(|s| s.ci2r),
        ap_series: series(&ok, |r| Some(r.test_ap)),
        hit_series: series(&ok, |r| (r.stage == Stage::Recovery).then_some(r.hit_fraction)),
    }
}

/// Run every cell for every seed. `parallel` is the worker count (1 = sequential).
/// Results are ordered by (cell, seed) regardless of execution order.
pub fn run_sweep(spec: &SweepSpec, split: &DatasetSplit, parallel: usize) -> Result<SweepResult> {
    spec.validate()?;
    let cells = spec.cells();
    let jobs: Vec<(usize, u64)> = (0..cells.len())
        .flat_map(|c| spec.seeds.iter().map(move |&s| (c, s)))
        .collect();
    let run_job = |&(c, seed): &(usize, u64)| {
        let mut config = cells[c].config.clone();
        config.seed = seed;
        let out = gbair::run_experiment(&config, split).map_err(|e| e.to_string());
        if let Err(e) = &out {
            log::warn!("cell {} seed {seed} failed: {e}", cells[c].key);
        }
        out
    };
    let outcomes: Vec<std::result::Result<RunOutput, String>> = if parallel <= 1 {
        jobs.iter().map(run_job).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(parallel)
            .build()
            .map_err(|e| Error::Validation(format!("cannot start {parallel} workers: {e}")))?;
        pool.install(|| jobs.par_iter().map(run_job).collect())
    };

    let mut outcomes = outcomes.into_iter();
    let mut grouped = Vec::with_capacity(cells.len());
    for cell in cells {
        let runs = spec
            .seeds
            .iter()
            .map(|&s| (s, outcomes.next().expect("one outcome per job")))
            .collect();
        grouped.push(CellRuns { cell, runs });
    }
    let summary = SweepSummary {
        cells: grouped.iter().map(|c| summarize_cell(&c.cell, &c.runs)).collect(),
    };
    Ok(SweepResult {
        cells: grouped,
        summary,
    })
}

pub fn write_summary_csv(path: &Path, summary: &SweepSummary) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "cell",
        "completed",
        "failed",
        "clean_ap_mean",
        "clean_ap_std",
        "corrupted_ap_mean",
        "corrupted_ap_std",
        "final_ap_mean",
        "final_ap_std",
        "best_ap_mean",
        "best_ap_std",
        "ci2r_mean",
        "ci2r_std",
    ])?;
    for c in &summary.cells {
        let mut row = vec![c.key.clone(), c.completed.to_string(), c.failures.len().to_string()];
        for s in [c.clean_ap, c.corrupted_ap, c.final_ap, c.best_ap, c.ci2r] {
            row.push(s.mean.to_string());
            row.push(s.std.to_string());
        }
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_series_csv(path: &Path, summary: &SweepSummary, pick: fn(&CellSummary) -> (usize, &[Stat])) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["cell", "iteration", "mean", "std"])?;
    for c in &summary.cells {
        let (offset, stats) = pick(c);
        for (i, s) in stats.iter().enumerate() {
            w.write_record([
                c.key.clone(),
                (i + offset).to_string(),
                s.mean.to_string(),
                s.std.to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn chart_series(summary: &SweepSummary, pick: fn(&CellSummary) -> (usize, &[Stat])) -> Vec<Series> {
    summary
        .cells
        .iter()
        .map(|c| {
            let (offset, stats) = pick(c);
            Series {
                name: c.key.clone(),
                points: stats
                    .iter()
                    .enumerate()
                    .filter(|(_, s)| s.mean.is_finite())
                    .map(|(i, s)| ((i + offset) as f64, s.mean))
                    .collect(),
            }
        })
        .collect()
}

fn ap_pick(c: &CellSummary) -> (usize, &[Stat]) {
    (0, &c.ap_series)
}

fn hit_pick(c: &CellSummary) -> (usize, &[Stat]) {
    (1, &c.hit_series)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Write the AP recovery and hit-fraction charts plus their data under `out_dir`.
pub fn emit_plots(summary: &SweepSummary, out_dir: &Path) -> Result<Vec<PathBuf>> {
    if summary.cells.is_empty() {
        return Err(Error::Validation("nothing to plot: summary has no cells".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let ap_csv = out_dir.join("ap_by_iteration.csv");
    let hit_csv = out_dir.join("hit_fraction_by_iteration.csv");
    let ap_svg = out_dir.join("ap_by_iteration.svg");
    let hit_svg = out_dir.join("hit_fraction_by_iteration.svg");
    write_series_csv(&ap_csv, summary, ap_pick)?;
    write_series_csv(&hit_csv, summary, hit_pick)?;
    write_text(
        &ap_svg,
        &plot::line_chart(
            "Test AP by iteration",
            "iteration",
            "average precision",
            (0.0, 1.0),
            &chart_series(summary, ap_pick),
        ),
    )?;
    write_text(
        &hit_svg,
        &plot::line_chart(
            "Corrupted share of selected examples",
            "iteration",
            "hit fraction",
            (0.0, 1.0),
            &chart_series(summary, hit_pick),
        ),
    )?;
    Ok(vec![ap_svg, hit_svg, ap_csv, hit_csv])
}

/// `out_dir/<cell>/<seed>/...`, `out_dir/summary.csv`, `out_dir/summary.json`, `out_dir/plots/`.
pub fn write_sweep(out_dir: &Path, result: &SweepResult) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    for cell in &result.cells {
        for (seed, run) in &cell.runs {
            let dir = out_dir.join(&cell.cell.key).join(seed.to_string());
            match run {
                Ok(run) => output::write_run(&dir, run)?,
                Err(e) => {
                    fs::create_dir_all(&dir).map_err(|err| Error::io(&dir, err))?;
                    write_text(&dir.join("error.txt"), &format!("{e}\n"))?;
                }
            }
        }
    }
    write_summary_csv(&out_dir.join(output::SUMMARY_FILE), &result.summary)?;
    let mut json = serde_json::to_vec_pretty(&result.summary)?;
    json.push(b'\n');
    fs::write(out_dir.join("summary.json"), json).map_err(|e| Error::io(out_dir, e))?;
    emit_plots(&result.summary, &out_dir.join("plots"))?;
    Ok(())
}
