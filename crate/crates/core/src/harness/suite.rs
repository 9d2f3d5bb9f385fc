//! Sweeps over methods × G × steps on a shared episode list.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{adapt_episode, generate_episode, AdaptConfig, Episode, EpisodeReport};
use crate::error::{Error, Result};
use crate::objectives::ObjectiveSpec;

pub const CSV_HEADER: [&str; 15] = [
    "method",
    "source",
    "g",
    "steps",
    "lr",
    "tau",
    "sigma",
    "episodes",
    "mean_ter",
    "std_ter",
    "mean_exact_match",
    "mean_entropy_initial",
    "mean_entropy_final",
    "mean_runtime_s",
    "failures",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    pub methods: Vec<String>,
    pub g: Vec<usize>,
    pub steps: Vec<usize>,
}

impl Sweep {
    /// Expands the grid in `methods × g × steps` order. `g = 1` with a
    /// leave-one-out preset falls back to no baseline.
    pub fn cells(&self) -> Result<Vec<Cell>> {
        if self.methods.is_empty() || self.g.is_empty() || self.steps.is_empty() {
            return Err(Error::Config("sweep needs non-empty methods, g and steps lists".into()));
        }
        let mut cells = Vec::new();
        for name in &self.methods {
            for &g in &self.g {
                let mut spec = ObjectiveSpec::preset(name, g)?;
                if spec.degrade_baseline_for_single_sample() {
                    log::info!("{name} with g = 1: leave-one-out baseline unavailable, using none");
                }
                for &steps in &self.steps {
                    cells.push(Cell { spec, steps });
                }
            }
        }
        Ok(cells)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub spec: ObjectiveSpec,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub method: String,
    pub source: String,
    pub g: usize,
    pub steps: usize,
    pub lr: f64,
    pub tau: f64,
    pub sigma: f64,
    pub episodes: usize,
    pub mean_ter: f64,
    pub std_ter: f64,
    pub mean_exact_match: f64,
    pub mean_entropy_initial: f64,
    pub mean_entropy_final: f64,
    pub mean_runtime_s: f64,
    pub failures: usize,
    /// Greedy decoding of the unadapted source policies.
    pub mean_ter_unadapted: f64,
    pub mean_exact_match_unadapted: f64,
}

fn mean(xs: impl Iterator<Item = f64>) -> (f64, usize) {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (if n == 0 { 0.0 } else { sum / n as f64 }, n)
}

fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let (m, n) = mean(xs.iter().copied());
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
}

fn aggregate(config: &AdaptConfig, cell: &Cell, reports: &[EpisodeReport]) -> ReportRow {
    let ters: Vec<f64> = reports.iter().map(|r| r.ter).collect();
    let frac = |f: fn(&EpisodeReport) -> bool| mean(reports.iter().map(|r| f64::from(u8::from(f(r))))).0;
    ReportRow {
        method: cell.spec.label(),
        source: cell.spec.source.as_str().to_string(),
        g: cell.spec.g,
        steps: cell.steps,
        lr: config.lr,
        tau: config.tau,
        sigma: config.sigma,
        episodes: reports.len(),
        mean_ter: mean(ters.iter().copied()).0,
        std_ter: sample_std(&ters),
        mean_exact_match: frac(|r| r.exact_match),
        mean_entropy_initial: mean(reports.iter().map(|r| r.entropy_initial)).0,
        mean_entropy_final: mean(reports.iter().map(|r| r.entropy_final)).0,
        mean_runtime_s: mean(reports.iter().map(|r| r.runtime_s)).0,
        failures: reports.iter().filter(|r| r.failed).count(),
        mean_ter_unadapted: mean(reports.iter().map(|r| r.ter_initial)).0,
        mean_exact_match_unadapted: frac(|r| r.exact_match_initial),
    }
}

/// Runs one cell over the episodes. Episodes may run in parallel on the
/// current rayon pool; reports come back in episode order.
pub fn run_cell(config: &AdaptConfig, episodes: &[Episode], cell: &Cell) -> Result<(ReportRow, Vec<EpisodeReport>)> {
    let cfg = AdaptConfig { method: cell.spec, steps: cell.steps, ..config.clone() };
    cfg.validate()?;
    let reports = episodes.par_iter().map(|ep| adapt_episode(ep, &cfg)).collect::<Result<Vec<_>>>()?;
    Ok((aggregate(&cfg, cell, &reports), reports))
}

pub fn generate_episodes(config: &AdaptConfig) -> Result<Vec<Episode>> {
    (0..config.episodes as u64).into_par_iter().map(|i| generate_episode(config, i)).collect()
}

/// Every cell sees the identical episode list.
pub fn run_cells(config: &AdaptConfig, cells: &[Cell]) -> Result<Vec<ReportRow>> {
    config.validate()?;
    let episodes = generate_episodes(config)?;
    cells.iter().map(|cell| run_cell(config, &episodes, cell).map(|(row, _)| row)).collect()
}

pub fn run_suite(config: &AdaptConfig, sweep: &Sweep) -> Result<Vec<ReportRow>> {
    run_cells(config, &sweep.cells()?)
}

pub fn write_csv<W: Write>(rows: &[ReportRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in rows {
        w.write_record([
            r.method.clone(),
            r.source.clone(),
            r.g.to_string(),
            r.steps.to_string(),
            r.lr.to_string(),
            r.tau.to_string(),
            r.sigma.to_string(),
            r.episodes.to_string(),
            r.mean_ter.to_string(),
            r.std_ter.to_string(),
            r.mean_exact_match.to_string(),
            r.mean_entropy_initial.to_string(),
            r.mean_entropy_final.to_string(),
            r.mean_runtime_s.to_string(),
            r.failures.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
