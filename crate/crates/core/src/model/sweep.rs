//! Grid search over latent size and predicted point count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::eval::evaluate;
use super::train::{fit_pipeline, FitConfig};
use super::{ModelError, PairedSample};
use crate::readout::NormStats;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub latent: usize,
    pub points: usize,
    pub mean_mm: Option<f64>,
    pub std_mm: Option<f64>,
    /// Training or evaluation failure; the sweep carries on past it.
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub cells: Vec<SweepCell>,
    /// Index of the cell with the lowest mean.
    pub best: Option<usize>,
}

impl SweepTable {
    /// CSV with columns `L,M_pr,mean_mm,std_mm,error`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("L,M_pr,mean_mm,std_mm,error\n");
        let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for c in &self.cells {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                c.latent,
                c.points,
                fmt(c.mean_mm),
                fmt(c.std_mm),
                c.error.as_deref().unwrap_or("").replace([',', '\n'], ";")
            ));
        }
        out
    }
}

/// Trains and evaluates one pipeline per `(L, M_pr)` cell on `jobs` threads.
/// Each cell is deterministic on its own, so the table does not depend on
/// `jobs`.
#[allow(clippy::too_many_arguments)]
pub fn sweep(
    train: &[&PairedSample],
    val: &[&PairedSample],
    test: &[PairedSample],
    stats: &NormStats,
    latents: &[usize],
    points: &[usize],
    base: &FitConfig,
    jobs: usize,
) -> Result<SweepTable, ModelError> {
    let grid: Vec<(usize, usize)> = latents
        .iter()
        .flat_map(|&l| points.iter().map(move |&m| (l, m)))
        .collect();
    let run_cell = |&(latent, m): &(usize, usize)| {
        let mut cfg = base.clone();
        cfg.autoencoder.latent = latent;
        cfg.autoencoder.points = m;
        let outcome = fit_pipeline(train, val, stats, &cfg).and_then(|(p, _, _)| evaluate(&p, test));
        match outcome {
            Ok((summary, _)) => SweepCell {
                latent,
                points: m,
                mean_mm: Some(summary.overall.mean),
                std_mm: Some(summary.overall.std),
                error: None,
            },
            Err(e) => SweepCell {
                latent,
                points: m,
                mean_mm: None,
                std_mm: None,
                error: Some(e.to_string()),
            },
        }
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| ModelError::InvalidConfig(e.to_string()))?;
    let cells: Vec<SweepCell> = pool.install(|| grid.par_iter().map(run_cell).collect());
    let best = cells
        .iter()
        .enumerate()
        .filter_map(|(i, c)| c.mean_mm.map(|m| (i, m)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(i, _)| i);
    Ok(SweepTable { cells, best })
}
