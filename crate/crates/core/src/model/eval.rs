//! Held-out evaluation: per-sample Chamfer and NN error, summary statistics
//! and per-Δz-bin tables.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::chamfer::{chamfer_eval_with_tree, nn_error_map};
use super::{ModelError, PairedSample, Pipeline};
use crate::spatial::KdTree;

/// Half-open Δz bin edges in mm; the last bin is unbounded.
pub const DZ_BIN_EDGES: [f64; 8] = [0.0, 10.0, 12.5, 15.0, 17.5, 20.0, 25.0, f64::INFINITY];

/// Bin of a Δz value under `[lo, hi)`; values below zero fall in the first bin.
pub fn bin_index(delta_z: f64) -> usize {
    DZ_BIN_EDGES[1..]
        .iter()
        .position(|&hi| delta_z < hi)
        .unwrap_or(DZ_BIN_EDGES.len() - 2)
}

/// Quantile of sorted data by linear interpolation at position `(n−1)·q`.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of an empty sample");
    let pos = (sorted.len() - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub mean: f64,
    /// Sample standard deviation; zero for a single value.
    pub std: f64,
}

/// Order statistics and moments, accumulated over sorted values so the
/// result does not depend on input order.
pub fn summarize(values: &[f64]) -> Option<Summary> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let std = if v.len() > 1 {
        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Some(Summary {
        count: v.len(),
        min: v[0],
        q1: quantile(&v, 0.25),
        median: quantile(&v, 0.5),
        q3: quantile(&v, 0.75),
        max: v[v.len() - 1],
        mean,
        std,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinStats {
    pub lo_mm: f64,
    /// `None` for the unbounded last bin.
    pub hi_mm: Option<f64>,
    pub stats: Option<Summary>,
}

impl BinStats {
    pub fn count(&self) -> usize {
        self.stats.as_ref().map_or(0, |s| s.count)
    }
}

/// Equal-width histogram of Chamfer values starting at zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub bin_width_mm: f64,
    pub counts: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub overall: Summary,
    pub histogram: Histogram,
    pub bins: Vec<BinStats>,
}

pub const HISTOGRAM_BIN_MM: f64 = 0.25;

/// Summary from `(Δz, chamfer_mm)` pairs.
pub fn evaluate_scores(scores: &[(f64, f64)]) -> Result<EvalSummary, ModelError> {
    let cds: Vec<f64> = scores.iter().map(|s| s.1).collect();
    let overall = summarize(&cds).ok_or(ModelError::EmptyDataset("test"))?;
    let nbins = ((overall.max / HISTOGRAM_BIN_MM).floor() as usize + 1).max(1);
    let mut counts = vec![0; nbins];
    for &c in &cds {
        counts[((c / HISTOGRAM_BIN_MM).floor() as usize).min(nbins - 1)] += 1;
    }
    let mut per_bin = vec![Vec::new(); DZ_BIN_EDGES.len() - 1];
    for &(dz, cd) in scores {
        per_bin[bin_index(dz)].push(cd);
    }
    let bins = per_bin
        .iter()
        .enumerate()
        .map(|(k, v)| BinStats {
            lo_mm: DZ_BIN_EDGES[k],
            hi_mm: Some(DZ_BIN_EDGES[k + 1]).filter(|h| h.is_finite()),
            stats: summarize(v),
        })
        .collect();
    Ok(EvalSummary {
        overall,
        histogram: Histogram {
            bin_width_mm: HISTOGRAM_BIN_MM,
            counts,
        },
        bins,
    })
}

/// Per-sample outcome of an evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleResult {
    pub index: usize,
    pub tag: String,
    pub delta_z: f64,
    pub chamfer_mm: f64,
    pub nnd_max: f64,
    /// NN distance of every predicted point, in prediction order.
    #[serde(skip)]
    pub nn_distances: Vec<f64>,
}

/// Reconstructs every test sample and scores it against its truth.
pub fn evaluate(pipeline: &Pipeline, test: &[PairedSample]) -> Result<(EvalSummary, Vec<SampleResult>), ModelError> {
    if test.is_empty() {
        return Err(ModelError::EmptyDataset("test"));
    }
    let mut results = Vec::with_capacity(test.len());
    for (c, chunk) in test.chunks(64).enumerate() {
        let vs: Vec<_> = chunk.iter().map(|s| &s.feature).collect();
        let preds = pipeline.reconstruct_batch(&vs)?;
        let scored: Vec<SampleResult> = chunk
            .par_iter()
            .zip(preds.par_iter())
            .enumerate()
            .map(|(k, (s, p))| {
                let gt = s.truth.points();
                let tree = KdTree::new(gt);
                let map = nn_error_map(gt, p.points())?;
                Ok(SampleResult {
                    index: c * 64 + k,
                    tag: s.tag.clone(),
                    delta_z: s.delta_z,
                    chamfer_mm: chamfer_eval_with_tree(gt, &tree, p.points()),
                    nnd_max: map.nnd_max,
                    nn_distances: map.distances,
                })
            })
            .collect::<Result<_, ModelError>>()?;
        results.extend(scored);
    }
    let scores: Vec<(f64, f64)> = results.iter().map(|r| (r.delta_z, r.chamfer_mm)).collect();
    Ok((evaluate_scores(&scores)?, results))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn bins_are_half_open() {
        assert_eq!(bin_index(0.0), 0);
        assert_eq!(bin_index(9.999), 0);
        assert_eq!(bin_index(10.0), 1);
        assert_eq!(bin_index(12.5), 2);
        assert_eq!(bin_index(24.99), 5);
        assert_eq!(bin_index(25.0), 6);
        assert_eq!(bin_index(1e9), 6);
    }

    #[test]
    fn identical_scores_have_zero_spread() {
        let scores: Vec<(f64, f64)> = (0..40).map(|k| (k as f64 * 0.7, 1.25)).collect();
        let s = evaluate_scores(&scores).unwrap();
        assert!(s.bins.iter().filter_map(|b| b.stats.as_ref()).all(|st| st.std == 0.0));
        assert_eq!(s.bins.iter().map(BinStats::count).sum::<usize>(), 40);
        assert_eq!(s.histogram.counts.iter().sum::<usize>(), 40);
        assert!(evaluate_scores(&[]).is_err());
    }

    proptest! {
        #[test]
        fn quartiles_match_a_sort_oracle(v in prop::collection::vec(-100.0..100.0f64, 1..60), q in 0.0..1.0f64) {
            let mut s = v.clone();
            s.sort_by(|a, b| a.partial_cmp(b).unwrap());
            // oracle: interpolate between order statistics k and k+1
            let h = (s.len() - 1) as f64 * q;
            let k = h as usize;
            let expect = if k + 1 < s.len() { s[k] + (h - k as f64) * (s[k + 1] - s[k]) } else { s[k] };
            prop_assert!((quantile(&s, q) - expect).abs() < 1e-9);
            let sum = summarize(&v).unwrap();
            prop_assert!(sum.min <= sum.q1 && sum.q1 <= sum.median && sum.median <= sum.q3 && sum.q3 <= sum.max);
        }

        #[test]
        fn bin_counts_sum_to_size(v in prop::collection::vec((0.0..40.0f64, 0.0..5.0f64), 1..80)) {
            let s = evaluate_scores(&v).unwrap();
            prop_assert_eq!(s.bins.iter().map(BinStats::count).sum::<usize>(), v.len());
        }
    }
}
