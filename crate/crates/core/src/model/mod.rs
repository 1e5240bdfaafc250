//! The two-stage reconstruction pipeline.
//!
//! Stage 1 trains a point-cloud autoencoder `D(E(S))` with the squared
//! Chamfer loss. Stage 2 freezes it and trains an MLP `h` from the
//! normalized measurement vector to the latent code `E(S_gt)`. A
//! reconstruction is then `D(h(v))`.

mod chamfer;
mod eval;
mod network;
mod sweep;
mod train;

pub use chamfer::{chamfer_eval_mm, chamfer_sq, chamfer_sq_grad, nn_error_map, NnErrorMap};
pub use eval::{
    bin_index, evaluate, evaluate_scores, quantile, summarize, BinStats, EvalSummary, Histogram, SampleResult, Summary,
    DZ_BIN_EDGES,
};
pub use network::{canonical_order, Autoencoder, AutoencoderArch, DecoderKind, Regressor, RegressorArch};
pub use sweep::{sweep, SweepCell, SweepTable};
pub use train::{
    fit_pipeline, latent_mse, latent_targets, train_autoencoder, train_regressor, EpochLog, FitConfig, FitReport,
    Stage2Data, TrainReport,
};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::geometry::{GeometryError, PointCloud};
use crate::readout::{FeatureVector, NormStats};
use crate::tensor::TensorError;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("{0} set is empty")]
    EmptyDataset(&'static str),
    #[error("invalid architecture: {0}")]
    InvalidArch(String),
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("{stage} training diverged at epoch {epoch}: {detail}")]
    Diverged {
        stage: &'static str,
        epoch: usize,
        detail: String,
    },
    #[error("features were normalized with `{got}` but the model was trained with `{expected}`")]
    StatsSourceMismatch { expected: String, got: String },
    #[error("expected {expected} values, got {got}")]
    FeatureLength { expected: usize, got: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// One measurement with its ground-truth shape.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    pub feature: FeatureVector,
    pub truth: PointCloud,
    pub delta_z: f64,
    pub tag: String,
}

/// Shuffles `n` indices with `seed` and returns `(train, val)` with
/// `round(n·val_fraction)` validation indices (at least one when `n ≥ 2`).
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut n_val = (n as f64 * val_fraction.clamp(0.0, 1.0)).round() as usize;
    if n >= 2 && val_fraction > 0.0 {
        n_val = n_val.clamp(1, n - 1);
    }
    let val = idx.split_off(n - n_val);
    (idx, val)
}

/// Trained Stage 1 and Stage 2 models with the normalization they expect.
#[derive(Clone, Debug)]
pub struct Pipeline {
    pub autoencoder: Autoencoder,
    pub regressor: Regressor,
    pub stats: NormStats,
}

impl Pipeline {
    fn check(&self, v: &FeatureVector) -> Result<(), ModelError> {
        if v.source != self.stats.source {
            return Err(ModelError::StatsSourceMismatch {
                expected: self.stats.source.clone(),
                got: v.source.clone(),
            });
        }
        if v.len() != self.regressor.arch().features {
            return Err(ModelError::FeatureLength {
                expected: self.regressor.arch().features,
                got: v.len(),
            });
        }
        Ok(())
    }

    /// `D(h(v))`.
    pub fn reconstruct(&self, v: &FeatureVector) -> Result<PointCloud, ModelError> {
        self.check(v)?;
        let z = self.regressor.predict(&v.values)?;
        self.autoencoder.decode(&z)
    }

    /// [`Pipeline::reconstruct`] over many vectors in one pass per stage.
    pub fn reconstruct_batch(&self, vs: &[&FeatureVector]) -> Result<Vec<PointCloud>, ModelError> {
        if vs.is_empty() {
            return Ok(Vec::new());
        }
        for v in vs {
            self.check(v)?;
        }
        let rows: Vec<&[f64]> = vs.iter().map(|v| v.values.as_slice()).collect();
        let z = self.regressor.predict_rows(&rows)?;
        self.autoencoder.decode_batch(&z)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let (a, b) = split_indices(100, 0.1, 7);
        assert_eq!((a.len(), b.len()), (90, 10));
        assert_eq!(split_indices(100, 0.1, 7), (a.clone(), b.clone()));
        let mut all: Vec<usize> = a.into_iter().chain(b).collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert_eq!(split_indices(10, 0.0, 1).1.len(), 0);
        assert_eq!(split_indices(3, 0.1, 1).1.len(), 1);
    }
}
