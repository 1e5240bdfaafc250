//! Training loops for both stages.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::{Point3, PointCloud};
use crate::readout::NormStats;
use crate::spatial::KdTree;
use crate::tensor::optim::{cosine_lr, EarlyStopping, Optimizer, PlateauScheduler, SchedulerKind, TrainConfig};
use crate::tensor::{GradSet, Graph, ParamSet, Tensor};

use super::chamfer::chamfer_sq_grad;
use super::network::{canonical_order, Autoencoder, AutoencoderArch, Regressor, RegressorArch};
use super::{ModelError, PairedSample, Pipeline};

const EVAL_BATCH: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Per-epoch curves and the selected epoch of one training stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub stage: String,
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
}

trait HasParams {
    fn params_mut(&mut self) -> &mut ParamSet;
    fn param_set(&self) -> &ParamSet;
}

impl HasParams for Autoencoder {
    fn params_mut(&mut self) -> &mut ParamSet {
        Autoencoder::params_mut(self)
    }
    fn param_set(&self) -> &ParamSet {
        self.params()
    }
}

impl HasParams for Regressor {
    fn params_mut(&mut self) -> &mut ParamSet {
        Regressor::params_mut(self)
    }
    fn param_set(&self) -> &ParamSet {
        self.params()
    }
}

/// Shared epoch loop: shuffle, mini-batch steps, validation, schedule,
/// early stopping and best-weight selection.
fn run<M: HasParams>(
    model: &mut M,
    cfg: &TrainConfig,
    stage: &'static str,
    n_train: usize,
    mut batch_loss: impl FnMut(&M, &[usize], &mut GradSet) -> Result<f64, ModelError>,
    mut val_loss: impl FnMut(&M) -> Result<Option<f64>, ModelError>,
) -> Result<TrainReport, ModelError> {
    cfg.validate().map_err(ModelError::InvalidConfig)?;
    if n_train == 0 {
        return Err(ModelError::EmptyDataset("training"));
    }
    let diverged = |epoch, detail: String| ModelError::Diverged { stage, epoch, detail };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7261_696e);
    let mut order: Vec<usize> = (0..n_train).collect();
    let mut opt = Optimizer::new(cfg.optimizer, model.param_set(), cfg.lr0);
    let mut plateau = match cfg.scheduler {
        SchedulerKind::Plateau { factor, patience } => Some(PlateauScheduler::new(cfg.lr0, factor, patience)),
        SchedulerKind::Cosine { .. } => None,
    };
    let mut stopper = EarlyStopping::new(cfg.early_stopping_patience);
    let mut grads = model.param_set().zero_grads();
    let mut best = model.param_set().clone();
    let mut lr = cfg.lr0;
    let mut epochs = Vec::new();
    let mut stopped_early = false;

    for epoch in 0..cfg.max_epochs {
        opt.set_lr(lr);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            grads.zero();
            let loss = batch_loss(model, batch, &mut grads)?;
            if !loss.is_finite() {
                return Err(diverged(epoch, format!("non-finite training loss {loss}")));
            }
            if !grads.is_finite() {
                return Err(diverged(epoch, "non-finite gradient".into()));
            }
            total += loss * batch.len() as f64;
            opt.step(model.params_mut(), &grads);
        }
        let train_loss = total / n_train as f64;
        let val = val_loss(model)?.unwrap_or(train_loss);
        if !val.is_finite() {
            return Err(diverged(epoch, format!("non-finite validation loss {val}")));
        }
        epochs.push(EpochLog {
            epoch,
            lr,
            train_loss,
            val_loss: val,
        });
        if stopper.observe(epoch, val) {
            best = model.param_set().clone();
        }
        lr = match (&mut plateau, cfg.scheduler) {
            (Some(p), _) => p.step(val),
            (None, SchedulerKind::Cosine { t_max }) => cosine_lr(cfg.lr0, epoch + 1, t_max),
            (None, _) => lr,
        };
        if stopper.should_stop() && epoch + 1 < cfg.max_epochs {
            stopped_early = true;
            break;
        }
    }
    *model.params_mut() = best;
    Ok(TrainReport {
        stage: stage.into(),
        epochs,
        best_epoch: stopper.best_epoch().unwrap_or(0),
        best_val_loss: stopper.best(),
        stopped_early,
    })
}

struct AeSample {
    view: Vec<Point3>,
    target: Vec<Point3>,
    tree: KdTree,
}

fn ae_samples(ae: &Autoencoder, clouds: &[&PointCloud]) -> Vec<AeSample> {
    clouds
        .par_iter()
        .map(|c| {
            let target = canonical_order(c.points());
            AeSample {
                view: ae.encoder_view(&target),
                tree: KdTree::new(&target),
                target,
            }
        })
        .collect()
}

/// Mean squared-Chamfer loss of a batch and its gradient on the decoder output.
fn ae_forward(
    ae: &Autoencoder,
    g: &mut Graph,
    batch: &[&AeSample],
) -> Result<(crate::tensor::NodeId, f64, Vec<f64>), ModelError> {
    let views: Vec<Vec<Point3>> = batch.iter().map(|s| s.view.clone()).collect();
    let z = ae.encode_graph(g, &views)?;
    let out = ae.decode_graph(g, z)?;
    let m3 = ae.arch().points * 3;
    let pred = g.value(out).data();
    let per: Vec<(f64, Vec<f64>)> = batch
        .par_iter()
        .enumerate()
        .map(|(b, s)| {
            let p: Vec<Point3> = pred[b * m3..(b + 1) * m3]
                .chunks_exact(3)
                .map(|c| [c[0], c[1], c[2]])
                .collect();
            chamfer_sq_grad(&p, &s.target, &s.tree)
        })
        .collect::<Result<_, _>>()?;
    let inv = 1.0 / batch.len() as f64;
    let loss = per.iter().map(|(l, _)| l).sum::<f64>() * inv;
    let grad = per
        .into_iter()
        .flat_map(|(_, gr)| gr.into_iter().map(move |v| v * inv))
        .collect();
    Ok((out, loss, grad))
}

fn ae_mean_loss(ae: &Autoencoder, samples: &[AeSample]) -> Result<f64, ModelError> {
    let mut total = 0.0;
    for chunk in samples.chunks(EVAL_BATCH) {
        let refs: Vec<&AeSample> = chunk.iter().collect();
        let mut g = Graph::inference();
        let (_, loss, _) = ae_forward(ae, &mut g, &refs)?;
        total += loss * chunk.len() as f64;
    }
    Ok(total / samples.len() as f64)
}

/// Stage 1: minimizes the mean squared Chamfer loss over `train`, keeping
/// the weights of the epoch with the lowest validation loss. With an empty
/// `val` the training loss drives scheduling and selection.
pub fn train_autoencoder(
    train: &[&PointCloud],
    val: &[&PointCloud],
    arch: &AutoencoderArch,
    cfg: &TrainConfig,
) -> Result<(Autoencoder, TrainReport), ModelError> {
    let mut ae = Autoencoder::new(arch, cfg.seed)?;
    let train_s = ae_samples(&ae, train);
    let val_s = ae_samples(&ae, val);
    let report = run(
        &mut ae,
        cfg,
        "autoencoder",
        train_s.len(),
        |ae, batch, grads| {
            let refs: Vec<&AeSample> = batch.iter().map(|&i| &train_s[i]).collect();
            let mut g = Graph::new();
            let (out, loss, grad) = ae_forward(ae, &mut g, &refs)?;
            let l = g.external_loss(out, loss, grad)?;
            g.backward(l)?.accumulate(grads);
            Ok(loss)
        },
        |ae| {
            if val_s.is_empty() {
                Ok(None)
            } else {
                ae_mean_loss(ae, &val_s).map(Some)
            }
        },
    )?;
    Ok((ae, report))
}

/// `z = E(S)` for each cloud.
pub fn latent_targets(ae: &Autoencoder, clouds: &[&PointCloud]) -> Result<Vec<Vec<f64>>, ModelError> {
    let slices: Vec<&[Point3]> = clouds.iter().map(|c| c.points()).collect();
    ae.encode_batch(&slices)
}

/// Mean over samples and latent dimensions of `(h(v) − z)²`.
pub fn latent_mse(reg: &Regressor, xs: &[&[f64]], zs: &[Vec<f64>]) -> Result<f64, ModelError> {
    if xs.is_empty() {
        return Err(ModelError::EmptyDataset("evaluation"));
    }
    let l = reg.arch().latent;
    let mut total = 0.0;
    for (xc, zc) in xs.chunks(256).zip(zs.chunks(256)) {
        let pred = reg.predict_rows(xc)?;
        for (p, z) in pred.chunks_exact(l).zip(zc) {
            total += p.iter().zip(z).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        }
    }
    Ok(total / (xs.len() * l) as f64)
}

/// Stage 2: fits `h` to latent targets by minimizing the batch mean of
/// `‖h(v) − z‖²`. Validation reports the same quantity, which is
/// [`latent_mse`] times the latent size.
pub fn train_regressor(
    train_x: &[&[f64]],
    train_z: &[Vec<f64>],
    val_x: &[&[f64]],
    val_z: &[Vec<f64>],
    arch: &RegressorArch,
    cfg: &TrainConfig,
) -> Result<(Regressor, TrainReport), ModelError> {
    if train_x.len() != train_z.len() || val_x.len() != val_z.len() {
        return Err(ModelError::InvalidConfig("features and targets differ in count".into()));
    }
    if let Some(z) = train_z.iter().chain(val_z).find(|z| z.len() != arch.latent) {
        return Err(ModelError::FeatureLength {
            expected: arch.latent,
            got: z.len(),
        });
    }
    let mut reg = Regressor::new(arch, cfg.seed)?;
    let l = arch.latent;
    let report = run(
        &mut reg,
        cfg,
        "regressor",
        train_x.len(),
        |reg, batch, grads| {
            let rows: Vec<&[f64]> = batch.iter().map(|&i| train_x[i]).collect();
            let x = reg.gather_inputs(&rows)?;
            let mut g = Graph::new();
            let xn = g.input(Tensor::new(vec![batch.len(), arch.input_width()], x)?);
            let out = reg.forward_graph(&mut g, xn)?;
            let inv = 1.0 / batch.len() as f64;
            let pred = g.value(out).data();
            let mut loss = 0.0;
            let mut grad = vec![0.0; pred.len()];
            for (b, &i) in batch.iter().enumerate() {
                for k in 0..l {
                    let d = pred[b * l + k] - train_z[i][k];
                    loss += d * d * inv;
                    grad[b * l + k] = 2.0 * d * inv;
                }
            }
            let ln = g.external_loss(out, loss, grad)?;
            g.backward(ln)?.accumulate(grads);
            Ok(loss)
        },
        |reg| {
            if val_x.is_empty() {
                Ok(None)
            } else {
                latent_mse(reg, val_x, val_z).map(|m| Some(m * l as f64))
            }
        },
    )?;
    Ok((reg, report))
}

/// Architectures and schedules for both stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub autoencoder: AutoencoderArch,
    pub regressor_hidden: Vec<usize>,
    pub stage1: TrainConfig,
    pub stage2: TrainConfig,
}

impl FitConfig {
    pub fn new(latent: usize, points: usize) -> Self {
        Self {
            autoencoder: AutoencoderArch::new(latent, points),
            regressor_hidden: vec![256, 256],
            stage1: TrainConfig::autoencoder(),
            stage2: TrainConfig::regressor(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub stage1: TrainReport,
    pub stage2: TrainReport,
    /// CRC-32 of every autoencoder parameter before and after Stage 2.
    pub frozen_checksum_before: u32,
    pub frozen_checksum_after: u32,
}

/// Stage 2 inputs with cached latent targets, reusable across retrains.
#[derive(Clone, Debug)]
pub struct Stage2Data {
    pub train_x: Vec<Vec<f64>>,
    pub train_z: Vec<Vec<f64>>,
    pub val_x: Vec<Vec<f64>>,
    pub val_z: Vec<Vec<f64>>,
}

impl Stage2Data {
    pub fn new(ae: &Autoencoder, train: &[&PairedSample], val: &[&PairedSample]) -> Result<Self, ModelError> {
        fn clouds<'a>(s: &[&'a PairedSample]) -> Vec<&'a PointCloud> {
            s.iter().map(|p| &p.truth).collect()
        }
        Ok(Self {
            train_x: train.iter().map(|s| s.feature.values.clone()).collect(),
            train_z: latent_targets(ae, &clouds(train))?,
            val_x: val.iter().map(|s| s.feature.values.clone()).collect(),
            val_z: latent_targets(ae, &clouds(val))?,
        })
    }

    pub fn train(&self, arch: &RegressorArch, cfg: &TrainConfig) -> Result<(Regressor, TrainReport), ModelError> {
        let tx: Vec<&[f64]> = self.train_x.iter().map(Vec::as_slice).collect();
        let vx: Vec<&[f64]> = self.val_x.iter().map(Vec::as_slice).collect();
        train_regressor(&tx, &self.train_z, &vx, &self.val_z, arch, cfg)
    }
}

/// Trains both stages and checks that Stage 2 leaves Stage 1 untouched.
pub fn fit_pipeline(
    train: &[&PairedSample],
    val: &[&PairedSample],
    stats: &NormStats,
    cfg: &FitConfig,
) -> Result<(Pipeline, FitReport, Stage2Data), ModelError> {
    if let Some(s) = train.iter().chain(val).find(|s| s.feature.source != stats.source) {
        return Err(ModelError::StatsSourceMismatch {
            expected: stats.source.clone(),
            got: s.feature.source.clone(),
        });
    }
    let tc: Vec<&PointCloud> = train.iter().map(|s| &s.truth).collect();
    let vc: Vec<&PointCloud> = val.iter().map(|s| &s.truth).collect();
    let (ae, stage1) = train_autoencoder(&tc, &vc, &cfg.autoencoder, &cfg.stage1)?;
    let before = ae.params().checksum();
    let data = Stage2Data::new(&ae, train, val)?;
    let mut arch = RegressorArch::new(stats.channels(), cfg.autoencoder.latent);
    arch.hidden = cfg.regressor_hidden.clone();
    let (regressor, stage2) = data.train(&arch, &cfg.stage2)?;
    let after = ae.params().checksum();
    Ok((
        Pipeline {
            autoencoder: ae,
            regressor,
            stats: stats.clone(),
        },
        FitReport {
            stage1,
            stage2,
            frozen_checksum_before: before,
            frozen_checksum_after: after,
        },
        data,
    ))
}
