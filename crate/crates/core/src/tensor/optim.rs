//! Optimizers, learning-rate schedules and early stopping.

use serde::{Deserialize, Serialize};

use super::param::{GradSet, ParamSet};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    SgdMomentum { momentum: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SchedulerKind {
    Plateau { factor: f64, patience: usize },
    Cosine { t_max: usize },
}

/// Hyperparameters of one training stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub optimizer: OptimizerKind,
    pub lr0: f64,
    pub scheduler: SchedulerKind,
    pub early_stopping_patience: usize,
    pub seed: u64,
}

impl TrainConfig {
    /// Stage 1 defaults: Adam with a plateau schedule.
    pub fn autoencoder() -> Self {
        Self {
            batch_size: 64,
            max_epochs: 100,
            optimizer: OptimizerKind::Adam,
            lr0: 1e-3,
            scheduler: SchedulerKind::Plateau {
                factor: 0.2,
                patience: 3,
            },
            early_stopping_patience: 10,
            seed: 0,
        }
    }

    /// Stage 2 defaults: SGD with momentum and cosine annealing.
    pub fn regressor() -> Self {
        Self {
            batch_size: 64,
            max_epochs: 100,
            optimizer: OptimizerKind::SgdMomentum { momentum: 0.9 },
            lr0: 1e-3,
            scheduler: SchedulerKind::Cosine { t_max: 100 },
            early_stopping_patience: 10,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.batch_size == 0 {
            return Err("batch_size must be at least 1".into());
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(format!("lr0 must be positive, got {}", self.lr0));
        }
        if let OptimizerKind::SgdMomentum { momentum } = self.optimizer {
            if !(0.0..1.0).contains(&momentum) {
                return Err(format!("momentum must lie in [0, 1), got {momentum}"));
            }
        }
        match self.scheduler {
            SchedulerKind::Plateau { factor, .. } if !(factor > 0.0 && factor < 1.0) => {
                Err(format!("plateau factor must lie in (0, 1), got {factor}"))
            }
            SchedulerKind::Cosine { t_max: 0 } => Err("cosine t_max must be at least 1".into()),
            _ => Ok(()),
        }
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParamSet, lr: f64) -> Self {
        let zeros = params.zero_grads().grads;
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &GradSet) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (k, id) in params.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let w = params.value_mut(id).data_mut();
            for (((w, g), m), v) in w.iter_mut().zip(grads.get(id)).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *w -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
    }
}

/// SGD with heavy-ball momentum: `v ← μ·v + g`, `w ← w − lr·v`.
#[derive(Clone, Debug)]
pub struct SgdMomentum {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl SgdMomentum {
    pub fn new(params: &ParamSet, lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            velocity: params.zero_grads().grads,
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &GradSet) {
        for (k, id) in params.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let vel = &mut self.velocity[k];
            let w = params.value_mut(id).data_mut();
            for ((w, g), v) in w.iter_mut().zip(grads.get(id)).zip(vel.iter_mut()) {
                *v = self.momentum * *v + g;
                *w -= self.lr * *v;
            }
        }
    }
}

/// Either optimizer behind one interface.
#[derive(Clone, Debug)]
pub enum Optimizer {
    Adam(Adam),
    Sgd(SgdMomentum),
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, params: &ParamSet, lr: f64) -> Self {
        match kind {
            OptimizerKind::Adam => Self::Adam(Adam::new(params, lr)),
            OptimizerKind::SgdMomentum { momentum } => Self::Sgd(SgdMomentum::new(params, lr, momentum)),
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        match self {
            Self::Adam(o) => o.lr = lr,
            Self::Sgd(o) => o.lr = lr,
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &GradSet) {
        match self {
            Self::Adam(o) => o.step(params, grads),
            Self::Sgd(o) => o.step(params, grads),
        }
    }
}

/// Multiplies the rate by `factor` once more than `patience` consecutive
/// epochs fail to improve the best loss by more than `threshold`.
#[derive(Clone, Debug)]
pub struct PlateauScheduler {
    lr: f64,
    pub factor: f64,
    pub patience: usize,
    pub threshold: f64,
    best: f64,
    bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(lr0: f64, factor: f64, patience: usize) -> Self {
        Self {
            lr: lr0,
            factor,
            patience,
            threshold: 1e-8,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Records one validation loss and returns the rate for the next epoch.
    pub fn step(&mut self, val_loss: f64) -> f64 {
        if val_loss < self.best - self.threshold {
            self.best = val_loss;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
        }
        if self.bad_epochs > self.patience {
            self.lr *= self.factor;
            self.bad_epochs = 0;
        }
        self.lr
    }
}

/// `lr0·(1 + cos(π·epoch/t_max))/2`, held at zero past `t_max`.
pub fn cosine_lr(lr0: f64, epoch: usize, t_max: usize) -> f64 {
    if epoch >= t_max {
        return 0.0;
    }
    lr0 * (1.0 + (std::f64::consts::PI * epoch as f64 / t_max as f64).cos()) / 2.0
}

/// Tracks the best validation loss and signals when to stop.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    pub patience: usize,
    best: f64,
    best_epoch: Option<usize>,
    bad_epochs: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: None,
            bad_epochs: 0,
        }
    }

    /// Records a loss; returns true when it is a new best.
    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> bool {
        if val_loss < self.best {
            self.best = val_loss;
            self.best_epoch = Some(epoch);
            self.bad_epochs = 0;
            true
        } else {
            self.bad_epochs += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.bad_epochs >= self.patience
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best_epoch
    }
}

/// True when the last `patience` losses all failed to beat the best before them.
pub fn early_stop(history: &[f64], patience: usize) -> bool {
    let mut stopper = EarlyStopping::new(patience);
    for (e, &l) in history.iter().enumerate() {
        stopper.observe(e, l);
    }
    !history.is_empty() && stopper.should_stop()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Init, ParamId};
    use rand::SeedableRng;

    fn scalar_param(w0: f64) -> (ParamSet, ParamId) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut ps = ParamSet::new();
        let id = ps.add("w", &[1], Init::Zeros, &mut rng);
        ps.value_mut(id).data_mut()[0] = w0;
        (ps, id)
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let (mut ps, id) = scalar_param(1.0);
        let mut opt = Adam::new(&ps, 0.1);
        let mut g = ps.zero_grads();
        for _ in 0..100 {
            let w = ps.value(id).data()[0];
            g.get_mut(id)[0] = 2.0 * w;
            opt.step(&mut ps, &g);
        }
        assert!(ps.value(id).data()[0].abs() < 1e-2);
    }

    #[test]
    fn adam_matches_a_scalar_simulation() {
        let (mut ps, id) = scalar_param(1.0);
        let mut opt = Adam::new(&ps, 0.1);
        let mut g = ps.zero_grads();
        let (mut w, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=20 {
            let gw = 2.0 * w;
            m = 0.9 * m + 0.1 * gw;
            v = 0.999 * v + 0.001 * gw * gw;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            w -= 0.1 * mh / (vh.sqrt() + 1e-8);
            g.get_mut(id)[0] = 2.0 * ps.value(id).data()[0];
            opt.step(&mut ps, &g);
        }
        assert!((ps.value(id).data()[0] - w).abs() < 1e-15);
    }

    #[test]
    fn sgd_momentum_accumulates_velocity() {
        let (mut ps, id) = scalar_param(0.0);
        let mut opt = SgdMomentum::new(&ps, 0.1, 0.9);
        let mut g = ps.zero_grads();
        g.get_mut(id)[0] = 1.0;
        opt.step(&mut ps, &g);
        opt.step(&mut ps, &g);
        // v1 = 1, v2 = 1.9
        assert!((ps.value(id).data()[0] + 0.29).abs() < 1e-12);
    }

    #[test]
    fn plateau_keeps_rate_while_improving() {
        let mut s = PlateauScheduler::new(1e-3, 0.2, 3);
        for k in 0..20 {
            assert_eq!(s.step(10.0 - k as f64), 1e-3);
        }
    }

    #[test]
    fn plateau_reduces_after_patience_is_exhausted() {
        let mut s = PlateauScheduler::new(1.0, 0.2, 3);
        s.step(1.0);
        for _ in 0..3 {
            assert_eq!(s.step(1.0), 1.0);
        }
        assert!((s.step(1.0) - 0.2).abs() < 1e-15);
        // improvements smaller than the threshold do not count
        for _ in 0..3 {
            s.step(1.0 - 1e-9);
        }
        assert!((s.step(1.0 - 2e-9) - 0.04).abs() < 1e-15);
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(1e-3, 0, 100), 1e-3);
        assert!((cosine_lr(1e-3, 50, 100) - 5e-4).abs() < 1e-15);
        assert_eq!(cosine_lr(1e-3, 100, 100), 0.0);
        let direct = 1e-3 * (1.0 + std::f64::consts::PI.cos()) / 2.0;
        assert!(direct.abs() < 1e-18);
    }

    #[test]
    fn early_stopping_counts_non_improving_epochs() {
        assert!(!early_stop(&[3.0, 2.0, 1.0], 2));
        assert!(!early_stop(&[3.0, 2.0, 2.5], 2));
        assert!(early_stop(&[3.0, 2.0, 2.5, 2.0], 2));
        assert!(!early_stop(&[], 0));
        let mut s = EarlyStopping::new(2);
        s.observe(0, 5.0);
        s.observe(1, 4.0);
        s.observe(2, 4.5);
        assert_eq!(s.best_epoch(), Some(1));
        assert_eq!(s.best(), 4.0);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::autoencoder().validate().is_ok());
        assert!(TrainConfig::regressor().validate().is_ok());
        let mut c = TrainConfig::autoencoder();
        c.batch_size = 0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::regressor();
        c.lr0 = 0.0;
        assert!(c.validate().is_err());
    }
}
