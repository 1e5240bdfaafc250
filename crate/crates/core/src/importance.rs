//! Grouped SAGE values and progressive feature inclusion.
//!
//! Players are LED groups or PD groups of the `p·ℓ` feature vector. A
//! coalition's value `u(S)` is the drop in latent-space loss when the
//! features in `S` are known, with the rest marginalized over background
//! rows. Shapley values over the groups come from sampled or exhaustive
//! permutations.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{evaluate, ModelError, PairedSample, Pipeline, Regressor, RegressorArch, Stage2Data};
use crate::optics::SensorLayout;
use crate::tensor::optim::TrainConfig;

/// Default number of background draws per evaluation sample.
pub const DEFAULT_BACKGROUND_DRAWS: usize = 16;
/// Largest group count accepted by exhaustive enumeration.
pub const MAX_EXHAUSTIVE_GROUPS: usize = 8;

#[derive(Debug, Error, PartialEq)]
pub enum ImportanceError {
    #[error("evaluation set is empty")]
    EmptyEvalSet,
    #[error("groups do not partition the {features} features: {detail}")]
    NotAPartition { features: usize, detail: String },
    #[error("exhaustive enumeration supports at most {MAX_EXHAUSTIVE_GROUPS} groups, got {0}")]
    TooManyGroups(usize),
    #[error("K = {k} exceeds the {groups} available groups")]
    KOutOfRange { k: usize, groups: usize },
    #[error("ranking is for {have:?} groups but {want:?} were requested")]
    KindMismatch { have: GroupKind, want: GroupKind },
    #[error("invalid settings: {0}")]
    InvalidSettings(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, ImportanceError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupKind {
    Led,
    Pd,
}

impl GroupKind {
    pub fn as_str(self) -> &'static str {
        match self {
            GroupKind::Led => "led",
            GroupKind::Pd => "pd",
        }
    }
}

/// One player: all channels of one LED or of one photodiode.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureGroup {
    pub kind: GroupKind,
    /// Zero-based LED or PD index.
    pub index: usize,
    pub members: Vec<usize>,
}

/// LED group `i` holds channels `p·i + j` for every PD `j`.
pub fn led_groups(pds: usize, leds: usize) -> Vec<FeatureGroup> {
    (0..leds)
        .map(|i| FeatureGroup {
            kind: GroupKind::Led,
            index: i,
            members: (0..pds).map(|j| pds * i + j).collect(),
        })
        .collect()
}

/// PD group `j` holds channels `p·i + j` for every LED `i`.
pub fn pd_groups(pds: usize, leds: usize) -> Vec<FeatureGroup> {
    (0..pds)
        .map(|j| FeatureGroup {
            kind: GroupKind::Pd,
            index: j,
            members: (0..leds).map(|i| pds * i + j).collect(),
        })
        .collect()
}

pub fn groups_of(kind: GroupKind, pds: usize, leds: usize) -> Vec<FeatureGroup> {
    match kind {
        GroupKind::Led => led_groups(pds, leds),
        GroupKind::Pd => pd_groups(pds, leds),
    }
}

/// Checks that every feature belongs to exactly one group.
pub fn check_partition(groups: &[FeatureGroup], features: usize) -> Result<()> {
    let bad = |detail: String| Err(ImportanceError::NotAPartition { features, detail });
    if groups.is_empty() {
        return bad("no groups".into());
    }
    let mut owner = vec![None; features];
    for (g, grp) in groups.iter().enumerate() {
        for &m in &grp.members {
            match owner.get_mut(m) {
                None => return bad(format!("feature {m} out of range")),
                Some(Some(o)) => return bad(format!("feature {m} is in groups {o} and {g}")),
                Some(slot) => *slot = Some(g),
            }
        }
    }
    match owner.iter().position(Option::is_none) {
        Some(m) => bad(format!("feature {m} is in no group")),
        None => Ok(()),
    }
}

/// A model from full feature rows to latent codes.
pub trait LatentModel: Sync {
    fn features(&self) -> usize;
    fn latent(&self) -> usize;
    /// Flat `[B·L]` predictions for `B` rows.
    fn predict_rows(&self, rows: &[&[f64]]) -> std::result::Result<Vec<f64>, ModelError>;
}

impl LatentModel for Regressor {
    fn features(&self) -> usize {
        self.arch().features
    }
    fn latent(&self) -> usize {
        self.arch().latent
    }
    fn predict_rows(&self, rows: &[&[f64]]) -> std::result::Result<Vec<f64>, ModelError> {
        Regressor::predict_rows(self, rows)
    }
}

/// `h(v) = W·v + b`; the analytic test model.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearModel {
    /// `L` rows of `d` weights.
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

impl LatentModel for LinearModel {
    fn features(&self) -> usize {
        self.weights.first().map_or(0, Vec::len)
    }
    fn latent(&self) -> usize {
        self.weights.len()
    }
    fn predict_rows(&self, rows: &[&[f64]]) -> std::result::Result<Vec<f64>, ModelError> {
        Ok(rows
            .iter()
            .flat_map(|r| {
                self.weights
                    .iter()
                    .zip(&self.bias)
                    .map(|(w, b)| b + w.iter().zip(*r).map(|(a, x)| a * x).sum::<f64>())
            })
            .collect())
    }
}

/// Evaluation data and fixed background draws that define `u(S)`.
pub struct Game<'a, M: LatentModel> {
    model: &'a M,
    eval_x: &'a [Vec<f64>],
    eval_z: &'a [Vec<f64>],
    background: &'a [Vec<f64>],
    /// `draws[i]` lists the background rows paired with evaluation sample `i`.
    draws: Vec<Vec<usize>>,
    /// Loss of the featureless model `h_∅`.
    baseline: f64,
}

impl<'a, M: LatentModel> Game<'a, M> {
    /// `eval_z` are the targets `E(S_gt)`; `background` supplies values for
    /// excluded features (often the evaluation inputs themselves).
    pub fn new(
        model: &'a M,
        eval_x: &'a [Vec<f64>],
        eval_z: &'a [Vec<f64>],
        background: &'a [Vec<f64>],
        draws_per_sample: usize,
        seed: u64,
    ) -> Result<Self> {
        if eval_x.is_empty() || background.is_empty() {
            return Err(ImportanceError::EmptyEvalSet);
        }
        if eval_x.len() != eval_z.len() || draws_per_sample == 0 {
            return Err(ImportanceError::InvalidSettings(
                "inputs, targets and draws must match".into(),
            ));
        }
        let d = model.features();
        if eval_x.iter().chain(background).any(|r| r.len() != d) || eval_z.iter().any(|z| z.len() != model.latent()) {
            return Err(ModelError::FeatureLength { expected: d, got: 0 }.into());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let draws = (0..eval_x.len())
            .map(|_| {
                (0..draws_per_sample)
                    .map(|_| rng.gen_range(0..background.len()))
                    .collect()
            })
            .collect();
        let mut game = Self {
            model,
            eval_x,
            eval_z,
            background,
            draws,
            baseline: 0.0,
        };
        game.baseline = game.restricted_loss(&vec![false; d])?;
        Ok(game)
    }

    /// Mean squared latent error of the model restricted to `known`.
    fn restricted_loss(&self, known: &[bool]) -> Result<f64> {
        let l = self.model.latent();
        let k = self.draws[0].len();
        let all = known.iter().all(|&b| b);
        let mut total = 0.0;
        let per_chunk = (1024 / k).max(1);
        let samples: Vec<usize> = (0..self.eval_x.len()).collect();
        for chunk in samples.chunks(per_chunk) {
            let (rows, reps): (Vec<Vec<f64>>, usize) = if all {
                (chunk.iter().map(|&i| self.eval_x[i].clone()).collect(), 1)
            } else {
                let rows = chunk
                    .iter()
                    .flat_map(|&i| {
                        self.draws[i].iter().map(move |&b| {
                            let (v, bg) = (&self.eval_x[i], &self.background[b]);
                            known
                                .iter()
                                .enumerate()
                                .map(|(f, &kn)| if kn { v[f] } else { bg[f] })
                                .collect::<Vec<f64>>()
                        })
                    })
                    .collect();
                (rows, k)
            };
            let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
            let pred = self.model.predict_rows(&refs)?;
            for (c, &i) in chunk.iter().enumerate() {
                let z = &self.eval_z[i];
                for (dim, zd) in z.iter().enumerate() {
                    let mean = (0..reps).map(|r| pred[(c * reps + r) * l + dim]).sum::<f64>() / reps as f64;
                    total += (mean - zd).powi(2);
                }
            }
        }
        Ok(total / self.eval_x.len() as f64)
    }

    /// `u(S)` for a feature mask.
    pub fn value(&self, known: &[bool]) -> Result<f64> {
        if known.iter().all(|&b| !b) {
            return Ok(0.0);
        }
        Ok(self.baseline - self.restricted_loss(known)?)
    }

    /// `u` of the union of the chosen groups.
    pub fn group_value(&self, groups: &[FeatureGroup], chosen: &[usize]) -> Result<f64> {
        let mut known = vec![false; self.model.features()];
        for &g in chosen {
            for &m in &groups[g].members {
                known[m] = true;
            }
        }
        self.value(&known)
    }

    pub fn baseline(&self) -> f64 {
        self.baseline
    }
}

/// `u(S)` for the union of `subset` groups.
pub fn predictive_power<M: LatentModel>(game: &Game<'_, M>, groups: &[FeatureGroup], subset: &[usize]) -> Result<f64> {
    game.group_value(groups, subset)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupValue {
    pub kind: GroupKind,
    pub index: usize,
    pub phi: f64,
    pub stderr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SageReport {
    pub values: Vec<GroupValue>,
    /// `u(∅)`, zero by construction.
    pub u_empty: f64,
    /// `u` of all features.
    pub u_full: f64,
    /// Loss of the featureless model, for scale.
    pub baseline_loss: f64,
    pub permutations: usize,
    pub exhaustive: bool,
}

impl SageReport {
    pub fn total(&self) -> f64 {
        self.values.iter().map(|v| v.phi).sum()
    }

    /// Standard error of the summed values, treating groups as independent.
    pub fn total_stderr(&self) -> f64 {
        self.values.iter().map(|v| v.stderr.powi(2)).sum::<f64>().sqrt()
    }

    pub fn mean_stderr(&self) -> f64 {
        self.values.iter().map(|v| v.stderr).sum::<f64>() / self.values.len() as f64
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("group_kind,group_index,phi,stderr\n");
        for v in &self.values {
            let _ = writeln!(out, "{},{},{},{}", v.kind.as_str(), v.index + 1, v.phi, v.stderr);
        }
        out
    }

    /// [`SageReport::to_csv`] with each group's position on the membrane.
    pub fn to_layout_csv(&self, layout: &SensorLayout) -> String {
        let mut out = String::from("group_kind,group_index,phi,stderr,x_mm,y_mm\n");
        for v in &self.values {
            let (x, y) = match v.kind {
                GroupKind::Led => layout.leds.get(v.index).map_or((f64::NAN, f64::NAN), |l| (l.x, l.y)),
                GroupKind::Pd => layout.pds.get(v.index).map_or((f64::NAN, f64::NAN), |p| (p.x, p.y)),
            };
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                v.kind.as_str(),
                v.index + 1,
                v.phi,
                v.stderr,
                x,
                y
            );
        }
        out
    }
}

/// How permutations are chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SageMode {
    /// `n` random permutations, each seeded from `seed` and its index.
    Sampled { permutations: usize, seed: u64 },
    /// Every ordering of the groups.
    Exhaustive,
}

fn all_permutations(n: usize) -> Vec<Vec<usize>> {
    fn rec(prefix: &mut Vec<usize>, rest: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if rest.is_empty() {
            out.push(prefix.clone());
            return;
        }
        for k in 0..rest.len() {
            let g = rest.remove(k);
            prefix.push(g);
            rec(prefix, rest, out);
            prefix.pop();
            rest.insert(k, g);
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::new(), &mut (0..n).collect(), &mut out);
    out
}

/// Shapley values of the groups. Marginal gains along each permutation
/// telescope, so the values always sum to `u(full) − u(∅)`.
pub fn sage<M: LatentModel>(game: &Game<'_, M>, groups: &[FeatureGroup], mode: SageMode) -> Result<SageReport> {
    check_partition(groups, game.model.features())?;
    let n = groups.len();
    let perms: Vec<Vec<usize>> = match mode {
        SageMode::Sampled { permutations, seed } => {
            if permutations < 2 {
                return Err(ImportanceError::InvalidSettings(
                    "at least two permutations are needed".into(),
                ));
            }
            (0..permutations)
                .map(|p| {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (p as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
                    let mut order: Vec<usize> = (0..n).collect();
                    order.shuffle(&mut rng);
                    order
                })
                .collect()
        }
        SageMode::Exhaustive => {
            if n > MAX_EXHAUSTIVE_GROUPS {
                return Err(ImportanceError::TooManyGroups(n));
            }
            all_permutations(n)
        }
    };
    // gains[p][g]: marginal gain of group g in permutation p
    let gains: Vec<Vec<f64>> = perms
        .par_iter()
        .map(|order| {
            let mut known = vec![false; game.model.features()];
            let mut prev = 0.0;
            let mut gain = vec![0.0; n];
            for &g in order {
                for &m in &groups[g].members {
                    known[m] = true;
                }
                let u = game.value(&known)?;
                gain[g] = u - prev;
                prev = u;
            }
            Ok(gain)
        })
        .collect::<Result<_>>()?;
    let np = gains.len() as f64;
    let values = groups
        .iter()
        .enumerate()
        .map(|(g, grp)| {
            let mean = gains.iter().map(|r| r[g]).sum::<f64>() / np;
            let var = gains.iter().map(|r| (r[g] - mean).powi(2)).sum::<f64>() / (np - 1.0).max(1.0);
            GroupValue {
                kind: grp.kind,
                index: grp.index,
                phi: mean,
                stderr: if matches!(mode, SageMode::Exhaustive) {
                    0.0
                } else {
                    (var / np).sqrt()
                },
            }
        })
        .collect();
    let all: Vec<usize> = (0..n).collect();
    Ok(SageReport {
        values,
        u_empty: 0.0,
        u_full: game.group_value(groups, &all)?,
        baseline_loss: game.baseline(),
        permutations: perms.len(),
        exhaustive: matches!(mode, SageMode::Exhaustive),
    })
}

/// Group order for progressive inclusion.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InclusionOrder {
    SageDesc,
    SageAsc,
    Natural,
}

impl std::str::FromStr for InclusionOrder {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "sage_desc" => Ok(Self::SageDesc),
            "sage_asc" => Ok(Self::SageAsc),
            "natural" => Ok(Self::Natural),
            other => Err(format!("unknown order `{other}` (sage_desc, sage_asc, natural)")),
        }
    }
}

/// Group indices in the requested order; SAGE ties fall back to index order.
pub fn ranking(report: &SageReport, kind: GroupKind, order: InclusionOrder) -> Result<Vec<usize>> {
    if let Some(v) = report.values.iter().find(|v| v.kind != kind) {
        return Err(ImportanceError::KindMismatch {
            have: v.kind,
            want: kind,
        });
    }
    let mut idx: Vec<usize> = report.values.iter().map(|v| v.index).collect();
    let phi = |i: usize| report.values.iter().find(|v| v.index == i).map_or(0.0, |v| v.phi);
    match order {
        InclusionOrder::Natural => idx.sort_unstable(),
        InclusionOrder::SageDesc => idx.sort_by(|&a, &b| phi(b).total_cmp(&phi(a)).then(a.cmp(&b))),
        InclusionOrder::SageAsc => idx.sort_by(|&a, &b| phi(a).total_cmp(&phi(b)).then(a.cmp(&b))),
    }
    Ok(idx)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InclusionPoint {
    pub k: usize,
    pub groups: Vec<usize>,
    pub mean_chamfer_mm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InclusionCurve {
    pub kind: GroupKind,
    pub order: InclusionOrder,
    pub points: Vec<InclusionPoint>,
}

impl InclusionCurve {
    /// Smallest `K` whose error is within `tolerance` (relative) of `reference`.
    pub fn plateau_k(&self, reference: f64, tolerance: f64) -> Option<usize> {
        self.points
            .iter()
            .find(|p| p.mean_chamfer_mm <= reference * (1.0 + tolerance))
            .map(|p| p.k)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("kind,order,k,mean_chamfer_mm\n");
        let order = match self.order {
            InclusionOrder::SageDesc => "sage_desc",
            InclusionOrder::SageAsc => "sage_asc",
            InclusionOrder::Natural => "natural",
        };
        for p in &self.points {
            let _ = writeln!(out, "{},{},{},{}", self.kind.as_str(), order, p.k, p.mean_chamfer_mm);
        }
        out
    }
}

/// For each `K`, retrains a reduced regressor on the first `K` entries of
/// `ranked` (indices into `groups`), decodes with the unchanged Stage 1
/// decoder and reports the mean test Chamfer distance.
#[allow(clippy::too_many_arguments)]
pub fn progressive_inclusion(
    base: &Pipeline,
    data: &Stage2Data,
    test: &[PairedSample],
    groups: &[FeatureGroup],
    order: InclusionOrder,
    ranked: &[usize],
    ks: &[usize],
    hidden: &[usize],
    cfg: &TrainConfig,
) -> Result<InclusionCurve> {
    let features = base.regressor.arch().features;
    let latent = base.regressor.arch().latent;
    check_partition(groups, features)?;
    let kind = groups[0].kind;
    if ranked.len() != groups.len() || ranked.iter().any(|&g| g >= groups.len()) {
        return Err(ImportanceError::InvalidSettings(
            "ranking must list every group once".into(),
        ));
    }
    let mut points = Vec::with_capacity(ks.len());
    for &k in ks {
        if k == 0 || k > ranked.len() {
            return Err(ImportanceError::KOutOfRange {
                k,
                groups: ranked.len(),
            });
        }
        let chosen = ranked[..k].to_vec();
        let mut inputs: Vec<usize> = chosen.iter().flat_map(|&g| groups[g].members.iter().copied()).collect();
        inputs.sort_unstable();
        let arch = RegressorArch {
            features,
            inputs: (inputs.len() < features).then_some(inputs),
            hidden: hidden.to_vec(),
            latent,
        };
        let (regressor, _) = data.train(&arch, cfg)?;
        let reduced = Pipeline {
            autoencoder: base.autoencoder.clone(),
            regressor,
            stats: base.stats.clone(),
        };
        let (summary, _) = evaluate(&reduced, test)?;
        points.push(InclusionPoint {
            k,
            groups: chosen,
            mean_chamfer_mm: summary.overall.mean,
        });
    }
    Ok(InclusionCurve { kind, order, points })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn led_and_pd_groups_partition_the_features() {
        let (p, l) = (5, 30);
        let leds = led_groups(p, l);
        let pds = pd_groups(p, l);
        check_partition(&leds, p * l).unwrap();
        check_partition(&pds, p * l).unwrap();
        assert_eq!(leds[0].members, vec![0, 1, 2, 3, 4]);
        assert_eq!(pds[2].members[..3], [2, 7, 12]);
        let mut broken = leds.clone();
        broken[0].members.push(5);
        assert!(check_partition(&broken, p * l).is_err());
        assert!(check_partition(&leds[1..], p * l).is_err());
    }

    fn gaussian_rows(n: usize, sigmas: &[f64], seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                sigmas
                    .iter()
                    .map(|&s| Normal::new(0.0, s).unwrap().sample(&mut rng))
                    .collect()
            })
            .collect()
    }

    fn toy_game_data(w: &[f64], sigmas: &[f64], n: usize) -> (LinearModel, Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let model = LinearModel {
            weights: vec![w.to_vec()],
            bias: vec![0.0],
        };
        let x = gaussian_rows(n, sigmas, 11);
        let z = x.iter().map(|r| model.predict_rows(&[r]).unwrap()).collect();
        (model, x, z)
    }

    fn singletons(d: usize) -> Vec<FeatureGroup> {
        (0..d)
            .map(|i| FeatureGroup {
                kind: GroupKind::Led,
                index: i,
                members: vec![i],
            })
            .collect()
    }

    #[test]
    fn empty_coalition_is_worth_nothing() {
        let (m, x, z) = toy_game_data(&[1.0, 2.0], &[1.0, 1.0], 50);
        let game = Game::new(&m, &x, &z, &x, 4, 1).unwrap();
        assert_eq!(game.value(&[false, false]).unwrap(), 0.0);
        let full = game.value(&[true, true]).unwrap();
        assert!((full - game.baseline()).abs() < 1e-12);
    }

    #[test]
    fn linear_gaussian_value_matches_closed_form() {
        let (w, s) = ([1.5, -0.5, 2.0], [1.0, 2.0, 0.5]);
        let (m, x, z) = toy_game_data(&w, &s, 20000);
        let bg = gaussian_rows(20000, &s, 12);
        let k = 16;
        let game = Game::new(&m, &x, &z, &bg, k, 3).unwrap();
        let u1 = game.value(&[true, false, false]).unwrap();
        let expect = (1.0 + 1.0 / k as f64) * w[0].powi(2) * s[0].powi(2);
        assert!((u1 - expect).abs() < 0.05 * expect, "{u1} vs {expect}");
    }

    #[test]
    fn exhaustive_matches_the_subset_formula() {
        let (m, x, z) = toy_game_data(&[1.0, -2.0, 0.5], &[1.0, 1.0, 2.0], 200);
        // correlated background makes the game non-additive
        let game = Game::new(&m, &x, &z, &x, 8, 5).unwrap();
        let groups = singletons(3);
        let rep = sage(&game, &groups, SageMode::Exhaustive).unwrap();
        assert_eq!(rep.permutations, 6);
        let u = |set: &[usize]| game.group_value(&groups, set).unwrap();
        // Shapley weights for three players: |S|!(n−|S|−1)!/n!
        let w = [1.0 / 3.0, 1.0 / 6.0, 1.0 / 3.0];
        for i in 0..3 {
            let others: Vec<usize> = (0..3).filter(|&j| j != i).collect();
            let mut phi = w[0] * (u(&[i]) - 0.0);
            for &j in &others {
                phi += w[1] * (u(&[i, j]) - u(&[j]));
            }
            phi += w[2] * (u(&[0, 1, 2]) - u(&others));
            assert!((rep.values[i].phi - phi).abs() < 1e-6);
        }
        assert!((rep.total() - rep.u_full).abs() < 1e-9);
    }

    #[test]
    fn null_and_symmetric_players() {
        let (m, x, z) = toy_game_data(&[1.0, 1.0, 0.0], &[1.0, 1.0, 1.0], 2000);
        let game = Game::new(&m, &x, &z, &x, 8, 2).unwrap();
        let rep = sage(&game, &singletons(3), SageMode::Exhaustive).unwrap();
        // the null player never changes the drawn background row
        assert!(rep.values[2].phi.abs() < 1e-9);
        let (a, b) = (rep.values[0].phi, rep.values[1].phi);
        assert!((a - b).abs() < 0.05 * a.max(b), "{a} vs {b}");
        let sampled = sage(
            &game,
            &singletons(3),
            SageMode::Sampled {
                permutations: 64,
                seed: 9,
            },
        )
        .unwrap();
        assert!((sampled.total() - sampled.u_full).abs() < 1e-9);
        let again = sage(
            &game,
            &singletons(3),
            SageMode::Sampled {
                permutations: 64,
                seed: 9,
            },
        )
        .unwrap();
        assert_eq!(sampled, again);
    }

    #[test]
    fn ranking_orders() {
        let rep = SageReport {
            values: (0..4)
                .map(|i| GroupValue {
                    kind: GroupKind::Pd,
                    index: i,
                    phi: [0.5, 2.0, 0.5, 1.0][i],
                    stderr: 0.0,
                })
                .collect(),
            u_empty: 0.0,
            u_full: 4.0,
            baseline_loss: 5.0,
            permutations: 2,
            exhaustive: false,
        };
        assert_eq!(
            ranking(&rep, GroupKind::Pd, InclusionOrder::SageDesc).unwrap(),
            vec![1, 3, 0, 2]
        );
        assert_eq!(
            ranking(&rep, GroupKind::Pd, InclusionOrder::SageAsc).unwrap(),
            vec![0, 2, 3, 1]
        );
        assert_eq!(
            ranking(&rep, GroupKind::Pd, InclusionOrder::Natural).unwrap(),
            vec![0, 1, 2, 3]
        );
        assert!(ranking(&rep, GroupKind::Led, InclusionOrder::Natural).is_err());
        assert!(rep
            .to_csv()
            .starts_with("group_kind,group_index,phi,stderr\npd,1,0.5,0\n"));
    }
}
