//! Subcommand implementations. Each resolves its settings, reads its
//! inputs, writes machine-readable outputs plus `summary.txt` and
//! `manifest.json` into the output directory, and never writes into its
//! input directories.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use membrane_twin::dataset::{generate, Dataset, GenConfig};
use membrane_twin::geometry::{FieldConfig, IndenterFamily, IndenterSampler, PointCloud};
use membrane_twin::importance::{
    groups_of, progressive_inclusion, ranking, sage as run_sage, Game, GroupKind, InclusionCurve, InclusionOrder,
    SageMode, SageReport,
};
use membrane_twin::io::{cloud_csv_string, ply_string, read_json, write_json, write_text};
use membrane_twin::model::{
    evaluate, latent_targets, nn_error_map, sweep as run_sweep, train_autoencoder, Autoencoder, AutoencoderArch,
    EvalSummary, FitConfig, PairedSample, Pipeline, Regressor, RegressorArch, Stage2Data, TrainReport,
};
use membrane_twin::optics::{bend_sweep, default_layout, OpticsParams, SensorLayout, ALIGNED_PAIR, TRANSVERSE_PAIR};
use membrane_twin::readout::NormStats;
use membrane_twin::tensor::optim::{OptimizerKind, SchedulerKind, TrainConfig};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{config_hash, resolve, ConfigFile, Manifest};
use crate::{
    AblateFlags, BendFlags, CliError, EvalFlags, ExportFlags, GenDataFlags, SageFlags, SweepFlags, TrainAeFlags,
    TrainMlpFlags,
};

pub const AE_CKPT: &str = "autoencoder.ckpt";
pub const MLP_CKPT: &str = "regressor.ckpt";
pub const NORM_STATS: &str = "norm_stats.json";

pub struct Context {
    pub seed: u64,
    pub jobs: Option<usize>,
    pub out: PathBuf,
    pub file: Option<ConfigFile>,
}

impl Context {
    fn settings<T: Default + Serialize + serde::de::DeserializeOwned>(
        &self,
        section: &str,
        flags: &impl Serialize,
    ) -> Result<T, CliError> {
        resolve(self.file.as_ref(), section, flags)
    }

    /// Creates the output directory after checking it lies outside every input.
    fn out_dir(&self, inputs: &[&Path]) -> Result<&Path, CliError> {
        let abs = |p: &Path| -> PathBuf {
            let p = if p.is_absolute() {
                p.to_path_buf()
            } else {
                std::env::current_dir().unwrap_or_default().join(p)
            };
            fs::canonicalize(&p).unwrap_or(p)
        };
        let out = abs(&self.out);
        for input in inputs {
            let input = abs(input);
            if out.starts_with(&input) {
                return Err(CliError::Config(format!(
                    "output {} lies inside input {}; inputs are never modified",
                    self.out.display(),
                    input.display()
                )));
            }
        }
        fs::create_dir_all(&self.out)
            .map_err(|e| CliError::Other(format!("cannot create {}: {e}", self.out.display())))?;
        Ok(&self.out)
    }

    fn manifest<T: Serialize>(&self, subcommand: &str, settings: &T) -> Result<(), CliError> {
        #[derive(Serialize)]
        struct Hashed<'a, T> {
            seed: u64,
            settings: &'a T,
        }
        let m = Manifest {
            tool: "mtwin",
            version: env!("CARGO_PKG_VERSION"),
            subcommand,
            seed: self.seed,
            jobs: self.jobs,
            config: settings,
            config_sha256: config_hash(&Hashed {
                seed: self.seed,
                settings,
            }),
        };
        write_json(self.out.join("manifest.json"), &m).map_err(io_err)
    }

    fn jobs(&self) -> usize {
        self.jobs
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
    }
}

fn io_err(e: membrane_twin::Error) -> CliError {
    CliError::Other(e.to_string())
}

fn data_err(e: impl std::fmt::Display) -> CliError {
    CliError::Data(e.to_string())
}

fn required(p: &Option<PathBuf>, flag: &str) -> Result<PathBuf, CliError> {
    p.clone()
        .ok_or_else(|| CliError::Config(format!("`{flag}` is required")))
}

fn write(path: PathBuf, text: &str) -> Result<(), CliError> {
    write_text(path, text).map_err(io_err)
}

fn write_bytes(path: PathBuf, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(&path, bytes).map_err(|e| CliError::Other(format!("{}: {e}", path.display())))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn load_dataset(path: &Path) -> Result<Dataset, CliError> {
    Dataset::read(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn load_layout(path: Option<&Path>, params: &OpticsParams) -> Result<SensorLayout, CliError> {
    let layout = match path {
        Some(p) => read_json(p).map_err(|e| CliError::Config(e.to_string()))?,
        None => default_layout(params.gamma),
    };
    layout.validate().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(layout)
}

fn load_optics(path: Option<&Path>) -> Result<OpticsParams, CliError> {
    let params: OpticsParams = match path {
        Some(p) => read_json(p).map_err(|e| CliError::Config(e.to_string()))?,
        None => OpticsParams::default(),
    };
    params.validate().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(params)
}

/// Loads `autoencoder.ckpt`, `regressor.ckpt` and `norm_stats.json`.
pub fn load_pipeline(dir: &Path) -> Result<Pipeline, CliError> {
    let autoencoder = Autoencoder::from_checkpoint(&read_bytes(&dir.join(AE_CKPT))?).map_err(data_err)?;
    let regressor = Regressor::from_checkpoint(&read_bytes(&dir.join(MLP_CKPT))?).map_err(data_err)?;
    let stats: NormStats = read_json(dir.join(NORM_STATS)).map_err(data_err)?;
    if regressor.arch().latent != autoencoder.arch().latent || regressor.arch().features != stats.channels() {
        return Err(CliError::Data(format!(
            "{}: checkpoints and statistics disagree on shapes",
            dir.display()
        )));
    }
    Ok(Pipeline {
        autoencoder,
        regressor,
        stats,
    })
}

fn split(ds: &Dataset, which: &str) -> Result<Vec<usize>, CliError> {
    match which {
        "all" => Ok((0..ds.len()).collect()),
        "train" => Ok(ds.meta.train.clone()),
        "val" => Ok(ds.meta.val.clone()),
        other => Err(CliError::Config(format!("unknown split `{other}` (all, train, val)"))),
    }
}

/// Held-out samples: a separate dataset when given, else the validation split.
fn held_out(ds: &Dataset, other: Option<&Path>, stats: &NormStats) -> Result<Vec<PairedSample>, CliError> {
    let samples = match other {
        Some(p) => load_dataset(p)?.paired_all(stats),
        None => ds.paired(&ds.meta.val, stats),
    }
    .map_err(data_err)?;
    if samples.is_empty() {
        return Err(CliError::Data("held-out set is empty".into()));
    }
    Ok(samples)
}

fn loss_csv(report: &TrainReport) -> String {
    let mut out = String::from("epoch,lr,train_loss,val_loss\n");
    for e in &report.epochs {
        let _ = writeln!(out, "{},{},{},{}", e.epoch, e.lr, e.train_loss, e.val_loss);
    }
    out
}

fn report_summary(report: &TrainReport) -> String {
    format!(
        "{}: {} epochs, best epoch {} with validation loss {:.6}{}\n",
        report.stage,
        report.epochs.len(),
        report.best_epoch,
        report.best_val_loss,
        if report.stopped_early { " (stopped early)" } else { "" }
    )
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenDataSettings {
    pub samples: usize,
    pub grid: usize,
    pub truth_stride: usize,
    pub noise: bool,
    pub families: Vec<IndenterFamily>,
    pub flat_fraction: f64,
    pub val_fraction: f64,
    pub layout: Option<PathBuf>,
    pub optics: Option<PathBuf>,
}

impl Default for GenDataSettings {
    fn default() -> Self {
        let g = GenConfig::default();
        Self {
            samples: g.samples,
            grid: g.field.grid,
            truth_stride: g.truth_stride,
            noise: g.noise,
            families: g.sampler.families,
            flat_fraction: g.flat_fraction,
            val_fraction: g.val_fraction,
            layout: None,
            optics: None,
        }
    }
}

pub fn gen_data(ctx: &Context, flags: &GenDataFlags) -> Result<(), CliError> {
    let s: GenDataSettings = ctx.settings("gen_data", flags)?;
    if s.families.is_empty() {
        return Err(CliError::Config("at least one indenter family is required".into()));
    }
    let params = load_optics(s.optics.as_deref())?;
    let layout = load_layout(s.layout.as_deref(), &params)?;
    let cfg = GenConfig {
        samples: s.samples,
        field: FieldConfig::with_grid(s.grid),
        truth_stride: s.truth_stride,
        sampler: IndenterSampler {
            families: s.families.clone(),
            ..IndenterSampler::default()
        },
        flat_fraction: s.flat_fraction,
        noise: s.noise,
        seed: ctx.seed,
        val_fraction: s.val_fraction,
        ..GenConfig::default()
    };
    cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let out = ctx.out_dir(&[])?;
    let ds = generate(&cfg, &layout, &params).map_err(|e| match e {
        membrane_twin::Error::Io { .. } => io_err(e),
        other => CliError::Config(other.to_string()),
    })?;
    ds.write(out).map_err(io_err)?;
    let dz = &ds.meta.delta_z;
    let summary = format!(
        "samples: {} ({} train, {} val)\nframes: {}\nΔz mean {:.2} mm, std {:.2} mm, range {:.2}..{:.2} mm\n",
        ds.len(),
        ds.meta.train.len(),
        ds.meta.val.len(),
        ds.frames.len(),
        dz.mean_mm,
        dz.std_mm,
        dz.min_mm,
        dz.max_mm
    );
    print!("{summary}");
    write(out.join("summary.txt"), &summary)?;
    ctx.manifest("gen-data", &s)
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainAeSettings {
    pub data: Option<PathBuf>,
    pub latent: usize,
    pub points: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub patience: usize,
}

impl Default for TrainAeSettings {
    fn default() -> Self {
        let t = TrainConfig::autoencoder();
        Self {
            data: None,
            latent: 128,
            points: 1024,
            epochs: t.max_epochs,
            batch_size: t.batch_size,
            lr: t.lr0,
            patience: t.early_stopping_patience,
        }
    }
}

pub fn train_ae(ctx: &Context, flags: &TrainAeFlags) -> Result<(), CliError> {
    let s: TrainAeSettings = ctx.settings("train_ae", flags)?;
    let data = required(&s.data, "--data")?;
    let arch = AutoencoderArch::new(s.latent, s.points);
    arch.validate()?;
    let cfg = TrainConfig {
        batch_size: s.batch_size,
        max_epochs: s.epochs,
        lr0: s.lr,
        early_stopping_patience: s.patience,
        seed: ctx.seed,
        ..TrainConfig::autoencoder()
    };
    cfg.validate().map_err(CliError::Config)?;
    let ds = load_dataset(&data)?;
    let out = ctx.out_dir(&[&data])?;
    let clouds = |idx: &[usize]| idx.iter().map(|&k| &ds.truths[k]).collect::<Vec<&PointCloud>>();
    let (ae, report) = train_autoencoder(&clouds(&ds.meta.train), &clouds(&ds.meta.val), &arch, &cfg)?;
    write_bytes(out.join(AE_CKPT), &ae.to_checkpoint())?;
    write_json(out.join("train_ae_report.json"), &report).map_err(io_err)?;
    write(out.join("train_ae_loss.csv"), &loss_csv(&report))?;
    let summary = report_summary(&report);
    print!("{summary}");
    write(out.join("summary.txt"), &summary)?;
    ctx.manifest("train-ae", &s)
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainMlpSettings {
    pub data: Option<PathBuf>,
    pub autoencoder: Option<PathBuf>,
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
}

impl Default for TrainMlpSettings {
    fn default() -> Self {
        let t = TrainConfig::regressor();
        Self {
            data: None,
            autoencoder: None,
            hidden: vec![256, 256],
            epochs: t.max_epochs,
            batch_size: t.batch_size,
            lr: t.lr0,
            momentum: match t.optimizer {
                OptimizerKind::SgdMomentum { momentum } => momentum,
                OptimizerKind::Adam => 0.9,
            },
        }
    }
}

#[derive(Serialize)]
struct MlpReport<'a> {
    report: &'a TrainReport,
    frozen_checksum_before: u32,
    frozen_checksum_after: u32,
}

pub fn train_mlp(ctx: &Context, flags: &TrainMlpFlags) -> Result<(), CliError> {
    let s: TrainMlpSettings = ctx.settings("train_mlp", flags)?;
    let data = required(&s.data, "--data")?;
    let ae_path = s.autoencoder.clone().unwrap_or_else(|| ctx.out.join(AE_CKPT));
    let cfg = TrainConfig {
        batch_size: s.batch_size,
        max_epochs: s.epochs,
        lr0: s.lr,
        optimizer: OptimizerKind::SgdMomentum { momentum: s.momentum },
        scheduler: SchedulerKind::Cosine { t_max: s.epochs },
        seed: ctx.seed,
        ..TrainConfig::regressor()
    };
    cfg.validate().map_err(CliError::Config)?;
    let ds = load_dataset(&data)?;
    let ae_bytes = read_bytes(&ae_path)?;
    let ae = Autoencoder::from_checkpoint(&ae_bytes).map_err(data_err)?;
    let out = ctx.out_dir(&[&data])?;
    let train = ds.paired(&ds.meta.train, &ds.norm_stats).map_err(data_err)?;
    let val = ds.paired(&ds.meta.val, &ds.norm_stats).map_err(data_err)?;
    let before = ae.params().checksum();
    let stage2 = Stage2Data::new(&ae, &train.iter().collect::<Vec<_>>(), &val.iter().collect::<Vec<_>>())?;
    let arch = RegressorArch {
        hidden: s.hidden.clone(),
        ..RegressorArch::new(ds.norm_stats.channels(), ae.arch().latent)
    };
    arch.validate()?;
    let (reg, report) = stage2.train(&arch, &cfg)?;
    let after = ae.params().checksum();
    if before != after {
        return Err(CliError::Other("autoencoder parameters changed during Stage 2".into()));
    }
    write_bytes(out.join(MLP_CKPT), &reg.to_checkpoint())?;
    write_bytes(out.join(AE_CKPT), &ae_bytes)?;
    write_json(out.join(NORM_STATS), &ds.norm_stats).map_err(io_err)?;
    write_json(
        out.join("train_mlp_report.json"),
        &MlpReport {
            report: &report,
            frozen_checksum_before: before,
            frozen_checksum_after: after,
        },
    )
    .map_err(io_err)?;
    write(out.join("train_mlp_loss.csv"), &loss_csv(&report))?;
    let summary = format!(
        "{}autoencoder checksum {before:08x} unchanged\n",
        report_summary(&report)
    );
    print!("{summary}");
    write(out.join("summary.txt"), &summary)?;
    ctx.manifest("train-mlp", &s)
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSettings {
    pub data: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub split: String,
    pub nn_maps: bool,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            data: None,
            model: None,
            split: "all".into(),
            nn_maps: true,
        }
    }
}

/// Per-bin table: count, five-number summary, mean and standard deviation.
pub fn bins_csv(summary: &EvalSummary) -> String {
    let mut out = String::from("bin_lo_mm,bin_hi_mm,count,min,q1,median,q3,max,mean,std\n");
    for b in &summary.bins {
        let hi = b.hi_mm.map(|h| h.to_string()).unwrap_or_else(|| "inf".into());
        match &b.stats {
            Some(s) => {
                let _ = writeln!(
                    out,
                    "{},{hi},{},{},{},{},{},{},{},{}",
                    b.lo_mm, s.count, s.min, s.q1, s.median, s.q3, s.max, s.mean, s.std
                );
            }
            None => {
                let _ = writeln!(out, "{},{hi},0,,,,,,,", b.lo_mm);
            }
        }
    }
    let s = &summary.overall;
    let _ = writeln!(
        out,
        "all,,{},{},{},{},{},{},{},{}",
        s.count, s.min, s.q1, s.median, s.q3, s.max, s.mean, s.std
    );
    out
}

pub fn eval(ctx: &Context, flags: &EvalFlags) -> Result<(), CliError> {
    let s: EvalSettings = ctx.settings("eval", flags)?;
    let data = required(&s.data, "--data")?;
    let model = required(&s.model, "--model")?;
    let ds = load_dataset(&data)?;
    let idx = split(&ds, &s.split)?;
    let pipeline = load_pipeline(&model)?;
    let out = ctx.out_dir(&[&data, &model])?;
    let test = ds.paired(&idx, &pipeline.stats).map_err(data_err)?;
    let (summary, results) = evaluate(&pipeline, &test)?;
    write_json(out.join("eval_summary.json"), &summary).map_err(io_err)?;
    write(out.join("eval_bins.csv"), &bins_csv(&summary))?;
    let mut samples = String::from("sample,tag,delta_z_mm,chamfer_mm,nnd_max_mm\n");
    for r in &results {
        let _ = writeln!(
            samples,
            "{},{},{},{},{}",
            idx[r.index], r.tag, r.delta_z, r.chamfer_mm, r.nnd_max
        );
    }
    write(out.join("eval_samples.csv"), &samples)?;
    let mut hist = String::from("lo_mm,hi_mm,count\n");
    for (i, c) in summary.histogram.counts.iter().enumerate() {
        let w = summary.histogram.bin_width_mm;
        let _ = writeln!(hist, "{},{},{c}", i as f64 * w, (i + 1) as f64 * w);
    }
    write(out.join("eval_histogram.csv"), &hist)?;
    if s.nn_maps {
        let dir = out.join("nn_maps");
        fs::create_dir_all(&dir).map_err(|e| CliError::Other(e.to_string()))?;
        let vs: Vec<_> = test.iter().map(|t| &t.feature).collect();
        let preds = pipeline.reconstruct_batch(&vs)?;
        for (r, pred) in results.iter().zip(&preds) {
            let mut csv = String::from("x,y,z,nn_mm\n");
            for (p, d) in pred.points().iter().zip(&r.nn_distances) {
                let _ = writeln!(csv, "{},{},{},{d}", p[0], p[1], p[2]);
            }
            write(dir.join(format!("{:06}.csv", idx[r.index])), &csv)?;
        }
    }
    let o = &summary.overall;
    let text = format!(
        "samples: {}\nchamfer mean {:.4} mm, median {:.4} mm, std {:.4} mm, range {:.4}..{:.4} mm\n",
        o.count, o.mean, o.median, o.std, o.min, o.max
    );
    print!("{text}");
    write(out.join("summary.txt"), &text)?;
    ctx.manifest("eval", &s)
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepSettings {
    pub data: Option<PathBuf>,
    pub test_data: Option<PathBuf>,
    pub latents: Vec<usize>,
    pub points: Vec<usize>,
    pub ae_epochs: usize,
    pub mlp_epochs: usize,
}

impl Default for SweepSettings {
    fn default() -> Self {
        Self {
            data: None,
            test_data: None,
            latents: vec![32, 64, 128],
            points: vec![256, 1024],
            ae_epochs: 100,
            mlp_epochs: 100,
        }
    }
}

pub fn sweep(ctx: &Context, flags: &SweepFlags) -> Result<(), CliError> {
    let s: SweepSettings = ctx.settings("sweep", flags)?;
    let data = required(&s.data, "--data")?;
    if s.latents.is_empty() || s.points.is_empty() {
        return Err(CliError::Config("sweep grid must not be empty".into()));
    }
    let ds = load_dataset(&data)?;
    let mut inputs = vec![data.as_path()];
    inputs.extend(s.test_data.as_deref());
    let out = ctx.out_dir(&inputs)?;
    let train = ds.paired(&ds.meta.train, &ds.norm_stats).map_err(data_err)?;
    let val = ds.paired(&ds.meta.val, &ds.norm_stats).map_err(data_err)?;
    let test = held_out(&ds, s.test_data.as_deref(), &ds.norm_stats)?;
    let mut base = FitConfig::new(s.latents[0], s.points[0]);
    base.stage1.max_epochs = s.ae_epochs;
    base.stage1.seed = ctx.seed;
    base.stage2.max_epochs = s.mlp_epochs;
    base.stage2.scheduler = SchedulerKind::Cosine { t_max: s.mlp_epochs };
    base.stage2.seed = ctx.seed;
    let table = run_sweep(
        &train.iter().collect::<Vec<_>>(),
        &val.iter().collect::<Vec<_>>(),
        &test,
        &ds.norm_stats,
        &s.latents,
        &s.points,
        &base,
        ctx.jobs(),
    )?;
    write(out.join("sweep.csv"), &table.to_csv())?;
    write_json(out.join("sweep.json"), &table).map_err(io_err)?;
    let mut text = format!("cells: {}\n", table.cells.len());
    match table.best.map(|b| &table.cells[b]) {
        Some(c) => {
            let _ = writeln!(
                text,
                "best: L={} M_pr={} mean {:.4} mm ± {:.4}",
                c.latent,
                c.points,
                c.mean_mm.unwrap_or(f64::NAN),
                c.std_mm.unwrap_or(f64::NAN)
            );
        }
        None => text.push_str("every cell failed\n"),
    }
    print!("{text}");
    write(out.join("summary.txt"), &text)?;
    ctx.manifest("sweep", &s)
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SageSettings {
    pub data: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub eval_data: Option<PathBuf>,
    pub kind: String,
    pub permutations: usize,
    pub exhaustive: bool,
    pub draws: usize,
    pub background: usize,
}

impl Default for SageSettings {
    fn default() -> Self {
        Self {
            data: None,
            model: None,
            eval_data: None,
            kind: "both".into(),
            permutations: 64,
            exhaustive: false,
            draws: 16,
            background: 200,
        }
    }
}

fn kinds(s: &str) -> Result<Vec<GroupKind>, CliError> {
    match s {
        "led" => Ok(vec![GroupKind::Led]),
        "pd" => Ok(vec![GroupKind::Pd]),
        "both" => Ok(vec![GroupKind::Led, GroupKind::Pd]),
        other => Err(CliError::Config(format!("unknown kind `{other}` (led, pd, both)"))),
    }
}

pub fn sage(ctx: &Context, flags: &SageFlags) -> Result<(), CliError> {
    let s: SageSettings = ctx.settings("sage", flags)?;
    let data = required(&s.data, "--data")?;
    let model = required(&s.model, "--model")?;
    let kinds = kinds(&s.kind)?;
    if s.background == 0 || s.draws == 0 || (!s.exhaustive && s.permutations == 0) {
        return Err(CliError::Config(
            "background, draws and permutations must be positive".into(),
        ));
    }
    let ds = load_dataset(&data)?;
    let pipeline = load_pipeline(&model)?;
    let mut inputs = vec![data.as_path(), model.as_path()];
    inputs.extend(s.eval_data.as_deref());
    let out = ctx.out_dir(&inputs)?;
    let eval_set = held_out(&ds, s.eval_data.as_deref(), &pipeline.stats)?;
    let eval_x: Vec<Vec<f64>> = eval_set.iter().map(|p| p.feature.values.clone()).collect();
    let eval_z = latent_targets(
        &pipeline.autoencoder,
        &eval_set.iter().map(|p| &p.truth).collect::<Vec<_>>(),
    )?;
    let mut bg_idx = ds.meta.train.clone();
    bg_idx.shuffle(&mut ChaCha8Rng::seed_from_u64(ctx.seed ^ 0xb6));
    bg_idx.truncate(s.background);
    bg_idx.sort_unstable();
    let background: Vec<Vec<f64>> = ds
        .paired(&bg_idx, &pipeline.stats)
        .map_err(data_err)?
        .into_iter()
        .map(|p| p.feature.values)
        .collect();
    let game = Game::new(&pipeline.regressor, &eval_x, &eval_z, &background, s.draws, ctx.seed)?;
    let (p, l) = (ds.layout.num_pds(), ds.layout.num_leds());
    let mode = if s.exhaustive {
        SageMode::Exhaustive
    } else {
        SageMode::Sampled {
            permutations: s.permutations,
            seed: ctx.seed,
        }
    };
    let mut reports = BTreeMap::new();
    let mut text = String::new();
    for kind in kinds {
        let report = run_sage(&game, &groups_of(kind, p, l), mode)?;
        write(out.join(format!("sage_{}.csv", kind.as_str())), &report.to_csv())?;
        write(
            out.join(format!("sage_{}_layout.csv", kind.as_str())),
            &report.to_layout_csv(&ds.layout),
        )?;
        let _ = writeln!(
            text,
            "{}: Σφ = {:.6} ± {:.6}, u(full) = {:.6}, baseline loss {:.6}",
            kind.as_str(),
            report.total(),
            report.total_stderr(),
            report.u_full,
            report.baseline_loss
        );
        reports.insert(kind.as_str().to_string(), report);
    }
    write_json(out.join("sage.json"), &reports).map_err(io_err)?;
    print!("{text}");
    write(out.join("summary.txt"), &text)?;
    ctx.manifest("sage", &s)
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblateSettings {
    pub data: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub test_data: Option<PathBuf>,
    pub sage: Option<PathBuf>,
    pub kind: String,
    pub orders: Vec<InclusionOrder>,
    pub ks: Vec<usize>,
    pub epochs: usize,
}

impl Default for AblateSettings {
    fn default() -> Self {
        Self {
            data: None,
            model: None,
            test_data: None,
            sage: None,
            kind: "led".into(),
            orders: vec![InclusionOrder::SageDesc, InclusionOrder::SageAsc],
            ks: Vec::new(),
            epochs: TrainConfig::regressor().max_epochs,
        }
    }
}

#[derive(Serialize)]
struct AblationReport<'a> {
    baseline_mean_mm: f64,
    curves: &'a [InclusionCurve],
}

pub fn ablate(ctx: &Context, flags: &AblateFlags) -> Result<(), CliError> {
    let s: AblateSettings = ctx.settings("ablate", flags)?;
    let data = required(&s.data, "--data")?;
    let model = required(&s.model, "--model")?;
    let sage_path = required(&s.sage, "--sage")?;
    let kind = match kinds(&s.kind)?.as_slice() {
        [k] => *k,
        _ => return Err(CliError::Config("ablate runs one kind at a time (led or pd)".into())),
    };
    if s.orders.is_empty() {
        return Err(CliError::Config("at least one order is required".into()));
    }
    let ds = load_dataset(&data)?;
    let pipeline = load_pipeline(&model)?;
    let reports: BTreeMap<String, SageReport> = read_json(&sage_path).map_err(data_err)?;
    let report = reports
        .get(kind.as_str())
        .ok_or_else(|| CliError::Data(format!("{} has no {} report", sage_path.display(), kind.as_str())))?;
    let groups = groups_of(kind, ds.layout.num_pds(), ds.layout.num_leds());
    let ks: Vec<usize> = if s.ks.is_empty() {
        (1..=groups.len()).collect()
    } else {
        s.ks.clone()
    };
    let mut inputs = vec![data.as_path(), model.as_path(), sage_path.as_path()];
    inputs.extend(s.test_data.as_deref());
    let out = ctx.out_dir(&inputs)?;
    let train = ds.paired(&ds.meta.train, &pipeline.stats).map_err(data_err)?;
    let val = ds.paired(&ds.meta.val, &pipeline.stats).map_err(data_err)?;
    let test = held_out(&ds, s.test_data.as_deref(), &pipeline.stats)?;
    let stage2 = Stage2Data::new(
        &pipeline.autoencoder,
        &train.iter().collect::<Vec<_>>(),
        &val.iter().collect::<Vec<_>>(),
    )?;
    let cfg = TrainConfig {
        max_epochs: s.epochs,
        scheduler: SchedulerKind::Cosine { t_max: s.epochs },
        seed: ctx.seed,
        ..TrainConfig::regressor()
    };
    let hidden = pipeline.regressor.arch().hidden.clone();
    let (baseline, _) = evaluate(&pipeline, &test)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(ctx.jobs().min(s.orders.len()).max(1))
        .build()
        .map_err(|e| CliError::Other(e.to_string()))?;
    let curves: Vec<InclusionCurve> = pool.install(|| {
        s.orders
            .par_iter()
            .map(|&order| {
                let ranked = ranking(report, kind, order)?;
                progressive_inclusion(&pipeline, &stage2, &test, &groups, order, &ranked, &ks, &hidden, &cfg)
            })
            .collect::<Result<_, _>>()
    })?;
    let mut csv = String::new();
    for (i, c) in curves.iter().enumerate() {
        let body = c.to_csv();
        csv.push_str(if i == 0 {
            &body
        } else {
            body.split_once('\n').map_or("", |(_, rest)| rest)
        });
    }
    write(out.join(format!("ablation_{}.csv", kind.as_str())), &csv)?;
    write_json(
        out.join("ablation.json"),
        &AblationReport {
            baseline_mean_mm: baseline.overall.mean,
            curves: &curves,
        },
    )
    .map_err(io_err)?;
    let mut text = format!("baseline mean {:.4} mm\n", baseline.overall.mean);
    for c in &curves {
        let _ = writeln!(
            text,
            "{:?}: {}",
            c.order,
            c.points
                .iter()
                .map(|p| format!("K={} {:.4}", p.k, p.mean_chamfer_mm))
                .collect::<Vec<_>>()
                .join(", ")
        );
    }
    print!("{text}");
    write(out.join("summary.txt"), &text)?;
    ctx.manifest("ablate", &s)
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BendSettings {
    pub grid: usize,
    pub angles: Vec<f64>,
    pub layout: Option<PathBuf>,
    pub optics: Option<PathBuf>,
}

impl Default for BendSettings {
    fn default() -> Self {
        Self {
            grid: 80,
            angles: (0..6).map(|k| 30.0 * k as f64).collect(),
            layout: None,
            optics: None,
        }
    }
}

pub fn bend_characterize(ctx: &Context, flags: &BendFlags) -> Result<(), CliError> {
    let s: BendSettings = ctx.settings("bend_characterize", flags)?;
    let params = load_optics(s.optics.as_deref())?;
    let layout = load_layout(s.layout.as_deref(), &params)?;
    let out = ctx.out_dir(&[])?;
    let rows = bend_sweep(
        &FieldConfig::with_grid(s.grid),
        &layout,
        &params,
        &s.angles,
        &[ALIGNED_PAIR, TRANSVERSE_PAIR],
    )
    .map_err(|e| CliError::Config(e.to_string()))?;
    let mut csv = String::from("theta_deg,aligned,transverse\n");
    for (a, r) in s.angles.iter().zip(&rows) {
        let _ = writeln!(csv, "{a},{},{}", r[0], r[1]);
    }
    write(out.join("bend.csv"), &csv)?;
    let tv = |c: usize| rows.windows(2).map(|w| (w[1][c] - w[0][c]).abs()).sum::<f64>();
    let monotone = rows.windows(2).all(|w| w[1][0] < w[0][0]);
    let text = format!(
        "aligned pair LED {} / PD {}: strictly decreasing {monotone}, total variation {:.6}\n\
         transverse pair LED {} / PD {}: total variation {:.6} ({:.1}% of aligned)\n",
        ALIGNED_PAIR.led + 1,
        ALIGNED_PAIR.pd + 1,
        tv(0),
        TRANSVERSE_PAIR.led + 1,
        TRANSVERSE_PAIR.pd + 1,
        tv(1),
        100.0 * tv(1) / tv(0).max(f64::MIN_POSITIVE)
    );
    print!("{text}");
    write(out.join("summary.txt"), &text)?;
    ctx.manifest("bend-characterize", &s)
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExportSettings {
    pub data: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub samples: Vec<usize>,
}

impl Default for ExportSettings {
    fn default() -> Self {
        Self {
            data: None,
            model: None,
            samples: vec![0],
        }
    }
}

pub fn export(ctx: &Context, flags: &ExportFlags) -> Result<(), CliError> {
    let s: ExportSettings = ctx.settings("export", flags)?;
    let data = required(&s.data, "--data")?;
    let ds = load_dataset(&data)?;
    if let Some(&k) = s.samples.iter().find(|&&k| k >= ds.len()) {
        return Err(CliError::Config(format!(
            "sample {k} out of range (dataset has {})",
            ds.len()
        )));
    }
    let pipeline = s.model.as_deref().map(load_pipeline).transpose()?;
    let mut inputs = vec![data.as_path()];
    inputs.extend(s.model.as_deref());
    let out = ctx.out_dir(&inputs)?;
    let mut layout_csv = String::from("kind,index,x_mm,y_mm,brightness\n");
    for (i, l) in ds.layout.leds.iter().enumerate() {
        let _ = writeln!(layout_csv, "led,{},{},{},{}", i + 1, l.x, l.y, l.b);
    }
    for (i, p) in ds.layout.pds.iter().enumerate() {
        let _ = writeln!(layout_csv, "pd,{},{},{},", i + 1, p.x, p.y);
    }
    write(out.join("layout.csv"), &layout_csv)?;
    for &k in &s.samples {
        let truth = &ds.truths[k];
        write(out.join(format!("{k:06}_truth.ply")), &ply_string(truth))?;
        write(out.join(format!("{k:06}_truth.csv")), &cloud_csv_string(truth))?;
        if let Some(p) = &pipeline {
            let sample = ds.paired(&[k], &p.stats).map_err(data_err)?;
            let pred = p.reconstruct(&sample[0].feature)?;
            write(out.join(format!("{k:06}_pred.ply")), &ply_string(&pred))?;
            write(out.join(format!("{k:06}_pred.csv")), &cloud_csv_string(&pred))?;
            let map = nn_error_map(truth.points(), pred.points())?;
            let mut csv = String::from("x,y,z,nn_mm\n");
            for (q, d) in pred.points().iter().zip(&map.distances) {
                let _ = writeln!(csv, "{},{},{},{d}", q[0], q[1], q[2]);
            }
            write(out.join(format!("{k:06}_nn.csv")), &csv)?;
        }
    }
    println!("exported {} sample(s) to {}", s.samples.len(), out.display());
    ctx.manifest("export", &s)
}
