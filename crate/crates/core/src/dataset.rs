//! Synthetic paired datasets and their on-disk container.
//!
//! Every sample is one static press held for one truth-camera period. The
//! optical sensor streams frames at `sensor_rate_hz` during that period,
//! the truth camera captures once, and [`align_streams`] pairs the truth
//! frame with the most recent sensor frame.
//!
//! A dataset directory holds `layout.json`, `params.json`, `frames.bin`
//! (encoded frames back to back), `truth/NNNNNN.ply`, `pairs.csv`
//! (`truth_file,frame_index`), `norm_stats.json` (fitted on the training
//! split) and `dataset.json` (generation config, per-sample metadata and
//! the train/val split).

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::{
    delta_z, indent, to_pointcloud, DeformationField, FieldConfig, Indenter, IndenterSampler, PointCloud,
};
use crate::io::{read_json, read_ply, write_json, write_text};
use crate::model::{split_indices, PairedSample};
use crate::optics::{scan, ChannelMatrix, OpticsParams, SensorLayout};
use crate::readout::{
    align_streams, decode_stream, digitize, encode_frame, fit_norm, normalize, preprocess, MeasurementFrame, NormStats,
};
use crate::{Error, Result};

pub const DATASET_VERSION: u32 = 1;
pub const FLAT_TAG: &str = "flat";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub version: u32,
    pub samples: usize,
    pub field: FieldConfig,
    /// Stride used to sample the truth point cloud from the field grid.
    pub truth_stride: usize,
    pub sampler: IndenterSampler,
    /// Fraction of samples left undeformed.
    pub flat_fraction: f64,
    /// Read noise on or off; the dark current is always present.
    pub noise: bool,
    pub seed: u64,
    pub sensor_rate_hz: f64,
    pub truth_rate_hz: f64,
    /// Delay of the truth capture after the start of its period.
    pub truth_offset_us: u64,
    pub val_fraction: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            version: DATASET_VERSION,
            samples: 2000,
            field: FieldConfig::default(),
            truth_stride: 1,
            sampler: IndenterSampler::default(),
            flat_fraction: 0.02,
            noise: true,
            seed: 0,
            sensor_rate_hz: 90.0,
            truth_rate_hz: 30.0,
            truth_offset_us: 25_000,
            val_fraction: 0.1,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::format("generation config", m));
        if self.version != DATASET_VERSION {
            return bad("unsupported config version");
        }
        if self.samples == 0 {
            return bad("samples must be positive");
        }
        if !(0.0..=1.0).contains(&self.flat_fraction) || !(0.0..1.0).contains(&self.val_fraction) {
            return bad("fractions must lie in [0, 1)");
        }
        if !(self.sensor_rate_hz > 0.0 && self.truth_rate_hz > 0.0 && self.sensor_rate_hz >= self.truth_rate_hz) {
            return bad("sensor rate must be positive and at least the truth rate");
        }
        if self.truth_offset_us as f64 >= 1e6 / self.truth_rate_hz {
            return bad("truth offset must fall inside one truth period");
        }
        Ok(())
    }

    fn truth_period_us(&self) -> f64 {
        1e6 / self.truth_rate_hz
    }

    fn sensor_stamp(&self, j: usize) -> u64 {
        (j as f64 * 1e6 / self.sensor_rate_hz).floor() as u64
    }

    fn truth_stamp(&self, k: usize) -> u64 {
        (k as f64 * self.truth_period_us()).floor() as u64 + self.truth_offset_us
    }

    /// Sensor frames whose start falls inside truth period `k`.
    fn sensor_frames_of(&self, k: usize) -> std::ops::Range<usize> {
        let first = |k: usize| {
            ((k as f64 * self.truth_period_us()) * self.sensor_rate_hz / 1e6 - 1e-9)
                .ceil()
                .max(0.0) as usize
        };
        first(k)..first(k + 1)
    }
}

/// Per-sample metadata stored in `dataset.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub truth_file: String,
    pub frame_index: u32,
    pub truth_t_us: u64,
    pub delta_z_mm: f64,
    pub tag: String,
    pub indenter: Option<Indenter>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DzSummary {
    pub mean_mm: f64,
    pub std_mm: f64,
    pub min_mm: f64,
    pub max_mm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub config: GenConfig,
    pub samples: Vec<SampleMeta>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub delta_z: DzSummary,
    pub norm_source: String,
}

/// A generated or loaded dataset held in memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub layout: SensorLayout,
    pub params: OpticsParams,
    pub frames: Vec<MeasurementFrame>,
    pub truths: Vec<PointCloud>,
    pub norm_stats: NormStats,
}

fn sample_seed(seed: u64, k: usize, stream: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (k as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9) ^ stream
}

/// Rounds coordinates to 32-bit precision so PLY storage is lossless.
fn to_f32_precision(cloud: PointCloud) -> PointCloud {
    let pts = cloud
        .into_points()
        .into_iter()
        .map(|p| p.map(|v| v as f32 as f64))
        .collect();
    PointCloud::new(pts).expect("rounding keeps points finite")
}

struct Generated {
    truth: PointCloud,
    delta_z: f64,
    tag: String,
    indenter: Option<Indenter>,
    frames: Vec<MeasurementFrame>,
}

fn generate_one(cfg: &GenConfig, layout: &SensorLayout, params: &OpticsParams, k: usize) -> Result<Generated> {
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(cfg.seed, k, 1));
    let (field, indenter) = if rng.gen::<f64>() < cfg.flat_fraction {
        (DeformationField::flat(&cfg.field)?, None)
    } else {
        let ind = cfg.sampler.sample(cfg.field.extent_mm, &mut rng)?;
        (indent(&cfg.field, &ind)?, Some(ind))
    };
    let analog = scan(&field, layout, params)?;
    let truth = to_f32_precision(to_pointcloud(&field, cfg.truth_stride)?);
    let dz = delta_z(&truth)?;
    let frames = cfg
        .sensor_frames_of(k)
        .map(|j| {
            let mut f = digitize(&analog, params, sample_seed(cfg.seed, j, 2))?;
            f.frame_index = j as u32;
            f.t_start_us = cfg.sensor_stamp(j);
            Ok(f)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Generated {
        truth,
        delta_z: dz,
        tag: indenter
            .as_ref()
            .map_or(FLAT_TAG.to_string(), |i| i.family().to_string()),
        indenter,
        frames,
    })
}

/// Generates `cfg.samples` presses, their sensor frames and truth clouds,
/// pairs the streams and fits normalization on the training split.
pub fn generate(cfg: &GenConfig, layout: &SensorLayout, params: &OpticsParams) -> Result<Dataset> {
    cfg.validate()?;
    layout.validate()?;
    params.validate()?;
    let params = if cfg.noise {
        params.clone()
    } else {
        OpticsParams {
            sigma_noise: 0.0,
            ..params.clone()
        }
    };
    let generated: Vec<Generated> = (0..cfg.samples)
        .into_par_iter()
        .map(|k| generate_one(cfg, layout, &params, k))
        .collect::<Result<_>>()?;

    let frames: Vec<MeasurementFrame> = generated.iter().flat_map(|g| g.frames.iter().cloned()).collect();
    let sensor_us: Vec<u64> = frames.iter().map(|f| f.t_start_us).collect();
    let truth_us: Vec<u64> = (0..cfg.samples).map(|k| cfg.truth_stamp(k)).collect();
    let pairs = align_streams(&sensor_us, &truth_us)?;
    if pairs.len() != cfg.samples {
        return Err(Error::format(
            "stream alignment",
            "a truth frame precedes every sensor frame",
        ));
    }
    let mut samples = Vec::with_capacity(cfg.samples);
    for (k, (pair, g)) in pairs.iter().zip(&generated).enumerate() {
        let frame = &frames[pair.sensor];
        if !cfg.sensor_frames_of(k).contains(&(frame.frame_index as usize)) {
            return Err(Error::format(
                "stream alignment",
                format!("truth frame {k} paired outside its press"),
            ));
        }
        samples.push(SampleMeta {
            truth_file: format!("truth/{k:06}.ply"),
            frame_index: frame.frame_index,
            truth_t_us: truth_us[k],
            delta_z_mm: g.delta_z,
            tag: g.tag.clone(),
            indenter: g.indenter.clone(),
        });
    }
    let (train, val) = split_indices(cfg.samples, cfg.val_fraction, cfg.seed ^ 0x5117);
    let truths = generated.into_iter().map(|g| g.truth).collect();
    let frames_crc = crc::Crc::<u32>::new(&crc::CRC_32_ISO_HDLC).checksum(&encode_all(&frames)?);
    let norm_source = format!("gen-{}-{}-{frames_crc:08x}/train", cfg.seed, cfg.samples);
    let mut ds = Dataset {
        meta: DatasetMeta {
            config: cfg.clone(),
            delta_z: dz_summary(samples.iter().map(|s| s.delta_z_mm)),
            samples,
            train,
            val,
            norm_source: norm_source.clone(),
        },
        layout: layout.clone(),
        params,
        frames,
        truths,
        norm_stats: NormStats {
            source: String::new(),
            mean: vec![],
            std: vec![],
            degenerate: vec![],
        },
    };
    ds.norm_stats = ds.fit_norm(&ds.meta.train.clone(), &norm_source)?;
    Ok(ds)
}

fn dz_summary(values: impl Iterator<Item = f64>) -> DzSummary {
    let v: Vec<f64> = values.collect();
    let n = v.len().max(1) as f64;
    let mean = v.iter().sum::<f64>() / n;
    let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt();
    DzSummary {
        mean_mm: mean,
        std_mm: std,
        min_mm: v.iter().copied().fold(f64::INFINITY, f64::min),
        max_mm: v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    }
}

fn encode_all(frames: &[MeasurementFrame]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for f in frames {
        out.extend(encode_frame(f)?);
    }
    Ok(out)
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.meta.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.samples.is_empty()
    }

    fn frame_of(&self, k: usize) -> Result<&MeasurementFrame> {
        let idx = self.meta.samples[k].frame_index;
        self.frames
            .binary_search_by_key(&idx, |f| f.frame_index)
            .map(|i| &self.frames[i])
            .map_err(|_| Error::format("dataset", format!("frame {idx} missing from frames.bin")))
    }

    /// Preprocessed measurement matrix paired with sample `k`.
    pub fn matrix(&self, k: usize) -> Result<ChannelMatrix<u32>> {
        Ok(preprocess(self.frame_of(k)?))
    }

    /// Normalization statistics over the given samples.
    pub fn fit_norm(&self, indices: &[usize], source: &str) -> Result<NormStats> {
        let mats = indices.iter().map(|&k| self.matrix(k)).collect::<Result<Vec<_>>>()?;
        Ok(fit_norm(&mats, source)?)
    }

    /// Samples `indices` normalized with `stats` (which must come from a
    /// training split, usually of another dataset for test sets).
    pub fn paired(&self, indices: &[usize], stats: &NormStats) -> Result<Vec<PairedSample>> {
        indices
            .iter()
            .map(|&k| {
                let m = &self.meta.samples[k];
                Ok(PairedSample {
                    feature: normalize(&self.matrix(k)?, stats)?,
                    truth: self.truths[k].clone(),
                    delta_z: m.delta_z_mm,
                    tag: m.tag.clone(),
                })
            })
            .collect()
    }

    /// Every sample, normalized with `stats`.
    pub fn paired_all(&self, stats: &NormStats) -> Result<Vec<PairedSample>> {
        self.paired(&(0..self.len()).collect::<Vec<_>>(), stats)
    }

    pub fn frames_bytes(&self) -> Result<Vec<u8>> {
        encode_all(&self.frames)
    }

    pub fn pairs_csv(&self) -> String {
        let mut out = String::from("truth_file,frame_index\n");
        for s in &self.meta.samples {
            let _ = writeln!(out, "{},{}", s.truth_file, s.frame_index);
        }
        out
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir.join("truth")).map_err(|e| Error::io(dir, e))?;
        write_json(dir.join("layout.json"), &self.layout)?;
        write_json(dir.join("params.json"), &self.params)?;
        let bytes = self.frames_bytes()?;
        let path = dir.join("frames.bin");
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        self.meta
            .samples
            .par_iter()
            .zip(self.truths.par_iter())
            .map(|(s, t)| write_text(dir.join(&s.truth_file), &crate::io::ply_string(t)))
            .collect::<Result<()>>()?;
        write_text(dir.join("pairs.csv"), &self.pairs_csv())?;
        write_json(dir.join("norm_stats.json"), &self.norm_stats)?;
        write_json(dir.join("dataset.json"), &self.meta)
    }

    pub fn read(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let meta: DatasetMeta = read_json(dir.join("dataset.json"))?;
        if meta.config.version != DATASET_VERSION {
            return Err(Error::format(
                "dataset.json",
                format!("unsupported version {}", meta.config.version),
            ));
        }
        let layout: SensorLayout = read_json(dir.join("layout.json"))?;
        layout.validate()?;
        let params: OpticsParams = read_json(dir.join("params.json"))?;
        let path = dir.join("frames.bin");
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let frames = decode_stream(&bytes)?;
        if frames.windows(2).any(|w| w[1].frame_index <= w[0].frame_index) {
            return Err(Error::format("frames.bin", "frame indices are not increasing"));
        }
        let truths = meta
            .samples
            .par_iter()
            .map(|s| read_ply(dir.join(&s.truth_file)))
            .collect::<Result<Vec<_>>>()?;
        for (s, t) in meta.samples.iter().zip(&truths) {
            if (delta_z(t)? - s.delta_z_mm).abs() > 1e-9 {
                return Err(Error::format(
                    "dataset",
                    format!("{} disagrees with its stored Δz", s.truth_file),
                ));
            }
        }
        let norm_stats: NormStats = read_json(dir.join("norm_stats.json"))?;
        let ds = Self {
            meta,
            layout,
            params,
            frames,
            truths,
            norm_stats,
        };
        for k in 0..ds.len() {
            ds.frame_of(k)?;
        }
        Ok(ds)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optics::default_layout;

    fn small() -> GenConfig {
        GenConfig {
            samples: 12,
            field: FieldConfig::with_grid(24),
            truth_stride: 2,
            flat_fraction: 0.2,
            ..GenConfig::default()
        }
    }

    #[test]
    fn generation_is_deterministic_and_round_trips() {
        let layout = default_layout(0.985);
        let params = OpticsParams::default();
        let a = generate(&small(), &layout, &params).unwrap();
        let b = generate(&small(), &layout, &params).unwrap();
        assert_eq!(a.frames_bytes().unwrap(), b.frames_bytes().unwrap());
        assert_eq!(a.len(), 12);
        assert_eq!(a.frames.len(), 36);
        assert_eq!(a.meta.train.len() + a.meta.val.len(), 12);
        for (s, t) in a.meta.samples.iter().zip(&a.truths) {
            assert_eq!(t.len(), 144);
            assert!(s.delta_z_mm >= 0.0 && s.delta_z_mm <= 25.0 + 1e-9);
            assert!(s.truth_t_us >= a.frames[s.frame_index as usize].t_start_us);
            assert!(s.truth_t_us - a.frames[s.frame_index as usize].t_start_us < 11_200);
        }
        let dir = tempfile::tempdir().unwrap();
        a.write(dir.path()).unwrap();
        let back = Dataset::read(dir.path()).unwrap();
        assert_eq!(back.frames, a.frames);
        assert_eq!(back.truths, a.truths);
        assert_eq!(back.norm_stats, a.norm_stats);
        assert_eq!(back.meta, a.meta);
        let pairs = fs::read_to_string(dir.path().join("pairs.csv")).unwrap();
        assert!(pairs.starts_with("truth_file,frame_index\ntruth/000000.ply,2\n"));
    }

    #[test]
    fn normalization_uses_the_training_split() {
        let ds = generate(&small(), &default_layout(0.985), &OpticsParams::default()).unwrap();
        assert!(ds.norm_stats.source.ends_with("/train"));
        let train = ds.paired(&ds.meta.train, &ds.norm_stats).unwrap();
        let n = train.len() as f64;
        for c in 0..150 {
            if ds.norm_stats.degenerate[c] {
                continue;
            }
            let mean = train.iter().map(|s| s.feature.values[c]).sum::<f64>() / n;
            assert!(mean.abs() < 1e-9);
        }
    }
}
