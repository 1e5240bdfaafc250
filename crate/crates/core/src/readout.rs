//! ADC emulation, preprocessing, normalization, acquisition timing, the
//! frame wire format and sensor/ground-truth stream alignment.

use crc::{Crc, CRC_16_IBM_3740};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::optics::{ChannelMatrix, OpticsParams};

pub const ADC_BITS: u32 = 24;
pub const ADC_MAX: u32 = (1 << ADC_BITS) - 1;
/// Low bits dropped by preprocessing.
pub const DISCARD_BITS: u32 = 7;
pub const STD_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum ReadoutError {
    #[error("negative analog input {value} at PD {pd}, LED {led}")]
    NegativeInput { pd: usize, led: usize, value: f64 },
    #[error("normalization needs at least 2 training frames, got {0}")]
    TooFewFrames(usize),
    #[error("shape mismatch: expected {expected} channels, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("statistics from `{stats}` applied to data normalized for `{expected}`")]
    StatsSourceMismatch { stats: String, expected: String },
    #[error("timing: {0}")]
    Infeasible(String),
    #[error("stream alignment needs non-empty streams")]
    EmptyStream,
    #[error("stream timestamps are not monotone")]
    NonMonotone,
}

type Result<T> = std::result::Result<T, ReadoutError>;

/// One full LED scan as raw ADC codes plus the per-frame dark row.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MeasurementFrame {
    pub codes: ChannelMatrix<u32>,
    pub dark: Vec<u32>,
    pub frame_index: u32,
    pub t_start_us: u64,
}

impl MeasurementFrame {
    pub fn pds(&self) -> usize {
        self.codes.pds()
    }

    pub fn leds(&self) -> usize {
        self.codes.leds()
    }
}

fn to_code(value: f64, fullscale: f64) -> u32 {
    let v = (value / fullscale).clamp(0.0, 1.0);
    ((v * ADC_MAX as f64).floor() as u32).min(ADC_MAX)
}

/// Adds read noise and dark current, clamps to the ADC range and quantizes.
///
/// The dark row is digitized from the dark current (plus noise) alone, as if
/// every LED were off for one slot.
pub fn digitize(analog: &ChannelMatrix<f64>, params: &OpticsParams, seed: u64) -> Result<MeasurementFrame> {
    for j in 0..analog.pds() {
        for i in 0..analog.leds() {
            let value = analog.get(j, i);
            if value < 0.0 || value.is_nan() {
                return Err(ReadoutError::NegativeInput { pd: j, led: i, value });
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sigma = params.sigma_noise * params.fullscale;
    let noise = Normal::new(0.0, sigma.max(0.0)).expect("finite sigma");
    let draw = |rng: &mut ChaCha8Rng| if sigma > 0.0 { noise.sample(rng) } else { 0.0 };
    let dark_current = params.dark_level * params.fullscale;

    let mut codes = ChannelMatrix::filled(analog.pds(), analog.leds(), 0u32);
    // slot order: LEDs first, dark slot last
    for i in 0..analog.leds() {
        for j in 0..analog.pds() {
            let v = analog.get(j, i) + dark_current + draw(&mut rng);
            codes.set(j, i, to_code(v, params.fullscale));
        }
    }
    let dark = (0..analog.pds())
        .map(|_| to_code(dark_current + draw(&mut rng), params.fullscale))
        .collect();
    Ok(MeasurementFrame {
        codes,
        dark,
        frame_index: 0,
        t_start_us: 0,
    })
}

/// Dark-offset subtraction (clamped at zero) followed by discarding the
/// seven least significant bits.
pub fn preprocess(frame: &MeasurementFrame) -> ChannelMatrix<u32> {
    let mut out = frame.codes.clone();
    for j in 0..frame.pds() {
        for i in 0..frame.leds() {
            let c = frame.codes.get(j, i).saturating_sub(frame.dark[j]);
            out.set(j, i, (c >> DISCARD_BITS) << DISCARD_BITS);
        }
    }
    out
}

/// Normalized, flattened measurement vector tagged with the statistics that
/// produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub source: String,
}

impl FeatureVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Channel-wise training-set statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub source: String,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub degenerate: Vec<bool>,
}

impl NormStats {
    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn degenerate_count(&self) -> usize {
        self.degenerate.iter().filter(|&&d| d).count()
    }
}

/// Per-channel mean and population standard deviation over the training
/// matrices. Channels with zero spread get the floor and are flagged.
pub fn fit_norm(training: &[ChannelMatrix<u32>], source: impl Into<String>) -> Result<NormStats> {
    if training.len() < 2 {
        return Err(ReadoutError::TooFewFrames(training.len()));
    }
    let rows: Vec<Vec<f64>> = training
        .iter()
        .map(|m| m.flatten().into_iter().map(f64::from).collect())
        .collect();
    fit_norm_rows(&rows, source)
}

/// [`fit_norm`] over already-flattened rows.
pub fn fit_norm_rows(rows: &[Vec<f64>], source: impl Into<String>) -> Result<NormStats> {
    if rows.len() < 2 {
        return Err(ReadoutError::TooFewFrames(rows.len()));
    }
    let d = rows[0].len();
    if let Some(r) = rows.iter().find(|r| r.len() != d) {
        return Err(ReadoutError::ShapeMismatch {
            expected: d,
            got: r.len(),
        });
    }
    let n = rows.len() as f64;
    let mut mean = vec![0.0; d];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; d];
    for r in rows {
        for k in 0..d {
            var[k] += (r[k] - mean[k]).powi(2);
        }
    }
    let mut std = Vec::with_capacity(d);
    let mut degenerate = Vec::with_capacity(d);
    for v in var {
        let s = (v / n).sqrt();
        degenerate.push(s <= STD_FLOOR);
        std.push(s.max(STD_FLOOR));
    }
    Ok(NormStats {
        source: source.into(),
        mean,
        std,
        degenerate,
    })
}

pub fn normalize(matrix: &ChannelMatrix<u32>, stats: &NormStats) -> Result<FeatureVector> {
    let raw: Vec<f64> = matrix.flatten().into_iter().map(f64::from).collect();
    normalize_raw(&raw, stats)
}

pub fn normalize_raw(raw: &[f64], stats: &NormStats) -> Result<FeatureVector> {
    if raw.len() != stats.channels() {
        return Err(ReadoutError::ShapeMismatch {
            expected: stats.channels(),
            got: raw.len(),
        });
    }
    let values = raw
        .iter()
        .enumerate()
        .map(|(k, &x)| {
            if stats.degenerate[k] {
                0.0
            } else {
                (x - stats.mean[k]) / stats.std[k]
            }
        })
        .collect();
    Ok(FeatureVector {
        values,
        source: stats.source.clone(),
    })
}

/// Inverse of [`normalize`] (degenerate channels return their mean).
pub fn denormalize(v: &FeatureVector, stats: &NormStats) -> Result<Vec<f64>> {
    if v.source != stats.source {
        return Err(ReadoutError::StatsSourceMismatch {
            stats: stats.source.clone(),
            expected: v.source.clone(),
        });
    }
    if v.len() != stats.channels() {
        return Err(ReadoutError::ShapeMismatch {
            expected: stats.channels(),
            got: v.len(),
        });
    }
    Ok(v.values
        .iter()
        .enumerate()
        .map(|(k, &x)| {
            if stats.degenerate[k] {
                stats.mean[k]
            } else {
                x * stats.std[k] + stats.mean[k]
            }
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Timing

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub strobe_us: f64,
    pub dark_slots: usize,
    /// Fixed per-frame overhead (UART transfer, housekeeping).
    pub overhead_us: f64,
    pub target_rate_hz: Option<f64>,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            strobe_us: 180.0,
            dark_slots: 1,
            overhead_us: 5_500.0,
            target_rate_hz: Some(90.0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SlotKind {
    Led { index: usize },
    Dark,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Slot {
    pub kind: SlotKind,
    pub start_us: f64,
    pub duration_us: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameTiming {
    pub slots: Vec<Slot>,
    pub active_us: f64,
    pub period_us: f64,
    pub max_rate_hz: f64,
}

/// Lays out one strobe slot per LED followed by the dark slots, and checks
/// the target frame rate against the resulting period.
pub fn schedule(leds: usize, config: &ScheduleConfig) -> Result<FrameTiming> {
    if leds == 0 {
        return Err(ReadoutError::Infeasible("need at least one LED".into()));
    }
    if !(config.strobe_us > 0.0 && config.overhead_us >= 0.0) {
        return Err(ReadoutError::Infeasible(
            "strobe must be positive and overhead non-negative".into(),
        ));
    }
    let mut slots = Vec::with_capacity(leds + config.dark_slots);
    let kinds = (0..leds)
        .map(|index| SlotKind::Led { index })
        .chain((0..config.dark_slots).map(|_| SlotKind::Dark));
    for (k, kind) in kinds.enumerate() {
        slots.push(Slot {
            kind,
            start_us: k as f64 * config.strobe_us,
            duration_us: config.strobe_us,
        });
    }
    let active_us = slots.len() as f64 * config.strobe_us;
    let period_us = active_us + config.overhead_us;
    let max_rate_hz = 1e6 / period_us;
    if let Some(rate) = config.target_rate_hz {
        if rate > max_rate_hz {
            return Err(ReadoutError::Infeasible(format!(
                "{rate} Hz needs a period of {:.1} us but the scan takes {period_us:.1} us",
                1e6 / rate
            )));
        }
    }
    Ok(FrameTiming {
        slots,
        active_us,
        period_us,
        max_rate_hz,
    })
}

/// UART transfer time with 8N1 framing (10 bit times per byte).
pub fn uart_transfer_us(bytes: usize, baud: f64) -> f64 {
    bytes as f64 * 10.0 / baud * 1e6
}

// ---------------------------------------------------------------------------
// Wire format

pub const FRAME_MAGIC: [u8; 2] = [0xA5, 0x5A];
pub const FRAME_VERSION: u8 = 1;
pub const HEADER_LEN: usize = 17;
const CRC16: Crc<u16> = Crc::<u16>::new(&CRC_16_IBM_3740); // CCITT-FALSE

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CodecError {
    #[error("bad magic bytes {0:#04x} {1:#04x}")]
    BadMagic(u8, u8),
    #[error("unsupported frame version {0}")]
    UnsupportedVersion(u8),
    #[error("truncated frame: need {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("CRC mismatch: computed {computed:#06x}, stored {stored:#06x}")]
    BadCrc { computed: u16, stored: u16 },
    #[error("{0} trailing bytes after frame")]
    TrailingBytes(usize),
    #[error("frame dimensions {pds}x{leds} do not fit the format")]
    BadDimensions { pds: usize, leds: usize },
    #[error("sample {0} exceeds 24 bits")]
    SampleOverflow(u32),
}

pub fn encoded_len(pds: usize, leds: usize) -> usize {
    HEADER_LEN + 3 * (pds * leds + pds) + 2
}

/// Little-endian frame: magic, version, p, ℓ, frame index (u32), start time
/// (u64 µs), then `p·ℓ` codes (PD-major rows) and `p` dark codes as 3-byte
/// integers, then CRC-16/CCITT-FALSE over everything before it.
pub fn encode_frame(frame: &MeasurementFrame) -> std::result::Result<Vec<u8>, CodecError> {
    let (p, l) = (frame.pds(), frame.leds());
    if p == 0 || l == 0 || p > 255 || l > 255 || frame.dark.len() != p {
        return Err(CodecError::BadDimensions { pds: p, leds: l });
    }
    let mut out = Vec::with_capacity(encoded_len(p, l));
    out.extend_from_slice(&FRAME_MAGIC);
    out.push(FRAME_VERSION);
    out.push(p as u8);
    out.push(l as u8);
    out.extend_from_slice(&frame.frame_index.to_le_bytes());
    out.extend_from_slice(&frame.t_start_us.to_le_bytes());
    for &s in frame.codes.rows().iter().chain(&frame.dark) {
        if s > ADC_MAX {
            return Err(CodecError::SampleOverflow(s));
        }
        out.extend_from_slice(&s.to_le_bytes()[..3]);
    }
    let crc = CRC16.checksum(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

/// Decodes the frame at the start of `bytes`, returning it with the number
/// of bytes consumed.
pub fn decode_frame_prefix(bytes: &[u8]) -> std::result::Result<(MeasurementFrame, usize), CodecError> {
    if bytes.len() < HEADER_LEN {
        return Err(CodecError::Truncated {
            needed: HEADER_LEN,
            have: bytes.len(),
        });
    }
    if bytes[..2] != FRAME_MAGIC {
        return Err(CodecError::BadMagic(bytes[0], bytes[1]));
    }
    if bytes[2] != FRAME_VERSION {
        return Err(CodecError::UnsupportedVersion(bytes[2]));
    }
    let (p, l) = (bytes[3] as usize, bytes[4] as usize);
    let needed = encoded_len(p, l);
    if bytes.len() < needed {
        return Err(CodecError::Truncated {
            needed,
            have: bytes.len(),
        });
    }
    let body = &bytes[..needed - 2];
    let stored = u16::from_le_bytes([bytes[needed - 2], bytes[needed - 1]]);
    let computed = CRC16.checksum(body);
    if computed != stored {
        return Err(CodecError::BadCrc { computed, stored });
    }
    if p == 0 || l == 0 {
        return Err(CodecError::BadDimensions { pds: p, leds: l });
    }
    let frame_index = u32::from_le_bytes(body[5..9].try_into().expect("4 bytes"));
    let t_start_us = u64::from_le_bytes(body[9..17].try_into().expect("8 bytes"));
    let samples: Vec<u32> = body[HEADER_LEN..]
        .chunks_exact(3)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], 0]))
        .collect();
    let (codes, dark) = samples.split_at(p * l);
    Ok((
        MeasurementFrame {
            codes: ChannelMatrix::from_rows(p, l, codes.to_vec()).expect("sized by header"),
            dark: dark.to_vec(),
            frame_index,
            t_start_us,
        },
        needed,
    ))
}

/// Decodes a buffer holding exactly one frame.
pub fn decode_frame(bytes: &[u8]) -> std::result::Result<MeasurementFrame, CodecError> {
    let (frame, used) = decode_frame_prefix(bytes)?;
    if used != bytes.len() {
        return Err(CodecError::TrailingBytes(bytes.len() - used));
    }
    Ok(frame)
}

/// Decodes a concatenation of frames.
pub fn decode_stream(mut bytes: &[u8]) -> std::result::Result<Vec<MeasurementFrame>, CodecError> {
    let mut frames = Vec::new();
    while !bytes.is_empty() {
        let (frame, used) = decode_frame_prefix(bytes)?;
        frames.push(frame);
        bytes = &bytes[used..];
    }
    Ok(frames)
}

// ---------------------------------------------------------------------------
// Stream alignment

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AlignedPair {
    pub truth: usize,
    pub sensor: usize,
    pub lag_us: u64,
}

/// Pairs each truth frame with the latest sensor frame stamped at or before
/// it. Truth frames older than every sensor frame are dropped.
pub fn align_streams(sensor_us: &[u64], truth_us: &[u64]) -> Result<Vec<AlignedPair>> {
    if sensor_us.is_empty() || truth_us.is_empty() {
        return Err(ReadoutError::EmptyStream);
    }
    if sensor_us.windows(2).any(|w| w[1] < w[0]) || truth_us.windows(2).any(|w| w[1] < w[0]) {
        return Err(ReadoutError::NonMonotone);
    }
    let mut pairs = Vec::with_capacity(truth_us.len());
    let mut s = 0usize;
    for (t, &tt) in truth_us.iter().enumerate() {
        while s + 1 < sensor_us.len() && sensor_us[s + 1] <= tt {
            s += 1;
        }
        if sensor_us[s] <= tt {
            pairs.push(AlignedPair {
                truth: t,
                sensor: s,
                lag_us: tt - sensor_us[s],
            });
        }
    }
    Ok(pairs)
}
