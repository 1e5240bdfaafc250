//! Light transport from edge LEDs to interior photodiodes.
//!
//! The model is phenomenological: each LED-PD pair sees an intensity that
//! decays exponentially with the geodesic length of the straight material
//! path between them and with the absolute normal curvature integrated along
//! that path. Brightness droops geometrically along the LED daisy chain.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{self, DeformationField, FieldConfig, GeometryError, DEFAULT_EXTENT_MM};

pub const LAYOUT_VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum OpticsError {
    #[error("LED index {index} out of range (layout has {count})")]
    LedOutOfRange { index: usize, count: usize },
    #[error("PD index {index} out of range (layout has {count})")]
    PdOutOfRange { index: usize, count: usize },
    #[error("invalid layout: {0}")]
    InvalidLayout(String),
    #[error("invalid optics parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

type Result<T> = std::result::Result<T, OpticsError>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Led {
    pub x: f64,
    pub y: f64,
    /// Relative brightness in (0, 1].
    pub b: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Photodiode {
    pub x: f64,
    pub y: f64,
}

/// Versioned LED/PD placement document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensorLayout {
    pub version: u32,
    #[serde(rename = "W_mm")]
    pub extent_mm: f64,
    pub leds: Vec<Led>,
    pub pds: Vec<Photodiode>,
}

impl SensorLayout {
    pub fn num_leds(&self) -> usize {
        self.leds.len()
    }

    pub fn num_pds(&self) -> usize {
        self.pds.len()
    }

    pub fn num_channels(&self) -> usize {
        self.leds.len() * self.pds.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(OpticsError::InvalidLayout(m));
        if self.version != LAYOUT_VERSION {
            return bad(format!("unsupported layout version {}", self.version));
        }
        if self.leds.is_empty() || self.pds.is_empty() {
            return bad("need at least one LED and one PD".into());
        }
        let w = self.extent_mm;
        let on_edge = |v: f64| v.abs() < 1e-9 || (v - w).abs() < 1e-9;
        let within = |v: f64| (-1e-9..=w + 1e-9).contains(&v);
        for (i, led) in self.leds.iter().enumerate() {
            if !(within(led.x) && within(led.y) && (on_edge(led.x) || on_edge(led.y))) {
                return bad(format!("LED {} at ({}, {}) is not on an edge", i + 1, led.x, led.y));
            }
            if !(led.b > 0.0 && led.b <= 1.0) {
                return bad(format!("LED {} brightness {} outside (0, 1]", i + 1, led.b));
            }
        }
        if self.leds.windows(2).any(|w| w[1].b > w[0].b) {
            return bad("LED brightness must be non-increasing along the chain".into());
        }
        for (j, pd) in self.pds.iter().enumerate() {
            if !(pd.x > 0.0 && pd.x < w && pd.y > 0.0 && pd.y < w) {
                return bad(format!("PD {} at ({}, {}) is not interior", j + 1, pd.x, pd.y));
            }
        }
        Ok(())
    }

    /// Mirror image about `x = W/2`; every element keeps its index and brightness.
    pub fn mirrored_x(&self) -> Self {
        let w = self.extent_mm;
        Self {
            leds: self.leds.iter().map(|l| Led { x: w - l.x, ..*l }).collect(),
            pds: self.pds.iter().map(|p| Photodiode { x: w - p.x, y: p.y }).collect(),
            ..self.clone()
        }
    }
}

/// 30 perimeter LEDs (8, 7, 8, 7 per side) and a quincunx of 5 PDs.
///
/// The chain starts at the south-west corner and runs counter-clockwise:
/// LEDs 1–8 on the south edge, 9–15 east, 16–23 north, 24–30 west. LEDs sit
/// at the centres of equal edge segments. PD 3 is at the membrane centre.
pub fn default_layout(gamma: f64) -> SensorLayout {
    let w = DEFAULT_EXTENT_MM;
    let at = |k: usize, n: usize| w * (k as f64 + 0.5) / n as f64;
    let mut positions = Vec::with_capacity(30);
    positions.extend((0..8).map(|k| (at(k, 8), 0.0)));
    positions.extend((0..7).map(|k| (w, at(k, 7))));
    positions.extend((0..8).map(|k| (w - at(k, 8), w)));
    positions.extend((0..7).map(|k| (0.0, w - at(k, 7))));
    let leds = positions
        .into_iter()
        .enumerate()
        .map(|(i, (x, y))| Led {
            x,
            y,
            b: gamma.powi(i as i32 + 1),
        })
        .collect();
    let d = 35.0;
    let c = 0.5 * w;
    let pds = [(c - d, c - d), (c + d, c - d), (c, c), (c - d, c + d), (c + d, c + d)]
        .into_iter()
        .map(|(x, y)| Photodiode { x, y })
        .collect();
    SensorLayout {
        version: LAYOUT_VERSION,
        extent_mm: w,
        leds,
        pds,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpticsParams {
    /// Distance attenuation (1/mm).
    pub alpha: f64,
    /// Curvature attenuation (1/rad of integrated normal curvature).
    pub beta: f64,
    /// Brightness ratio between consecutive LEDs on the chain.
    pub gamma: f64,
    /// Analog full-scale intensity.
    pub fullscale: f64,
    /// Read noise as a fraction of full scale.
    pub sigma_noise: f64,
    /// Dark current as a fraction of full scale.
    pub dark_level: f64,
}

impl Default for OpticsParams {
    fn default() -> Self {
        Self {
            alpha: 0.025,
            // 150° of wall angle turns the aligned 70 mm path by 1.309 rad;
            // exp(-0.53 * 1.309) ≈ 0.5.
            beta: 0.53,
            gamma: 0.985,
            fullscale: 1.0,
            // 3σ = 0.35 % of full scale.
            sigma_noise: 0.0035 / 3.0,
            dark_level: 0.002,
        }
    }
}

impl OpticsParams {
    pub fn noiseless() -> Self {
        Self {
            sigma_noise: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(OpticsError::InvalidParams(m.into()));
        if !(self.alpha > 0.0 && self.beta > 0.0) {
            return bad("alpha and beta must be positive");
        }
        if !(self.gamma > 0.9 && self.gamma <= 1.0) {
            return bad("gamma must lie in (0.9, 1]");
        }
        if self.fullscale.is_nan() || self.fullscale <= 0.0 {
            return bad("fullscale must be positive");
        }
        if !(self.sigma_noise >= 0.0 && self.dark_level >= 0.0) {
            return bad("noise and dark level must be non-negative");
        }
        Ok(())
    }
}

/// `p × ℓ` matrix of per-channel values: row = photodiode, column = LED.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChannelMatrix<T> {
    pds: usize,
    leds: usize,
    data: Vec<T>,
}

impl<T: Copy> ChannelMatrix<T> {
    pub fn filled(pds: usize, leds: usize, value: T) -> Self {
        Self {
            pds,
            leds,
            data: vec![value; pds * leds],
        }
    }

    /// Builds a matrix from row-major (PD-major) data.
    pub fn from_rows(pds: usize, leds: usize, data: Vec<T>) -> Option<Self> {
        (data.len() == pds * leds).then_some(Self { pds, leds, data })
    }

    pub fn pds(&self) -> usize {
        self.pds
    }

    pub fn leds(&self) -> usize {
        self.leds
    }

    pub fn get(&self, pd: usize, led: usize) -> T {
        self.data[pd * self.leds + led]
    }

    pub fn set(&mut self, pd: usize, led: usize, value: T) {
        self.data[pd * self.leds + led] = value;
    }

    pub fn rows(&self) -> &[T] {
        &self.data
    }

    pub fn column(&self, led: usize) -> Vec<T> {
        (0..self.pds).map(|j| self.get(j, led)).collect()
    }

    /// Column-major flattening: channel `p·i + j` holds PD `j` under LED `i`
    /// (both zero-based), so each LED's readings are contiguous.
    pub fn flatten(&self) -> Vec<T> {
        (0..self.leds)
            .flat_map(|i| (0..self.pds).map(move |j| (i, j)))
            .map(|(i, j)| self.get(j, i))
            .collect()
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> ChannelMatrix<U> {
        ChannelMatrix {
            pds: self.pds,
            leds: self.leds,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Analog intensity at every PD while LED `led` (zero-based) is strobed.
pub fn intensity(
    field: &DeformationField,
    layout: &SensorLayout,
    params: &OpticsParams,
    led: usize,
) -> Result<Vec<f64>> {
    let source = layout.leds.get(led).ok_or(OpticsError::LedOutOfRange {
        index: led,
        count: layout.num_leds(),
    })?;
    layout
        .pds
        .iter()
        .map(|pd| {
            let prof = geometry::path_profile(field, [source.x, source.y], [pd.x, pd.y])?;
            Ok(params.fullscale
                * source.b
                * (-params.alpha * prof.length_mm).exp()
                * (-params.beta * prof.curvature_integral).exp())
        })
        .collect()
}

/// Intensity of a single LED-PD pair.
pub fn pair_intensity(
    field: &DeformationField,
    layout: &SensorLayout,
    params: &OpticsParams,
    led: usize,
    pd: usize,
) -> Result<f64> {
    if pd >= layout.num_pds() {
        return Err(OpticsError::PdOutOfRange {
            index: pd,
            count: layout.num_pds(),
        });
    }
    Ok(intensity(field, layout, params, led)?[pd])
}

/// Full time-multiplexed scan: column `i` is [`intensity`] for LED `i`.
pub fn scan(field: &DeformationField, layout: &SensorLayout, params: &OpticsParams) -> Result<ChannelMatrix<f64>> {
    let (p, l) = (layout.num_pds(), layout.num_leds());
    let mut out = ChannelMatrix::filled(p, l, 0.0);
    for i in 0..l {
        for (j, v) in intensity(field, layout, params, i)?.into_iter().enumerate() {
            out.set(j, i, v);
        }
    }
    Ok(out)
}

/// One LED-PD pair tracked through a bend sweep.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairSpec {
    pub led: usize,
    pub pd: usize,
}

/// Pair aligned with the bend direction: the west mid-edge LED (27) and the
/// central PD (3).
pub const ALIGNED_PAIR: PairSpec = PairSpec { led: 26, pd: 2 };
/// Pair transverse to the bend direction: a south mid-edge LED (4) and PD 3.
pub const TRANSVERSE_PAIR: PairSpec = PairSpec { led: 3, pd: 2 };

/// Intensity of each pair at each wall angle (rows follow `angles_deg`).
pub fn bend_sweep(
    config: &FieldConfig,
    layout: &SensorLayout,
    params: &OpticsParams,
    angles_deg: &[f64],
    pairs: &[PairSpec],
) -> Result<Vec<Vec<f64>>> {
    angles_deg
        .iter()
        .map(|&angle| {
            let field = geometry::bend(config, angle)?;
            pairs
                .iter()
                .map(|pair| pair_intensity(&field, layout, params, pair.led, pair.pd))
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{indent, Indenter, IndenterShape, Pose};

    fn flat() -> DeformationField {
        DeformationField::flat(&FieldConfig::default()).unwrap()
    }

    #[test]
    fn default_layout_shape() {
        let l = default_layout(0.985);
        l.validate().unwrap();
        assert_eq!(l.num_channels(), 150);
        for pd in &l.pds {
            let margin = pd.x.min(pd.y).min(140.0 - pd.x).min(140.0 - pd.y);
            assert!(margin >= 20.0);
        }
        assert!((l.leds[0].b - 0.985).abs() < 1e-15);
        assert!(l.leds[29].b < l.leds[14].b);
        assert!((l.leds[29].b - 0.985f64.powi(30)).abs() < 1e-15);
        let per_side = [
            l.leds.iter().filter(|p| p.y == 0.0).count(),
            l.leds.iter().filter(|p| p.x == 140.0).count(),
            l.leds.iter().filter(|p| p.y == 140.0).count(),
            l.leds.iter().filter(|p| p.x == 0.0).count(),
        ];
        assert_eq!(per_side, [8, 7, 8, 7]);
        assert_eq!((l.leds[ALIGNED_PAIR.led].x, l.leds[ALIGNED_PAIR.led].y), (0.0, 70.0));
    }

    #[test]
    fn layout_json_round_trip_uses_documented_keys() {
        let l = default_layout(0.985);
        let json = serde_json::to_value(&l).unwrap();
        assert_eq!(json["version"], 1);
        assert_eq!(json["W_mm"], 140.0);
        assert!(json["leds"][0].get("b").is_some());
        let back: SensorLayout = serde_json::from_value(json).unwrap();
        assert_eq!(back, l);
    }

    #[test]
    fn invalid_layouts_are_rejected() {
        let mut l = default_layout(0.985);
        l.pds[0].x = 0.0;
        assert!(l.validate().is_err());
        let mut l = default_layout(0.985);
        l.leds[3].y = 5.0;
        assert!(l.validate().is_err());
        let mut l = default_layout(0.985);
        l.leds[3].b = 0.999;
        assert!(l.validate().is_err());
    }

    #[test]
    fn flat_intensity_decreases_with_distance() {
        let layout = default_layout(0.985);
        let params = OpticsParams::default();
        let f = flat();
        for i in 0..layout.num_leds() {
            let vals = intensity(&f, &layout, &params, i).unwrap();
            let led = layout.leds[i];
            let mut pairs: Vec<(f64, f64)> = layout
                .pds
                .iter()
                .zip(&vals)
                .map(|(pd, &v)| (((pd.x - led.x).powi(2) + (pd.y - led.y).powi(2)).sqrt(), v))
                .collect();
            pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
            for w in pairs.windows(2) {
                if w[1].0 > w[0].0 + 1e-9 {
                    assert!(w[1].1 < w[0].1);
                }
            }
            assert!(vals.iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn index_errors() {
        let layout = default_layout(0.985);
        let p = OpticsParams::default();
        assert_eq!(
            intensity(&flat(), &layout, &p, 30).unwrap_err(),
            OpticsError::LedOutOfRange { index: 30, count: 30 }
        );
        assert!(matches!(
            pair_intensity(&flat(), &layout, &p, 0, 5),
            Err(OpticsError::PdOutOfRange { .. })
        ));
    }

    #[test]
    fn scan_shape_determinism_and_column_permutation() {
        let layout = default_layout(0.985);
        let p = OpticsParams::default();
        let f = flat();
        let a = scan(&f, &layout, &p).unwrap();
        assert_eq!((a.pds(), a.leds()), (5, 30));
        assert_eq!(a, scan(&f, &layout, &p).unwrap());

        let mut permuted = layout.clone();
        permuted.leds.swap(0, 7);
        // brightness travels with position for this check
        let b = scan(&f, &permuted, &p).unwrap();
        assert_eq!(a.column(0), b.column(7));
        assert_eq!(a.column(7), b.column(0));
        assert_eq!(a.column(3), b.column(3));
    }

    #[test]
    fn mirror_symmetry_preserves_intensities() {
        let layout = default_layout(0.985);
        let p = OpticsParams::default();
        let ind = Indenter {
            shape: IndenterShape::Cube { side_mm: 30.0 },
            pose: Pose {
                x_mm: 55.0,
                y_mm: 80.0,
                yaw_deg: 20.0,
            },
            depth_mm: 12.0,
        };
        let f = indent(&FieldConfig::default(), &ind).unwrap();
        let a = scan(&f, &layout, &p).unwrap();
        let b = scan(&f.mirrored_x(), &layout.mirrored_x(), &p).unwrap();
        for (x, y) in a.rows().iter().zip(b.rows()) {
            assert!((x - y).abs() <= 1e-9 * x.abs(), "{x} vs {y}");
        }
    }

    #[test]
    fn curvature_strictly_attenuates() {
        let layout = default_layout(0.985);
        let p = OpticsParams::default();
        let cfg = FieldConfig::default();
        let values: Vec<f64> = [0.0, 30.0, 60.0]
            .iter()
            .map(|&a| {
                pair_intensity(
                    &geometry::bend(&cfg, a).unwrap(),
                    &layout,
                    &p,
                    ALIGNED_PAIR.led,
                    ALIGNED_PAIR.pd,
                )
                .unwrap()
            })
            .collect();
        assert!(values[0] > values[1] && values[1] > values[2]);
        let base = pair_intensity(&flat(), &layout, &p, ALIGNED_PAIR.led, ALIGNED_PAIR.pd).unwrap();
        assert_eq!(values[0], base);
    }

    #[test]
    fn emitted_brightness_droops_along_chain() {
        // Intensity normalized by the flat-field path transmission recovers
        // the chain brightness, which never increases with LED index.
        let layout = default_layout(0.985);
        let p = OpticsParams::default();
        let f = flat();
        let mut prev = f64::INFINITY;
        for i in 0..layout.num_leds() {
            let led = layout.leds[i];
            let vals = intensity(&f, &layout, &p, i).unwrap();
            let emitted: f64 = layout
                .pds
                .iter()
                .zip(&vals)
                .map(|(pd, v)| v / (-p.alpha * ((pd.x - led.x).powi(2) + (pd.y - led.y).powi(2)).sqrt()).exp())
                .sum::<f64>()
                / layout.num_pds() as f64;
            assert!(emitted <= prev + 1e-12);
            prev = emitted;
        }
        // LEDs 4 and 5 see mirror-image PD distances; the later one is dimmer.
        let m4: f64 = intensity(&f, &layout, &p, 3).unwrap().iter().sum();
        let m5: f64 = intensity(&f, &layout, &p, 4).unwrap().iter().sum();
        assert!(m5 < m4);
    }

    #[test]
    fn params_validation() {
        assert!(OpticsParams::default().validate().is_ok());
        let bad = OpticsParams {
            gamma: 0.5,
            ..OpticsParams::default()
        };
        assert!(bad.validate().is_err());
    }
}
