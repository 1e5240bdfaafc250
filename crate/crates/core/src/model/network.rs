//! Stage 1 point-cloud autoencoder and Stage 2 feature-to-latent regressor.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{Point3, PointCloud};
use crate::tensor::{save_checkpoint, Activation, Checkpoint, Graph, Init, NodeId, ParamId, ParamSet, Tensor};

use super::ModelError;

/// Seed for the fixed encoder subsample so every run sees the same subset.
const SUBSAMPLE_SEED: u64 = 0x5eed_0001;

/// Shape of the autoencoder. Its JSON form doubles as the checkpoint
/// architecture id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderArch {
    /// Latent size `L`.
    pub latent: usize,
    /// Predicted points `M_pr`.
    pub points: usize,
    /// Widths of the shared pointwise MLP.
    pub encoder_widths: Vec<usize>,
    /// Channels of the seed map followed by each upsampling stage.
    pub decoder_channels: Vec<usize>,
    /// Hidden width of the dense fallback decoder.
    pub dense_hidden: usize,
    /// Points fed to the encoder; larger clouds are subsampled.
    pub encoder_points: Option<usize>,
    /// Coordinates are mapped to `(p − center)/scale` inside the network.
    pub center: [f64; 3],
    pub scale: f64,
}

/// How the decoder reaches `M_pr` points.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecoderKind {
    /// Transposed convolutions from an `seed×seed` map to a `side×side` grid.
    Conv { seed: usize, side: usize, stages: usize },
    /// Fully connected fallback for non-square `M_pr`.
    Dense,
}

impl AutoencoderArch {
    pub fn new(latent: usize, points: usize) -> Self {
        Self {
            latent,
            points,
            encoder_widths: vec![64, 128, 256],
            decoder_channels: vec![256, 128, 64, 32],
            dense_hidden: 512,
            encoder_points: Some(400),
            center: [70.0, 70.0, 0.0],
            scale: 70.0,
        }
    }

    pub fn id(&self) -> String {
        format!("autoencoder:{}", serde_json::to_string(self).expect("serializable"))
    }

    pub fn from_id(id: &str) -> Result<Self, ModelError> {
        let json = id
            .strip_prefix("autoencoder:")
            .ok_or_else(|| ModelError::InvalidArch(format!("not an autoencoder id: {id}")))?;
        serde_json::from_str(json).map_err(|e| ModelError::InvalidArch(e.to_string()))
    }

    pub fn decoder_kind(&self) -> DecoderKind {
        let side = (self.points as f64).sqrt().round() as usize;
        if side * side != self.points || side < 2 {
            return DecoderKind::Dense;
        }
        let stages = (side.trailing_zeros() as usize)
            .min(3)
            .min(self.decoder_channels.len().saturating_sub(1));
        DecoderKind::Conv {
            seed: side >> stages,
            side,
            stages,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidArch(m));
        if self.latent == 0 || self.points == 0 {
            return bad("latent size and point count must be positive".into());
        }
        if self.encoder_widths.is_empty() || self.encoder_widths.contains(&0) {
            return bad("encoder widths must be non-empty and positive".into());
        }
        if self.decoder_channels.is_empty() || self.decoder_channels.contains(&0) || self.dense_hidden == 0 {
            return bad("decoder widths must be non-empty and positive".into());
        }
        if self.encoder_points == Some(0) {
            return bad("encoder_points must be positive".into());
        }
        if self.scale.is_nan() || self.scale <= 0.0 {
            return bad("coordinate scale must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Dense {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
enum DecoderParams {
    Conv {
        fc: Dense,
        stages: Vec<Conv>,
        head: Conv,
        seed: usize,
        channels: usize,
    },
    Dense {
        hidden: Dense,
        out: Dense,
    },
}

fn dense(ps: &mut ParamSet, name: &str, din: usize, dout: usize, rng: &mut ChaCha8Rng) -> Dense {
    let init = Init::FanInUniform { fan_in: din };
    Dense {
        w: ps.add(format!("{name}.weight"), &[din, dout], init, rng),
        b: ps.add(format!("{name}.bias"), &[dout], init, rng),
    }
}

fn conv(ps: &mut ParamSet, name: &str, cin: usize, cout: usize, k: usize, rng: &mut ChaCha8Rng) -> Conv {
    // fan-in of a transposed convolution as PyTorch counts it
    let init = Init::FanInUniform { fan_in: cout * k * k };
    Conv {
        w: ps.add(format!("{name}.weight"), &[cin, cout, k, k], init, rng),
        b: ps.add(format!("{name}.bias"), &[cout], init, rng),
    }
}

/// Rows of a near-square grid spanning `[−1, 1]²` at `z = 0`.
fn canonical_grid(points: usize) -> Vec<f64> {
    let side = ((points as f64).sqrt().ceil() as usize).max(2);
    let step = 2.0 / (side - 1) as f64;
    (0..points)
        .flat_map(|k| {
            let (r, c) = (k / side, k % side);
            [c as f64 * step - 1.0, r as f64 * step - 1.0, 0.0]
        })
        .collect()
}

/// Point-set encoder and grid decoder with their parameters.
#[derive(Clone, Debug)]
pub struct Autoencoder {
    arch: AutoencoderArch,
    params: ParamSet,
    pointwise: Vec<Dense>,
    head: Dense,
    decoder: DecoderParams,
    /// Per-point offset added to the decoder output, initialised to a flat
    /// grid so training starts from an undeformed membrane.
    point_bias: ParamId,
}

impl Autoencoder {
    pub fn new(arch: &AutoencoderArch, seed: u64) -> Result<Self, ModelError> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let mut pointwise = Vec::new();
        let mut din = 3;
        for (k, &w) in arch.encoder_widths.iter().enumerate() {
            pointwise.push(dense(&mut ps, &format!("encoder.pointwise{k}"), din, w, &mut rng));
            din = w;
        }
        let head = dense(&mut ps, "encoder.head", din, arch.latent, &mut rng);
        let decoder = match arch.decoder_kind() {
            DecoderKind::Conv { seed, stages, .. } => {
                let c0 = arch.decoder_channels[0];
                let fc = dense(&mut ps, "decoder.seed", arch.latent, c0 * seed * seed, &mut rng);
                let mut convs = Vec::new();
                let mut cin = c0;
                for s in 0..stages {
                    let cout = arch.decoder_channels[s + 1];
                    convs.push(conv(&mut ps, &format!("decoder.up{s}"), cin, cout, 4, &mut rng));
                    cin = cout;
                }
                let head = conv(&mut ps, "decoder.project", cin, 3, 1, &mut rng);
                DecoderParams::Conv {
                    fc,
                    stages: convs,
                    head,
                    seed,
                    channels: c0,
                }
            }
            DecoderKind::Dense => DecoderParams::Dense {
                hidden: dense(&mut ps, "decoder.hidden", arch.latent, arch.dense_hidden, &mut rng),
                out: dense(&mut ps, "decoder.out", arch.dense_hidden, arch.points * 3, &mut rng),
            },
        };
        let point_bias = ps.add("decoder.point_bias", &[arch.points, 3], Init::Zeros, &mut rng);
        ps.value_mut(point_bias)
            .data_mut()
            .copy_from_slice(&canonical_grid(arch.points));
        Ok(Self {
            arch: arch.clone(),
            params: ps,
            pointwise,
            head,
            decoder,
            point_bias,
        })
    }

    pub fn arch(&self) -> &AutoencoderArch {
        &self.arch
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// The points the encoder actually sees: the cloud sorted into a
    /// canonical order, then a fixed subset when it exceeds `encoder_points`.
    /// Both steps ignore the input order.
    pub fn encoder_view(&self, cloud: &[Point3]) -> Vec<Point3> {
        let sorted = canonical_order(cloud);
        match self.arch.encoder_points {
            Some(k) if k < sorted.len() => {
                let mut rng = ChaCha8Rng::seed_from_u64(SUBSAMPLE_SEED);
                let mut idx = index::sample(&mut rng, sorted.len(), k).into_vec();
                idx.sort_unstable();
                idx.into_iter().map(|i| sorted[i]).collect()
            }
            _ => sorted,
        }
    }

    /// Encoder over a batch of equally sized encoder views; returns `[B, L]`.
    pub fn encode_graph(&self, g: &mut Graph, views: &[Vec<Point3>]) -> Result<NodeId, ModelError> {
        let n = views.first().map_or(0, Vec::len);
        if n == 0 || views.iter().any(|v| v.len() != n) {
            return Err(ModelError::InvalidArch(
                "encoder batch needs equally sized, non-empty clouds".into(),
            ));
        }
        let c = self.arch.center;
        let inv = 1.0 / self.arch.scale;
        let data = views
            .iter()
            .flatten()
            .flat_map(|p| (0..3).map(move |k| (p[k] - c[k]) * inv))
            .collect();
        let mut h = g.input(Tensor::new(vec![views.len() * n, 3], data)?);
        for layer in &self.pointwise {
            h = self.linear(g, h, *layer, Activation::Relu)?;
        }
        let pooled = g.segment_max(h, views.len())?;
        self.linear(g, pooled, self.head, Activation::Identity)
    }

    /// Decoder from `z: [B, L]` to `[B, M_pr, 3]` in mm.
    pub fn decode_graph(&self, g: &mut Graph, z: NodeId) -> Result<NodeId, ModelError> {
        let batch = g.shape(z)[0];
        let m = self.arch.points;
        let normalized = match &self.decoder {
            DecoderParams::Conv {
                fc,
                stages,
                head,
                seed,
                channels,
            } => {
                let s = self.linear(g, z, *fc, Activation::Relu)?;
                let mut x = g.reshape(s, &[batch, *channels, *seed, *seed])?;
                for st in stages {
                    let (w, b) = (g.param(&self.params, st.w), g.param(&self.params, st.b));
                    let y = g.conv_transpose2d(x, w, Some(b), 2, 1)?;
                    x = g.relu(y);
                }
                let (w, b) = (g.param(&self.params, head.w), g.param(&self.params, head.b));
                let y = g.conv_transpose2d(x, w, Some(b), 1, 0)?;
                g.channels_last(y)?
            }
            DecoderParams::Dense { hidden, out } => {
                let h = self.linear(g, z, *hidden, Activation::Relu)?;
                let y = self.linear(g, h, *out, Activation::Identity)?;
                g.reshape(y, &[batch, m, 3])?
            }
        };
        let bias = g.param(&self.params, self.point_bias);
        let shifted = g.broadcast_add(normalized, bias)?;
        let s = self.arch.scale;
        Ok(g.affine(shifted, &[s, s, s], &self.arch.center)?)
    }

    fn linear(&self, g: &mut Graph, x: NodeId, layer: Dense, act: Activation) -> Result<NodeId, ModelError> {
        let (w, b) = (g.param(&self.params, layer.w), g.param(&self.params, layer.b));
        Ok(g.linear(x, w, Some(b), act)?)
    }

    /// Latent codes for a batch of clouds, `L` values per cloud.
    pub fn encode_batch(&self, clouds: &[&[Point3]]) -> Result<Vec<Vec<f64>>, ModelError> {
        let mut out = Vec::with_capacity(clouds.len());
        // clouds of different sizes are encoded in separate passes
        let views: Vec<Vec<Point3>> = clouds.iter().map(|c| self.encoder_view(c)).collect();
        let mut start = 0;
        while start < views.len() {
            let n = views[start].len();
            let mut end = start + 1;
            while end < views.len() && end - start < 64 && views[end].len() == n {
                end += 1;
            }
            let mut g = Graph::inference();
            let z = self.encode_graph(&mut g, &views[start..end])?;
            out.extend(g.value(z).data().chunks_exact(self.arch.latent).map(<[f64]>::to_vec));
            start = end;
        }
        Ok(out)
    }

    pub fn encode(&self, cloud: &[Point3]) -> Result<Vec<f64>, ModelError> {
        Ok(self.encode_batch(&[cloud])?.pop().expect("one code"))
    }

    /// Decodes `B` latent codes given as a flat `[B·L]` slice.
    pub fn decode_batch(&self, z: &[f64]) -> Result<Vec<PointCloud>, ModelError> {
        let l = self.arch.latent;
        if z.is_empty() || z.len() % l != 0 {
            return Err(ModelError::FeatureLength {
                expected: l,
                got: z.len(),
            });
        }
        let mut g = Graph::inference();
        let zn = g.input(Tensor::new(vec![z.len() / l, l], z.to_vec())?);
        let out = self.decode_graph(&mut g, zn)?;
        g.value(out)
            .data()
            .chunks_exact(self.arch.points * 3)
            .map(|c| PointCloud::new(c.chunks_exact(3).map(|p| [p[0], p[1], p[2]]).collect()).map_err(Into::into))
            .collect()
    }

    pub fn decode(&self, z: &[f64]) -> Result<PointCloud, ModelError> {
        Ok(self.decode_batch(z)?.pop().expect("one cloud"))
    }

    pub fn to_checkpoint(&self) -> Vec<u8> {
        save_checkpoint(&self.arch.id(), &self.params)
    }

    pub fn from_checkpoint(bytes: &[u8]) -> Result<Self, ModelError> {
        let ck = Checkpoint::decode(bytes)?;
        let arch = AutoencoderArch::from_id(&ck.arch)?;
        let mut model = Self::new(&arch, 0)?;
        crate::tensor::load_checkpoint(bytes, &arch.id(), &mut model.params)?;
        Ok(model)
    }
}

/// Points sorted lexicographically by `(x, y, z)`.
pub fn canonical_order(cloud: &[Point3]) -> Vec<Point3> {
    let mut v = cloud.to_vec();
    v.sort_by(|a, b| {
        a[0].total_cmp(&b[0])
            .then(a[1].total_cmp(&b[1]))
            .then(a[2].total_cmp(&b[2]))
    });
    v
}

/// Shape of the feature-to-latent MLP.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressorArch {
    /// Length of the full feature vector.
    pub features: usize,
    /// Feature indices the model reads; all of them when `None`.
    pub inputs: Option<Vec<usize>>,
    pub hidden: Vec<usize>,
    pub latent: usize,
}

impl RegressorArch {
    pub fn new(features: usize, latent: usize) -> Self {
        Self {
            features,
            inputs: None,
            hidden: vec![256, 256],
            latent,
        }
    }

    pub fn input_width(&self) -> usize {
        self.inputs.as_ref().map_or(self.features, Vec::len)
    }

    pub fn id(&self) -> String {
        format!("regressor:{}", serde_json::to_string(self).expect("serializable"))
    }

    pub fn from_id(id: &str) -> Result<Self, ModelError> {
        let json = id
            .strip_prefix("regressor:")
            .ok_or_else(|| ModelError::InvalidArch(format!("not a regressor id: {id}")))?;
        serde_json::from_str(json).map_err(|e| ModelError::InvalidArch(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.features == 0 || self.latent == 0 || self.hidden.contains(&0) {
            return Err(ModelError::InvalidArch("regressor sizes must be positive".into()));
        }
        if let Some(idx) = &self.inputs {
            if idx.is_empty() || idx.iter().any(|&i| i >= self.features) {
                return Err(ModelError::InvalidArch(
                    "regressor inputs must be non-empty and in range".into(),
                ));
            }
        }
        Ok(())
    }
}

/// MLP `h` from a (possibly reduced) feature vector to a latent code.
#[derive(Clone, Debug)]
pub struct Regressor {
    arch: RegressorArch,
    params: ParamSet,
    layers: Vec<Dense>,
}

impl Regressor {
    pub fn new(arch: &RegressorArch, seed: u64) -> Result<Self, ModelError> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let mut layers = Vec::new();
        let mut din = arch.input_width();
        for (k, &w) in arch.hidden.iter().chain(std::iter::once(&arch.latent)).enumerate() {
            layers.push(dense(&mut ps, &format!("regressor.fc{k}"), din, w, &mut rng));
            din = w;
        }
        Ok(Self {
            arch: arch.clone(),
            params: ps,
            layers,
        })
    }

    pub fn arch(&self) -> &RegressorArch {
        &self.arch
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Selects this model's inputs from full feature rows into `[B, in]`.
    pub fn gather_inputs(&self, rows: &[&[f64]]) -> Result<Vec<f64>, ModelError> {
        let mut out = Vec::with_capacity(rows.len() * self.arch.input_width());
        for r in rows {
            if r.len() != self.arch.features {
                return Err(ModelError::FeatureLength {
                    expected: self.arch.features,
                    got: r.len(),
                });
            }
            match &self.arch.inputs {
                Some(idx) => out.extend(idx.iter().map(|&i| r[i])),
                None => out.extend_from_slice(r),
            }
        }
        Ok(out)
    }

    /// Forward pass over gathered inputs `x: [B, in]`.
    pub fn forward_graph(&self, g: &mut Graph, x: NodeId) -> Result<NodeId, ModelError> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            let act = if k == last {
                Activation::Identity
            } else {
                Activation::Relu
            };
            let (w, b) = (g.param(&self.params, layer.w), g.param(&self.params, layer.b));
            h = g.linear(h, w, Some(b), act)?;
        }
        Ok(h)
    }

    /// Predictions for full feature rows, flat `[B·L]`.
    pub fn predict_rows(&self, rows: &[&[f64]]) -> Result<Vec<f64>, ModelError> {
        if rows.is_empty() {
            return Ok(Vec::new());
        }
        let x = self.gather_inputs(rows)?;
        let mut g = Graph::inference();
        let xn = g.input(Tensor::new(vec![rows.len(), self.arch.input_width()], x)?);
        let out = self.forward_graph(&mut g, xn)?;
        Ok(g.value(out).data().to_vec())
    }

    pub fn predict(&self, features: &[f64]) -> Result<Vec<f64>, ModelError> {
        self.predict_rows(&[features])
    }

    pub fn to_checkpoint(&self) -> Vec<u8> {
        save_checkpoint(&self.arch.id(), &self.params)
    }

    pub fn from_checkpoint(bytes: &[u8]) -> Result<Self, ModelError> {
        let ck = Checkpoint::decode(bytes)?;
        let arch = RegressorArch::from_id(&ck.arch)?;
        let mut model = Self::new(&arch, 0)?;
        crate::tensor::load_checkpoint(bytes, &arch.id(), &mut model.params)?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decoder_kind_follows_point_count() {
        let a = AutoencoderArch::new(128, 1024);
        assert_eq!(
            a.decoder_kind(),
            DecoderKind::Conv {
                seed: 4,
                side: 32,
                stages: 3
            }
        );
        assert_eq!(
            AutoencoderArch::new(64, 256).decoder_kind(),
            DecoderKind::Conv {
                seed: 2,
                side: 16,
                stages: 3
            }
        );
        assert_eq!(
            AutoencoderArch::new(4, 16).decoder_kind(),
            DecoderKind::Conv {
                seed: 1,
                side: 4,
                stages: 2
            }
        );
        assert_eq!(AutoencoderArch::new(64, 2048).decoder_kind(), DecoderKind::Dense);
        assert_eq!(
            AutoencoderArch::new(64, 4096).decoder_kind(),
            DecoderKind::Conv {
                seed: 8,
                side: 64,
                stages: 3
            }
        );
    }

    #[test]
    fn output_shapes() {
        for points in [16, 256, 90] {
            let mut arch = AutoencoderArch::new(8, points);
            arch.encoder_widths = vec![8, 16];
            arch.decoder_channels = vec![16, 8, 8, 4];
            arch.dense_hidden = 16;
            let ae = Autoencoder::new(&arch, 1).unwrap();
            let cloud: Vec<Point3> = (0..50)
                .map(|i| [i as f64, (i * 7 % 13) as f64, -(i % 5) as f64])
                .collect();
            let z = ae.encode(&cloud).unwrap();
            assert_eq!(z.len(), 8);
            assert_eq!(ae.decode(&z).unwrap().len(), points);
        }
    }

    #[test]
    fn encoding_ignores_point_order() {
        let mut arch = AutoencoderArch::new(8, 16);
        arch.encoder_widths = vec![8, 16];
        arch.encoder_points = Some(20);
        let ae = Autoencoder::new(&arch, 1).unwrap();
        let cloud: Vec<Point3> = (0..50)
            .map(|i| [i as f64, (i * 7 % 13) as f64, -(i % 5) as f64])
            .collect();
        let mut rev = cloud.clone();
        rev.reverse();
        assert_eq!(ae.encode(&cloud).unwrap(), ae.encode(&rev).unwrap());
    }

    #[test]
    fn checkpoints_round_trip() {
        let mut arch = AutoencoderArch::new(8, 16);
        arch.encoder_widths = vec![8];
        let ae = Autoencoder::new(&arch, 3).unwrap();
        let back = Autoencoder::from_checkpoint(&ae.to_checkpoint()).unwrap();
        assert_eq!(back.params().flatten(), ae.params().flatten());
        let reg = Regressor::new(&RegressorArch::new(10, 8), 2).unwrap();
        let back = Regressor::from_checkpoint(&reg.to_checkpoint()).unwrap();
        assert_eq!(back.params().flatten(), reg.params().flatten());
        assert!(Regressor::from_checkpoint(&ae.to_checkpoint()).is_err());
    }
}
