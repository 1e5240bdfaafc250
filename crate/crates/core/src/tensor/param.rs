use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{shape_err, Result, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    /// Uniform in `±1/sqrt(fan_in)`.
    FanInUniform {
        fan_in: usize,
    },
}

#[derive(Clone, Debug, PartialEq)]
struct Entry {
    name: String,
    value: Tensor,
}

/// Named parameters in declaration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: Vec<Entry>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add<R: Rng>(&mut self, name: impl Into<String>, shape: &[usize], init: Init, rng: &mut R) -> ParamId {
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![0.0; n],
            Init::FanInUniform { fan_in } => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
            }
        };
        self.entries.push(Entry {
            name: name.into(),
            value: Tensor::new(shape.to_vec(), data).expect("sized by shape"),
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.entries.iter().map(|e| e.value.shape().to_vec()).collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// All values concatenated in declaration order.
    pub fn flatten(&self) -> Vec<f64> {
        self.entries
            .iter()
            .flat_map(|e| e.value.data().iter().copied())
            .collect()
    }

    /// Overwrites every value from a flat vector in declaration order.
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_scalars() {
            return Err(shape_err(
                "assign_flat",
                format!("need {} values, got {}", self.num_scalars(), flat.len()),
            ));
        }
        let mut offset = 0;
        for e in &mut self.entries {
            let n = e.value.len();
            e.value.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// CRC-32 over the little-endian bytes of every value; used to verify
    /// that frozen parameters stay bit-identical.
    pub fn checksum(&self) -> u32 {
        let crc = crc::Crc::<u32>::new(&crc::CRC_32_ISO_HDLC);
        let mut digest = crc.digest();
        for e in &self.entries {
            for v in e.value.data() {
                digest.update(&v.to_le_bytes());
            }
        }
        digest.finalize()
    }

    pub fn zero_grads(&self) -> GradSet {
        GradSet {
            grads: self.entries.iter().map(|e| vec![0.0; e.value.len()]).collect(),
        }
    }
}

/// Gradient buffers matching a [`ParamSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradSet {
    pub(crate) grads: Vec<Vec<f64>>,
}

impl GradSet {
    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.grads[id.0]
    }

    pub fn zero(&mut self) {
        self.grads.iter_mut().for_each(|g| g.iter_mut().for_each(|v| *v = 0.0));
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().all(|g| g.iter().all(|v| v.is_finite()))
    }

    pub fn l2_norm(&self) -> f64 {
        self.grads.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
    }
}
