//! SSCK training checkpoints.
//!
//! Layout, all little-endian: magic `SSCK`, u32 version, the config as a
//! length-prefixed TOML string, u64 completed epochs, the shuffling RNG
//! (32-byte seed, u128 word position, u64 stream), the metrics log as a
//! length-prefixed string, then a u32 tensor count and a directory of
//! tensors. Each tensor is a length-prefixed name, a u8 kind (0 weight,
//! 1 bias, 2 momentum), u32 rank, u32 dims and f64 values.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use grf_tensor::{ParamRole, Tensor};

use crate::codec::{put_blob, Reader};
use crate::error::{shape_err, Error, Result};
use crate::network::Model;
use crate::train::{RngState, TrainConfig, Trainer};

pub const MAGIC: [u8; 4] = *b"SSCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TensorKind {
    Weight,
    Bias,
    Momentum,
}

impl TensorKind {
    fn code(self) -> u8 {
        match self {
            TensorKind::Weight => 0,
            TensorKind::Bias => 1,
            TensorKind::Momentum => 2,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(TensorKind::Weight),
            1 => Ok(TensorKind::Bias),
            2 => Ok(TensorKind::Momentum),
            _ => Err(Error::Malformed {
                what: "checkpoint tensor kind",
                detail: format!("{c}"),
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub kind: TensorKind,
    pub value: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub epoch: usize,
    pub rng: RngState,
    pub log: Vec<String>,
    /// Parameters in store order, then one momentum buffer per parameter.
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn capture(t: &Trainer) -> Self {
        let mut tensors = Vec::with_capacity(2 * t.model.store.len());
        for e in t.model.store.entries() {
            tensors.push(NamedTensor {
                name: e.name.clone(),
                kind: match e.role {
                    ParamRole::Weight => TensorKind::Weight,
                    ParamRole::Bias => TensorKind::Bias,
                },
                value: e.value.clone(),
            });
        }
        for (e, v) in t.model.store.entries().iter().zip(&t.velocity) {
            tensors.push(NamedTensor {
                name: e.name.clone(),
                kind: TensorKind::Momentum,
                value: v.clone(),
            });
        }
        Self {
            config: t.config.clone(),
            epoch: t.epoch,
            rng: RngState::capture(&t.rng),
            log: t.log.clone(),
            tensors,
        }
    }

    pub fn params(&self) -> impl Iterator<Item = &NamedTensor> {
        self.tensors.iter().filter(|t| t.kind != TensorKind::Momentum)
    }

    /// The network with the stored parameter values.
    pub fn model(&self) -> Result<Model> {
        let mut model = Model::build(self.config.network(), self.config.seed)?;
        let by_name: HashMap<&str, &NamedTensor> = self.params().map(|t| (t.name.as_str(), t)).collect();
        if by_name.len() != model.store.len() {
            return shape_err(format!(
                "checkpoint holds {} parameters, network has {}",
                by_name.len(),
                model.store.len()
            ));
        }
        for e in model.store.entries_mut() {
            let Some(t) = by_name.get(e.name.as_str()) else {
                return shape_err(format!("checkpoint lacks parameter {}", e.name));
            };
            if t.value.shape() != e.value.shape() {
                return shape_err(format!(
                    "parameter {}: checkpoint shape {:?}, network shape {:?}",
                    e.name,
                    t.value.shape(),
                    e.value.shape()
                ));
            }
            e.value = t.value.clone();
        }
        Ok(model)
    }

    /// Restore the trainer exactly as it was when captured.
    pub fn trainer(&self) -> Result<Trainer> {
        let model = self.model()?;
        let momentum: HashMap<&str, &Tensor> = self
            .tensors
            .iter()
            .filter(|t| t.kind == TensorKind::Momentum)
            .map(|t| (t.name.as_str(), &t.value))
            .collect();
        let mut velocity = Vec::with_capacity(model.store.len());
        for e in model.store.entries() {
            let Some(v) = momentum.get(e.name.as_str()) else {
                return shape_err(format!("checkpoint lacks momentum for {}", e.name));
            };
            v.expect_same_shape(&e.value)?;
            velocity.push((*v).clone());
        }
        Ok(Trainer {
            config: self.config.clone(),
            model,
            velocity,
            rng: self.rng.restore(),
            epoch: self.epoch,
            log: self.log.clone(),
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_blob(&mut out, self.config.to_toml().as_bytes());
        out.extend_from_slice(&(self.epoch as u64).to_le_bytes());
        out.extend_from_slice(&self.rng.seed);
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        out.extend_from_slice(&self.rng.stream.to_le_bytes());
        put_blob(&mut out, self.log.join("\n").as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            put_blob(&mut out, t.name.as_bytes());
            out.push(t.kind.code());
            out.extend_from_slice(&(t.value.rank() as u32).to_le_bytes());
            for &d in t.value.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf);
        let magic: [u8; 4] = r.array("magic")?;
        if magic != MAGIC {
            return Err(Error::BadMagic {
                expected: MAGIC,
                found: magic,
            });
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::VersionMismatch {
                expected: VERSION,
                found: version,
            });
        }
        let config = TrainConfig::from_toml(&r.string("checkpoint config")?)?;
        let epoch = r.u64("epoch")? as usize;
        let rng = RngState {
            seed: r.array("rng seed")?,
            word_pos: r.u128("rng position")?,
            stream: r.u64("rng stream")?,
        };
        let log_text = r.string("metrics log")?;
        let log = if log_text.is_empty() {
            Vec::new()
        } else {
            log_text.split('\n').map(str::to_string).collect()
        };
        let count = r.u32("tensor count")? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = r.string("tensor name")?;
            let kind = TensorKind::from_code(r.u8("tensor kind")?)?;
            let rank = r.u32("tensor rank")? as usize;
            if rank > grf_tensor::MAX_RANK {
                return Err(Error::Malformed {
                    what: "checkpoint tensor rank",
                    detail: format!("{name}: {rank}"),
                });
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("tensor shape")? as usize);
            }
            let n: usize = shape.iter().product();
            let data = r
                .take(n.saturating_mul(8), "tensor data")?
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect();
            tensors.push(NamedTensor {
                name,
                kind,
                value: Tensor::new(&shape, data)?,
            });
        }
        r.finish("checkpoint")?;
        Ok(Self {
            config,
            epoch,
            rng,
            log,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_byte_identical() {
        let mut t = Trainer::new(TrainConfig {
            stages: 1,
            ..TrainConfig::default()
        })
        .unwrap();
        t.log.push("epoch=1 x".into());
        t.velocity[0].data_mut()[0] = 0.25;
        let c = Checkpoint::capture(&t);
        let bytes = c.encode();
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.encode(), bytes);
        let t2 = back.trainer().unwrap();
        assert_eq!(t2.velocity[0].data()[0], 0.25);
        assert_eq!(&bytes[..4], b"SSCK");
        assert_eq!(Checkpoint::decode(&bytes[..bytes.len() - 3]).unwrap_err().code(), "truncated");
    }
}
