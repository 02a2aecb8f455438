//! Binary checkpoint format.
//!
//! ```text
//! "MSCN"                      magic
//! u32 LE                      version (1)
//! u32 LE + UTF-8 JSON         header: config, seed, epoch, mean/std, momentum flag
//! per parameter tensor        u32 rank, u32 extents…, f32 LE payload
//! per momentum buffer         same layout, present iff header.momentum
//! ```
//!
//! Mean and standard deviation are stored as decimal strings that parse back
//! to the identical `f64`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Standardization;
use crate::error::{io_err, CheckpointError, Error, Result};
use crate::net::{Network, NetworkConfig};
use crate::tensor::Tensor;
use crate::train::TrainConfig;

pub const MAGIC: [u8; 4] = *b"MSCN";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: NetworkConfig,
    seed: u64,
    epoch: u32,
    mean: Option<String>,
    std: Option<String>,
    momentum: bool,
    #[serde(default)]
    train: Option<TrainConfig>,
}

/// A network plus the optimizer state needed to resume training.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub network: Network<f32>,
    /// Momentum buffers in parameter declaration order.
    pub velocity: Option<Vec<Tensor<f32>>>,
    /// Completed epochs.
    pub epoch: u32,
    pub seed: u64,
    pub train: Option<TrainConfig>,
}

impl Checkpoint {
    pub fn new(network: Network<f32>, seed: u64) -> Self {
        Self {
            network,
            velocity: None,
            epoch: 0,
            seed,
            train: None,
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let stats = self.network.stats;
        let header = Header {
            config: self.network.config().clone(),
            seed: self.seed,
            epoch: self.epoch,
            mean: stats.map(|s| s.mean.to_string()),
            std: stats.map(|s| s.std.to_string()),
            momentum: self.velocity.is_some(),
            train: self.train.clone(),
        };
        let json = serde_json::to_vec(&header).map_err(|source| Error::Json {
            context: "checkpoint header".into(),
            source,
        })?;
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        let params = self.network.params();
        let tensors = params.iter().map(|p| &p.value);
        let velocity = self.velocity.iter().flatten();
        for t in tensors.chain(velocity) {
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &e in t.shape() {
                out.extend_from_slice(&(e as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
        if magic != MAGIC {
            return Err(CheckpointError::BadMagic(magic).into());
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion(version).into());
        }
        let len = r.u32("header length")? as usize;
        let header: Header = serde_json::from_slice(r.take(len, "header")?)
            .map_err(|e| CheckpointError::Header(e.to_string()))?;
        let stats = match (&header.mean, &header.std) {
            (Some(m), Some(s)) => {
                let parse = |v: &str| {
                    v.parse::<f64>()
                        .map_err(|e| CheckpointError::Header(format!("statistic {v:?}: {e}")))
                };
                Some(
                    Standardization::new(parse(m)?, parse(s)?)
                        .map_err(|e| CheckpointError::Header(e.to_string()))?,
                )
            }
            (None, None) => None,
            _ => return Err(CheckpointError::Header("mean and std must both be present".into()).into()),
        };

        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let mut network = Network::<f32>::build(header.config.clone(), &mut rng)
            .map_err(|e| CheckpointError::Header(e.to_string()))?;
        let shapes: Vec<Vec<usize>> = network.params().iter().map(|p| p.value.shape().to_vec()).collect();
        let params = r.tensors(&shapes)?;
        network.load_params(params)?;
        network.stats = stats;
        let velocity = if header.momentum { Some(r.tensors(&shapes)?) } else { None };
        if r.pos != bytes.len() {
            return Err(CheckpointError::TrailingBytes(bytes.len() - r.pos).into());
        }
        Ok(Self {
            network,
            velocity,
            epoch: header.epoch,
            seed: header.seed,
            train: header.train,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()?).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path).map_err(io_err(path))?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(CheckpointError::Truncated(what))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn tensors(&mut self, shapes: &[Vec<usize>]) -> Result<Vec<Tensor<f32>>> {
        let mut out = Vec::with_capacity(shapes.len());
        for (index, expected) in shapes.iter().enumerate() {
            let rank = self.u32("tensor rank")? as usize;
            let found = (0..rank)
                .map(|_| self.u32("tensor extent").map(|e| e as usize))
                .collect::<Result<Vec<_>, _>>()?;
            if &found != expected {
                return Err(CheckpointError::TensorShape {
                    index,
                    expected: expected.clone(),
                    found,
                }
                .into());
            }
            let n: usize = found.iter().product();
            let payload = self.take(4 * n, "tensor payload")?;
            let data = payload
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            out.push(Tensor::from_vec(&found, data)?);
        }
        Ok(out)
    }
}
