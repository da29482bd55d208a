//! Binary checkpoints.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "ICNN"  u32 version  u32 tensor_count
//! per tensor: u32 name_len, name (UTF-8), u32 rank, u32 dims[rank], f64 data[]
//! u32 json_len, JSON snapshot (UTF-8)
//! ```
//!
//! Optimizer velocities travel as ordinary tensors named `velocity.<param>`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{read_file, write_atomic};
use crate::error::{Error, Result};
use crate::model::Network;
use crate::tensor::Tensor;
use crate::train::{OptimizerState, TrainConfig};

pub const MAGIC: &[u8; 4] = b"ICNN";
pub const VERSION: u32 = 1;
const VELOCITY_PREFIX: &str = "velocity.";

/// Everything needed to rebuild the network a checkpoint came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub config: TrainConfig,
    /// Number of leading stages whose weights have been trained.
    pub trained_stages: usize,
    /// How pixel values were mapped to network inputs.
    pub input_scaling: String,
}

impl Snapshot {
    pub fn new(config: TrainConfig, trained_stages: usize) -> Self {
        Self {
            config,
            trained_stages,
            input_scaling: "rgb/255, no mean subtraction".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor)>,
    pub snapshot: Snapshot,
}

impl Checkpoint {
    /// Copies every network parameter (without gradients).
    pub fn from_network(net: &Network, snapshot: Snapshot) -> Self {
        let tensors = net
            .named_tensors()
            .into_iter()
            .map(|(name, t)| (name, Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("valid tensor")))
            .collect();
        Self { tensors, snapshot }
    }

    pub fn with_optimizer(mut self, state: &OptimizerState) -> Self {
        for (name, v) in &state.velocity {
            let t = Tensor::new(vec![v.len()], v.clone()).expect("rank-1 tensor");
            self.tensors.push((format!("{VELOCITY_PREFIX}{name}"), t));
        }
        self
    }

    pub fn optimizer_state(&self) -> OptimizerState {
        let velocity = self
            .tensors
            .iter()
            .filter_map(|(n, t)| Some((n.strip_prefix(VELOCITY_PREFIX)?.to_string(), t.data().to_vec())))
            .collect();
        OptimizerState { velocity }
    }

    fn parameters(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors
            .iter()
            .filter(|(n, _)| !n.starts_with(VELOCITY_PREFIX))
            .map(|(n, t)| (n.as_str(), t))
    }

    /// Copies matching parameters into `net` (e.g. a two-stage checkpoint
    /// initializing the first two stages of a deeper network). Returns how
    /// many tensors were loaded.
    pub fn load_into(&self, net: &mut Network) -> Result<usize> {
        net.load_tensors(self.parameters())
    }

    /// Rebuilds the network described by the snapshot; every parameter must
    /// be present.
    pub fn to_network(&self) -> Result<Network> {
        let mut net = Network::new(self.snapshot.config.net_config())?;
        let expected = net.named_tensors().len();
        let loaded = self.load_into(&mut net)?;
        if loaded != expected {
            return Err(Error::Load(format!(
                "checkpoint provides {loaded} of the {expected} tensors the configured network needs"
            )));
        }
        Ok(net)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION as usize)?;
        put_u32(&mut out, self.tensors.len())?;
        for (name, t) in &self.tensors {
            put_u32(&mut out, name.len())?;
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.rank())?;
            for &d in t.shape() {
                put_u32(&mut out, d)?;
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let json = serde_json::to_string_pretty(&self.snapshot)
            .map_err(|e| Error::Format(format!("config snapshot: {e}")))?;
        put_u32(&mut out, json.len())?;
        out.extend_from_slice(json.as_bytes());
        Ok(out)
    }

    /// Parses a complete checkpoint. Nothing is returned unless every byte
    /// is accounted for.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not an ICNN checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Corrupt("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|n| n.checked_mul(8).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| Error::Corrupt(format!("tensor {name} extends past end of file")))?;
            let data = r
                .take(8 * numel)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::Corrupt(format!("tensor {name}: {e}")))?;
            tensors.push((name, t));
        }
        let len = r.u32()? as usize;
        let json = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Corrupt("config snapshot is not UTF-8".into()))?;
        if r.remaining() != 0 {
            return Err(Error::Corrupt(format!("{} trailing bytes", r.remaining())));
        }
        let snapshot = serde_json::from_str(json).map_err(|e| Error::Corrupt(format!("config snapshot: {e}")))?;
        Ok(Self { tensors, snapshot })
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::Corrupt(format!(
                "truncated: needed {n} bytes at offset {}, {} left",
                self.pos,
                self.remaining()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    write_atomic(path, &ckpt.to_bytes()?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&read_file(path)?)
}
