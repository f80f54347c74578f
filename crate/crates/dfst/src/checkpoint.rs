//! Versioned model checkpoints.
//!
//! A checkpoint is a JSON container holding everything needed to rebuild
//! the trained field: network widths, init seeds, the active coefficient
//! slot map, the identity-offset flag and the flat parameter vectors.
//! `f64` values round-trip bit-exactly through the shortest-representation
//! JSON encoding.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::{param_count, CoefficientNetwork, NetworkError};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed checkpoint: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("parameter vector length {got} does not match widths (expect {expected})")]
    ParamLength { got: usize, expected: usize },
    #[error(transparent)]
    Network(#[from] NetworkError),
}

/// One serialized network.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct NetRecord {
    pub widths: Vec<usize>,
    pub seed: u64,
    pub params: Vec<f64>,
}

impl NetRecord {
    pub fn of(net: &CoefficientNetwork) -> Self {
        NetRecord {
            widths: net.widths().to_vec(),
            seed: net.seed(),
            params: net.params().to_vec(),
        }
    }

    pub fn instantiate(&self) -> Result<CoefficientNetwork, CheckpointError> {
        let expected = param_count(&self.widths);
        if self.params.len() != expected {
            return Err(CheckpointError::ParamLength { got: self.params.len(), expected });
        }
        Ok(CoefficientNetwork::from_params(self.widths.clone(), self.seed, self.params.clone())?)
    }
}

/// The on-disk model container.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    /// Problem identifier (`euler_vortex`, `beltrami`, `mhd2d`).
    pub problem: String,
    /// Space-time dimension of the field.
    pub dim: usize,
    pub identity_offset: bool,
    /// Active coefficient slots `(i, j)` (1-based, lexicographic); position
    /// k is the network output feeding slot k.
    pub slot_map: Vec<(usize, usize)>,
    pub stress_net: NetRecord,
    /// Scalar-potential network for the magnetic field (MHD only).
    pub psi_net: Option<NetRecord>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json)
            .map_err(|e| CheckpointError::Io { path: path.display().to_string(), source: e })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CheckpointError::Io { path: path.display().to_string(), source: e })?;
        let ckpt: Checkpoint = serde_json::from_str(&text)?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version(ckpt.version));
        }
        Ok(ckpt)
    }
}
