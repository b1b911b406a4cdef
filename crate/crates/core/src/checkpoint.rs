//! Binary checkpoint container.
//!
//! Layout: magic `SKPCKPT\0`, format version (u32 LE), header length (u64 LE),
//! a JSON header, then every tensor as row-major f64 little-endian values in
//! header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::metrics::Metrics;
use crate::model::{ModelConfig, Network, ScenarioConfig};
use crate::param::ParamStore;
use crate::sketch::LabelSpace;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"SKPCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset in values (not bytes) from the start of the data section.
    offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    scenario: ScenarioConfig,
    label_space: serde_json::Value,
    seed: u64,
    epoch: usize,
    metrics: Option<Metrics>,
    tensors: Vec<TensorEntry>,
}

/// A trained model with everything needed to run it.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub network: Network,
    pub store: ParamStore,
    pub scenario: ScenarioConfig,
    pub label_space: LabelSpace,
    pub seed: u64,
    pub epoch: usize,
    /// Metrics at the time of saving, if any.
    pub metrics: Option<Metrics>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::with_capacity(self.store.len());
        let mut offset = 0;
        for p in self.store.iter() {
            tensors.push(TensorEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                offset,
            });
            offset += p.value.len();
        }
        let header = Header {
            model: self.network.config,
            scenario: self.scenario,
            label_space: serde_json::from_str(&self.label_space.to_json())?,
            seed: self.seed,
            epoch: self.epoch,
            metrics: self.metrics.clone(),
            tensors,
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(24 + header.len() + 8 * offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for p in self.store.iter() {
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version}"
            )));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let data_start = 20usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[20..data_start])?;
        let data = &bytes[data_start..];

        let label_space = LabelSpace::from_json(&header.label_space.to_string())?;
        if label_space.num_categories() != header.model.num_categories
            || label_space.num_components() != header.model.num_components
        {
            return Err(bad("label space does not match model dimensions"));
        }
        let (network, mut store) = Network::new(header.model, 0)?;
        if store.len() != header.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                store.len(),
                header.tensors.len()
            )));
        }
        for entry in &header.tensors {
            let id = store
                .id(&entry.name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown tensor {}", entry.name)))?;
            let param = store.get_mut(id);
            if param.value.shape() != entry.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} has shape {:?}, model expects {:?}",
                    entry.name,
                    entry.shape,
                    param.value.shape()
                )));
            }
            let count = param.value.len();
            let start = entry.offset * 8;
            let end = start + count * 8;
            if end > data.len() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} is truncated",
                    entry.name
                )));
            }
            let values = data[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            param.value = Tensor::new(entry.shape.clone(), values)?;
        }
        Ok(Self {
            network,
            store,
            scenario: header.scenario,
            label_space,
            seed: header.seed,
            epoch: header.epoch,
            metrics: header.metrics,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Hex SHA-256 of a byte string, used to identify checkpoint files.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Preset, Scenario};
    use crate::scm::FusionMode;

    fn tiny() -> Checkpoint {
        let mut config = ModelConfig::preset(Preset::Desk, 2, 3);
        config.width = 8;
        config.layers = 1;
        config.attention_heads = 2;
        config.max_strokes = 6;
        let (network, store) = Network::new(config, 4).unwrap();
        let label_space = LabelSpace::new(
            vec!["a".into(), "b".into()],
            vec!["x".into(), "y".into(), "z".into()],
            vec![vec![true, true, false], vec![false, true, true]],
        )
        .unwrap();
        Checkpoint {
            network,
            store,
            scenario: ScenarioConfig::new(Scenario::PriorInfo, FusionMode::Convex),
            label_space,
            seed: 4,
            epoch: 7,
            metrics: None,
        }
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let ck = tiny();
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.label_space, ck.label_space);
        assert_eq!(back.scenario, ck.scenario);
        assert_eq!(back.epoch, 7);
        for (a, b) in ck.store.iter().zip(back.store.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value, b.value);
        }
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn corrupt_files_rejected() {
        let bytes = tiny().to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(b"nope").is_err());
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 8]).is_err());
        let mut wrong_version = bytes.clone();
        wrong_version[8] = 9;
        assert!(Checkpoint::from_bytes(&wrong_version).is_err());
    }

    #[test]
    fn hash_is_hex_sha256() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
