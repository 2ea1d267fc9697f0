//! Single-file model checkpoints: an 8-byte little-endian header length, a JSON
//! header, then every parameter as little-endian f64 in store order.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::model::{AlphaNet, ModelConfig};
use super::params::{Init, Param, ParameterStore};
use crate::error::{Error, Result};
use crate::spearman_dropout::FeatureMask;

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: (usize, usize),
    trainable: bool,
    init: Init,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    registry_hash: String,
    mask: serde_json::Value,
    params: Vec<ParamEntry>,
}

pub fn to_bytes(model: &AlphaNet) -> Result<Vec<u8>> {
    let header = Header {
        config: model.config.clone(),
        registry_hash: model.mask.registry_hash.clone(),
        mask: serde_json::from_str(&model.mask.to_json()?)?,
        params: model
            .store
            .iter()
            .map(|(name, p)| ParamEntry {
                name: name.clone(),
                shape: p.value.dim(),
                trainable: p.trainable,
                init: p.init,
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(8 + json.len() + 8 * model.store.n_values());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, p) in model.store.iter() {
        for v in p.value.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<AlphaNet> {
    let corrupt = |m: &str| Error::Validation(format!("corrupt checkpoint: {m}"));
    if bytes.len() < 8 {
        return Err(corrupt("truncated header length"));
    }
    let hlen = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(8..8 + hlen).ok_or_else(|| corrupt("truncated header"))?;
    let header: Header = serde_json::from_slice(body)?;
    let mask = FeatureMask::from_json(&header.mask.to_string())?;
    if mask.registry_hash != header.registry_hash {
        return Err(corrupt("mask and header registry hashes differ"));
    }
    let mut blob = &bytes[8 + hlen..];
    let mut store = ParameterStore::new();
    for e in &header.params {
        let n = e.shape.0 * e.shape.1;
        if blob.len() < 8 * n {
            return Err(corrupt("truncated parameter blob"));
        }
        let vals: Vec<f64> = blob[..8 * n]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        blob = &blob[8 * n..];
        let value = Array2::from_shape_vec(e.shape, vals).map_err(|e| Error::Shape(e.to_string()))?;
        store.insert(
            &e.name,
            Param {
                value,
                trainable: e.trainable,
                init: e.init,
            },
        )?;
    }
    if !blob.is_empty() {
        return Err(corrupt("trailing bytes"));
    }
    let skeleton = AlphaNet::new(header.config.clone(), mask.clone(), 0)?;
    let expected: Vec<_> = skeleton.store.iter().map(|(n, p)| (n.clone(), p.value.dim())).collect();
    let got: Vec<_> = store.iter().map(|(n, p)| (n.clone(), p.value.dim())).collect();
    if expected != got {
        return Err(corrupt("parameter layout does not match the configuration"));
    }
    Ok(AlphaNet {
        config: header.config,
        mask,
        store,
    })
}

pub fn save(model: &AlphaNet, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<AlphaNet> {
    from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}
