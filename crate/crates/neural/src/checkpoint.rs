//! Binary checkpoints: a magic tag, a JSON header and little-endian tensors.
//!
//! Layout: `AMBNNCK1`, header length (u64 LE), header JSON, then for every
//! parameter in header order its values, Adam first moments and Adam second
//! moments.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::network::{Network, NetworkConfig};
use crate::params::ParameterStore;
use crate::real::Real;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"AMBNNCK1";

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    dtype: String,
    network: NetworkConfig,
    step: u64,
    tensors: Vec<TensorEntry>,
    /// Caller-provided metadata, typically the run configuration.
    extra: serde_json::Value,
}

pub fn to_bytes<T: Real>(net: &Network<T>, extra: &serde_json::Value) -> Result<Vec<u8>> {
    let p = net.params();
    let header = Header {
        dtype: T::NAME.to_string(),
        network: net.config().clone(),
        step: p.step(),
        tensors: p
            .ids()
            .map(|id| TensorEntry {
                name: p.name(id).to_string(),
                shape: p.value(id).shape.clone(),
            })
            .collect(),
        extra: extra.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + 3 * p.num_scalars() * T::BYTES);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for id in p.ids() {
        let i = id.index();
        for t in [p.value(id), &p.m[i], &p.v[i]] {
            for &v in &t.data {
                v.write_le(&mut out);
            }
        }
    }
    Ok(out)
}

pub fn save<T: Real>(path: &Path, net: &Network<T>, extra: &serde_json::Value) -> Result<()> {
    fs::write(path, to_bytes(net, extra)?)?;
    Ok(())
}

fn read_store<S: Real>(header: &Header, mut body: &[u8], path: &Path) -> Result<ParameterStore<S>> {
    let bad = |reason: String| NnError::Checkpoint {
        path: path.to_path_buf(),
        reason,
    };
    let mut store = ParameterStore::<S>::new();
    let mut take = |shape: &[usize]| -> Result<Tensor<S>> {
        let n: usize = shape.iter().product();
        let bytes = n * S::BYTES;
        if body.len() < bytes {
            return Err(bad("truncated tensor data".into()));
        }
        let data = body[..bytes].chunks_exact(S::BYTES).map(S::read_le).collect();
        body = &body[bytes..];
        Tensor::from_vec(shape, data)
    };
    let mut moments = Vec::new();
    for e in &header.tensors {
        let value = take(&e.shape)?;
        let m = take(&e.shape)?;
        let v = take(&e.shape)?;
        store.add(e.name.clone(), value)?;
        moments.push((m, v));
    }
    if !body.is_empty() {
        return Err(bad(format!("{} trailing bytes", body.len())));
    }
    for (i, (m, v)) in moments.into_iter().enumerate() {
        store.m[i] = m;
        store.v[i] = v;
    }
    store.step = header.step;
    Ok(store)
}

/// Parses a checkpoint, converting stored tensors to `T` if needed.
pub fn from_bytes<T: Real>(bytes: &[u8], path: &Path) -> Result<(Network<T>, serde_json::Value)> {
    let bad = |reason: &str| NnError::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body_start = 16usize.checked_add(len).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(&bytes[16..body_start]).map_err(|e| NnError::Checkpoint {
        path: path.to_path_buf(),
        reason: format!("bad header: {e}"),
    })?;
    let body = &bytes[body_start..];
    let store: ParameterStore<T> = match header.dtype.as_str() {
        "f32" => read_store::<f32>(&header, body, path)?.cast(),
        "f64" => read_store::<f64>(&header, body, path)?.cast(),
        other => return Err(bad(&format!("unknown element type {other}"))),
    };
    if !store.is_finite() {
        return Err(bad("non-finite parameters"));
    }
    let net = Network::from_parts(header.network, store).map_err(|e| NnError::Checkpoint {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    Ok((net, header.extra))
}

pub fn load<T: Real>(path: &Path) -> Result<(Network<T>, serde_json::Value)> {
    let bytes = fs::read(path)?;
    from_bytes(&bytes, path)
}
