//! Binary checkpoint container.
//!
//! Layout: the 8 magic bytes `DOMUSFM1`, a little-endian `u64` header length,
//! a UTF-8 JSON header listing every tensor (name, dtype, shape, byte offset)
//! plus group freeze flags and free-form metadata, then the raw little-endian
//! `f32` payloads in header order.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"DOMUSFM1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupEntry {
    pub name: String,
    pub frozen: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub metadata: BTreeMap<String, String>,
    pub groups: Vec<GroupEntry>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub metadata: BTreeMap<String, String>,
    pub params: ParamStore<f32>,
}

pub fn save(params: &ParamStore<f32>, metadata: &BTreeMap<String, String>) -> Vec<u8> {
    let mut tensors = Vec::new();
    let mut offset = 0u64;
    for id in params.ids() {
        let t = params.get(id);
        tensors.push(TensorEntry {
            name: params.full_name(id),
            dtype: "f32".into(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += 4 * t.len() as u64;
    }
    let header = Header {
        metadata: metadata.clone(),
        groups: params.groups().iter().map(|g| GroupEntry { name: g.name.clone(), frozen: g.frozen }).collect(),
        tensors,
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + header.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for id in params.ids() {
        for v in params.get(id).data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn bad(msg: impl Into<String>) -> NnError {
    NnError::Checkpoint(msg.into())
}

fn parse_header(bytes: &[u8]) -> Result<(Header, &[u8])> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("missing DOMUSFM1 magic"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = &bytes[16..];
    if body.len() < len {
        return Err(bad("truncated header"));
    }
    let header: Header =
        serde_json::from_slice(&body[..len]).map_err(|e| bad(format!("malformed header: {e}")))?;
    let payload = &body[len..];
    let mut expected = 0u64;
    for t in &header.tensors {
        if t.dtype != "f32" {
            return Err(bad(format!("tensor {} has unsupported dtype {}", t.name, t.dtype)));
        }
        if t.offset != expected {
            return Err(bad(format!("tensor {} at offset {} (expected {expected})", t.name, t.offset)));
        }
        expected += 4 * t.shape.iter().product::<usize>() as u64;
    }
    if payload.len() as u64 != expected {
        return Err(bad(format!("payload has {} bytes, header describes {expected}", payload.len())));
    }
    Ok((header, payload))
}

fn read_tensor(payload: &[u8], entry: &TensorEntry) -> Result<Tensor<f32>> {
    let n: usize = entry.shape.iter().product();
    let start = entry.offset as usize;
    let data = payload[start..start + 4 * n]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Tensor::new(entry.shape.clone(), data).map_err(|e| bad(format!("tensor {}: {e}", entry.name)))
}

/// Header only, validated against the payload length.
pub fn read_header(bytes: &[u8]) -> Result<Header> {
    parse_header(bytes).map(|(h, _)| h)
}

/// Reads a checkpoint into a fresh store.
pub fn load(bytes: &[u8]) -> Result<Checkpoint> {
    let (header, payload) = parse_header(bytes)?;
    let mut params = ParamStore::new();
    for g in &header.groups {
        params.add_group(&g.name).map_err(|e| bad(e.to_string()))?;
    }
    for t in &header.tensors {
        let (group, name) = t.name.split_once('.').ok_or_else(|| bad(format!("tensor name {} lacks a group", t.name)))?;
        let gi = params.group_index(group).ok_or_else(|| bad(format!("tensor {} names unknown group", t.name)))?;
        params.add(gi, name, read_tensor(payload, t)?).map_err(|e| bad(e.to_string()))?;
    }
    for g in &header.groups {
        params.set_frozen(&g.name, g.frozen).map_err(|e| bad(e.to_string()))?;
    }
    Ok(Checkpoint { metadata: header.metadata, params })
}

/// Loads tensors into an existing store whose layout must already match.
///
/// Every name, dtype and shape is validated before any value is written.
/// Tensors of groups absent from `store` are skipped only when `allow_extra`.
pub fn load_into(store: &mut ParamStore<f32>, bytes: &[u8], allow_extra: bool) -> Result<BTreeMap<String, String>> {
    let (header, payload) = parse_header(bytes)?;
    let mut plan = Vec::new();
    for t in &header.tensors {
        match store.find(&t.name) {
            Some(id) => {
                let have = store.get(id).shape();
                if have != t.shape.as_slice() {
                    return Err(bad(format!(
                        "tensor {} has shape {:?} in checkpoint but {:?} in model",
                        t.name, t.shape, have
                    )));
                }
                plan.push((id, t));
            }
            None if allow_extra => {}
            None => return Err(bad(format!("tensor {} does not exist in model", t.name))),
        }
    }
    for id in store.ids().collect::<Vec<_>>() {
        let name = store.full_name(id);
        if !header.tensors.iter().any(|t| t.name == name) {
            return Err(bad(format!("model tensor {name} missing from checkpoint")));
        }
    }
    for (id, t) in plan {
        *store.get_mut(id) = read_tensor(payload, t)?;
    }
    for g in &header.groups {
        if store.group_index(&g.name).is_some() {
            store.set_frozen(&g.name, g.frozen)?;
        }
    }
    Ok(header.metadata)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        let a = s.add_group("enc").unwrap();
        s.add(a, "w", Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.5, 0.0, 1e-7, -0.0]).unwrap()).unwrap();
        let b = s.add_group("ctx").unwrap();
        s.add(b, "b", Tensor::new(vec![1, 2], vec![9.0, 8.0]).unwrap()).unwrap();
        s.set_frozen("enc", true).unwrap();
        s
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let mut meta = BTreeMap::new();
        meta.insert("datasets".into(), "a,b".into());
        let bytes = save(&store(), &meta);
        assert_eq!(&bytes[..8], MAGIC);
        let ck = load(&bytes).unwrap();
        assert_eq!(ck.params, store());
        assert_eq!(ck.metadata, meta);
        assert_eq!(save(&ck.params, &ck.metadata), bytes);
    }

    #[test]
    fn header_lists_every_tensor() {
        let bytes = save(&store(), &BTreeMap::new());
        let (h, _) = parse_header(&bytes).unwrap();
        let names: Vec<_> = h.tensors.iter().map(|t| (t.name.as_str(), t.shape.clone())).collect();
        assert_eq!(names, vec![("enc.w", vec![2, 3]), ("ctx.b", vec![1, 2])]);
    }

    #[test]
    fn shape_mismatch_rejected_before_writing() {
        let bytes = save(&store(), &BTreeMap::new());
        let mut other = ParamStore::new();
        let a = other.add_group("enc").unwrap();
        other.add(a, "w", Tensor::zeros(&[2, 3])).unwrap();
        let b = other.add_group("ctx").unwrap();
        other.add(b, "b", Tensor::zeros(&[1, 3])).unwrap();
        let before = other.clone();
        let err = load_into(&mut other, &bytes, false).unwrap_err().to_string();
        assert!(err.contains("ctx.b"), "{err}");
        assert_eq!(other, before);
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let bytes = save(&store(), &BTreeMap::new());
        assert!(load(&bytes[..bytes.len() - 1]).is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(load(&wrong).is_err());
    }
}
