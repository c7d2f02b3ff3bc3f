//! `SMC1` checkpoint container.
//!
//! Layout: the magic `SMC1`, a little-endian `u64` header length, the JSON header,
//! then the parameter blobs as little-endian `f64`. Header offsets count bytes
//! from the start of the blob section.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::Model;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::nn::ParamStore;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SMC1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub config: RunConfig,
    pub classes: Vec<String>,
    pub params: Vec<ParamEntry>,
}

fn stores(model: &Model) -> [&ParamStore; 2] {
    [&model.query, &model.head]
}

/// Serializes the query encoder, projection and classifier. The key encoder is
/// training state only and is not stored.
pub fn encode_checkpoint(model: &Model) -> Vec<u8> {
    let mut params = Vec::new();
    let mut blob = Vec::new();
    for store in stores(model) {
        for (name, t) in store.iter() {
            params.push(ParamEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                offset: blob.len() as u64,
            });
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let header = CheckpointHeader {
        config: model.config.clone(),
        classes: model.classes.clone(),
        params,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(12 + json.len() + blob.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blob);
    out
}

fn format_err(origin: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Format(format!("{}: {msg}", origin.display()))
}

/// Parses a checkpoint and rebuilds the model it describes.
pub fn decode_checkpoint(bytes: &[u8], origin: &Path) -> Result<Model> {
    if bytes.len() < 12 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(format_err(origin, "not an SMC1 checkpoint"));
    }
    let hlen = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes")) as usize;
    let blob_start = 12usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| {
            format_err(
                origin,
                format!("header length {hlen} exceeds file size {}", bytes.len()),
            )
        })?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[12..blob_start])
        .map_err(|e| format_err(origin, format!("header: {e}")))?;
    let blob = &bytes[blob_start..];

    let mut spans: Vec<(u64, u64, &str)> = Vec::with_capacity(header.params.len());
    for p in &header.params {
        let len = p.shape.iter().product::<usize>() as u64 * 8;
        let end = p
            .offset
            .checked_add(len)
            .filter(|&e| e <= blob.len() as u64)
            .ok_or_else(|| {
                format_err(
                    origin,
                    format!("parameter {} lies outside the file", p.name),
                )
            })?;
        spans.push((p.offset, end, &p.name));
    }
    spans.sort();
    for w in spans.windows(2) {
        if w[1].0 < w[0].1 {
            return Err(format_err(
                origin,
                format!("parameters {} and {} overlap", w[0].2, w[1].2),
            ));
        }
    }

    let mut model = Model::new(&header.config, header.classes.clone())?;
    let mut seen = 0;
    for store in [&mut model.query, &mut model.head] {
        for i in 0..store.len() {
            let name = store.names()[i].clone();
            let entry = header
                .params
                .iter()
                .find(|p| p.name == name)
                .ok_or_else(|| format_err(origin, format!("missing parameter {name}")))?;
            let t = &mut store.tensors_mut()[i];
            if entry.shape != t.shape() {
                return Err(format_err(
                    origin,
                    format!(
                        "parameter {name} has shape {:?}, model expects {:?}",
                        entry.shape,
                        t.shape()
                    ),
                ));
            }
            let off = entry.offset as usize;
            for (k, v) in t.data_mut().iter_mut().enumerate() {
                let b = &blob[off + 8 * k..off + 8 * k + 8];
                *v = f64::from_le_bytes(b.try_into().expect("8 bytes"));
            }
            seen += 1;
        }
    }
    if seen != header.params.len() {
        return Err(format_err(
            origin,
            format!(
                "checkpoint lists {} parameters, model has {seen}",
                header.params.len()
            ),
        ));
    }
    model.key.copy_values_from(&model.query)?;
    Ok(model)
}

pub fn write_checkpoint(path: &Path, model: &Model) -> Result<()> {
    fs::write(path, encode_checkpoint(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}
