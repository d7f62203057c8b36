//! `.dsw` weight files.
//!
//! Layout: the magic `DSW1`, a little-endian `u32` header length, the TOML
//! header (padded with newlines so the blob section starts on an 8-byte
//! boundary), then the tensor blobs as little-endian `f32`. Each tensor
//! entry gives its offset relative to the start of the blob section; every
//! offset is a multiple of 8 and gaps are zero-filled.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::ModelConfig;
use super::model::Model;
use crate::error::{Error, Result};
use crate::tensor::{ImageShape, Tensor};

pub const DSW_MAGIC: &[u8; 4] = b"DSW1";
const FORMAT: &str = "dsw1";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    layers: String,
    input: [usize; 3],
    classes: usize,
    tensors: Vec<Entry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    length: usize,
}

fn align8(v: usize) -> usize {
    v.div_ceil(8) * 8
}

pub fn model_to_bytes(model: &Model) -> Result<Vec<u8>> {
    let cfg = model.config();
    let mut entries = Vec::new();
    let mut offset = 0;
    for (name, t) in model.parameters() {
        let length = t.len() * 4;
        entries.push(Entry { name, shape: t.shape().to_vec(), offset, length });
        offset = align8(offset + length);
    }
    let header = Header {
        format: FORMAT.into(),
        layers: cfg.layer_string(),
        input: [cfg.input.channels, cfg.input.height, cfg.input.width],
        classes: model.classes(),
        tensors: entries,
    };
    let mut text = toml::to_string(&header).map_err(|e| Error::MalformedHeader(e.to_string()))?;
    while (8 + text.len()) % 8 != 0 {
        text.push('\n');
    }
    let mut out = Vec::with_capacity(8 + text.len() + offset);
    out.extend_from_slice(DSW_MAGIC);
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    let base = out.len();
    for ((_, t), e) in model.parameters().iter().zip(&header.tensors) {
        out.resize(base + e.offset, 0);
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.resize(base + offset, 0);
    Ok(out)
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<Model> {
    let magic = bytes.get(..4).ok_or_else(|| Error::Truncated("weight file magic".into()))?;
    if magic != DSW_MAGIC {
        return Err(Error::BadMagic {
            expected: "DSW1".into(),
            found: String::from_utf8_lossy(magic).into_owned(),
        });
    }
    let len_bytes = bytes.get(4..8).ok_or_else(|| Error::Truncated("weight file header length".into()))?;
    let header_len = u32::from_le_bytes([len_bytes[0], len_bytes[1], len_bytes[2], len_bytes[3]]) as usize;
    let text = bytes
        .get(8..8 + header_len)
        .ok_or_else(|| Error::Truncated("weight file header".into()))?;
    let text = std::str::from_utf8(text).map_err(|e| Error::MalformedHeader(e.to_string()))?;
    let header: Header = toml::from_str(text).map_err(|e| Error::MalformedHeader(e.to_string()))?;
    if header.format != FORMAT {
        return Err(Error::MalformedHeader(format!("unsupported format `{}`", header.format)));
    }
    let base = 8 + header_len;
    if !base.is_multiple_of(8) {
        return Err(Error::MalformedHeader("blob section is not 8-byte aligned".into()));
    }
    let [c, h, w] = header.input;
    let cfg = ModelConfig::parse(&header.layers, ImageShape::new(c, h, w))
        .map_err(|e| Error::HeaderMismatch(e.to_string()))?;
    if cfg.classes() != header.classes {
        return Err(Error::HeaderMismatch(format!(
            "header lists {} classes but the layer stack ends in {}",
            header.classes,
            cfg.classes()
        )));
    }
    let mut model = Model::build(&cfg, 0)?;
    let expected: Vec<String> = model.parameters().into_iter().map(|(n, _)| n).collect();
    let listed: Vec<&str> = header.tensors.iter().map(|e| e.name.as_str()).collect();
    if expected.iter().map(String::as_str).collect::<Vec<_>>() != listed {
        return Err(Error::HeaderMismatch(format!(
            "tensor list {listed:?} does not match the model's {expected:?}"
        )));
    }
    for e in &header.tensors {
        if e.offset % 8 != 0 {
            return Err(Error::MalformedHeader(format!("tensor `{}` offset is not 8-byte aligned", e.name)));
        }
        let count: usize = e.shape.iter().product();
        if e.length != count * 4 {
            return Err(Error::HeaderMismatch(format!(
                "tensor `{}` length {} does not match shape {:?}",
                e.name, e.length, e.shape
            )));
        }
        let blob = bytes
            .get(base + e.offset..base + e.offset + e.length)
            .ok_or_else(|| Error::Truncated(format!("blob for tensor `{}`", e.name)))?;
        let data = blob
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        model.set_parameter(&e.name, Tensor::new(e.shape.clone(), data)?)?;
    }
    Ok(model)
}

pub fn save_weights(model: &Model, path: &Path) -> Result<()> {
    fs::write(path, model_to_bytes(model)?)?;
    Ok(())
}

pub fn load_weights(path: &Path) -> Result<Model> {
    model_from_bytes(&fs::read(path)?)
}

/// SHA-256 of the serialized weights, hex encoded.
pub fn model_id(model: &Model) -> Result<String> {
    Ok(hex::encode(Sha256::digest(model_to_bytes(model)?)))
}
