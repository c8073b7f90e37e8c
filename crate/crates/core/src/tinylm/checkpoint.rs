use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ToyTransformer, Transformer};
use crate::error::{Error, Result};
use crate::hash::{fnv1a, hex64, parse_hex64};
use crate::io::{read_bytes, write_atomic};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset in bytes from the start of the body.
    byte_offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    tensors: Vec<ManifestEntry>,
    param_hash: String,
}

/// Serialise to the single-line JSON header + little-endian f32 body format.
pub fn checkpoint_bytes(model: &ToyTransformer) -> Result<Vec<u8>> {
    let body: Vec<u8> = model.params().iter().flat_map(|p| p.to_le_bytes()).collect();
    let header = Header {
        format_version: CHECKPOINT_FORMAT_VERSION,
        config: model.config().clone(),
        tensors: model
            .layout()
            .tensors
            .iter()
            .map(|t| ManifestEntry {
                name: t.name.clone(),
                shape: t.shape.clone(),
                byte_offset: t.offset * 4,
            })
            .collect(),
        param_hash: hex64(fnv1a(&body)),
    };
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');
    out.extend_from_slice(&body);
    Ok(out)
}

pub fn save_checkpoint(model: &ToyTransformer, path: &Path) -> Result<()> {
    write_atomic(path, &checkpoint_bytes(model)?)
}

pub fn load_checkpoint(path: &Path) -> Result<ToyTransformer> {
    let bytes = read_bytes(path)?;
    parse_checkpoint(&bytes)
        .map_err(|e| Error::input(format!("checkpoint {}: {e}", path.display())))
}

pub(crate) fn parse_checkpoint(bytes: &[u8]) -> Result<ToyTransformer> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::input("missing header line"))?;
    let header: Header = serde_json::from_slice(&bytes[..nl])?;
    if header.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::input(format!(
            "unsupported format_version {}",
            header.format_version
        )));
    }
    let body = &bytes[nl + 1..];
    let expected = parse_hex64(&header.param_hash)
        .ok_or_else(|| Error::input("param_hash is not 16 hex digits"))?;
    if fnv1a(body) != expected {
        return Err(Error::input("param_hash does not match body"));
    }
    if !body.len().is_multiple_of(4) {
        return Err(Error::input("body length is not a multiple of 4"));
    }
    let params: Vec<f32> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let model = Transformer::from_params(header.config, params)?;
    for (entry, spec) in header.tensors.iter().zip(&model.layout().tensors) {
        if entry.name != spec.name || entry.shape != spec.shape || entry.byte_offset != spec.offset * 4 {
            return Err(Error::input(format!(
                "manifest entry `{}` disagrees with config layout",
                entry.name
            )));
        }
    }
    if header.tensors.len() != model.layout().tensors.len() {
        return Err(Error::input("manifest tensor count disagrees with config"));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ToyTransformer {
        ToyTransformer::new(ModelConfig {
            vocab_size: 16,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 16,
            max_seq_len: 8,
            seed: 1,
        })
        .unwrap()
    }

    #[test]
    fn roundtrip_preserves_params_and_hash() {
        let m = small();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save_checkpoint(&m, &p).unwrap();
        let back = load_checkpoint(&p).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.param_hash(), m.param_hash());
    }

    #[test]
    fn header_hash_is_model_hash() {
        let m = small();
        let bytes = checkpoint_bytes(&m).unwrap();
        let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
        let h: Header = serde_json::from_slice(&bytes[..nl]).unwrap();
        assert_eq!(h.param_hash, hex64(m.param_hash()));
        assert_eq!(h.tensors[1].byte_offset, 16 * 8 * 4);
    }

    #[test]
    fn corrupted_body_rejected() {
        let mut bytes = checkpoint_bytes(&small()).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x40;
        assert!(parse_checkpoint(&bytes).is_err());
    }
}
