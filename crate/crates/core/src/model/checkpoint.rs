//! Binary checkpoint format (version 1), little-endian throughout:
//!
//! ```text
//! magic      8 bytes   "BTCKPT\0\0"
//! version    u32       1
//! header_len u32       byte length of the JSON header
//! header     JSON      {"config": {...}, "vocab": [...], "tensors": [[name, len], ...]}
//! tensors    f64 * N   every tensor in header order, row-major
//! digest     32 bytes  SHA-256 of all preceding bytes
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Encoder, ModelConfig, Params, Vocab};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"BTCKPT\0\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    vocab: Vocab,
    tensors: Vec<(String, usize)>,
}

fn tensor_names(config: &ModelConfig) -> Vec<String> {
    let mut names: Vec<String> = ["tok_emb", "pos_emb", "ln_emb.gamma", "ln_emb.beta"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for l in 0..config.n_layers {
        for part in [
            "query.w", "query.b", "key.w", "key.b", "value.w", "value.b", "attn_out.w", "attn_out.b",
            "ln_attn.gamma", "ln_attn.beta", "ff_in.w", "ff_in.b", "ff_out.w", "ff_out.b", "ln_ffn.gamma",
            "ln_ffn.beta",
        ] {
            names.push(format!("blocks.{l}.{part}"));
        }
    }
    names.push("head.w".into());
    names.push("head.b".into());
    names
}

pub fn to_bytes(encoder: &Encoder, vocab: &Vocab) -> Result<Vec<u8>> {
    if vocab.len() != encoder.config.vocab_size {
        return Err(Error::BadCheckpoint(format!(
            "vocabulary size {} does not match config {}",
            vocab.len(),
            encoder.config.vocab_size
        )));
    }
    let tensors = encoder.params.tensors();
    let header = Header {
        config: encoder.config,
        vocab: vocab.clone(),
        tensors: tensor_names(&encoder.config)
            .into_iter()
            .zip(tensors.iter().map(|t| t.len()))
            .collect(),
    };
    let header = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(48 + header.len() + 8 * encoder.params.n_params());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header);
    for t in tensors {
        for v in t {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    Ok(buf)
}

pub fn from_bytes(bytes: &[u8]) -> Result<(Encoder, Vocab)> {
    let bad = |m: &str| Error::BadCheckpoint(m.to_string());
    if bytes.len() < 16 + 32 || &bytes[..8] != MAGIC {
        return Err(bad("missing magic"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(bad("digest mismatch"));
    }
    let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::BadCheckpoint(format!("unsupported version {version}")));
    }
    let hlen = u32::from_le_bytes(body[12..16].try_into().expect("4 bytes")) as usize;
    if body.len() < 16 + hlen {
        return Err(bad("truncated header"));
    }
    let header: Header = serde_json::from_slice(&body[16..16 + hlen])?;
    let mut params = Params::zeros_like(&header.config);
    let mut data = body[16 + hlen..].chunks_exact(8);
    {
        let tensors = params.tensors_mut();
        if tensors.len() != header.tensors.len() {
            return Err(bad("tensor count does not match config"));
        }
        for (t, (name, len)) in tensors.into_iter().zip(&header.tensors) {
            if t.len() != *len {
                return Err(Error::BadCheckpoint(format!("tensor {name} has wrong length")));
            }
            for v in t.iter_mut() {
                let chunk = data.next().ok_or_else(|| bad("truncated tensor data"))?;
                *v = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
            }
        }
    }
    if data.next().is_some() || !data.remainder().is_empty() {
        return Err(bad("trailing tensor data"));
    }
    if header.vocab.len() != header.config.vocab_size {
        return Err(bad("vocabulary size does not match config"));
    }
    Ok((Encoder::from_params(header.config, params)?, header.vocab))
}

pub fn save(path: &Path, encoder: &Encoder, vocab: &Vocab) -> Result<()> {
    fs::write(path, to_bytes(encoder, vocab)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(Encoder, Vocab)> {
    from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
