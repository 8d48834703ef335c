//! Artifact files. Every file starts with a meta record naming the tool
//! version, the hash of the config that produced it and the seed.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const TOOL: &str = "bias-tracer";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Meta {
    pub tool: String,
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
    /// What the file holds, e.g. `attribution` or `erasure`.
    pub kind: String,
}

impl Meta {
    pub fn new(kind: &str, config_hash: &str, seed: u64) -> Self {
        Meta {
            tool: TOOL.into(),
            version: VERSION.into(),
            config_hash: config_hash.into(),
            seed,
            kind: kind.into(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct MetaLine {
    meta: Meta,
}

#[derive(Serialize, Deserialize)]
struct Wrapped<T> {
    meta: Meta,
    data: T,
}

fn create(path: &Path) -> Result<fs::File> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::File::create(path).map_err(|e| Error::io(path, e))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path).map_err(|e| Error::io(path, e))?))
}

/// Hash of a value's JSON form.
pub fn hash_json<T: Serialize>(value: &T) -> String {
    sha256_hex(serde_json::to_string(value).expect("serializable").as_bytes())
}

/// Meta line, then one JSON object per record.
pub fn write_jsonl<T: Serialize>(path: &Path, meta: &Meta, records: &[T]) -> Result<()> {
    let mut w = std::io::BufWriter::new(create(path)?);
    let mut line = |s: String| writeln!(w, "{s}").map_err(|e| Error::io(path, e));
    line(serde_json::to_string(&MetaLine { meta: meta.clone() })?)?;
    for r in records {
        line(serde_json::to_string(r)?)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Records of a JSONL file, with its meta line when there is one. Blank
/// lines are skipped.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<(Option<Meta>, Vec<T>)> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut meta = None;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        if i == 0 {
            if let Ok(m) = serde_json::from_str::<MetaLine>(&line) {
                meta = Some(m.meta);
                continue;
            }
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
            path: path.display().to_string(),
            line: i + 1,
            field: "record".into(),
            reason: e.to_string(),
        })?);
    }
    Ok((meta, out))
}

/// `{"meta": ..., "data": ...}`, pretty-printed.
pub fn write_json<T: Serialize>(path: &Path, meta: &Meta, data: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(&Wrapped {
        meta: meta.clone(),
        data,
    })?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<(Meta, T)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let w: Wrapped<T> = serde_json::from_str(&text)?;
    Ok((w.meta, w.data))
}

/// The meta record as a `#` comment line, then the CSV body.
pub fn write_csv(path: &Path, meta: &Meta, body: &str) -> Result<()> {
    let mut f = create(path)?;
    write!(f, "# {}\n{body}", serde_json::to_string(meta)?).map_err(|e| Error::io(path, e))
}

/// Plain text file, created with its parent directory.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    create(path)?.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}
