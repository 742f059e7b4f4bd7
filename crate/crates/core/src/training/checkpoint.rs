//! Checkpoint files: a magic line, one JSON header line, then every
//! parameter as little-endian f64 in manifest order.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::Vocab;
use crate::error::{Error, Result};
use crate::objectives::Mode;

use super::config::TrainConfig;
use super::model::Model;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "UNTL-CHECKPOINT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    mode: Mode,
    seed: u64,
    config: TrainConfig,
    manifest: Vec<ManifestEntry>,
    vocab: Vec<String>,
    prompt_key: Option<String>,
    best_score: f64,
    best_step: usize,
    sha256: String,
}

/// A trained model together with the dev score that selected it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub best_score: f64,
    pub best_step: usize,
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl Checkpoint {
    pub fn manifest(&self) -> Vec<ManifestEntry> {
        self.model
            .tensors()
            .into_iter()
            .map(|(name, t)| ManifestEntry {
                name,
                rows: t.rows(),
                cols: t.cols(),
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::with_capacity(self.model.param_count() * 8);
        for (_, t) in self.model.tensors() {
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let header = Header {
            version: FORMAT_VERSION,
            mode: self.model.mode(),
            seed: self.model.config.seed,
            config: self.model.config.clone(),
            manifest: self.manifest(),
            vocab: self.model.vocab.content_tokens().to_vec(),
            prompt_key: self.model.prompt.as_ref().map(|k| k.text().to_string()),
            best_score: self.best_score,
            best_step: self.best_step,
            sha256: hex_digest(&payload),
        };
        let mut out = format!("{MAGIC} v{FORMAT_VERSION}\n").into_bytes();
        out.extend(serde_json::to_string(&header).expect("header serializes").into_bytes());
        out.push(b'\n');
        out.extend(payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        let (magic, rest) = split_line(bytes).ok_or_else(|| bad("missing format line".into()))?;
        let magic = std::str::from_utf8(magic).map_err(|_| bad("not a checkpoint file".into()))?;
        let version = magic
            .strip_prefix(MAGIC)
            .and_then(|v| v.strip_prefix(" v"))
            .ok_or_else(|| bad("not a checkpoint file".into()))?;
        if version != FORMAT_VERSION.to_string() {
            return Err(bad(format!(
                "unsupported format version {version}, expected {FORMAT_VERSION}"
            )));
        }
        let (header, payload) = split_line(rest).ok_or_else(|| bad("missing header".into()))?;
        let header: Header =
            serde_json::from_slice(header).map_err(|e| bad(format!("malformed header: {e}")))?;
        if header.version != FORMAT_VERSION {
            return Err(bad(format!("header version {} does not match", header.version)));
        }
        let expected: usize = header.manifest.iter().map(|m| m.rows * m.cols).sum();
        if payload.len() != expected * 8 {
            return Err(bad(format!(
                "parameter block is {} bytes, manifest needs {}",
                payload.len(),
                expected * 8
            )));
        }
        if hex_digest(payload) != header.sha256 {
            return Err(bad("parameter digest mismatch".into()));
        }
        if header.mode != header.config.mode || header.prompt_key != header.config.prompt_key {
            return Err(bad("header fields disagree with the config".into()));
        }

        let vocab = Vocab::from_tokens(&header.vocab)?;
        let mut model = Model::new(&header.config, &vocab)?;
        if model.vocab != vocab {
            return Err(bad("vocabulary lacks the prompt key tokens".into()));
        }
        let mut tensors = model.tensors_mut();
        if tensors.len() != header.manifest.len() {
            return Err(bad(format!(
                "manifest lists {} tensors, {} mode needs {}",
                header.manifest.len(),
                header.mode,
                tensors.len()
            )));
        }
        let mut offset = 0;
        for ((name, t), entry) in tensors.iter_mut().zip(&header.manifest) {
            if *name != entry.name || t.rows() != entry.rows || t.cols() != entry.cols {
                return Err(bad(format!(
                    "manifest entry {} {}x{} does not match {name} {}x{}",
                    entry.name,
                    entry.rows,
                    entry.cols,
                    t.rows(),
                    t.cols()
                )));
            }
            for v in t.data_mut() {
                let raw: [u8; 8] = payload[offset..offset + 8].try_into().expect("8 bytes");
                *v = f64::from_le_bytes(raw);
                offset += 8;
            }
        }
        Ok(Checkpoint {
            model,
            best_score: header.best_score,
            best_step: header.best_step,
        })
    }

    /// Writes through a temporary file in the same directory, so a failed
    /// save never leaves a partial checkpoint at `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

fn split_line(bytes: &[u8]) -> Option<(&[u8], &[u8])> {
    let i = bytes.iter().position(|&b| b == b'\n')?;
    Some((&bytes[..i], &bytes[i + 1..]))
}

/// Temp file plus rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(tmp.path(), e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(tmp.path(), e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}
