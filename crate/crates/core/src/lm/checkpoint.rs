//! Checkpoint container.
//!
//! ```text
//! FGBCKPT\n
//! {"format_version":1,"config":{..},"layout":{..},"param_count":N,"checksum":"<sha256 hex>","step":S}\n
//! N little-endian f64 values
//! ```
//!
//! The checksum covers the payload bytes. Optimizer moments are not stored;
//! a loaded model starts with fresh moments and the recorded step count.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{LanguageModel, LmConfig};
use crate::error::{Error, Result};
use crate::tensor::{Layout, ParamVector};

pub const CHECKPOINT_MAGIC: &[u8] = b"FGBCKPT\n";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: LmConfig,
    layout: Layout,
    param_count: usize,
    checksum: String,
    step: u64,
}

fn payload(values: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 8);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn save_checkpoint(model: &LanguageModel, path: impl AsRef<Path>) -> Result<()> {
    let bytes = payload(model.params().values());
    let header = Header {
        format_version: CHECKPOINT_VERSION,
        config: model.config().clone(),
        layout: (**model.params().layout()).clone(),
        param_count: model.dim(),
        checksum: hex::encode(Sha256::digest(&bytes)),
        step: model.training_state.step,
    };
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(CHECKPOINT_MAGIC)?;
    serde_json::to_writer(&mut f, &header)?;
    f.write_all(b"\n")?;
    f.write_all(&bytes)?;
    f.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<LanguageModel> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut magic = vec![0u8; CHECKPOINT_MAGIC.len()];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Load("file too short for a checkpoint".into()))?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Load("not a checkpoint file (bad magic)".into()));
    }
    let mut line = String::new();
    r.read_line(&mut line)?;
    let header: Header =
        serde_json::from_str(line.trim_end()).map_err(|e| Error::Load(format!("bad checkpoint header: {e}")))?;
    if header.format_version != CHECKPOINT_VERSION {
        return Err(Error::Load(format!(
            "checkpoint format version {} (expected {CHECKPOINT_VERSION})",
            header.format_version
        )));
    }
    header.config.validate()?;
    header.layout.validate()?;
    if header.layout != header.config.layout() || header.param_count != header.layout.dim() {
        return Err(Error::Load("checkpoint layout does not match its config".into()));
    }
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != header.param_count * 8 {
        return Err(Error::Load(format!(
            "payload has {} bytes, expected {}",
            bytes.len(),
            header.param_count * 8
        )));
    }
    if hex::encode(Sha256::digest(&bytes)) != header.checksum {
        return Err(Error::Load("checksum mismatch".into()));
    }
    let values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let params = ParamVector::new(Arc::new(header.layout), values)?;
    let mut model = LanguageModel::from_parts(header.config, params);
    model.training_state.step = header.step;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::token_log_probs;

    fn model() -> LanguageModel {
        LanguageModel::init(LmConfig {
            vocab_size: 10,
            context_length: 8,
            embed_dim: 4,
            num_layers: 1,
            num_heads: 2,
            seed: 3,
        })
        .unwrap()
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
        let m = model();
        save_checkpoint(&m, &a).unwrap();
        let loaded = load_checkpoint(&a).unwrap();
        save_checkpoint(&loaded, &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        assert_eq!(loaded.config(), m.config());
        let x = [2, 3, 4, 5];
        let p = token_log_probs(&m, &x).unwrap();
        let q = token_log_probs(&loaded, &x).unwrap();
        assert_eq!(p.per_token, q.per_token);
    }

    #[test]
    fn tampered_payload_fails() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.ckpt");
        save_checkpoint(&model(), &a).unwrap();
        let mut bytes = std::fs::read(&a).unwrap();
        let last = bytes.len() - 3;
        bytes[last] ^= 0x40;
        std::fs::write(&a, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&a), Err(Error::Load(m)) if m.contains("checksum")));
    }

    #[test]
    fn tampered_checksum_fails() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.ckpt");
        save_checkpoint(&model(), &a).unwrap();
        let text = std::fs::read(&a).unwrap();
        let needle = b"\"checksum\":\"";
        let pos = text.windows(needle.len()).position(|w| w == needle).unwrap() + needle.len();
        let mut bytes = text.clone();
        bytes[pos] = if bytes[pos] == b'0' { b'1' } else { b'0' };
        std::fs::write(&a, &bytes).unwrap();
        assert!(load_checkpoint(&a).is_err());
    }

    #[test]
    fn version_mismatch_fails() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.ckpt");
        save_checkpoint(&model(), &a).unwrap();
        let text = std::fs::read(&a).unwrap();
        let needle = b"\"format_version\":1";
        let pos = text.windows(needle.len()).position(|w| w == needle).unwrap();
        let mut bytes = text.clone();
        bytes[pos + needle.len() - 1] = b'9';
        std::fs::write(&a, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&a), Err(Error::Load(m)) if m.contains("version")));
    }
}
