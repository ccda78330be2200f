//! Checkpoint and tensor-bank files.
//!
//! ## Container layout (integers little-endian)
//!
//! ```text
//! magic "HATL" | u32 version | u32 meta_len | meta bytes (UTF-8 JSON)
//! then tensor records until end of file:
//! u32 name_len | name bytes | u32 rank | rank x u64 dims | f32 payload
//! ```
//!
//! Records are written in ascending name order and the writer buffers the
//! whole file before a single write, so saving identical state twice yields
//! byte-identical files. Checkpoints store the model config as meta; tensor
//! banks (e.g. saved steering vectors) reuse the container with their own
//! meta JSON.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::model::weights::{build_layout, Weights};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"HATL";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

fn encode_container(meta: &[u8], records: &[TensorRecord]) -> Result<Vec<u8>> {
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&a, &b| records[a].name.cmp(&records[b].name));
    for pair in order.windows(2) {
        if records[pair[0]].name == records[pair[1]].name {
            return Err(Error::Checkpoint(format!(
                "duplicate tensor name {}",
                records[pair[0]].name
            )));
        }
    }
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&u32::try_from(meta.len()).map_err(|_| {
        Error::Checkpoint("meta block exceeds u32 length".into())
    })?.to_le_bytes());
    out.extend_from_slice(meta);
    for &ri in &order {
        let rec = &records[ri];
        let expect: usize = rec.shape.iter().product();
        if expect != rec.data.len() {
            return Err(Error::Checkpoint(format!(
                "tensor {} has {} values but shape {:?}",
                rec.name,
                rec.data.len(),
                rec.shape
            )));
        }
        let name = rec.name.as_bytes();
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name);
        out.extend_from_slice(&(rec.shape.len() as u32).to_le_bytes());
        for &dim in &rec.shape {
            out.extend_from_slice(&(dim as u64).to_le_bytes());
        }
        for &v in &rec.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "truncated file: needed {n} bytes for {what} at offset {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

fn decode_container(bytes: &[u8]) -> Result<(String, Vec<TensorRecord>)> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {:?}, expected \"HATL\"",
            magic
        )));
    }
    let version = cur.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version}, this build reads {CHECKPOINT_VERSION}"
        )));
    }
    let meta_len = cur.u32("meta length")? as usize;
    let meta = std::str::from_utf8(cur.take(meta_len, "meta")?)
        .map_err(|_| Error::Checkpoint("meta block is not UTF-8".into()))?
        .to_string();
    let mut records = Vec::new();
    while !cur.done() {
        let name_len = cur.u32("tensor name length")? as usize;
        let name = std::str::from_utf8(cur.take(name_len, "tensor name")?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = cur.u32("tensor rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        let mut count = 1usize;
        for _ in 0..rank {
            let dim = cur.u64("tensor dim")?;
            let dim = usize::try_from(dim)
                .map_err(|_| Error::Checkpoint(format!("dim of {name} overflows usize")))?;
            count = count.checked_mul(dim).ok_or_else(|| {
                Error::Checkpoint(format!("element count of {name} overflows"))
            })?;
            shape.push(dim);
        }
        let raw = cur.take(count * 4, &format!("data of {name}"))?;
        let mut data = Vec::with_capacity(count);
        for chunk in raw.chunks_exact(4) {
            data.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
        }
        records.push(TensorRecord { name, shape, data });
    }
    Ok((meta, records))
}

pub fn save_checkpoint(path: &Path, weights: &Weights) -> Result<()> {
    let records: Vec<TensorRecord> = weights
        .layout()
        .iter()
        .map(|spec| TensorRecord {
            name: spec.name.clone(),
            shape: spec.shape.clone(),
            data: weights.flat()[spec.offset..spec.offset + spec.len()].to_vec(),
        })
        .collect();
    let meta = serde_json::to_vec(&weights.config)?;
    let bytes = encode_container(&meta, &records)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Weights> {
    let bytes = std::fs::read(path)?;
    let (meta, mut records) = decode_container(&bytes)?;
    let config: ModelConfig = serde_json::from_str(&meta)
        .map_err(|e| Error::Checkpoint(format!("bad config block: {e}")))?;
    config.validate()?;
    let layout = build_layout(&config);
    records.sort_by(|a, b| a.name.cmp(&b.name));
    if records.len() != layout.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} tensors, config needs {}",
            records.len(),
            layout.len()
        )));
    }
    let total: usize = layout.iter().map(|t| t.len()).sum();
    let mut data = vec![0.0f32; total];
    for spec in &layout {
        let rec = records
            .binary_search_by(|r| r.name.as_str().cmp(&spec.name))
            .map_err(|_| Error::Checkpoint(format!("missing tensor {}", spec.name)))?;
        let rec = &records[rec];
        if rec.shape != spec.shape {
            return Err(Error::Checkpoint(format!(
                "tensor {} has shape {:?}, config needs {:?}",
                spec.name, rec.shape, spec.shape
            )));
        }
        data[spec.offset..spec.offset + spec.len()].copy_from_slice(&rec.data);
    }
    Weights::from_parts(config, data)
}

/// Writes arbitrary named tensors (steering-vector banks and the like) with
/// caller-supplied meta JSON, using the checkpoint container format.
pub fn save_tensor_bank(path: &Path, meta_json: &str, records: &[TensorRecord]) -> Result<()> {
    serde_json::from_str::<serde_json::Value>(meta_json)
        .map_err(|e| Error::Checkpoint(format!("bank meta is not valid JSON: {e}")))?;
    let bytes = encode_container(meta_json.as_bytes(), records)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn load_tensor_bank(path: &Path) -> Result<(String, Vec<TensorRecord>)> {
    let bytes = std::fs::read(path)?;
    decode_container(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_weights() -> Weights {
        let c = ModelConfig {
            n_layers: 1,
            n_heads: 2,
            model_dim: 8,
            mlp_dim: 16,
            vocab_size: 10,
            max_seq_len: 8,
            norm_eps: 1e-5,
            seed: 42,
            use_rms_norm: true,
            use_mlp: true,
        };
        Weights::init(&c).unwrap()
    }

    #[test]
    fn checkpoint_roundtrip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let w = small_weights();
        save_checkpoint(&path, &w).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.config, w.config);
        assert_eq!(loaded.flat(), w.flat());
        // re-saving the loaded model reproduces the exact bytes
        let path2 = dir.path().join("m2.ckpt");
        save_checkpoint(&path2, &loaded).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn bad_magic_names_the_expected_one() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &small_weights()).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err().to_string();
        assert!(err.contains("HATL"), "{err}");
    }

    #[test]
    fn truncation_and_version_bumps_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &small_weights()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
        assert!(load_checkpoint(&path).is_err());
        let mut bumped = bytes.clone();
        bumped[4..8].copy_from_slice(&2u32.to_le_bytes());
        std::fs::write(&path, bumped).unwrap();
        let err = load_checkpoint(&path).unwrap_err().to_string();
        assert!(err.contains("version"), "{err}");
    }

    #[test]
    fn missing_tensor_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let w = small_weights();
        let mut records: Vec<TensorRecord> = w
            .layout()
            .iter()
            .map(|spec| TensorRecord {
                name: spec.name.clone(),
                shape: spec.shape.clone(),
                data: w.flat()[spec.offset..spec.offset + spec.len()].to_vec(),
            })
            .collect();
        records.retain(|r| r.name != "unembed.w");
        let meta = serde_json::to_vec(&w.config).unwrap();
        std::fs::write(&path, encode_container(&meta, &records).unwrap()).unwrap();
        let err = load_checkpoint(&path).unwrap_err().to_string();
        assert!(err.contains("unembed.w") || err.contains("tensors"), "{err}");
    }

    #[test]
    fn tensor_bank_roundtrips_and_rewrites_identically() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bank.hatl");
        let records = vec![
            TensorRecord {
                name: "fv.task.l1h2".into(),
                shape: vec![4],
                data: vec![0.1, -0.2, 0.3, 0.4],
            },
            TensorRecord {
                name: "fv.task.l0h3".into(),
                shape: vec![2, 2],
                data: vec![1.0, 2.0, 3.0, 4.0],
            },
        ];
        let meta = r#"{"kind":"fv-bank","alpha":2.0}"#;
        save_tensor_bank(&path, meta, &records).unwrap();
        let (meta_back, recs_back) = load_tensor_bank(&path).unwrap();
        assert_eq!(meta_back, meta);
        // reader returns name order; writer sorted
        assert_eq!(recs_back[0].name, "fv.task.l0h3");
        assert_eq!(recs_back[1], records[0]);
        let first = std::fs::read(&path).unwrap();
        save_tensor_bank(&path, meta, &records).unwrap();
        assert_eq!(first, std::fs::read(&path).unwrap());
    }

    #[test]
    fn shape_data_disagreement_is_rejected() {
        let rec = TensorRecord {
            name: "t".into(),
            shape: vec![3],
            data: vec![1.0, 2.0],
        };
        assert!(encode_container(b"{}", &[rec]).is_err());
    }
}
