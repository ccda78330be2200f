//! JSON-lines persistence with a lineage header.
//!
//! Every corpus artifact starts with one header line recording the generator
//! version, the seed, the producing config's hash, and a kind tag. Readers
//! refuse files whose kind or config hash disagrees with what the caller
//! expects; silent reuse across configs is a bug, not a convenience.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const GENERATOR_VERSION: &str = "headatlas-corpus/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JsonlHeader {
    pub generator_version: String,
    pub seed: u64,
    pub config_hash: String,
    pub kind: String,
}

pub fn write_jsonl<T: Serialize>(path: &Path, header: &JsonlHeader, items: &[T]) -> Result<()> {
    let mut out = Vec::new();
    serde_json::to_writer(&mut out, header)?;
    out.push(b'\n');
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(
    path: &Path,
    expected_kind: &str,
    expected_hash: Option<&str>,
) -> Result<(JsonlHeader, Vec<T>)> {
    let file = fs::File::open(path)?;
    let mut lines = BufReader::new(file).lines();
    let header_line = lines
        .next()
        .ok_or_else(|| Error::Corpus(format!("{}: empty file", path.display())))??;
    let header: JsonlHeader = serde_json::from_str(&header_line)?;
    if header.kind != expected_kind {
        return Err(Error::Corpus(format!(
            "{}: kind {:?} where {:?} was expected",
            path.display(),
            header.kind,
            expected_kind
        )));
    }
    if let Some(expected) = expected_hash {
        if header.config_hash != expected {
            return Err(Error::LineageMismatch {
                path: path.display().to_string(),
                found: header.config_hash,
                expected: expected.to_string(),
            });
        }
    }
    let mut items = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        items.push(serde_json::from_str(&line)?);
    }
    Ok((header, items))
}
