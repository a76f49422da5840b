//! On-disk formats: schema identifiers, the standard file header, config
//! digests, and JSONL helpers.
//!
//! Every artifact starts with a header carrying its schema version, the
//! master seed, and a digest of the resolved config that produced it, so
//! stages can refuse inputs from a different schema and runs can be audited
//! for config drift. Headers never contain wall-clock times: equal configs
//! must produce byte-identical files.

use std::io::{BufRead, Write};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CoreError, Result};

pub const TASK_SCHEMA: &str = "pad.task.v1";
pub const LABELS_SCHEMA: &str = "pad.labels.v1";
pub const AUDIT_SCHEMA: &str = "pad.audit.v1";
pub const REPORT_SCHEMA: &str = "pad.report.v1";
pub const PARAMS_SCHEMA: &str = "pad.mlp.v1";
pub const TRAIN_REPORT_SCHEMA: &str = "pad.train.v1";
pub const ROC_SCHEMA: &str = "pad.roc.v1";
pub const BENCH_SCHEMA: &str = "pad.bench.v1";

/// Leading record of every artifact.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileHeader {
    pub schema: String,
    pub seed: u64,
    /// Hex SHA-256 of the resolved config that produced the file.
    pub config_digest: String,
}

impl FileHeader {
    pub fn new(schema: &str, seed: u64, config_digest: impl Into<String>) -> Self {
        Self {
            schema: schema.into(),
            seed,
            config_digest: config_digest.into(),
        }
    }

    /// Renders the header for text (non-JSONL) formats:
    /// `<schema> seed=<n> digest=<hex>`.
    pub fn to_text_line(&self) -> String {
        format!("{} seed={} digest={}", self.schema, self.seed, self.config_digest)
    }

    pub fn parse_text_line(line: &str) -> Result<Self> {
        let mut parts = line.split_whitespace();
        let schema = parts
            .next()
            .ok_or_else(|| CoreError::MalformedFile("empty header line".into()))?;
        let mut seed = None;
        let mut digest = None;
        for p in parts {
            if let Some(v) = p.strip_prefix("seed=") {
                seed = Some(v.parse().map_err(|_| {
                    CoreError::MalformedFile(format!("bad seed in header: {v:?}"))
                })?);
            } else if let Some(v) = p.strip_prefix("digest=") {
                digest = Some(v.to_string());
            }
        }
        Ok(Self {
            schema: schema.to_string(),
            seed: seed.ok_or_else(|| CoreError::MalformedFile("header missing seed".into()))?,
            config_digest: digest
                .ok_or_else(|| CoreError::MalformedFile("header missing digest".into()))?,
        })
    }
}

/// Hex SHA-256 of arbitrary bytes; the config digest is this over the
/// canonical serialized config.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let out = hasher.finalize();
    let mut s = String::with_capacity(64);
    for b in out {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// Writes a JSONL file: header object first, then one object per item.
pub fn write_jsonl<W: Write, T: Serialize>(
    w: &mut W,
    header: &FileHeader,
    items: impl IntoIterator<Item = T>,
) -> Result<()> {
    serde_json::to_writer(&mut *w, header)?;
    writeln!(w)?;
    for item in items {
        serde_json::to_writer(&mut *w, &item)?;
        writeln!(w)?;
    }
    Ok(())
}

/// Reads a JSONL file written by [`write_jsonl`], checking the schema.
pub fn read_jsonl<R: BufRead, T: DeserializeOwned>(
    r: R,
    expected_schema: &str,
) -> Result<(FileHeader, Vec<T>)> {
    let mut lines = r.lines();
    let header_line = lines
        .next()
        .ok_or_else(|| CoreError::MalformedFile("empty JSONL file".into()))??;
    let header: FileHeader = serde_json::from_str(&header_line)?;
    if header.schema != expected_schema {
        return Err(CoreError::SchemaMismatch {
            expected: expected_schema.into(),
            found: header.schema,
        });
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
