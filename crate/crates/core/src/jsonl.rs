//! Line-delimited JSON files with an optional leading header record.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const HEADER_KEY: &str = "_header";

/// Provenance record written as the first line of every emitted file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct Header {
    pub tool: String,
    pub version: String,
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Input file name -> hex sha256 digest.
    #[serde(default)]
    pub inputs: BTreeMap<String, String>,
}

impl Header {
    pub fn new(kind: &str, seed: Option<u64>) -> Self {
        Header {
            tool: "halloc".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            kind: kind.into(),
            seed,
            inputs: BTreeMap::new(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    #[serde(rename = "_header")]
    header: Header,
}

#[derive(Debug, Error)]
pub enum JsonlError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Schema { line: usize, message: String },
}

fn is_header_line(line: &str) -> bool {
    line.trim_start()
        .strip_prefix('{')
        .is_some_and(|rest| rest.trim_start().starts_with("\"_header\""))
}

/// Parses records, skipping blank lines. Line numbers in errors are 1-based.
pub fn parse<T: DeserializeOwned>(text: &str) -> Result<(Option<Header>, Vec<T>), JsonlError> {
    parse_checked(text, |_: &T| Ok(()))
}

/// Like [`parse`], additionally running `check` on every record.
pub fn parse_checked<T, F>(text: &str, check: F) -> Result<(Option<Header>, Vec<T>), JsonlError>
where
    T: DeserializeOwned,
    F: Fn(&T) -> Result<(), String>,
{
    let mut header = None;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        if is_header_line(line) {
            let h: HeaderLine = serde_json::from_str(line).map_err(|e| JsonlError::Schema {
                line: i + 1,
                message: e.to_string(),
            })?;
            header = Some(h.header);
            continue;
        }
        let rec: T = serde_json::from_str(line).map_err(|e| JsonlError::Schema {
            line: i + 1,
            message: e.to_string(),
        })?;
        check(&rec).map_err(|message| JsonlError::Schema { line: i + 1, message })?;
        out.push(rec);
    }
    Ok((header, out))
}

pub fn render<T: Serialize>(header: Option<&Header>, records: &[T]) -> String {
    let mut out = String::new();
    if let Some(h) = header {
        out.push_str(&serde_json::to_string(&HeaderLine { header: h.clone() }).expect("header"));
        out.push('\n');
    }
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn read<T: DeserializeOwned>(path: &Path) -> Result<(Option<Header>, Vec<T>), JsonlError> {
    let text = fs::read_to_string(path).map_err(|source| JsonlError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse(&text)
}

pub fn write<T: Serialize>(
    path: &Path,
    header: Option<&Header>,
    records: &[T],
) -> Result<(), JsonlError> {
    fs::write(path, render(header, records)).map_err(|source| JsonlError::Io {
        path: path.to_path_buf(),
        source,
    })
}
