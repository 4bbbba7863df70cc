//! JSONL persistence for grid-QA splits.
//!
//! The first line is a header comment carrying the schema version and the
//! task shape; every following line is one sample object.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

use super::{GridSample, GridTask};

pub const SCHEMA_VERSION: u32 = 1;

pub fn header(task: &GridTask) -> String {
    format!("# grid-qa schema_version={SCHEMA_VERSION} grid={} symbols={}", task.grid, task.symbols)
}

pub fn to_jsonl(task: &GridTask, samples: &[GridSample]) -> String {
    let mut out = header(task);
    out.push('\n');
    for s in samples {
        out.push_str(&serde_json::to_string(s).expect("sample serializes"));
        out.push('\n');
    }
    out
}

pub fn from_jsonl(text: &str) -> Result<(GridTask, Vec<GridSample>)> {
    let mut lines = text.lines();
    let head = lines.next().ok_or_else(|| Error::Format("empty dataset file: missing header".into()))?;
    let task = parse_header(head)?;
    let mut samples = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let s: GridSample = serde_json::from_str(line)
            .map_err(|e| Error::Format(format!("line {}: {e}", i + 2)))?;
        samples.push(s);
    }
    Ok((task, samples))
}

fn parse_header(line: &str) -> Result<GridTask> {
    let body = line
        .strip_prefix("# grid-qa ")
        .ok_or_else(|| Error::Format(format!("line 1: not a grid-qa header: {line:?}")))?;
    let mut version = None;
    let mut grid = None;
    let mut symbols = None;
    for kv in body.split_whitespace() {
        let (k, v) = kv.split_once('=').ok_or_else(|| Error::Format(format!("line 1: bad field {kv:?}")))?;
        let v: usize = v.parse().map_err(|_| Error::Format(format!("line 1: bad value in {kv:?}")))?;
        match k {
            "schema_version" => version = Some(v),
            "grid" => grid = Some(v),
            "symbols" => symbols = Some(v),
            _ => {}
        }
    }
    match version {
        Some(v) if v == SCHEMA_VERSION as usize => {}
        Some(v) => {
            return Err(Error::Format(format!(
                "dataset schema_version {v} is not supported (expected {SCHEMA_VERSION})"
            )))
        }
        None => return Err(Error::Format("line 1: header lacks schema_version".into())),
    }
    match (grid, symbols) {
        (Some(grid), Some(symbols)) => Ok(GridTask { grid, symbols }),
        _ => Err(Error::Format("line 1: header lacks grid/symbols".into())),
    }
}

/// Atomic write: temp file in the same directory, then rename.
pub fn write_split(path: &Path, task: &GridTask, samples: &[GridSample]) -> Result<()> {
    crate::fsutil::write_atomic(path, to_jsonl(task, samples).as_bytes())
}

pub fn read_split(path: &Path) -> Result<(GridTask, Vec<GridSample>)> {
    from_jsonl(&fs::read_to_string(path)?)
}
