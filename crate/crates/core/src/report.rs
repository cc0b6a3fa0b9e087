//! Versioned CSV tables and JSON summaries.
//!
//! Every CSV starts with one comment line
//!
//! ```text
//! # lsq-report/1 kind=<kind> key=value ...
//! ```
//!
//! followed by a header row and the data rows. Floats use Rust's shortest
//! round-trip formatting, so re-emitting identical records yields identical
//! bytes. Missing values are empty fields.

use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::fsio;

pub const REPORT_VERSION: &str = "lsq-report/1";

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub kind: String,
    pub meta: Vec<(String, String)>,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(kind: &str, columns: &[&str]) -> Self {
        Table {
            kind: kind.to_string(),
            meta: Vec::new(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.meta.push((key.to_string(), value.to_string()));
        self
    }

    pub fn push(&mut self, row: Vec<String>) -> Result<()> {
        if row.len() != self.columns.len() {
            return Err(Error::Data(format!(
                "row has {} fields, table '{}' has {} columns",
                row.len(),
                self.kind,
                self.columns.len()
            )));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("# {REPORT_VERSION} kind={}", self.kind);
        for (k, v) in &self.meta {
            out.push_str(&format!(" {k}={v}"));
        }
        out.push('\n');
        out.push_str(&self.columns.join(","));
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    /// Write atomically; an empty table is an error and leaves no file.
    pub fn write(&self, path: &Path) -> Result<()> {
        if self.rows.is_empty() {
            return Err(Error::Data(format!("refusing to write empty '{}' report", self.kind)));
        }
        fsio::write_atomic(path, self.to_csv().as_bytes())
    }
}

pub fn fmt_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v:?}")
    } else {
        String::new()
    }
}

pub fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, fmt_f64)
}

/// Pretty JSON with a trailing newline, written atomically.
pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fsio::write_atomic(path, &bytes)
}
