//! Append-only metrics log: line-delimited `kind key=value ...` records.
//!
//! Every field except `wall_ms` is a deterministic function of (seed,
//! config, corpus); `strip_wall` removes the timing field so two runs can be
//! compared for bit-identical metrics.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::Result;

/// Collects records in memory and optionally mirrors them to a file.
pub struct MetricsLog {
    records: Vec<String>,
    sink: Option<BufWriter<File>>,
}

impl MetricsLog {
    pub fn in_memory() -> Self {
        MetricsLog { records: Vec::new(), sink: None }
    }

    pub fn with_file(path: &Path) -> Result<Self> {
        Ok(MetricsLog { records: Vec::new(), sink: Some(BufWriter::new(File::create(path)?)) })
    }

    pub fn record(&mut self, line: String) {
        if let Some(sink) = &mut self.sink {
            let _ = writeln!(sink, "{line}");
            let _ = sink.flush();
        }
        self.records.push(line);
    }

    pub fn records(&self) -> &[String] {
        &self.records
    }

    pub fn into_records(self) -> Vec<String> {
        self.records
    }
}

/// Drops the `wall_ms=` field from a record.
pub fn strip_wall(line: &str) -> String {
    line.split_whitespace()
        .filter(|f| !f.starts_with("wall_ms="))
        .collect::<Vec<_>>()
        .join(" ")
}

/// True if the two logs agree on every deterministic field.
pub fn logs_match(a: &[String], b: &[String]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| strip_wall(x) == strip_wall(y))
}

/// Renders `name=value` with full f64 round-trip precision (shortest exact
/// representation), so equal values always render identically.
pub fn field(name: &str, value: f64) -> String {
    format!("{name}={value}")
}
