//! Line-delimited JSON training logs.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub trait StepLogger {
    fn log(&mut self, record: serde_json::Value);
}

pub struct NullLogger;

impl StepLogger for NullLogger {
    fn log(&mut self, _record: serde_json::Value) {}
}

impl<F: FnMut(serde_json::Value)> StepLogger for F {
    fn log(&mut self, record: serde_json::Value) {
        self(record)
    }
}

/// Appends one JSON object per line, flushing after each record.
pub struct JsonlLogger {
    out: BufWriter<File>,
}

impl JsonlLogger {
    pub fn create(path: &Path) -> Result<Self> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self { out: BufWriter::new(f) })
    }

    /// Opens `path` for appending, creating it if needed.
    pub fn append(path: &Path) -> Result<Self> {
        let f = File::options().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
        Ok(Self { out: BufWriter::new(f) })
    }
}

impl StepLogger for JsonlLogger {
    fn log(&mut self, record: serde_json::Value) {
        // A failed log line must not abort training.
        if writeln!(self.out, "{record}").and_then(|_| self.out.flush()).is_err() {
            log::warn!("could not write training log line");
        }
    }
}
