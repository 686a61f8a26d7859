//! Append-only, schema-checked JSON record of a run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{HarnessError, Result};
use crate::schema;

pub const FILE_NAME: &str = "manifest.json";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageRecord {
    pub stage: String,
    pub metrics: Value,
    /// Files written by the stage, relative to the run directory.
    pub artifacts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsManifest {
    pub format_version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub git_commit: Option<String>,
    pub records: Vec<StageRecord>,
}

impl MetricsManifest {
    pub fn new(config_hash: &str, seed: u64) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            config_hash: config_hash.into(),
            seed,
            git_commit: git_commit(),
            records: Vec::new(),
        }
    }

    pub fn path(dir: &Path) -> PathBuf {
        dir.join(FILE_NAME)
    }

    /// Reads and validates the manifest in `dir`, if there is one.
    pub fn load(dir: &Path) -> Result<Option<Self>> {
        let path = Self::path(dir);
        if !path.exists() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(&path).map_err(|e| HarnessError::io(&path, e))?;
        let value: Value = serde_json::from_str(&text)?;
        schema::validate(schema::MANIFEST, &value)?;
        let m: Self = serde_json::from_value(value)?;
        if m.format_version != FORMAT_VERSION {
            return Err(HarnessError::Config(format!(
                "{} has format version {}, this build reads {FORMAT_VERSION}",
                path.display(),
                m.format_version
            )));
        }
        Ok(Some(m))
    }

    pub fn record(&self, stage: &str) -> Option<&StageRecord> {
        self.records.iter().find(|r| r.stage == stage)
    }

    /// Adds a record and rewrites the file. Earlier records are never touched:
    /// the on-disk prefix is checked before writing.
    pub fn append(&mut self, dir: &Path, record: StageRecord) -> Result<()> {
        if let Some(on_disk) = Self::load(dir)? {
            if on_disk.records[..] != self.records[..on_disk.records.len().min(self.records.len())]
                || on_disk.records.len() > self.records.len()
            {
                return Err(HarnessError::Config(format!(
                    "{} changed underneath this run; refusing to overwrite",
                    Self::path(dir).display()
                )));
            }
        }
        self.records.push(record);
        self.write(dir)
    }

    fn write(&self, dir: &Path) -> Result<()> {
        let value = serde_json::to_value(self)?;
        schema::validate(schema::MANIFEST, &value)?;
        let path = Self::path(dir);
        let tmp = dir.join(format!("{FILE_NAME}.tmp"));
        let text = serde_json::to_string_pretty(&value)? + "\n";
        std::fs::write(&tmp, text).map_err(|e| HarnessError::io(&tmp, e))?;
        std::fs::rename(&tmp, &path).map_err(|e| HarnessError::io(&path, e))
    }

    /// SHA-256 of the file contents.
    pub fn file_hash(dir: &Path) -> Result<String> {
        let path = Self::path(dir);
        let bytes = std::fs::read(&path).map_err(|e| HarnessError::io(&path, e))?;
        Ok(hex::encode(Sha256::digest(bytes)))
    }
}

/// Current commit of the working tree, when run inside a git checkout.
fn git_commit() -> Option<String> {
    let out = std::process::Command::new("git").args(["rev-parse", "HEAD"]).output().ok()?;
    if !out.status.success() {
        return None;
    }
    let s = String::from_utf8(out.stdout).ok()?.trim().to_string();
    (!s.is_empty()).then_some(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn rec(stage: &str) -> StageRecord {
        StageRecord { stage: stage.into(), metrics: json!({"x": 1.5}), artifacts: vec![] }
    }

    #[test]
    fn append_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = MetricsManifest::new(&"a".repeat(64), 1);
        m.append(dir.path(), rec("tokenizer")).unwrap();
        m.append(dir.path(), rec("predictor")).unwrap();
        let back = MetricsManifest::load(dir.path()).unwrap().unwrap();
        assert_eq!(back, m);
        assert!(back.record("predictor").is_some());
    }

    #[test]
    fn foreign_edits_are_detected() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = MetricsManifest::new(&"a".repeat(64), 1);
        m.append(dir.path(), rec("tokenizer")).unwrap();
        let mut other = m.clone();
        other.records[0].metrics = json!({"x": 2.0});
        other.write(dir.path()).unwrap();
        assert!(m.append(dir.path(), rec("predictor")).is_err());
    }

    const STAGES: [&str; 6] = ["tokenizer", "predictor", "addp", "generate", "eval", "recognition"];

    proptest::proptest! {
        #[test]
        fn arbitrary_floats_survive_repeated_appends(xs in proptest::collection::vec(proptest::num::f64::NORMAL, 1..7)) {
            let dir = tempfile::tempdir().unwrap();
            let mut m = MetricsManifest::new(&"a".repeat(64), 1);
            for (i, x) in xs.iter().enumerate() {
                let r = StageRecord { stage: STAGES[i].into(), metrics: json!({"x": x}), artifacts: vec![] };
                let res = m.append(dir.path(), r);
                proptest::prop_assert!(res.is_ok(), "{:?}", res);
            }
            proptest::prop_assert_eq!(MetricsManifest::load(dir.path()).unwrap().unwrap(), m);
        }
    }
}
