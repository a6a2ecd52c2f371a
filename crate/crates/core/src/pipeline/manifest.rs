//! Run manifest: every artifact a stage reads or writes, with its SHA-256.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{PipelineError, Stage};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    /// File name relative to the output directory.
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum StageStatus {
    Completed,
    Failed { exit_code: i32, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    #[serde(flatten)]
    pub status: StageStatus,
    pub inputs: Vec<Artifact>,
    pub outputs: Vec<Artifact>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config: Option<Artifact>,
    /// In pipeline order.
    pub stages: Vec<StageRecord>,
}

impl Default for RunManifest {
    fn default() -> Self {
        RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config: None,
            stages: Vec::new(),
        }
    }
}

impl RunManifest {
    pub fn record(&self, stage: Stage) -> Option<&StageRecord> {
        self.stages.iter().find(|r| r.stage == stage)
    }

    pub fn completed(&self, stage: Stage) -> bool {
        matches!(self.record(stage), Some(r) if r.status == StageStatus::Completed)
    }

    /// Stores `record`, dropping records of `record.stage` and every later
    /// stage, whose inputs may now be stale.
    pub fn replace(&mut self, record: StageRecord) {
        self.stages.retain(|r| r.stage < record.stage);
        self.stages.push(record);
    }

    /// Stages before `stage` that have not completed.
    pub fn missing_before(&self, stage: Stage) -> Vec<Stage> {
        Stage::ALL
            .iter()
            .copied()
            .filter(|s| *s < stage && !self.completed(*s))
            .collect()
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Output directory plus its manifest.
pub struct Workspace {
    pub dir: PathBuf,
    pub manifest: RunManifest,
}

impl Workspace {
    /// Opens `dir`, creating it if needed and loading an existing manifest.
    pub fn open(dir: &Path) -> Result<Workspace, PipelineError> {
        std::fs::create_dir_all(dir).map_err(|e| {
            PipelineError::validation(format!("cannot create output directory {}: {e}", dir.display()))
        })?;
        let path = dir.join(MANIFEST_FILE);
        let manifest = if path.exists() {
            let text = std::fs::read_to_string(&path)
                .map_err(|e| PipelineError::validation(format!("cannot read {}: {e}", path.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| PipelineError::validation(format!("malformed {}: {e}", path.display())))?
        } else {
            RunManifest::default()
        };
        Ok(Workspace {
            dir: dir.to_path_buf(),
            manifest,
        })
    }

    /// Opens an existing run without creating anything.
    pub fn load(dir: &Path) -> Result<Workspace, PipelineError> {
        if !dir.join(MANIFEST_FILE).exists() {
            return Err(PipelineError::validation(format!(
                "no {MANIFEST_FILE} in {}",
                dir.display()
            )));
        }
        Self::open(dir)
    }

    pub fn save(&self) -> Result<(), PipelineError> {
        let text = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        self.write_raw(MANIFEST_FILE, text.as_bytes())?;
        Ok(())
    }

    pub fn write_raw(&self, name: &str, bytes: &[u8]) -> Result<Artifact, PipelineError> {
        let path = self.dir.join(name);
        std::fs::write(&path, bytes)
            .map_err(|e| PipelineError::validation(format!("cannot write {}: {e}", path.display())))?;
        Ok(Artifact {
            path: name.to_string(),
            sha256: sha256_hex(bytes),
        })
    }

    /// Reads an artifact and checks it against its recorded hash.
    pub fn read_verified(&self, artifact: &Artifact) -> Result<String, PipelineError> {
        let path = self.dir.join(&artifact.path);
        let bytes = std::fs::read(&path)
            .map_err(|e| PipelineError::validation(format!("cannot read {}: {e}", path.display())))?;
        let got = sha256_hex(&bytes);
        if got != artifact.sha256 {
            return Err(PipelineError::validation(format!(
                "integrity error: {} has hash {got}, manifest records {}",
                artifact.path, artifact.sha256
            )));
        }
        String::from_utf8(bytes)
            .map_err(|_| PipelineError::validation(format!("{} is not UTF-8", artifact.path)))
    }

    /// The output `name` of a completed `stage`.
    pub fn output_of(&self, stage: Stage, name: &str) -> Result<Artifact, PipelineError> {
        let rec = self
            .manifest
            .record(stage)
            .filter(|r| r.status == StageStatus::Completed)
            .ok_or_else(|| {
                PipelineError::validation(format!("stage `{stage}` has not completed in this run"))
            })?;
        rec.outputs
            .iter()
            .find(|a| a.path == name)
            .cloned()
            .ok_or_else(|| PipelineError::validation(format!("stage `{stage}` did not produce {name}")))
    }

    /// Every artifact in the manifest whose file is missing or altered.
    pub fn integrity_errors(&self) -> Vec<String> {
        let mut errors = Vec::new();
        let all = self
            .manifest
            .config
            .iter()
            .chain(self.manifest.stages.iter().flat_map(|r| r.inputs.iter().chain(&r.outputs)));
        let mut seen = std::collections::BTreeSet::new();
        for a in all {
            if seen.insert(a.path.clone()) {
                if let Err(e) = self.read_verified(a) {
                    errors.push(e.message);
                }
            }
        }
        errors
    }
}
