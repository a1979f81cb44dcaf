use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::balance::ResamplingPlan;
use crate::error::{Error, Result};
use crate::evaluation::FoldPlan;
use crate::ingest::ValidationReport;
use crate::pipeline::config::{ExperimentConfig, Stage};
use crate::search::{HyperConfig, SearchTrace};
use crate::training::FreezePolicy;
use crate::windowing::WindowingConfig;

pub const RECORD_FILE: &str = "record.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the output directory, `/`-separated.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    #[default]
    Running,
    Completed,
    Failed,
}

/// One trained model: a fold, an ensemble member and, when fine-tuning, a policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub fold: usize,
    pub member: usize,
    pub policy: Option<FreezePolicy>,
    pub history: String,
    pub checkpoint: String,
    pub epochs_run: usize,
    pub selected_epoch: usize,
    pub selected_val_auc: f64,
    pub train_subjects: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub fold: usize,
    pub policy: Option<FreezePolicy>,
    /// `None` when the evaluated subjects were all of one class.
    pub auc_roc: Option<f64>,
    pub f1: f64,
    pub n_subjects: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicySummary {
    pub policy: Option<FreezePolicy>,
    pub mean_auc: f64,
    pub mean_f1: f64,
    /// Fold with the highest validation AUC, first on ties.
    pub best_fold: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceRef {
    pub record: PathBuf,
    pub stage: Stage,
    pub fold: usize,
    pub policy: Option<FreezePolicy>,
    pub checkpoints: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub schema_version: u32,
    pub status: RunStatus,
    pub error: Option<String>,
    pub stage: Stage,
    /// Fully resolved configuration, replayable as-is.
    pub config: ExperimentConfig,
    /// Subjects of this stage's cohort.
    pub subjects: Vec<String>,
    /// Subjects of every upstream stage.
    pub upstream_subjects: Vec<String>,
    pub validation_report: Option<ValidationReport>,
    pub fold_plan: Option<FoldPlan>,
    pub resampling: Vec<ResamplingPlan>,
    pub search: Option<SearchTrace>,
    pub hyper: Option<HyperConfig>,
    pub windowing: Option<WindowingConfig>,
    pub runs: Vec<RunRecord>,
    pub metrics: Vec<FoldMetrics>,
    pub summaries: Vec<PolicySummary>,
    pub selected_policy: Option<FreezePolicy>,
    pub source: Option<SourceRef>,
    pub param_digest_before: Option<String>,
    pub param_digest_after: Option<String>,
    pub artifacts: Vec<Artifact>,
    pub wall_clock_secs: f64,
}

impl ExperimentRecord {
    /// Summary of the selected policy (or the only one).
    pub fn selected_summary(&self) -> Option<&PolicySummary> {
        self.summaries.iter().find(|s| s.policy == self.selected_policy).or(self.summaries.first())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Output directory that hashes everything written through it.
#[derive(Debug)]
pub struct OutputDir {
    root: PathBuf,
    artifacts: Vec<Artifact>,
}

impl OutputDir {
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root)?;
        Ok(Self { root: root.to_path_buf(), artifacts: Vec::new() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        let path = self.root.join(rel);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(&path, bytes)?;
        let artifact = Artifact { path: rel.to_string(), sha256: sha256_hex(bytes), bytes: bytes.len() as u64 };
        match self.artifacts.iter_mut().find(|a| a.path == rel) {
            Some(a) => *a = artifact,
            None => self.artifacts.push(artifact),
        }
        Ok(())
    }

    pub fn artifacts(&self) -> &[Artifact] {
        &self.artifacts
    }

    /// Writes `record.json` with the artifact list attached.
    pub fn finish(&self, record: &mut ExperimentRecord) -> Result<()> {
        record.artifacts = self.artifacts.clone();
        let json = serde_json::to_string_pretty(record)?;
        fs::write(self.root.join(RECORD_FILE), json)?;
        Ok(())
    }
}

/// Loads `record.json` from `dir` and checks every artifact's digest.
pub fn load_record(dir: &Path) -> Result<ExperimentRecord> {
    let path = dir.join(RECORD_FILE);
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let record: ExperimentRecord = serde_json::from_str(&text)?;
    for a in &record.artifacts {
        let bytes = fs::read(dir.join(&a.path))
            .map_err(|e| Error::Data(format!("artifact {} missing: {e}", a.path)))?;
        if sha256_hex(&bytes) != a.sha256 {
            return Err(Error::Data(format!("artifact {} does not match its recorded digest", a.path)));
        }
    }
    Ok(record)
}
