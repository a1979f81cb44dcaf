use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::balance::{Strategy, DEFAULT_FRACTIONS};
use crate::error::{Error, Result};
use crate::evaluation::Aggregation;
use crate::ingest::TaskKind;
use crate::nn::{Arch, ModelSpec};
use crate::search::{default_space, DatasetClass, SearchSpace};
use crate::signals::{CleaningConfig, PreprocessConfig};
use crate::synth::SynthConfig;
use crate::training::{FreezePolicy, TrainConfig};
use crate::windowing::WindowingConfig;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Synth,
    Preprocess,
    #[default]
    Pretrain,
    Finetune,
    ExternalValidate,
    Report,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Preprocess => "preprocess",
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
            Stage::ExternalValidate => "external_validate",
            Stage::Report => "report",
        }
    }
}

/// Where a stage reads its cohort from. `synth` generates one in memory;
/// otherwise `signals` (already preprocessed) wins over `events`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSource {
    pub events: Option<PathBuf>,
    pub signals: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub synth: Option<SynthConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessOptions {
    pub segment: bool,
    pub min_typing_rate: f64,
    pub ft_outlier_cap: f64,
    pub session_gap: f64,
}

impl Default for PreprocessOptions {
    fn default() -> Self {
        let c = CleaningConfig::new(TaskKind::FreeText);
        Self { segment: false, min_typing_rate: c.min_typing_rate, ft_outlier_cap: c.ft_outlier_cap, session_gap: c.session_gap }
    }
}

impl PreprocessOptions {
    pub fn resolve(&self, task_kind: TaskKind) -> PreprocessConfig {
        PreprocessConfig {
            cleaning: CleaningConfig {
                min_typing_rate: self.min_typing_rate,
                ft_outlier_cap: self.ft_outlier_cap,
                session_gap: self.session_gap,
                task_kind,
            },
            segment: self.segment,
        }
    }
}

/// Optional replacements for the architecture defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelOverrides {
    pub hidden: Option<usize>,
    pub depth: Option<usize>,
    pub fcn_channels: Option<Vec<usize>>,
    pub fcn_kernels: Option<Vec<usize>>,
    pub tcn_kernel: Option<usize>,
    pub heads: Option<usize>,
    pub ffn: Option<usize>,
    pub positional_encoding: Option<bool>,
}

impl ModelOverrides {
    pub fn apply(&self, arch: Arch, seed: u64) -> ModelSpec {
        let d = ModelSpec::new(arch, seed);
        ModelSpec {
            hidden: self.hidden.unwrap_or(d.hidden),
            depth: self.depth.unwrap_or(d.depth),
            fcn_channels: self.fcn_channels.clone().unwrap_or(d.fcn_channels.clone()),
            fcn_kernels: self.fcn_kernels.clone().unwrap_or(d.fcn_kernels.clone()),
            tcn_kernel: self.tcn_kernel.unwrap_or(d.tcn_kernel),
            heads: self.heads.unwrap_or(d.heads),
            ffn: self.ffn.unwrap_or(d.ffn),
            positional_encoding: self.positional_encoding.unwrap_or(d.positional_encoding),
            ..d
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BalanceConfig {
    pub strategy: Strategy,
    pub fractions: Vec<f64>,
}

impl Default for BalanceConfig {
    fn default() -> Self {
        Self { strategy: Strategy::Unbalanced, fractions: DEFAULT_FRACTIONS.to_vec() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub enabled: bool,
    pub dataset_class: DatasetClass,
    /// Replaces the grid implied by `dataset_class`.
    pub space: Option<SearchSpace>,
    /// Epoch cap for candidate evaluations; the final run uses `train.epochs`.
    pub epochs: Option<usize>,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self { enabled: false, dataset_class: DatasetClass::FixedTextShort, space: None, epochs: None }
    }
}

impl SearchConfig {
    pub fn resolved_space(&self) -> SearchSpace {
        self.space.clone().unwrap_or_else(|| default_space(self.dataset_class))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneOptions {
    /// Defaults to the source checkpoint's learning rate divided by ten.
    pub lr: Option<f64>,
    pub policies: Vec<FreezePolicy>,
}

impl Default for FinetuneOptions {
    fn default() -> Self {
        Self { lr: None, policies: FreezePolicy::ALL.to_vec() }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportOptions {
    /// Output directories of earlier runs.
    pub records: Vec<PathBuf>,
    /// Adds rows for the two architectures this toolkit does not implement.
    pub placeholders: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub stage: Stage,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub data: DataSource,
    pub task_kind: TaskKind,
    pub preprocess: PreprocessOptions,
    /// Permute labels across subjects before anything else (negative control).
    pub shuffle_labels_seed: Option<u64>,
    pub arch: Arch,
    pub model: ModelOverrides,
    pub balance: BalanceConfig,
    pub windowing: WindowingConfig,
    pub search: SearchConfig,
    pub train: TrainConfig,
    pub folds: usize,
    pub aggregation: Aggregation,
    /// Output directory of the upstream stage (pretrain for fine-tuning,
    /// fine-tuning for external validation).
    pub source_record: Option<PathBuf>,
    pub finetune: FinetuneOptions,
    pub report: ReportOptions,
    pub jobs: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            stage: Stage::default(),
            seed: None,
            out: None,
            data: DataSource::default(),
            task_kind: TaskKind::FreeText,
            preprocess: PreprocessOptions::default(),
            shuffle_labels_seed: None,
            arch: Arch::GruFcn,
            model: ModelOverrides::default(),
            balance: BalanceConfig::default(),
            windowing: WindowingConfig { window_size: 50, stride: 25 },
            search: SearchConfig::default(),
            train: TrainConfig::default(),
            folds: 10,
            aggregation: Aggregation::Hierarchical,
            source_record: None,
            finetune: FinetuneOptions::default(),
            report: ReportOptions::default(),
            jobs: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s).map_err(|e| Error::Config(format!("config: {e}")))?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "config schema_version {} is not supported (expected {SCHEMA_VERSION})",
                cfg.schema_version
            )));
        }
        Ok(cfg)
    }

    pub fn seed(&self) -> Result<u64> {
        self.seed.ok_or_else(|| Error::Config("a seed is required (config `seed` or --seed)".into()))
    }

    pub fn out_dir(&self) -> Result<&PathBuf> {
        self.out.as_ref().ok_or_else(|| Error::Config("an output directory is required (config `out` or --out)".into()))
    }

    pub fn model_spec(&self, seed: u64) -> ModelSpec {
        self.model.apply(self.arch, seed)
    }

    fn has_cohort(&self) -> bool {
        self.data.synth.is_some() || self.data.events.is_some() || self.data.signals.is_some()
    }

    /// Checks that everything the stage needs is present and well-formed.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        self.seed()?;
        self.out_dir()?;
        match self.stage {
            Stage::Synth | Stage::Report => {}
            Stage::Preprocess => {
                if self.data.events.is_none() && self.data.synth.is_none() {
                    return bad("preprocess needs `data.events` or `data.synth`");
                }
            }
            Stage::Pretrain | Stage::Finetune | Stage::ExternalValidate => {
                if !self.has_cohort() {
                    return bad("this stage needs `data.synth`, `data.signals` or `data.events`");
                }
                if self.data.synth.is_none() && self.data.labels.is_none() {
                    return bad("file-based cohorts need `data.labels`");
                }
            }
        }
        if matches!(self.stage, Stage::Finetune | Stage::ExternalValidate) && self.source_record.is_none() {
            return bad("finetune and external stages need `source_record`");
        }
        if self.stage == Stage::Report && self.report.records.is_empty() {
            return bad("report needs at least one entry in `report.records`");
        }
        if let Some(s) = &self.data.synth {
            s.validate()?;
        }
        self.preprocess.resolve(self.task_kind).cleaning.validate()?;
        self.model_spec(0).validate()?;
        self.windowing.validate()?;
        self.train.validate()?;
        if self.folds < 2 {
            return bad("folds must be >= 2");
        }
        if self.balance.fractions.is_empty() || self.balance.fractions.iter().any(|&f| !(f > 0.0 && f < 1.0)) {
            return bad("balance.fractions must be non-empty and inside (0, 1)");
        }
        if self.search.enabled {
            self.search.resolved_space().validate()?;
            if self.search.epochs == Some(0) {
                return bad("search.epochs must be >= 1");
            }
        }
        if let Some(lr) = self.finetune.lr {
            if !(lr > 0.0) {
                return bad("finetune.lr must be positive");
            }
        }
        if self.stage == Stage::Finetune && self.finetune.policies.is_empty() {
            return bad("finetune.policies must not be empty");
        }
        if self.jobs == Some(0) {
            return bad("jobs must be >= 1");
        }
        Ok(())
    }
}
