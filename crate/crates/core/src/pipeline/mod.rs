//! Stage orchestration: configuration, persisted records and reports.

pub mod config;
pub mod record;
pub mod report;
pub mod stages;

use std::time::Instant;

pub use config::{ExperimentConfig, Stage, SCHEMA_VERSION};
pub use record::{load_record, ExperimentRecord, RunStatus};
pub use stages::{load_cohort, LoadedCohort, METRICS_HEADER};

use crate::error::Result;
use record::OutputDir;

/// Runs one stage and persists its record. A failing stage still writes a
/// record marked `failed` with whatever artifacts it produced.
pub fn run(cfg: &ExperimentConfig) -> Result<ExperimentRecord> {
    cfg.validate()?;
    let mut out = OutputDir::create(cfg.out_dir()?)?;
    let start = Instant::now();
    let mut rec = ExperimentRecord {
        schema_version: SCHEMA_VERSION,
        stage: cfg.stage,
        config: cfg.clone(),
        ..Default::default()
    };
    let result = match cfg.stage {
        Stage::Synth => stages::run_synth(cfg, &mut out, &mut rec),
        Stage::Preprocess => stages::run_preprocess(cfg, &mut out, &mut rec),
        Stage::Pretrain => stages::run_pretrain(cfg, &mut out, &mut rec),
        Stage::Finetune => stages::run_finetune(cfg, &mut out, &mut rec),
        Stage::ExternalValidate => stages::run_external(cfg, &mut out, &mut rec),
        Stage::Report => report::run_report(cfg, &mut out, &mut rec),
    };
    rec.wall_clock_secs = start.elapsed().as_secs_f64();
    match result {
        Ok(()) => {
            rec.status = RunStatus::Completed;
            out.finish(&mut rec)?;
            Ok(rec)
        }
        Err(e) => {
            rec.status = RunStatus::Failed;
            rec.error = Some(e.to_string());
            let _ = out.finish(&mut rec);
            Err(e)
        }
    }
}
