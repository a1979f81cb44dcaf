//! Comparison tables across experiment records.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::balance::Strategy;
use crate::error::Result;
use crate::nn::Arch;
use crate::pipeline::config::{ExperimentConfig, Stage};
use crate::pipeline::record::{load_record, ExperimentRecord, OutputDir};
use crate::training::FreezePolicy;

/// Architectures of the original comparison that this toolkit does not implement.
pub const PLACEHOLDER_ARCHS: [&str; 2] = ["xcm", "tst_plus"];

/// One row per architecture, one value column per group and a `best` column
/// naming the row's highest value (first on ties).
pub fn comparison_table(groups: &[&str], rows: &BTreeMap<Arch, BTreeMap<String, f64>>, placeholders: bool) -> String {
    let mut out = format!("arch,{},best\n", groups.join(","));
    for (arch, cells) in rows {
        let mut best: Option<(&str, f64)> = None;
        let mut line = arch.name().to_string();
        for g in groups {
            match cells.get(*g) {
                Some(&v) => {
                    let _ = write!(line, ",{v:.6}");
                    if best.is_none_or(|(_, b)| v > b) {
                        best = Some((g, v));
                    }
                }
                None => line.push(','),
            }
        }
        let _ = writeln!(out, "{line},{}", best.map_or("", |(g, _)| g));
    }
    if placeholders {
        for name in PLACEHOLDER_ARCHS {
            let _ = writeln!(out, "{name}{},", ",".repeat(groups.len()));
        }
    }
    out
}

fn external_table(records: &[&ExperimentRecord], placeholders: bool) -> String {
    let mut rows: BTreeMap<Arch, String> = BTreeMap::new();
    for r in records {
        let Some(m) = r.metrics.first() else { continue };
        let auc = m.auc_roc.map(|a| format!("{a:.6}")).unwrap_or_default();
        let policy = m.policy.map_or("none", FreezePolicy::name);
        rows.insert(
            r.config.arch,
            format!("{},{auc},{:.6},{},{policy},{}", r.config.arch.name(), m.f1, m.fold, r.config.balance.strategy.name()),
        );
    }
    let mut out = String::from("arch,auc_roc,f1,best_fold,policy,balancing\n");
    for line in rows.values() {
        out.push_str(line);
        out.push('\n');
    }
    if placeholders {
        for name in PLACEHOLDER_ARCHS {
            let _ = writeln!(out, "{name},,,,,");
        }
    }
    out
}

/// Builds the tables for every stage present among `records`. Later records
/// overwrite earlier ones for the same cell.
pub fn build_tables(records: &[ExperimentRecord], placeholders: bool) -> BTreeMap<&'static str, String> {
    let mut tables = BTreeMap::new();
    let mut pretrain: BTreeMap<Arch, BTreeMap<String, f64>> = BTreeMap::new();
    let mut finetune: BTreeMap<Arch, BTreeMap<String, f64>> = BTreeMap::new();
    let mut external = Vec::new();
    for r in records {
        match r.stage {
            Stage::Pretrain => {
                if let Some(s) = r.summaries.first() {
                    pretrain.entry(r.config.arch).or_default().insert(r.config.balance.strategy.name().into(), s.mean_auc);
                }
            }
            Stage::Finetune => {
                for s in &r.summaries {
                    let p = s.policy.map_or("none", FreezePolicy::name);
                    finetune.entry(r.config.arch).or_default().insert(p.into(), s.mean_auc);
                }
            }
            Stage::ExternalValidate => external.push(r),
            _ => {}
        }
    }
    if !pretrain.is_empty() {
        let groups: Vec<&str> = Strategy::ALL.iter().map(|s| s.name()).collect();
        tables.insert("table_pretrain.csv", comparison_table(&groups, &pretrain, placeholders));
    }
    if !finetune.is_empty() {
        let groups: Vec<&str> = FreezePolicy::ALL.iter().map(|p| p.name()).collect();
        tables.insert("table_finetune.csv", comparison_table(&groups, &finetune, placeholders));
    }
    if !external.is_empty() {
        tables.insert("table_external.csv", external_table(&external, placeholders));
    }
    tables
}

pub(crate) fn run_report(cfg: &ExperimentConfig, out: &mut OutputDir, _rec: &mut ExperimentRecord) -> Result<()> {
    let records = cfg.report.records.iter().map(|d| load_record(d)).collect::<Result<Vec<_>>>()?;
    for (name, body) in build_tables(&records, cfg.report.placeholders) {
        out.write(name, body.as_bytes())?;
    }
    Ok(())
}
