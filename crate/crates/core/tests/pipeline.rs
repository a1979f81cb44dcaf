use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use keyscreen::nn::Arch;
use keyscreen::pipeline::config::{DataSource, ModelOverrides, ReportOptions};
use keyscreen::pipeline::report::{comparison_table, PLACEHOLDER_ARCHS};
use keyscreen::pipeline::{self, load_record, ExperimentConfig, ExperimentRecord, RunStatus, Stage, METRICS_HEADER};
use keyscreen::synth::SynthConfig;
use keyscreen::training::TrainConfig;
use keyscreen::windowing::WindowingConfig;
use keyscreen::Error;

fn synth(n_pd: usize, n_hc: usize, prefix: &str, seed: u64) -> SynthConfig {
    SynthConfig { n_pd, n_hc, sessions_mean: 2.0, length_mean: 80.0, id_prefix: prefix.into(), seed, ..Default::default() }
}

fn config(stage: Stage, out: &Path, data: DataSource) -> ExperimentConfig {
    ExperimentConfig {
        stage,
        seed: Some(5),
        out: Some(out.to_path_buf()),
        data,
        arch: Arch::Gru,
        model: ModelOverrides { hidden: Some(6), ..Default::default() },
        windowing: WindowingConfig::new(20, 10).unwrap(),
        train: TrainConfig { epochs: 2, patience: None, ..Default::default() },
        folds: 3,
        ..Default::default()
    }
}

fn from_synth(s: SynthConfig) -> DataSource {
    DataSource { synth: Some(s), ..Default::default() }
}

struct Fixture {
    root: tempfile::TempDir,
    pretrain: ExperimentRecord,
}

impl Fixture {
    fn path(&self, rel: &str) -> PathBuf {
        self.root.path().join(rel)
    }
}

/// One small pretrain run shared by the tests that need an upstream record.
fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let root = tempfile::tempdir().unwrap();
        let pretrain = pipeline::run(&config(Stage::Pretrain, &root.path().join("pre"), from_synth(synth(6, 6, "a_", 1)))).unwrap();
        Fixture { root, pretrain }
    })
}

#[test]
fn pretrain_record_is_complete() {
    let f = fixture();
    let rec = &f.pretrain;
    assert_eq!(rec.status, RunStatus::Completed);
    assert_eq!(rec.subjects.len(), 12);
    // one member per fold without balancing
    assert_eq!(rec.runs.len(), 3);
    assert_eq!(rec.metrics.len(), 3);
    let metrics = fs::read_to_string(f.path("pre/metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines[0], METRICS_HEADER);
    assert_eq!(lines.len(), 5);
    assert!(lines[4].starts_with("pretrain,gru,unbalanced,none,mean,"));
    assert_eq!(&load_record(&f.path("pre")).unwrap(), rec);
    for run in &rec.runs {
        assert!(f.path("pre").join(&run.checkpoint).is_file());
        assert!(f.path("pre").join(&run.history).is_file());
    }
}

#[test]
fn tampered_artifacts_are_detected() {
    let src = &fixture().path("pre");
    let copy = tempfile::tempdir().unwrap();
    for entry in walk(src) {
        let rel = entry.strip_prefix(src).unwrap();
        let dst = copy.path().join(rel);
        fs::create_dir_all(dst.parent().unwrap()).unwrap();
        fs::copy(&entry, &dst).unwrap();
    }
    assert!(load_record(copy.path()).is_ok());
    let metrics = copy.path().join("metrics.csv");
    let mut text = fs::read_to_string(&metrics).unwrap();
    text.push('\n');
    fs::write(&metrics, text).unwrap();
    assert!(matches!(load_record(copy.path()), Err(Error::Data(_))));
}

fn walk(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn preprocessed_files_reproduce_the_in_memory_run() {
    let root = tempfile::tempdir().unwrap();
    let s = synth(4, 4, "p_", 9);
    pipeline::run(&config(Stage::Preprocess, &root.path().join("prep"), from_synth(s.clone()))).unwrap();
    let files = DataSource {
        signals: Some(root.path().join("prep/signals.csv")),
        labels: Some(root.path().join("prep/labels.csv")),
        ..Default::default()
    };
    let a = pipeline::run(&config(Stage::Pretrain, &root.path().join("a"), files)).unwrap();
    let b = pipeline::run(&config(Stage::Pretrain, &root.path().join("b"), from_synth(s))).unwrap();
    assert_eq!(a.subjects, b.subjects);
    assert_eq!(
        fs::read(root.path().join("a/metrics.csv")).unwrap(),
        fs::read(root.path().join("b/metrics.csv")).unwrap()
    );
}

#[test]
fn synth_stage_writes_event_and_label_logs() {
    let root = tempfile::tempdir().unwrap();
    let rec = pipeline::run(&config(Stage::Synth, root.path(), from_synth(synth(2, 3, "", 1)))).unwrap();
    let names: Vec<&str> = rec.artifacts.iter().map(|a| a.path.as_str()).collect();
    assert_eq!(names, ["events.csv", "labels.csv"]);
    let labels = fs::read_to_string(root.path().join("labels.csv")).unwrap();
    assert_eq!(labels.lines().count(), 6);
}

#[test]
fn fine_tuning_rejects_upstream_subjects() {
    let f = fixture();
    let out = f.path("leaky");
    let mut cfg = config(Stage::Finetune, &out, from_synth(synth(6, 6, "a_", 2)));
    cfg.source_record = Some(f.path("pre"));
    assert!(matches!(pipeline::run(&cfg), Err(Error::Data(_))));
    // a failed stage still leaves a record behind
    let text = fs::read_to_string(out.join("record.json")).unwrap();
    let rec: ExperimentRecord = serde_json::from_str(&text).unwrap();
    assert_eq!(rec.status, RunStatus::Failed);
    assert!(rec.error.unwrap().contains("upstream"));
}

#[test]
fn fine_tune_and_external_chain() {
    let f = fixture();
    let mut ft = config(Stage::Finetune, &f.path("ft"), from_synth(synth(5, 4, "b_", 3)));
    ft.source_record = Some(f.path("pre"));
    let ft_rec = pipeline::run(&ft).unwrap();
    assert_eq!(ft_rec.summaries.len(), 2);
    let mut upstream = f.pretrain.subjects.clone();
    upstream.sort();
    assert_eq!(ft_rec.upstream_subjects, upstream);
    assert_eq!(ft_rec.config.train.lr, f.pretrain.config.train.lr / 10.0);

    // an external cohort with a single class yields no AUC but still an F1
    let one = f.path("one_class");
    pipeline::run(&config(Stage::Synth, &one, from_synth(synth(2, 2, "c_", 4)))).unwrap();
    let labels = fs::read_to_string(one.join("labels.csv")).unwrap().replace(",0", ",1");
    fs::write(one.join("labels.csv"), labels).unwrap();
    let files = DataSource { events: Some(one.join("events.csv")), labels: Some(one.join("labels.csv")), ..Default::default() };
    let mut ext = config(Stage::ExternalValidate, &f.path("ext1"), files);
    ext.source_record = Some(f.path("ft"));
    assert!(matches!(pipeline::run(&ext), Err(Error::UndefinedMetric(_))));
    let m = fs::read_to_string(f.path("ext1/metrics.csv")).unwrap();
    let row: Vec<&str> = m.lines().nth(1).unwrap().split(',').collect();
    assert_eq!((row[5], row[7]), ("", "4"));
    assert!(row[6].parse::<f64>().is_ok());

    let mut ext = config(Stage::ExternalValidate, &f.path("ext"), from_synth(synth(3, 3, "c_", 4)));
    ext.source_record = Some(f.path("ft"));
    let rec = pipeline::run(&ext).unwrap();
    assert!(rec.runs.is_empty());
    assert_eq!(rec.param_digest_before, rec.param_digest_after);
    assert_eq!(rec.upstream_subjects.len(), 12 + 9);
    let preds = fs::read_to_string(f.path("ext/predictions.csv")).unwrap();
    assert_eq!(preds.lines().count(), 7);

    let report_cfg = ExperimentConfig {
        stage: Stage::Report,
        report: ReportOptions { records: vec![f.path("pre"), f.path("ft"), f.path("ext")], placeholders: true },
        ..config(Stage::Report, &f.path("report"), DataSource::default())
    };
    let rep = pipeline::run(&report_cfg).unwrap();
    let tables: Vec<&str> = rep.artifacts.iter().map(|a| a.path.as_str()).collect();
    assert_eq!(tables, ["table_external.csv", "table_finetune.csv", "table_pretrain.csv"]);
    let ext_table = fs::read_to_string(f.path("report/table_external.csv")).unwrap();
    assert!(ext_table.starts_with("arch,auc_roc,f1,best_fold,policy,balancing\ngru,"));
    assert!(ext_table.ends_with("xcm,,,,,\ntst_plus,,,,,\n"));
}

#[test]
fn comparison_table_marks_first_best() {
    let mut rows = BTreeMap::new();
    rows.insert(Arch::Tcn, BTreeMap::from([("a".to_string(), 0.7), ("b".to_string(), 0.7)]));
    rows.insert(Arch::Gru, BTreeMap::from([("b".to_string(), 0.9)]));
    let t = comparison_table(&["a", "b"], &rows, false);
    assert_eq!(t, "arch,a,b,best\ngru,,0.900000,b\ntcn,0.700000,0.700000,a\n");
    let with = comparison_table(&["a", "b"], &rows, true);
    assert_eq!(with.lines().count(), 3 + PLACEHOLDER_ARCHS.len());
}

#[test]
fn config_errors_are_config_errors() {
    let bad = [
        r#"{"schema_version": 2}"#,
        r#"{"schema_version": 1, "no_such_field": 3}"#,
        r#"{"schema_version": 1, "train": {"epochs": "many"}}"#,
    ];
    for text in bad {
        assert!(matches!(ExperimentConfig::from_json(text), Err(Error::Config(_))), "{text}");
    }
    let cfg = ExperimentConfig::from_json(r#"{"schema_version": 1, "data": {"synth": {}}}"#).unwrap();
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    let cfg = ExperimentConfig { seed: Some(1), out: Some("x".into()), ..cfg };
    cfg.validate().unwrap();
    let cfg = ExperimentConfig { folds: 1, ..cfg };
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
}

#[test]
fn resolved_config_replays() {
    let rec = &fixture().pretrain;
    let json = serde_json::to_string(&rec.config).unwrap();
    assert_eq!(ExperimentConfig::from_json(&json).unwrap(), rec.config);
}
