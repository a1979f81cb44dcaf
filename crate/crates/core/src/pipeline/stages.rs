use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use rayon::prelude::*;

use crate::balance::{ensemble_aggregate, plan, ResamplingPlan};
use crate::error::{Error, Result};
use crate::evaluation::{auc_roc, f1, make_folds, scores_from_map, Aggregation, F1Score, FoldPlan, PatientScore};
use crate::ingest::{
    parse_event_log, parse_labels, parse_signal_log, write_labels, write_signal_log, EventCohort, Label,
    SignalCohort, ValidationReport,
};
use crate::nn::{Checkpoint, Model, ModelSpec};
use crate::pipeline::config::{BalanceConfig, ExperimentConfig, Stage};
use crate::pipeline::record::{
    load_record, sha256_hex, ExperimentRecord, FoldMetrics, OutputDir, PolicySummary, RunRecord, RunStatus, SourceRef,
};
use crate::rng::substream;
use crate::search::{forward_select, HyperConfig};
use crate::signals::preprocess;
use crate::synth::{generate_cohort, shuffle_label_list, SynthConfig};
use crate::training::{
    fine_tune, fine_tune_lr, patient_scores, prepare_eval, prepare_fold, train, FreezePolicy, TrainConfig,
    TrainOutcome,
};
use crate::windowing::{ChannelStats, WindowingConfig};

// Substream tags, so each use of the master seed draws independent numbers.
const TAG_FOLDS: u64 = 1;
const TAG_RESAMPLE: u64 = 2;
const TAG_INIT: u64 = 3;
const TAG_SHUFFLE: u64 = 4;

pub const METRICS_HEADER: &str = "stage,arch,balancing,policy,fold,auc_roc,f1,n_subjects";

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))
}

/// A labeled, preprocessed cohort.
#[derive(Clone, Debug)]
pub struct LoadedCohort {
    pub cohort: SignalCohort,
    pub labels: Vec<(String, Label)>,
    pub report: ValidationReport,
}

fn events_to_signals(
    parsed: crate::ingest::Parsed<crate::ingest::SessionEvents>,
    labels: &[(String, Label)],
    cfg: &ExperimentConfig,
) -> Result<(SignalCohort, ValidationReport)> {
    let mut events: EventCohort = parsed.cohort;
    events.attach_labels(labels);
    let pre = preprocess(&events, &cfg.preprocess.resolve(cfg.task_kind))?;
    let mut report = parsed.report;
    report.merge(&pre.report);
    Ok((pre.cohort, report))
}

/// Reads (or generates) the stage's cohort, preprocesses raw events and
/// attaches labels. Subjects left without sessions are dropped.
pub fn load_cohort(cfg: &ExperimentConfig) -> Result<LoadedCohort> {
    let (mut cohort, labels, report) = if let Some(s) = &cfg.data.synth {
        let out = generate_cohort(s)?;
        let labels = parse_labels(&out.labels_csv[..])?;
        let parsed = parse_event_log(&out.events_csv[..], cfg.task_kind)?;
        let (cohort, report) = events_to_signals(parsed, &labels, cfg)?;
        (cohort, labels, report)
    } else {
        let label_path = cfg.data.labels.as_ref().ok_or_else(|| Error::Config("`data.labels` is required".into()))?;
        let labels = parse_labels(open(label_path)?)?;
        if let Some(p) = &cfg.data.signals {
            let parsed = parse_signal_log(open(p)?)?;
            (parsed.cohort, labels, parsed.report)
        } else {
            let p = cfg.data.events.as_ref().ok_or_else(|| Error::Config("no cohort source configured".into()))?;
            let parsed = parse_event_log(open(p)?, cfg.task_kind)?;
            let (cohort, report) = events_to_signals(parsed, &labels, cfg)?;
            (cohort, labels, report)
        }
    };
    cohort.subjects.retain(|s| !s.sessions.is_empty());
    cohort.attach_labels(&labels);
    let mut labels = cohort.labels()?;
    if let Some(seed) = cfg.shuffle_labels_seed {
        labels = shuffle_label_list(&labels, seed);
        cohort.attach_labels(&labels);
    }
    if labels.is_empty() {
        return Err(Error::Data("cohort has no subjects with usable sessions".into()));
    }
    Ok(LoadedCohort { cohort, labels, report })
}

// ---------------------------------------------------------------------------
// cross-validation engine

enum Init<'a> {
    Fresh(&'a ModelSpec),
    FromSource { models: &'a [Model<f64>], policy: FreezePolicy },
}

struct CvSetup<'a> {
    data: &'a LoadedCohort,
    folds: &'a FoldPlan,
    windowing: WindowingConfig,
    train: TrainConfig,
    balance: &'a BalanceConfig,
    aggregation: Aggregation,
    seed: u64,
    /// Separates the random streams of different runs sharing one seed.
    stream: u64,
}

struct MemberResult {
    member: usize,
    outcome: TrainOutcome<f64>,
    train_subjects: usize,
}

struct FoldResult {
    fold: usize,
    plan: ResamplingPlan,
    stats: ChannelStats<f64>,
    members: Vec<MemberResult>,
    scores: Vec<PatientScore<f64>>,
    auc: Option<f64>,
    f1: F1Score,
}

fn labels_of(ids: &[String], labels: &[(String, Label)]) -> Vec<(String, Label)> {
    let keep: BTreeSet<&str> = ids.iter().map(String::as_str).collect();
    labels.iter().filter(|(s, _)| keep.contains(s.as_str())).cloned().collect()
}

fn auc_or_none(scores: &[PatientScore<f64>]) -> Result<Option<f64>> {
    match auc_roc(scores) {
        Ok(a) => Ok(Some(a)),
        Err(Error::UndefinedMetric(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

fn run_cv(setup: &CvSetup<'_>, init: &Init<'_>) -> Result<Vec<FoldResult>> {
    let labels = &setup.data.labels;
    let k = setup.folds.k;
    let prepared: Vec<_> = (0..k)
        .into_par_iter()
        .map(|f| {
            let val = labels_of(setup.folds.validation(f), labels);
            let train_labels = setup.folds.training(f, labels);
            let fd = prepare_fold::<f64>(&setup.data.cohort, &train_labels, &val, &setup.windowing)?;
            let p = plan(
                setup.balance.strategy,
                &train_labels,
                &setup.balance.fractions,
                substream(setup.seed, &[TAG_RESAMPLE, setup.stream, f as u64]),
            )?;
            p.ensure_excludes(setup.folds.validation(f).iter().map(String::as_str))?;
            Ok((fd, p))
        })
        .collect::<Result<_>>()?;

    if let Init::FromSource { models, .. } = init {
        if let Some((_, p)) = prepared.iter().find(|(_, p)| p.members.len() != models.len()) {
            return Err(Error::Config(format!(
                "source ensemble has {} members but the resampling plan has {}",
                models.len(),
                p.members.len()
            )));
        }
    }

    let jobs: Vec<(usize, usize)> =
        prepared.iter().enumerate().flat_map(|(f, (_, p))| (0..p.members.len()).map(move |m| (f, m))).collect();
    let trained: Vec<MemberResult> = jobs
        .par_iter()
        .map(|&(f, m)| {
            let (fd, p) = &prepared[f];
            let data = fd.train.restrict(&p.members[m].subjects)?;
            let path = [setup.stream, f as u64, m as u64];
            let cfg = TrainConfig {
                seed: substream(setup.seed, &[TAG_SHUFFLE, path[0], path[1], path[2]]),
                ..setup.train.clone()
            };
            let outcome = match init {
                Init::Fresh(spec) => {
                    let spec = ModelSpec { seed: substream(setup.seed, &[TAG_INIT, path[0], path[1], path[2]]), ..(*spec).clone() };
                    train(Model::new(spec)?, &data, &fd.val, &cfg, setup.aggregation)?
                }
                Init::FromSource { models, policy } => {
                    fine_tune(models[m].clone(), &setup.windowing, *policy, &data, &fd.val, &cfg, setup.aggregation)?
                }
            };
            Ok(MemberResult { member: m, outcome, train_subjects: p.members[m].subjects.len() })
        })
        .collect::<Result<_>>()?;

    let mut trained = trained.into_iter();
    let mut out = Vec::with_capacity(k);
    for (f, (fd, p)) in prepared.into_iter().enumerate() {
        let members: Vec<MemberResult> = trained.by_ref().take(p.members.len()).collect();
        let maps = members
            .iter()
            .map(|m| {
                let agg = patient_scores(&m.outcome.model, &fd.val, setup.aggregation)?;
                Ok(agg.scores.into_iter().map(|s| (s.subject_id, s.probability)).collect::<BTreeMap<_, _>>())
            })
            .collect::<Result<Vec<_>>>()?;
        let ensemble = ensemble_aggregate(&maps)?;
        let scores = scores_from_map(&ensemble, &fd.val.labels);
        let auc = auc_or_none(&scores)?;
        let f1 = f1(&scores, 0.5);
        out.push(FoldResult { fold: f, plan: p, stats: fd.stats, members, scores, auc, f1 });
    }
    Ok(out)
}

fn summarize(results: &[FoldResult], policy: Option<FreezePolicy>) -> Result<PolicySummary> {
    let aucs: Vec<f64> = results.iter().filter_map(|r| r.auc).collect();
    if aucs.is_empty() {
        return Err(Error::UndefinedMetric("no fold had both classes in validation".into()));
    }
    let mut best = 0;
    for (i, r) in results.iter().enumerate() {
        if r.auc.unwrap_or(f64::NEG_INFINITY) > results[best].auc.unwrap_or(f64::NEG_INFINITY) {
            best = i;
        }
    }
    Ok(PolicySummary {
        policy,
        mean_auc: aucs.iter().sum::<f64>() / aucs.len() as f64,
        mean_f1: results.iter().map(|r| r.f1.value).sum::<f64>() / results.len() as f64,
        best_fold: results[best].fold,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

fn metrics_rows(
    csv: &mut String,
    stage: Stage,
    arch: &str,
    balancing: &str,
    policy: Option<FreezePolicy>,
    rows: &[FoldMetrics],
    summary: &PolicySummary,
) {
    let pname = policy.map_or("none", FreezePolicy::name);
    for r in rows {
        let _ = writeln!(
            csv,
            "{},{arch},{balancing},{pname},{},{},{:.6},{}",
            stage.name(),
            r.fold,
            fmt_opt(r.auc_roc),
            r.f1,
            r.n_subjects
        );
    }
    let n: usize = rows.iter().map(|r| r.n_subjects).sum();
    let _ = writeln!(csv, "{},{arch},{balancing},{pname},mean,{:.6},{:.6},{n}", stage.name(), summary.mean_auc, summary.mean_f1);
}

/// Writes histories and checkpoints of one CV run and fills the record.
fn persist_cv(
    out: &mut OutputDir,
    rec: &mut ExperimentRecord,
    results: &[FoldResult],
    policy: Option<FreezePolicy>,
    windowing: WindowingConfig,
) -> Result<(Vec<FoldMetrics>, PolicySummary)> {
    let sub = policy.map(|p| format!("{}/", p.name())).unwrap_or_default();
    let mut metrics = Vec::new();
    for r in results {
        for m in &r.members {
            let history = format!("history/{sub}{}_{}.csv", r.fold, m.member);
            out.write(&history, m.outcome.history.to_csv().as_bytes())?;
            let checkpoint = format!("ckpt/{sub}fold{}_member{}.json", r.fold, m.member);
            let ck = Checkpoint::new(
                &m.outcome.model,
                &r.stats,
                windowing,
                Some(&m.outcome.optimizer),
                m.outcome.selected_epoch,
                m.outcome.optimizer.config.lr,
            );
            out.write(&checkpoint, ck.to_json()?.as_bytes())?;
            rec.runs.push(RunRecord {
                fold: r.fold,
                member: m.member,
                policy,
                history,
                checkpoint,
                epochs_run: m.outcome.history.epochs.len(),
                selected_epoch: m.outcome.selected_epoch,
                selected_val_auc: m.outcome.selected_val_auc,
                train_subjects: m.train_subjects,
            });
        }
        rec.resampling.push(r.plan.clone());
        metrics.push(FoldMetrics { fold: r.fold, policy, auc_roc: r.auc, f1: r.f1.value, n_subjects: r.scores.len() });
    }
    let summary = summarize(results, policy)?;
    rec.metrics.extend(metrics.iter().cloned());
    rec.summaries.push(summary.clone());
    Ok((metrics, summary))
}

fn mean_fold_auc(results: &[FoldResult]) -> Result<f64> {
    Ok(summarize(results, None)?.mean_auc)
}

// ---------------------------------------------------------------------------
// stages

pub(crate) fn run_synth(cfg: &ExperimentConfig, out: &mut OutputDir, rec: &mut ExperimentRecord) -> Result<()> {
    let synth = SynthConfig { seed: cfg.seed()?, ..cfg.data.synth.clone().unwrap_or_default() };
    let generated = generate_cohort(&synth)?;
    out.write("events.csv", &generated.events_csv)?;
    out.write("labels.csv", &generated.labels_csv)?;
    rec.subjects = synth.labels().into_iter().map(|(s, _)| s).collect();
    rec.config.data.synth = Some(synth);
    Ok(())
}

pub(crate) fn run_preprocess(cfg: &ExperimentConfig, out: &mut OutputDir, rec: &mut ExperimentRecord) -> Result<()> {
    let (parsed, labels) = if let Some(s) = &cfg.data.synth {
        let g = generate_cohort(s)?;
        (parse_event_log(&g.events_csv[..], cfg.task_kind)?, Some(parse_labels(&g.labels_csv[..])?))
    } else {
        let p = cfg.data.events.as_ref().expect("validated");
        let labels = cfg.data.labels.as_ref().map(|l| open(l).and_then(parse_labels)).transpose()?;
        (parse_event_log(open(p)?, cfg.task_kind)?, labels)
    };
    let (cohort, report) = events_to_signals(parsed, labels.as_deref().unwrap_or(&[]), cfg)?;
    let mut buf = Vec::new();
    write_signal_log(&cohort, &mut buf)?;
    out.write("signals.csv", &buf)?;
    if labels.is_some() {
        let kept = cohort.labels()?;
        let mut buf = Vec::new();
        write_labels(&kept, &mut buf)?;
        out.write("labels.csv", &buf)?;
    }
    out.write("validation_report.json", serde_json::to_string_pretty(&report)?.as_bytes())?;
    rec.subjects = cohort.subjects.iter().map(|s| s.id.clone()).collect();
    rec.validation_report = Some(report);
    Ok(())
}

/// Mean fold AUC for one hyper-parameter candidate.
fn evaluate_candidate(
    cfg: &ExperimentConfig,
    data: &LoadedCohort,
    folds: &FoldPlan,
    spec: &ModelSpec,
    h: &HyperConfig,
) -> Result<f64> {
    let setup = CvSetup {
        data,
        folds,
        windowing: WindowingConfig::new(h.window_size, h.stride)?,
        train: TrainConfig {
            lr: h.lr,
            batch_size: h.batch_size,
            epochs: cfg.search.epochs.unwrap_or(cfg.train.epochs),
            ..cfg.train.clone()
        },
        balance: &cfg.balance,
        aggregation: cfg.aggregation,
        seed: cfg.seed()?,
        stream: 1,
    };
    mean_fold_auc(&run_cv(&setup, &Init::Fresh(spec))?)
}

pub(crate) fn run_pretrain(cfg: &ExperimentConfig, out: &mut OutputDir, rec: &mut ExperimentRecord) -> Result<()> {
    let seed = cfg.seed()?;
    let data = load_cohort(cfg)?;
    rec.subjects = data.labels.iter().map(|(s, _)| s.clone()).collect();
    rec.validation_report = Some(data.report.clone());
    let folds = make_folds(&data.labels, cfg.folds, substream(seed, &[TAG_FOLDS]))?;
    rec.fold_plan = Some(folds.clone());
    let spec = cfg.model_spec(seed);

    let (hyper, trace) = if cfg.search.enabled {
        let (h, t) = forward_select(&cfg.search.resolved_space(), |h| evaluate_candidate(cfg, &data, &folds, &spec, h))?;
        (h, Some(t))
    } else {
        let h = HyperConfig {
            window_size: cfg.windowing.window_size,
            stride: cfg.windowing.stride,
            batch_size: cfg.train.batch_size,
            lr: cfg.train.lr,
        };
        (h, None)
    };
    let trace_csv = trace.clone().unwrap_or_default().to_csv(cfg.arch.name(), cfg.balance.strategy.name());
    out.write("trace.csv", trace_csv.as_bytes())?;
    rec.search = trace;
    rec.hyper = Some(hyper);
    let windowing = WindowingConfig::new(hyper.window_size, hyper.stride)?;
    rec.windowing = Some(windowing);
    rec.config.windowing = windowing;
    rec.config.train.lr = hyper.lr;
    rec.config.train.batch_size = hyper.batch_size;

    let setup = CvSetup {
        data: &data,
        folds: &folds,
        windowing,
        train: TrainConfig { lr: hyper.lr, batch_size: hyper.batch_size, ..cfg.train.clone() },
        balance: &cfg.balance,
        aggregation: cfg.aggregation,
        seed,
        stream: 0,
    };
    let results = run_cv(&setup, &Init::Fresh(&spec))?;
    let (metrics, summary) = persist_cv(out, rec, &results, None, windowing)?;
    let mut csv = format!("{METRICS_HEADER}\n");
    metrics_rows(&mut csv, Stage::Pretrain, cfg.arch.name(), cfg.balance.strategy.name(), None, &metrics, &summary);
    out.write("metrics.csv", csv.as_bytes())?;
    Ok(())
}

/// Checkpoints of the best fold of `policy` in an upstream record.
fn source_checkpoints(dir: &Path, src: &ExperimentRecord, policy: Option<FreezePolicy>) -> Result<(usize, Vec<Checkpoint<f64>>, Vec<String>)> {
    let summary = src
        .summaries
        .iter()
        .find(|s| s.policy == policy)
        .ok_or_else(|| Error::Config("source record has no summary for the selected policy".into()))?;
    let mut runs: Vec<&RunRecord> =
        src.runs.iter().filter(|r| r.fold == summary.best_fold && r.policy == policy).collect();
    runs.sort_by_key(|r| r.member);
    if runs.is_empty() {
        return Err(Error::Config("source record lists no checkpoints for its best fold".into()));
    }
    let paths: Vec<String> = runs.iter().map(|r| r.checkpoint.clone()).collect();
    let cks = paths.iter().map(|p| Checkpoint::load(&dir.join(p))).collect::<Result<Vec<_>>>()?;
    Ok((summary.best_fold, cks, paths))
}

fn load_source(cfg: &ExperimentConfig, expected: Stage) -> Result<(std::path::PathBuf, ExperimentRecord)> {
    let dir = cfg.source_record.clone().expect("validated");
    let src = load_record(&dir)?;
    if src.stage != expected || src.status != RunStatus::Completed {
        return Err(Error::Config(format!(
            "source record at {} is a {:?} {} run; expected a completed {} run",
            dir.display(),
            src.status,
            src.stage.name(),
            expected.name()
        )));
    }
    Ok((dir, src))
}

fn ensure_disjoint(current: &[(String, Label)], src: &ExperimentRecord) -> Result<Vec<String>> {
    let upstream: BTreeSet<String> = src.subjects.iter().chain(&src.upstream_subjects).cloned().collect();
    if let Some((s, _)) = current.iter().find(|(s, _)| upstream.contains(s)) {
        return Err(Error::Data(format!("subject `{s}` also appears in an upstream stage")));
    }
    Ok(upstream.into_iter().collect())
}

pub(crate) fn run_finetune(cfg: &ExperimentConfig, out: &mut OutputDir, rec: &mut ExperimentRecord) -> Result<()> {
    let seed = cfg.seed()?;
    let (dir, src) = load_source(cfg, Stage::Pretrain)?;
    let (fold, cks, paths) = source_checkpoints(&dir, &src, None)?;
    let data = load_cohort(cfg)?;
    rec.upstream_subjects = ensure_disjoint(&data.labels, &src)?;
    rec.subjects = data.labels.iter().map(|(s, _)| s.clone()).collect();
    rec.validation_report = Some(data.report.clone());

    let windowing = cks[0].windowing;
    let lr = cfg.finetune.lr.unwrap_or_else(|| fine_tune_lr(cks[0].lr));
    let batch_size = src.hyper.map_or(cfg.train.batch_size, |h| h.batch_size);
    let arch = cks[0].spec.arch;
    rec.config.arch = arch;
    rec.config.windowing = windowing;
    rec.config.finetune.lr = Some(lr);
    rec.config.train.lr = lr;
    rec.config.train.batch_size = batch_size;
    rec.config.balance = src.config.balance.clone();
    rec.windowing = Some(windowing);
    rec.source = Some(SourceRef { record: dir, stage: Stage::Pretrain, fold, policy: None, checkpoints: paths });

    let folds = make_folds(&data.labels, cfg.folds, substream(seed, &[TAG_FOLDS]))?;
    rec.fold_plan = Some(folds.clone());
    let models: Vec<Model<f64>> = cks.iter().map(Checkpoint::model).collect();
    let mut policies = cfg.finetune.policies.clone();
    policies.sort();
    policies.dedup();

    let mut csv = format!("{METRICS_HEADER}\n");
    for policy in &policies {
        let setup = CvSetup {
            data: &data,
            folds: &folds,
            windowing,
            train: TrainConfig { lr, batch_size, ..cfg.train.clone() },
            balance: &src.config.balance,
            aggregation: cfg.aggregation,
            seed,
            stream: 10 + *policy as u64,
        };
        let results = run_cv(&setup, &Init::FromSource { models: &models, policy: *policy })?;
        let (metrics, summary) = persist_cv(out, rec, &results, Some(*policy), windowing)?;
        metrics_rows(&mut csv, Stage::Finetune, arch.name(), src.config.balance.strategy.name(), Some(*policy), &metrics, &summary);
    }
    // Policies are in declaration order (full first), so ties go to full fine-tuning.
    let mut selected = &rec.summaries[0];
    for s in &rec.summaries[1..] {
        if s.mean_auc > selected.mean_auc {
            selected = s;
        }
    }
    rec.selected_policy = selected.policy;
    out.write("metrics.csv", csv.as_bytes())?;
    Ok(())
}

pub(crate) fn run_external(cfg: &ExperimentConfig, out: &mut OutputDir, rec: &mut ExperimentRecord) -> Result<()> {
    let (dir, src) = load_source(cfg, Stage::Finetune)?;
    let policy = src.selected_policy;
    let (fold, cks, paths) = source_checkpoints(&dir, &src, policy)?;
    let data = load_cohort(cfg)?;
    rec.upstream_subjects = ensure_disjoint(&data.labels, &src)?;
    rec.subjects = data.labels.iter().map(|(s, _)| s.clone()).collect();
    rec.validation_report = Some(data.report.clone());
    let arch = cks[0].spec.arch;
    rec.config.arch = arch;
    rec.config.windowing = cks[0].windowing;
    rec.config.balance = src.config.balance.clone();
    rec.windowing = Some(cks[0].windowing);
    rec.selected_policy = policy;
    rec.source = Some(SourceRef { record: dir, stage: Stage::Finetune, fold, policy, checkpoints: paths });

    let mut before = Vec::new();
    let mut after = Vec::new();
    let mut maps = Vec::new();
    for ck in &cks {
        let model = ck.model();
        before.push(model.params.digest());
        let ds = prepare_eval(&data.cohort, &data.labels, &ck.windowing, &ck.stats)?;
        let agg = patient_scores(&model, &ds, cfg.aggregation)?;
        after.push(model.params.digest());
        maps.push(agg.scores.into_iter().map(|s| (s.subject_id, s.probability)).collect::<BTreeMap<_, _>>());
    }
    let digest = |d: &[String]| sha256_hex(d.join(",").as_bytes());
    rec.param_digest_before = Some(digest(&before));
    rec.param_digest_after = Some(digest(&after));
    if before != after {
        return Err(Error::Internal("model parameters changed during external validation".into()));
    }
    let ensemble = ensemble_aggregate(&maps)?;
    let scores = scores_from_map(&ensemble, &data.labels);
    let auc = auc_or_none(&scores)?;
    let f1 = f1(&scores, 0.5);

    let mut pred = String::from("subject_id,label,probability\n");
    for s in &scores {
        let _ = writeln!(pred, "{},{},{}", s.subject_id, s.label.bit(), s.probability);
    }
    out.write("predictions.csv", pred.as_bytes())?;
    let row = FoldMetrics { fold, policy, auc_roc: auc, f1: f1.value, n_subjects: scores.len() };
    rec.metrics.push(row.clone());
    let summary = PolicySummary { policy, mean_auc: auc.unwrap_or(f64::NAN), mean_f1: f1.value, best_fold: fold };
    rec.summaries.push(summary.clone());
    let mut csv = format!("{METRICS_HEADER}\n");
    let pname = policy.map_or("none", FreezePolicy::name);
    let _ = writeln!(
        csv,
        "{},{},{},{pname},{fold},{},{:.6},{}",
        Stage::ExternalValidate.name(),
        arch.name(),
        src.config.balance.strategy.name(),
        fmt_opt(auc),
        f1.value,
        scores.len()
    );
    out.write("metrics.csv", csv.as_bytes())?;
    if auc.is_none() {
        return Err(Error::UndefinedMetric(format!(
            "external cohort has a single class; F1 = {:.6} was still reported",
            f1.value
        )));
    }
    Ok(())
}
