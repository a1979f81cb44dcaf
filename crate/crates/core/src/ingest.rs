//! Canonical keystroke log formats and cohort containers.
//!
//! Two CSV schemas are accepted: raw press/release events
//! (`subject_id,session_id,key_id,press_ts,release_ts`) and pre-derived
//! signals (`subject_id,session_id,step,ht,ft,pp,rr`). Labels live in a
//! separate `subject_id,label` file. Timestamps are seconds relative to an
//! arbitrary per-session origin.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signals::SignalSequence;

pub const EVENT_HEADER: [&str; 5] = ["subject_id", "session_id", "key_id", "press_ts", "release_ts"];
pub const SIGNAL_HEADER: [&str; 7] = ["subject_id", "session_id", "step", "ht", "ft", "pp", "rr"];
pub const LABEL_HEADER: [&str; 2] = ["subject_id", "label"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Control,
    Parkinson,
}

impl Label {
    pub fn from_bit(bit: u8) -> Option<Self> {
        match bit {
            0 => Some(Label::Control),
            1 => Some(Label::Parkinson),
            _ => None,
        }
    }

    pub fn bit(self) -> u8 {
        match self {
            Label::Control => 0,
            Label::Parkinson => 1,
        }
    }

    pub fn is_positive(self) -> bool {
        self == Label::Parkinson
    }

    pub fn other(self) -> Self {
        match self {
            Label::Control => Label::Parkinson,
            Label::Parkinson => Label::Control,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    FixedText,
    FreeText,
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::FixedText => "fixed_text",
            TaskKind::FreeText => "free_text",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeyEvent {
    pub key_id: String,
    pub press_ts: f64,
    pub release_ts: f64,
}

impl KeyEvent {
    pub fn new(key_id: impl Into<String>, press_ts: f64, release_ts: f64) -> Self {
        Self { key_id: key_id.into(), press_ts, release_ts }
    }

    pub fn hold(&self) -> f64 {
        self.release_ts - self.press_ts
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionEvents {
    pub subject_id: String,
    pub session_id: String,
    pub task_kind: TaskKind,
    pub events: Vec<KeyEvent>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Subject<S> {
    pub id: String,
    pub label: Option<Label>,
    pub sessions: Vec<S>,
}

/// Subjects in first-appearance order, each with its sessions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cohort<S> {
    pub subjects: Vec<Subject<S>>,
}

pub type EventCohort = Cohort<SessionEvents>;
pub type SignalCohort = Cohort<SignalSequence>;

impl<S> Default for Cohort<S> {
    fn default() -> Self {
        Self { subjects: Vec::new() }
    }
}

impl<S> Cohort<S> {
    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    pub fn session_count(&self) -> usize {
        self.subjects.iter().map(|s| s.sessions.len()).sum()
    }

    pub fn subject(&self, id: &str) -> Option<&Subject<S>> {
        self.subjects.iter().find(|s| s.id == id)
    }

    /// Assigns labels by subject id. Subjects absent from `labels` keep `None`.
    pub fn attach_labels(&mut self, labels: &[(String, Label)]) {
        let map: HashMap<&str, Label> = labels.iter().map(|(id, l)| (id.as_str(), *l)).collect();
        for subject in &mut self.subjects {
            if let Some(l) = map.get(subject.id.as_str()) {
                subject.label = Some(*l);
            }
        }
    }

    /// `(subject_id, label)` pairs in cohort order; fails if any subject is unlabeled.
    pub fn labels(&self) -> Result<Vec<(String, Label)>> {
        self.subjects
            .iter()
            .map(|s| {
                s.label
                    .map(|l| (s.id.clone(), l))
                    .ok_or_else(|| Error::Data(format!("subject `{}` has no label", s.id)))
            })
            .collect()
    }

    /// Number of (control, parkinson) subjects among labeled subjects.
    pub fn label_counts(&self) -> (usize, usize) {
        self.subjects.iter().fold((0, 0), |(hc, pd), s| match s.label {
            Some(Label::Control) => (hc + 1, pd),
            Some(Label::Parkinson) => (hc, pd + 1),
            None => (hc, pd),
        })
    }

    /// Keeps only subjects whose id is in `ids`, preserving order.
    pub fn restrict(&self, ids: &HashSet<&str>) -> Self
    where
        S: Clone,
    {
        Self {
            subjects: self.subjects.iter().filter(|s| ids.contains(s.id.as_str())).cloned().collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    Unsorted,
    NegativeHold,
    Empty,
    DuplicateId,
    InvalidTimestamp,
    RaggedChannels,
    MissingLabel,
    TooShort,
    SlowTyping,
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            RejectReason::Unsorted => "unsorted",
            RejectReason::NegativeHold => "negative hold",
            RejectReason::Empty => "empty",
            RejectReason::DuplicateId => "duplicate id",
            RejectReason::InvalidTimestamp => "invalid timestamp",
            RejectReason::RaggedChannels => "ragged channels",
            RejectReason::MissingLabel => "missing label",
            RejectReason::TooShort => "too short",
            RejectReason::SlowTyping => "slow typing",
        };
        f.write_str(s)
    }
}

/// Audit counters. `accepted_sessions + rejected_sessions == offered_sessions`
/// and `accepted_rows + rejected_rows` equals the number of data rows read.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub offered_sessions: usize,
    pub accepted_sessions: usize,
    pub rejected_sessions: usize,
    pub accepted_rows: usize,
    pub rejected_rows: usize,
    pub reasons: BTreeMap<RejectReason, usize>,
}

impl ValidationReport {
    pub fn count(&self, reason: RejectReason) -> usize {
        self.reasons.get(&reason).copied().unwrap_or(0)
    }

    pub fn record(&mut self, reason: RejectReason) {
        *self.reasons.entry(reason).or_default() += 1;
    }

    pub fn total_rejections(&self) -> usize {
        self.reasons.values().sum()
    }

    pub fn merge(&mut self, other: &ValidationReport) {
        self.offered_sessions += other.offered_sessions;
        self.accepted_sessions += other.accepted_sessions;
        self.rejected_sessions += other.rejected_sessions;
        self.accepted_rows += other.accepted_rows;
        self.rejected_rows += other.rejected_rows;
        for (r, n) in &other.reasons {
            *self.reasons.entry(*r).or_default() += n;
        }
    }
}

#[derive(Clone, Debug)]
pub struct Parsed<S> {
    pub cohort: Cohort<S>,
    pub report: ValidationReport,
}

fn check_header(headers: &csv::StringRecord, expected: &[&str]) -> Result<HashMap<String, usize>> {
    let index: HashMap<String, usize> =
        headers.iter().enumerate().map(|(i, h)| (h.trim().to_string(), i)).collect();
    for col in expected {
        if !index.contains_key(*col) {
            return Err(Error::Parse { line: 1, msg: format!("missing column `{col}`") });
        }
    }
    Ok(index)
}

fn record_line(rec: &csv::StringRecord) -> u64 {
    rec.position().map(|p| p.line()).unwrap_or(0)
}

fn csv_error(e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    Error::Parse { line, msg: e.to_string() }
}

fn parse_f64(rec: &csv::StringRecord, idx: usize, name: &str) -> Result<f64> {
    let raw = rec.get(idx).unwrap_or("").trim();
    raw.parse::<f64>().map_err(|_| Error::Parse {
        line: record_line(rec),
        msg: format!("column `{name}`: `{raw}` is not a number"),
    })
}

fn parse_opt_f64(rec: &csv::StringRecord, idx: usize, name: &str) -> Result<Option<f64>> {
    match rec.get(idx).map(str::trim) {
        None | Some("") => Ok(None),
        Some(_) => parse_f64(rec, idx, name).map(Some),
    }
}

fn reader<R: Read>(source: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(source)
}

/// Ordered grouping by subject then session, both in first-appearance order.
struct Grouper<T> {
    subjects: Vec<(String, Vec<(String, Vec<T>)>)>,
    subject_index: HashMap<String, usize>,
    session_index: HashMap<(String, String), (usize, usize)>,
}

impl<T> Grouper<T> {
    fn new() -> Self {
        Self { subjects: Vec::new(), subject_index: HashMap::new(), session_index: HashMap::new() }
    }

    fn slot(&mut self, subject: &str, session: &str) -> &mut Vec<T> {
        let key = (subject.to_string(), session.to_string());
        let (si, ji) = match self.session_index.get(&key) {
            Some(&pos) => pos,
            None => {
                let si = match self.subject_index.get(subject) {
                    Some(&si) => si,
                    None => {
                        self.subjects.push((subject.to_string(), Vec::new()));
                        self.subject_index.insert(subject.to_string(), self.subjects.len() - 1);
                        self.subjects.len() - 1
                    }
                };
                self.subjects[si].1.push((session.to_string(), Vec::new()));
                let pos = (si, self.subjects[si].1.len() - 1);
                self.session_index.insert(key, pos);
                pos
            }
        };
        &mut self.subjects[si].1[ji].1
    }
}

/// Parses the canonical event CSV. Rows are grouped by `(subject_id, session_id)`
/// and events sorted by press time. Rows with a release before the press, or a
/// negative/non-finite press, are rejected individually and counted.
pub fn parse_event_log<R: Read>(source: R, task_kind: TaskKind) -> Result<Parsed<SessionEvents>> {
    let mut rdr = reader(source);
    let headers = rdr.headers().map_err(csv_error)?.clone();
    let idx = check_header(&headers, &EVENT_HEADER)?;
    let (c_sub, c_ses, c_key, c_press, c_rel) =
        (idx["subject_id"], idx["session_id"], idx["key_id"], idx["press_ts"], idx["release_ts"]);

    let mut report = ValidationReport::default();
    let mut groups: Grouper<KeyEvent> = Grouper::new();
    // Sessions seen at all, including those whose every row was rejected.
    let mut seen_sessions: Vec<(String, String)> = Vec::new();
    let mut seen_set: HashSet<(String, String)> = HashSet::new();

    for rec in rdr.records() {
        let rec = rec.map_err(csv_error)?;
        let subject = rec.get(c_sub).unwrap_or("").to_string();
        let session = rec.get(c_ses).unwrap_or("").to_string();
        if subject.is_empty() || session.is_empty() {
            return Err(Error::Parse { line: record_line(&rec), msg: "empty subject or session id".into() });
        }
        let press = parse_f64(&rec, c_press, "press_ts")?;
        let release = parse_f64(&rec, c_rel, "release_ts")?;
        let key = (subject.clone(), session.clone());
        if seen_set.insert(key.clone()) {
            seen_sessions.push(key);
        }
        if !press.is_finite() || !release.is_finite() || press < 0.0 {
            report.rejected_rows += 1;
            report.record(RejectReason::InvalidTimestamp);
            continue;
        }
        if release < press {
            report.rejected_rows += 1;
            report.record(RejectReason::NegativeHold);
            continue;
        }
        report.accepted_rows += 1;
        groups
            .slot(&subject, &session)
            .push(KeyEvent::new(rec.get(c_key).unwrap_or(""), press, release));
    }

    report.offered_sessions = seen_sessions.len();
    let mut cohort = Cohort::default();
    for (subject_id, sessions) in groups.subjects {
        let mut subject = Subject { id: subject_id.clone(), label: None, sessions: Vec::new() };
        for (session_id, mut events) in sessions {
            events.sort_by(|a, b| a.press_ts.total_cmp(&b.press_ts));
            subject.sessions.push(SessionEvents {
                subject_id: subject_id.clone(),
                session_id,
                task_kind,
                events,
            });
        }
        cohort.subjects.push(subject);
    }
    report.accepted_sessions = cohort.session_count();
    report.rejected_sessions = report.offered_sessions - report.accepted_sessions;
    for _ in 0..report.rejected_sessions {
        report.record(RejectReason::Empty);
    }
    Ok(Parsed { cohort, report })
}

/// Parses the canonical signal CSV. A missing `rr` channel is rebuilt as
/// `ht + ft`; channels of unequal length reject the whole session.
pub fn parse_signal_log<R: Read>(source: R) -> Result<Parsed<SignalSequence>> {
    struct Row {
        step: i64,
        ht: Option<f64>,
        ft: Option<f64>,
        pp: Option<f64>,
        rr: Option<f64>,
    }

    let mut rdr = reader(source);
    let headers = rdr.headers().map_err(csv_error)?.clone();
    let idx = check_header(&headers, &SIGNAL_HEADER[..6])?;
    let c_rr = idx.get("rr").copied();

    let mut report = ValidationReport::default();
    let mut groups: Grouper<Row> = Grouper::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_error)?;
        let line = record_line(&rec);
        let subject = rec.get(idx["subject_id"]).unwrap_or("");
        let session = rec.get(idx["session_id"]).unwrap_or("");
        if subject.is_empty() || session.is_empty() {
            return Err(Error::Parse { line, msg: "empty subject or session id".into() });
        }
        let step_raw = rec.get(idx["step"]).unwrap_or("");
        let step = step_raw
            .parse::<i64>()
            .map_err(|_| Error::Parse { line, msg: format!("column `step`: `{step_raw}` is not an integer") })?;
        let row = Row {
            step,
            ht: parse_opt_f64(&rec, idx["ht"], "ht")?,
            ft: parse_opt_f64(&rec, idx["ft"], "ft")?,
            pp: parse_opt_f64(&rec, idx["pp"], "pp")?,
            rr: match c_rr {
                Some(c) => parse_opt_f64(&rec, c, "rr")?,
                None => None,
            },
        };
        groups.slot(subject, session).push(row);
    }

    let mut cohort = Cohort::default();
    for (subject_id, sessions) in groups.subjects {
        let mut subject = Subject { id: subject_id.clone(), label: None, sessions: Vec::new() };
        for (session_id, mut rows) in sessions {
            report.offered_sessions += 1;
            let n_rows = rows.len();
            rows.sort_by_key(|r| r.step);
            let ht: Vec<f64> = rows.iter().filter_map(|r| r.ht).collect();
            let ft: Vec<f64> = rows.iter().filter_map(|r| r.ft).collect();
            let pp: Vec<f64> = rows.iter().filter_map(|r| r.pp).collect();
            let rr_given: Vec<f64> = rows.iter().filter_map(|r| r.rr).collect();
            let ragged = ht.len() != ft.len() || ht.len() != pp.len();
            let rr = if rr_given.is_empty() && !ragged {
                ht.iter().zip(&ft).map(|(h, f)| h + f).collect()
            } else {
                rr_given
            };
            if ragged || rr.len() != ht.len() {
                report.rejected_sessions += 1;
                report.rejected_rows += n_rows;
                report.record(RejectReason::RaggedChannels);
                continue;
            }
            if ht.is_empty() {
                report.rejected_sessions += 1;
                report.rejected_rows += n_rows;
                report.record(RejectReason::Empty);
                continue;
            }
            report.accepted_sessions += 1;
            report.accepted_rows += n_rows;
            subject.sessions.push(SignalSequence {
                subject_id: subject_id.clone(),
                session_id,
                ht,
                ft,
                pp,
                rr,
            });
        }
        if !subject.sessions.is_empty() {
            cohort.subjects.push(subject);
        }
    }
    Ok(Parsed { cohort, report })
}

/// Parses `subject_id,label` with labels in {0, 1}; order is preserved.
pub fn parse_labels<R: Read>(source: R) -> Result<Vec<(String, Label)>> {
    let mut rdr = reader(source);
    let headers = rdr.headers().map_err(csv_error)?.clone();
    let idx = check_header(&headers, &LABEL_HEADER)?;
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_error)?;
        let line = record_line(&rec);
        let id = rec.get(idx["subject_id"]).unwrap_or("").to_string();
        let raw = rec.get(idx["label"]).unwrap_or("");
        let label = raw
            .parse::<u8>()
            .ok()
            .and_then(Label::from_bit)
            .ok_or_else(|| Error::Parse { line, msg: format!("label `{raw}` is not 0 or 1") })?;
        if !seen.insert(id.clone()) {
            return Err(Error::Parse { line, msg: format!("duplicate label for subject `{id}`") });
        }
        out.push((id, label));
    }
    Ok(out)
}

pub fn write_event_log<W: Write>(cohort: &EventCohort, sink: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(sink);
    w.write_record(EVENT_HEADER)?;
    for subject in &cohort.subjects {
        for session in &subject.sessions {
            for e in &session.events {
                w.write_record([
                    subject.id.as_str(),
                    session.session_id.as_str(),
                    e.key_id.as_str(),
                    &e.press_ts.to_string(),
                    &e.release_ts.to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_signal_log<W: Write>(cohort: &SignalCohort, sink: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(sink);
    w.write_record(SIGNAL_HEADER)?;
    for subject in &cohort.subjects {
        for s in &subject.sessions {
            for i in 0..s.len() {
                w.write_record([
                    subject.id.as_str(),
                    s.session_id.as_str(),
                    &i.to_string(),
                    &s.ht[i].to_string(),
                    &s.ft[i].to_string(),
                    &s.pp[i].to_string(),
                    &s.rr[i].to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_labels<W: Write>(labels: &[(String, Label)], sink: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(sink);
    w.write_record(LABEL_HEADER)?;
    for (id, l) in labels {
        w.write_record([id.as_str(), &l.bit().to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Per-session invariant checks used by [`validate_cohort`].
pub trait SessionAudit {
    fn audit(&self) -> Vec<RejectReason>;
    fn row_count(&self) -> usize;
}

impl SessionAudit for SessionEvents {
    fn audit(&self) -> Vec<RejectReason> {
        let mut reasons = Vec::new();
        if self.events.is_empty() {
            reasons.push(RejectReason::Empty);
            return reasons;
        }
        if self.events.iter().any(|e| !e.press_ts.is_finite() || !e.release_ts.is_finite() || e.press_ts < 0.0) {
            reasons.push(RejectReason::InvalidTimestamp);
        }
        if self.events.windows(2).any(|w| w[1].press_ts < w[0].press_ts) {
            reasons.push(RejectReason::Unsorted);
        }
        if self.events.iter().any(|e| e.release_ts < e.press_ts) {
            reasons.push(RejectReason::NegativeHold);
        }
        reasons
    }

    fn row_count(&self) -> usize {
        self.events.len()
    }
}

impl SessionAudit for SignalSequence {
    fn audit(&self) -> Vec<RejectReason> {
        let n = self.ht.len();
        if self.ft.len() != n || self.pp.len() != n || self.rr.len() != n {
            return vec![RejectReason::RaggedChannels];
        }
        let mut reasons = Vec::new();
        if n == 0 {
            reasons.push(RejectReason::Empty);
        }
        if self.ht.iter().any(|&h| h < 0.0) {
            reasons.push(RejectReason::NegativeHold);
        }
        if self.ht.iter().chain(&self.ft).chain(&self.pp).chain(&self.rr).any(|v| !v.is_finite()) {
            reasons.push(RejectReason::InvalidTimestamp);
        }
        reasons
    }

    fn row_count(&self) -> usize {
        self.ht.len()
    }
}

/// Audits a cohort without modifying it. Each breach is counted once per
/// offending session (or per repeated subject id / unlabeled subject).
pub fn validate_cohort<S: SessionAudit>(cohort: &Cohort<S>) -> ValidationReport {
    let mut report = ValidationReport::default();
    let mut ids = HashSet::new();
    for subject in &cohort.subjects {
        if !ids.insert(subject.id.as_str()) {
            report.record(RejectReason::DuplicateId);
        }
        if subject.label.is_none() {
            report.record(RejectReason::MissingLabel);
        }
        for session in &subject.sessions {
            report.offered_sessions += 1;
            let reasons = session.audit();
            if reasons.is_empty() {
                report.accepted_sessions += 1;
                report.accepted_rows += session.row_count();
            } else {
                report.rejected_sessions += 1;
                report.rejected_rows += session.row_count();
                for r in reasons {
                    report.record(r);
                }
            }
        }
    }
    report
}
