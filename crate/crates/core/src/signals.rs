//! Timing channels derived from press/release events, plus the task-dependent
//! cleaning and session segmentation rules.
//!
//! Step `i` describes the digraph formed by events `i` and `i + 1`:
//! hold of the second key, flight from the first release to the second press,
//! press-to-press and release-to-release intervals. The first key's hold time
//! has no digraph and is dropped, so every channel has `events - 1` steps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{Cohort, RejectReason, SessionEvents, Subject, TaskKind, ValidationReport};

pub const CHANNELS: usize = 4;
pub const CHANNEL_NAMES: [&str; CHANNELS] = ["ht", "ft", "pp", "rr"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignalSequence {
    pub subject_id: String,
    pub session_id: String,
    pub ht: Vec<f64>,
    pub ft: Vec<f64>,
    pub pp: Vec<f64>,
    pub rr: Vec<f64>,
}

impl SignalSequence {
    pub fn len(&self) -> usize {
        self.ht.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ht.is_empty()
    }

    pub fn is_aligned(&self) -> bool {
        let n = self.ht.len();
        self.ft.len() == n && self.pp.len() == n && self.rr.len() == n
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        match c {
            0 => &self.ht,
            1 => &self.ft,
            2 => &self.pp,
            3 => &self.rr,
            _ => panic!("channel index {c} out of range"),
        }
    }

    /// Value at `(step, channel)` in (ht, ft, pp, rr) order.
    #[inline]
    pub fn at(&self, step: usize, c: usize) -> f64 {
        self.channel(c)[step]
    }

    fn retain_steps(&self, keep: impl Fn(usize) -> bool) -> Self {
        let pick = |v: &[f64]| v.iter().enumerate().filter(|(i, _)| keep(*i)).map(|(_, x)| *x).collect();
        Self {
            subject_id: self.subject_id.clone(),
            session_id: self.session_id.clone(),
            ht: pick(&self.ht),
            ft: pick(&self.ft),
            pp: pick(&self.pp),
            rr: pick(&self.rr),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CleaningConfig {
    /// Characters per minute below which a fixed-text session is discarded.
    pub min_typing_rate: f64,
    /// Flight times above this many seconds are outliers.
    pub ft_outlier_cap: f64,
    /// Pause in seconds that starts a new session when segmentation is enabled.
    pub session_gap: f64,
    pub task_kind: TaskKind,
}

impl CleaningConfig {
    pub fn new(task_kind: TaskKind) -> Self {
        Self { min_typing_rate: 20.0, ft_outlier_cap: 3.0, session_gap: 30.0, task_kind }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("min_typing_rate", self.min_typing_rate),
            ("ft_outlier_cap", self.ft_outlier_cap),
            ("session_gap", self.session_gap),
        ] {
            if !(v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

pub fn derive_signals(s: &SessionEvents) -> Result<SignalSequence> {
    if s.events.len() < 2 {
        return Err(Error::Data(format!(
            "session `{}/{}` has {} event(s); at least 2 are needed",
            s.subject_id,
            s.session_id,
            s.events.len()
        )));
    }
    let n = s.events.len() - 1;
    let mut out = SignalSequence {
        subject_id: s.subject_id.clone(),
        session_id: s.session_id.clone(),
        ht: Vec::with_capacity(n),
        ft: Vec::with_capacity(n),
        pp: Vec::with_capacity(n),
        rr: Vec::with_capacity(n),
    };
    for pair in s.events.windows(2) {
        let (prev, cur) = (&pair[0], &pair[1]);
        out.ht.push(cur.release_ts - cur.press_ts);
        out.ft.push(cur.press_ts - prev.release_ts);
        out.pp.push(cur.press_ts - prev.press_ts);
        out.rr.push(cur.release_ts - prev.release_ts);
    }
    Ok(out)
}

/// Characters per minute, measured from first to last press.
/// A zero-length span yields `+inf`.
pub fn typing_rate(s: &SessionEvents) -> Result<f64> {
    let n = s.events.len();
    if n < 2 {
        return Err(Error::Data(format!("typing rate undefined for {n} event(s)")));
    }
    let span = s.events[n - 1].press_ts - s.events[0].press_ts;
    if span <= 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(n as f64 / (span / 60.0))
}

#[derive(Clone, Debug, PartialEq)]
pub enum Cleaned {
    Kept(SignalSequence),
    Rejected(RejectReason),
}

impl Cleaned {
    pub fn kept(self) -> Option<SignalSequence> {
        match self {
            Cleaned::Kept(s) => Some(s),
            Cleaned::Rejected(_) => None,
        }
    }
}

/// Fixed-text cleaning: reject slow sessions outright, then drop every step
/// whose flight time exceeds the cap from all four channels.
pub fn clean_fixed_text(seq: &SignalSequence, src: &SessionEvents, cfg: &CleaningConfig) -> Result<Cleaned> {
    if cfg.task_kind != TaskKind::FixedText {
        return Err(Error::Config("fixed-text cleaning applied to a free-text configuration".into()));
    }
    cfg.validate()?;
    if typing_rate(src)? < cfg.min_typing_rate {
        return Ok(Cleaned::Rejected(RejectReason::SlowTyping));
    }
    let cleaned = seq.retain_steps(|i| !(seq.ft[i] > cfg.ft_outlier_cap));
    if cleaned.is_empty() {
        return Ok(Cleaned::Rejected(RejectReason::Empty));
    }
    Ok(Cleaned::Kept(cleaned))
}

/// Free-text sessions are left untouched.
pub fn clean_free_text(seq: SignalSequence) -> SignalSequence {
    seq
}

/// Splits a session wherever consecutive presses are more than `gap` seconds
/// apart. Split segments get `#<k>` appended to the session id; an unsplit
/// session is returned as-is.
pub fn segment_sessions(s: &SessionEvents, gap: f64) -> Vec<SessionEvents> {
    let mut cuts = vec![0];
    for (i, pair) in s.events.windows(2).enumerate() {
        if pair[1].press_ts - pair[0].press_ts > gap {
            cuts.push(i + 1);
        }
    }
    if cuts.len() == 1 {
        return vec![s.clone()];
    }
    cuts.push(s.events.len());
    cuts.windows(2)
        .enumerate()
        .map(|(k, w)| SessionEvents {
            subject_id: s.subject_id.clone(),
            session_id: format!("{}#{k}", s.session_id),
            task_kind: s.task_kind,
            events: s.events[w[0]..w[1]].to_vec(),
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub cleaning: CleaningConfig,
    /// Apply pause-based segmentation before deriving signals.
    pub segment: bool,
}

impl PreprocessConfig {
    pub fn new(task_kind: TaskKind) -> Self {
        Self { cleaning: CleaningConfig::new(task_kind), segment: false }
    }
}

#[derive(Clone, Debug)]
pub struct Preprocessed {
    pub cohort: Cohort<SignalSequence>,
    pub report: ValidationReport,
    /// Labeled subjects that lost every session.
    pub dropped_subjects: Vec<String>,
}

/// Segmentation (optional), signal derivation and task-dependent cleaning
/// for a whole cohort.
pub fn preprocess(cohort: &Cohort<SessionEvents>, cfg: &PreprocessConfig) -> Result<Preprocessed> {
    cfg.cleaning.validate()?;
    let mut report = ValidationReport::default();
    let mut out = Cohort::default();
    let mut dropped = Vec::new();
    for subject in &cohort.subjects {
        let mut sessions = Vec::new();
        for raw in &subject.sessions {
            let segments =
                if cfg.segment { segment_sessions(raw, cfg.cleaning.session_gap) } else { vec![raw.clone()] };
            for seg in segments {
                report.offered_sessions += 1;
                if seg.events.len() < 2 {
                    report.rejected_sessions += 1;
                    report.rejected_rows += seg.events.len();
                    report.record(RejectReason::TooShort);
                    continue;
                }
                let seq = derive_signals(&seg)?;
                let cleaned = match cfg.cleaning.task_kind {
                    TaskKind::FixedText => clean_fixed_text(&seq, &seg, &cfg.cleaning)?,
                    TaskKind::FreeText => Cleaned::Kept(clean_free_text(seq)),
                };
                match cleaned {
                    Cleaned::Kept(s) => {
                        report.accepted_sessions += 1;
                        report.accepted_rows += seg.events.len();
                        sessions.push(s);
                    }
                    Cleaned::Rejected(reason) => {
                        report.rejected_sessions += 1;
                        report.rejected_rows += seg.events.len();
                        report.record(reason);
                    }
                }
            }
        }
        if sessions.is_empty() {
            dropped.push(subject.id.clone());
        } else {
            out.subjects.push(Subject { id: subject.id.clone(), label: subject.label, sessions });
        }
    }
    Ok(Preprocessed { cohort: out, report, dropped_subjects: dropped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::KeyEvent;

    fn session(kind: TaskKind, ev: &[(f64, f64)]) -> SessionEvents {
        SessionEvents {
            subject_id: "s".into(),
            session_id: "x".into(),
            task_kind: kind,
            events: ev.iter().map(|&(p, r)| KeyEvent::new("k", p, r)).collect(),
        }
    }

    fn seq(ft: &[f64]) -> SignalSequence {
        SignalSequence {
            subject_id: "s".into(),
            session_id: "x".into(),
            ht: vec![0.1; ft.len()],
            ft: ft.to_vec(),
            pp: ft.iter().map(|f| f + 0.1).collect(),
            rr: ft.iter().map(|f| f + 0.1).collect(),
        }
    }

    /// `n` events evenly spread over `span` seconds.
    fn paced(n: usize, span: f64) -> SessionEvents {
        let step = span / (n - 1) as f64;
        session(TaskKind::FixedText, &(0..n).map(|i| (i as f64 * step, i as f64 * step + 0.05)).collect::<Vec<_>>())
    }

    #[test]
    fn single_digraph() {
        let s = derive_signals(&session(TaskKind::FreeText, &[(0.0, 0.1), (0.3, 0.45)])).unwrap();
        assert!((s.ht[0] - 0.15).abs() < 1e-12);
        assert!((s.ft[0] - 0.2).abs() < 1e-12);
        assert!((s.pp[0] - 0.3).abs() < 1e-12);
        assert!((s.rr[0] - 0.35).abs() < 1e-12);
    }

    #[test]
    fn rollover_flight_is_negative() {
        let s = derive_signals(&session(TaskKind::FreeText, &[(0.0, 0.5), (0.2, 0.6)])).unwrap();
        assert!((s.ft[0] + 0.3).abs() < 1e-12);
    }

    #[test]
    fn one_event_is_an_error() {
        assert!(derive_signals(&session(TaskKind::FreeText, &[(0.0, 0.1)])).is_err());
        assert!(typing_rate(&session(TaskKind::FreeText, &[(0.0, 0.1)])).is_err());
    }

    #[test]
    fn typing_rates() {
        assert!((typing_rate(&paced(40, 60.0)).unwrap() - 40.0).abs() < 1e-9);
        assert!((typing_rate(&paced(10, 60.0)).unwrap() - 10.0).abs() < 1e-9);
        let same = session(TaskKind::FreeText, &[(1.0, 1.1), (1.0, 1.2)]);
        assert_eq!(typing_rate(&same).unwrap(), f64::INFINITY);
    }

    #[test]
    fn fixed_text_drops_long_flights() {
        let cfg = CleaningConfig::new(TaskKind::FixedText);
        let src = paced(40, 60.0);
        let out = clean_fixed_text(&seq(&[0.2, 3.5, 0.4]), &src, &cfg).unwrap().kept().unwrap();
        assert_eq!(out.ft, vec![0.2, 0.4]);
        assert_eq!(out.ht.len(), 2);
        assert!(out.is_aligned());
    }

    #[test]
    fn fixed_text_rejects_slow_sessions() {
        let cfg = CleaningConfig::new(TaskKind::FixedText);
        // 20 events over 60.3 s is 19.9 cpm.
        let src = paced(20, 60.0 * 20.0 / 19.9);
        assert!(typing_rate(&src).unwrap() < 20.0);
        assert_eq!(
            clean_fixed_text(&seq(&[0.2]), &src, &cfg).unwrap(),
            Cleaned::Rejected(RejectReason::SlowTyping)
        );
    }

    #[test]
    fn fixed_text_identity_and_empty() {
        let cfg = CleaningConfig::new(TaskKind::FixedText);
        let src = paced(40, 60.0);
        let s = seq(&[0.2, 3.0, 0.4]);
        assert_eq!(clean_fixed_text(&s, &src, &cfg).unwrap(), Cleaned::Kept(s.clone()));
        assert_eq!(
            clean_fixed_text(&seq(&[4.0, 5.0]), &src, &cfg).unwrap(),
            Cleaned::Rejected(RejectReason::Empty)
        );
        assert!(clean_fixed_text(&s, &src, &CleaningConfig::new(TaskKind::FreeText)).is_err());
    }

    #[test]
    fn free_text_keeps_everything() {
        let s = seq(&[5.0, 0.1]);
        assert_eq!(clean_free_text(s.clone()), s);
    }

    #[test]
    fn segmentation_splits_on_long_pause() {
        let s = session(TaskKind::FreeText, &[(0.0, 0.1), (1.0, 1.1), (32.0, 32.1), (34.0, 34.1)]);
        let parts = segment_sessions(&s, 30.0);
        assert_eq!(parts.len(), 2);
        assert_eq!(parts[0].events.len(), 2);
        assert_eq!(parts[1].events.len(), 2);
        assert_eq!(parts[0].session_id, "x#0");
        assert_eq!(parts[1].session_id, "x#1");
    }

    #[test]
    fn segmentation_boundary_is_strict() {
        let s = session(TaskKind::FreeText, &[(0.0, 0.1), (30.0, 30.1)]);
        assert_eq!(segment_sessions(&s, 30.0), vec![s.clone()]);
        let s = session(TaskKind::FreeText, &[(0.0, 0.1), (5.0, 5.1), (9.0, 9.1)]);
        assert_eq!(segment_sessions(&s, 30.0), vec![s]);
    }
}
