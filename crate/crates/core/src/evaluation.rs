//! Subject-grouped stratified folds, patient-level aggregation and metrics.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::Label;
use crate::rng;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    /// Validation subjects of each fold, sorted.
    pub folds: Vec<Vec<String>>,
    pub warnings: Vec<String>,
}

impl FoldPlan {
    pub fn validation(&self, fold: usize) -> &[String] {
        &self.folds[fold]
    }

    /// Every subject that is not in the validation set of `fold`, with labels.
    pub fn training(&self, fold: usize, subjects: &[(String, Label)]) -> Vec<(String, Label)> {
        let val: BTreeSet<&str> = self.folds[fold].iter().map(String::as_str).collect();
        subjects.iter().filter(|(id, _)| !val.contains(id.as_str())).cloned().collect()
    }
}

/// Shuffles each class with the seeded stream and deals subjects round-robin,
/// continuing the deal across classes so fold sizes differ by at most one and
/// each fold's class counts differ by at most one.
pub fn make_folds(subjects: &[(String, Label)], k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::Config(format!("need at least 2 folds, got {k}")));
    }
    if k > subjects.len() {
        return Err(Error::Config(format!("{k} folds requested for {} subjects", subjects.len())));
    }
    let mut seen = BTreeSet::new();
    if let Some((dup, _)) = subjects.iter().find(|(id, _)| !seen.insert(id.as_str())) {
        return Err(Error::Data(format!("duplicate subject `{dup}` in fold input")));
    }
    let mut warnings = Vec::new();
    let mut folds = vec![Vec::new(); k];
    let mut next = 0usize;
    for (ci, label) in [Label::Parkinson, Label::Control].into_iter().enumerate() {
        let mut ids: Vec<String> = subjects.iter().filter(|(_, l)| *l == label).map(|(id, _)| id.clone()).collect();
        ids.sort();
        if !ids.is_empty() && ids.len() < k {
            warnings.push(format!(
                "class {label:?} has {} subjects for {k} folds; some folds lack it",
                ids.len()
            ));
        }
        ids.shuffle(&mut rng::rng_for(seed, &[ci as u64]));
        for id in ids {
            folds[next % k].push(id);
            next += 1;
        }
    }
    for f in &mut folds {
        f.sort();
    }
    Ok(FoldPlan { k, seed, folds, warnings })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct PatientScore<T> {
    pub subject_id: String,
    pub probability: T,
    pub label: Label,
}

/// A window-level probability tagged with its origin.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowProb<'a, T> {
    pub subject_id: &'a str,
    pub session_id: &'a str,
    pub probability: T,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Mean over windows per session, then mean over sessions.
    #[default]
    Hierarchical,
    /// Mean over all of a subject's windows.
    Flat,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Aggregated<T> {
    pub scores: Vec<PatientScore<T>>,
    /// Subjects with no windows; excluded from `scores`.
    pub missing: Vec<String>,
}

/// Collapses window probabilities to one score per subject. Output follows
/// the order of `subjects`.
pub fn aggregate_patient<T: Scalar>(
    windows: &[WindowProb<'_, T>],
    subjects: &[(String, Label)],
    mode: Aggregation,
) -> Result<Aggregated<T>> {
    // subject -> session -> (sum, count), sessions kept in first-seen order.
    let mut acc: HashMap<&str, Vec<(&str, T, usize)>> = HashMap::new();
    for w in windows {
        let p = w.probability;
        if !(p >= T::zero() && p <= T::one()) {
            return Err(Error::Data(format!("window probability {p} outside [0, 1]")));
        }
        let sessions = acc.entry(w.subject_id).or_default();
        match sessions.iter_mut().find(|(s, _, _)| *s == w.session_id) {
            Some(slot) => {
                slot.1 += p;
                slot.2 += 1;
            }
            None => sessions.push((w.session_id, p, 1)),
        }
    }
    let mut out = Aggregated { scores: Vec::new(), missing: Vec::new() };
    for (id, label) in subjects {
        let Some(sessions) = acc.get(id.as_str()) else {
            out.missing.push(id.clone());
            continue;
        };
        let count = |n: usize| T::from_usize(n).expect("count fits scalar");
        let probability = match mode {
            Aggregation::Hierarchical => {
                let sum = sessions.iter().map(|(_, s, n)| *s / count(*n)).fold(T::zero(), |a, b| a + b);
                sum / count(sessions.len())
            }
            Aggregation::Flat => {
                let (s, n) = sessions.iter().fold((T::zero(), 0), |(s, n), (_, ps, pn)| (s + *ps, n + pn));
                s / count(n)
            }
        };
        out.scores.push(PatientScore { subject_id: id.clone(), probability, label: *label });
    }
    Ok(out)
}

/// Exact pair counts behind the AUC: `wins` pairs where the positive outranks
/// the negative and `ties` tied pairs, out of `positives * negatives`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PairCounts {
    pub wins: u64,
    pub ties: u64,
    pub positives: u64,
    pub negatives: u64,
}

impl PairCounts {
    pub fn auc(&self) -> f64 {
        (2 * self.wins + self.ties) as f64 / (2 * self.positives * self.negatives) as f64
    }
}

/// Rank-based pair counting in `O(n log n)`.
pub fn pair_counts<T: Scalar>(scores: &[PatientScore<T>]) -> Result<PairCounts> {
    if scores.iter().any(|s| s.probability.is_nan()) {
        return Err(Error::Data("NaN score".into()));
    }
    let mut sorted: Vec<&PatientScore<T>> = scores.iter().collect();
    sorted.sort_by(|a, b| a.probability.partial_cmp(&b.probability).expect("no NaN"));
    let positives = scores.iter().filter(|s| s.label.is_positive()).count() as u64;
    let negatives = scores.len() as u64 - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::UndefinedMetric("AUC-ROC needs both classes".into()));
    }
    let (mut wins, mut ties, mut neg_below) = (0u64, 0u64, 0u64);
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j].probability == sorted[i].probability {
            j += 1;
        }
        let group = &sorted[i..j];
        let pos = group.iter().filter(|s| s.label.is_positive()).count() as u64;
        let neg = group.len() as u64 - pos;
        wins += pos * neg_below;
        ties += pos * neg;
        neg_below += neg;
        i = j;
    }
    Ok(PairCounts { wins, ties, positives, negatives })
}

/// Area under the ROC curve as the Mann-Whitney statistic, ties counting half.
pub fn auc_roc<T: Scalar>(scores: &[PatientScore<T>]) -> Result<f64> {
    Ok(pair_counts(scores)?.auc())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct F1Score {
    pub value: f64,
    pub precision: f64,
    pub recall: f64,
    /// Set when precision + recall was zero and F1 fell back to 0.
    pub degenerate: bool,
}

/// F1 with Parkinson as the positive class; a subject is predicted positive
/// when its probability is at least `threshold`.
pub fn f1<T: Scalar>(scores: &[PatientScore<T>], threshold: T) -> F1Score {
    let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
    for s in scores {
        let predicted = s.probability >= threshold;
        match (predicted, s.label.is_positive()) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    f1_from_counts(tp, fp, fn_)
}

pub fn f1_from_counts(tp: u64, fp: u64, fn_: u64) -> F1Score {
    let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    if precision + recall == 0.0 {
        return F1Score { value: 0.0, precision, recall, degenerate: true };
    }
    F1Score { value: 2.0 * precision * recall / (precision + recall), precision, recall, degenerate: false }
}

/// Converts a subject -> probability map into labeled scores in label order.
pub fn scores_from_map<T: Scalar>(probs: &BTreeMap<String, T>, labels: &[(String, Label)]) -> Vec<PatientScore<T>> {
    labels
        .iter()
        .filter_map(|(id, l)| probs.get(id).map(|&p| PatientScore { subject_id: id.clone(), probability: p, label: *l }))
        .collect()
}
