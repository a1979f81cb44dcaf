//! Subject-level resampling plans: no balancing, random undersampling, and an
//! undersampling ensemble whose members sweep the minority fraction from a
//! small share up to a majority share.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::Label;
use crate::rng;
use crate::scalar::Scalar;

pub const DEFAULT_FRACTIONS: [f64; 5] = [0.20, 0.35, 0.50, 0.65, 0.80];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Unbalanced,
    Undersample,
    Imbalmed,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Unbalanced, Strategy::Undersample, Strategy::Imbalmed];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Unbalanced => "unbalanced",
            Strategy::Undersample => "undersample",
            Strategy::Imbalmed => "imbalmed",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|x| x.name() == s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsetSpec {
    /// Sorted subject ids.
    pub subjects: Vec<String>,
    pub target_minority_fraction: f64,
    pub achieved_minority_fraction: f64,
    /// The majority class ran out before the target was reached.
    pub majority_capped: bool,
}

impl SubsetSpec {
    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResamplingPlan {
    pub strategy: Strategy,
    pub minority: Label,
    pub members: Vec<SubsetSpec>,
    pub seed: u64,
}

impl ResamplingPlan {
    /// Fails if any member includes one of `held_out`.
    pub fn ensure_excludes<'a>(&self, held_out: impl IntoIterator<Item = &'a str>) -> Result<()> {
        let held: BTreeSet<&str> = held_out.into_iter().collect();
        for (i, m) in self.members.iter().enumerate() {
            if let Some(s) = m.subjects.iter().find(|s| held.contains(s.as_str())) {
                return Err(Error::Internal(format!("leakage: member {i} includes held-out subject `{s}`")));
            }
        }
        Ok(())
    }
}

struct Split {
    minority: Label,
    minority_ids: Vec<String>,
    majority_ids: Vec<String>,
}

/// Sorted by id so that plans do not depend on input order. On equal counts
/// the Parkinson class is treated as the minority.
fn split(train: &[(String, Label)]) -> Result<Split> {
    let mut sorted: Vec<&(String, Label)> = train.iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(&b.0));
    let ids = |l: Label| sorted.iter().filter(|(_, x)| *x == l).map(|(s, _)| s.clone()).collect::<Vec<_>>();
    let pd = ids(Label::Parkinson);
    let hc = ids(Label::Control);
    if pd.is_empty() || hc.is_empty() {
        return Err(Error::Data("resampling needs subjects from both classes".into()));
    }
    Ok(if pd.len() <= hc.len() {
        Split { minority: Label::Parkinson, minority_ids: pd, majority_ids: hc }
    } else {
        Split { minority: Label::Control, minority_ids: hc, majority_ids: pd }
    })
}

fn member(minority_ids: &[String], majority_ids: &[String], keep: usize, target: f64, capped: bool, rng: &mut rng::Rng) -> SubsetSpec {
    let picked = index::sample(rng, majority_ids.len(), keep);
    let mut subjects: Vec<String> = minority_ids.to_vec();
    subjects.extend(picked.iter().map(|i| majority_ids[i].clone()));
    subjects.sort();
    let achieved = minority_ids.len() as f64 / subjects.len() as f64;
    SubsetSpec { subjects, target_minority_fraction: target, achieved_minority_fraction: achieved, majority_capped: capped }
}

/// All training subjects in a single member.
pub fn unbalanced(train: &[(String, Label)], seed: u64) -> Result<ResamplingPlan> {
    let s = split(train)?;
    let mut subjects: Vec<String> = train.iter().map(|(id, _)| id.clone()).collect();
    subjects.sort();
    let frac = s.minority_ids.len() as f64 / subjects.len() as f64;
    Ok(ResamplingPlan {
        strategy: Strategy::Unbalanced,
        minority: s.minority,
        members: vec![SubsetSpec {
            subjects,
            target_minority_fraction: frac,
            achieved_minority_fraction: frac,
            majority_capped: false,
        }],
        seed,
    })
}

/// Keeps every minority subject and samples the majority down to parity.
pub fn undersample(train: &[(String, Label)], seed: u64) -> Result<ResamplingPlan> {
    let s = split(train)?;
    let mut rng = rng::rng_for(seed, &[0]);
    let m = s.minority_ids.len();
    let spec = member(&s.minority_ids, &s.majority_ids, m, 0.5, false, &mut rng);
    Ok(ResamplingPlan { strategy: Strategy::Undersample, minority: s.minority, members: vec![spec], seed })
}

/// One member per target minority fraction `f`: all `m` minority subjects plus
/// `round(m (1 - f) / f)` majority subjects (at least one, at most all).
pub fn imbalmed_plan(train: &[(String, Label)], fractions: &[f64], seed: u64) -> Result<ResamplingPlan> {
    if fractions.is_empty() {
        return Err(Error::Config("imbalmed needs at least one target fraction".into()));
    }
    if fractions.iter().any(|&f| !(f > 0.0 && f < 1.0)) {
        return Err(Error::Config(format!("fractions must lie in (0, 1): {fractions:?}")));
    }
    if fractions.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Config(format!("fractions must be strictly increasing: {fractions:?}")));
    }
    let s = split(train)?;
    let m = s.minority_ids.len();
    let available = s.majority_ids.len();
    let members = fractions
        .iter()
        .enumerate()
        .map(|(i, &f)| {
            let wanted = ((m as f64) * (1.0 - f) / f).round().max(1.0) as usize;
            let keep = wanted.min(available);
            let mut rng = rng::rng_for(seed, &[i as u64 + 1]);
            member(&s.minority_ids, &s.majority_ids, keep, f, wanted > available, &mut rng)
        })
        .collect();
    Ok(ResamplingPlan { strategy: Strategy::Imbalmed, minority: s.minority, members, seed })
}

pub fn plan(strategy: Strategy, train: &[(String, Label)], fractions: &[f64], seed: u64) -> Result<ResamplingPlan> {
    match strategy {
        Strategy::Unbalanced => unbalanced(train, seed),
        Strategy::Undersample => undersample(train, seed),
        Strategy::Imbalmed => imbalmed_plan(train, fractions, seed),
    }
}

/// Unweighted per-subject mean of member probabilities.
pub fn ensemble_aggregate<T: Scalar>(members: &[BTreeMap<String, T>]) -> Result<BTreeMap<String, T>> {
    let first = members.first().ok_or_else(|| Error::Data("no ensemble members to aggregate".into()))?;
    for (i, m) in members.iter().enumerate().skip(1) {
        if m.len() != first.len() || m.keys().zip(first.keys()).any(|(a, b)| a != b) {
            return Err(Error::Data(format!("ensemble member {i} covers a different subject set")));
        }
    }
    let n = T::from_usize(members.len()).expect("member count fits scalar");
    Ok(first
        .keys()
        .map(|id| {
            let sum = members.iter().map(|m| m[id]).fold(T::zero(), |a, b| a + b);
            (id.clone(), sum / n)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(pd: usize, hc: usize) -> Vec<(String, Label)> {
        (0..pd)
            .map(|i| (format!("pd{i:03}"), Label::Parkinson))
            .chain((0..hc).map(|i| (format!("hc{i:03}"), Label::Control)))
            .collect()
    }

    fn class_counts(spec: &SubsetSpec, train: &[(String, Label)]) -> (usize, usize) {
        let map: BTreeMap<_, _> = train.iter().cloned().collect();
        spec.subjects.iter().fold((0, 0), |(pd, hc), s| match map[s] {
            Label::Parkinson => (pd + 1, hc),
            Label::Control => (pd, hc + 1),
        })
    }

    #[test]
    fn undersample_to_parity() {
        let t = labels(57, 46);
        let p = undersample(&t, 3).unwrap();
        assert_eq!(p.members.len(), 1);
        assert_eq!(class_counts(&p.members[0], &t), (46, 46));
        assert_eq!(p.minority, Label::Control);
        assert_eq!(undersample(&t, 3).unwrap(), p);
    }

    #[test]
    fn balanced_input_is_identity() {
        let t = labels(10, 10);
        let p = undersample(&t, 1).unwrap();
        let mut all: Vec<String> = t.iter().map(|x| x.0.clone()).collect();
        all.sort();
        assert_eq!(p.members[0].subjects, all);
    }

    #[test]
    fn single_class_fails() {
        assert!(undersample(&labels(5, 0), 1).is_err());
        assert!(imbalmed_plan(&labels(0, 4), &DEFAULT_FRACTIONS, 1).is_err());
        assert!(imbalmed_plan(&labels(3, 4), &[], 1).is_err());
        assert!(imbalmed_plan(&labels(3, 4), &[0.5, 0.4], 1).is_err());
    }

    #[test]
    fn imbalmed_member_sizes() {
        let t = labels(20, 80);
        let p = imbalmed_plan(&t, &[0.2, 0.5, 0.8], 9).unwrap();
        assert_eq!(class_counts(&p.members[0], &t), (20, 80));
        assert!((p.members[0].achieved_minority_fraction - 0.2).abs() < 1e-12);
        assert_eq!(class_counts(&p.members[1], &t), (20, 20));
        assert_eq!(class_counts(&p.members[2], &t), (20, 5));
        assert!(p.members.iter().all(|m| !m.majority_capped));
    }

    #[test]
    fn imbalmed_cap_is_flagged() {
        let t = labels(18, 18);
        let p = imbalmed_plan(&t, &DEFAULT_FRACTIONS, 0).unwrap();
        assert!(p.members[0].majority_capped);
        assert_eq!(p.members[0].len(), 36);
        assert!(!p.members[4].majority_capped);
    }

    #[test]
    fn aggregate_mean() {
        let a: BTreeMap<String, f64> = [("x".to_string(), 0.2)].into();
        let b: BTreeMap<String, f64> = [("x".to_string(), 0.8)].into();
        assert_eq!(ensemble_aggregate(&[a.clone(), b.clone()]).unwrap()["x"], 0.5);
        assert_eq!(ensemble_aggregate(&[a.clone()]).unwrap(), a);
        let c: BTreeMap<String, f64> = [("y".to_string(), 0.8)].into();
        assert!(ensemble_aggregate(&[a, c]).is_err());
    }

    #[test]
    fn excludes_held_out() {
        let t = labels(5, 5);
        let p = imbalmed_plan(&t, &DEFAULT_FRACTIONS, 2).unwrap();
        assert!(p.ensure_excludes(["zz"]).is_ok());
        assert!(p.ensure_excludes(["pd000"]).is_err());
    }
}
