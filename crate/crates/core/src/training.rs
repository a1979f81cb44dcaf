//! Epoch loop, early stopping, checkpoint selection and fine-tuning.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{aggregate_patient, auc_roc, Aggregated, Aggregation, WindowProb};
use crate::ingest::{Label, SignalCohort};
use crate::nn::loss::{self, LossKind};
use crate::nn::{Adam, AdamConfig, Graph, Model, Tensor};
use crate::rng;
use crate::scalar::Scalar;
use crate::signals::CHANNELS;
use crate::windowing::{fit_stats, standardize, window_subjects, ChannelStats, Window, WindowingConfig};

/// Windows of one split together with the labels of its subjects.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T> {
    pub windows: Vec<Window<T>>,
    /// Subjects of the split, sorted by id. Subjects without windows are kept
    /// here so evaluation can report them as missing.
    pub labels: Vec<(String, Label)>,
    targets: Vec<T>,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(windows: Vec<Window<T>>, mut labels: Vec<(String, Label)>) -> Result<Self> {
        labels.sort();
        labels.dedup();
        let index: BTreeMap<&str, Label> = labels.iter().map(|(s, l)| (s.as_str(), *l)).collect();
        let mut targets = Vec::with_capacity(windows.len());
        let mut steps = None;
        for w in &windows {
            let label = index
                .get(&*w.subject_id)
                .ok_or_else(|| Error::Data(format!("window from unlabeled subject `{}`", w.subject_id)))?;
            targets.push(T::lit(label.bit() as f64));
            if *steps.get_or_insert(w.steps()) != w.steps() {
                return Err(Error::Shape("windows of different lengths in one dataset".into()));
            }
        }
        Ok(Self { windows, labels, targets })
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn window_size(&self) -> Option<usize> {
        self.windows.first().map(Window::steps)
    }

    pub fn subjects(&self) -> BTreeSet<&str> {
        self.labels.iter().map(|(s, _)| s.as_str()).collect()
    }

    pub fn targets(&self) -> &[T] {
        &self.targets
    }

    /// Keeps only the listed subjects.
    pub fn restrict(&self, subjects: &[String]) -> Result<Self> {
        let keep: HashSet<&str> = subjects.iter().map(String::as_str).collect();
        let windows = self.windows.iter().filter(|w| keep.contains(&*w.subject_id)).cloned().collect();
        let labels = self.labels.iter().filter(|(s, _)| keep.contains(s.as_str())).cloned().collect();
        Self::new(windows, labels)
    }

    /// `[B, W, 4]` inputs and labels for the given window indices.
    pub fn batch(&self, indices: &[usize]) -> (Tensor<T>, Vec<T>) {
        let w = self.window_size().unwrap_or(0);
        let mut data = Vec::with_capacity(indices.len() * w * CHANNELS);
        let mut y = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.windows[i].values);
            y.push(self.targets[i]);
        }
        (Tensor::new(vec![indices.len(), w, CHANNELS], data).expect("window shape"), y)
    }

    /// Counts of (control, parkinson) subjects.
    pub fn class_counts(&self) -> (usize, usize) {
        let pd = self.labels.iter().filter(|(_, l)| *l == Label::Parkinson).count();
        (self.labels.len() - pd, pd)
    }
}

/// Standardized train and validation datasets of one fold.
#[derive(Clone, Debug)]
pub struct FoldData<T> {
    pub train: Dataset<T>,
    pub val: Dataset<T>,
    pub stats: ChannelStats<T>,
}

/// Windows both splits, fits statistics on training windows only and
/// standardizes both with them.
pub fn prepare_fold<T: Scalar>(
    cohort: &SignalCohort,
    train: &[(String, Label)],
    val: &[(String, Label)],
    cfg: &WindowingConfig,
) -> Result<FoldData<T>> {
    cfg.validate()?;
    let ids = |s: &[(String, Label)]| s.iter().map(|(id, _)| id.clone()).collect::<BTreeSet<_>>();
    let (train_ids, val_ids) = (ids(train), ids(val));
    if let Some(shared) = train_ids.intersection(&val_ids).next() {
        return Err(Error::Internal(format!("subject `{shared}` is in both train and validation")));
    }
    let raw_train = window_subjects::<T>(cohort, &train_ids, cfg).windows;
    let raw_val = window_subjects::<T>(cohort, &val_ids, cfg).windows;
    let stats = fit_stats(&raw_train)?;
    stats.ensure_disjoint(val_ids.iter().map(String::as_str))?;
    let std_all = |ws: Vec<Window<T>>| ws.iter().map(|w| standardize(w, &stats)).collect::<Vec<_>>();
    Ok(FoldData {
        train: Dataset::new(std_all(raw_train), train.to_vec())?,
        val: Dataset::new(std_all(raw_val), val.to_vec())?,
        stats,
    })
}

/// Windows and standardizes a cohort with existing statistics.
pub fn prepare_eval<T: Scalar>(
    cohort: &SignalCohort,
    subjects: &[(String, Label)],
    cfg: &WindowingConfig,
    stats: &ChannelStats<T>,
) -> Result<Dataset<T>> {
    let ids: BTreeSet<String> = subjects.iter().map(|(s, _)| s.clone()).collect();
    stats.ensure_disjoint(ids.iter().map(String::as_str))?;
    let windows = window_subjects::<T>(cohort, &ids, cfg).windows.iter().map(|w| standardize(w, stats)).collect();
    Dataset::new(windows, subjects.to_vec())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointStrategy {
    LastEpoch,
    #[default]
    BestValidation,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LossChoice {
    Bce,
    /// `alpha: None` uses the minority prevalence of the member's subjects,
    /// clamped to `[0.1, 0.9]`.
    Focal { gamma: f64, alpha: Option<f64> },
}

impl Default for LossChoice {
    fn default() -> Self {
        LossChoice::Focal { gamma: 2.0, alpha: None }
    }
}

impl LossChoice {
    pub fn resolve(self, train: &[(String, Label)]) -> LossKind {
        match self {
            LossChoice::Bce => LossKind::Bce,
            LossChoice::Focal { gamma, alpha: Some(alpha) } => LossKind::Focal { gamma, alpha },
            LossChoice::Focal { gamma, alpha: None } => {
                let pd = train.iter().filter(|(_, l)| *l == Label::Parkinson).count();
                let n = train.len().max(1);
                let minority = pd.min(train.len() - pd) as f64 / n as f64;
                LossKind::Focal { gamma, alpha: minority.clamp(0.1, 0.9) }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// `None` disables early stopping.
    pub patience: Option<usize>,
    pub loss: LossChoice,
    pub lr: f64,
    pub batch_size: usize,
    pub checkpoint: CheckpointStrategy,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            patience: Some(5),
            loss: LossChoice::default(),
            lr: 1e-3,
            batch_size: 16,
            checkpoint: CheckpointStrategy::BestValidation,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.patience == Some(0) {
            return Err(Error::Config("patience must be >= 1 (use null to disable)".into()));
        }
        if let LossChoice::Focal { gamma, alpha } = self.loss {
            if !(gamma >= 0.0) || alpha.is_some_and(|a| !(a > 0.0 && a < 1.0)) {
                return Err(Error::Config("focal loss needs gamma >= 0 and alpha in (0, 1)".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_auc: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn val_aucs(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.val_auc).collect()
    }

    /// Index of the first epoch with the highest validation AUC.
    pub fn best_index(&self) -> Option<usize> {
        first_argmax(&self.val_aucs())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_auc,val_loss\n");
        for e in &self.epochs {
            let _ = writeln!(out, "{},{},{},{}", e.epoch, e.train_loss, e.val_auc, e.val_loss);
        }
        out
    }
}

fn first_argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        if best.is_none_or(|b| v > values[b]) {
            best = Some(i);
        }
    }
    best
}

/// `true` while training should continue: stops once the last `patience`
/// epochs brought no strict improvement over the best earlier AUC.
pub fn early_stop_check(val_aucs: &[f64], patience: Option<usize>) -> bool {
    let (Some(p), Some(best)) = (patience, first_argmax(val_aucs)) else {
        return true;
    };
    val_aucs.len() - 1 - best < p
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezePolicy {
    #[default]
    Full,
    HeadOnly,
}

impl FreezePolicy {
    pub const ALL: [FreezePolicy; 2] = [FreezePolicy::Full, FreezePolicy::HeadOnly];

    pub fn name(self) -> &'static str {
        match self {
            FreezePolicy::Full => "full",
            FreezePolicy::HeadOnly => "head_only",
        }
    }

    pub fn apply<T: Scalar>(self, model: &mut Model<T>) {
        match self {
            FreezePolicy::Full => model.unfreeze(),
            FreezePolicy::HeadOnly => model.freeze_backbone(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub history: TrainHistory,
    /// Weights chosen by the checkpoint strategy.
    pub model: Model<T>,
    /// One-based epoch of `model`.
    pub selected_epoch: usize,
    pub selected_val_auc: f64,
    pub optimizer: Adam<T>,
    pub loss: LossKind,
}

const EVAL_CHUNK: usize = 64;

/// Window-level probabilities in dataset order.
pub fn predict<T: Scalar>(model: &Model<T>, data: &Dataset<T>) -> Result<Vec<T>> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut out = Vec::with_capacity(data.len());
    for chunk in idx.chunks(EVAL_CHUNK) {
        let (x, _) = data.batch(chunk);
        out.extend(model.predict_proba(&x)?);
    }
    Ok(out)
}

/// Patient-level scores for the dataset's subjects.
pub fn patient_scores<T: Scalar>(model: &Model<T>, data: &Dataset<T>, mode: Aggregation) -> Result<Aggregated<T>> {
    let probs = predict(model, data)?;
    aggregate_windows(data, &probs, mode)
}

pub fn aggregate_windows<T: Scalar>(data: &Dataset<T>, probs: &[T], mode: Aggregation) -> Result<Aggregated<T>> {
    let wp: Vec<WindowProb<'_, T>> = data
        .windows
        .iter()
        .zip(probs)
        .map(|(w, &p)| WindowProb { subject_id: &w.subject_id, session_id: &w.session_id, probability: p })
        .collect();
    aggregate_patient(&wp, &data.labels, mode)
}

/// Patient-level AUC and mean window loss on `data`.
pub fn validate<T: Scalar>(model: &Model<T>, data: &Dataset<T>, loss: LossKind, mode: Aggregation) -> Result<(f64, f64)> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut probs = Vec::with_capacity(data.len());
    let mut loss_sum = 0.0;
    for chunk in idx.chunks(EVAL_CHUNK) {
        let (x, y) = data.batch(chunk);
        let z = model.predict_logits(&x)?;
        loss_sum += loss::loss_value(loss, &z, &y).as_f64() * chunk.len() as f64;
        probs.extend(z.into_iter().map(loss::sigmoid));
    }
    let agg = aggregate_windows(data, &probs, mode)?;
    Ok((auc_roc(&agg.scores)?, loss_sum / data.len().max(1) as f64))
}

/// Trains `model` on `train`, monitoring patient-level AUC on `val`.
pub fn train<T: Scalar>(
    mut model: Model<T>,
    train: &Dataset<T>,
    val: &Dataset<T>,
    cfg: &TrainConfig,
    aggregation: Aggregation,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Data(format!(
            "training needs windows in both splits (train {}, validation {})",
            train.len(),
            val.len()
        )));
    }
    if train.window_size() != val.window_size() {
        return Err(Error::Shape("train and validation windows differ in length".into()));
    }
    let val_subjects: HashSet<&str> = val.subjects().into_iter().collect();
    if let Some(s) = train.subjects().into_iter().find(|s| val_subjects.contains(s)) {
        return Err(Error::Internal(format!("leakage: subject `{s}` is in both train and validation")));
    }
    let loss_kind = cfg.loss.resolve(&train.labels);
    let mut opt = Adam::new(AdamConfig::new(cfg.lr), &model.params);
    let mut history = TrainHistory::default();
    let mut best: Option<(usize, f64, Model<T>)> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut rng::rng_for(cfg.seed, &[epoch as u64]));
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            if let Some(w) = chunk.iter().map(|&i| &train.windows[i]).find(|w| val_subjects.contains(&*w.subject_id)) {
                return Err(Error::Internal(format!("leakage: validation subject `{}` in a training batch", w.subject_id)));
            }
            let (x, y) = train.batch(chunk);
            let mut g = Graph::new();
            let xi = g.input(x);
            let z = model.forward(&mut g, xi)?;
            let l = g.loss(z, &y, loss_kind);
            let value = g.value(l).item().as_f64();
            if !value.is_finite() {
                return Err(Error::Internal(format!("non-finite training loss at epoch {epoch}")));
            }
            loss_sum += value * chunk.len() as f64;
            let grads = g.backward(l)?;
            opt.step(&mut model.params, &grads)?;
        }
        let (val_auc, val_loss) = validate(&model, val, loss_kind, aggregation)?;
        history.epochs.push(EpochRecord { epoch, train_loss: loss_sum / train.len() as f64, val_auc, val_loss });
        if best.as_ref().is_none_or(|(_, b, _)| val_auc > *b) {
            best = Some((epoch, val_auc, model.clone()));
        }
        if !early_stop_check(&history.val_aucs(), cfg.patience) {
            break;
        }
    }

    let last = history.epochs.last().expect("at least one epoch");
    let (selected_epoch, selected_val_auc, model) = match cfg.checkpoint {
        CheckpointStrategy::LastEpoch => (last.epoch, last.val_auc, model),
        CheckpointStrategy::BestValidation => best.expect("at least one epoch"),
    };
    Ok(TrainOutcome { history, model, selected_epoch, selected_val_auc, optimizer: opt, loss: loss_kind })
}

/// Continues training a pre-trained model under a freeze policy. The
/// datasets must use the window size the model was trained with.
pub fn fine_tune<T: Scalar>(
    mut model: Model<T>,
    windowing: &WindowingConfig,
    policy: FreezePolicy,
    train_data: &Dataset<T>,
    val: &Dataset<T>,
    cfg: &TrainConfig,
    aggregation: Aggregation,
) -> Result<TrainOutcome<T>> {
    for d in [train_data, val] {
        if d.window_size().is_some_and(|w| w != windowing.window_size) {
            return Err(Error::Shape(format!(
                "checkpoint expects {}-step windows, data has {:?}",
                windowing.window_size,
                d.window_size()
            )));
        }
    }
    policy.apply(&mut model);
    let mut out = train(model, train_data, val, cfg, aggregation)?;
    out.model.unfreeze();
    Ok(out)
}

/// Default fine-tuning learning rate: one order of magnitude below pre-training.
pub fn fine_tune_lr(pretrain_lr: f64) -> f64 {
    pretrain_lr / 10.0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn early_stop_examples() {
        assert!(!early_stop_check(&[0.6, 0.7, 0.7, 0.7], Some(2)));
        assert!(early_stop_check(&[0.6, 0.7, 0.7], Some(2)));
        let up: Vec<f64> = (0..50).map(|i| i as f64 / 100.0).collect();
        for n in 1..=up.len() {
            assert!(early_stop_check(&up[..n], Some(1)));
        }
        let down: Vec<f64> = (0..10).map(|i| 1.0 - i as f64 / 20.0).collect();
        assert!(early_stop_check(&down[..5], Some(5)));
        assert!(!early_stop_check(&down[..6], Some(5)));
        assert!(early_stop_check(&down, None));
    }

    #[test]
    fn focal_alpha_tracks_member_prevalence() {
        let l = |pd: usize, hc: usize| {
            let mut v: Vec<(String, Label)> = (0..pd).map(|i| (format!("p{i}"), Label::Parkinson)).collect();
            v.extend((0..hc).map(|i| (format!("h{i}"), Label::Control)));
            v
        };
        let alpha = |pd, hc| match LossChoice::default().resolve(&l(pd, hc)) {
            LossKind::Focal { alpha, .. } => alpha,
            LossKind::Bce => unreachable!(),
        };
        assert_eq!(alpha(5, 5), 0.5);
        assert_eq!(alpha(2, 8), 0.2);
        assert_eq!(alpha(1, 99), 0.1);
    }

    #[test]
    fn fine_tune_lr_is_a_tenth() {
        assert!((fine_tune_lr(1e-3) - 1e-4).abs() < 1e-18);
    }
}
