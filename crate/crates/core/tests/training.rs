use keyscreen::evaluation::{make_folds, Aggregation};
use keyscreen::ingest::Label;
use keyscreen::nn::{Arch, LossKind, Model, ModelSpec};
use keyscreen::pipeline::{load_cohort, ExperimentConfig};
use keyscreen::synth::SynthConfig;
use keyscreen::training::{
    early_stop_check, fine_tune, prepare_fold, train, CheckpointStrategy, FoldData, FreezePolicy, LossChoice, TrainConfig,
};
use keyscreen::windowing::WindowingConfig;
use proptest::prelude::*;

fn small_fold(seed: u64) -> (FoldData<f64>, WindowingConfig) {
    let cfg = ExperimentConfig {
        data: keyscreen::pipeline::config::DataSource {
            synth: Some(SynthConfig { n_pd: 6, n_hc: 6, sessions_mean: 2.0, length_mean: 80.0, seed, ..Default::default() }),
            ..Default::default()
        },
        ..Default::default()
    };
    let loaded = load_cohort(&cfg).unwrap();
    let plan = make_folds(&loaded.labels, 3, seed).unwrap();
    let w = WindowingConfig::new(20, 10).unwrap();
    let fold = prepare_fold(&loaded.cohort, &plan.training(0, &loaded.labels), &val_labels(&plan, 0, &loaded.labels), &w).unwrap();
    (fold, w)
}

fn val_labels(plan: &keyscreen::evaluation::FoldPlan, f: usize, all: &[(String, Label)]) -> Vec<(String, Label)> {
    let v = plan.validation(f);
    all.iter().filter(|(s, _)| v.contains(s)).cloned().collect()
}

fn quick(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig { epochs, patience: None, batch_size: 8, seed, ..Default::default() }
}

#[test]
fn patience_counts_epochs_since_the_first_best() {
    // best at epoch 2, then four epochs without strict improvement
    let aucs = [0.6, 0.8, 0.8, 0.7, 0.75, 0.8];
    assert!(early_stop_check(&aucs[..5], Some(4)));
    assert!(!early_stop_check(&aucs, Some(4)));
    assert!(early_stop_check(&aucs, None));
    assert!(!early_stop_check(&[0.5, 0.4], Some(1)));
}

proptest! {
    #[test]
    fn early_stop_matches_counter_oracle(
        aucs in prop::collection::vec(0u8..5, 1..30), p in 1usize..6
    ) {
        let aucs: Vec<f64> = aucs.iter().map(|&a| f64::from(a) / 4.0).collect();
        // walk the sequence like a training loop with a stale-epoch counter
        let mut best = f64::NEG_INFINITY;
        let mut stale = 0;
        for a in &aucs {
            if *a > best { best = *a; stale = 0; } else { stale += 1; }
        }
        prop_assert_eq!(early_stop_check(&aucs, Some(p)), stale < p);
    }
}

#[test]
fn best_validation_checkpoint_is_the_first_argmax() {
    let (fold, _) = small_fold(3);
    let spec = ModelSpec::tiny(Arch::GruFcn, 1);
    let cfg = TrainConfig { checkpoint: CheckpointStrategy::BestValidation, ..quick(6, 2) };
    let out = train(Model::new(spec.clone()).unwrap(), &fold.train, &fold.val, &cfg, Aggregation::Hierarchical).unwrap();
    let aucs = out.history.val_aucs();
    let best = aucs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let first = aucs.iter().position(|&a| a == best).unwrap();
    assert_eq!(out.selected_epoch, first + 1);
    assert_eq!(out.selected_val_auc, best);

    // replaying exactly that many epochs reproduces the selected weights
    let replay_cfg = TrainConfig { checkpoint: CheckpointStrategy::LastEpoch, ..quick(first + 1, 2) };
    let replay = train(Model::new(spec).unwrap(), &fold.train, &fold.val, &replay_cfg, Aggregation::Hierarchical).unwrap();
    assert_eq!(replay.model.params.digest(), out.model.params.digest());
}

#[test]
fn training_is_reproducible() {
    let (fold, _) = small_fold(4);
    let run = || {
        let m = Model::new(ModelSpec::tiny(Arch::Tcn, 5)).unwrap();
        train(m, &fold.train, &fold.val, &quick(3, 9), Aggregation::Hierarchical).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.history, b.history);
    assert_eq!(a.model.params.digest(), b.model.params.digest());
}

#[test]
fn focal_alpha_is_clamped_minority_prevalence() {
    let labels = |pd: usize, hc: usize| -> Vec<(String, Label)> {
        (0..pd).map(|i| (format!("p{i}"), Label::Parkinson)).chain((0..hc).map(|i| (format!("h{i}"), Label::Control))).collect()
    };
    let focal = LossChoice::Focal { gamma: 2.0, alpha: None };
    assert_eq!(focal.resolve(&labels(3, 7)), LossKind::Focal { gamma: 2.0, alpha: 0.3 });
    assert_eq!(focal.resolve(&labels(1, 99)), LossKind::Focal { gamma: 2.0, alpha: 0.1 });
    assert_eq!(focal.resolve(&labels(5, 5)), LossKind::Focal { gamma: 2.0, alpha: 0.5 });
    let fixed = LossChoice::Focal { gamma: 1.0, alpha: Some(0.25) };
    assert_eq!(fixed.resolve(&labels(3, 7)), LossKind::Focal { gamma: 1.0, alpha: 0.25 });
    assert_eq!(LossChoice::Bce.resolve(&labels(3, 7)), LossKind::Bce);
}

#[test]
fn head_only_leaves_backbone_bitwise_unchanged() {
    let (fold, w) = small_fold(5);
    for arch in Arch::ALL {
        let m: Model<f64> = Model::new(ModelSpec::tiny(arch, 7)).unwrap();
        let before = m.backbone_digest();
        let head_before = m.params.by_name("head.w").unwrap().value.clone();
        let out = fine_tune(m, &w, FreezePolicy::HeadOnly, &fold.train, &fold.val, &quick(3, 1), Aggregation::Hierarchical)
            .unwrap();
        assert_eq!(out.model.backbone_digest(), before, "{arch}");
        assert_ne!(out.model.params.by_name("head.w").unwrap().value, head_before, "{arch}");
        assert!(out.model.params.iter().all(|p| p.trainable));
    }
}

#[test]
fn full_policy_updates_the_backbone() {
    let (fold, w) = small_fold(6);
    let m: Model<f64> = Model::new(ModelSpec::tiny(Arch::GruFcn, 7)).unwrap();
    let before = m.backbone_digest();
    let out = fine_tune(m, &w, FreezePolicy::Full, &fold.train, &fold.val, &quick(2, 1), Aggregation::Hierarchical).unwrap();
    assert_ne!(out.model.backbone_digest(), before);
}

#[test]
fn fine_tune_rejects_other_window_sizes() {
    let (fold, _) = small_fold(6);
    let m: Model<f64> = Model::new(ModelSpec::tiny(Arch::Gru, 7)).unwrap();
    let other = WindowingConfig::new(30, 10).unwrap();
    let err = fine_tune(m, &other, FreezePolicy::Full, &fold.train, &fold.val, &quick(1, 1), Aggregation::Hierarchical);
    assert!(matches!(err, Err(keyscreen::Error::Shape(_))));
}

#[test]
fn statistics_come_from_training_subjects_only() {
    let (fold, _) = small_fold(8);
    let fitted: Vec<&str> = fold.stats.fitted_on.iter().map(String::as_str).collect();
    let train: Vec<&str> = fold.train.subjects().into_iter().collect();
    assert_eq!(fitted, train);
    assert!(fold.val.subjects().iter().all(|s| !fold.stats.fitted_on.contains(*s)));
}

#[test]
fn history_csv_has_one_row_per_epoch() {
    let (fold, _) = small_fold(9);
    let m = Model::new(ModelSpec::tiny(Arch::Lstm, 2)).unwrap();
    let out = train(m, &fold.train, &fold.val, &quick(2, 3), Aggregation::Flat).unwrap();
    let csv = out.history.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "epoch,train_loss,val_auc,val_loss");
    assert_eq!(lines.len(), 3);
}
