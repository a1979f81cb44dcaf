use keyscreen::nn::gradcheck::{check_model, max_relative_error, probe_batch, relative_error};
use keyscreen::nn::loss::{bce_with_logits, focal_loss, loss_grad, sigmoid};
use keyscreen::nn::{grad_check, Adam, AdamConfig, Arch, Checkpoint, Graph, LossKind, Model, ModelSpec, Probe, Tensor};
use keyscreen::windowing::{ChannelStats, WindowingConfig};
use proptest::prelude::*;

fn batch(b: usize, w: usize, seed: f64) -> Tensor<f64> {
    let data = (0..b * w * 4).map(|i| ((i as f64 + seed) * 0.618).sin() * 1.5).collect();
    Tensor::new(vec![b, w, 4], data).unwrap()
}

#[test]
fn gradients_match_finite_differences_for_every_arch() {
    for arch in Arch::ALL {
        let err = grad_check(&ModelSpec::tiny(arch, 3), 10, 5).unwrap();
        assert!(err < 1e-4, "{arch}: {err:e}");
    }
}

#[test]
fn affine_model_gradient_is_exact() {
    let mut p = keyscreen::ParameterSet::new();
    p.add("w", Tensor::new(vec![3, 1], vec![0.2, -0.7, 1.1]).unwrap()).unwrap();
    p.add("b", Tensor::new(vec![1], vec![0.3]).unwrap()).unwrap();
    let x = Tensor::new(vec![2, 3], vec![1.0, 2.0, -1.0, 0.5, -0.5, 3.0]).unwrap();
    let build = |p: &keyscreen::ParameterSet, g: &mut Graph<f64>| {
        let xi = g.input(x.clone());
        let w = g.param(p, 0);
        let b = g.param(p, 1);
        let y = g.affine(xi, w, b);
        g.mean_all(y)
    };
    let mut g = Graph::new();
    let l = build(&p, &mut g);
    let grads = g.backward(l).unwrap();
    let err = max_relative_error(&p, &grads, |q| {
        let mut g = Graph::inference();
        let l = build(q, &mut g);
        Ok(g.value(l).item())
    })
    .unwrap();
    assert!(err < 1e-9, "{err:e}");
}

#[test]
fn frozen_backbone_check_covers_only_the_head() {
    for arch in [Arch::GruFcn, Arch::Tcn] {
        let mut m: Model<f64> = Model::new(ModelSpec::tiny(arch, 9)).unwrap();
        m.freeze_backbone();
        let (x, y) = probe_batch(&m.spec, 8, 2);
        let mut g = Graph::new();
        let xi = g.input(x.clone());
        let z = m.forward(&mut g, xi).unwrap();
        let l = g.loss(z, &y, LossKind::Bce);
        let grads = g.backward(l).unwrap();
        let names: Vec<&str> = grads.iter().map(|(i, _)| m.params.get(i).name.as_str()).collect();
        assert_eq!(names, ["head.w", "head.b"]);
        assert!(check_model(&m, &x, &y, LossKind::Bce).unwrap() < 1e-4);
    }
}

#[test]
fn zero_head_gives_even_odds() {
    for arch in Arch::ALL {
        let mut m: Model<f64> = Model::new(ModelSpec::tiny(arch, 1)).unwrap();
        for name in ["head.w", "head.b"] {
            let i = m.params.index_of(name).unwrap();
            m.params.value_mut(i).data_mut().fill(0.0);
        }
        let p = m.predict_proba(&batch(3, 6, 0.0)).unwrap();
        assert_eq!(p, vec![0.5; 3]);
    }
}

#[test]
fn batch_items_are_independent() {
    for arch in Arch::ALL {
        let m: Model<f64> = Model::new(ModelSpec::tiny(arch, 4)).unwrap();
        let x = batch(3, 7, 1.0);
        let z = m.predict_logits(&x).unwrap();
        let per = 7 * 4;
        let mut perm = Vec::new();
        for i in [2, 0, 1] {
            perm.extend_from_slice(&x.data()[i * per..(i + 1) * per]);
        }
        let zp = m.predict_logits(&Tensor::new(vec![3, 7, 4], perm).unwrap()).unwrap();
        assert_eq!(zp, vec![z[2], z[0], z[1]], "{arch}");
    }
}

/// Hidden-size-one GRU evaluated step by step with plain floats.
fn scalar_gru(m: &Model<f64>, xs: &[[f64; 4]]) -> f64 {
    let get = |n: &str| m.params.by_name(n).unwrap().value.data().to_vec();
    let (wx, wh, bx, bh) = (get("rnn0.wx"), get("rnn0.wh"), get("rnn0.bx"), get("rnn0.bh"));
    let mut h = 0.0;
    for x in xs {
        let gx = |k: usize| (0..4).map(|c| x[c] * wx[c * 3 + k]).sum::<f64>() + bx[k];
        let r = sigmoid(gx(0) + h * wh[0] + bh[0]);
        let z = sigmoid(gx(1) + h * wh[1] + bh[1]);
        let n = (gx(2) + r * (h * wh[2] + bh[2])).tanh();
        h = (1.0 - z) * n + z * h;
    }
    h
}

#[test]
fn gru_matches_scalar_recurrence() {
    let spec = ModelSpec { hidden: 1, ..ModelSpec::new(Arch::Gru, 12) };
    let m: Model<f64> = Model::new(spec).unwrap();
    let step = [0.4, -0.3, 0.1, 0.9];
    let mut finals = Vec::new();
    for w in [20, 40] {
        let xs = vec![step; w];
        let x = Tensor::new(vec![1, w, 4], xs.concat()).unwrap();
        let h = m.probe(&x, Probe::Features).unwrap().data()[0];
        let oracle = scalar_gru(&m, &xs);
        assert!((h - oracle).abs() < 1e-12, "W={w}: {h} vs {oracle}");
        finals.push(h);
    }
    // constant input drives the state to its fixed point
    assert!((finals[0] - finals[1]).abs() < 1e-3, "{finals:?}");
}

#[test]
fn unused_parameters_get_exactly_zero_gradient() {
    let mut m: Model<f64> = Model::new(ModelSpec::tiny(Arch::GruFcn, 2)).unwrap();
    // zero the head rows that read the FCN features
    let hw = m.params.index_of("head.w").unwrap();
    let hidden = m.spec.hidden;
    m.params.value_mut(hw).data_mut()[hidden..].fill(0.0);
    let (x, y) = probe_batch(&m.spec, 8, 1);
    let mut g = Graph::new();
    let xi = g.input(x);
    let z = m.forward(&mut g, xi).unwrap();
    let l = g.loss(z, &y, LossKind::Bce);
    let grads = g.backward(l).unwrap();
    for (i, t) in grads.iter() {
        if m.params.get(i).name.starts_with("fcn") {
            assert!(t.data().iter().all(|&v| v == 0.0), "{}", m.params.get(i).name);
        }
    }
}

#[test]
fn doubling_the_loss_doubles_gradients() {
    let m: Model<f64> = Model::new(ModelSpec::tiny(Arch::Lstm, 2)).unwrap();
    let (x, y) = probe_batch(&m.spec, 6, 1);
    let grads = |scale: f64| {
        let mut g = Graph::new();
        let xi = g.input(x.clone());
        let z = m.forward(&mut g, xi).unwrap();
        let l = g.loss(z, &y, LossKind::Bce);
        let l = g.scale(l, scale);
        g.backward(l).unwrap()
    };
    let (one, two) = (grads(1.0), grads(2.0));
    for ((_, a), (_, b)) in one.iter().zip(two.iter()) {
        for (u, v) in a.data().iter().zip(b.data()) {
            assert_eq!(2.0 * u, *v);
        }
    }
}

#[test]
fn tcn_is_causal() {
    let m: Model<f64> = Model::new(ModelSpec::new(Arch::Tcn, 5)).unwrap();
    let x = batch(1, 30, 0.0);
    let base = m.probe(&x, Probe::Sequence).unwrap();
    let c = base.shape()[2];
    for t in [0, 7, 15, 29] {
        let mut xp = x.clone();
        for ch in 0..4 {
            xp.data_mut()[t * 4 + ch] += 1.0;
        }
        let pert = m.probe(&xp, Probe::Sequence).unwrap();
        assert_eq!(&base.data()[..t * c], &pert.data()[..t * c], "t={t}");
        assert_ne!(&base.data()[t * c..], &pert.data()[t * c..]);
    }
}

#[test]
fn transformer_without_positions_ignores_order() {
    let spec = ModelSpec { positional_encoding: false, ..ModelSpec::new(Arch::Transformer, 8) };
    let m: Model<f64> = Model::new(spec).unwrap();
    let x = batch(1, 12, 0.3);
    let mut rows: Vec<&[f64]> = x.data().chunks(4).collect();
    rows.reverse();
    rows.swap(0, 5);
    let shuffled = Tensor::new(vec![1, 12, 4], rows.concat()).unwrap();
    let (a, b) = (m.predict_logits(&x).unwrap()[0], m.predict_logits(&shuffled).unwrap()[0]);
    assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    let with_pe: Model<f64> = Model::new(ModelSpec::new(Arch::Transformer, 8)).unwrap();
    assert_ne!(with_pe.predict_logits(&x).unwrap(), with_pe.predict_logits(&shuffled).unwrap());
}

#[test]
fn fcn_features_do_not_depend_on_repetition_count() {
    // The pattern is framed by more zeros than the FCN receptive field, so
    // every repetition sees the same neighbourhood. Biases start at zero,
    // which keeps all-zero regions at zero through every block.
    let m: Model<f64> = Model::new(ModelSpec::new(Arch::GruFcn, 6)).unwrap();
    let mut pattern = vec![[0.0; 4]; 8];
    for i in 0..6 {
        pattern.push([i as f64 * 0.3 - 0.5, (i as f64).cos(), 0.2, -(i as f64) * 0.1]);
    }
    pattern.extend(vec![[0.0; 4]; 8]);
    let w = pattern.len();
    let once = Tensor::new(vec![1, w, 4], pattern.concat()).unwrap();
    let twice = Tensor::new(vec![1, 2 * w, 4], [pattern.concat(), pattern.concat()].concat()).unwrap();
    let a = m.probe(&once, Probe::Features).unwrap();
    let b = m.probe(&twice, Probe::Features).unwrap();
    let h = m.spec.hidden;
    for (u, v) in a.data()[h..].iter().zip(&b.data()[h..]) {
        assert!((u - v).abs() < 1e-9, "{u} vs {v}");
    }
}

#[test]
fn initialization_is_reproducible() {
    for arch in Arch::ALL {
        let a: Model<f64> = Model::new(ModelSpec::new(arch, 42)).unwrap();
        let b: Model<f64> = Model::new(ModelSpec::new(arch, 42)).unwrap();
        let c: Model<f64> = Model::new(ModelSpec::new(arch, 43)).unwrap();
        assert_eq!(a.params.digest(), b.params.digest());
        assert_ne!(a.params.digest(), c.params.digest());
    }
}

#[test]
fn f32_models_run() {
    let m: keyscreen::ModelF32 = Model::new(ModelSpec::tiny(Arch::GruFcn, 1)).unwrap();
    let x: keyscreen::TensorF32 = Tensor::new(vec![2, 5, 4], (0..40).map(|i| i as f32 * 0.01).collect()).unwrap();
    assert!(m.predict_proba(&x).unwrap().iter().all(|p| (0.0..=1.0).contains(p)));
}

#[test]
fn bce_matches_direct_formula() {
    for i in 0..=200 {
        let z = -10.0 + i as f64 * 0.1;
        for y in [0.0, 1.0] {
            let p: f64 = 1.0 / (1.0 + (-z).exp());
            let direct = -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
            assert!((bce_with_logits(&[z], &[y]) - direct).abs() < 1e-10, "z={z} y={y}");
        }
    }
}

#[test]
fn focal_with_gamma_zero_halves_bce_gradients() {
    let z: [f64; 5] = [0.3, -2.0, 1.7, 4.0, -0.01];
    let y: [f64; 5] = [1.0, 0.0, 0.0, 1.0, 1.0];
    let f = loss_grad(LossKind::Focal { gamma: 0.0, alpha: 0.5 }, &z, &y);
    let b = loss_grad(LossKind::Bce, &z, &y);
    for (u, v) in f.iter().zip(&b) {
        assert!((u - 0.5 * v).abs() < 1e-10);
    }
}

proptest! {
    #[test]
    fn focal_gamma_zero_is_half_bce(
        batch in prop::collection::vec((-30.0f64..30.0, any::<bool>()), 1..32)
    ) {
        let z: Vec<f64> = batch.iter().map(|(z, _)| *z).collect();
        let y: Vec<f64> = batch.iter().map(|(_, y)| f64::from(u8::from(*y))).collect();
        let f = focal_loss(&z, &y, 0.0, 0.5);
        prop_assert!((f - 0.5 * bce_with_logits(&z, &y)).abs() < 1e-12);
        prop_assert!(f >= 0.0);
    }

    #[test]
    fn relative_error_is_symmetric(a in -1e3f64..1e3, b in -1e3f64..1e3) {
        prop_assert_eq!(relative_error(a, b), relative_error(b, a));
        prop_assert!(relative_error(a, b) <= 2.0);
    }
}

#[test]
fn adam_first_step_moves_by_lr() {
    let mut p = keyscreen::ParameterSet::new();
    p.add("w", Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap()).unwrap();
    let lr = 1e-3;
    let mut opt = Adam::new(AdamConfig::new(lr), &p);
    let mut g = Graph::new();
    let w = g.param(&p, 0);
    let s = g.scale(w, 3.0);
    let l = g.mean_all(s);
    let grads = g.backward(l).unwrap();
    let before = p.get(0).value.clone();
    opt.step(&mut p, &grads).unwrap();
    for (a, b) in before.data().iter().zip(p.get(0).value.data()) {
        assert!(((b - a) + lr).abs() < lr * 1e-3);
    }
}

#[test]
fn adam_zero_gradient_leaves_parameters() {
    let m: Model<f64> = Model::new(ModelSpec::tiny(Arch::Gru, 1)).unwrap();
    let mut params = m.params.clone();
    let mut opt = Adam::new(AdamConfig::new(0.1), &params);
    let mut g = Graph::new();
    let idx: Vec<_> = (0..params.len()).map(|i| g.param(&params, i)).collect();
    let z = g.scale(idx[0], 0.0);
    let l = g.mean_all(z);
    let grads = g.backward(l).unwrap();
    for _ in 0..20 {
        opt.step(&mut params, &grads).unwrap();
    }
    assert_eq!(params.digest(), m.params.digest());
}

fn train_steps(seed: u64, steps: usize) -> (String, Adam<f64>) {
    let mut m: Model<f64> = Model::new(ModelSpec::tiny(Arch::Transformer, seed)).unwrap();
    let mut opt = Adam::new(AdamConfig::new(1e-2), &m.params);
    let (x, y) = probe_batch(&m.spec, 6, seed);
    for _ in 0..steps {
        let mut g = Graph::new();
        let xi = g.input(x.clone());
        let z = m.forward(&mut g, xi).unwrap();
        let l = g.loss(z, &y, LossKind::Focal { gamma: 2.0, alpha: 0.5 });
        let grads = g.backward(l).unwrap();
        opt.step(&mut m.params, &grads).unwrap();
    }
    (m.params.digest(), opt)
}

#[test]
fn adam_runs_replay_bitwise() {
    let (a, oa) = train_steps(3, 10);
    let (b, ob) = train_steps(3, 10);
    assert_eq!(a, b);
    assert_eq!(oa, ob);
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let m: Model<f64> = Model::new(ModelSpec::new(Arch::Tcn, 77)).unwrap();
    let stats = ChannelStats {
        mean: [0.1, 0.2, 0.30000000000000004, -1e-17],
        std: [1.0 / 3.0, 2.5, 0.7, 1e-300],
        fitted_on: ["a".to_string(), "b".to_string()].into_iter().collect(),
    };
    let opt = Adam::new(AdamConfig::new(1e-3), &m.params);
    let ck = Checkpoint::new(&m, &stats, WindowingConfig::new(50, 25).unwrap(), Some(&opt), 7, 1e-3);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.json");
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.model().params.digest(), m.params.digest());
}

#[test]
fn gradient_check_detects_a_one_percent_error() {
    let m: Model<f64> = Model::new(ModelSpec::tiny(Arch::Transformer, 3)).unwrap();
    let (x, y) = probe_batch(&m.spec, 8, 1);
    let loss = |p: &keyscreen::ParameterSet| {
        let mm = Model { spec: m.spec.clone(), params: p.clone() };
        let mut g = Graph::inference();
        let xi = g.input(x.clone());
        let z = mm.forward(&mut g, xi)?;
        let l = g.loss(z, &y, LossKind::Bce);
        Ok(g.value(l).item())
    };
    let mut g = Graph::new();
    let xi = g.input(x.clone());
    let z = m.forward(&mut g, xi).unwrap();
    let l = g.loss(z, &y, LossKind::Bce);
    let exact = g.backward(l).unwrap();
    assert!(max_relative_error(&m.params, &exact, loss).unwrap() < 1e-4);
    let l2 = g.scale(l, 1.01);
    let skewed = g.backward(l2).unwrap();
    assert!(max_relative_error(&m.params, &skewed, loss).unwrap() > 5e-3);
}
