//! Central finite-difference checks of analytic gradients.

use crate::error::Result;
use crate::nn::graph::{Gradients, Graph};
use crate::nn::loss::LossKind;
use crate::nn::model::{Model, ModelSpec};
use crate::nn::params::ParameterSet;
use crate::nn::tensor::Tensor;
use crate::rng;

pub const FD_EPS: f64 = 1e-5;

/// Below this magnitude gradients are compared absolutely. Central
/// differences carry round-off of roughly `1e-16 * |loss| / FD_EPS`, about
/// 1e-11 here, so structurally zero gradients (the attention key bias, for
/// one) would otherwise show large relative errors.
pub const GRAD_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, GRAD_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

/// Compares `grad` against central differences of `loss` over every
/// trainable parameter element and returns the largest relative error.
pub fn max_relative_error(
    params: &ParameterSet<f64>,
    grads: &Gradients<f64>,
    loss: impl Fn(&ParameterSet<f64>) -> Result<f64>,
) -> Result<f64> {
    let mut worst = 0.0f64;
    for idx in 0..params.len() {
        if !params.get(idx).trainable {
            continue;
        }
        let n = params.get(idx).value.numel();
        for j in 0..n {
            let mut plus = params.clone();
            plus.value_mut(idx).data_mut()[j] += FD_EPS;
            let mut minus = params.clone();
            minus.value_mut(idx).data_mut()[j] -= FD_EPS;
            let numeric = (loss(&plus)? - loss(&minus)?) / (2.0 * FD_EPS);
            let analytic = grads.get(idx).map_or(0.0, |g| g.data()[j]);
            worst = worst.max(relative_error(analytic, numeric));
        }
    }
    Ok(worst)
}

/// A seeded two-sample batch `[2, w, channels]` with labels `[1, 0]`.
pub fn probe_batch(spec: &ModelSpec, w: usize, seed: u64) -> (Tensor<f64>, Vec<f64>) {
    use rand_distr::{Distribution, StandardNormal};
    let mut r = rng::rng_for(seed, &[0xC4EC]);
    let data = (0..2 * w * spec.input_channels).map(|_| StandardNormal.sample(&mut r)).collect();
    (Tensor::new(vec![2, w, spec.input_channels], data).expect("shape"), vec![1.0, 0.0])
}

fn model_loss(model: &Model<f64>, x: &Tensor<f64>, y: &[f64], kind: LossKind, graph: &mut Graph<f64>) -> Result<crate::nn::graph::Var> {
    let xi = graph.input(x.clone());
    let z = model.forward(graph, xi)?;
    Ok(graph.loss(z, y, kind))
}

/// Max relative error for `model` on the given batch.
pub fn check_model(model: &Model<f64>, x: &Tensor<f64>, y: &[f64], kind: LossKind) -> Result<f64> {
    let mut g = Graph::new();
    let l = model_loss(model, x, y, kind, &mut g)?;
    let grads = g.backward(l)?;
    max_relative_error(&model.params, &grads, |p| {
        let m = Model { spec: model.spec.clone(), params: p.clone() };
        let mut g = Graph::inference();
        let l = model_loss(&m, x, y, kind, &mut g)?;
        Ok(g.value(l).item())
    })
}

/// Builds the model described by `spec`, draws a 2-sample batch of length
/// `w` and returns the max relative gradient error under BCE.
pub fn grad_check(spec: &ModelSpec, w: usize, seed: u64) -> Result<f64> {
    let model = Model::new(spec.clone())?;
    let (x, y) = probe_batch(spec, w, seed);
    check_model(&model, &x, &y, LossKind::Bce)
}
