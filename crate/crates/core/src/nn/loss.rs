//! Binary classification losses on logits.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LossKind {
    Bce,
    /// `alpha` weights the positive class, `1 - alpha` the negative one.
    Focal { gamma: f64, alpha: f64 },
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
fn sign<T: Scalar>(label: T) -> T {
    label + label - T::one()
}

/// Mean of `ln(1 + exp(-z (2y - 1)))`.
pub fn bce_with_logits<T: Scalar>(logits: &[T], labels: &[T]) -> T {
    assert_eq!(logits.len(), labels.len());
    let sum = logits.iter().zip(labels).fold(T::zero(), |acc, (&z, &y)| acc + softplus(-sign(y) * z));
    sum / T::from_usize(logits.len()).expect("batch size fits scalar")
}

/// Mean of `-alpha_t (1 - p_t)^gamma ln p_t` where `p_t` is the probability
/// assigned to the true class.
pub fn focal_loss<T: Scalar>(logits: &[T], labels: &[T], gamma: T, alpha: T) -> T {
    assert_eq!(logits.len(), labels.len());
    let sum = logits.iter().zip(labels).fold(T::zero(), |acc, (&z, &y)| {
        let u = sign(y) * z;
        let q = sigmoid(-u);
        let alpha_t = if y > T::lit(0.5) { alpha } else { T::one() - alpha };
        acc + alpha_t * q.powf(gamma) * softplus(-u)
    });
    sum / T::from_usize(logits.len()).expect("batch size fits scalar")
}

pub fn loss_value<T: Scalar>(kind: LossKind, logits: &[T], labels: &[T]) -> T {
    match kind {
        LossKind::Bce => bce_with_logits(logits, labels),
        LossKind::Focal { gamma, alpha } => focal_loss(logits, labels, T::lit(gamma), T::lit(alpha)),
    }
}

/// Derivative of the mean loss with respect to each logit.
pub fn loss_grad<T: Scalar>(kind: LossKind, logits: &[T], labels: &[T]) -> Vec<T> {
    let n = T::from_usize(logits.len()).expect("batch size fits scalar");
    logits
        .iter()
        .zip(labels)
        .map(|(&z, &y)| {
            let g = match kind {
                LossKind::Bce => sigmoid(z) - y,
                LossKind::Focal { gamma, alpha } => {
                    let s = sign(y);
                    let u = s * z;
                    let p = sigmoid(u);
                    let q = sigmoid(-u);
                    let alpha_t = if y > T::lit(0.5) { T::lit(alpha) } else { T::one() - T::lit(alpha) };
                    let dl_du = -alpha_t * q.powf(T::lit(gamma)) * (T::lit(gamma) * p * softplus(-u) + q);
                    s * dl_du
                }
            };
            g / n
        })
        .collect()
}
