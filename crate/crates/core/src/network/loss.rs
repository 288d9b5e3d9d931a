//! Combined classification and distance-regression objective:
//! `total = nll(z_seg, y_seg) + lambda * l1(z_dist, y_dist)`.
//!
//! Both terms are class-weighted means. The NLL term averages
//! `-w[y] * log z_seg[y]` over non-void pixels, normalized by the sum of the
//! weights it used. The L1 term averages `w[k] * |z_dist[k] - y_dist[k]|`
//! over pixels and channels, normalized the same way, so `lambda` means the
//! same thing whatever the crop size.

use crate::edt::VoidPolicy;
use crate::raster::{FieldStack, LabelMask};
use crate::real::Real;
use crate::tensor::Tensor;

use super::NetworkError;

/// Probabilities are clamped here before the log.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy)]
pub struct LossInputs<'a, T> {
    /// Softmax output, `C x H x W`.
    pub z_seg: &'a Tensor<T>,
    /// Hardtanh output, `C x H x W`.
    pub z_dist: &'a Tensor<T>,
    pub y_seg: &'a LabelMask,
    pub y_dist: &'a FieldStack<T>,
    pub class_weights: &'a [T],
    pub lambda: T,
    pub void_policy: VoidPolicy,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue<T> {
    pub total: T,
    pub nll: T,
    pub l1: T,
    /// Pixels whose target probability hit [`PROB_FLOOR`].
    pub clamped: usize,
}

/// Gradients of the total loss w.r.t. the logits feeding the softmax and
/// w.r.t. the distance output (L1 term only).
pub(crate) struct OutputGrads<T> {
    pub logits: Tensor<T>,
    pub z_dist: Tensor<T>,
}

impl<'a, T: Real> LossInputs<'a, T> {
    pub(crate) fn validate(&self) -> Result<(), NetworkError> {
        let c = self.class_weights.len();
        let (h, w) = (self.y_seg.height(), self.y_seg.width());
        let want = [c, h, w];
        if self.z_seg.shape() != want || self.z_dist.shape() != want {
            return Err(NetworkError::ShapeMismatch(format!(
                "outputs {:?}/{:?} vs labels {:?}",
                self.z_seg.shape(),
                self.z_dist.shape(),
                want
            )));
        }
        if self.y_seg.classes() != c || (self.y_dist.channels(), self.y_dist.height(), self.y_dist.width()) != (c, h, w) {
            return Err(NetworkError::ShapeMismatch("label mask, distance targets and class weights disagree".into()));
        }
        if self.class_weights.iter().any(|w| !(w.is_finite() && *w >= T::zero())) {
            return Err(NetworkError::InvalidConfig("class weights must be finite and non-negative".into()));
        }
        if !(self.lambda.is_finite() && self.lambda >= T::zero()) {
            return Err(NetworkError::InvalidConfig("lambda must be finite and non-negative".into()));
        }
        Ok(())
    }

    fn in_l1(&self, p: usize) -> bool {
        self.void_policy == VoidPolicy::Background || !self.y_seg.is_void(p)
    }

    fn nll_norm(&self) -> T {
        let n = self.y_seg.data().len();
        (0..n).filter_map(|p| self.y_seg.class_at(p)).map(|y| self.class_weights[y]).sum()
    }

    fn l1_norm(&self) -> T {
        let n = self.y_seg.data().len();
        let pixels = (0..n).filter(|&p| self.in_l1(p)).count();
        let wsum: T = self.class_weights.iter().copied().sum();
        T::of(pixels as f64) * wsum
    }
}

pub fn loss<T: Real>(inputs: &LossInputs<'_, T>) -> Result<LossValue<T>, NetworkError> {
    inputs.validate()?;
    let c = inputs.class_weights.len();
    let n = inputs.y_seg.data().len();
    let floor = T::of(PROB_FLOOR);
    let z = inputs.z_seg.data();

    let mut nll = T::zero();
    let mut clamped = 0;
    for p in 0..n {
        if let Some(y) = inputs.y_seg.class_at(p) {
            let prob = z[y * n + p];
            if prob < floor {
                clamped += 1;
            }
            nll -= inputs.class_weights[y] * prob.max(floor).ln();
        }
    }
    let nll_norm = inputs.nll_norm();
    let nll = if nll_norm > T::zero() { nll / nll_norm } else { T::zero() };

    let mut l1 = T::zero();
    let (zd, yd) = (inputs.z_dist.data(), inputs.y_dist.data());
    for k in 0..c {
        let wk = inputs.class_weights[k];
        let mut acc = T::zero();
        for p in (0..n).filter(|&p| inputs.in_l1(p)) {
            acc += (zd[k * n + p] - yd[k * n + p]).abs();
        }
        l1 += wk * acc;
    }
    let l1_norm = inputs.l1_norm();
    let l1 = if l1_norm > T::zero() { l1 / l1_norm } else { T::zero() };

    if clamped > 0 {
        log::warn!("{clamped} pixel probabilities clamped to {PROB_FLOOR:e} in the NLL term");
    }
    Ok(LossValue { total: nll + inputs.lambda * l1, nll, l1, clamped })
}

/// Analytic output gradients of [`loss`]. The softmax and NLL are
/// differentiated jointly; a clamped pixel contributes no gradient.
pub(crate) fn output_grads<T: Real>(inputs: &LossInputs<'_, T>) -> Result<OutputGrads<T>, NetworkError> {
    inputs.validate()?;
    let c = inputs.class_weights.len();
    let n = inputs.y_seg.data().len();
    let shape = inputs.z_seg.shape().to_vec();
    let floor = T::of(PROB_FLOOR);
    let z = inputs.z_seg.data();

    let mut g_logits = vec![T::zero(); c * n];
    let nll_norm = inputs.nll_norm();
    if nll_norm > T::zero() {
        for p in 0..n {
            let Some(y) = inputs.y_seg.class_at(p) else { continue };
            if z[y * n + p] < floor {
                continue;
            }
            let scale = inputs.class_weights[y] / nll_norm;
            for k in 0..c {
                let target = if k == y { T::one() } else { T::zero() };
                g_logits[k * n + p] = scale * (z[k * n + p] - target);
            }
        }
    }

    let mut g_dist = vec![T::zero(); c * n];
    let l1_norm = inputs.l1_norm();
    if l1_norm > T::zero() && inputs.lambda > T::zero() {
        let (zd, yd) = (inputs.z_dist.data(), inputs.y_dist.data());
        for k in 0..c {
            let scale = inputs.lambda * inputs.class_weights[k] / l1_norm;
            for p in (0..n).filter(|&p| inputs.in_l1(p)) {
                let diff = zd[k * n + p] - yd[k * n + p];
                let sign = if diff > T::zero() {
                    T::one()
                } else if diff < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                };
                g_dist[k * n + p] = scale * sign;
            }
        }
    }

    Ok(OutputGrads {
        logits: Tensor::from_vec(shape.clone(), g_logits).unwrap(),
        z_dist: Tensor::from_vec(shape, g_dist).unwrap(),
    })
}
