//! Focal classification loss plus L1 box regression.

use super::targets::TargetSet;
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::network::BOX_CODE_SIZE;
use crate::real::Real;

pub const FOCAL_GAMMA: f64 = 2.0;
pub const FOCAL_ALPHA: f64 = 0.25;
pub const REG_WEIGHT: f64 = 2.0;

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Focal loss of one logit and its derivative.
pub fn focal(x: f64, positive: bool) -> (f64, f64) {
    let p = crate::network::sigmoid(x);
    let g = FOCAL_GAMMA;
    if positive {
        let log_p = -softplus(-x);
        let q = 1.0 - p;
        let loss = -FOCAL_ALPHA * q.powf(g) * log_p;
        let grad = FOCAL_ALPHA * (g * q.powf(g) * p * log_p - q.powf(g + 1.0));
        (loss, grad)
    } else {
        let log_q = -softplus(x);
        let loss = -(1.0 - FOCAL_ALPHA) * p.powf(g) * log_q;
        let grad = (1.0 - FOCAL_ALPHA) * (p.powf(g + 1.0) - g * p.powf(g) * (1.0 - p) * log_q);
        (loss, grad)
    }
}

pub struct LossParts {
    pub total: Var,
    pub cls: f64,
    pub reg: f64,
}

/// `focal / max(1, P) + 2 * mean |box - target|` over the `8 P` regression
/// values of the `P` positive sites (no regression term without positives).
pub fn detection_loss<T: Real>(tape: &mut Tape<T>, cls: Var, boxes: Var, targets: &TargetSet) -> Result<LossParts> {
    let (cv, bv) = (tape.value(cls), tape.value(boxes));
    if (cv.rows(), cv.cols()) != (targets.cls.rows(), targets.cls.cols()) {
        return Err(Error::ShapeMismatch(format!(
            "class logits {}x{} vs targets {}x{}",
            cv.rows(),
            cv.cols(),
            targets.cls.rows(),
            targets.cls.cols()
        )));
    }
    if bv.rows() != cv.rows() || bv.cols() != BOX_CODE_SIZE {
        return Err(Error::ShapeMismatch(format!("box codes {}x{}", bv.rows(), bv.cols())));
    }
    let norm = targets.num_positive().max(1) as f64;
    let mut cls_loss = 0.0;
    let mut cls_grad = Matrix::<T>::zeros(cv.rows(), cv.cols());
    for (i, (&x, &t)) in cv.as_slice().iter().zip(targets.cls.as_slice()).enumerate() {
        let (l, d) = focal(x.to_f64(), t > 0.5);
        cls_loss += l;
        cls_grad.as_mut_slice()[i] = T::from_f64(d / norm);
    }
    cls_loss /= norm;

    let mut reg = 0.0;
    let mut reg_grad = Matrix::<T>::zeros(bv.rows(), bv.cols());
    let mut signs = Vec::with_capacity(targets.positives.len() * BOX_CODE_SIZE);
    if !targets.positives.is_empty() {
        let scale = REG_WEIGHT / (targets.positives.len() * BOX_CODE_SIZE) as f64;
        for (row, code) in &targets.positives {
            for (k, &t) in code.iter().enumerate() {
                let d = bv.get(*row, k).to_f64() - t;
                reg += scale * d.abs();
                signs.push(d > 0.0);
                let s = if d > 0.0 {
                    1.0
                } else if d < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                reg_grad.set(*row, k, T::from_f64(scale * s));
            }
        }
    }
    tape.record_branches(signs);
    let total = tape.scalar_fn(T::from_f64(cls_loss + reg), vec![(cls, cls_grad), (boxes, reg_grad)])?;
    Ok(LossParts {
        total,
        cls: cls_loss,
        reg,
    })
}
