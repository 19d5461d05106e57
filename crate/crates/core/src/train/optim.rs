//! Adam optimizer over the trainable entries of a parameter store.

use crate::autograd::Gradients;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::real::Real;
use crate::store::{ParamId, ParamStore};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub step: u64,
    moments: Vec<Option<(Matrix<T>, Matrix<T>)>>,
}

impl<T: Real> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            step: 0,
            moments: Vec::new(),
        }
    }

    /// One bias-corrected update; trainable entries without a gradient are
    /// treated as having a zero gradient.
    pub fn update(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>) -> Result<()> {
        let ids: Vec<ParamId> = store.ids().collect();
        if self.moments.len() < ids.len() {
            self.moments.resize(ids.len(), None);
        }
        for &id in &ids {
            if let Some(g) = grads.param(id) {
                let v = store.value(id);
                if (g.rows(), g.cols()) != (v.rows(), v.cols()) {
                    return Err(Error::ShapeMismatch(format!("gradient of `{}`", store.entry(id).name)));
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - ADAM_BETA1.powi(t);
        let c2 = 1.0 - ADAM_BETA2.powi(t);
        let (b1, b2) = (T::from_f64(ADAM_BETA1), T::from_f64(ADAM_BETA2));
        let (nb1, nb2) = (T::from_f64(1.0 - ADAM_BETA1), T::from_f64(1.0 - ADAM_BETA2));
        for id in ids {
            if !store.entry(id).trainable {
                continue;
            }
            let value = store.value_mut(id);
            let (rows, cols) = (value.rows(), value.cols());
            let (m, v) = self.moments[id.index()].get_or_insert_with(|| (Matrix::zeros(rows, cols), Matrix::zeros(rows, cols)));
            let zero;
            let g = match grads.param(id) {
                Some(g) => g,
                None => {
                    zero = Matrix::zeros(rows, cols);
                    &zero
                }
            };
            for i in 0..rows * cols {
                let gi = g.as_slice()[i];
                let mi = b1 * m.as_slice()[i] + nb1 * gi;
                let vi = b2 * v.as_slice()[i] + nb2 * gi * gi;
                m.as_mut_slice()[i] = mi;
                v.as_mut_slice()[i] = vi;
                let m_hat = mi.to_f64() / c1;
                let v_hat = vi.to_f64() / c2;
                let delta = self.lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                value.as_mut_slice()[i] -= T::from_f64(delta);
            }
        }
        Ok(())
    }
}
