use rand::Rng as _;

use super::kernel::KernelSpec;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::real::Real;
use crate::rng;

/// Weights `[K, C_in, C_out]` stored as a `(K * C_in) x C_out` matrix, plus optional bias.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<T> {
    pub kernel_volume: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub weight: Matrix<T>,
    pub bias: Option<Vec<T>>,
}

impl<T: Real> ConvParams<T> {
    pub fn zeros(kernel_volume: usize, c_in: usize, c_out: usize, bias: bool) -> Self {
        Self {
            kernel_volume,
            c_in,
            c_out,
            weight: Matrix::zeros(kernel_volume * c_in, c_out),
            bias: bias.then(|| vec![T::ZERO; c_out]),
        }
    }

    /// Weight of input channel `ci` to output channel `co` at offset `k`.
    #[inline]
    pub fn w(&self, k: usize, ci: usize, co: usize) -> T {
        self.weight.get(k * self.c_in + ci, co)
    }

    pub fn set_w(&mut self, k: usize, ci: usize, co: usize, v: T) {
        self.weight.set(k * self.c_in + ci, co, v);
    }

    pub fn validate(&self, spec: &KernelSpec) -> Result<()> {
        if self.kernel_volume != spec.volume() {
            return Err(Error::ShapeMismatch(format!(
                "weights hold {} offsets, kernel has {}",
                self.kernel_volume,
                spec.volume()
            )));
        }
        if self.weight.rows() != self.kernel_volume * self.c_in || self.weight.cols() != self.c_out {
            return Err(Error::ShapeMismatch("weight matrix shape".into()));
        }
        if self.bias.as_ref().is_some_and(|b| b.len() != self.c_out) {
            return Err(Error::ShapeMismatch("bias length".into()));
        }
        if !self.weight.all_finite() || self.bias.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("conv params".into()));
        }
        Ok(())
    }
}

/// Kaiming-style uniform bound `sqrt(6 / fan_in)` with `fan_in = K * C_in`.
pub fn kaiming_bound(kernel_volume: usize, c_in: usize) -> f64 {
    (6.0 / (kernel_volume * c_in).max(1) as f64).sqrt()
}

/// Fan-in scaled uniform weights and zero bias, deterministic per seed.
pub fn init_params<T: Real>(spec: &KernelSpec, c_in: usize, c_out: usize, seed: u64) -> ConvParams<T> {
    let volume = spec.volume();
    let bound = kaiming_bound(volume, c_in);
    let mut rng = rng::stream(seed, "conv-init");
    let data = (0..volume * c_in * c_out)
        .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
        .collect();
    ConvParams {
        kernel_volume: volume,
        c_in,
        c_out,
        weight: Matrix::from_vec(volume * c_in, c_out, data).expect("sized"),
        bias: Some(vec![T::ZERO; c_out]),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_bounded() {
        let spec = KernelSpec::submanifold(&[3, 3]);
        let a = init_params::<f64>(&spec, 4, 5, 11);
        let b = init_params::<f64>(&spec, 4, 5, 11);
        let c = init_params::<f64>(&spec, 4, 5, 12);
        assert_eq!(a, b);
        assert_ne!(a.weight, c.weight);
        let bound = (6.0f64 / 36.0).sqrt();
        assert!(a.weight.as_slice().iter().all(|w| w.abs() <= bound));
        assert!(a.bias.as_ref().unwrap().iter().all(|&v| v == 0.0));
        a.validate(&spec).unwrap();
        assert!(a.validate(&KernelSpec::submanifold(&[5, 5])).is_err());
    }
}
