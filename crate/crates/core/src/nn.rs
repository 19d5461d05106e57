//! Parameterized layers: thin wrappers that own parameter ids and emit tape ops.

use rand::Rng as _;

use crate::autograd::{SparseVar, Tape, Var};
use crate::conv::{init_params, kaiming_bound, KernelSpec};
use crate::error::Result;
use crate::matrix::Matrix;
use crate::real::Real;
use crate::rng;
use crate::store::{ParamId, ParamStore};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const LN_EPS: f64 = 1e-6;

/// Sparse convolution with weights `[K, C_in, C_out]` and optional bias `[C_out]`.
#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub spec: KernelSpec,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub c_in: usize,
    pub c_out: usize,
}

impl ConvLayer {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        spec: KernelSpec,
        c_in: usize,
        c_out: usize,
        bias: bool,
        seed: u64,
    ) -> Self {
        let p = init_params::<T>(&spec, c_in, c_out, rng::stream_seed(seed, name));
        let weight = store.add(format!("{name}.weight"), &[spec.volume(), c_in, c_out], p.weight, true);
        let bias = bias.then(|| store.add_filled(format!("{name}.bias"), &[c_out], T::ZERO, true));
        Self {
            spec,
            weight,
            bias,
            c_in,
            c_out,
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: &SparseVar) -> Result<SparseVar> {
        let rb = tape.rulebook(&x.layout, &self.spec)?;
        let w = tape.param(store, self.weight);
        let b = self.bias.map(|b| tape.param(store, b));
        tape.conv(x, &rb, w, b)
    }
}

/// Per-channel sparse convolution with weights `[K, C]` and bias `[C]`.
#[derive(Clone, Debug)]
pub struct DepthwiseConvLayer {
    pub spec: KernelSpec,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl DepthwiseConvLayer {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, spec: KernelSpec, channels: usize, seed: u64) -> Self {
        let bound = kaiming_bound(spec.volume(), 1);
        let mut r = rng::stream(seed, name);
        let data = (0..spec.volume() * channels)
            .map(|_| T::from_f64(r.gen_range(-bound..bound)))
            .collect();
        let weight = store.add(
            format!("{name}.weight"),
            &[spec.volume(), channels],
            Matrix::from_vec(spec.volume(), channels, data).expect("sized"),
            true,
        );
        let bias = store.add_filled(format!("{name}.bias"), &[channels], T::ZERO, true);
        Self { spec, weight, bias }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: &SparseVar) -> Result<SparseVar> {
        let rb = tape.rulebook(&x.layout, &self.spec)?;
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.depthwise_conv(x, &rb, w, Some(b))
    }
}

/// Batch norm over active rows with running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add_filled(format!("{name}.gamma"), &[channels], T::ONE, true),
            beta: store.add_filled(format!("{name}.beta"), &[channels], T::ZERO, true),
            running_mean: store.add_filled(format!("{name}.running_mean"), &[channels], T::ZERO, false),
            running_var: store.add_filled(format!("{name}.running_var"), &[channels], T::ONE, false),
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.batch_norm(
            x,
            g,
            b,
            (self.running_mean, self.running_var),
            (store.value(self.running_mean).row(0), store.value(self.running_var).row(0)),
            self.eps,
            self.momentum,
        )
    }

    pub fn forward_sparse<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: &SparseVar) -> Result<SparseVar> {
        Ok(SparseVar {
            layout: x.layout.clone(),
            var: self.forward(tape, store, x.var)?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add_filled(format!("{name}.gamma"), &[channels], T::ONE, true),
            beta: store.add_filled(format!("{name}.beta"), &[channels], T::ZERO, true),
            eps: LN_EPS,
        }
    }

    pub fn forward_sparse<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: &SparseVar) -> Result<SparseVar> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        Ok(SparseVar {
            layout: x.layout.clone(),
            var: tape.layer_norm(x.var, g, b, self.eps)?,
        })
    }
}

/// Conv, batch norm and optional ReLU.
#[derive(Clone, Debug)]
pub struct ConvBn {
    pub conv: ConvLayer,
    pub bn: BatchNorm,
    pub relu: bool,
}

impl ConvBn {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        spec: KernelSpec,
        c_in: usize,
        c_out: usize,
        relu: bool,
        seed: u64,
    ) -> Self {
        Self {
            conv: ConvLayer::new(store, &format!("{name}.conv"), spec, c_in, c_out, false, seed),
            bn: BatchNorm::new(store, &format!("{name}.bn"), c_out),
            relu,
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: &SparseVar) -> Result<SparseVar> {
        let y = self.conv.forward(tape, store, x)?;
        let y = self.bn.forward_sparse(tape, store, &y)?;
        Ok(if self.relu { tape.sparse_relu(&y) } else { y })
    }
}
