//! Forward rules. Each method computes its value, records what the backward
//! rule needs and returns the new node.

use std::sync::Arc;

use super::{Op, SparseVar, StatUpdate, Tape, Var};
use crate::conv::Rulebook;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::real::Real;
use crate::store::ParamId;
use crate::tensor::Layout;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    /// Per-channel maximum.
    Max,
    /// Concatenated per-channel `[max, min, mean]`.
    MaxMinMean,
}

const GEMM_BLOCK: usize = 128;

/// `out[r] += a[r] * w` for every row of `a`; `w` is `c_in x c_out` row-major.
#[inline]
pub(crate) fn gemm_acc<T: Real>(a: &[T], w: &[T], out: &mut [T], rows: usize, c_in: usize, c_out: usize) {
    for r in 0..rows {
        let arow = &a[r * c_in..(r + 1) * c_in];
        let orow = &mut out[r * c_out..(r + 1) * c_out];
        for (ci, &av) in arow.iter().enumerate() {
            let wrow = &w[ci * c_out..(ci + 1) * c_out];
            for (o, &wv) in orow.iter_mut().zip(wrow) {
                *o += av * wv;
            }
        }
    }
}

fn check_cols<T: Real>(m: &Matrix<T>, expected: usize) -> Result<()> {
    if m.cols() != expected {
        return Err(Error::ChannelMismatch {
            expected,
            got: m.cols(),
        });
    }
    Ok(())
}

fn check_rulebook(x: &SparseVar, rb: &Rulebook) -> Result<()> {
    if rb.input_layout_id() != x.layout.id() || rb.n_in() != x.layout.len() {
        return Err(Error::ShapeMismatch("rulebook was built for another layout".into()));
    }
    Ok(())
}

/// Standard normal CDF and density.
#[inline]
pub(crate) fn gelu_parts<T: Real>(x: T) -> (T, T) {
    let half = T::from_f64(0.5);
    let cdf = half * (T::ONE + (x * T::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * half).exp() * T::from_f64(0.398_942_280_401_432_7);
    (cdf, pdf)
}

impl<T: Real> Tape<T> {
    /// Sparse convolution driven by `rb`: for every offset, gather the paired
    /// input rows, multiply by that offset's weight block and scatter-add into
    /// the outputs. `w` is `(K * C_in) x C_out`, `b` is `1 x C_out`.
    pub fn conv(&mut self, x: &SparseVar, rb: &Arc<Rulebook>, w: Var, b: Option<Var>) -> Result<SparseVar> {
        check_rulebook(x, rb)?;
        let xv = self.value(x.var);
        let wv = self.value(w);
        let volume = rb.kernel_volume();
        let c_in = xv.cols();
        if wv.rows() != volume * c_in {
            return Err(Error::ChannelMismatch {
                expected: wv.rows() / volume.max(1),
                got: c_in,
            });
        }
        let c_out = wv.cols();
        let n_out = rb.out_layout().len();
        let mut out = Matrix::zeros(n_out, c_out);
        if let Some(b) = b {
            let bv = self.value(b);
            check_cols(bv, c_out)?;
            for r in 0..n_out {
                out.row_mut(r).copy_from_slice(bv.row(0));
            }
        }
        let mut gathered = vec![T::ZERO; GEMM_BLOCK * c_in];
        let mut product = vec![T::ZERO; GEMM_BLOCK * c_out];
        for k in 0..volume {
            let wk = &wv.as_slice()[k * c_in * c_out..(k + 1) * c_in * c_out];
            for chunk in rb.pairs(k).chunks(GEMM_BLOCK) {
                for (j, &(i, _)) in chunk.iter().enumerate() {
                    gathered[j * c_in..(j + 1) * c_in].copy_from_slice(xv.row(i as usize));
                }
                let rows = chunk.len();
                product[..rows * c_out].iter_mut().for_each(|v| *v = T::ZERO);
                gemm_acc(&gathered, wk, &mut product, rows, c_in, c_out);
                for (j, &(_, o)) in chunk.iter().enumerate() {
                    for (acc, &p) in out.row_mut(o as usize).iter_mut().zip(&product[j * c_out..(j + 1) * c_out]) {
                        *acc += p;
                    }
                }
            }
        }
        let layout = Arc::clone(rb.out_layout());
        let var = self.push(
            out,
            Op::Conv {
                x: x.var,
                w,
                b,
                rb: Arc::clone(rb),
            },
        );
        Ok(SparseVar { layout, var })
    }

    /// Per-channel convolution; `w` is `K x C`, `b` is `1 x C`.
    pub fn depthwise_conv(&mut self, x: &SparseVar, rb: &Arc<Rulebook>, w: Var, b: Option<Var>) -> Result<SparseVar> {
        check_rulebook(x, rb)?;
        let xv = self.value(x.var);
        let wv = self.value(w);
        let c = xv.cols();
        check_cols(wv, c)?;
        if wv.rows() != rb.kernel_volume() {
            return Err(Error::ShapeMismatch("depthwise weight rows != kernel volume".into()));
        }
        let n_out = rb.out_layout().len();
        let mut out = Matrix::zeros(n_out, c);
        if let Some(b) = b {
            let bv = self.value(b);
            check_cols(bv, c)?;
            for r in 0..n_out {
                out.row_mut(r).copy_from_slice(bv.row(0));
            }
        }
        for k in 0..rb.kernel_volume() {
            let wk = wv.row(k);
            for &(i, o) in rb.pairs(k) {
                let xi = xv.row(i as usize);
                for ((acc, &xv), &wv) in out.row_mut(o as usize).iter_mut().zip(xi).zip(wk) {
                    *acc += xv * wv;
                }
            }
        }
        let layout = Arc::clone(rb.out_layout());
        let var = self.push(
            out,
            Op::Depthwise {
                x: x.var,
                w,
                b,
                rb: Arc::clone(rb),
            },
        );
        Ok(SparseVar { layout, var })
    }

    /// `x (n x a) * w (a x b)`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(w);
        if xv.cols() != wv.rows() {
            return Err(Error::ChannelMismatch {
                expected: wv.rows(),
                got: xv.cols(),
            });
        }
        let mut out = Matrix::zeros(xv.rows(), wv.cols());
        gemm_acc(xv.as_slice(), wv.as_slice(), out.as_mut_slice(), xv.rows(), xv.cols(), wv.cols());
        Ok(self.push(out, Op::MatMul { x, w }))
    }

    /// Train-mode batch norm over all rows. Returns the output plus the batch
    /// mean and unbiased variance. Zero rows pass through; one row is an error.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, Vec<T>, Vec<T>)> {
        let xv = self.value(x);
        let (n, c) = (xv.rows(), xv.cols());
        check_cols(self.value(gamma), c)?;
        check_cols(self.value(beta), c)?;
        if n == 1 {
            return Err(Error::TooFewRows(n));
        }
        let mut mean = vec![T::ZERO; c];
        let mut var = vec![T::ZERO; c];
        if n > 0 {
            for r in 0..n {
                for (m, &v) in mean.iter_mut().zip(xv.row(r)) {
                    *m += v;
                }
            }
            let nf = T::from_usize(n);
            mean.iter_mut().for_each(|m| *m /= nf);
            for r in 0..n {
                for ((s, &v), &m) in var.iter_mut().zip(xv.row(r)).zip(&mean) {
                    let d = v - m;
                    *s += d * d;
                }
            }
            var.iter_mut().for_each(|s| *s /= nf);
        }
        let eps_t = T::from_f64(eps);
        let inv_std: Vec<T> = var.iter().map(|&v| T::ONE / (v + eps_t).sqrt()).collect();
        let (out, xhat) = self.normalize_columns(x, gamma, beta, &mean, &inv_std);
        let unbiased = if n > 1 {
            let f = T::from_usize(n) / T::from_usize(n - 1);
            var.iter().map(|&v| v * f).collect()
        } else {
            var.clone()
        };
        let var_node = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train: true,
            },
        );
        Ok((var_node, mean, unbiased))
    }

    /// Eval-mode batch norm with fixed statistics.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[T], var: &[T], eps: f64) -> Result<Var> {
        let c = self.value(x).cols();
        check_cols(self.value(gamma), c)?;
        check_cols(self.value(beta), c)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::ChannelMismatch {
                expected: c,
                got: mean.len(),
            });
        }
        let eps_t = T::from_f64(eps);
        let inv_std: Vec<T> = var.iter().map(|&v| T::ONE / (v + eps_t).sqrt()).collect();
        let (out, xhat) = self.normalize_columns(x, gamma, beta, mean, &inv_std);
        Ok(self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train: false,
            },
        ))
    }

    fn normalize_columns(&self, x: Var, gamma: Var, beta: Var, mean: &[T], inv_std: &[T]) -> (Matrix<T>, Matrix<T>) {
        let xv = self.value(x);
        let (g, b) = (self.value(gamma).row(0), self.value(beta).row(0));
        let mut xhat = Matrix::zeros(xv.rows(), xv.cols());
        let mut out = Matrix::zeros(xv.rows(), xv.cols());
        for r in 0..xv.rows() {
            for c in 0..xv.cols() {
                let h = (xv.get(r, c) - mean[c]) * inv_std[c];
                xhat.set(r, c, h);
                out.set(r, c, g[c] * h + b[c]);
            }
        }
        (out, xhat)
    }

    /// Batch norm with running-statistics bookkeeping handled by the tape's mode.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: (ParamId, ParamId),
        running_values: (&[T], &[T]),
        eps: f64,
        momentum: f64,
    ) -> Result<Var> {
        match self.mode {
            super::NormMode::Train => {
                let n = self.value(x).rows();
                let (y, mean, var) = self.batch_norm_train(x, gamma, beta, eps)?;
                if n > 0 {
                    self.push_stat_update(StatUpdate {
                        running_mean: running.0,
                        running_var: running.1,
                        batch_mean: mean,
                        batch_var: var,
                        momentum,
                    });
                }
                Ok(y)
            }
            super::NormMode::Eval => self.batch_norm_eval(x, gamma, beta, running_values.0, running_values.1, eps),
        }
    }

    /// Normalizes each row over its channels, then scales and shifts per channel.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let (n, c) = (xv.rows(), xv.cols());
        check_cols(self.value(gamma), c)?;
        check_cols(self.value(beta), c)?;
        let (g, b) = (self.value(gamma).row(0), self.value(beta).row(0));
        let cf = T::from_usize(c.max(1));
        let eps_t = T::from_f64(eps);
        let mut xhat = Matrix::zeros(n, c);
        let mut out = Matrix::zeros(n, c);
        let mut inv_std = Vec::with_capacity(n);
        for r in 0..n {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / cf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cf;
            let is = T::ONE / (var + eps_t).sqrt();
            inv_std.push(is);
            for ch in 0..c {
                let h = (row[ch] - mean) * is;
                xhat.set(r, ch, h);
                out.set(r, ch, g[ch] * h + b[ch]);
            }
        }
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let out = xv.map(|v| if v > T::ZERO { v } else { T::ZERO });
        let signs: Vec<bool> = xv.as_slice().iter().map(|&v| v > T::ZERO).collect();
        self.record_branches(signs);
        self.push(out, Op::Relu { x })
    }

    /// Exact GELU, `x * Phi(x)`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * gelu_parts(v).0);
        self.push(out, Op::Gelu { x })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if (av.rows(), av.cols()) != (bv.rows(), bv.cols()) {
            return Err(Error::ShapeMismatch(format!(
                "add {}x{} + {}x{}",
                av.rows(),
                av.cols(),
                bv.rows(),
                bv.cols()
            )));
        }
        let mut out = av.clone();
        out.add_assign(bv);
        Ok(self.push(out, Op::Add { a, b }))
    }

    pub fn sparse_add(&mut self, a: &SparseVar, b: &SparseVar) -> Result<SparseVar> {
        if !Arc::ptr_eq(&a.layout, &b.layout) {
            return Err(Error::ShapeMismatch("sparse add needs a shared layout".into()));
        }
        let var = self.add(a.var, b.var)?;
        Ok(SparseVar {
            layout: Arc::clone(&a.layout),
            var,
        })
    }

    pub fn sparse_relu(&mut self, x: &SparseVar) -> SparseVar {
        SparseVar {
            layout: Arc::clone(&x.layout),
            var: self.relu(x.var),
        }
    }

    pub fn sparse_gelu(&mut self, x: &SparseVar) -> SparseVar {
        SparseVar {
            layout: Arc::clone(&x.layout),
            var: self.gelu(x.var),
        }
    }

    /// `out[map[i]] += part[i]` for every part, into an `n_out x cols` matrix.
    pub fn scatter(&mut self, parts: Vec<(Var, Vec<u32>)>, n_out: usize, cols: usize) -> Result<Var> {
        let mut out = Matrix::zeros(n_out, cols);
        for (v, map) in &parts {
            let pv = self.value(*v);
            check_cols(pv, cols)?;
            if map.len() != pv.rows() || map.iter().any(|&m| m as usize >= n_out) {
                return Err(Error::ShapeMismatch("scatter map".into()));
            }
            for (i, &m) in map.iter().enumerate() {
                for (o, &p) in out.row_mut(m as usize).iter_mut().zip(pv.row(i)) {
                    *o += p;
                }
            }
        }
        Ok(self.push(out, Op::Scatter { parts }))
    }

    /// Re-home features on another layout with the same number of rows.
    pub fn relayout(&self, x: &SparseVar, layout: Arc<Layout>) -> Result<SparseVar> {
        if layout.len() != x.layout.len() {
            return Err(Error::ShapeMismatch("relayout row count".into()));
        }
        Ok(SparseVar { layout, var: x.var })
    }

    /// Pools contiguous row groups `offsets[g]..offsets[g + 1]`. Max and min
    /// route their gradient to the first row achieving the extreme.
    pub fn pool(&mut self, x: Var, offsets: Arc<Vec<usize>>, kind: PoolKind) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        let groups = offsets.len().saturating_sub(1);
        if offsets.first().is_some_and(|&o| o != 0) || offsets.last().map_or(xv.rows() != 0, |&o| o != xv.rows()) {
            return Err(Error::ShapeMismatch("pool offsets do not cover the rows".into()));
        }
        let width = match kind {
            PoolKind::Max => c,
            PoolKind::MaxMinMean => 3 * c,
        };
        let mut out = Matrix::zeros(groups, width);
        let mut arg_max = vec![0u32; groups * c];
        let mut arg_min = vec![0u32; groups * c];
        for g in 0..groups {
            let (lo, hi) = (offsets[g], offsets[g + 1]);
            if hi <= lo {
                return Err(Error::EmptyGroup);
            }
            for ch in 0..c {
                let (mut imax, mut imin) = (lo, lo);
                let mut sum = T::ZERO;
                for r in lo..hi {
                    let v = xv.get(r, ch);
                    if v > xv.get(imax, ch) {
                        imax = r;
                    }
                    if v < xv.get(imin, ch) {
                        imin = r;
                    }
                    sum += v;
                }
                arg_max[g * c + ch] = imax as u32;
                arg_min[g * c + ch] = imin as u32;
                out.set(g, ch, xv.get(imax, ch));
                if kind == PoolKind::MaxMinMean {
                    out.set(g, c + ch, xv.get(imin, ch));
                    out.set(g, 2 * c + ch, sum / T::from_usize(hi - lo));
                }
            }
        }
        for &a in &arg_max {
            self.record_kink(a as u64);
        }
        if kind == PoolKind::MaxMinMean {
            for &a in &arg_min {
                self.record_kink(!(a as u64));
            }
        }
        Ok(self.push(
            out,
            Op::Pool {
                x,
                offsets,
                kind,
                arg_max,
                arg_min,
            },
        ))
    }

    /// Scalar node with known partial derivatives `d value / d input`.
    pub fn scalar_fn(&mut self, value: T, inputs: Vec<(Var, Matrix<T>)>) -> Result<Var> {
        for (v, g) in &inputs {
            let iv = self.value(*v);
            if (iv.rows(), iv.cols()) != (g.rows(), g.cols()) {
                return Err(Error::ShapeMismatch("scalar_fn partial shape".into()));
            }
        }
        Ok(self.push(Matrix::scalar(value), Op::Scalar { inputs }))
    }

    /// `sum(x .* weights)`.
    pub fn dot(&mut self, x: Var, weights: Matrix<T>) -> Result<Var> {
        let xv = self.value(x);
        if (xv.rows(), xv.cols()) != (weights.rows(), weights.cols()) {
            return Err(Error::ShapeMismatch("dot weights".into()));
        }
        let value = xv.as_slice().iter().zip(weights.as_slice()).map(|(&a, &b)| a * b).sum();
        self.scalar_fn(value, vec![(x, weights)])
    }

    /// Sum of several scalar nodes.
    pub fn sum_scalars(&mut self, terms: &[Var]) -> Result<Var> {
        let mut value = T::ZERO;
        let mut inputs = Vec::with_capacity(terms.len());
        for &t in terms {
            value += self.value(t).get(0, 0);
            inputs.push((t, Matrix::scalar(T::ONE)));
        }
        self.scalar_fn(value, inputs)
    }
}
