//! Backward rules, visited in reverse recording order.

use std::collections::BTreeMap;

use super::ops::{gelu_parts, PoolKind};
use super::{Gradients, Op, Tape, Var};
use crate::error::Result;
use crate::matrix::Matrix;
use crate::real::Real;

fn accumulate<T: Real>(grads: &mut [Option<Matrix<T>>], v: Var, g: Matrix<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn column_sums<T: Real>(m: &Matrix<T>) -> Matrix<T> {
    let mut out = Matrix::zeros(1, m.cols());
    for r in 0..m.rows() {
        for (o, &v) in out.row_mut(0).iter_mut().zip(m.row(r)) {
            *o += v;
        }
    }
    out
}

pub(super) fn run<T: Real>(tape: &Tape<T>, root: Var, seed: Matrix<T>) -> Result<Gradients<T>> {
    let n = tape.nodes.len();
    let mut grads: Vec<Option<Matrix<T>>> = (0..n).map(|_| None).collect();
    let mut params = BTreeMap::new();
    grads[root.0] = Some(seed);

    for idx in (0..=root.0).rev() {
        let Some(dy) = grads[idx].take() else {
            continue;
        };
        let node = &tape.nodes[idx];
        match &node.op {
            Op::Leaf { param } => {
                if let Some(p) = param {
                    params
                        .entry(*p)
                        .and_modify(|g: &mut Matrix<T>| g.add_assign(&dy))
                        .or_insert_with(|| dy.clone());
                }
                grads[idx] = Some(dy);
            }
            Op::Conv { x, w, b, rb } => {
                let xv = tape.value(*x);
                let wv = tape.value(*w);
                let (c_in, c_out) = (xv.cols(), wv.cols());
                let mut dx = Matrix::zeros(xv.rows(), c_in);
                let mut dw = Matrix::zeros(wv.rows(), c_out);
                for k in 0..rb.kernel_volume() {
                    let base = k * c_in;
                    for &(i, o) in rb.pairs(k) {
                        let (i, o) = (i as usize, o as usize);
                        let g = dy.row(o);
                        let xi = xv.row(i);
                        for ci in 0..c_in {
                            let wrow = wv.row(base + ci);
                            let mut acc = T::ZERO;
                            for (&wv, &gv) in wrow.iter().zip(g) {
                                acc += wv * gv;
                            }
                            dx.as_mut_slice()[i * c_in + ci] += acc;
                            let xval = xi[ci];
                            for (d, &gv) in dw.row_mut(base + ci).iter_mut().zip(g) {
                                *d += xval * gv;
                            }
                        }
                    }
                }
                if let Some(b) = b {
                    accumulate(&mut grads, *b, column_sums(&dy));
                }
                accumulate(&mut grads, *x, dx);
                accumulate(&mut grads, *w, dw);
            }
            Op::Depthwise { x, w, b, rb } => {
                let xv = tape.value(*x);
                let wv = tape.value(*w);
                let c = xv.cols();
                let mut dx = Matrix::zeros(xv.rows(), c);
                let mut dw = Matrix::zeros(wv.rows(), c);
                for k in 0..rb.kernel_volume() {
                    for &(i, o) in rb.pairs(k) {
                        let (i, o) = (i as usize, o as usize);
                        for ch in 0..c {
                            let g = dy.get(o, ch);
                            dx.as_mut_slice()[i * c + ch] += wv.get(k, ch) * g;
                            dw.as_mut_slice()[k * c + ch] += xv.get(i, ch) * g;
                        }
                    }
                }
                if let Some(b) = b {
                    accumulate(&mut grads, *b, column_sums(&dy));
                }
                accumulate(&mut grads, *x, dx);
                accumulate(&mut grads, *w, dw);
            }
            Op::MatMul { x, w } => {
                let xv = tape.value(*x);
                let wv = tape.value(*w);
                let (n, a, bcols) = (xv.rows(), xv.cols(), wv.cols());
                let mut dx = Matrix::zeros(n, a);
                let mut dw = Matrix::zeros(a, bcols);
                for r in 0..n {
                    let g = dy.row(r);
                    for ci in 0..a {
                        let mut acc = T::ZERO;
                        for (&wv, &gv) in wv.row(ci).iter().zip(g) {
                            acc += wv * gv;
                        }
                        dx.set(r, ci, acc);
                        let xval = xv.get(r, ci);
                        for (d, &gv) in dw.row_mut(ci).iter_mut().zip(g) {
                            *d += xval * gv;
                        }
                    }
                }
                accumulate(&mut grads, *x, dx);
                accumulate(&mut grads, *w, dw);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let gv = tape.value(*gamma).row(0);
                let (rows, c) = (dy.rows(), dy.cols());
                let dgamma = {
                    let mut m = Matrix::zeros(1, c);
                    for r in 0..rows {
                        for ch in 0..c {
                            m.as_mut_slice()[ch] += dy.get(r, ch) * xhat.get(r, ch);
                        }
                    }
                    m
                };
                let dbeta = column_sums(&dy);
                let mut dx = Matrix::zeros(rows, c);
                if *train {
                    let nf = T::from_usize(rows.max(1));
                    for ch in 0..c {
                        let scale = gv[ch] * inv_std[ch] / nf;
                        let (sum_dy, sum_dy_xhat) = (dbeta.get(0, ch), dgamma.get(0, ch));
                        for r in 0..rows {
                            let v = scale * (nf * dy.get(r, ch) - sum_dy - xhat.get(r, ch) * sum_dy_xhat);
                            dx.set(r, ch, v);
                        }
                    }
                } else {
                    for r in 0..rows {
                        for ch in 0..c {
                            dx.set(r, ch, dy.get(r, ch) * gv[ch] * inv_std[ch]);
                        }
                    }
                }
                accumulate(&mut grads, *x, dx);
                accumulate(&mut grads, *gamma, dgamma);
                accumulate(&mut grads, *beta, dbeta);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gv = tape.value(*gamma).row(0);
                let (rows, c) = (dy.rows(), dy.cols());
                let cf = T::from_usize(c.max(1));
                let mut dgamma = Matrix::zeros(1, c);
                let mut dx = Matrix::zeros(rows, c);
                let mut dxhat = vec![T::ZERO; c];
                for r in 0..rows {
                    let (mut s1, mut s2) = (T::ZERO, T::ZERO);
                    for ch in 0..c {
                        let g = dy.get(r, ch);
                        dgamma.as_mut_slice()[ch] += g * xhat.get(r, ch);
                        dxhat[ch] = g * gv[ch];
                        s1 += dxhat[ch];
                        s2 += dxhat[ch] * xhat.get(r, ch);
                    }
                    let scale = inv_std[r] / cf;
                    for ch in 0..c {
                        dx.set(r, ch, scale * (cf * dxhat[ch] - s1 - xhat.get(r, ch) * s2));
                    }
                }
                accumulate(&mut grads, *x, dx);
                accumulate(&mut grads, *gamma, dgamma);
                accumulate(&mut grads, *beta, column_sums(&dy));
            }
            Op::Relu { x } => {
                let xv = tape.value(*x);
                let mut dx = dy;
                for (d, &v) in dx.as_mut_slice().iter_mut().zip(xv.as_slice()) {
                    if v <= T::ZERO {
                        *d = T::ZERO;
                    }
                }
                accumulate(&mut grads, *x, dx);
            }
            Op::Gelu { x } => {
                let xv = tape.value(*x);
                let mut dx = dy;
                for (d, &v) in dx.as_mut_slice().iter_mut().zip(xv.as_slice()) {
                    let (cdf, pdf) = gelu_parts(v);
                    *d *= cdf + v * pdf;
                }
                accumulate(&mut grads, *x, dx);
            }
            Op::Add { a, b } => {
                accumulate(&mut grads, *a, dy.clone());
                accumulate(&mut grads, *b, dy);
            }
            Op::Scatter { parts } => {
                for (v, map) in parts {
                    let mut dx = Matrix::zeros(map.len(), dy.cols());
                    for (i, &m) in map.iter().enumerate() {
                        dx.row_mut(i).copy_from_slice(dy.row(m as usize));
                    }
                    accumulate(&mut grads, *v, dx);
                }
            }
            Op::Pool {
                x,
                offsets,
                kind,
                arg_max,
                arg_min,
            } => {
                let xv = tape.value(*x);
                let c = xv.cols();
                let mut dx = Matrix::zeros(xv.rows(), c);
                for g in 0..offsets.len() - 1 {
                    let (lo, hi) = (offsets[g], offsets[g + 1]);
                    for ch in 0..c {
                        let r = arg_max[g * c + ch] as usize;
                        dx.as_mut_slice()[r * c + ch] += dy.get(g, ch);
                        if *kind == PoolKind::MaxMinMean {
                            let r = arg_min[g * c + ch] as usize;
                            dx.as_mut_slice()[r * c + ch] += dy.get(g, c + ch);
                            let share = dy.get(g, 2 * c + ch) / T::from_usize(hi - lo);
                            for r in lo..hi {
                                dx.as_mut_slice()[r * c + ch] += share;
                            }
                        }
                    }
                }
                accumulate(&mut grads, *x, dx);
            }
            Op::Scalar { inputs } => {
                let up = dy.get(0, 0);
                for (v, partial) in inputs {
                    accumulate(&mut grads, *v, partial.map(|p| p * up));
                }
            }
        }
    }

    Ok(Gradients { nodes: grads, params })
}
