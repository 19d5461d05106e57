//! Direct dense convolution, used only to check the sparse engine.

use super::kernel::KernelSpec;
use super::params::ConvParams;
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::DenseArray;

/// Nested-loop convolution of a zero-padded dense input `[B, C_in, spatial...]`.
///
/// `out[b, co, o] = bias[co] + sum_k sum_ci w[k, ci, co] * in[b, ci, s*o + m*k - pad]`,
/// with no sparsity logic. The bias is added at every output site.
pub fn dense_conv_oracle<T: Real>(
    input: &DenseArray<T>,
    spec: &KernelSpec,
    params: &ConvParams<T>,
) -> Result<DenseArray<T>> {
    let shape = input.shape();
    let rank = spec.rank();
    if shape.len() != rank + 2 {
        return Err(Error::ShapeMismatch(format!("dense input {shape:?} for rank {rank}")));
    }
    if shape[1] != params.c_in {
        return Err(Error::ChannelMismatch {
            expected: params.c_in,
            got: shape[1],
        });
    }
    params.validate(spec)?;
    let (batch, c_in, c_out) = (shape[0], params.c_in, params.c_out);
    let in_sp = &shape[2..];
    let out_sp = spec.output_shape(in_sp)?;
    let mut out_shape = vec![batch, c_out];
    out_shape.extend_from_slice(&out_sp);
    let mut out = DenseArray::filled(&out_shape, T::ZERO);

    let pad3 = |v: &[usize], fill: usize| {
        let mut a = [fill; 3];
        a[..rank].copy_from_slice(v);
        a
    };
    let (osp, isp) = (pad3(&out_sp, 1), pad3(in_sp, 1));
    let (stride, dil, pad) = (pad3(spec.stride(), 1), pad3(spec.dilation(), 1), pad3(spec.padding(), 0));
    let volume = spec.volume();

    let mut idx_in = vec![0usize; rank + 2];
    let mut idx_out = vec![0usize; rank + 2];
    for b in 0..batch {
        for o0 in 0..osp[0] {
            for o1 in 0..osp[1] {
                for o2 in 0..osp[2] {
                    let o = [o0, o1, o2];
                    for co in 0..c_out {
                        let mut acc = params.bias.as_ref().map_or(T::ZERO, |bias| bias[co]);
                        for k in 0..volume {
                            let tap = spec.offset_index(k);
                            let mut q = [0usize; 3];
                            let mut inside = true;
                            for a in 0..3 {
                                let v = (stride[a] * o[a] + dil[a] * tap[a]) as i64 - pad[a] as i64;
                                if v < 0 || v >= isp[a] as i64 {
                                    inside = false;
                                    break;
                                }
                                q[a] = v as usize;
                            }
                            if !inside {
                                continue;
                            }
                            idx_in[0] = b;
                            idx_in[2..].copy_from_slice(&q[..rank]);
                            for ci in 0..c_in {
                                idx_in[1] = ci;
                                acc += params.w(k, ci, co) * input.at(&idx_in);
                            }
                        }
                        idx_out[0] = b;
                        idx_out[1] = co;
                        idx_out[2..].copy_from_slice(&o[..rank]);
                        *out.at_mut(&idx_out) = acc;
                    }
                }
            }
        }
    }
    Ok(out)
}
