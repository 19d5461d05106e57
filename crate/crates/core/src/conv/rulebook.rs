//! Rulebooks: per-offset `(input row, output row)` lists that drive
//! gather / matrix-multiply / scatter-add convolution.

use std::sync::Arc;

use super::kernel::{ConvMode, KernelSpec};
use crate::error::Result;
use crate::tensor::{Coord, KeyMap, Layout};

#[derive(Clone, Debug)]
pub struct Rulebook {
    spec: KernelSpec,
    in_layout: u64,
    n_in: usize,
    out: Arc<Layout>,
    pairs: Vec<Vec<(u32, u32)>>,
}

impl Rulebook {
    pub fn spec(&self) -> &KernelSpec {
        &self.spec
    }

    /// Identity of the layout this rulebook was built for.
    pub fn input_layout_id(&self) -> u64 {
        self.in_layout
    }

    pub fn n_in(&self) -> usize {
        self.n_in
    }

    pub fn out_layout(&self) -> &Arc<Layout> {
        &self.out
    }

    pub fn out_coords(&self) -> &[Coord] {
        self.out.coords()
    }

    /// Pairs of offset `k`, in build order.
    pub fn pairs(&self, k: usize) -> &[(u32, u32)] {
        &self.pairs[k]
    }

    pub fn kernel_volume(&self) -> usize {
        self.pairs.len()
    }

    pub fn total_pairs(&self) -> usize {
        self.pairs.iter().map(Vec::len).sum()
    }
}

/// Build the rulebook of `spec` on the active set `input`.
///
/// Submanifold: outputs are the input sites; offset `k` pairs output `p` with
/// the active input at `p + m (k - center)`. Spatial: every output `o` with
/// `q = s o + m k - pad` for some active `q` is activated, in first-reached order.
pub fn build_rulebook(input: &Arc<Layout>, spec: &KernelSpec) -> Result<Rulebook> {
    spec.validate(input.rank())?;
    let volume = spec.volume();
    let mut pairs: Vec<Vec<(u32, u32)>> = vec![Vec::new(); volume];
    let out = match spec.mode() {
        ConvMode::Submanifold => {
            let offsets: Vec<[i64; 3]> = (0..volume).map(|k| spec.centered_offset(k)).collect();
            for (row, c) in input.coords().iter().enumerate() {
                for (k, d) in offsets.iter().enumerate() {
                    let pos = [
                        c.pos[0] as i64 + d[0],
                        c.pos[1] as i64 + d[1],
                        c.pos[2] as i64 + d[2],
                    ];
                    if let Some(q) = input.row_at(c.batch, pos) {
                        pairs[k].push((q as u32, row as u32));
                    }
                }
            }
            Arc::clone(input)
        }
        ConvMode::Spatial => {
            let rank = spec.rank();
            let out_shape = spec.output_shape(input.spatial_shape())?;
            let taps: Vec<[usize; 3]> = (0..volume).map(|k| spec.offset_index(k)).collect();
            let (stride, dil, pad) = (spec.stride(), spec.dilation(), spec.padding());
            let mut out_coords: Vec<Coord> = Vec::new();
            let mut index: KeyMap<usize> = KeyMap::default();
            for (row, c) in input.coords().iter().enumerate() {
                'taps: for (k, tap) in taps.iter().enumerate() {
                    let mut pos = [0u32; 3];
                    for a in 0..rank {
                        let num = c.pos[a] as i64 + pad[a] as i64 - (dil[a] * tap[a]) as i64;
                        if num < 0 || num % stride[a] as i64 != 0 {
                            continue 'taps;
                        }
                        let o = (num / stride[a] as i64) as usize;
                        if o >= out_shape[a] {
                            continue 'taps;
                        }
                        pos[a] = o as u32;
                    }
                    let oc = Coord {
                        batch: c.batch,
                        pos,
                    };
                    let next = out_coords.len();
                    let o_row = *index.entry(oc.key()).or_insert_with(|| {
                        out_coords.push(oc);
                        next
                    });
                    pairs[k].push((row as u32, o_row as u32));
                }
            }
            let out_stride = input.stride() * stride[..rank.min(2)].iter().copied().max().unwrap_or(1);
            Arc::new(Layout::from_trusted(
                out_coords,
                index,
                out_shape,
                input.batch_size(),
                out_stride,
            ))
        }
    };
    Ok(Rulebook {
        spec: *spec,
        in_layout: input.id(),
        n_in: input.len(),
        out,
        pairs,
    })
}
