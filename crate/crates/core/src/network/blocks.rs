//! Residual feature-extraction blocks of the backbone and neck.

use crate::autograd::{SparseVar, Tape};
use crate::conv::KernelSpec;
use crate::error::{Error, Result};
use crate::nn::{ConvBn, ConvLayer, DepthwiseConvLayer, LayerNorm};
use crate::real::Real;
use crate::store::ParamStore;

fn check_channels<T: Real>(tape: &Tape<T>, x: &SparseVar, expected: usize) -> Result<()> {
    let got = tape.value(x.var).cols();
    if got != expected {
        return Err(Error::ChannelMismatch { expected, got });
    }
    Ok(())
}

/// `relu(x + main(x) + dilated(x))` with a two-conv main branch and a dilated
/// large-scale branch; every conv is a 3x3 submanifold conv.
#[derive(Clone, Debug)]
pub struct LsfeBlock {
    pub main1: ConvBn,
    pub main2: ConvBn,
    pub dilated: ConvBn,
    pub channels: usize,
    pub dilation: usize,
}

impl LsfeBlock {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize, dilation: usize, seed: u64) -> Self {
        let k3 = KernelSpec::submanifold(&[3, 3]);
        Self {
            main1: ConvBn::new(store, &format!("{name}.main1"), k3, channels, channels, true, seed),
            main2: ConvBn::new(store, &format!("{name}.main2"), k3, channels, channels, false, seed),
            dilated: ConvBn::new(
                store,
                &format!("{name}.dilated"),
                k3.with_dilation(dilation),
                channels,
                channels,
                false,
                seed,
            ),
            channels,
            dilation,
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: &SparseVar) -> Result<SparseVar> {
        check_channels(tape, x, self.channels)?;
        let m = self.main1.forward(tape, store, x)?;
        let m = self.main2.forward(tape, store, &m)?;
        let d = self.dilated.forward(tape, store, x)?;
        let s = tape.sparse_add(x, &m)?;
        let s = tape.sparse_add(&s, &d)?;
        Ok(tape.sparse_relu(&s))
    }
}

/// `relu(x + fine(x) + large(x))`: a 3x3 branch next to a separable
/// `1x9 -> 9x1` branch with a 9x9 reach.
#[derive(Clone, Debug)]
pub struct DlsfeBlock {
    pub fine: ConvBn,
    pub row: ConvBn,
    pub col: ConvBn,
    pub channels: usize,
}

impl DlsfeBlock {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize, seed: u64) -> Self {
        Self {
            fine: ConvBn::new(store, &format!("{name}.fine"), KernelSpec::submanifold(&[3, 3]), channels, channels, false, seed),
            row: ConvBn::new(store, &format!("{name}.row"), KernelSpec::submanifold(&[1, 9]), channels, channels, true, seed),
            col: ConvBn::new(store, &format!("{name}.col"), KernelSpec::submanifold(&[9, 1]), channels, channels, false, seed),
            channels,
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: &SparseVar) -> Result<SparseVar> {
        check_channels(tape, x, self.channels)?;
        let f = self.fine.forward(tape, store, x)?;
        let l = self.row.forward(tape, store, x)?;
        let l = self.col.forward(tape, store, &l)?;
        let s = tape.sparse_add(x, &f)?;
        let s = tape.sparse_add(&s, &l)?;
        Ok(tape.sparse_relu(&s))
    }
}

/// One backbone stage: optional entry conv, one D-LSFE block, then LSFE blocks
/// with increasing dilation.
///
/// The entry conv is a stride-2 spatial 3x3 when downsampling, or a 3x3
/// submanifold conv when only the channel count changes.
#[derive(Clone, Debug)]
pub struct MsfeModule {
    pub entry: Option<ConvBn>,
    pub dlsfe: DlsfeBlock,
    pub lsfe: Vec<LsfeBlock>,
    pub stride: usize,
}

impl MsfeModule {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
        dilations: &[usize],
        seed: u64,
    ) -> Self {
        let entry = if stride > 1 {
            Some(KernelSpec::spatial(&[3, 3], stride))
        } else if c_in != c_out {
            Some(KernelSpec::submanifold(&[3, 3]))
        } else {
            None
        };
        Self {
            entry: entry.map(|spec| ConvBn::new(store, &format!("{name}.down"), spec, c_in, c_out, true, seed)),
            dlsfe: DlsfeBlock::new(store, &format!("{name}.dlsfe"), c_out, seed),
            lsfe: dilations
                .iter()
                .enumerate()
                .map(|(i, &m)| LsfeBlock::new(store, &format!("{name}.lsfe{i}"), c_out, m, seed))
                .collect(),
            stride,
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: &SparseVar) -> Result<SparseVar> {
        let mut h = match &self.entry {
            Some(e) => e.forward(tape, store, x)?,
            None => x.clone(),
        };
        h = self.dlsfe.forward(tape, store, &h)?;
        for b in &self.lsfe {
            h = b.forward(tape, store, &h)?;
        }
        Ok(h)
    }
}

/// `x + project(gelu(expand(layer_norm(depthwise(x)))))`.
#[derive(Clone, Debug)]
pub struct ConvNextBlock {
    pub depthwise: DepthwiseConvLayer,
    pub norm: LayerNorm,
    pub expand: ConvLayer,
    pub project: ConvLayer,
    pub channels: usize,
}

impl ConvNextBlock {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        kernel: usize,
        expand: usize,
        seed: u64,
    ) -> Self {
        let k1 = KernelSpec::submanifold(&[1, 1]);
        let wide = channels * expand;
        Self {
            depthwise: DepthwiseConvLayer::new(
                store,
                &format!("{name}.depthwise"),
                KernelSpec::submanifold(&[kernel, kernel]),
                channels,
                seed,
            ),
            norm: LayerNorm::new(store, &format!("{name}.norm"), channels),
            expand: ConvLayer::new(store, &format!("{name}.expand"), k1, channels, wide, true, seed),
            project: ConvLayer::new(store, &format!("{name}.project"), k1, wide, channels, true, seed),
            channels,
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: &SparseVar) -> Result<SparseVar> {
        check_channels(tape, x, self.channels)?;
        let h = self.depthwise.forward(tape, store, x)?;
        let h = self.norm.forward_sparse(tape, store, &h)?;
        let h = self.expand.forward(tape, store, &h)?;
        let h = tape.sparse_gelu(&h);
        let h = self.project.forward(tape, store, &h)?;
        tape.sparse_add(x, &h)
    }
}
