//! Pillar encoders: a shared per-point MLP, group pooling and the two ways of
//! turning pooled cells into a BEV pillar tensor.

use std::sync::Arc;

use rand::Rng as _;

use super::points::PointCloud;
use super::voxelize::{augment_point_features, voxelize_batch, VoxelBatch, AUGMENTED_FEATURES};
use crate::autograd::{PoolKind, SparseVar, Tape, Var};
use crate::conv::{kaiming_bound, KernelSpec};
use crate::error::{Error, Result};
use crate::grid::GridConfig;
use crate::matrix::Matrix;
use crate::nn::{BatchNorm, ConvBn};
use crate::real::Real;
use crate::rng;
use crate::store::{ParamId, ParamStore};
use crate::tensor::Layout;

/// `relu(batchnorm(features · weight))` applied to every point independently.
#[derive(Clone, Debug)]
pub struct PointMlp {
    pub weight: ParamId,
    pub bn: BatchNorm,
    pub c_in: usize,
    pub c_out: usize,
}

impl PointMlp {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, c_in: usize, c_out: usize, seed: u64) -> Self {
        let bound = kaiming_bound(1, c_in);
        let mut r = rng::stream(seed, name);
        let data = (0..c_in * c_out).map(|_| T::from_f64(r.gen_range(-bound..bound))).collect();
        let weight = store.add(
            format!("{name}.weight"),
            &[c_in, c_out],
            Matrix::from_vec(c_in, c_out, data).expect("sized"),
            true,
        );
        Self {
            weight,
            bn: BatchNorm::new(store, &format!("{name}.bn"), c_out),
            c_in,
            c_out,
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, points: Var) -> Result<Var> {
        let cols = tape.value(points).cols();
        if cols != self.c_in {
            return Err(Error::ChannelMismatch {
                expected: self.c_in,
                got: cols,
            });
        }
        let w = tape.param(store, self.weight);
        let h = tape.matmul(points, w)?;
        let h = self.bn.forward(tape, store, h)?;
        Ok(tape.relu(h))
    }
}

fn pool_rows<T: Real>(rows: &Matrix<T>, kind: PoolKind) -> Result<Vec<T>> {
    let mut tape = Tape::new(crate::autograd::NormMode::Eval);
    let x = tape.constant(rows.clone());
    let out = tape.pool(x, Arc::new(vec![0, rows.rows()]), kind)?;
    Ok(tape.value(out).row(0).to_vec())
}

/// Per-channel maximum over the rows of one group.
pub fn pool_max<T: Real>(rows: &Matrix<T>) -> Result<Vec<T>> {
    pool_rows(rows, PoolKind::Max)
}

/// Per-channel `[max, min, mean]` over the rows of one group.
pub fn pool_mmm<T: Real>(rows: &Matrix<T>) -> Result<Vec<T>> {
    pool_rows(rows, PoolKind::MaxMinMean)
}

/// Pool every group of `vb` after the point MLP and place the results on the
/// layout of occupied cells.
fn encode_groups<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    mlp: &PointMlp,
    vb: &VoxelBatch,
    kind: PoolKind,
) -> Result<SparseVar> {
    let layout = Arc::new(Layout::new(vb.coords.clone(), &vb.spatial_shape, vb.batch_size)?);
    let points = tape.constant(vb.features.cast());
    let h = mlp.forward(tape, store, points)?;
    let var = tape.pool(h, Arc::new(vb.offsets.clone()), kind)?;
    Ok(SparseVar { layout, var })
}

fn check_augmented(vb: &VoxelBatch, rank: usize) -> Result<()> {
    if vb.rank != rank {
        return Err(Error::ShapeMismatch(format!("expected rank-{rank} cells, got rank {}", vb.rank)));
    }
    if vb.features.cols() != AUGMENTED_FEATURES {
        return Err(Error::ChannelMismatch {
            expected: AUGMENTED_FEATURES,
            got: vb.features.cols(),
        });
    }
    Ok(())
}

/// Pillarize, run the point MLP and max-pool each pillar.
#[derive(Clone, Debug)]
pub struct BaselinePillarEncoder {
    pub mlp: PointMlp,
}

impl BaselinePillarEncoder {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize, seed: u64) -> Self {
        Self {
            mlp: PointMlp::new(store, &format!("{name}.mlp"), AUGMENTED_FEATURES, channels, seed),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.mlp.c_out
    }

    /// Cells to feed [`Self::forward_voxels`]; reusable across passes.
    pub fn prepare(&self, clouds: &[PointCloud], g: &GridConfig, seed: u64) -> Result<VoxelBatch> {
        Ok(augment_point_features(&voxelize_batch(clouds, g, 2, seed)?, g))
    }

    pub fn forward_voxels<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, vb: &VoxelBatch) -> Result<SparseVar> {
        check_augmented(vb, 2)?;
        encode_groups(tape, store, &self.mlp, vb, PoolKind::Max)
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        clouds: &[PointCloud],
        g: &GridConfig,
        seed: u64,
    ) -> Result<SparseVar> {
        let vb = self.prepare(clouds, g, seed)?;
        self.forward_voxels(tape, store, &vb)
    }
}

/// Voxelize in 3-D, encode each voxel with `[max, min, mean]` pooling, then
/// merge every vertical column into one pillar with a `1 x 1 x D` convolution
/// whose stride equals the column height.
#[derive(Clone, Debug)]
pub struct Voxel2PillarEncoder {
    pub mlp: PointMlp,
    pub constructor: ConvBn,
    pub depth: usize,
}

impl Voxel2PillarEncoder {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        mid_channels: usize,
        out_channels: usize,
        depth: usize,
        seed: u64,
    ) -> Self {
        Self {
            mlp: PointMlp::new(store, &format!("{name}.mlp"), AUGMENTED_FEATURES, mid_channels, seed),
            constructor: ConvBn::new(
                store,
                &format!("{name}.constructor"),
                KernelSpec::column(depth),
                3 * mid_channels,
                out_channels,
                true,
                seed,
            ),
            depth,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.constructor.conv.c_out
    }

    /// Number of kernel offsets in the column constructor.
    pub fn constructor_offsets(&self) -> usize {
        self.constructor.conv.spec.volume()
    }

    fn check_grid(&self, g: &GridConfig) -> Result<()> {
        let d = g.cells()[2];
        let spec = &self.constructor.conv.spec;
        if spec.kernel() != [1, 1, d] || spec.stride() != [1, 1, d] {
            return Err(Error::ConfigMismatch(format!(
                "constructor kernel {:?} / stride {:?} but the grid has {d} vertical cells",
                spec.kernel(),
                spec.stride()
            )));
        }
        Ok(())
    }

    pub fn prepare(&self, clouds: &[PointCloud], g: &GridConfig, seed: u64) -> Result<VoxelBatch> {
        self.check_grid(g)?;
        Ok(augment_point_features(&voxelize_batch(clouds, g, 3, seed)?, g))
    }

    /// Per-voxel `[max, min, mean]` features on the rank-3 voxel layout.
    pub fn encode_voxels<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, vb: &VoxelBatch) -> Result<SparseVar> {
        check_augmented(vb, 3)?;
        if vb.spatial_shape[2] != self.depth {
            return Err(Error::ConfigMismatch(format!(
                "voxels have {} vertical cells, constructor expects {}",
                vb.spatial_shape[2], self.depth
            )));
        }
        encode_groups(tape, store, &self.mlp, vb, PoolKind::MaxMinMean)
    }

    /// Collapse a rank-3 voxel tensor (`z` extent `D`) into rank-2 pillars.
    pub fn construct<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, voxels: &SparseVar) -> Result<SparseVar> {
        let y = self.constructor.forward(tape, store, voxels)?;
        let flat = Arc::new(y.layout.squeeze_z()?);
        tape.relayout(&y, flat)
    }

    pub fn forward_voxels<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, vb: &VoxelBatch) -> Result<SparseVar> {
        let v = self.encode_voxels(tape, store, vb)?;
        self.construct(tape, store, &v)
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        clouds: &[PointCloud],
        g: &GridConfig,
        seed: u64,
    ) -> Result<SparseVar> {
        let vb = self.prepare(clouds, g, seed)?;
        self.forward_voxels(tape, store, &vb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pooling_hand_cases() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 0.0]]).unwrap();
        assert_eq!(pool_max(&m).unwrap(), vec![3.0, 2.0]);
        assert_eq!(pool_mmm(&m).unwrap(), vec![3.0, 2.0, 1.0, 0.0, 2.0, 1.0]);
        let one = Matrix::from_rows(&[vec![0.5, -1.0]]).unwrap();
        assert_eq!(pool_max(&one).unwrap(), vec![0.5, -1.0]);
        assert_eq!(pool_mmm(&one).unwrap(), vec![0.5, -1.0, 0.5, -1.0, 0.5, -1.0]);
        assert!(matches!(pool_max(&Matrix::<f64>::zeros(0, 2)), Err(Error::EmptyGroup)));
        assert!(matches!(pool_mmm(&Matrix::<f64>::zeros(0, 2)), Err(Error::EmptyGroup)));
    }

    #[test]
    fn constructor_kernel_must_match_grid() {
        let mut store = ParamStore::<f64>::new();
        let enc = Voxel2PillarEncoder::new(&mut store, "v2p", 4, 8, 5, 0);
        let g = GridConfig::square(2.0);
        assert_eq!(g.cells()[2], 30);
        assert!(matches!(enc.prepare(&[], &g, 0), Err(Error::ConfigMismatch(_))));
        let full = Voxel2PillarEncoder::new(&mut store, "full", 4, 8, 30, 0);
        assert_eq!(full.constructor_offsets(), 30);
    }
}
