//! Backbone, multi-scale fusion, neck, head and the assembled detector.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::blocks::{ConvNextBlock, MsfeModule};
use super::config::{NetworkConfig, BOX_CODE_SIZE, NUM_STAGES};
use super::decode::{decode_detections, Detection};
use crate::autograd::{SparseVar, Tape};
use crate::conv::KernelSpec;
use crate::encoding::{PointCloud, Voxel2PillarEncoder, VoxelBatch};
use crate::error::{Error, Result};
use crate::grid::GridConfig;
use crate::nn::{ConvBn, ConvLayer};
use crate::real::Real;
use crate::store::ParamStore;
use crate::tensor::{Coord, Layout};

/// Initial classification bias: a 1% foreground prior.
pub const CLS_PRIOR: f64 = 0.01;

fn ensure_finite<T: Real>(tape: &Tape<T>, x: &SparseVar, what: &str) -> Result<()> {
    if tape.value(x.var).all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub stages: Vec<MsfeModule>,
}

impl Backbone {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, cfg: &NetworkConfig, c_in: usize, seed: u64) -> Self {
        let mut prev = c_in;
        let stages = (0..NUM_STAGES)
            .map(|i| {
                let m = MsfeModule::new(
                    store,
                    &format!("{name}.stage{}", i + 1),
                    prev,
                    cfg.stage_channels[i],
                    cfg.stage_strides[i],
                    &cfg.dilation_schedule,
                    seed,
                );
                prev = cfg.stage_channels[i];
                m
            })
            .collect();
        Self { stages }
    }

    /// Outputs of all six stages.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: &SparseVar) -> Result<Vec<SparseVar>> {
        let mut outs: Vec<SparseVar> = Vec::with_capacity(self.stages.len());
        for (i, s) in self.stages.iter().enumerate() {
            let h = s.forward(tape, store, outs.last().unwrap_or(x))?;
            ensure_finite(tape, &h, &format!("backbone stage {}", i + 1))?;
            outs.push(h);
        }
        Ok(outs)
    }
}

/// Projects the last three stages to a common width and sums them on the
/// finest of the three grids, over the union of their (rescaled) sites.
#[derive(Clone, Debug)]
pub struct Fusion {
    pub proj: [ConvLayer; 3],
}

impl Fusion {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, c_in: [usize; 3], c_out: usize, seed: u64) -> Self {
        let k1 = KernelSpec::submanifold(&[1, 1]);
        let mk = |store: &mut ParamStore<T>, i: usize| {
            ConvLayer::new(store, &format!("{name}.proj{i}"), k1, c_in[i], c_out, true, seed)
        };
        let p0 = mk(store, 0);
        let p1 = mk(store, 1);
        let p2 = mk(store, 2);
        Self { proj: [p0, p1, p2] }
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        inputs: [&SparseVar; 3],
    ) -> Result<SparseVar> {
        let base = &inputs[0].layout;
        let s0 = base.stride();
        let mut factors = [1u32; 3];
        for (i, x) in inputs.iter().enumerate().skip(1) {
            let s = x.layout.stride();
            if s <= s0 || s % s0 != 0 {
                return Err(Error::StrideMismatch(format!(
                    "input {} has stride {s}, not a multiple of the base stride {s0}",
                    i + 1
                )));
            }
            factors[i] = (s / s0) as u32;
        }
        let shape = base.spatial_shape().to_vec();
        let mut coords: Vec<Coord> = base.coords().to_vec();
        let mut index: std::collections::HashMap<u64, u32> =
            coords.iter().enumerate().map(|(r, c)| (c.key(), r as u32)).collect();
        let mut maps: Vec<Vec<u32>> = vec![(0..coords.len() as u32).collect()];
        for (i, x) in inputs.iter().enumerate().skip(1) {
            let f = factors[i];
            let map = x
                .layout
                .coords()
                .iter()
                .map(|c| {
                    let (y, xx) = (c.y() * f, c.x() * f);
                    if y as usize >= shape[0] || xx as usize >= shape[1] {
                        return Err(Error::StrideMismatch(format!(
                            "site ({}, {}) of input {} scales outside the {shape:?} grid",
                            c.y(),
                            c.x(),
                            i + 1
                        )));
                    }
                    let sc = Coord::new2(c.batch, y, xx);
                    let next = coords.len() as u32;
                    Ok(*index.entry(sc.key()).or_insert_with(|| {
                        coords.push(sc);
                        next
                    }))
                })
                .collect::<Result<Vec<u32>>>()?;
            maps.push(map);
        }
        let layout = Arc::new(Layout::new(coords, &shape, base.batch_size())?.with_stride(s0));
        let c_out = self.proj[0].c_out;
        let mut parts = Vec::with_capacity(3);
        for ((x, p), map) in inputs.iter().zip(&self.proj).zip(maps) {
            parts.push((p.forward(tape, store, x)?.var, map));
        }
        let var = tape.scatter(parts, layout.len(), c_out)?;
        Ok(SparseVar { layout, var })
    }
}

/// Spatial 3x3 stem (stride 1) followed by ConvNeXt blocks.
#[derive(Clone, Debug)]
pub struct Neck {
    pub stem: ConvBn,
    pub blocks: Vec<ConvNextBlock>,
}

impl Neck {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, cfg: &NetworkConfig, seed: u64) -> Self {
        let c = cfg.fuse_channels;
        Self {
            stem: ConvBn::new(store, &format!("{name}.stem"), KernelSpec::spatial(&[3, 3], 1), c, c, true, seed),
            blocks: (0..cfg.neck_repeats)
                .map(|i| ConvNextBlock::new(store, &format!("{name}.block{i}"), c, cfg.neck_kernel, cfg.convnext_expand, seed))
                .collect(),
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: &SparseVar) -> Result<SparseVar> {
        let mut h = self.stem.forward(tape, store, x)?;
        for b in &self.blocks {
            h = b.forward(tape, store, &h)?;
        }
        Ok(h)
    }
}

/// Per-site class logits and 8-value box codes from two conv stacks.
#[derive(Clone, Debug)]
pub struct Head {
    pub cls_hidden: ConvBn,
    pub cls_out: ConvLayer,
    pub box_hidden: ConvBn,
    pub box_out: ConvLayer,
}

impl Head {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, c_in: usize, cfg: &NetworkConfig, seed: u64) -> Self {
        let k3 = KernelSpec::submanifold(&[3, 3]);
        let k1 = KernelSpec::submanifold(&[1, 1]);
        let h = cfg.head_channels;
        let cls_out = ConvLayer::new(store, &format!("{name}.cls_out"), k1, h, cfg.num_classes, true, seed);
        let prior = T::from_f64(-((1.0 - CLS_PRIOR) / CLS_PRIOR).ln());
        if let Some(b) = cls_out.bias {
            store.value_mut(b).as_mut_slice().fill(prior);
        }
        Self {
            cls_hidden: ConvBn::new(store, &format!("{name}.cls_hidden"), k3, c_in, h, true, seed),
            cls_out,
            box_hidden: ConvBn::new(store, &format!("{name}.box_hidden"), k3, c_in, h, true, seed),
            box_out: ConvLayer::new(store, &format!("{name}.box_out"), k1, h, BOX_CODE_SIZE, true, seed),
        }
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: &SparseVar,
    ) -> Result<(SparseVar, SparseVar)> {
        let c = self.cls_hidden.forward(tape, store, x)?;
        let c = self.cls_out.forward(tape, store, &c)?;
        let b = self.box_hidden.forward(tape, store, x)?;
        let b = self.box_out.forward(tape, store, &b)?;
        Ok((c, b))
    }
}

/// Structural summary of one forward pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForwardStats {
    /// Cell counts `[W, H, D]` of the voxel grid.
    pub grid: [usize; 3],
    pub constructor_offsets: usize,
    pub voxel_active: usize,
    pub pillar_active: usize,
    pub stage_strides: Vec<usize>,
    pub stage_shapes: Vec<[usize; 2]>,
    pub stage_active: Vec<usize>,
    pub stage_channels: Vec<usize>,
    pub fused_stride: usize,
    pub fused_active: usize,
    pub neck_kernel: usize,
    pub neck_repeats: usize,
    pub neck_active: usize,
}

/// Every intermediate of a forward pass.
pub struct ModelOutput {
    pub voxels: SparseVar,
    pub pillars: SparseVar,
    pub stages: Vec<SparseVar>,
    pub fused: SparseVar,
    pub neck: SparseVar,
    pub cls: SparseVar,
    pub boxes: SparseVar,
    pub stats: ForwardStats,
}

/// The full detector: Voxel2Pillar encoder, six-stage backbone, fusion of
/// the last three stages, neck and sparse head.
#[derive(Clone, Debug)]
pub struct PillarNet {
    pub config: NetworkConfig,
    pub grid: GridConfig,
    pub encoder: Voxel2PillarEncoder,
    pub backbone: Backbone,
    pub fusion: Fusion,
    pub neck: Neck,
    pub head: Head,
}

impl PillarNet {
    /// Registers every parameter in `store`, initialized from `seed`.
    pub fn new<T: Real>(store: &mut ParamStore<T>, cfg: &NetworkConfig, grid: &GridConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        grid.validate()?;
        let depth = grid.try_cells()?[2];
        let c = cfg.stage_channels;
        let encoder = Voxel2PillarEncoder::new(store, "encoder", cfg.encoder_channels, c[0], depth, seed);
        let backbone = Backbone::new(store, "backbone", cfg, c[0], seed);
        let fusion = Fusion::new(store, "fusion", [c[3], c[4], c[5]], cfg.fuse_channels, seed);
        let neck = Neck::new(store, "neck", cfg, seed);
        let head = Head::new(store, "head", cfg.fuse_channels, cfg, seed);
        Ok(Self {
            config: cfg.clone(),
            grid: grid.clone(),
            encoder,
            backbone,
            fusion,
            neck,
            head,
        })
    }

    /// Voxelize a batch of clouds; the result can be reused across passes.
    pub fn prepare(&self, clouds: &[PointCloud], seed: u64) -> Result<VoxelBatch> {
        self.encoder.prepare(clouds, &self.grid, seed)
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, vb: &VoxelBatch) -> Result<ModelOutput> {
        let voxels = self.encoder.encode_voxels(tape, store, vb)?;
        ensure_finite(tape, &voxels, "voxel features")?;
        let pillars = self.encoder.construct(tape, store, &voxels)?;
        ensure_finite(tape, &pillars, "pillar features")?;
        let stages = self.backbone.forward(tape, store, &pillars)?;
        let fused = self.fusion.forward(tape, store, [&stages[3], &stages[4], &stages[5]])?;
        ensure_finite(tape, &fused, "fused features")?;
        let neck = self.neck.forward(tape, store, &fused)?;
        ensure_finite(tape, &neck, "neck features")?;
        let (cls, boxes) = self.head.forward(tape, store, &neck)?;
        ensure_finite(tape, &cls, "class logits")?;
        ensure_finite(tape, &boxes, "box codes")?;
        let stats = ForwardStats {
            grid: self.grid.cells(),
            constructor_offsets: self.encoder.constructor_offsets(),
            voxel_active: voxels.layout.len(),
            pillar_active: pillars.layout.len(),
            stage_strides: stages.iter().map(|s| s.layout.stride()).collect(),
            stage_shapes: stages
                .iter()
                .map(|s| [s.layout.spatial_shape()[0], s.layout.spatial_shape()[1]])
                .collect(),
            stage_active: stages.iter().map(|s| s.layout.len()).collect(),
            stage_channels: self.config.stage_channels.to_vec(),
            fused_stride: fused.layout.stride(),
            fused_active: fused.layout.len(),
            neck_kernel: self.config.neck_kernel,
            neck_repeats: self.neck.blocks.len(),
            neck_active: neck.layout.len(),
        };
        Ok(ModelOutput {
            voxels,
            pillars,
            stages,
            fused,
            neck,
            cls,
            boxes,
            stats,
        })
    }

    pub fn detect<T: Real>(&self, tape: &Tape<T>, out: &ModelOutput, score_thresh: f64) -> Vec<Detection> {
        decode_detections(
            tape.value(out.cls.var),
            tape.value(out.boxes.var),
            &out.cls.layout,
            &self.grid,
            score_thresh,
        )
    }
}
