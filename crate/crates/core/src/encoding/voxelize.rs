//! Point-to-cell assignment, per-cell subsampling and per-point feature augmentation.

use rand::seq::index::sample;

use super::points::PointCloud;
use crate::error::{Error, Result};
use crate::grid::GridConfig;
use crate::matrix::Matrix;
use crate::rng;
use crate::tensor::Coord;

/// Per-point input width after augmentation: `(x, y, z, i, dx, dy, dz)`.
pub const AUGMENTED_FEATURES: usize = 7;

/// Occupied cells with their member points, stored group-contiguously.
///
/// Groups are sorted by coordinate and members by point content, so the
/// batch is independent of the input point order.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelBatch {
    pub rank: usize,
    pub spatial_shape: Vec<usize>,
    pub batch_size: usize,
    pub coords: Vec<Coord>,
    /// Rows of group `g` are `offsets[g]..offsets[g + 1]`.
    pub offsets: Vec<usize>,
    /// `(cloud, point row)` of every member row.
    pub sources: Vec<(u32, u32)>,
    /// Per-member features: raw `(x, y, z, i)` or augmented.
    pub features: Matrix<f64>,
}

impl VoxelBatch {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn group(&self, g: usize) -> std::ops::Range<usize> {
        self.offsets[g]..self.offsets[g + 1]
    }
}

/// Cell of `p` along one axis, `None` outside `[min, max)`.
#[inline]
fn cell(p: f64, min: f64, max: f64, size: f64, cells: usize) -> Option<u32> {
    if !(p >= min && p < max) {
        return None;
    }
    Some((((p - min) / size).floor() as usize).min(cells - 1) as u32)
}

/// Cell coordinate of a point, `None` when outside the detection range.
pub fn point_cell(p: &[f64], g: &GridConfig, rank: usize, batch: u32) -> Option<Coord> {
    let [w, h, d] = g.cells();
    let x = cell(p[0], g.x_range[0], g.x_range[1], g.voxel_size[0], w)?;
    let y = cell(p[1], g.y_range[0], g.y_range[1], g.voxel_size[1], h)?;
    let z = cell(p[2], g.z_range[0], g.z_range[1], g.voxel_size[2], d)?;
    Some(if rank == 3 {
        Coord::new3(batch, y, x, z)
    } else {
        Coord::new2(batch, y, x)
    })
}

fn content_order(a: &[f64], b: &[f64]) -> std::cmp::Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(std::cmp::Ordering::Equal)
}

/// Voxelize a batch of clouds (cloud `b` becomes batch index `b`).
///
/// Points outside the range are dropped (low bound inclusive, high bound
/// exclusive, on every axis including `z` for pillars). Cells holding more
/// than `max_points_per_voxel` points keep a seeded uniform subset.
pub fn voxelize_batch(clouds: &[PointCloud], g: &GridConfig, rank: usize, seed: u64) -> Result<VoxelBatch> {
    g.validate()?;
    if !(rank == 2 || rank == 3) {
        return Err(Error::ShapeMismatch(format!("voxel rank {rank}")));
    }
    let batch_size = clouds.len().max(1);
    let mut cells: Vec<(u64, Coord, u32, u32)> = Vec::new();
    for (b, pc) in clouds.iter().enumerate() {
        for i in 0..pc.len() {
            if let Some(c) = point_cell(pc.point(i), g, rank, b as u32) {
                cells.push((c.key(), c, b as u32, i as u32));
            }
        }
    }
    cells.sort_by(|a, b| {
        a.0.cmp(&b.0).then_with(|| {
            content_order(clouds[a.2 as usize].point(a.3 as usize), clouds[b.2 as usize].point(b.3 as usize))
                .then(a.3.cmp(&b.3))
        })
    });

    let cap = g.max_points_per_voxel;
    let mut coords = Vec::new();
    let mut offsets = vec![0];
    let mut sources = Vec::new();
    let mut start = 0;
    while start < cells.len() {
        let key = cells[start].0;
        let end = start + cells[start..].iter().take_while(|c| c.0 == key).count();
        let members = &cells[start..end];
        if members.len() > cap {
            let mut r = rng::substream(seed, "voxel-sample", key);
            let mut keep = sample(&mut r, members.len(), cap).into_vec();
            keep.sort_unstable();
            sources.extend(keep.iter().map(|&k| (members[k].2, members[k].3)));
        } else {
            sources.extend(members.iter().map(|m| (m.2, m.3)));
        }
        coords.push(members[0].1);
        offsets.push(sources.len());
        start = end;
    }

    let mut data = Vec::with_capacity(sources.len() * 4);
    for &(b, i) in &sources {
        data.extend_from_slice(&clouds[b as usize].point(i as usize)[..4]);
    }
    let spatial_shape = if rank == 3 {
        g.voxel_shape().to_vec()
    } else {
        g.bev_shape().to_vec()
    };
    Ok(VoxelBatch {
        rank,
        spatial_shape,
        batch_size,
        coords,
        offsets,
        features: Matrix::from_vec(sources.len(), 4, data)?,
        sources,
    })
}

pub fn voxelize(pc: &PointCloud, g: &GridConfig, rank: usize, seed: u64) -> Result<VoxelBatch> {
    voxelize_batch(std::slice::from_ref(pc), g, rank, seed)
}

/// Geometric center of a cell in meters; pillars are centered on the vertical range.
pub fn cell_center(c: &Coord, g: &GridConfig, rank: usize) -> [f64; 3] {
    let cz = if rank == 3 {
        g.z_range[0] + (c.z() as f64 + 0.5) * g.voxel_size[2]
    } else {
        g.z_range[0] + 0.5 * g.pillar_height()
    };
    [
        g.x_range[0] + (c.x() as f64 + 0.5) * g.voxel_size[0],
        g.y_range[0] + (c.y() as f64 + 0.5) * g.voxel_size[1],
        cz,
    ]
}

/// Append offsets to the cell center: `(x, y, z, i, x - cx, y - cy, z - cz)`.
pub fn augment_point_features(vb: &VoxelBatch, g: &GridConfig) -> VoxelBatch {
    let mut out = Matrix::zeros(vb.features.rows(), AUGMENTED_FEATURES);
    for grp in 0..vb.len() {
        let center = cell_center(&vb.coords[grp], g, vb.rank);
        for r in vb.group(grp) {
            let p = vb.features.row(r);
            let row = out.row_mut(r);
            row[..4].copy_from_slice(&p[..4]);
            for a in 0..3 {
                row[4 + a] = p[a] - center[a];
            }
        }
    }
    VoxelBatch {
        features: out,
        ..vb.clone()
    }
}
