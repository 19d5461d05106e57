//! Assignment of ground-truth boxes to active sites of the detection map.

use super::scene::GTBox;
use crate::error::{Error, Result};
use crate::grid::GridConfig;
use crate::matrix::Matrix;
use crate::network::{encode_box, site_center, BOX_CODE_SIZE};
use crate::tensor::Layout;

/// Per-site training targets.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetSet {
    /// `n x num_classes` one-hot rows; background rows are all zero.
    pub cls: Matrix<f64>,
    /// `(row, encoded box)` of every positive site, ordered by row.
    pub positives: Vec<(usize, [f64; BOX_CODE_SIZE])>,
    /// Boxes whose positive site was already taken by an earlier box.
    pub conflicts: usize,
    /// Boxes with a center outside the detection range or whose batch has no sites.
    pub skipped: usize,
}

impl TargetSet {
    pub fn num_positive(&self) -> usize {
        self.positives.len()
    }
}

/// `gt[b]` holds the boxes of batch entry `b`. Each box in range claims the
/// active site of its batch nearest to its BEV center (ties toward smaller
/// `(y, x)`); a later box claiming the same site replaces the earlier one.
pub fn assign_targets(gt: &[Vec<GTBox>], layout: &Layout, g: &GridConfig, num_classes: usize) -> Result<TargetSet> {
    if layout.is_empty() {
        return Err(Error::NoActiveSites);
    }
    let stride = layout.stride();
    let n = layout.len();
    let mut owner: Vec<Option<usize>> = vec![None; n];
    let mut codes: Vec<Option<(usize, [f64; BOX_CODE_SIZE])>> = vec![None; n];
    let (mut conflicts, mut skipped) = (0, 0);
    let mins = g.mins();
    let maxs = g.maxs();
    let mut serial = 0;
    for (b, boxes) in gt.iter().enumerate() {
        for bx in boxes {
            serial += 1;
            if bx.class_id >= num_classes {
                return Err(Error::MalformedInput(format!(
                    "box class {} but the head predicts {num_classes} classes",
                    bx.class_id
                )));
            }
            let inside = (0..2).all(|a| bx.center[a] >= mins[a] && bx.center[a] < maxs[a]);
            let mut best: Option<(f64, (u32, u32), usize)> = None;
            if inside {
                for (row, c) in layout.coords().iter().enumerate() {
                    if c.batch as usize != b {
                        continue;
                    }
                    let [x, y] = site_center(c, g, stride);
                    let d = (x - bx.center[0]).powi(2) + (y - bx.center[1]).powi(2);
                    let key = (c.y(), c.x());
                    if best.is_none_or(|(bd, bk, _)| d < bd || (d == bd && key < bk)) {
                        best = Some((d, key, row));
                    }
                }
            }
            let Some((_, _, row)) = best else {
                skipped += 1;
                continue;
            };
            if owner[row].is_some() {
                conflicts += 1;
            }
            owner[row] = Some(serial);
            codes[row] = Some((bx.class_id, encode_box(&bx.geometry(), &layout.coords()[row], g, stride)));
        }
    }
    let mut cls = Matrix::zeros(n, num_classes);
    let mut positives = Vec::new();
    for (row, code) in codes.into_iter().enumerate() {
        if let Some((k, enc)) = code {
            cls.set(row, k, 1.0);
            positives.push((row, enc));
        }
    }
    Ok(TargetSet {
        cls,
        positives,
        conflicts,
        skipped,
    })
}
