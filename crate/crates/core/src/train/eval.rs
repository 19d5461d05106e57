//! Precision and recall at a BEV IoU threshold for oriented boxes.

use serde::{Deserialize, Serialize};

use super::scene::GTBox;
use crate::network::{BoxGeometry, Detection};

type Pt = [f64; 2];

/// Counter-clockwise BEV footprint corners.
pub fn footprint(b: &BoxGeometry) -> Vec<Pt> {
    let (s, c) = b.yaw.sin_cos();
    let (hl, hw) = (b.size[0] / 2.0, b.size[1] / 2.0);
    [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)]
        .iter()
        .map(|&(u, v)| [b.center[0] + c * u - s * v, b.center[1] + s * u + c * v])
        .collect()
}

fn cross(o: Pt, a: Pt, b: Pt) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

pub fn polygon_area(p: &[Pt]) -> f64 {
    let n = p.len();
    (0..n).map(|i| p[i][0] * p[(i + 1) % n][1] - p[(i + 1) % n][0] * p[i][1]).sum::<f64>() / 2.0
}

/// Sutherland–Hodgman clip of `subject` by the convex counter-clockwise `clip`.
pub fn clip_polygon(subject: &[Pt], clip: &[Pt]) -> Vec<Pt> {
    let mut out = subject.to_vec();
    for i in 0..clip.len() {
        if out.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % clip.len()]);
        let input = std::mem::take(&mut out);
        for j in 0..input.len() {
            let (p, q) = (input[j], input[(j + 1) % input.len()]);
            let (dp, dq) = (cross(a, b, p), cross(a, b, q));
            if dp >= 0.0 {
                out.push(p);
            }
            if (dp >= 0.0) != (dq >= 0.0) {
                let t = dp / (dp - dq);
                out.push([p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]);
            }
        }
    }
    out
}

/// Intersection over union of two oriented BEV footprints.
pub fn bev_iou(a: &BoxGeometry, b: &BoxGeometry) -> f64 {
    let (pa, pb) = (footprint(a), footprint(b));
    let inter = polygon_area(&clip_polygon(&pa, &pb)).max(0.0);
    let union = polygon_area(&pa) + polygon_area(&pb) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub iou_thresh: f64,
    pub precision: f64,
    pub recall: f64,
    pub true_positives: usize,
    pub detections: usize,
    pub ground_truth: usize,
}

/// Greedy matching in descending score order (ties keep input order): each
/// detection takes the unmatched same-batch, same-class box with the highest
/// IoU, if that IoU reaches `iou_thresh`. Precision is 1 when there are no
/// detections; recall is 1 when there is no ground truth.
pub fn eval_toy(dets: &[Detection], gt: &[Vec<GTBox>], iou_thresh: f64) -> EvalReport {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let mut used: Vec<Vec<bool>> = gt.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp = 0;
    for i in order {
        let d = &dets[i];
        let Some(boxes) = gt.get(d.batch as usize) else { continue };
        let mut best: Option<(f64, usize)> = None;
        for (j, g) in boxes.iter().enumerate() {
            if used[d.batch as usize][j] || g.class_id != d.class_id {
                continue;
            }
            let iou = bev_iou(&d.geometry(), &g.geometry());
            if iou >= iou_thresh && best.is_none_or(|(b, _)| iou > b) {
                best = Some((iou, j));
            }
        }
        if let Some((_, j)) = best {
            used[d.batch as usize][j] = true;
            tp += 1;
        }
    }
    let n_gt: usize = gt.iter().map(Vec::len).sum();
    EvalReport {
        iou_thresh,
        precision: if dets.is_empty() { 1.0 } else { tp as f64 / dets.len() as f64 },
        recall: if n_gt == 0 { 1.0 } else { tp as f64 / n_gt as f64 },
        true_positives: tp,
        detections: dets.len(),
        ground_truth: n_gt,
    }
}
