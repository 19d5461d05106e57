//! Box coding relative to a feature-map site and detection decoding.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::config::BOX_CODE_SIZE;
use crate::grid::GridConfig;
use crate::matrix::Matrix;
use crate::real::Real;
use crate::tensor::{Coord, Layout};

/// An oriented 3-D box in meters; `yaw` in radians, counter-clockwise from +x.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxGeometry {
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub yaw: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub batch: u32,
    pub class_id: usize,
    pub score: f64,
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub yaw: f64,
}

impl Detection {
    pub fn geometry(&self) -> BoxGeometry {
        BoxGeometry {
            center: self.center,
            size: self.size,
            yaw: self.yaw,
        }
    }
}

/// Wrap an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let w = a.sin().atan2(a.cos());
    if w <= -PI {
        w + 2.0 * PI
    } else {
        w
    }
}

/// Metric size of one feature-map cell at `stride`.
fn cell_size(g: &GridConfig, stride: usize) -> [f64; 2] {
    [stride as f64 * g.voxel_size[0], stride as f64 * g.voxel_size[1]]
}

/// BEV center `(x, y)` of a site on a map with the given stride.
pub fn site_center(c: &Coord, g: &GridConfig, stride: usize) -> [f64; 2] {
    let [sx, sy] = cell_size(g, stride);
    [
        g.x_range[0] + (c.x() as f64 + 0.5) * sx,
        g.y_range[0] + (c.y() as f64 + 0.5) * sy,
    ]
}

/// Regression target of `b` at site `c`: `(ox, oy, z, ln dx, ln dy, ln dz, sin, cos)`.
pub fn encode_box(b: &BoxGeometry, c: &Coord, g: &GridConfig, stride: usize) -> [f64; BOX_CODE_SIZE] {
    let [sx, sy] = cell_size(g, stride);
    [
        (b.center[0] - g.x_range[0]) / sx - c.x() as f64 - 0.5,
        (b.center[1] - g.y_range[0]) / sy - c.y() as f64 - 0.5,
        b.center[2],
        b.size[0].ln(),
        b.size[1].ln(),
        b.size[2].ln(),
        b.yaw.sin(),
        b.yaw.cos(),
    ]
}

/// Inverse of [`encode_box`].
pub fn decode_box(raw: &[f64], c: &Coord, g: &GridConfig, stride: usize) -> BoxGeometry {
    let [sx, sy] = cell_size(g, stride);
    BoxGeometry {
        center: [
            g.x_range[0] + (c.x() as f64 + 0.5 + raw[0]) * sx,
            g.y_range[0] + (c.y() as f64 + 0.5 + raw[1]) * sy,
            raw[2],
        ],
        size: [raw[3].exp(), raw[4].exp(), raw[5].exp()],
        yaw: wrap_angle(raw[6].atan2(raw[7])),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Turn per-site head outputs into detections.
///
/// A site is kept when its best-class score exceeds `score_thresh` and no
/// active site in its 3x3 neighborhood beats it; equal scores favor the
/// smaller `(y, x)`. Detections are ordered by batch, then descending score.
pub fn decode_detections<T: Real>(
    cls: &Matrix<T>,
    boxes: &Matrix<T>,
    layout: &Layout,
    g: &GridConfig,
    score_thresh: f64,
) -> Vec<Detection> {
    let stride = layout.stride();
    let n = layout.len();
    let best: Vec<(usize, f64)> = (0..n)
        .map(|r| {
            let row = cls.row(r);
            let mut k = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[k] {
                    k = j;
                }
            }
            (k, sigmoid(row[k].to_f64()))
        })
        .collect();
    let coords = layout.coords();
    let mut out = Vec::new();
    for r in 0..n {
        let (class_id, score) = best[r];
        if score <= score_thresh {
            continue;
        }
        let c = coords[r];
        let key = (c.y(), c.x());
        let suppressed = (-1i64..=1).any(|dy| {
            (-1i64..=1).any(|dx| {
                if dy == 0 && dx == 0 {
                    return false;
                }
                let pos = [c.y() as i64 + dy, c.x() as i64 + dx, 0];
                layout.row_at(c.batch, pos).is_some_and(|q| {
                    let other = best[q].1;
                    other > score || (other == score && (coords[q].y(), coords[q].x()) < key)
                })
            })
        });
        if suppressed {
            continue;
        }
        let raw: Vec<f64> = boxes.row(r).iter().map(|v| v.to_f64()).collect();
        let b = decode_box(&raw, &c, g, stride);
        out.push(Detection {
            batch: c.batch,
            class_id,
            score,
            center: b.center,
            size: b.size,
            yaw: b.yaw,
        });
    }
    out.sort_by(|a, b| a.batch.cmp(&b.batch).then(b.score.total_cmp(&a.score)));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_decode_round_trip() {
        let g = GridConfig::square(20.0);
        let b = BoxGeometry {
            center: [3.3, -7.1, 0.4],
            size: [4.2, 1.9, 1.6],
            yaw: 2.5,
        };
        let c = Coord::new2(0, 8, 14);
        let back = decode_box(&encode_box(&b, &c, &g, 8), &c, &g, 8);
        for a in 0..3 {
            assert!((back.center[a] - b.center[a]).abs() < 1e-9);
            assert!((back.size[a] - b.size[a]).abs() < 1e-9);
        }
        assert!((back.yaw - b.yaw).abs() < 1e-9);
    }

    #[test]
    fn zero_code_is_unit_box_at_site_center() {
        let g = GridConfig::square(20.0);
        let c = Coord::new2(0, 2, 3);
        let b = decode_box(&[0.0; 8], &c, &g, 8);
        assert_eq!(b.size, [1.0; 3]);
        assert_eq!(b.yaw, 0.0);
        let [x, y] = site_center(&c, &g, 8);
        assert_eq!([b.center[0], b.center[1]], [x, y]);
    }

    #[test]
    fn angle_wrapping() {
        assert_eq!(wrap_angle(-PI), PI);
        assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
    }
}
