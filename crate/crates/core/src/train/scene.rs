//! Synthetic driving-like scenes: box-shaped objects sampled on their surface
//! plus uniform ground clutter.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoding::PointCloud;
use crate::error::{Error, Result};
use crate::grid::GridConfig;
use crate::matrix::Matrix;
use crate::network::BoxGeometry;
use crate::rng;

/// Ground-truth object box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GTBox {
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub yaw: f64,
    pub class_id: usize,
}

impl GTBox {
    pub fn geometry(&self) -> BoxGeometry {
        BoxGeometry {
            center: self.center,
            size: self.size,
            yaw: self.yaw,
        }
    }

    /// Whether `p` lies inside the box inflated by `margin` on every side.
    pub fn contains(&self, p: &[f64], margin: f64) -> bool {
        let (dx, dy) = (p[0] - self.center[0], p[1] - self.center[1]);
        let (s, c) = self.yaw.sin_cos();
        let local = [c * dx + s * dy, -s * dx + c * dy, p[2] - self.center[2]];
        local.iter().zip(&self.size).all(|(l, sz)| l.abs() <= sz / 2.0 + margin)
    }
}

/// Label file contents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneLabels {
    pub boxes: Vec<GTBox>,
}

/// Size range `[min, max]` (meters, per axis) of one object class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSize {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    /// Inclusive range of the number of boxes per scene.
    pub box_count: [usize; 2],
    /// One entry per class.
    pub class_sizes: Vec<ClassSize>,
    /// Inclusive range of surface points per box.
    pub points_per_box: [usize; 2],
    pub ground_points: usize,
    /// Minimum BEV distance between box centers, in meters.
    pub min_separation: f64,
    /// Keep box centers at least this far inside the x/y range.
    pub edge_margin: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            box_count: [2, 3],
            class_sizes: vec![ClassSize {
                min: [3.6, 1.6, 1.4],
                max: [4.4, 1.9, 1.7],
            }],
            points_per_box: [150, 250],
            ground_points: 200,
            min_separation: 8.0,
            edge_margin: 4.0,
        }
    }
}

fn invalid(field: &str, reason: impl Into<String>) -> Error {
    Error::InvalidConfig {
        field: format!("scene.{field}"),
        reason: reason.into(),
    }
}

impl SceneSpec {
    pub fn validate(&self, g: &GridConfig) -> Result<()> {
        if self.box_count[0] > self.box_count[1] {
            return Err(invalid("box_count", "min exceeds max"));
        }
        if self.points_per_box[0] > self.points_per_box[1] {
            return Err(invalid("points_per_box", "min exceeds max"));
        }
        if self.box_count[1] > 0 && self.class_sizes.is_empty() {
            return Err(invalid("class_sizes", "at least one class is needed to place boxes"));
        }
        for (i, c) in self.class_sizes.iter().enumerate() {
            if (0..3).any(|a| !(c.min[a] > 0.0 && c.min[a] <= c.max[a])) {
                return Err(invalid(&format!("class_sizes[{i}]"), "sizes must satisfy 0 < min <= max"));
            }
            if (0..3).any(|a| c.max[a] > g.maxs()[a] - g.mins()[a]) || c.max[2] > g.z_range[1] - g.z_range[0] {
                return Err(invalid(&format!("class_sizes[{i}]"), "boxes do not fit the detection range"));
            }
        }
        if !(self.min_separation >= 0.0 && self.edge_margin >= 0.0) {
            return Err(invalid("min_separation", "distances must be non-negative"));
        }
        for a in 0..2 {
            if 2.0 * self.edge_margin >= g.maxs()[a] - g.mins()[a] {
                return Err(invalid("edge_margin", "leaves no room for box centers"));
            }
        }
        Ok(())
    }
}

fn uniform(r: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        r.gen_range(lo..hi)
    } else {
        lo
    }
}

/// Placement attempts per box before giving up on it.
const MAX_PLACEMENT_TRIES: usize = 1000;

/// Sample a scene. Boxes rest on the floor of the vertical range; surface
/// points are uniform over the six faces (area-weighted); clutter points lie
/// in the lowest 10 cm of the range.
pub fn synth_scene(spec: &SceneSpec, g: &GridConfig, seed: u64) -> Result<(PointCloud, Vec<GTBox>)> {
    spec.validate(g)?;
    let mut r = rng::stream(seed, "scene");
    let n_boxes = r.gen_range(spec.box_count[0]..=spec.box_count[1]);
    let mut boxes: Vec<GTBox> = Vec::with_capacity(n_boxes);
    for _ in 0..n_boxes {
        let class_id = r.gen_range(0..spec.class_sizes.len());
        let cs = &spec.class_sizes[class_id];
        let size = [0, 1, 2].map(|a| uniform(&mut r, cs.min[a], cs.max[a]));
        let yaw = uniform(&mut r, -std::f64::consts::PI, std::f64::consts::PI);
        for _ in 0..MAX_PLACEMENT_TRIES {
            let x = uniform(&mut r, g.x_range[0] + spec.edge_margin, g.x_range[1] - spec.edge_margin);
            let y = uniform(&mut r, g.y_range[0] + spec.edge_margin, g.y_range[1] - spec.edge_margin);
            if boxes
                .iter()
                .all(|b| (b.center[0] - x).hypot(b.center[1] - y) >= spec.min_separation)
            {
                boxes.push(GTBox {
                    center: [x, y, g.z_range[0] + size[2] / 2.0],
                    size,
                    yaw,
                    class_id,
                });
                break;
            }
        }
    }

    let mut pts: Vec<f64> = Vec::new();
    for b in &boxes {
        let n = r.gen_range(spec.points_per_box[0]..=spec.points_per_box[1]);
        let [l, w, h] = b.size;
        let faces = [w * h, w * h, l * h, l * h, l * w, l * w];
        let total: f64 = faces.iter().sum();
        let (s, c) = b.yaw.sin_cos();
        for _ in 0..n {
            let mut pick = r.gen_range(0.0..total);
            let mut face = 0;
            while face < 5 && pick >= faces[face] {
                pick -= faces[face];
                face += 1;
            }
            let mut local = [
                r.gen_range(-0.5..0.5) * l,
                r.gen_range(-0.5..0.5) * w,
                r.gen_range(-0.5..0.5) * h,
            ];
            let axis = face / 2;
            let sign = if face % 2 == 0 { -0.5 } else { 0.5 };
            local[axis] = sign * b.size[axis];
            let x = b.center[0] + c * local[0] - s * local[1];
            let y = b.center[1] + s * local[0] + c * local[1];
            let z = b.center[2] + local[2];
            pts.extend_from_slice(&[x, y, z, r.gen_range(0.2..1.0)]);
        }
    }
    for _ in 0..spec.ground_points {
        let x = uniform(&mut r, g.x_range[0], g.x_range[1]);
        let y = uniform(&mut r, g.y_range[0], g.y_range[1]);
        let z = g.z_range[0] + r.gen_range(0.0..0.1f64.min(g.z_range[1] - g.z_range[0]));
        pts.extend_from_slice(&[x, y, z, r.gen_range(0.0..0.3)]);
    }
    let n = pts.len() / 4;
    Ok((PointCloud::new(Matrix::from_vec(n, 4, pts)?)?, boxes))
}
