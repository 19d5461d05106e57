//! Point-cloud grid geometry.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Detection range and voxel geometry.
///
/// Cell counts are derived: `W` along x, `H` along y, `D` along z.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub x_range: [f64; 2],
    pub y_range: [f64; 2],
    pub z_range: [f64; 2],
    pub voxel_size: [f64; 3],
    pub max_points_per_voxel: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            x_range: [-75.2, 75.2],
            y_range: [-75.2, 75.2],
            z_range: [-2.0, 4.0],
            voxel_size: [0.1, 0.1, 0.2],
            max_points_per_voxel: 32,
        }
    }
}

const ALIGN_TOL: f64 = 1e-6;

fn axis_cells(name: &str, range: [f64; 2], size: f64) -> Result<usize> {
    let bad = |reason: String| Error::InvalidConfig {
        field: name.to_string(),
        reason,
    };
    if !(range[0].is_finite() && range[1].is_finite() && size.is_finite()) {
        return Err(bad("non-finite value".into()));
    }
    if range[1] <= range[0] {
        return Err(bad(format!("max {} must exceed min {}", range[1], range[0])));
    }
    if size <= 0.0 {
        return Err(bad(format!("voxel size {size} must be positive")));
    }
    let extent = range[1] - range[0];
    let cells = (extent / size).round();
    if cells < 1.0 || cells > u16::MAX as f64 {
        return Err(bad(format!("{cells} cells is outside [1, {}]", u16::MAX)));
    }
    if (extent - cells * size).abs() > ALIGN_TOL {
        return Err(bad(format!(
            "extent {extent} is not a whole number of {size} m cells"
        )));
    }
    Ok(cells as usize)
}

impl GridConfig {
    /// A grid with the default voxel geometry on a square `±half_extent` BEV range.
    pub fn square(half_extent: f64) -> Self {
        Self {
            x_range: [-half_extent, half_extent],
            y_range: [-half_extent, half_extent],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(v) = self.voxel_size.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(Error::InvalidConfig {
                field: "grid.voxel_size".into(),
                reason: format!("{v} must be positive"),
            });
        }
        self.try_cells().map(|_| ())?;
        if self.max_points_per_voxel == 0 {
            return Err(Error::InvalidConfig {
                field: "grid.max_points_per_voxel".into(),
                reason: "must be at least 1".into(),
            });
        }
        Ok(())
    }

    /// `[W, H, D]` or the first invalid axis.
    pub fn try_cells(&self) -> Result<[usize; 3]> {
        Ok([
            axis_cells("grid.x_range", self.x_range, self.voxel_size[0])?,
            axis_cells("grid.y_range", self.y_range, self.voxel_size[1])?,
            axis_cells("grid.z_range", self.z_range, self.voxel_size[2])?,
        ])
    }

    /// `[W, H, D]`. Panics on an invalid config; call [`GridConfig::validate`] first.
    pub fn cells(&self) -> [usize; 3] {
        self.try_cells().expect("validated grid")
    }

    /// Rank-2 spatial shape `(H, W)`.
    pub fn bev_shape(&self) -> [usize; 2] {
        let [w, h, _] = self.cells();
        [h, w]
    }

    /// Rank-3 spatial shape `(H, W, D)`.
    pub fn voxel_shape(&self) -> [usize; 3] {
        let [w, h, d] = self.cells();
        [h, w, d]
    }

    pub fn mins(&self) -> [f64; 3] {
        [self.x_range[0], self.y_range[0], self.z_range[0]]
    }

    pub fn maxs(&self) -> [f64; 3] {
        [self.x_range[1], self.y_range[1], self.z_range[1]]
    }

    /// Height of one pillar (the whole vertical range).
    pub fn pillar_height(&self) -> f64 {
        self.z_range[1] - self.z_range[0]
    }
}
