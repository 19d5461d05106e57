//! Raw point clouds and the binary point file format: little-endian `f32`
//! quadruples `(x, y, z, intensity)` with no header.

use std::path::Path;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const POINT_RECORD_BYTES: usize = 16;

/// `n x F` point matrix, `F >= 4`, columns `(x, y, z, intensity, ...)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Matrix<f64>,
}

impl PointCloud {
    pub fn new(points: Matrix<f64>) -> Result<Self> {
        if points.cols() < 4 {
            return Err(Error::ShapeMismatch(format!(
                "points need at least 4 columns, got {}",
                points.cols()
            )));
        }
        if !points.all_finite() {
            return Err(Error::NonFinite("point cloud".into()));
        }
        Ok(Self { points })
    }

    pub fn empty() -> Self {
        Self {
            points: Matrix::zeros(0, 4),
        }
    }

    pub fn from_xyzi(points: &[[f64; 4]]) -> Result<Self> {
        let rows: Vec<Vec<f64>> = points.iter().map(|p| p.to_vec()).collect();
        if rows.is_empty() {
            return Ok(Self::empty());
        }
        Self::new(Matrix::from_rows(&rows)?)
    }

    pub fn len(&self) -> usize {
        self.points.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.rows() == 0
    }

    pub fn points(&self) -> &Matrix<f64> {
        &self.points
    }

    pub fn point(&self, i: usize) -> &[f64] {
        self.points.row(i)
    }

    /// Same points in another order (`order[i]` is the source row of row `i`).
    pub fn permuted(&self, order: &[usize]) -> Self {
        let mut m = Matrix::zeros(order.len(), self.points.cols());
        for (dst, &src) in order.iter().enumerate() {
            m.row_mut(dst).copy_from_slice(self.points.row(src));
        }
        Self { points: m }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.len() * POINT_RECORD_BYTES);
        for r in 0..self.len() {
            for &v in &self.points.row(r)[..4] {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }
}

/// Parse a point buffer. Rows with NaN or infinite values are rejected.
pub fn load_points(bytes: &[u8]) -> Result<PointCloud> {
    if bytes.len() % POINT_RECORD_BYTES != 0 {
        return Err(Error::MalformedLength(bytes.len()));
    }
    let n = bytes.len() / POINT_RECORD_BYTES;
    let data: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|w| f32::from_le_bytes([w[0], w[1], w[2], w[3]]) as f64)
        .collect();
    if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("point {}", bad / 4)));
    }
    Ok(PointCloud {
        points: Matrix::from_vec(n, 4, data)?,
    })
}

pub fn read_points(path: &Path) -> Result<PointCloud> {
    load_points(&std::fs::read(path)?)
}
