//! Seeded random sparse tensors for tests and benchmarks.

use rand::Rng as _;

use crate::encoding::PointCloud;
use crate::error::Result;
use crate::grid::GridConfig;
use crate::matrix::Matrix;
use crate::real::Real;
use crate::rng;
use crate::tensor::{Coord, Layout, SparseTensor};

/// Active set where cell `c` is active iff `u(seed, c) < density`, so raising
/// the density never removes a site.
pub fn random_layout(spatial_shape: &[usize], batch_size: usize, density: f64, seed: u64) -> Result<Layout> {
    let rank = spatial_shape.len();
    let mut coords = Vec::new();
    let dims = [
        spatial_shape[0],
        spatial_shape[1],
        if rank == 3 { spatial_shape[2] } else { 1 },
    ];
    let salt = rng::stream_seed(seed, "layout");
    for b in 0..batch_size {
        for y in 0..dims[0] {
            for x in 0..dims[1] {
                for z in 0..dims[2] {
                    let c = Coord {
                        batch: b as u32,
                        pos: [y as u32, x as u32, z as u32],
                    };
                    if rng::hash_uniform(salt, c.key()) < density {
                        coords.push(c);
                    }
                }
            }
        }
    }
    Layout::new(coords, spatial_shape, batch_size)
}

/// Uniform `[-1, 1)` matrix.
pub fn random_matrix<T: Real>(rows: usize, cols: usize, seed: u64) -> Matrix<T> {
    let mut r = rng::stream(seed, "matrix");
    let data = (0..rows * cols).map(|_| T::from_f64(r.gen_range(-1.0..1.0))).collect();
    Matrix::from_vec(rows, cols, data).expect("sized")
}

pub fn random_sparse<T: Real>(
    spatial_shape: &[usize],
    batch_size: usize,
    density: f64,
    channels: usize,
    seed: u64,
) -> Result<SparseTensor<T>> {
    let layout = random_layout(spatial_shape, batch_size, density, seed)?;
    let n = layout.len();
    SparseTensor::from_layout(std::sync::Arc::new(layout), random_matrix(n, channels, seed ^ 0x5eed))
}

/// `n` points uniform over the detection range with intensity in `[0, 1)`.
pub fn random_cloud(n: usize, g: &GridConfig, seed: u64) -> PointCloud {
    let mut r = rng::stream(seed, "cloud");
    let (lo, hi) = (g.mins(), g.maxs());
    let data = (0..n)
        .flat_map(|_| {
            let mut p = [0.0; 4];
            for a in 0..3 {
                p[a] = r.gen_range(lo[a]..hi[a]);
            }
            p[3] = r.gen_range(0.0..1.0);
            p
        })
        .collect();
    PointCloud::new(Matrix::from_vec(n, 4, data).expect("sized")).expect("finite")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn density_is_monotone() {
        let a = random_layout(&[32, 32], 2, 0.05, 9).unwrap();
        let b = random_layout(&[32, 32], 2, 0.10, 9).unwrap();
        assert!(a.coords().iter().all(|c| b.row_of(c).is_some()));
        assert!(b.len() >= a.len());
    }
}
