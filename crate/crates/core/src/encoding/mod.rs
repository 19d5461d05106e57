//! Point ingestion, voxelization and pillar encoders.

mod encoder;
mod points;
mod voxelize;

pub use encoder::{pool_max, pool_mmm, BaselinePillarEncoder, PointMlp, Voxel2PillarEncoder};
pub use points::{load_points, read_points, PointCloud, POINT_RECORD_BYTES};
pub use voxelize::{
    augment_point_features, cell_center, point_cell, voxelize, voxelize_batch, VoxelBatch, AUGMENTED_FEATURES,
};
