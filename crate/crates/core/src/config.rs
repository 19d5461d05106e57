//! Run configuration: grid, network, scene generation and run options in one
//! JSON document.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::GridConfig;
use crate::network::NetworkConfig;
use crate::train::scene::SceneSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Precision {
    #[serde(rename = "32")]
    F32,
    #[serde(rename = "64")]
    F64,
}

impl Precision {
    pub fn from_bits(bits: u32) -> Result<Self> {
        match bits {
            32 => Ok(Self::F32),
            64 => Ok(Self::F64),
            _ => Err(Error::InvalidConfig {
                field: "precision".into(),
                reason: format!("{bits} is not 32 or 64"),
            }),
        }
    }
}

/// Toy training options.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub scenes: usize,
    pub steps: usize,
    pub lr: f64,
    pub iou_thresh: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            scenes: 3,
            steps: 500,
            lr: 1e-3,
            iou_thresh: 0.7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub precision: Precision,
    pub score_thresh: f64,
    pub grid: GridConfig,
    pub network: NetworkConfig,
    pub scene: SceneSpec,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            precision: Precision::F64,
            score_thresh: 0.3,
            grid: GridConfig::default(),
            network: NetworkConfig {
                num_classes: 1,
                ..NetworkConfig::default()
            },
            scene: SceneSpec::default(),
            train: TrainConfig::default(),
        }
    }
}

fn invalid(field: &str, reason: &str) -> Error {
    Error::InvalidConfig {
        field: field.into(),
        reason: reason.into(),
    }
}

impl RunConfig {
    /// Reduced setup for desk-scale training: a ±20 m range and narrow layers.
    pub fn toy() -> Self {
        Self {
            grid: GridConfig {
                x_range: [-20.0, 20.0],
                y_range: [-20.0, 20.0],
                z_range: [-2.0, 4.0],
                voxel_size: [0.2, 0.2, 0.2],
                max_points_per_voxel: 16,
            },
            network: NetworkConfig {
                stage_channels: [16, 16, 24, 32, 32, 32],
                fuse_channels: 32,
                head_channels: 32,
                encoder_channels: 16,
                convnext_expand: 2,
                num_classes: 1,
                ..NetworkConfig::default()
            },
            ..Self::default()
        }
    }

    /// Synthetic scene `index` of this run; every command draws the same one.
    pub fn scene(&self, index: usize) -> Result<(crate::encoding::PointCloud, Vec<crate::train::GTBox>)> {
        crate::train::synth_scene(&self.scene, &self.grid, crate::rng::stream_seed(self.seed, &format!("scene{index}")))
    }

    /// Parse and validate; errors name the offending field.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.network.validate()?;
        self.scene.validate(&self.grid)?;
        if self.scene.class_sizes.len() > self.network.num_classes {
            return Err(invalid("scene.class_sizes", "more classes than network.num_classes"));
        }
        if !(self.score_thresh >= 0.0 && self.score_thresh < 1.0) {
            return Err(invalid("score_thresh", "must lie in [0, 1)"));
        }
        if !(self.train.lr > 0.0 && self.train.lr.is_finite()) {
            return Err(invalid("train.lr", "must be positive"));
        }
        if !(self.train.iou_thresh > 0.0 && self.train.iou_thresh < 1.0) {
            return Err(invalid("train.iou_thresh", "must lie in (0, 1)"));
        }
        Ok(())
    }
}
