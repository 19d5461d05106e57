use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_STAGES: usize = 6;
pub const BOX_CODE_SIZE: usize = 8;

/// Architecture hyperparameters of the backbone, neck and head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub stage_channels: [usize; NUM_STAGES],
    /// Per-stage downsampling factor (1 or 2).
    pub stage_strides: [usize; NUM_STAGES],
    pub lsfe_per_stage: usize,
    /// Dilation of each LSFE block within a stage, in order.
    pub dilation_schedule: Vec<usize>,
    pub fuse_channels: usize,
    pub neck_repeats: usize,
    pub neck_kernel: usize,
    pub convnext_expand: usize,
    pub num_classes: usize,
    pub head_channels: usize,
    /// Width of the per-point MLP in the pillar encoder.
    pub encoder_channels: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            stage_channels: [32, 64, 128, 256, 256, 256],
            stage_strides: [1, 2, 2, 2, 2, 2],
            lsfe_per_stage: 2,
            dilation_schedule: vec![2, 3],
            fuse_channels: 256,
            neck_repeats: 1,
            neck_kernel: 5,
            convnext_expand: 4,
            num_classes: 3,
            head_channels: 64,
            encoder_channels: 32,
        }
    }
}

fn invalid(field: &str, reason: impl Into<String>) -> Error {
    Error::InvalidConfig {
        field: format!("network.{field}"),
        reason: reason.into(),
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.iter().any(|&c| c == 0) {
            return Err(invalid("stage_channels", "channel counts must be positive"));
        }
        if self.stage_strides.iter().any(|&s| s != 1 && s != 2) {
            return Err(invalid("stage_strides", "each stage stride must be 1 or 2"));
        }
        if self.dilation_schedule.len() != self.lsfe_per_stage {
            return Err(invalid(
                "dilation_schedule",
                format!("has {} entries but lsfe_per_stage is {}", self.dilation_schedule.len(), self.lsfe_per_stage),
            ));
        }
        if self.dilation_schedule.iter().any(|&m| m == 0) {
            return Err(invalid("dilation_schedule", "dilations must be at least 1"));
        }
        if self.neck_kernel % 2 == 0 {
            return Err(invalid("neck_kernel", "must be odd"));
        }
        for (field, v) in [
            ("fuse_channels", self.fuse_channels),
            ("convnext_expand", self.convnext_expand),
            ("num_classes", self.num_classes),
            ("head_channels", self.head_channels),
            ("encoder_channels", self.encoder_channels),
        ] {
            if v == 0 {
                return Err(invalid(field, "must be positive"));
            }
        }
        Ok(())
    }

    /// Cumulative stride of every stage output.
    pub fn cumulative_strides(&self) -> [usize; NUM_STAGES] {
        let mut out = [1; NUM_STAGES];
        let mut s = 1;
        for (o, &f) in out.iter_mut().zip(&self.stage_strides) {
            s *= f;
            *o = s;
        }
        out
    }
}
