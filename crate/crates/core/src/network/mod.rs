//! Backbone blocks, fusion, neck, head and the assembled detector.

mod blocks;
mod config;
mod decode;
mod model;

pub use blocks::{ConvNextBlock, DlsfeBlock, LsfeBlock, MsfeModule};
pub use config::{NetworkConfig, BOX_CODE_SIZE, NUM_STAGES};
pub use decode::{
    decode_box, decode_detections, encode_box, sigmoid, site_center, wrap_angle, BoxGeometry, Detection,
};
pub use model::{Backbone, ForwardStats, Fusion, Head, ModelOutput, Neck, PillarNet, CLS_PRIOR};
