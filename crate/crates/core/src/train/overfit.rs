//! Desk-scale training loop: overfit the detector on a fixed set of scenes.

use serde::{Deserialize, Serialize};

use super::loss::detection_loss;
use super::optim::Adam;
use super::scene::GTBox;
use super::targets::assign_targets;
use crate::autograd::{NormMode, Tape};
use crate::encoding::{PointCloud, VoxelBatch};
use crate::error::{Error, Result};
use crate::network::{Detection, PillarNet};
use crate::real::Real;
use crate::store::ParamStore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub loss: f64,
    pub cls_loss: f64,
    pub reg_loss: f64,
}

/// A voxelized batch of scenes with their boxes, reused for every step.
pub struct TrainBatch {
    pub voxels: VoxelBatch,
    pub boxes: Vec<Vec<GTBox>>,
}

impl TrainBatch {
    pub fn new(net: &PillarNet, scenes: &[(PointCloud, Vec<GTBox>)], seed: u64) -> Result<Self> {
        let clouds: Vec<PointCloud> = scenes.iter().map(|s| s.0.clone()).collect();
        Ok(Self {
            voxels: net.prepare(&clouds, seed)?,
            boxes: scenes.iter().map(|s| s.1.clone()).collect(),
        })
    }
}

/// One forward/backward pass in train mode; returns the loss and applies the
/// update and running-statistic changes.
pub fn train_step<T: Real>(
    net: &PillarNet,
    store: &mut ParamStore<T>,
    adam: &mut Adam<T>,
    batch: &TrainBatch,
) -> Result<CurvePoint> {
    let mut tape = Tape::new(NormMode::Train);
    let out = net.forward(&mut tape, store, &batch.voxels)?;
    let targets = assign_targets(&batch.boxes, &out.cls.layout, &net.grid, net.config.num_classes)?;
    let loss = detection_loss(&mut tape, out.cls.var, out.boxes.var, &targets)?;
    let value = tape.value(loss.total).get(0, 0).to_f64();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("loss at step {}", adam.step + 1)));
    }
    let grads = tape.backward(loss.total)?;
    tape.commit_stats(store);
    adam.update(store, &grads)?;
    Ok(CurvePoint {
        step: adam.step as usize,
        loss: value,
        cls_loss: loss.cls,
        reg_loss: loss.reg,
    })
}

/// Train for `steps` Adam steps at learning rate `lr` on all scenes at once.
pub fn overfit_toy<T: Real>(
    net: &PillarNet,
    store: &mut ParamStore<T>,
    batch: &TrainBatch,
    steps: usize,
    lr: f64,
) -> Result<Vec<CurvePoint>> {
    let mut adam = Adam::new(lr);
    (0..steps).map(|_| train_step(net, store, &mut adam, batch)).collect()
}

/// Eval-mode detections on a prepared batch.
pub fn detect_batch<T: Real>(
    net: &PillarNet,
    store: &ParamStore<T>,
    voxels: &VoxelBatch,
    score_thresh: f64,
) -> Result<Vec<Detection>> {
    let mut tape = Tape::new(NormMode::Eval);
    let out = net.forward(&mut tape, store, voxels)?;
    Ok(net.detect(&tape, &out, score_thresh))
}
