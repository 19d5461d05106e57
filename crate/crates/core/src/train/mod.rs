//! Verification and desk-scale training: gradient checks, synthetic scenes,
//! target assignment, loss, optimizer, toy overfitting and evaluation.

pub mod eval;
pub mod gradcheck;
pub mod loss;
pub mod optim;
pub mod overfit;
pub mod scene;
pub mod targets;

pub use eval::{bev_iou, eval_toy, EvalReport};
pub use loss::{detection_loss, LossParts};
pub use optim::Adam;
pub use overfit::{detect_batch, overfit_toy, train_step, CurvePoint, TrainBatch};
pub use scene::{synth_scene, ClassSize, GTBox, SceneLabels, SceneSpec};
pub use targets::{assign_targets, TargetSet};
pub mod suite;
