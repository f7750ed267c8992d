//! The end-to-end segmentation network and its training loop.

pub mod checkpoint;
mod config;
mod model;
pub mod optim;
mod strategy;
mod train;

pub use checkpoint::Checkpoint;
pub use config::ModelConfig;
pub use model::{argmax_classes, probabilities, Diagnostics, ForwardOutput, SegModel, TapeForward, MIN_BANDWIDTH};
pub use optim::{optimizers, Adam, Optimizer, OptimizerSettings, Sgd};
pub use strategy::{
    bottleneck_merges, codebook_inits, seg_objectives, BinaryCrossEntropy, BottleneckMerge, CodebookInit,
    KMeansCodebook, Replace, Residual, SegObjective, SoftmaxCrossEntropy, Strategies, UniformCodebook,
};
pub use train::{check_compatible, evaluate, model_from_checkpoint, EpochRecord, TrainConfig, Trainer};

use crate::error::Result;
use crate::numerics::{Tape, Tensor};

/// Training loss for classes×H×W logits: segmentation term (per the
/// objective), `1 − soft Dice` over foreground classes, plus `quant_loss`.
pub fn seg_loss(
    logits: &Tensor,
    labels: &[u8],
    quant_loss: f64,
    objective: &dyn SegObjective,
    smooth: f64,
) -> Result<f64> {
    let c = logits.shape().first().copied().unwrap_or(0);
    let tape = Tape::new();
    let x = tape.constant(logits.clone().reshape(&[c, logits.numel() / c.max(1)])?);
    let l = objective.loss(&tape, x, labels, smooth)?;
    let v = tape.value(l).item();
    Ok(v + quant_loss)
}
