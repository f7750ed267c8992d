//! Interchangeable pieces of the model, selected by name from the config.

use crate::error::{Error, Result};
use crate::l2gmapper::ReferenceInit;
use crate::numerics::{Rng, Tape, Tensor, Var};
use crate::quantizer::{init_kmeans, init_uniform, QuantObjective};
use crate::registry::{quant_objectives, reference_inits, Registry};
use crate::segmodel::ModelConfig;

/// Segmentation term of the training loss on a classes×P logit matrix.
pub trait SegObjective: Send + Sync {
    fn name(&self) -> &'static str;

    /// Pixel classification loss plus `1 − soft Dice` over foreground classes.
    fn loss(&self, tape: &Tape, logits: Var, labels: &[u8], smooth: f64) -> Result<Var>;
}

/// Softmax cross-entropy, soft Dice on softmax probabilities.
#[derive(Debug, Clone, Copy)]
pub struct SoftmaxCrossEntropy;

/// One-vs-rest binary cross-entropy, soft Dice on per-class sigmoids.
#[derive(Debug, Clone, Copy)]
pub struct BinaryCrossEntropy;

impl SegObjective for SoftmaxCrossEntropy {
    fn name(&self) -> &'static str {
        "softmax-ce"
    }

    fn loss(&self, tape: &Tape, logits: Var, labels: &[u8], smooth: f64) -> Result<Var> {
        let ce = tape.cross_entropy(logits, labels)?;
        let probs = tape.softmax_classes(logits)?;
        let dice = tape.soft_dice_loss(probs, labels, smooth)?;
        tape.add(ce, dice)
    }
}

impl SegObjective for BinaryCrossEntropy {
    fn name(&self) -> &'static str {
        "bce"
    }

    fn loss(&self, tape: &Tape, logits: Var, labels: &[u8], smooth: f64) -> Result<Var> {
        let bce = tape.binary_cross_entropy(logits, labels)?;
        let probs = tape.sigmoid(logits)?;
        let dice = tape.soft_dice_loss(probs, labels, smooth)?;
        tape.add(bce, dice)
    }
}

/// How the projected mapper output re-enters the spatial code grid.
pub trait BottleneckMerge: Send + Sync {
    fn name(&self) -> &'static str;
    fn merge(&self, tape: &Tape, z_dis: Var, mapped: Var) -> Result<Var>;
}

/// `z_dis + mapped`.
#[derive(Debug, Clone, Copy)]
pub struct Residual;

/// `mapped` alone.
#[derive(Debug, Clone, Copy)]
pub struct Replace;

impl BottleneckMerge for Residual {
    fn name(&self) -> &'static str {
        "residual"
    }

    fn merge(&self, tape: &Tape, z_dis: Var, mapped: Var) -> Result<Var> {
        tape.add(z_dis, mapped)
    }
}

impl BottleneckMerge for Replace {
    fn name(&self) -> &'static str {
        "replace"
    }

    fn merge(&self, _: &Tape, _: Var, mapped: Var) -> Result<Var> {
        Ok(mapped)
    }
}

pub trait CodebookInit: Send + Sync {
    fn name(&self) -> &'static str;

    /// `warmup` holds encoder outputs z_con (rows of length `dim`), when available.
    fn init(&self, size: usize, dim: usize, warmup: Option<&Tensor>, rng: &mut Rng) -> Result<Tensor>;
}

/// Entries uniform in `[−1/K, 1/K]`.
#[derive(Debug, Clone, Copy)]
pub struct UniformCodebook;

/// k-means centroids of a warm-up batch; falls back to uniform without one.
#[derive(Debug, Clone, Copy)]
pub struct KMeansCodebook;

impl CodebookInit for UniformCodebook {
    fn name(&self) -> &'static str {
        "uniform"
    }

    fn init(&self, size: usize, dim: usize, _: Option<&Tensor>, rng: &mut Rng) -> Result<Tensor> {
        Ok(init_uniform(size, dim, rng))
    }
}

impl CodebookInit for KMeansCodebook {
    fn name(&self) -> &'static str {
        "kmeans"
    }

    fn init(&self, size: usize, dim: usize, warmup: Option<&Tensor>, rng: &mut Rng) -> Result<Tensor> {
        match warmup {
            Some(batch) if batch.cols() != dim => Err(Error::shape(
                "kmeans codebook",
                format!("warm-up rows of length {}, codes of length {dim}", batch.cols()),
            )),
            Some(batch) => init_kmeans(size, batch, rng),
            None => Ok(init_uniform(size, dim, rng)),
        }
    }
}

pub fn seg_objectives() -> Registry<dyn SegObjective> {
    Registry::<dyn SegObjective>::new("segmentation objective")
        .with("softmax-ce", |_| Box::new(SoftmaxCrossEntropy))
        .with("bce", |_| Box::new(BinaryCrossEntropy))
}

pub fn bottleneck_merges() -> Registry<dyn BottleneckMerge> {
    Registry::<dyn BottleneckMerge>::new("bottleneck merge")
        .with("residual", |_| Box::new(Residual))
        .with("replace", |_| Box::new(Replace))
}

pub fn codebook_inits() -> Registry<dyn CodebookInit> {
    Registry::<dyn CodebookInit>::new("codebook init")
        .with("uniform", |_| Box::new(UniformCodebook))
        .with("kmeans", |_| Box::new(KMeansCodebook))
}

/// The strategies named by a [`ModelConfig`].
pub struct Strategies {
    pub seg: Box<dyn SegObjective>,
    pub quant: Box<dyn QuantObjective>,
    pub merge: Box<dyn BottleneckMerge>,
    pub codebook_init: Box<dyn CodebookInit>,
    pub reference_init: Box<dyn ReferenceInit>,
}

impl Strategies {
    pub fn resolve(cfg: &ModelConfig) -> Result<Self> {
        Ok(Self {
            seg: seg_objectives().create(&cfg.seg_objective, &())?,
            quant: quant_objectives().create(&cfg.quant_objective, &cfg.beta)?,
            merge: bottleneck_merges().create(&cfg.merge, &())?,
            codebook_init: codebook_inits().create(&cfg.codebook_init, &())?,
            reference_init: reference_inits().create(&cfg.reference_init, &())?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_resolves() {
        let s = Strategies::resolve(&ModelConfig::default()).unwrap();
        assert_eq!(s.seg.name(), "softmax-ce");
        assert_eq!(s.merge.name(), "residual");
        assert_eq!(s.quant.name(), "stop-gradient");
    }

    #[test]
    fn unknown_strategy_is_named() {
        let cfg = ModelConfig {
            merge: "gate".into(),
            ..ModelConfig::default()
        };
        let msg = Strategies::resolve(&cfg).err().unwrap().to_string();
        assert!(msg.contains("gate") && msg.contains("residual"));
    }
}
