use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture and bottleneck settings. Strategy fields hold registry names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub classes: usize,
    /// Number of stride-2 stages.
    pub depth: usize,
    /// Channel width at each resolution, full resolution first (`depth + 1` entries).
    pub widths: Vec<usize>,
    /// U-Net style skip connections from encoder to decoder.
    pub skips: bool,
    pub norm_groups: usize,
    pub pre_blocks: usize,
    pub post_blocks: usize,
    pub codebook_size: usize,
    pub code_dim: usize,
    pub beta: f64,
    pub anchors: usize,
    pub bins: usize,
    pub references: usize,
    pub sigma_pos: f64,
    pub epsilon: f64,
    pub sinkhorn_iters: usize,
    pub dice_smooth: f64,
    pub merge: String,
    pub quant_objective: String,
    pub seg_objective: String,
    pub codebook_init: String,
    pub reference_init: String,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            channels: 1,
            classes: 3,
            depth: 2,
            widths: vec![8, 16, 16],
            skips: true,
            norm_groups: 4,
            pre_blocks: 2,
            post_blocks: 2,
            codebook_size: 64,
            code_dim: 16,
            beta: crate::quantizer::DEFAULT_BETA,
            anchors: 16,
            bins: 8,
            references: 2,
            sigma_pos: crate::l2gmapper::DEFAULT_SIGMA_POS,
            epsilon: crate::sinkhorn::DEFAULT_EPSILON,
            sinkhorn_iters: crate::sinkhorn::DEFAULT_ITERATIONS,
            dice_smooth: 1e-5,
            merge: "residual".into(),
            quant_objective: "stop-gradient".into(),
            seg_objective: "softmax-ce".into(),
            codebook_init: "uniform".into(),
            reference_init: "random-unit".into(),
        }
    }
}

impl ModelConfig {
    /// Smallest configuration used by gradient checks.
    pub fn tiny() -> Self {
        Self {
            height: 8,
            width: 8,
            classes: 3,
            depth: 1,
            widths: vec![4, 4],
            norm_groups: 2,
            codebook_size: 8,
            code_dim: 4,
            anchors: 4,
            bins: 2,
            references: 2,
            ..Self::default()
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height >> self.depth, self.width >> self.depth)
    }

    /// Number of codes per image.
    pub fn codes(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        let div = 1usize << self.depth;
        if self.height == 0 || self.width == 0 || self.height % div != 0 || self.width % div != 0 {
            return bad(format!(
                "image {}×{} must be nonzero and divisible by 2^depth = {div}",
                self.height, self.width
            ));
        }
        if self.widths.len() != self.depth + 1 {
            return bad(format!("widths needs depth + 1 = {} entries, got {}", self.depth + 1, self.widths.len()));
        }
        let counts = [
            ("channels", self.channels),
            ("pre_blocks", self.pre_blocks),
            ("code_dim", self.code_dim),
            ("anchors", self.anchors),
            ("bins", self.bins),
            ("references", self.references),
            ("sinkhorn_iters", self.sinkhorn_iters),
            ("norm_groups", self.norm_groups),
        ];
        for (name, v) in counts {
            if v == 0 {
                return bad(format!("{name} must be at least 1"));
            }
        }
        if self.classes < 2 || self.classes > 255 {
            return bad(format!("classes must be in [2, 255], got {}", self.classes));
        }
        if self.codebook_size < 2 {
            return bad(format!("codebook_size must be at least 2, got {}", self.codebook_size));
        }
        for &w in &self.widths {
            if w == 0 || w % self.norm_groups != 0 {
                return bad(format!("width {w} must be a positive multiple of norm_groups = {}", self.norm_groups));
            }
        }
        if !(self.epsilon > 0.0) || !(self.sigma_pos > 0.0) || !(self.beta >= 0.0) || !(self.dice_smooth > 0.0) {
            return bad("epsilon, sigma_pos and dice_smooth must be positive and beta ≥ 0".into());
        }
        Ok(())
    }
}
