use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, EditTransform, SplatMode};
use crate::guidance::{BlockSelection, SharedAttentionConfig};
use crate::losses::{LossWeights, RemoveLossOptions};

fn default_steps() -> usize {
    50
}
fn default_share_until() -> usize {
    45
}
fn default_optimize_first_n() -> usize {
    32
}
fn default_lr() -> f64 {
    1.5
}
fn default_iterations() -> usize {
    1
}
fn one() -> f64 {
    1.0
}
fn yes() -> bool {
    true
}

/// Everything that controls one edit. Every field but `transform` has a
/// default, so `{"transform": {...}}` is a complete config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditConfig {
    pub transform: EditTransform,
    #[serde(default)]
    pub intrinsics: Option<CameraIntrinsics>,
    #[serde(default = "default_steps")]
    pub steps: usize,
    /// Enables shared attention at all.
    #[serde(default = "yes")]
    pub sharing: bool,
    #[serde(default = "default_share_until")]
    pub share_until_step: usize,
    #[serde(default)]
    pub shared_blocks: BlockSelection,
    /// Enables latent and embedding optimization.
    #[serde(default = "yes")]
    pub optimize: bool,
    /// Optimization runs on alternate steps among the first `optimize_first_n`.
    #[serde(default = "default_optimize_first_n")]
    pub optimize_first_n: usize,
    #[serde(default = "default_iterations")]
    pub iterations_per_step: usize,
    /// Learning rate at the first optimized step; decays linearly to 0.
    #[serde(default = "default_lr")]
    pub lr: f64,
    /// Multiplies `lr` for the null-text update. The embedding is shared by
    /// every token, so large loss weights move it far more than the latent.
    #[serde(default = "one")]
    pub text_lr_scale: f64,
    #[serde(default)]
    pub weights: LossWeights,
    #[serde(default)]
    pub remove_loss: RemoveLossOptions,
    /// Adds the reference branch's per-step inversion residual to the edit
    /// branch, so an edit that changes nothing reproduces the input.
    #[serde(default = "yes")]
    pub edit_residual_correction: bool,
    #[serde(default)]
    pub splat_mode: SplatMode,
    #[serde(default)]
    pub seed: u64,
    /// Keep per-step attention summaries.
    #[serde(default = "yes")]
    pub diagnostics: bool,
}

impl EditConfig {
    pub fn new(transform: EditTransform) -> Self {
        Self {
            transform,
            intrinsics: None,
            steps: default_steps(),
            sharing: true,
            share_until_step: default_share_until(),
            shared_blocks: BlockSelection::All,
            optimize: true,
            optimize_first_n: default_optimize_first_n(),
            iterations_per_step: default_iterations(),
            lr: default_lr(),
            text_lr_scale: 1.0,
            weights: LossWeights::default(),
            remove_loss: RemoveLossOptions::default(),
            edit_residual_correction: true,
            splat_mode: SplatMode::Nearest,
            seed: 0,
            diagnostics: true,
        }
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(s).map_err(|e| Error::invalid(format!("edit config: {e}")))?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.transform.validate()?;
        if let Some(k) = &self.intrinsics {
            k.validate()?;
        }
        if self.share_until_step > self.steps {
            return Err(Error::invalid(format!(
                "share_until_step {} exceeds {} steps",
                self.share_until_step, self.steps
            )));
        }
        if self.optimize_first_n > self.steps {
            return Err(Error::invalid(format!(
                "optimize_first_n {} exceeds {} steps",
                self.optimize_first_n, self.steps
            )));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("learning rate must be finite and ≥ 0"));
        }
        if !(self.text_lr_scale >= 0.0 && self.text_lr_scale.is_finite()) {
            return Err(Error::invalid("text_lr_scale must be finite and ≥ 0"));
        }
        let w = &self.weights;
        if [w.w_bg, w.w_obj, w.w_smooth, w.w_remove].iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::invalid("loss weights must be finite and ≥ 0"));
        }
        let a = &w.adaptive;
        if !(a.lower_thresh <= a.upper_thresh && a.factor >= 1.0 && 0.0 < a.w_min && a.w_min <= a.w_max) {
            return Err(Error::invalid("bad adaptive removal-weight rule"));
        }
        Ok(())
    }

    pub fn shared_attention(&self) -> SharedAttentionConfig {
        SharedAttentionConfig {
            share_until_step: if self.sharing { self.share_until_step } else { 0 },
            blocks: self.shared_blocks.clone(),
        }
    }

    /// Steps that run an optimization update.
    pub fn optimized_steps(&self) -> Vec<usize> {
        if self.optimize {
            crate::optim::optimized_steps(self.optimize_first_n, self.steps)
        } else {
            Vec::new()
        }
    }
}
