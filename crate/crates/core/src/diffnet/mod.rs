//! The toy latent denoiser `ε_θ(z_t, t, text)`: a two-level UNet with a
//! self- and a cross-attention layer at every level, a learned null-text
//! embedding, and a linear-β noise schedule.

mod attention;
mod capture;
mod schedule;
mod unet;

use std::path::Path;

use crate::archive::{Dtype, TensorArchive};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub use attention::{attention, attention_map, attention_map_var, attention_var, AttentionKind};
pub use capture::{AttentionRecord, CaptureHook};
pub use schedule::{forward_noise_with, NoiseSchedule, ScheduleConfig};
pub use unet::{
    block_layout, forward, init_weights, parameter_shapes, timestep_embedding, AttentionHook,
    BlockInfo, BoundWeights, NoHook, UnetConfig, Weights,
};

/// A denoiser checkpoint: architecture, schedule, weights and the null-text
/// embedding. Immutable once built and safe to share between threads.
#[derive(Clone, Debug)]
pub struct Denoiser {
    config: UnetConfig,
    schedule: NoiseSchedule,
    weights: Weights,
    null_text: Matrix,
}

impl Denoiser {
    pub fn new(
        config: UnetConfig,
        schedule: NoiseSchedule,
        weights: Weights,
        null_text: Matrix,
    ) -> Result<Self> {
        for (name, shape) in parameter_shapes(&config) {
            let w = weights
                .get(&name)
                .ok_or_else(|| Error::Missing(format!("weight `{name}`")))?;
            if w.shape() != shape {
                return Err(Error::Format(format!(
                    "weight `{name}` is {:?}, expected {shape:?}",
                    w.shape()
                )));
            }
        }
        if null_text.shape() != (config.text_len, config.text_dim) {
            return Err(Error::Format("null-text embedding has the wrong shape".into()));
        }
        Ok(Self {
            config,
            schedule,
            weights,
            null_text,
        })
    }

    /// Seeded random weights with the default schedule.
    pub fn random(config: UnetConfig, seed: u64) -> Self {
        let weights = init_weights(&config, seed);
        let null_text = init_null_text(&config, seed);
        let schedule = NoiseSchedule::linear(ScheduleConfig::default()).expect("default schedule");
        Self::new(config, schedule, weights, null_text).expect("consistent init")
    }

    pub fn config(&self) -> &UnetConfig {
        &self.config
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn weights(&self) -> &Weights {
        &self.weights
    }

    pub fn null_text(&self) -> &Matrix {
        &self.null_text
    }

    pub fn latent_shape(&self) -> (usize, usize) {
        (
            self.config.latent_height * self.config.latent_width,
            self.config.latent_channels,
        )
    }

    pub fn blocks(&self) -> Vec<BlockInfo> {
        block_layout(&self.config)
    }

    /// Builds the noise prediction on `g` with the weights bound as
    /// constants. Use this to differentiate with respect to `z` or `text`.
    pub fn eps_graph<H: AttentionHook>(
        &self,
        g: &mut Graph,
        z: Var,
        t: usize,
        text: Var,
        hook: H,
    ) -> Result<Var> {
        self.check_t(t)?;
        let w = BoundWeights::bind(g, &self.weights, false);
        forward(&self.config, &w, g, z, t, text, hook)
    }

    /// `ε_θ(z, t, text)` with every attention layer routed through `hook`.
    pub fn eps<H: AttentionHook>(&self, z: &Matrix, t: usize, text: &Matrix, hook: H) -> Result<Matrix> {
        if !z.is_finite() || !text.is_finite() {
            return Err(Error::NonFinite {
                step: t,
                what: "denoiser input".into(),
            });
        }
        let mut g = Graph::new();
        let zv = g.constant(z.clone());
        let tv = g.constant(text.clone());
        let out = self.eps_graph(&mut g, zv, t, tv, hook)?;
        Ok(g.value(out).clone())
    }

    /// Classifier-free guidance: `ε_null + s·(ε_cond − ε_null)`.
    pub fn cfg_eps(
        &self,
        z: &Matrix,
        t: usize,
        cond: &Matrix,
        null: &Matrix,
        scale: f64,
    ) -> Result<Matrix> {
        if scale.is_nan() || scale < 0.0 {
            return Err(Error::invalid(format!("guidance scale {scale} must be ≥ 0")));
        }
        let e_null = self.eps(z, t, null, NoHook)?;
        if scale == 0.0 {
            return Ok(e_null);
        }
        let e_cond = self.eps(z, t, cond, NoHook)?;
        Ok(e_null.zip_map(&e_cond, |n, c| n + scale * (c - n)))
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.schedule.train_steps() {
            return Err(Error::invalid(format!(
                "timestep {t} outside 1..={}",
                self.schedule.train_steps()
            )));
        }
        Ok(())
    }

    pub fn to_archive(&self) -> TensorArchive {
        let meta = serde_json::json!({
            "kind": "denoiser",
            "unet": self.config,
            "schedule": self.schedule.config(),
        });
        let mut a = TensorArchive::new(meta);
        for (name, m) in &self.weights {
            a.push(name.clone(), Dtype::F32, m.clone());
        }
        a.push("null_text", Dtype::F32, self.null_text.clone());
        a
    }

    pub fn from_archive(mut a: TensorArchive) -> Result<Self> {
        if a.meta["kind"] != "denoiser" {
            return Err(Error::Format("archive does not hold a denoiser".into()));
        }
        let config: UnetConfig = serde_json::from_value(a.meta["unet"].clone())?;
        let sched: ScheduleConfig = serde_json::from_value(a.meta["schedule"].clone())?;
        let null_text = a.take("null_text")?;
        let mut weights = Weights::new();
        for (name, _) in parameter_shapes(&config) {
            weights.insert(name.clone(), a.take(&name)?);
        }
        Self::new(config, NoiseSchedule::linear(sched)?, weights, null_text)
    }

    /// Writes `path` (JSON manifest) and the `.bin` next to it.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_archive().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_archive(TensorArchive::load(path)?)
    }
}

fn init_null_text(c: &UnetConfig, seed: u64) -> Matrix {
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x6e75_6c6c);
    let n = Normal::new(0.0, 1.0).expect("unit normal");
    let data = (0..c.text_len * c.text_dim).map(|_| n.sample(&mut rng)).collect();
    Matrix::from_vec(c.text_len, c.text_dim, data).expect("shape")
}
