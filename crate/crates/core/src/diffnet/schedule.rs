use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Parameters of a linear-β DDPM schedule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub train_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            train_steps: 1000,
            beta_start: 0.00085,
            beta_end: 0.012,
        }
    }
}

/// Cumulative signal rates `ᾱ_t` for `t = 0..=T`, with `ᾱ_0 = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    config: ScheduleConfig,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(config: ScheduleConfig) -> Result<Self> {
        let ScheduleConfig {
            train_steps,
            beta_start,
            beta_end,
        } = config;
        if train_steps == 0 || !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::invalid(format!("bad noise schedule {config:?}")));
        }
        let mut alpha_bar = Vec::with_capacity(train_steps + 1);
        alpha_bar.push(1.0);
        let mut acc = 1.0;
        for i in 0..train_steps {
            let frac = if train_steps == 1 {
                0.0
            } else {
                i as f64 / (train_steps - 1) as f64
            };
            let beta = beta_start + frac * (beta_end - beta_start);
            acc *= 1.0 - beta;
            alpha_bar.push(acc);
        }
        Ok(Self { config, alpha_bar })
    }

    pub fn config(&self) -> ScheduleConfig {
        self.config
    }

    pub fn train_steps(&self) -> usize {
        self.config.train_steps
    }

    /// `ᾱ_t`; `t = 0` is the clean signal.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bar
            .get(t)
            .copied()
            .ok_or_else(|| Error::invalid(format!("timestep {t} outside 0..={}", self.train_steps())))
    }

    /// Per-step `α_t = ᾱ_t / ᾱ_{t−1}` for `t ≥ 1`.
    pub fn alpha(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Err(Error::invalid("α_t is defined for t ≥ 1"));
        }
        Ok(self.alpha_bar(t)? / self.alpha_bar(t - 1)?)
    }

    /// Evenly spaced sampling timesteps `t_1 < … < t_n`, ending at `T`.
    pub fn ddim_timesteps(&self, steps: usize) -> Result<Vec<usize>> {
        let t = self.train_steps();
        if steps > t {
            return Err(Error::invalid(format!("{steps} sampling steps exceed {t} training steps")));
        }
        Ok((1..=steps)
            .map(|k| ((k * t) as f64 / steps as f64).round() as usize)
            .collect())
    }

    /// `x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·ε`
    pub fn forward_noise(&self, x0: &Matrix, t: usize, eps: &Matrix) -> Result<Matrix> {
        forward_noise_with(self.alpha_bar(t)?, x0, eps)
    }
}

/// Closed-form noising at an explicit `ᾱ`.
pub fn forward_noise_with(alpha_bar: f64, x0: &Matrix, eps: &Matrix) -> Result<Matrix> {
    if !x0.same_shape(eps) {
        return Err(Error::shape("noise must match the signal shape"));
    }
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).max(0.0).sqrt());
    Ok(x0.zip_map(eps, |x, e| a * x + b * e))
}
