//! Deterministic DDIM stepping, DDIM inversion and trajectory re-injection.
//!
//! A trajectory for `n` sampling steps holds `n + 1` latents: index 0 is
//! the clean input and index `k` is the latent at timestep `t_k`. Denoising
//! walks `k = n, n−1, …, 1`.

use std::path::Path;

use crate::archive::{Dtype, TensorArchive};
use crate::diffnet::{CaptureHook, Denoiser, NoHook, NoiseSchedule};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// DDIM update at explicit signal rates.
pub fn ddim_step_with(alpha_bar_t: f64, alpha_bar_prev: f64, z: &Matrix, eps: &Matrix) -> Result<Matrix> {
    if !z.same_shape(eps) {
        return Err(Error::shape("noise prediction must match the latent shape"));
    }
    let (sa, sb) = (alpha_bar_t.sqrt(), (1.0 - alpha_bar_t).max(0.0).sqrt());
    let (pa, pb) = (alpha_bar_prev.sqrt(), (1.0 - alpha_bar_prev).max(0.0).sqrt());
    Ok(z.zip_map(eps, |z, e| {
        let x0 = (z - sb * e) / sa;
        pa * x0 + pb * e
    }))
}

/// One deterministic DDIM step from `t` down to `t_prev < t`.
pub fn ddim_step(
    schedule: &NoiseSchedule,
    z: &Matrix,
    t: usize,
    t_prev: usize,
    eps: &Matrix,
) -> Result<Matrix> {
    if t_prev >= t {
        return Err(Error::ScheduleOrder { t, t_prev });
    }
    ddim_step_with(schedule.alpha_bar(t)?, schedule.alpha_bar(t_prev)?, z, eps)
}

/// The DDIM update run backwards, from `t_prev` up to `t > t_prev`.
pub fn inverse_ddim_step(
    schedule: &NoiseSchedule,
    z_prev: &Matrix,
    t_prev: usize,
    t: usize,
    eps: &Matrix,
) -> Result<Matrix> {
    if t_prev >= t {
        return Err(Error::ScheduleOrder { t, t_prev });
    }
    ddim_step_with(schedule.alpha_bar(t_prev)?, schedule.alpha_bar(t)?, z_prev, eps)
}

/// Latents recorded by DDIM inversion.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    timesteps: Vec<usize>,
    latents: Vec<Matrix>,
    text: Matrix,
}

impl Trajectory {
    pub fn new(timesteps: Vec<usize>, latents: Vec<Matrix>, text: Matrix) -> Result<Self> {
        if latents.len() != timesteps.len() + 1 {
            return Err(Error::invalid(format!(
                "{} latents for {} steps",
                latents.len(),
                timesteps.len()
            )));
        }
        if latents.iter().any(|z| !z.same_shape(&latents[0])) {
            return Err(Error::shape("trajectory latents differ in shape"));
        }
        if timesteps.windows(2).any(|w| w[0] >= w[1]) || timesteps.first() == Some(&0) {
            return Err(Error::invalid("trajectory timesteps must increase from ≥ 1"));
        }
        Ok(Self {
            timesteps,
            latents,
            text,
        })
    }

    pub fn steps(&self) -> usize {
        self.timesteps.len()
    }

    /// `t_k`, with `t_0 = 0`.
    pub fn timestep(&self, k: usize) -> usize {
        if k == 0 {
            0
        } else {
            self.timesteps[k - 1]
        }
    }

    pub fn timesteps(&self) -> &[usize] {
        &self.timesteps
    }

    /// The stored latent at `t_k`.
    pub fn latent(&self, k: usize) -> Result<&Matrix> {
        self.latents
            .get(k)
            .ok_or_else(|| Error::Missing(format!("trajectory entry {k} of {}", self.steps())))
    }

    pub fn latents(&self) -> &[Matrix] {
        &self.latents
    }

    /// The most-noised latent `z_T`.
    pub fn noise_latent(&self) -> &Matrix {
        self.latents.last().expect("non-empty")
    }

    pub fn text(&self) -> &Matrix {
        &self.text
    }

    /// Latents are stored in double precision so re-injection stays exact.
    pub fn to_archive(&self) -> TensorArchive {
        let meta = serde_json::json!({"kind": "trajectory", "timesteps": self.timesteps});
        let mut a = TensorArchive::new(meta);
        for (k, z) in self.latents.iter().enumerate() {
            a.push(format!("z{k}"), Dtype::F64, z.clone());
        }
        a.push("text", Dtype::F64, self.text.clone());
        a
    }

    pub fn from_archive(mut a: TensorArchive) -> Result<Self> {
        if a.meta["kind"] != "trajectory" {
            return Err(Error::Format("archive does not hold a trajectory".into()));
        }
        let timesteps: Vec<usize> = serde_json::from_value(a.meta["timesteps"].clone())?;
        let latents = (0..=timesteps.len())
            .map(|k| a.take(&format!("z{k}")))
            .collect::<Result<Vec<_>>>()?;
        let text = a.take("text")?;
        Self::new(timesteps, latents, text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_archive().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_archive(TensorArchive::load(path)?)
    }
}

fn check_finite(z: &Matrix, step: usize, what: &str) -> Result<()> {
    if z.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            step,
            what: what.into(),
        })
    }
}

/// DDIM inversion of `z0` with `steps` sampling steps.
pub fn invert(model: &Denoiser, z0: &Matrix, text: &Matrix, steps: usize) -> Result<Trajectory> {
    if z0.shape() != model.latent_shape() {
        return Err(Error::shape(format!(
            "latent is {:?}, model expects {:?}",
            z0.shape(),
            model.latent_shape()
        )));
    }
    check_finite(z0, 0, "input latent")?;
    let schedule = model.schedule();
    let ts = schedule.ddim_timesteps(steps)?;
    let mut latents = Vec::with_capacity(steps + 1);
    latents.push(z0.clone());
    let mut t_prev = 0;
    for (i, &t) in ts.iter().enumerate() {
        let z = latents.last().expect("non-empty");
        let eps = model.eps(z, t, text, NoHook)?;
        let next = inverse_ddim_step(schedule, z, t_prev, t, &eps)?;
        check_finite(&next, i + 1, "inverted latent")?;
        latents.push(next);
        t_prev = t;
    }
    Trajectory::new(ts, latents, text.clone())
}

/// Plain DDIM sampling from `z_T` over the trajectory's timesteps, with no
/// re-injection. Returns the final latent.
pub fn denoise(model: &Denoiser, traj: &Trajectory, z_t: &Matrix, text: &Matrix) -> Result<Matrix> {
    let mut z = z_t.clone();
    for k in (1..=traj.steps()).rev() {
        let (t, t_prev) = (traj.timestep(k), traj.timestep(k - 1));
        let eps = model.eps(&z, t, text, NoHook)?;
        z = ddim_step(model.schedule(), &z, t, t_prev, &eps)?;
        check_finite(&z, traj.steps() - k + 1, "denoised latent")?;
    }
    Ok(z)
}

/// Result of one reference-branch step.
#[derive(Clone, Debug)]
pub struct ReferenceStep {
    /// The stored latent at `t_{k−1}`.
    pub z_prev: Matrix,
    pub eps: Matrix,
    /// The DDIM step from the stored `z_k`.
    pub stepped: Matrix,
    /// Stored `z_{k−1}` minus `stepped`.
    pub residual: Matrix,
    pub capture: CaptureHook,
}

/// Evaluates the denoiser at the stored latent `z_k` while recording its
/// attention, then re-injects the stored `z_{k−1}`.
pub fn reference_step(model: &Denoiser, traj: &Trajectory, k: usize) -> Result<ReferenceStep> {
    if k == 0 || k > traj.steps() {
        return Err(Error::Missing(format!("trajectory step {k} of {}", traj.steps())));
    }
    let z = traj.latent(k)?;
    let z_prev = traj.latent(k - 1)?.clone();
    let mut capture = CaptureHook::new();
    let eps = model.eps(z, traj.timestep(k), traj.text(), &mut capture)?;
    let stepped = ddim_step(model.schedule(), z, traj.timestep(k), traj.timestep(k - 1), &eps)?;
    let residual = z_prev.zip_map(&stepped, |a, b| a - b);
    Ok(ReferenceStep {
        z_prev,
        eps,
        stepped,
        residual,
        capture,
    })
}

/// Runs [`reference_step`] from `t_n` down to `t_1` and returns the final
/// latent with the per-step captures.
pub fn reference_rollout(model: &Denoiser, traj: &Trajectory) -> Result<(Matrix, Vec<CaptureHook>)> {
    let mut z = traj.noise_latent().clone();
    let mut captures = Vec::with_capacity(traj.steps());
    for k in (1..=traj.steps()).rev() {
        let r = reference_step(model, traj, k)?;
        z = r.z_prev;
        captures.push(r.capture);
    }
    Ok((z, captures))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffnet::{ScheduleConfig, UnetConfig};

    #[test]
    fn ddim_hand_cases() {
        let z = Matrix::scalar(1.0);
        let e = Matrix::scalar(0.5);
        let out = ddim_step_with(0.25, 0.64, &z, &e).unwrap().item();
        let x0 = (1.0 - 0.75f64.sqrt() * 0.5) / 0.5;
        assert!((out - (0.8 * x0 + 0.6 * 0.5)).abs() < 1e-12);
        assert!((out - 1.207).abs() < 1e-3);
        assert_eq!(ddim_step_with(0.3, 0.3, &z, &e).unwrap().item(), 1.0);
        let zero = Matrix::scalar(0.0);
        let r = ddim_step_with(0.25, 0.64, &z, &zero).unwrap().item();
        assert!((r - (0.64f64 / 0.25).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn order_is_checked() {
        let s = NoiseSchedule::linear(ScheduleConfig::default()).unwrap();
        let z = Matrix::scalar(1.0);
        assert!(matches!(
            ddim_step(&s, &z, 20, 40, &z),
            Err(Error::ScheduleOrder { t: 20, t_prev: 40 })
        ));
        assert!(inverse_ddim_step(&s, &z, 40, 40, &z).is_err());
    }

    #[test]
    fn inverse_pair_round_trips() {
        let s = NoiseSchedule::linear(ScheduleConfig::default()).unwrap();
        let z = Matrix::from_rows(&[&[0.3, -1.2], &[2.0, 0.01]]);
        let e = Matrix::from_rows(&[&[0.5, 0.1], &[-0.7, 1.3]]);
        for (tp, t) in [(0, 20), (480, 500), (980, 1000)] {
            let up = inverse_ddim_step(&s, &z, tp, t, &e).unwrap();
            let back = ddim_step(&s, &up, t, tp, &e).unwrap();
            assert!(back.max_abs_diff(&z) < 1e-9);
        }
    }

    fn small_model() -> Denoiser {
        Denoiser::random(UnetConfig::default(), 5)
    }

    #[test]
    fn zero_step_inversion_is_the_input() {
        let m = small_model();
        let z = Matrix::filled(256, 4, 0.2);
        let tr = invert(&m, &z, m.null_text(), 0).unwrap();
        assert_eq!(tr.steps(), 0);
        assert_eq!(tr.latents(), &[z]);
    }

    #[test]
    fn reinjection_reconstructs_exactly_and_captures_everything() {
        let m = small_model();
        let z = Matrix::from_vec(256, 4, (0..1024).map(|i| ((i * 37 % 101) as f64 / 50.0) - 1.0).collect()).unwrap();
        let tr = invert(&m, &z, m.null_text(), 4).unwrap();
        assert_eq!(tr.latents().len(), 5);
        let (out, caps) = reference_rollout(&m, &tr).unwrap();
        assert_eq!(out, z);
        assert_eq!(caps.len(), 4);
        assert!(caps.iter().all(|c| c.records.len() == 8));
        // Captured attention equals a plain evaluation at the same state.
        let mut plain = CaptureHook::new();
        m.eps(tr.latent(4).unwrap(), tr.timestep(4), tr.text(), &mut plain).unwrap();
        assert_eq!(plain.records, caps[0].records);
        let e = m.eps(tr.latent(4).unwrap(), tr.timestep(4), tr.text(), NoHook).unwrap();
        assert_eq!(reference_step(&m, &tr, 4).unwrap().eps, e);
        assert!(reference_step(&m, &tr, 5).is_err());
    }

    #[test]
    fn trajectory_round_trips_through_archive() {
        let dir = tempfile::tempdir().unwrap();
        let m = small_model();
        let z = Matrix::filled(256, 4, -0.4);
        let tr = invert(&m, &z, m.null_text(), 2).unwrap();
        let p = dir.path().join("traj.json");
        tr.save(&p).unwrap();
        assert_eq!(Trajectory::load(&p).unwrap(), tr);
    }
}
