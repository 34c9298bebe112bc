use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::diffnet::{Denoiser, NoHook};
use crate::error::{Error, Result};
use crate::geometry::{build_field, mask_algebra, EditField, EditKind, MaskSet};
use crate::guidance::{BlockDiagnostics, GuidancePyramid, SharedAttentionHook};
use crate::losses::{adapt_remove_weight, block_inputs, total_loss, LossTerms};
use crate::optim::{gradient_descent, learning_rate, LossRecord};
use crate::raster::Raster;
use crate::sampler::{ddim_step, invert, reference_step, Trajectory};
use crate::tensor::Matrix;

use super::codec::LatentCodec;
use super::config::EditConfig;
use super::metric::{naive_warp_baseline, warp_error};

/// Edit field and masks at image resolution, plus their attention pyramid.
#[derive(Clone, Debug)]
pub struct EditGeometry {
    /// Restricted to object sources.
    pub field: EditField,
    pub masks: MaskSet,
    pub pyramid: GuidancePyramid,
}

/// Builds the field, mask set and pyramid for an edit of `m_obj`.
pub fn prepare_geometry(
    model: &Denoiser,
    m_obj: &Raster,
    depth: Option<&Raster>,
    config: &EditConfig,
) -> Result<EditGeometry> {
    let (h, w) = m_obj.dims();
    if config.transform.kind != EditKind::Identity && m_obj.is_empty_mask() {
        return Err(Error::EmptyMask("object mask"));
    }
    if let Some(d) = depth {
        d.ensure_positive("depth")?;
    }
    let field = build_field(&config.transform, h, w, depth, config.intrinsics.as_ref(), Some(m_obj))?;
    let masks = mask_algebra(m_obj, &field)?;
    let grids: Vec<_> = model.blocks().iter().map(|b| b.grid).collect();
    let pyramid = GuidancePyramid::build(&field, &masks, &grids)?;
    Ok(EditGeometry { field, masks, pyramid })
}

/// What happened at one denoising step of the edit branch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// 1-based denoising step.
    pub step: usize,
    pub t: usize,
    pub shared: bool,
    pub optimized: bool,
    pub lr: f64,
    pub w_remove: f64,
}

#[derive(Clone, Debug)]
pub struct RolloutOutput {
    pub latent: Matrix,
    pub loss_curves: Vec<LossRecord>,
    pub steps: Vec<StepRecord>,
    pub diagnostics: Vec<BlockDiagnostics>,
    /// The optimized edit-branch null embedding.
    pub text: Matrix,
}

fn push_terms(out: &mut Vec<LossRecord>, step: usize, terms: &LossTerms, w_remove: f64, lr: f64, optimized: bool, iteration: usize) {
    let mut push = |term: &str, value: f64| {
        out.push(LossRecord {
            step,
            term: term.into(),
            value,
            w_remove,
            lr,
            optimized,
            iteration,
        })
    };
    push("bg", terms.bg);
    if let Some(v) = terms.obj {
        push("obj", v);
    }
    push("smooth", terms.smooth);
    if let Some(v) = terms.remove {
        push("remove", v);
    }
    push("total", terms.total);
}

fn non_finite(step: usize, what: &str) -> Error {
    Error::NonFinite {
        step,
        what: what.into(),
    }
}

/// Reported after every denoising step of the edit branch.
#[derive(Clone, Copy, Debug)]
pub struct Progress<'a> {
    pub step: usize,
    pub steps: usize,
    /// Every loss record emitted so far.
    pub loss_curves: &'a [LossRecord],
}

/// Runs the edit branch in lock-step with the re-injected reference branch.
pub fn edit_rollout(
    model: &Denoiser,
    traj: &Trajectory,
    geometry: &EditGeometry,
    config: &EditConfig,
    progress: &mut dyn FnMut(Progress<'_>),
) -> Result<RolloutOutput> {
    config.validate()?;
    if traj.steps() != config.steps {
        return Err(Error::invalid(format!(
            "trajectory has {} steps, config asks for {}",
            traj.steps(),
            config.steps
        )));
    }
    let n = traj.steps();
    let shared_cfg = config.shared_attention();
    let opt_steps = config.optimized_steps();
    let removal = config.transform.kind == EditKind::Remove;
    let rule = config.weights.adaptive;
    let mut w_remove = config.weights.w_remove;
    let mut z = traj.noise_latent().clone();
    let mut text = traj.text().clone();
    let mut out = RolloutOutput {
        latent: Matrix::zeros(0, 0),
        loss_curves: Vec::new(),
        steps: Vec::with_capacity(n),
        diagnostics: Vec::new(),
        text: Matrix::zeros(0, 0),
    };
    for s in 1..=n {
        let k = n - s + 1;
        let (t, t_prev) = (traj.timestep(k), traj.timestep(k - 1));
        let reference = reference_step(model, traj, k)?;
        let shared = config.sharing && s <= shared_cfg.share_until_step;
        let opt_index = opt_steps.iter().position(|&o| o == s);
        let lr = opt_index.map_or(0.0, |i| learning_rate(config.lr, i, opt_steps.len()));

        if opt_index.is_some() && shared {
            for it in 0..config.iterations_per_step {
                let mut g = Graph::new();
                let zv = g.param(z.clone());
                let tv = g.param(text.clone());
                let mut hook = SharedAttentionHook::new(s, &reference.capture, &geometry.pyramid, &shared_cfg);
                model.eps_graph(&mut g, zv, t, tv, &mut hook)?;
                let records = hook.records;
                let inputs = block_inputs(&records, &reference.capture, &geometry.pyramid)?;
                if inputs.is_empty() {
                    break;
                }
                let loss = total_loss(&mut g, &inputs, &config.weights, w_remove, removal, config.remove_loss)?;
                if !loss.terms.total.is_finite() {
                    return Err(non_finite(s, "edit loss"));
                }
                push_terms(&mut out.loss_curves, s, &loss.terms, w_remove, lr, true, it);
                let grads = g.backward(loss.total)?;
                let (gz, _) = grads.get_or_zeros(zv, z.shape());
                let (gt, _) = grads.get_or_zeros(tv, text.shape());
                if !gz.is_finite() || !gt.is_finite() {
                    return Err(non_finite(s, "edit gradient"));
                }
                gradient_descent(&mut z, &gz, lr)?;
                gradient_descent(&mut text, &gt, lr * config.text_lr_scale)?;
                if let Some(r) = loss.terms.remove {
                    w_remove = adapt_remove_weight(r, w_remove, &rule);
                }
            }
        }

        let mut g = Graph::new();
        let zv = g.constant(z.clone());
        let tv = g.constant(text.clone());
        let eps = if config.sharing {
            let mut hook = SharedAttentionHook::new(s, &reference.capture, &geometry.pyramid, &shared_cfg);
            let e = model.eps_graph(&mut g, zv, t, tv, &mut hook)?;
            let records = hook.records;
            let inputs = block_inputs(&records, &reference.capture, &geometry.pyramid)?;
            if shared && opt_index.is_none() && !inputs.is_empty() {
                let loss = total_loss(&mut g, &inputs, &config.weights, w_remove, removal, config.remove_loss)?;
                push_terms(&mut out.loss_curves, s, &loss.terms, w_remove, lr, false, 0);
            }
            if config.diagnostics {
                out.diagnostics.extend(records.iter().map(|r| r.diagnostics(&g, s)));
            }
            e
        } else {
            model.eps_graph(&mut g, zv, t, tv, NoHook)?
        };
        let eps = g.value(eps).clone();
        let stepped = ddim_step(model.schedule(), &z, t, t_prev, &eps)?;
        z = if config.edit_residual_correction {
            // Same as adding the residual, but exact while the branches agree.
            let delta = stepped.zip_map(&reference.stepped, |a, b| a - b);
            reference.z_prev.zip_map(&delta, |p, d| p + d)
        } else {
            stepped
        };
        if !z.is_finite() {
            return Err(non_finite(s, "edit latent"));
        }
        out.steps.push(StepRecord {
            step: s,
            t,
            shared,
            optimized: opt_index.is_some() && shared,
            lr,
            w_remove,
        });
        progress(Progress {
            step: s,
            steps: n,
            loss_curves: &out.loss_curves,
        });
    }
    out.latent = z;
    out.text = text;
    Ok(out)
}

/// Everything an edit produces.
#[derive(Clone, Debug)]
pub struct EditOutputs {
    pub edited: Raster,
    pub latent: Matrix,
    pub baseline: Raster,
    pub warp_error: Option<f64>,
    pub loss_curves: Vec<LossRecord>,
    pub steps: Vec<StepRecord>,
    pub diagnostics: Vec<BlockDiagnostics>,
    pub geometry: EditGeometry,
}

/// Inverts `image` with the model's null embedding.
pub fn invert_image(model: &Denoiser, image: &Raster, steps: usize) -> Result<Trajectory> {
    let codec = check_image_dims(model, image)?;
    let z0 = codec.encode(image)?;
    invert(model, &z0, model.null_text(), steps)
}

/// The codec mapping `image` onto the model's latent grid, or a shape error
/// when the image is not an integer multiple of it.
pub fn check_image_dims(model: &Denoiser, image: &Raster) -> Result<LatentCodec> {
    let c = model.config();
    let (h, w) = image.dims();
    let f = h / c.latent_height;
    if f == 0 || h != f * c.latent_height || w != f * c.latent_width {
        return Err(Error::shape(format!(
            "image {h}x{w} is not a multiple of the {}x{} latent grid",
            c.latent_height, c.latent_width
        )));
    }
    Ok(LatentCodec { factor: f })
}

/// Full edit: inversion (unless `trajectory` is given), dual rollout,
/// decoding, the naive-warp baseline and the warp error.
pub fn run_edit(
    model: &Denoiser,
    image: &Raster,
    m_obj: &Raster,
    depth: Option<&Raster>,
    config: &EditConfig,
    trajectory: Option<&Trajectory>,
    progress: &mut dyn FnMut(Progress<'_>),
) -> Result<EditOutputs> {
    config.validate()?;
    image.ensure_unit_range("image")?;
    m_obj.ensure_dims(image.height(), image.width(), "object mask")?;
    let codec = check_image_dims(model, image)?;
    let geometry = prepare_geometry(model, m_obj, depth, config)?;
    let owned;
    let traj = match trajectory {
        Some(t) => t,
        None => {
            owned = invert_image(model, image, config.steps)?;
            &owned
        }
    };
    let roll = edit_rollout(model, traj, &geometry, config, progress)?;
    let edited = codec.decode_with_detail(&roll.latent, image, &geometry.field, &geometry.masks)?;
    let baseline = naive_warp_baseline(image, m_obj, &geometry.field)?;
    let we = if config.transform.kind == EditKind::Remove {
        None
    } else {
        warp_error(image, &edited, m_obj, &geometry.field)?
    };
    Ok(EditOutputs {
        edited,
        latent: roll.latent,
        baseline,
        warp_error: we,
        loss_curves: roll.loss_curves,
        steps: roll.steps,
        diagnostics: roll.diagnostics,
        geometry,
    })
}
