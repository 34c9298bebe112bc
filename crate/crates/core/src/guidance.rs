//! Geometry-aware shared attention.
//!
//! The edit branch's attention layers are evaluated from reference-branch
//! operands: reference queries warped by the edit field give the object's
//! appearance at its new place, and reference keys and values anchor the
//! background. The two are blended by the transformed object mask.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::diffnet::{attention, attention_var, AttentionHook, AttentionKind, BlockInfo, CaptureHook};
use crate::error::{Error, Result};
use crate::geometry::{resample_field, resample_mask, resample_mask_soft, splat_with, EditField, MaskSet, SplatMode};
use crate::raster::Raster;
use crate::tensor::Matrix;

/// Forward-splats the rows of `q` (tokens of the field's grid, row-major)
/// through `field`. Tokens nothing lands on keep their own row.
pub fn warp_queries(q: &Matrix, field: &EditField) -> Result<Matrix> {
    let (h, w) = field.dims();
    if q.rows() != h * w {
        return Err(Error::shape(format!(
            "{} query rows for a {h}x{w} field",
            q.rows()
        )));
    }
    let signal = Raster::from_matrix(h, w, q)?;
    let s = splat_with(&signal, field, SplatMode::Nearest)?;
    let mut out = q.clone();
    for (i, covered) in s.covered.iter().enumerate() {
        if *covered {
            out.row_mut(i).copy_from_slice(s.signal.pixel(i));
        }
    }
    Ok(out)
}

/// `Attention(F(Q_r), K_r, V_r)`
pub fn ref_guidance(q_r: &Matrix, k_r: &Matrix, v_r: &Matrix, field: &EditField) -> Result<Matrix> {
    attention(&warp_queries(q_r, field)?, k_r, v_r)
}

/// Self layers attend to the reference keys and values; cross layers keep
/// their own keys and take the reference values.
pub fn edit_guidance(
    q_e: &Matrix,
    k_e: &Matrix,
    v_e: &Matrix,
    k_r: &Matrix,
    v_r: &Matrix,
    kind: AttentionKind,
) -> Result<Matrix> {
    if !k_e.same_shape(k_r) || !v_e.same_shape(v_r) {
        return Err(Error::shape("edit and reference operands differ in shape"));
    }
    match kind {
        AttentionKind::SelfAttention => attention(q_e, k_r, v_r),
        AttentionKind::Cross => attention(q_e, k_e, v_r),
    }
}

/// `m·Y_ref_G + (1 − m)·Y_edit_G`, one mask value per token row. Evaluated
/// as `Y_edit_G + m·(Y_ref_G − Y_edit_G)` so equal inputs pass through exactly.
pub fn blend(y_ref_g: &Matrix, y_edit_g: &Matrix, mask: &[f64]) -> Result<Matrix> {
    if !y_ref_g.same_shape(y_edit_g) {
        return Err(Error::shape("guidance outputs differ in shape"));
    }
    if mask.len() != y_ref_g.rows() {
        return Err(Error::shape(format!(
            "{} mask values for {} tokens",
            mask.len(),
            y_ref_g.rows()
        )));
    }
    let mut out = y_edit_g.clone();
    for (r, &m) in mask.iter().enumerate() {
        let a = y_ref_g.row(r);
        for (o, &x) in out.row_mut(r).iter_mut().zip(a) {
            *o += m * (x - *o);
        }
    }
    Ok(out)
}

/// Differentiable [`blend`].
pub fn blend_var(g: &mut Graph, y_ref_g: Var, y_edit_g: Var, mask: &[f64]) -> Result<Var> {
    let n = g.shape(y_edit_g).0;
    if mask.len() != n {
        return Err(Error::shape(format!("{} mask values for {n} tokens", mask.len())));
    }
    let m = g.constant(Matrix::from_vec(n, 1, mask.to_vec())?);
    let d = g.sub(y_ref_g, y_edit_g)?;
    let d = g.mul_col(d, m)?;
    g.add(y_edit_g, d)
}

/// Masks and field at one attention resolution. Masks are per token.
#[derive(Clone, Debug)]
pub struct PyramidLevel {
    pub grid: (usize, usize),
    pub field: EditField,
    pub m_obj_t: Vec<f64>,
    pub m_obj_t_soft: Vec<f64>,
    pub m_disocc: Vec<f64>,
    pub m_ne: Vec<f64>,
    pub m_bg: Vec<f64>,
    pub m_obj: Vec<f64>,
}

/// The edit field and mask set resampled to every attention resolution.
#[derive(Clone, Debug, Default)]
pub struct GuidancePyramid {
    levels: BTreeMap<(usize, usize), PyramidLevel>,
}

impl GuidancePyramid {
    /// `field` and `masks` are at image resolution.
    pub fn build(field: &EditField, masks: &MaskSet, grids: &[(usize, usize)]) -> Result<Self> {
        let mut levels = BTreeMap::new();
        for &(h, w) in grids {
            if levels.contains_key(&(h, w)) {
                continue;
            }
            let hard = |m: &Raster| -> Result<Vec<f64>> { Ok(resample_mask(m, h, w)?.data().to_vec()) };
            let level = PyramidLevel {
                grid: (h, w),
                field: resample_field(field, h, w)?,
                m_obj_t: hard(&masks.m_obj_t)?,
                m_obj_t_soft: resample_mask_soft(&masks.m_obj_t_soft, h, w)?.data().to_vec(),
                m_disocc: hard(&masks.m_disocc)?,
                m_ne: hard(&masks.m_ne)?,
                m_bg: hard(&masks.m_bg)?,
                m_obj: hard(&masks.m_obj)?,
            };
            levels.insert((h, w), level);
        }
        Ok(Self { levels })
    }

    pub fn level(&self, grid: (usize, usize)) -> Result<&PyramidLevel> {
        self.levels
            .get(&grid)
            .ok_or_else(|| Error::Missing(format!("pyramid level {}x{}", grid.0, grid.1)))
    }

    pub fn levels(&self) -> impl Iterator<Item = &PyramidLevel> {
        self.levels.values()
    }
}

/// Which attention layers share reference operands.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockSelection {
    #[default]
    All,
    Subset(Vec<usize>),
}

impl BlockSelection {
    pub fn contains(&self, id: usize) -> bool {
        match self {
            BlockSelection::All => true,
            BlockSelection::Subset(ids) => ids.contains(&id),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SharedAttentionConfig {
    /// Last denoising step (1-based) that shares attention.
    pub share_until_step: usize,
    pub blocks: BlockSelection,
}

impl Default for SharedAttentionConfig {
    fn default() -> Self {
        Self {
            share_until_step: 45,
            blocks: BlockSelection::All,
        }
    }
}

/// Everything the losses need from one edit-branch attention layer.
#[derive(Clone, Debug)]
pub struct GuidanceRecord {
    pub block: BlockInfo,
    /// Whether the layer's output came from the blend.
    pub shared: bool,
    pub q_e: Var,
    pub k_e: Var,
    /// The attention map behind `y_edit_g`: `AM(Q_e, K_r)` for self layers,
    /// `AM(Q_e, K_e)` for cross layers.
    pub a_edit: Var,
    pub y_edit_g: Var,
    pub y_ref_g: Matrix,
    pub y_ref: Matrix,
    pub output: Var,
}

/// Attention hook for the edit branch at one denoising step.
pub struct SharedAttentionHook<'a> {
    step: usize,
    reference: &'a CaptureHook,
    pyramid: &'a GuidancePyramid,
    config: &'a SharedAttentionConfig,
    pub records: Vec<GuidanceRecord>,
}

impl<'a> SharedAttentionHook<'a> {
    pub fn new(
        step: usize,
        reference: &'a CaptureHook,
        pyramid: &'a GuidancePyramid,
        config: &'a SharedAttentionConfig,
    ) -> Self {
        Self {
            step,
            reference,
            pyramid,
            config,
            records: Vec::new(),
        }
    }
}

impl AttentionHook for SharedAttentionHook<'_> {
    fn attend(&mut self, g: &mut Graph, block: &BlockInfo, q: Var, k: Var, v: Var) -> Result<Option<Var>> {
        let r = self
            .reference
            .get(block.id)
            .ok_or_else(|| Error::Missing(format!("reference capture for step {} block {}", self.step, block.id)))?;
        if g.shape(k) != r.k.shape() || g.shape(v) != r.v.shape() {
            return Err(Error::shape(format!("edit operands of block {} differ from the reference", block.id)));
        }
        let level = self.pyramid.level(block.grid)?;
        let y_ref_g = ref_guidance(&r.q, &r.k, &r.v, &level.field)?;
        let v_r = g.constant(r.v.clone());
        let (y_edit_g, a_edit) = match block.kind {
            AttentionKind::SelfAttention => {
                let k_r = g.constant(r.k.clone());
                attention_var(g, q, k_r, v_r)?
            }
            AttentionKind::Cross => attention_var(g, q, k, v_r)?,
        };
        let shared = self.step <= self.config.share_until_step && self.config.blocks.contains(block.id);
        let output = if shared {
            let yrg = g.constant(y_ref_g.clone());
            blend_var(g, yrg, y_edit_g, &level.m_obj_t_soft)?
        } else {
            attention_var(g, q, k, v)?.0
        };
        self.records.push(GuidanceRecord {
            block: *block,
            shared,
            q_e: q,
            k_e: k,
            a_edit,
            y_edit_g,
            y_ref_g,
            y_ref: r.y.clone(),
            output,
        });
        Ok(Some(output))
    }
}

/// Compact per-layer summary for inspection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockDiagnostics {
    pub step: usize,
    pub block: usize,
    pub kind: AttentionKind,
    pub grid: (usize, usize),
    pub shared: bool,
    /// One value per token: mean attention received for self layers, the
    /// strongest text-token weight for cross layers.
    pub heatmap: Vec<f64>,
    pub y_ref_g_norm: f64,
    pub y_edit_g_norm: f64,
    pub output_norm: f64,
}

impl BlockDiagnostics {
    /// The heatmap on the block's token grid, rescaled to `[0, 1]`.
    pub fn heatmap_raster(&self) -> Result<Raster> {
        let (lo, hi) = self
            .heatmap
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let span = if hi > lo { hi - lo } else { 1.0 };
        let data = self.heatmap.iter().map(|v| (v - lo) / span).collect();
        Raster::new(self.grid.0, self.grid.1, 1, data)
    }
}

fn frobenius(m: &Matrix) -> f64 {
    m.data().iter().map(|v| v * v).sum::<f64>().sqrt()
}

impl GuidanceRecord {
    pub fn diagnostics(&self, g: &Graph, step: usize) -> BlockDiagnostics {
        let map = g.value(self.a_edit);
        let heatmap = match self.block.kind {
            AttentionKind::SelfAttention => {
                let mut col = vec![0.0; map.cols()];
                for r in 0..map.rows() {
                    for (c, v) in map.row(r).iter().enumerate() {
                        col[c] += v;
                    }
                }
                col.iter().map(|v| v / map.rows() as f64).collect()
            }
            AttentionKind::Cross => (0..map.rows())
                .map(|r| map.row(r).iter().copied().fold(f64::MIN, f64::max))
                .collect(),
        };
        BlockDiagnostics {
            step,
            block: self.block.id,
            kind: self.block.kind,
            grid: self.block.grid,
            shared: self.shared,
            heatmap,
            y_ref_g_norm: frobenius(&self.y_ref_g),
            y_edit_g_norm: frobenius(g.value(self.y_edit_g)),
            output_norm: frobenius(g.value(self.output)),
        }
    }
}
