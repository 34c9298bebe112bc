//! Edit losses over shared-attention outputs, and the adaptive weighting of
//! the removal term.
//!
//! Every loss is built on a [`Graph`] so it can be differentiated with
//! respect to whatever produced its inputs.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Axis, Graph, Var};
use crate::diffnet::{AttentionKind, CaptureHook};
use crate::error::{Error, Result};
use crate::guidance::{GuidancePyramid, GuidanceRecord};
use crate::tensor::Matrix;

/// Floor applied to correlations before taking logarithms.
pub const RHO_FLOOR: f64 = 1e-12;

fn mask_col(g: &mut Graph, mask: &[f64], rows: usize) -> Result<Var> {
    if mask.len() != rows {
        return Err(Error::shape(format!("{} mask values for {rows} tokens", mask.len())));
    }
    Ok(g.constant(Matrix::from_vec(rows, 1, mask.to_vec())?))
}

/// `mean(m · |a − b|)` over every token and channel.
fn masked_l1(g: &mut Graph, a: Var, b: &Matrix, mask: &[f64]) -> Result<Var> {
    if g.shape(a) != b.shape() {
        return Err(Error::shape(format!("{:?} vs {:?}", g.shape(a), b.shape())));
    }
    let m = mask_col(g, mask, b.rows())?;
    let bv = g.constant(b.clone());
    let d = g.sub(a, bv)?;
    let d = g.abs(d);
    let d = g.mul_col(d, m)?;
    Ok(g.mean(d))
}

/// Background preservation: `mean(m_ne · |Y_edit_G − Y_ref|)`.
pub fn loss_bg(g: &mut Graph, y_edit_g: Var, y_ref: &Matrix, m_ne: &[f64]) -> Result<Var> {
    masked_l1(g, y_edit_g, y_ref, m_ne)
}

/// Object preservation: `mean(m_obj_t · |Y_edit_G − Y_ref_G|)`.
pub fn loss_obj(g: &mut Graph, y_edit_g: Var, y_ref_g: &Matrix, m_obj_t: &[f64]) -> Result<Var> {
    masked_l1(g, y_edit_g, y_ref_g, m_obj_t)
}

/// Mean absolute forward difference of `y` over an `h × w` token grid,
/// counting both axes together. A single token gives 0.
pub fn loss_smooth(g: &mut Graph, y: Var, grid: (usize, usize)) -> Result<Var> {
    loss_smooth_weighted(g, y, grid, None)
}

/// [`loss_smooth`] where each difference is scaled by a pair weight: the
/// larger of the two endpoint values of `weights`. The mean still runs over
/// all pairs.
pub fn loss_smooth_weighted(g: &mut Graph, y: Var, grid: (usize, usize), weights: Option<&[f64]>) -> Result<Var> {
    let (h, w) = grid;
    let (n, d) = g.shape(y);
    if n != h * w {
        return Err(Error::shape(format!("{n} tokens for a {h}x{w} grid")));
    }
    if let Some(wt) = weights {
        if wt.len() != n {
            return Err(Error::shape("smoothness weights must have one value per token"));
        }
    }
    let mut total = None;
    let mut count = 0;
    for axis in [Axis::X, Axis::Y] {
        let pairs = crate::autodiff::diff_pairs(h, w, axis);
        if pairs.is_empty() {
            continue;
        }
        count += pairs.len() * d;
        let diff = g.grid_diff(y, h, w, axis)?;
        let mut a = g.abs(diff);
        if let Some(wt) = weights {
            let col: Vec<f64> = pairs.iter().map(|&(i, j)| wt[i].max(wt[j])).collect();
            let c = mask_col(g, &col, pairs.len())?;
            a = g.mul_col(a, c)?;
        }
        let s = g.sum(a);
        total = Some(match total {
            None => s,
            Some(t) => g.add(t, s)?,
        });
    }
    Ok(match total {
        None => g.constant(Matrix::scalar(0.0)),
        Some(t) => g.scale(t, 1.0 / count as f64),
    })
}

/// Options of the removal loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RemoveLossOptions {
    /// Use `A_edit · A_ref` instead of `A_edit · A_refᵀ`. Only defined when
    /// `A_edit` is square, so cross layers are skipped in this mode.
    #[serde(default)]
    pub literal_product: bool,
    /// L2-normalize attention rows before correlating them.
    #[serde(default)]
    pub cosine: bool,
}

/// Token-grid distance divided by the grid diagonal.
pub fn normalized_token_distance(a: usize, b: usize, grid: (usize, usize)) -> f64 {
    let (h, w) = grid;
    let diag = (((h - 1) * (h - 1) + (w - 1) * (w - 1)) as f64).sqrt();
    let (ax, ay) = ((a % w) as f64, (a / w) as f64);
    let (bx, by) = ((b % w) as f64, (b / w) as f64);
    let d = ((ax - bx).powi(2) + (ay - by).powi(2)).sqrt();
    if diag > 0.0 {
        d / diag
    } else {
        0.0
    }
}

/// Foreground-to-background correlation loss.
///
/// `C` correlates each edit attention row with each reference attention
/// row. For every foreground row, `ρ_ob` is its strongest correlation with a
/// background token `u_bg` and `ρ_oo` its strongest with an object token;
/// the loss is the mean of `exp(−d(u, u_bg))·(ln ρ_oo − ln ρ_ob)`.
#[allow(clippy::too_many_arguments)]
pub fn loss_remove(
    g: &mut Graph,
    a_edit: Var,
    a_ref: &Matrix,
    rows: &[f64],
    m_obj: &[f64],
    m_bg: &[f64],
    grid: (usize, usize),
    opts: RemoveLossOptions,
) -> Result<Var> {
    let n = grid.0 * grid.1;
    let (er, ec) = g.shape(a_edit);
    if er != n || a_ref.rows() != n || rows.len() != n || m_obj.len() != n || m_bg.len() != n {
        return Err(Error::shape(format!("removal loss operands do not match {n} tokens")));
    }
    let fg: Vec<usize> = (0..n).filter(|&i| rows[i] > 0.5).collect();
    if fg.is_empty() {
        return Err(Error::EmptyMask("foreground rows"));
    }
    let bg_cols: Vec<bool> = m_bg.iter().map(|&v| v > 0.5).collect();
    let obj_cols: Vec<bool> = m_obj.iter().map(|&v| v > 0.5).collect();
    if !bg_cols.iter().any(|&b| b) {
        return Err(Error::EmptyMask("background columns"));
    }
    if !obj_cols.iter().any(|&b| b) {
        return Err(Error::EmptyMask("object columns"));
    }
    let mut ae = g.gather_rows(a_edit, &fg)?;
    let mut ar = g.constant(a_ref.clone());
    if opts.cosine {
        ae = g.normalize_rows(ae);
        ar = g.normalize_rows(ar);
    }
    let c = if opts.literal_product {
        if ec != a_ref.rows() {
            return Err(Error::shape(format!(
                "A_edit·A_ref needs square maps, got {er}x{ec} and {:?}",
                a_ref.shape()
            )));
        }
        g.matmul(ae, ar)?
    } else {
        if ec != a_ref.cols() {
            return Err(Error::shape("edit and reference maps have different key counts"));
        }
        g.matmul_t(ae, ar)?
    };
    let (rho_ob, u_bg) = g.masked_row_max(c, &bg_cols)?;
    let (rho_oo, _) = g.masked_row_max(c, &obj_cols)?;
    let l_oo = g.ln_floor(rho_oo, RHO_FLOOR);
    let l_ob = g.ln_floor(rho_ob, RHO_FLOOR);
    let diff = g.sub(l_oo, l_ob)?;
    let wts: Vec<f64> = fg
        .iter()
        .zip(&u_bg)
        .map(|(&i, &u)| (-normalized_token_distance(i, u, grid)).exp())
        .collect();
    let wv = g.constant(Matrix::from_vec(fg.len(), 1, wts)?);
    let weighted = g.mul(diff, wv)?;
    Ok(g.mean(weighted))
}

/// Thresholds and step sizes of the removal-weight rule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveRule {
    pub upper_thresh: f64,
    pub lower_thresh: f64,
    pub factor: f64,
    pub w_min: f64,
    pub w_max: f64,
}

impl Default for AdaptiveRule {
    fn default() -> Self {
        Self {
            upper_thresh: -1.8,
            lower_thresh: -6.0,
            factor: 2.0,
            w_min: 0.1,
            w_max: 20.0,
        }
    }
}

/// Doubles the removal weight while the removal loss is above the upper
/// threshold and halves it below the lower one.
pub fn adapt_remove_weight(current_loss: f64, w: f64, rule: &AdaptiveRule) -> f64 {
    if current_loss > rule.upper_thresh {
        (w * rule.factor).min(rule.w_max)
    } else if current_loss < rule.lower_thresh {
        (w / rule.factor).max(rule.w_min)
    } else {
        w
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w_bg: f64,
    pub w_obj: f64,
    pub w_smooth: f64,
    /// Initial removal weight; adapted during the edit.
    pub w_remove: f64,
    #[serde(default)]
    pub adaptive: AdaptiveRule,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_bg: 1.0,
            w_obj: 1.0,
            w_smooth: 0.1,
            w_remove: 1.0,
            adaptive: AdaptiveRule::default(),
        }
    }
}

/// Loss inputs of one attention layer.
#[derive(Clone, Debug)]
pub struct BlockLossInputs<'a> {
    pub grid: (usize, usize),
    pub kind: AttentionKind,
    pub y_edit_g: Var,
    pub y_ref: &'a Matrix,
    pub y_ref_g: &'a Matrix,
    pub a_edit: Var,
    pub a_ref: &'a Matrix,
    pub m_obj_t: &'a [f64],
    pub m_disocc: &'a [f64],
    pub m_ne: &'a [f64],
    pub m_bg: &'a [f64],
    pub m_obj: &'a [f64],
}

/// Values of the terms entering [`total_loss`]. Per-layer terms are
/// averaged over layers; `remove` is `None` when the term is absent.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub bg: f64,
    pub obj: Option<f64>,
    pub smooth: f64,
    pub remove: Option<f64>,
    pub total: f64,
}

pub struct TotalLoss {
    pub total: Var,
    pub terms: LossTerms,
}

/// `mean_b(w_bg·L_bg + w_obj·L_obj + w_s·L_s) + w_remove·mean_b(L_remove)`.
///
/// The smoothness term is weighted towards the disoccluded tokens. The
/// object term is dropped for removals; the removal term only counts layers
/// whose grid has disoccluded tokens.
pub fn total_loss(
    g: &mut Graph,
    blocks: &[BlockLossInputs],
    weights: &LossWeights,
    w_remove: f64,
    removal: bool,
    opts: RemoveLossOptions,
) -> Result<TotalLoss> {
    if blocks.is_empty() {
        return Err(Error::Missing("shared attention layers for the loss".into()));
    }
    let nb = blocks.len() as f64;
    let mut acc: Option<Var> = None;
    let mut terms = LossTerms::default();
    let mut obj_sum = 0.0;
    let mut removes: Vec<Var> = Vec::new();
    let add = |g: &mut Graph, acc: &mut Option<Var>, v: Var, w: f64| -> Result<()> {
        let s = g.scale(v, w);
        *acc = Some(match *acc {
            None => s,
            Some(a) => g.add(a, s)?,
        });
        Ok(())
    };
    for b in blocks {
        let bg = loss_bg(g, b.y_edit_g, b.y_ref, b.m_ne)?;
        terms.bg += g.value(bg).item() / nb;
        add(g, &mut acc, bg, weights.w_bg / nb)?;
        if !removal {
            let obj = loss_obj(g, b.y_edit_g, b.y_ref_g, b.m_obj_t)?;
            obj_sum += g.value(obj).item() / nb;
            add(g, &mut acc, obj, weights.w_obj / nb)?;
        }
        let sm = loss_smooth_weighted(g, b.y_edit_g, b.grid, Some(b.m_disocc))?;
        terms.smooth += g.value(sm).item() / nb;
        add(g, &mut acc, sm, weights.w_smooth / nb)?;

        let has_disocc = b.m_disocc.iter().any(|&v| v > 0.5);
        let has_bg = b.m_bg.iter().any(|&v| v > 0.5);
        let has_obj = b.m_obj.iter().any(|&v| v > 0.5);
        let square = !opts.literal_product || g.shape(b.a_edit).1 == b.a_ref.rows();
        if has_disocc && has_bg && has_obj && square {
            removes.push(loss_remove(g, b.a_edit, b.a_ref, b.m_disocc, b.m_obj, b.m_bg, b.grid, opts)?);
        }
    }
    if !removal {
        terms.obj = Some(obj_sum);
    }
    if !removes.is_empty() {
        let nr = removes.len() as f64;
        let mut sum = 0.0;
        for r in removes {
            sum += g.value(r).item();
            add(g, &mut acc, r, w_remove / nr)?;
        }
        terms.remove = Some(sum / nr);
    }
    let total = acc.expect("at least one block");
    terms.total = g.value(total).item();
    Ok(TotalLoss { total, terms })
}

/// Pairs each shared guidance record with its reference capture and masks.
pub fn block_inputs<'a>(
    records: &'a [GuidanceRecord],
    reference: &'a CaptureHook,
    pyramid: &'a GuidancePyramid,
) -> Result<Vec<BlockLossInputs<'a>>> {
    records
        .iter()
        .filter(|r| r.shared)
        .map(|r| {
            let cap = reference
                .get(r.block.id)
                .ok_or_else(|| Error::Missing(format!("reference capture for block {}", r.block.id)))?;
            let l = pyramid.level(r.block.grid)?;
            Ok(BlockLossInputs {
                grid: r.block.grid,
                kind: r.block.kind,
                y_edit_g: r.y_edit_g,
                y_ref: &r.y_ref,
                y_ref_g: &r.y_ref_g,
                a_edit: r.a_edit,
                a_ref: &cap.map,
                m_obj_t: &l.m_obj_t,
                m_disocc: &l.m_disocc,
                m_ne: &l.m_ne,
                m_bg: &l.m_bg,
                m_obj: &l.m_obj,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn val(g: &Graph, v: Var) -> f64 {
        g.value(v).item()
    }

    #[test]
    fn loss_bg_cases() {
        let mut g = Graph::new();
        let ye = g.constant(Matrix::from_rows(&[&[1.4], &[7.0]]));
        let yr = Matrix::from_rows(&[&[1.0], &[0.0]]);
        let l = loss_bg(&mut g, ye, &yr, &[1.0, 0.0]).unwrap();
        assert!((val(&g, l) - 0.2).abs() < 1e-12);
        let z = loss_bg(&mut g, ye, &yr, &[0.0, 0.0]).unwrap();
        assert_eq!(val(&g, z), 0.0);
        let yv = g.value(ye).clone();
        let same = loss_bg(&mut g, ye, &yv, &[1.0, 1.0]).unwrap();
        assert_eq!(val(&g, same), 0.0);
        assert!(loss_bg(&mut g, ye, &yr, &[1.0]).is_err());
    }

    #[test]
    fn loss_obj_hand_case() {
        let mut g = Graph::new();
        let ye = g.constant(Matrix::from_rows(&[&[0.0, 2.0], &[1.0, 1.0]]));
        let yrg = Matrix::from_rows(&[&[1.0, 1.0], &[5.0, 5.0]]);
        let l = loss_obj(&mut g, ye, &yrg, &[1.0, 0.0]).unwrap();
        assert!((val(&g, l) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn smoothness_cases() {
        let mut g = Graph::new();
        let y = g.constant(Matrix::from_rows(&[&[0.0], &[1.0]]));
        let l = loss_smooth(&mut g, y, (1, 2)).unwrap();
        assert_eq!(val(&g, l), 1.0);
        let c = g.constant(Matrix::filled(9, 3, 0.7));
        let l = loss_smooth(&mut g, c, (3, 3)).unwrap();
        assert_eq!(val(&g, l), 0.0);
        let one = g.constant(Matrix::from_rows(&[&[5.0]]));
        let l = loss_smooth(&mut g, one, (1, 1)).unwrap();
        assert_eq!(val(&g, l), 0.0);
        let checker = |a: f64| Matrix::from_vec(16, 1, (0..16).map(|i| if (i % 4 + i / 4) % 2 == 0 { a } else { 0.0 }).collect()).unwrap();
        let c1 = g.constant(checker(1.0));
        let c2 = g.constant(checker(2.0));
        let l1 = loss_smooth(&mut g, c1, (4, 4)).unwrap();
        let l2 = loss_smooth(&mut g, c2, (4, 4)).unwrap();
        assert_eq!(val(&g, l1), 1.0);
        assert_eq!(val(&g, l2), 2.0 * val(&g, l1));
        let none = loss_smooth_weighted(&mut g, c1, (4, 4), Some(&[0.0; 16])).unwrap();
        assert_eq!(val(&g, none), 0.0);
    }

    #[test]
    fn adaptive_rule_cases() {
        let r = AdaptiveRule::default();
        assert_eq!(adapt_remove_weight(-1.0, 1.0, &r), 2.0);
        assert_eq!(adapt_remove_weight(-7.0, 2.0, &r), 1.0);
        assert_eq!(adapt_remove_weight(-3.0, 1.5, &r), 1.5);
        assert_eq!(adapt_remove_weight(-1.8, 1.0, &r), 1.0);
        assert_eq!(adapt_remove_weight(-6.0, 1.0, &r), 1.0);
        assert_eq!(adapt_remove_weight(0.0, 15.0, &r), 20.0);
        assert_eq!(adapt_remove_weight(-9.0, 0.15, &r), 0.1);
    }

    #[test]
    fn remove_loss_zero_when_logs_cancel() {
        // One foreground token (0) whose edit row equals a background
        // reference row; object and background columns see the same peak.
        let mut g = Graph::new();
        let a_ref = Matrix::from_rows(&[&[0.5, 0.5, 0.0], &[0.0, 1.0, 0.0], &[0.0, 1.0, 0.0]]);
        let ae = g.constant(Matrix::from_rows(&[&[0.0, 1.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 1.0, 0.0]]));
        let l = loss_remove(&mut g, ae, &a_ref, &[1.0, 0.0, 0.0], &[1.0, 1.0, 0.0], &[0.0, 0.0, 1.0], (1, 3), RemoveLossOptions::default()).unwrap();
        assert!(val(&g, l).abs() < 1e-15);
    }

    #[test]
    fn remove_loss_errors() {
        let mut g = Graph::new();
        let a = Matrix::filled(4, 4, 0.25);
        let ae = g.constant(a.clone());
        let rows = [1.0, 0.0, 0.0, 0.0];
        let obj = [1.0, 1.0, 0.0, 0.0];
        assert!(matches!(
            loss_remove(&mut g, ae, &a, &rows, &obj, &[0.0; 4], (2, 2), RemoveLossOptions::default()),
            Err(Error::EmptyMask(_))
        ));
        assert!(loss_remove(&mut g, ae, &a, &[0.0; 4], &obj, &[0.0, 0.0, 1.0, 1.0], (2, 2), RemoveLossOptions::default()).is_err());
        let cross = g.constant(Matrix::filled(4, 2, 0.5));
        let ar = Matrix::filled(4, 2, 0.5);
        let lit = RemoveLossOptions { literal_product: true, cosine: false };
        assert!(loss_remove(&mut g, cross, &ar, &rows, &obj, &[0.0, 0.0, 1.0, 1.0], (2, 2), lit).is_err());
        assert!(loss_remove(&mut g, cross, &ar, &rows, &obj, &[0.0, 0.0, 1.0, 1.0], (2, 2), RemoveLossOptions::default()).is_ok());
    }

    #[test]
    fn distances_are_normalized() {
        assert_eq!(normalized_token_distance(0, 15, (4, 4)), 1.0);
        assert_eq!(normalized_token_distance(5, 5, (4, 4)), 0.0);
        assert!((normalized_token_distance(0, 3, (4, 4)) - 3.0 / 18f64.sqrt()).abs() < 1e-15);
        assert_eq!(normalized_token_distance(0, 0, (1, 1)), 0.0);
    }

    #[test]
    fn total_loss_zero_weights_and_errors() {
        let mut g = Graph::new();
        let ye = g.constant(Matrix::from_rows(&[&[1.0], &[2.0], &[3.0], &[4.0]]));
        let other = Matrix::zeros(4, 1);
        let map = Matrix::filled(4, 4, 0.25);
        let ae = g.constant(map.clone());
        let ones = [1.0; 4];
        let b = BlockLossInputs {
            grid: (2, 2),
            kind: AttentionKind::SelfAttention,
            y_edit_g: ye,
            y_ref: &other,
            y_ref_g: &other,
            a_edit: ae,
            a_ref: &map,
            m_obj_t: &ones,
            m_disocc: &[1.0, 0.0, 0.0, 0.0],
            m_ne: &ones,
            m_bg: &[0.0, 0.0, 1.0, 1.0],
            m_obj: &[1.0, 1.0, 0.0, 0.0],
        };
        let w = LossWeights { w_bg: 0.0, w_obj: 0.0, w_smooth: 0.0, w_remove: 0.0, ..Default::default() };
        let t = total_loss(&mut g, &[b.clone()], &w, 0.0, false, RemoveLossOptions::default()).unwrap();
        assert_eq!(t.terms.total, 0.0);
        assert!(t.terms.remove.is_some());
        let r = total_loss(&mut g, &[b], &LossWeights::default(), 1.0, true, RemoveLossOptions::default()).unwrap();
        assert!(r.terms.obj.is_none());
        assert!(total_loss(&mut g, &[], &w, 0.0, false, RemoveLossOptions::default()).is_err());
    }
}
