use crate::error::Result;
use crate::raster::Raster;

use super::field::EditField;
use super::splat::{splat_with, SplatMode};

#[derive(Clone, Debug)]
pub struct TransformedMask {
    /// Thresholded at one half, with splat holes closed.
    pub binary: Raster,
    /// Splatted values before thresholding, used for blending.
    pub soft: Raster,
}

/// The four region masks an edit is evaluated on. All are binary.
#[derive(Clone, Debug)]
pub struct MaskSet {
    /// Object mask after the transform.
    pub m_obj_t: Raster,
    /// Soft counterpart of `m_obj_t`.
    pub m_obj_t_soft: Raster,
    /// Pixels the object leaves behind: `m_obj ∧ ¬m_obj_t`.
    pub m_disocc: Raster,
    /// Non-editable pixels: `¬(m_obj ∨ m_obj_t)`.
    pub m_ne: Raster,
    /// Background of the input: `¬m_obj`.
    pub m_bg: Raster,
    /// The input object mask, binarized.
    pub m_obj: Raster,
}

/// Splats a mask through `field`.
///
/// Pixels that a 3×3 closing would switch on are filled only when they are
/// genuine splat holes: no source landed there, and looking back along the
/// average displacement of the covered neighbours lands on a valid object
/// source.
pub fn transform_mask(mask: &Raster, field: &EditField) -> Result<TransformedMask> {
    transform_mask_with(mask, field, SplatMode::Nearest)
}

pub(crate) fn transform_mask_with(
    mask: &Raster,
    field: &EditField,
    mode: SplatMode,
) -> Result<TransformedMask> {
    let mask = if mask.channels() == 1 {
        mask.clone()
    } else {
        mask.select_channels(&[0])
    };
    let sp = splat_with(&mask, field, mode)?;
    let mut soft = sp.signal.map(|v| v.clamp(0.0, 1.0));
    let (h, w) = field.dims();
    let mut bits: Vec<bool> = soft.data().iter().map(|&v| v >= 0.5).collect();

    let closed = close3x3(&bits, h, w);
    let src_bits = mask.to_bools();
    let mut fills = Vec::new();
    for p in 0..h * w {
        if !closed[p] || bits[p] || sp.covered[p] {
            continue;
        }
        if let Some(src) = back_lookup(p, h, w, field, &sp.covered, &sp.source_of, |s| src_bits[s]) {
            fills.push((p, mask.data()[src]));
        }
    }
    for (p, v) in fills {
        bits[p] = true;
        soft.data_mut()[p] = v.clamp(0.0, 1.0);
    }
    Ok(TransformedMask {
        binary: Raster::from_bools(h, w, &bits),
        soft,
    })
}

/// Estimated source pixel of an uncovered destination `p`, from the mean
/// displacement of its covered 8-neighbours, if it is valid and passes
/// `accept`. An estimate exactly halfway between pixels tries both.
fn back_lookup(
    p: usize,
    h: usize,
    w: usize,
    field: &EditField,
    covered: &[bool],
    source_of: &[Option<usize>],
    accept: impl Fn(usize) -> bool,
) -> Option<usize> {
    let (px, py) = ((p % w) as isize, (p / w) as isize);
    let (mut dx, mut dy, mut n) = (0.0, 0.0, 0.0);
    for oy in -1..=1isize {
        for ox in -1..=1isize {
            let (x, y) = (px + ox, py + oy);
            if (ox, oy) == (0, 0) || x < 0 || y < 0 || x >= w as isize || y >= h as isize {
                continue;
            }
            let q = y as usize * w + x as usize;
            if !covered[q] {
                continue;
            }
            let Some(s) = source_of[q] else { continue };
            let t = field.target(s);
            dx += t[0] - (s % w) as f64;
            dy += t[1] - (s / w) as f64;
            n += 1.0;
        }
    }
    if n == 0.0 {
        return None;
    }
    let nearest = |v: f64| -> Vec<f64> {
        if (v - v.floor() - 0.5).abs() < 1e-9 {
            vec![v.floor(), v.ceil()]
        } else {
            vec![v.round()]
        }
    };
    let (xs, ys) = (nearest(px as f64 - dx / n), nearest(py as f64 - dy / n));
    ys.iter()
        .flat_map(|&sy| xs.iter().map(move |&sx| (sx, sy)))
        .filter(|&(sx, sy)| sx >= 0.0 && sy >= 0.0 && sx < w as f64 && sy < h as f64)
        .map(|(sx, sy)| sy as usize * w + sx as usize)
        .find(|&s| field.is_valid(s) && accept(s))
}

/// Binary 3×3 closing; erosion treats off-grid pixels as set.
pub(crate) fn close3x3(bits: &[bool], h: usize, w: usize) -> Vec<bool> {
    let at = |b: &[bool], x: isize, y: isize, outside: bool| {
        if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
            outside
        } else {
            b[y as usize * w + x as usize]
        }
    };
    let window = |b: &[bool], any: bool, outside: bool| -> Vec<bool> {
        (0..h * w)
            .map(|p| {
                let (x, y) = ((p % w) as isize, (p / w) as isize);
                let mut hits = (-1..=1).flat_map(|oy| (-1..=1).map(move |ox| (ox, oy)));
                if any {
                    hits.any(|(ox, oy)| at(b, x + ox, y + oy, outside))
                } else {
                    hits.all(|(ox, oy)| at(b, x + ox, y + oy, outside))
                }
            })
            .collect()
    };
    let dilated = window(bits, true, false);
    window(&dilated, false, true)
}

/// Region masks of an edit. `m_obj` is binarized at one half.
pub fn mask_algebra(m_obj: &Raster, field: &EditField) -> Result<MaskSet> {
    let (h, w) = field.dims();
    m_obj.ensure_dims(h, w, "object mask")?;
    let obj = m_obj.to_bools();
    let t = transform_mask(m_obj, field)?;
    let objt = t.binary.to_bools();
    let build = |f: &dyn Fn(usize) -> bool| -> Raster {
        let bits: Vec<bool> = (0..h * w).map(f).collect();
        Raster::from_bools(h, w, &bits)
    };
    Ok(MaskSet {
        m_disocc: build(&|i| obj[i] && !objt[i]),
        m_ne: build(&|i| !(obj[i] || objt[i])),
        m_bg: build(&|i| !obj[i]),
        m_obj: build(&|i| obj[i]),
        m_obj_t: t.binary,
        m_obj_t_soft: t.soft,
    })
}
