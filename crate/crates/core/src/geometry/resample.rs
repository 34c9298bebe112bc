use crate::error::{Error, Result};
use crate::raster::Raster;

use super::field::EditField;

/// Box-filter overlap weights between `src` source cells and `dst` output
/// cells along one axis: for each output cell, `(source index, overlap)`.
fn box_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let s = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let (lo, hi) = (o as f64 * s, (o + 1) as f64 * s);
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(src);
            (first..last)
                .filter_map(|i| {
                    let ov = hi.min(i as f64 + 1.0) - lo.max(i as f64);
                    (ov > 1e-12).then_some((i, ov))
                })
                .collect()
        })
        .collect()
}

fn check_size(height: usize, width: usize) -> Result<()> {
    if height == 0 || width == 0 {
        return Err(Error::invalid("resample target size must be positive"));
    }
    Ok(())
}

/// Area-average resampling of every channel, without thresholding.
pub fn resample_mask_soft(mask: &Raster, height: usize, width: usize) -> Result<Raster> {
    check_size(height, width)?;
    if mask.dims() == (height, width) {
        return Ok(mask.clone());
    }
    let c = mask.channels();
    let wy = box_weights(mask.height(), height);
    let wx = box_weights(mask.width(), width);
    let mut out = Raster::zeros(height, width, c);
    for (y, rows) in wy.iter().enumerate() {
        for (x, cols) in wx.iter().enumerate() {
            let mut area = 0.0;
            let mut acc = vec![0.0; c];
            for &(sy, a) in rows {
                for &(sx, b) in cols {
                    let wgt = a * b;
                    area += wgt;
                    for (k, v) in acc.iter_mut().enumerate() {
                        *v += wgt * mask.get(sx, sy, k);
                    }
                }
            }
            for (k, v) in acc.into_iter().enumerate() {
                out.set(x, y, k, v / area);
            }
        }
    }
    Ok(out)
}

/// Area-average resampling thresholded at one half.
pub fn resample_mask(mask: &Raster, height: usize, width: usize) -> Result<Raster> {
    Ok(resample_mask_soft(mask, height, width)?.map(|v| if v >= 0.5 { 1.0 } else { 0.0 }))
}

/// Resamples a field to another grid. Each output pixel averages the
/// targets of the valid source pixels it covers (area-weighted) and is
/// valid when at least half of its area is valid. Coordinates are rescaled
/// about pixel centres.
pub fn resample_field(field: &EditField, height: usize, width: usize) -> Result<EditField> {
    check_size(height, width)?;
    if field.dims() == (height, width) {
        return Ok(field.clone());
    }
    let (sh, sw) = field.dims();
    let (ry, rx) = (height as f64 / sh as f64, width as f64 / sw as f64);
    let wy = box_weights(sh, height);
    let wx = box_weights(sw, width);
    let n = height * width;
    let mut target = Vec::with_capacity(n);
    let mut valid = Vec::with_capacity(n);
    let mut depth = field.depth().map(|_| Vec::with_capacity(n));
    for rows in &wy {
        for cols in &wx {
            let (mut area, mut vw) = (0.0, 0.0);
            let (mut tx, mut ty, mut tz) = (0.0, 0.0, 0.0);
            for &(sy, a) in rows {
                for &(sx, b) in cols {
                    let wgt = a * b;
                    area += wgt;
                    let i = sy * sw + sx;
                    if field.is_valid(i) {
                        let t = field.target(i);
                        vw += wgt;
                        tx += wgt * t[0];
                        ty += wgt * t[1];
                        if let Some(d) = field.depth() {
                            tz += wgt * d[i];
                        }
                    }
                }
            }
            if vw > 0.0 && vw / area >= 0.5 - 1e-12 {
                let (mx, my) = (tx / vw, ty / vw);
                target.push([(mx + 0.5) * rx - 0.5, (my + 0.5) * ry - 0.5]);
                valid.push(true);
                if let Some(d) = depth.as_mut() {
                    d.push(tz / vw);
                }
            } else {
                target.push([f64::NAN, f64::NAN]);
                valid.push(false);
                if let Some(d) = depth.as_mut() {
                    d.push(f64::INFINITY);
                }
            }
        }
    }
    EditField::from_parts(height, width, target, valid, depth)
}
