use crate::error::{Error, Result};
use crate::geometry::{splat_with, EditField, SplatMode};
use crate::raster::Raster;

/// Fills every object pixel with the colour of the nearest background pixel
/// (first in row-major order on ties).
pub fn fill_from_background(image: &Raster, m_obj: &Raster) -> Result<Raster> {
    let (h, w) = image.dims();
    m_obj.ensure_dims(h, w, "object mask")?;
    let obj = m_obj.to_bools();
    let bg: Vec<(usize, usize)> = (0..h * w).filter(|&i| !obj[i]).map(|i| (i % w, i / w)).collect();
    let mut out = image.clone();
    if bg.is_empty() {
        return Ok(out);
    }
    for i in (0..h * w).filter(|&i| obj[i]) {
        let (x, y) = ((i % w) as i64, (i / w) as i64);
        let &(bx, by) = bg
            .iter()
            .min_by_key(|&&(bx, by)| (bx as i64 - x).pow(2) + (by as i64 - y).pow(2))
            .expect("non-empty");
        let src = image.pixel(by * w + bx).to_vec();
        out.pixel_mut(i).copy_from_slice(&src);
    }
    Ok(out)
}

/// The object splatted through `field` onto the input with the vacated
/// pixels filled from the nearest background.
pub fn naive_warp_baseline(image: &Raster, m_obj: &Raster, field: &EditField) -> Result<Raster> {
    let field = field.restricted_to(m_obj)?;
    let mut out = fill_from_background(image, m_obj)?;
    let s = splat_with(image, &field, SplatMode::Nearest)?;
    for (i, &c) in s.covered.iter().enumerate() {
        if c {
            out.pixel_mut(i).copy_from_slice(s.signal.pixel(i));
        }
    }
    Ok(out)
}

/// Mean absolute difference between the input's object, forward-warped by
/// `field`, and `edited`, over the pixels the warped object covers. `None`
/// when nothing is covered.
pub fn warp_error(input: &Raster, edited: &Raster, m_obj: &Raster, field: &EditField) -> Result<Option<f64>> {
    if input.dims() != edited.dims() || input.channels() != edited.channels() {
        return Err(Error::shape("input and edited images differ in shape"));
    }
    let field = field.restricted_to(m_obj)?;
    let s = splat_with(input, &field, SplatMode::Nearest)?;
    let (mut sum, mut n) = (0.0, 0usize);
    for (i, &c) in s.covered.iter().enumerate() {
        if c {
            for (a, b) in s.signal.pixel(i).iter().zip(edited.pixel(i)) {
                sum += (a - b).abs();
            }
            n += input.channels();
        }
    }
    Ok((n > 0).then(|| sum / n as f64))
}
