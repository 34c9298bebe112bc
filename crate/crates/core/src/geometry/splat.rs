use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Raster;

use super::field::EditField;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplatMode {
    /// Each source writes its nearest destination pixel.
    #[default]
    Nearest,
    /// Each source spreads over its four neighbouring pixels with bilinear
    /// weights; destinations are normalized by the accumulated weight.
    Bilinear,
}

/// Output of a forward splat.
#[derive(Clone, Debug)]
pub struct Splatted {
    pub signal: Raster,
    /// Destination pixels that received at least one source.
    pub covered: Vec<bool>,
    /// For nearest splatting, the source pixel that won each destination.
    pub source_of: Vec<Option<usize>>,
}

/// Forward-warps `signal` through `field` with nearest-pixel splatting.
/// Uncovered destinations are zero.
pub fn splat(signal: &Raster, field: &EditField) -> Result<Raster> {
    Ok(splat_with(signal, field, SplatMode::Nearest)?.signal)
}

/// Forward-warps `signal` through `field`.
///
/// Collisions keep the source nearest to the camera when the field carries
/// depth, and the last source in row-major order otherwise.
pub fn splat_with(signal: &Raster, field: &EditField, mode: SplatMode) -> Result<Splatted> {
    let (h, w) = field.dims();
    if signal.dims() != (h, w) {
        return Err(Error::shape(format!(
            "signal is {}x{}, field is {h}x{w}",
            signal.height(),
            signal.width()
        )));
    }
    let c = signal.channels();
    let n = h * w;
    let mut out = Raster::zeros(h, w, c);
    let mut covered = vec![false; n];
    let mut source_of = vec![None; n];
    match mode {
        SplatMode::Nearest => {
            let depth = field.depth();
            let mut zbuf = vec![f64::INFINITY; n];
            for src in 0..n {
                let Some(dst) = field.nearest_dest(src) else { continue };
                if let Some(d) = depth {
                    if covered[dst] && d[src] > zbuf[dst] {
                        continue;
                    }
                    zbuf[dst] = d[src];
                }
                out.pixel_mut(dst).copy_from_slice(signal.pixel(src));
                covered[dst] = true;
                source_of[dst] = Some(src);
            }
        }
        SplatMode::Bilinear => {
            let mut weight = vec![0.0; n];
            for src in 0..n {
                if !field.is_valid(src) {
                    continue;
                }
                let [x, y] = field.target(src);
                let (x0, y0) = (x.floor(), y.floor());
                let (fx, fy) = (x - x0, y - y0);
                for (dx, dy, wgt) in [
                    (0, 0, (1.0 - fx) * (1.0 - fy)),
                    (1, 0, fx * (1.0 - fy)),
                    (0, 1, (1.0 - fx) * fy),
                    (1, 1, fx * fy),
                ] {
                    let (xi, yi) = (x0 as usize + dx, y0 as usize + dy);
                    if wgt <= 0.0 || xi >= w || yi >= h {
                        continue;
                    }
                    let dst = yi * w + xi;
                    weight[dst] += wgt;
                    for (o, s) in out.pixel_mut(dst).iter_mut().zip(signal.pixel(src)) {
                        *o += wgt * s;
                    }
                }
            }
            for dst in 0..n {
                if weight[dst] > 1e-9 {
                    covered[dst] = true;
                    let inv = 1.0 / weight[dst];
                    out.pixel_mut(dst).iter_mut().for_each(|v| *v *= inv);
                }
            }
        }
    }
    Ok(Splatted {
        signal: out,
        covered,
        source_of,
    })
}
