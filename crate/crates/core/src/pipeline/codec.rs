use crate::error::{Error, Result};
use crate::geometry::{resample_mask_soft, splat_with, EditField, MaskSet, SplatMode};
use crate::raster::Raster;
use crate::tensor::Matrix;

/// Identity "latent space": the image is area-averaged by `factor`, mapped
/// to `[−1, 1]`, and given a fourth luminance channel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LatentCodec {
    pub factor: usize,
}

impl Default for LatentCodec {
    fn default() -> Self {
        Self { factor: 4 }
    }
}

pub fn luminance(p: &[f64]) -> f64 {
    0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
}

impl LatentCodec {
    pub fn latent_dims(&self, image: (usize, usize)) -> (usize, usize) {
        (image.0 / self.factor, image.1 / self.factor)
    }

    /// RGB image → `(h·w) × 4` latent.
    pub fn encode(&self, image: &Raster) -> Result<Matrix> {
        let (h, w) = image.dims();
        if image.channels() != 3 || h % self.factor != 0 || w % self.factor != 0 {
            return Err(Error::shape(format!(
                "expected an RGB image with sides divisible by {}, got {h}x{w}x{}",
                self.factor,
                image.channels()
            )));
        }
        let (lh, lw) = self.latent_dims((h, w));
        let small = resample_mask_soft(image, lh, lw)?;
        let mut z = Matrix::zeros(lh * lw, 4);
        for i in 0..lh * lw {
            let p = small.pixel(i);
            let row = z.row_mut(i);
            for c in 0..3 {
                row[c] = 2.0 * p[c] - 1.0;
            }
            row[3] = 2.0 * luminance(p) - 1.0;
        }
        Ok(z)
    }

    /// Latent → RGB image by nearest upsampling of the colour channels,
    /// without clamping.
    pub fn decode_raw(&self, z: &Matrix, latent: (usize, usize)) -> Result<Raster> {
        let (lh, lw) = latent;
        if z.rows() != lh * lw || z.cols() < 3 {
            return Err(Error::shape("latent does not match the grid"));
        }
        let (h, w) = (lh * self.factor, lw * self.factor);
        let mut out = Raster::zeros(h, w, 3);
        for y in 0..h {
            for x in 0..w {
                let row = z.row((y / self.factor) * lw + x / self.factor);
                for c in 0..3 {
                    out.set(x, y, c, (row[c] + 1.0) / 2.0);
                }
            }
        }
        Ok(out)
    }

    pub fn decode(&self, z: &Matrix, latent: (usize, usize)) -> Result<Raster> {
        Ok(self.decode_raw(z, latent)?.map(|v| v.clamp(0.0, 1.0)))
    }

    /// High-frequency detail the latent cannot hold: `I − up(down(I))`.
    pub fn detail(&self, image: &Raster) -> Result<Raster> {
        let z = self.encode(image)?;
        let base = self.decode_raw(&z, self.latent_dims(image.dims()))?;
        Raster::new(
            image.height(),
            image.width(),
            3,
            image.data().iter().zip(base.data()).map(|(a, b)| a - b).collect(),
        )
    }

    /// Decodes an edited latent and adds the input's detail: moved with the
    /// object inside the transformed mask, kept in place in the non-editable
    /// region, and dropped in disoccluded pixels.
    pub fn decode_with_detail(
        &self,
        z: &Matrix,
        image: &Raster,
        field: &EditField,
        masks: &MaskSet,
    ) -> Result<Raster> {
        let base = self.decode_raw(z, self.latent_dims(image.dims()))?;
        let detail = self.detail(image)?;
        let obj_detail = detail.masked(&masks.m_obj)?;
        let moved = splat_with(&obj_detail, field, SplatMode::Nearest)?;
        let objt = masks.m_obj_t.to_bools();
        let ne = masks.m_ne.to_bools();
        let mut out = base;
        for i in 0..out.pixel_count() {
            let add: Option<&[f64]> = if objt[i] && moved.covered[i] {
                Some(moved.signal.pixel(i))
            } else if ne[i] {
                Some(detail.pixel(i))
            } else {
                None
            };
            if let Some(d) = add {
                for (o, v) in out.pixel_mut(i).iter_mut().zip(d) {
                    *o += v;
                }
            }
        }
        Ok(out.map(|v| v.clamp(0.0, 1.0)))
    }
}

/// Peak signal-to-noise ratio in dB for signals in `[0, 1]`.
pub fn psnr(a: &Raster, b: &Raster) -> Result<f64> {
    if a.dims() != b.dims() || a.channels() != b.channels() {
        return Err(Error::shape("PSNR operands differ in shape"));
    }
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.data().len() as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}
