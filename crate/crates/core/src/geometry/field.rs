use crate::error::{Error, Result};
use crate::raster::Raster;

use super::transform::{CameraIntrinsics, EditTransform, Resolved2d, Resolved3d};

/// Per-pixel destination of a transform, in pixel units of the same grid.
///
/// A pixel is valid when its destination lies inside `[0, W−1] × [0, H−1]`
/// and, for depth-based fields, it is the nearest surface landing on its
/// destination pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct EditField {
    height: usize,
    width: usize,
    target: Vec<[f64; 2]>,
    valid: Vec<bool>,
    /// Camera-space depth after the transform, present for 3D fields.
    depth: Option<Vec<f64>>,
}

impl EditField {
    pub fn identity(height: usize, width: usize) -> Self {
        let target = (0..height * width)
            .map(|i| [(i % width) as f64, (i / width) as f64])
            .collect();
        Self {
            height,
            width,
            target,
            valid: vec![true; height * width],
            depth: None,
        }
    }

    /// Builds a field from raw parts; out-of-bounds targets are marked invalid.
    pub fn from_parts(
        height: usize,
        width: usize,
        target: Vec<[f64; 2]>,
        valid: Vec<bool>,
        depth: Option<Vec<f64>>,
    ) -> Result<Self> {
        let n = height * width;
        if height == 0 || width == 0 {
            return Err(Error::invalid("field dimensions must be positive"));
        }
        if target.len() != n || valid.len() != n || depth.as_ref().is_some_and(|d| d.len() != n) {
            return Err(Error::shape(format!("field parts do not match {height}x{width}")));
        }
        let mut f = Self {
            height,
            width,
            target,
            valid,
            depth,
        };
        for i in 0..n {
            if f.valid[i] && !f.in_bounds(f.target[i]) {
                f.valid[i] = false;
            }
        }
        Ok(f)
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn target(&self, idx: usize) -> [f64; 2] {
        self.target[idx]
    }

    #[inline]
    pub fn is_valid(&self, idx: usize) -> bool {
        self.valid[idx]
    }

    pub fn targets(&self) -> &[[f64; 2]] {
        &self.target
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn depth(&self) -> Option<&[f64]> {
        self.depth.as_deref()
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    #[inline]
    pub(crate) fn in_bounds(&self, t: [f64; 2]) -> bool {
        t[0] >= 0.0 && t[1] >= 0.0 && t[0] <= (self.width - 1) as f64 && t[1] <= (self.height - 1) as f64
    }

    /// Nearest destination pixel index of a valid source.
    #[inline]
    pub fn nearest_dest(&self, idx: usize) -> Option<usize> {
        if !self.valid[idx] {
            return None;
        }
        let [x, y] = self.target[idx];
        let (xi, yi) = (x.round() as usize, y.round() as usize);
        (xi < self.width && yi < self.height).then(|| yi * self.width + xi)
    }

    /// True when every pixel maps to itself.
    pub fn is_identity(&self) -> bool {
        self.valid.iter().all(|&v| v)
            && self
                .target
                .iter()
                .enumerate()
                .all(|(i, t)| t[0] == (i % self.width) as f64 && t[1] == (i / self.width) as f64)
    }

    /// Keeps only sources inside `mask` (values above one half).
    pub fn restricted_to(&self, mask: &Raster) -> Result<Self> {
        mask.ensure_dims(self.height, self.width, "restriction mask")?;
        let mut out = self.clone();
        for (v, keep) in out.valid.iter_mut().zip(mask.to_bools()) {
            *v &= keep;
        }
        Ok(out)
    }
}

/// Field of a 2D transform (`translate2d`, `scale2d`, `identity`, `remove`).
pub fn build_field_2d(transform: &EditTransform, height: usize, width: usize) -> Result<EditField> {
    if height == 0 || width == 0 {
        return Err(Error::invalid("field dimensions must be positive"));
    }
    let resolved = transform.resolve_2d()?;
    let mut field = EditField::identity(height, width);
    match resolved {
        Resolved2d::Identity => {}
        Resolved2d::Remove => field.valid.iter_mut().for_each(|v| *v = false),
        Resolved2d::Affine { scale, offset } => {
            for i in 0..height * width {
                let (x, y) = ((i % width) as f64, (i / width) as f64);
                let t = [scale[0] * x + offset[0], scale[1] * y + offset[1]];
                field.target[i] = t;
                field.valid[i] = field.in_bounds(t);
            }
        }
    }
    Ok(field)
}

/// Field of a depth-based transform: each pixel is back-projected with its
/// depth, moved by the transform and re-projected. Pixels landing behind the
/// camera or off-grid are invalid, and when several land on one destination
/// pixel only the nearest survives.
pub fn build_field_3d(
    transform: &EditTransform,
    depth: &Raster,
    intrinsics: &CameraIntrinsics,
) -> Result<EditField> {
    build_field_3d_from(transform, depth, intrinsics, None)
}

/// As [`build_field_3d`], but only pixels in `sources` move (and compete in
/// the z-test); all others are invalid.
fn build_field_3d_from(
    transform: &EditTransform,
    depth: &Raster,
    intrinsics: &CameraIntrinsics,
    sources: Option<&[bool]>,
) -> Result<EditField> {
    intrinsics.validate()?;
    depth.ensure_positive("depth")?;
    let (height, width) = depth.dims();
    let resolved = transform.resolve_3d()?;
    let mut field = EditField::identity(height, width);
    let (linear, offset) = match resolved {
        Resolved3d::Identity => {
            if let Some(s) = sources {
                field.valid.copy_from_slice(s);
            }
            return Ok(field);
        }
        Resolved3d::Remove => {
            field.valid.iter_mut().for_each(|v| *v = false);
            return Ok(field);
        }
        Resolved3d::Map { linear, offset } => (linear, offset),
    };
    let mut zs = vec![f64::INFINITY; height * width];
    for i in 0..height * width {
        let (x, y) = ((i % width) as f64, (i / width) as f64);
        let p = intrinsics.back_project(x, y, depth.data()[i * depth.channels()]);
        let mut q = offset;
        for r in 0..3 {
            for c in 0..3 {
                q[r] += linear[r][c] * p[c];
            }
        }
        zs[i] = q[2];
        if sources.is_some_and(|s| !s[i]) {
            field.valid[i] = false;
            continue;
        }
        match intrinsics.project(q) {
            Some(t) => {
                field.target[i] = t;
                field.valid[i] = field.in_bounds(t);
            }
            None => {
                field.target[i] = [f64::NAN, f64::NAN];
                field.valid[i] = false;
            }
        }
    }
    // z-buffer: ties go to the later source in row-major order, like splat.
    let mut winner: Vec<Option<usize>> = vec![None; height * width];
    for i in 0..height * width {
        if let Some(d) = field.nearest_dest(i) {
            match winner[d] {
                Some(j) if zs[j] < zs[i] => field.valid[i] = false,
                Some(j) => {
                    field.valid[j] = false;
                    winner[d] = Some(i);
                }
                None => winner[d] = Some(i),
            }
        }
    }
    field.depth = Some(zs);
    Ok(field)
}

/// Dispatches on the transform kind and keeps only the sources inside
/// `object` when given. 3D kinds use `depth` (or the transform's constant
/// depth) and `intrinsics` (or [`CameraIntrinsics::default_for`]).
pub fn build_field(
    transform: &EditTransform,
    height: usize,
    width: usize,
    depth: Option<&Raster>,
    intrinsics: Option<&CameraIntrinsics>,
    object: Option<&Raster>,
) -> Result<EditField> {
    let sources = match object {
        Some(m) => {
            m.ensure_dims(height, width, "object mask")?;
            Some(m.to_bools())
        }
        None => None,
    };
    let default_k = CameraIntrinsics::default_for(height, width);
    let k = intrinsics.unwrap_or(&default_k);
    if !transform.kind.is_3d() {
        let resolved;
        let transform = match object {
            Some(m) => {
                resolved = transform.resolve_pivot(m, &Raster::filled(1, 1, 1, 1.0), k)?;
                &resolved
            }
            None => transform,
        };
        let mut f = build_field_2d(transform, height, width)?;
        if let Some(s) = sources {
            for (v, keep) in f.valid.iter_mut().zip(s) {
                *v &= keep;
            }
        }
        return Ok(f);
    }
    let constant;
    let depth = match depth {
        Some(d) => {
            d.ensure_dims(height, width, "depth")?;
            d
        }
        None => {
            let z = match transform.depth_source {
                super::DepthSource::Constant(z) => z,
                super::DepthSource::File => return Err(Error::Missing("depth map".into())),
            };
            constant = Raster::filled(height, width, 1, z);
            &constant
        }
    };
    let resolved;
    let transform = match object {
        Some(m) => {
            resolved = transform.resolve_pivot(m, depth, k)?;
            &resolved
        }
        None => transform,
    };
    build_field_3d_from(transform, depth, k, sources.as_deref())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Pivot, rotation_about_axis};

    #[test]
    fn object_centroid_pivot_is_resolved_from_the_mask() {
        let m = Raster::rect_mask(9, 9, 2, 2, 5, 5);
        let t = EditTransform::scale2d(2.0, 2.0, Pivot::ObjectCentroid);
        let f = build_field(&t, 9, 9, None, None, Some(&m)).unwrap();
        assert_eq!(f.target(3 * 9 + 3), [3.0, 3.0]);
        assert_eq!(f.target(2 * 9 + 2), [1.0, 1.0]);
        let r = EditTransform::rigid3d(rotation_about_axis([0.0, 0.0, 1.0], 90.0).unwrap(), [0.0; 3], Pivot::ObjectCentroid);
        let f = build_field(&r, 9, 9, None, None, Some(&m)).unwrap();
        let c = f.target(3 * 9 + 3);
        assert!((c[0] - 3.0).abs() < 1e-9 && (c[1] - 3.0).abs() < 1e-9, "{c:?}");
    }

    #[test]
    fn identity_2d_maps_every_pixel_to_itself() {
        let f = build_field_2d(&EditTransform::identity(), 8, 8).unwrap();
        assert!(f.is_identity());
    }

    #[test]
    fn translate_shifts_target() {
        let f = build_field_2d(&EditTransform::translate2d(2.0, 1.0), 8, 8).unwrap();
        assert_eq!(f.target(3 * 8 + 2), [4.0, 4.0]);
        assert!(!f.is_valid(7));
    }

    #[test]
    fn scale_about_origin() {
        let f = build_field_2d(&EditTransform::scale2d(2.0, 2.0, Pivot::Origin), 8, 8).unwrap();
        assert_eq!(f.target(8 + 3), [6.0, 2.0]);
        assert!(!f.is_valid(4), "x = 8 is off the grid");
    }

    #[test]
    fn builders_reject_the_other_dimension() {
        let rigid = EditTransform::rigid3d(
            rotation_about_axis([0.0, 0.0, 1.0], 10.0).unwrap(),
            [0.0; 3],
            Pivot::Origin,
        );
        assert!(matches!(build_field_2d(&rigid, 4, 4), Err(Error::UnsupportedTransform(_))));
        let depth = Raster::filled(4, 4, 1, 0.5);
        let k = CameraIntrinsics::default_for(4, 4);
        let t = EditTransform::translate2d(1.0, 0.0);
        assert!(build_field_3d(&t, &depth, &k).is_err());
    }

    #[test]
    fn bad_depth_is_rejected() {
        let mut depth = Raster::filled(4, 4, 1, 0.5);
        depth.data_mut()[3] = 0.0;
        let k = CameraIntrinsics::default_for(4, 4);
        assert!(build_field_3d(&EditTransform::identity(), &depth, &k).is_err());
    }

    #[test]
    fn camera_x_translation_is_pixel_shift() {
        let depth = Raster::filled(64, 64, 1, 0.5);
        let k = CameraIntrinsics::new(64.0, 64.0, 31.5, 31.5).unwrap();
        let t = EditTransform::rigid3d(
            [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            [0.25, 0.0, 0.0],
            Pivot::Origin,
        );
        let f = build_field_3d(&t, &depth, &k).unwrap();
        for i in 0..64 * 64 {
            let (x, y) = ((i % 64) as f64, (i / 64) as f64);
            let [tx, ty] = f.target(i);
            assert!((tx - (x + 32.0)).abs() < 1e-9 && (ty - y).abs() < 1e-9);
            assert_eq!(f.is_valid(i), x + 32.0 <= 63.0);
        }
    }

    #[test]
    fn behind_camera_is_invalid() {
        let depth = Raster::filled(4, 4, 1, 0.5);
        let k = CameraIntrinsics::default_for(4, 4);
        let t = EditTransform::rigid3d(
            [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            [0.0, 0.0, -1.0],
            Pivot::Origin,
        );
        let f = build_field_3d(&t, &depth, &k).unwrap();
        assert_eq!(f.valid_count(), 0);
    }

    #[test]
    fn occluded_sources_lose_the_z_test() {
        // Shrinking depth-wise toward the camera with a strong x scale makes
        // neighbours collide; only one source per destination stays valid.
        let depth = Raster::from_fn(1, 8, |x, _| 0.5 + 0.01 * x as f64);
        let k = CameraIntrinsics::default_for(1, 8);
        let t = EditTransform::scale3d([0.25, 1.0, 1.0], Pivot::Point(vec![0.0, 0.0, 0.5]));
        let f = build_field_3d(&t, &depth, &k).unwrap();
        let mut seen = std::collections::HashSet::new();
        for i in 0..8 {
            if let Some(d) = f.nearest_dest(i) {
                assert!(seen.insert(d), "two valid sources hit {d}");
            }
        }
        assert!(f.valid_count() < 8);
    }
}
