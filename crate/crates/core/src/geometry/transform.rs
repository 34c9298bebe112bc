use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Raster;

/// Billboard depth used when no depth map is supplied, in metres.
pub const DEFAULT_CONSTANT_DEPTH: f64 = 0.5;

/// Pinhole intrinsics in pixel units. Pixel `(x, y)` has its centre at
/// integer coordinates, so the centre of a `W`-wide image is `(W − 1) / 2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        let k = Self { fx, fy, cx, cy };
        k.validate()?;
        Ok(k)
    }

    /// `fx = fy = max(H, W)` with the principal point at the image centre.
    pub fn default_for(height: usize, width: usize) -> Self {
        let f = height.max(width) as f64;
        Self {
            fx: f,
            fy: f,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = [self.fx, self.fy, self.cx, self.cy].iter().all(|v| v.is_finite())
            && self.fx > 0.0
            && self.fy > 0.0;
        if !ok {
            return Err(Error::invalid(format!("singular camera intrinsics {self:?}")));
        }
        Ok(())
    }

    /// `depth · P⁻¹ [x, y, 1]ᵀ`
    #[inline]
    pub fn back_project(&self, x: f64, y: f64, depth: f64) -> [f64; 3] {
        [
            depth * (x - self.cx) / self.fx,
            depth * (y - self.cy) / self.fy,
            depth,
        ]
    }

    /// Perspective projection; `None` for points on or behind the camera plane.
    #[inline]
    pub fn project(&self, p: [f64; 3]) -> Option<[f64; 2]> {
        (p[2] > 1e-9).then(|| [self.fx * p[0] / p[2] + self.cx, self.fy * p[1] / p[2] + self.cy])
    }

    /// Rescales the intrinsics to another raster size, keeping the field of view.
    pub fn rescaled(&self, from: (usize, usize), to: (usize, usize)) -> Self {
        let sy = to.0 as f64 / from.0 as f64;
        let sx = to.1 as f64 / from.1 as f64;
        Self {
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: (self.cx + 0.5) * sx - 0.5,
            cy: (self.cy + 0.5) * sy - 0.5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditKind {
    Translate2d,
    Scale2d,
    Rigid3d,
    Scale3d,
    Remove,
    Identity,
}

impl EditKind {
    pub fn name(self) -> &'static str {
        match self {
            EditKind::Translate2d => "translate2d",
            EditKind::Scale2d => "scale2d",
            EditKind::Rigid3d => "rigid3d",
            EditKind::Scale3d => "scale3d",
            EditKind::Remove => "remove",
            EditKind::Identity => "identity",
        }
    }

    pub fn is_3d(self) -> bool {
        matches!(self, EditKind::Rigid3d | EditKind::Scale3d)
    }
}

/// Fixed point of a scale or rotation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pivot {
    /// Pixel `(0, 0)` for 2D transforms, the camera centre for 3D ones.
    Origin,
    /// Centroid of the object mask (back-projected for 3D transforms).
    ObjectCentroid,
    /// Explicit point: `[x, y]` in pixels or `[x, y, z]` in metres.
    Point(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthSource {
    /// Depth map supplied alongside the image.
    File,
    /// Billboard at a fixed depth in metres.
    Constant(f64),
}

impl Default for DepthSource {
    fn default() -> Self {
        DepthSource::Constant(DEFAULT_CONSTANT_DEPTH)
    }
}

/// Axis-angle rotation in degrees.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AxisAngle {
    pub axis: [f64; 3],
    pub degrees: f64,
}

/// Kind-specific parameters. Fields irrelevant to the kind are ignored.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransformParams {
    /// `translate2d`: pixel offset `[dx, dy]`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub offset: Option<[f64; 2]>,
    /// `scale2d`: `[sx, sy]`; `scale3d`: `[sx, sy, sz]`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scale: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pivot: Option<Pivot>,
    /// `rigid3d`: row-major 3×3 rotation.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rotation: Option<[[f64; 3]; 3]>,
    /// `rigid3d`: rotation given as axis and angle instead of a matrix.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub axis_angle: Option<AxisAngle>,
    /// `rigid3d`: translation in metres.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub translation: Option<[f64; 3]>,
}

/// A user edit, serialized as `{kind, params, depth_source}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditTransform {
    pub kind: EditKind,
    #[serde(default)]
    pub params: TransformParams,
    #[serde(default)]
    pub depth_source: DepthSource,
}

pub(crate) enum Resolved2d {
    Affine { scale: [f64; 2], offset: [f64; 2] },
    Identity,
    Remove,
}

pub(crate) enum Resolved3d {
    Map {
        linear: [[f64; 3]; 3],
        offset: [f64; 3],
    },
    Identity,
    Remove,
}

const ROTATION_TOL: f64 = 1e-6;

/// Rotation matrix for `degrees` about `axis` (normalized internally).
pub fn rotation_about_axis(axis: [f64; 3], degrees: f64) -> Result<[[f64; 3]; 3]> {
    let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
    if !(n.is_finite() && n > 0.0) || !degrees.is_finite() {
        return Err(Error::invalid("rotation axis must be a finite nonzero vector"));
    }
    let [x, y, z] = [axis[0] / n, axis[1] / n, axis[2] / n];
    let (s, c) = degrees.to_radians().sin_cos();
    let t = 1.0 - c;
    Ok([
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
    ])
}

fn check_rotation(r: &[[f64; 3]; 3]) -> Result<()> {
    for i in 0..3 {
        for j in 0..3 {
            let d: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
            let want = if i == j { 1.0 } else { 0.0 };
            if (d - want).abs() > ROTATION_TOL || !d.is_finite() {
                return Err(Error::invalid("rotation is not orthonormal"));
            }
        }
    }
    let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
        - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
        + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
    if (det - 1.0).abs() > ROTATION_TOL {
        return Err(Error::invalid(format!("rotation determinant is {det}, expected +1")));
    }
    Ok(())
}

fn positive_scale(s: &[f64], n: usize) -> Result<()> {
    if s.len() != n {
        return Err(Error::invalid(format!("expected {n} scale factors, got {}", s.len())));
    }
    if s.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(Error::invalid("scale factors must be positive"));
    }
    Ok(())
}

impl EditTransform {
    pub fn identity() -> Self {
        Self::of(EditKind::Identity, TransformParams::default())
    }

    pub fn remove() -> Self {
        Self::of(EditKind::Remove, TransformParams::default())
    }

    pub fn translate2d(dx: f64, dy: f64) -> Self {
        Self::of(
            EditKind::Translate2d,
            TransformParams {
                offset: Some([dx, dy]),
                ..Default::default()
            },
        )
    }

    pub fn scale2d(sx: f64, sy: f64, pivot: Pivot) -> Self {
        Self::of(
            EditKind::Scale2d,
            TransformParams {
                scale: Some(vec![sx, sy]),
                pivot: Some(pivot),
                ..Default::default()
            },
        )
    }

    pub fn rigid3d(rotation: [[f64; 3]; 3], translation: [f64; 3], pivot: Pivot) -> Self {
        Self::of(
            EditKind::Rigid3d,
            TransformParams {
                rotation: Some(rotation),
                translation: Some(translation),
                pivot: Some(pivot),
                ..Default::default()
            },
        )
    }

    pub fn scale3d(scale: [f64; 3], pivot: Pivot) -> Self {
        Self::of(
            EditKind::Scale3d,
            TransformParams {
                scale: Some(scale.to_vec()),
                pivot: Some(pivot),
                ..Default::default()
            },
        )
    }

    fn of(kind: EditKind, params: TransformParams) -> Self {
        Self {
            kind,
            params,
            depth_source: DepthSource::default(),
        }
    }

    pub fn with_depth_source(mut self, source: DepthSource) -> Self {
        self.depth_source = source;
        self
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let t: Self = serde_json::from_str(s)?;
        t.validate()?;
        Ok(t)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("transform serializes")
    }

    /// The rotation matrix of a `rigid3d` transform.
    pub fn rotation(&self) -> Result<[[f64; 3]; 3]> {
        match (&self.params.rotation, &self.params.axis_angle) {
            (Some(r), _) => Ok(*r),
            (None, Some(aa)) => rotation_about_axis(aa.axis, aa.degrees),
            (None, None) => Ok([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let DepthSource::Constant(d) = self.depth_source {
            if !(d.is_finite() && d > 0.0) {
                return Err(Error::invalid("constant depth must be positive"));
            }
        }
        let p = &self.params;
        let pivot_dim = |want: usize| -> Result<()> {
            if let Some(Pivot::Point(v)) = &p.pivot {
                if v.len() != want || v.iter().any(|x| !x.is_finite()) {
                    return Err(Error::invalid(format!("pivot must have {want} finite coordinates")));
                }
            }
            Ok(())
        };
        match self.kind {
            EditKind::Translate2d => {
                let o = p.offset.ok_or_else(|| Error::invalid("translate2d needs params.offset"))?;
                if o.iter().any(|v| !v.is_finite()) {
                    return Err(Error::invalid("offset must be finite"));
                }
            }
            EditKind::Scale2d => {
                positive_scale(p.scale.as_deref().unwrap_or(&[]), 2)?;
                pivot_dim(2)?;
            }
            EditKind::Rigid3d => {
                check_rotation(&self.rotation()?)?;
                if p.translation.is_some_and(|t| t.iter().any(|v| !v.is_finite())) {
                    return Err(Error::invalid("translation must be finite"));
                }
                pivot_dim(3)?;
            }
            EditKind::Scale3d => {
                positive_scale(p.scale.as_deref().unwrap_or(&[]), 3)?;
                pivot_dim(3)?;
            }
            EditKind::Remove | EditKind::Identity => {}
        }
        Ok(())
    }

    /// Replaces an [`Pivot::ObjectCentroid`] pivot by an explicit point
    /// computed from the object mask (and depth, for 3D kinds).
    pub fn resolve_pivot(
        &self,
        object: &Raster,
        depth: &Raster,
        intrinsics: &CameraIntrinsics,
    ) -> Result<Self> {
        if self.params.pivot != Some(Pivot::ObjectCentroid) {
            return Ok(self.clone());
        }
        let bits = object.to_bools();
        let w = object.width();
        let mut sum = [0.0; 3];
        let mut n = 0.0;
        for (i, _) in bits.iter().enumerate().filter(|(_, &b)| b) {
            let (x, y) = ((i % w) as f64, (i / w) as f64);
            let p = if self.kind.is_3d() {
                intrinsics.back_project(x, y, depth.data()[i * depth.channels()])
            } else {
                [x, y, 0.0]
            };
            for k in 0..3 {
                sum[k] += p[k];
            }
            n += 1.0;
        }
        if n == 0.0 {
            return Err(Error::EmptyMask("object mask needed to place the pivot"));
        }
        let c: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let mut out = self.clone();
        out.params.pivot = Some(Pivot::Point(if self.kind.is_3d() {
            c
        } else {
            c[..2].to_vec()
        }));
        Ok(out)
    }

    fn pivot_point(&self, dim: usize) -> Result<Vec<f64>> {
        match &self.params.pivot {
            None | Some(Pivot::Origin) => Ok(vec![0.0; dim]),
            Some(Pivot::Point(v)) => Ok(v.clone()),
            Some(Pivot::ObjectCentroid) => Err(Error::invalid(
                "object-centroid pivot must be resolved against a mask first",
            )),
        }
    }

    pub(crate) fn resolve_2d(&self) -> Result<Resolved2d> {
        self.validate()?;
        match self.kind {
            EditKind::Identity => Ok(Resolved2d::Identity),
            EditKind::Remove => Ok(Resolved2d::Remove),
            EditKind::Translate2d => Ok(Resolved2d::Affine {
                scale: [1.0, 1.0],
                offset: self.params.offset.expect("validated"),
            }),
            EditKind::Scale2d => {
                let s = self.params.scale.as_ref().expect("validated");
                let p = self.pivot_point(2)?;
                // target = p + s (u − p)
                Ok(Resolved2d::Affine {
                    scale: [s[0], s[1]],
                    offset: [p[0] * (1.0 - s[0]), p[1] * (1.0 - s[1])],
                })
            }
            k @ (EditKind::Rigid3d | EditKind::Scale3d) => {
                Err(Error::UnsupportedTransform(k.name()))
            }
        }
    }

    pub(crate) fn resolve_3d(&self) -> Result<Resolved3d> {
        self.validate()?;
        match self.kind {
            EditKind::Identity => Ok(Resolved3d::Identity),
            EditKind::Remove => Ok(Resolved3d::Remove),
            EditKind::Rigid3d => {
                let r = self.rotation()?;
                let t = self.params.translation.unwrap_or([0.0; 3]);
                let p = self.pivot_point(3)?;
                // X' = R (X − p) + p + t
                let mut offset = [0.0; 3];
                for i in 0..3 {
                    offset[i] = p[i] + t[i] - (0..3).map(|k| r[i][k] * p[k]).sum::<f64>();
                }
                Ok(Resolved3d::Map { linear: r, offset })
            }
            EditKind::Scale3d => {
                let s = self.params.scale.as_ref().expect("validated");
                let p = self.pivot_point(3)?;
                let mut linear = [[0.0; 3]; 3];
                let mut offset = [0.0; 3];
                for i in 0..3 {
                    linear[i][i] = s[i];
                    offset[i] = p[i] * (1.0 - s[i]);
                }
                Ok(Resolved3d::Map { linear, offset })
            }
            k @ (EditKind::Translate2d | EditKind::Scale2d) => {
                Err(Error::UnsupportedTransform(k.name()))
            }
        }
    }
}
