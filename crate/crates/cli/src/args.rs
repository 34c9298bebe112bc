use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, ValueEnum};
use geodiff::geometry::{AxisAngle, DepthSource, EditKind, EditTransform, Pivot, TransformParams};
use geodiff::io::read_pfm;
use geodiff::Raster;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum KindArg {
    Identity,
    Remove,
    Translate2d,
    Scale2d,
    Rigid3d,
    /// Rigid 3D rotation without translation.
    Rotate3d,
    Scale3d,
}

/// `--depth`: `const:<metres>` or a PFM depth map.
#[derive(Clone, Debug, PartialEq)]
pub enum DepthArg {
    Constant(f64),
    File(PathBuf),
}

impl FromStr for DepthArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.strip_prefix("const:") {
            Some(z) => z
                .parse()
                .map(DepthArg::Constant)
                .map_err(|_| format!("bad constant depth `{z}`")),
            None => Ok(DepthArg::File(s.into())),
        }
    }
}

impl DepthArg {
    pub fn source(&self) -> DepthSource {
        match self {
            DepthArg::Constant(z) => DepthSource::Constant(*z),
            DepthArg::File(_) => DepthSource::File,
        }
    }
}

/// `--pivot`: `origin`, `centroid`, or comma-separated coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct PivotArg(pub Pivot);

impl FromStr for PivotArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "origin" => Ok(PivotArg(Pivot::Origin)),
            "centroid" => Ok(PivotArg(Pivot::ObjectCentroid)),
            _ => parse_list(s).map(|v| PivotArg(Pivot::Point(v))),
        }
    }
}

/// `--axis`: `x`, `y`, `z` or `a,b,c`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AxisArg(pub [f64; 3]);

impl FromStr for AxisArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "x" => Ok(AxisArg([1.0, 0.0, 0.0])),
            "y" => Ok(AxisArg([0.0, 1.0, 0.0])),
            "z" => Ok(AxisArg([0.0, 0.0, 1.0])),
            _ => {
                let v = parse_list(s)?;
                <[f64; 3]>::try_from(v).map(AxisArg).map_err(|_| "axis needs three components".into())
            }
        }
    }
}

fn parse_list(s: &str) -> Result<Vec<f64>, String> {
    s.split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|_| format!("bad number `{p}`")))
        .collect()
}

#[derive(Clone, Debug, Args)]
pub struct TransformArgs {
    /// Edit kind. Without it the config file must supply the transform.
    #[arg(long, value_enum)]
    pub kind: Option<KindArg>,
    /// Horizontal offset in pixels (translate2d).
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    pub dx: f64,
    /// Vertical offset in pixels (translate2d).
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    pub dy: f64,
    /// Scale factors: one value for uniform, else two (2D) or three (3D).
    #[arg(long, value_delimiter = ',')]
    pub scale: Option<Vec<f64>>,
    /// Rotation angle in degrees (rigid3d, rotate3d).
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    pub angle: f64,
    #[arg(long, default_value = "z")]
    pub axis: AxisArg,
    /// Translation in metres as `x,y,z` (rigid3d).
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub translation: Option<Vec<f64>>,
    /// `origin`, `centroid` or explicit coordinates. Defaults to the object centroid.
    #[arg(long, default_value = "centroid")]
    pub pivot: PivotArg,
    /// `const:<metres>` or a PFM depth map.
    #[arg(long)]
    pub depth: Option<DepthArg>,
}

impl TransformArgs {
    /// The transform described by the flags, or `None` without `--kind`.
    pub fn to_transform(&self) -> Result<Option<EditTransform>, String> {
        let Some(kind) = self.kind else {
            return Ok(None);
        };
        let pivot = self.pivot.0.clone();
        let scale = |n: usize| -> Result<Vec<f64>, String> {
            match self.scale.as_deref() {
                None => Err("--scale is required for this kind".into()),
                Some([s]) => Ok(vec![*s; n]),
                Some(v) if v.len() == n => Ok(v.to_vec()),
                Some(v) => Err(format!("--scale takes 1 or {n} values, got {}", v.len())),
            }
        };
        let mut t = match kind {
            KindArg::Identity => EditTransform::identity(),
            KindArg::Remove => EditTransform::remove(),
            KindArg::Translate2d => EditTransform::translate2d(self.dx, self.dy),
            KindArg::Scale2d => {
                let s = scale(2)?;
                EditTransform::scale2d(s[0], s[1], pivot)
            }
            KindArg::Scale3d => {
                let s = scale(3)?;
                EditTransform::scale3d([s[0], s[1], s[2]], pivot)
            }
            KindArg::Rigid3d | KindArg::Rotate3d => {
                let translation = match (kind, self.translation.as_deref()) {
                    (KindArg::Rotate3d, Some(_)) => return Err("rotate3d takes no --translation; use rigid3d".into()),
                    (_, None) => [0.0; 3],
                    (_, Some(&[x, y, z])) => [x, y, z],
                    (_, Some(_)) => return Err("--translation needs three components".into()),
                };
                EditTransform {
                    kind: EditKind::Rigid3d,
                    params: TransformParams {
                        axis_angle: Some(AxisAngle {
                            axis: self.axis.0,
                            degrees: self.angle,
                        }),
                        translation: Some(translation),
                        pivot: Some(pivot),
                        ..Default::default()
                    },
                    depth_source: DepthSource::default(),
                }
            }
        };
        if let Some(d) = &self.depth {
            t = t.with_depth_source(d.source());
        }
        Ok(Some(t))
    }

    /// Reads the depth map named by `--depth`, if any.
    pub fn depth_raster(&self) -> geodiff::Result<Option<Raster>> {
        match &self.depth {
            Some(DepthArg::File(p)) => read_pfm(p).map(Some),
            _ => Ok(None),
        }
    }
}
