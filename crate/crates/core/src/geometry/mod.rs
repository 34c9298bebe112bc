//! Edit fields: where every pixel of the source image should land after the
//! user's 2D or 3D transform, plus forward splatting and the mask algebra
//! derived from it.
//!
//! All functions here are pure and operate at whatever raster resolution
//! they are given; the attention pyramid is produced with
//! [`resample_field`] and [`resample_mask`].

mod field;
mod mask;
mod resample;
mod splat;
mod transform;

pub use field::{build_field, build_field_2d, build_field_3d, EditField};
pub use mask::{mask_algebra, transform_mask, MaskSet, TransformedMask};
pub use resample::{resample_field, resample_mask, resample_mask_soft};
pub use splat::{splat, splat_with, SplatMode, Splatted};
pub use transform::{
    rotation_about_axis, AxisAngle, CameraIntrinsics, DepthSource, EditKind, EditTransform, Pivot,
    TransformParams,
};
