use crate::error::{Error, Result};
use crate::geometry::{build_field, mask_algebra, CameraIntrinsics, EditKind, EditTransform, MaskSet};
use crate::raster::Raster;

use super::metric::naive_warp_baseline;

/// Geometry-only view of an edit: the naive warp and the region masks.
#[derive(Clone, Debug)]
pub struct Preview {
    pub warp_overlay: Raster,
    pub masks: MaskSet,
}

/// Builds the field and masks for `transform` without touching the model.
pub fn preview(
    image: &Raster,
    m_obj: &Raster,
    depth: Option<&Raster>,
    transform: &EditTransform,
    intrinsics: Option<&CameraIntrinsics>,
) -> Result<Preview> {
    transform.validate()?;
    let (h, w) = image.dims();
    m_obj.ensure_dims(h, w, "object mask")?;
    if transform.kind != EditKind::Identity && m_obj.is_empty_mask() {
        return Err(Error::EmptyMask("object mask"));
    }
    let field = build_field(transform, h, w, depth, intrinsics, Some(m_obj))?;
    let masks = mask_algebra(m_obj, &field)?;
    let warp_overlay = naive_warp_baseline(image, m_obj, &field)?;
    Ok(Preview { warp_overlay, masks })
}
