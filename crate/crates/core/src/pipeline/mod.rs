//! End-to-end editing: inversion, the dual reference/edit rollout with
//! shared attention and optimization, decoding, and the evaluation helpers.

mod codec;
mod config;
mod edit;
mod job;
mod metric;
mod preview;

pub use codec::{luminance, psnr, LatentCodec};
pub use config::EditConfig;
pub use edit::{
    check_image_dims, edit_rollout, invert_image, prepare_geometry, run_edit, EditGeometry, EditOutputs, Progress, RolloutOutput,
    StepRecord,
};
pub use job::{JobState, JobSummary};
pub use metric::{fill_from_background, naive_warp_baseline, warp_error};
pub use preview::{preview, Preview};
