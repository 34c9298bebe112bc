//! Request and response bodies. Images travel as base64 PNG, depth maps as
//! base64 PFM.

use geodiff::geometry::{CameraIntrinsics, EditTransform};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CreateSession {
    pub image: String,
    pub mask: String,
    #[serde(default)]
    pub depth: Option<String>,
    /// DDIM steps of the cached inversion; edits must use the same count.
    #[serde(default = "default_steps")]
    pub steps: usize,
}

fn default_steps() -> usize {
    50
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SessionCreated {
    pub session_id: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionState {
    Inverting,
    Ready,
    Failed,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SessionInfo {
    pub session_id: String,
    pub state: SessionState,
    pub height: usize,
    pub width: usize,
    pub steps: usize,
    pub error: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PreviewRequest {
    pub transform: EditTransform,
    #[serde(default)]
    pub intrinsics: Option<CameraIntrinsics>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PreviewResponse {
    pub warp_overlay: String,
    pub m_obj_t: String,
    pub m_disocc: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct JobCreated {
    pub job_id: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsEntry {
    pub step: usize,
    pub block: usize,
    pub shared: bool,
    pub y_ref_g_norm: f64,
    pub y_edit_g_norm: f64,
    pub output_norm: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct JobResult {
    pub edited: String,
    pub baseline: String,
    /// `null` when undefined, as for removals.
    pub warp_error: Option<f64>,
    pub diagnostics: Vec<DiagnosticsEntry>,
}
