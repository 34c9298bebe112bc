//! HTTP/JSON front end for editing sessions.
//!
//! A session holds one image, its object mask and optional depth. Creating
//! it starts the DDIM inversion once; every edit on the session reuses the
//! cached trajectory. Edits run as jobs on a bounded worker pool, one at a
//! time per session, and are polled until they reach `done` or `failed`.

pub mod api;
mod error;
mod state;

use std::sync::atomic::Ordering;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::IntoResponse;
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use geodiff::io::{decode_pfm, decode_png_mask, decode_png_rgb, encode_png};
use geodiff::pipeline::{check_image_dims, invert_image, preview, run_edit, EditConfig, JobState, JobSummary};
use geodiff::Raster;
use serde::de::DeserializeOwned;
use uuid::Uuid;

use api::*;
pub use error::ApiError;
pub use state::AppState;
use state::{Inversion, Job, Session};

type ApiResult<T> = Result<T, ApiError>;

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/preview", post(preview_session))
        .route("/sessions/{id}/edits", post(create_edit))
        .route("/jobs/{id}", get(get_job))
        .route("/jobs/{id}/result", get(get_result))
        .route("/jobs/{id}/attention/{step}/{block}", get(get_attention))
        .with_state(state)
}

/// Serves the API on `listener` until the process stops.
pub async fn serve(listener: tokio::net::TcpListener, state: AppState) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}

fn parse_json<T: DeserializeOwned>(body: &[u8]) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::unprocessable(format!("invalid request body: {e}")))
}

fn b64_decode(field: &str, s: &str) -> ApiResult<Vec<u8>> {
    B64.decode(s.trim())
        .map_err(|e| ApiError::unprocessable(format!("{field}: invalid base64: {e}")))
}

fn png_b64(r: &Raster) -> ApiResult<String> {
    Ok(B64.encode(encode_png(r)?))
}

async fn create_session(State(st): State<AppState>, body: Bytes) -> ApiResult<(StatusCode, Json<SessionCreated>)> {
    let req: CreateSession = parse_json(&body)?;
    let image = decode_png_rgb(&b64_decode("image", &req.image)?)?;
    let mask = decode_png_mask(&b64_decode("mask", &req.mask)?)?;
    let (h, w) = image.dims();
    mask.ensure_dims(h, w, "mask")?;
    let depth = match &req.depth {
        Some(d) => {
            let d = decode_pfm(&b64_decode("depth", d)?)?;
            d.ensure_dims(h, w, "depth")?;
            d.ensure_positive("depth")?;
            Some(d)
        }
        None => None,
    };
    if req.steps == 0 {
        return Err(ApiError::unprocessable("steps must be at least 1"));
    }
    check_image_dims(&st.0.model, &image)?;

    let id = Uuid::new_v4();
    let session = Arc::new(Session {
        image,
        mask,
        depth,
        steps: req.steps,
        inversion: std::sync::RwLock::new(Inversion::Running),
        edit_slot: tokio::sync::Mutex::new(()),
    });
    st.0.sessions.write().unwrap().insert(id, session.clone());

    let task_state = st.clone();
    tokio::spawn(async move {
        let _permit = task_state.0.workers.acquire().await.expect("worker pool open");
        task_state.0.inversions.fetch_add(1, Ordering::SeqCst);
        let model = task_state.0.model.clone();
        let s = session.clone();
        let res = tokio::task::spawn_blocking(move || invert_image(&model, &s.image, s.steps)).await;
        let next = match res {
            Ok(Ok(t)) => Inversion::Ready(Arc::new(t)),
            Ok(Err(e)) => Inversion::Failed(e.to_string()),
            Err(e) => Inversion::Failed(format!("inversion worker failed: {e}")),
        };
        if let Inversion::Failed(e) = &next {
            tracing::warn!(session = %id, "inversion failed: {e}");
        }
        *session.inversion.write().unwrap() = next;
    });
    Ok((
        StatusCode::ACCEPTED,
        Json(SessionCreated {
            session_id: id.to_string(),
        }),
    ))
}

async fn get_session(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<SessionInfo>> {
    let s = st.session(&id).ok_or_else(|| ApiError::not_found("session"))?;
    let (state, error) = match &*s.inversion.read().unwrap() {
        Inversion::Running => (SessionState::Inverting, None),
        Inversion::Ready(_) => (SessionState::Ready, None),
        Inversion::Failed(e) => (SessionState::Failed, Some(e.clone())),
    };
    Ok(Json(SessionInfo {
        session_id: id,
        state,
        height: s.image.height(),
        width: s.image.width(),
        steps: s.steps,
        error,
    }))
}

async fn preview_session(
    State(st): State<AppState>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<Json<PreviewResponse>> {
    let s = st.session(&id).ok_or_else(|| ApiError::not_found("session"))?;
    let req: PreviewRequest = parse_json(&body)?;
    let p = preview(&s.image, &s.mask, s.depth.as_ref(), &req.transform, req.intrinsics.as_ref())?;
    Ok(Json(PreviewResponse {
        warp_overlay: png_b64(&p.warp_overlay)?,
        m_obj_t: png_b64(&p.masks.m_obj_t)?,
        m_disocc: png_b64(&p.masks.m_disocc)?,
    }))
}

async fn create_edit(
    State(st): State<AppState>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<(StatusCode, Json<JobCreated>)> {
    let session = st.session(&id).ok_or_else(|| ApiError::not_found("session"))?;
    let text = std::str::from_utf8(&body).map_err(|_| ApiError::unprocessable("body is not UTF-8"))?;
    let config = EditConfig::from_json(text)?;
    if config.steps != session.steps {
        return Err(ApiError::unprocessable(format!(
            "config asks for {} steps but the session was inverted with {}",
            config.steps, session.steps
        )));
    }
    let traj = match &*session.inversion.read().unwrap() {
        Inversion::Running => return Err(ApiError::conflict("session is still inverting")),
        Inversion::Failed(e) => return Err(ApiError::conflict(format!("session inversion failed: {e}"))),
        Inversion::Ready(t) => t.clone(),
    };
    preview(
        &session.image,
        &session.mask,
        session.depth.as_ref(),
        &config.transform,
        config.intrinsics.as_ref(),
    )?;

    let job_id = Uuid::new_v4();
    let job = Arc::new(std::sync::Mutex::new(Job::new()));
    st.0.jobs.write().unwrap().insert(job_id, job.clone());

    let task_state = st.clone();
    tokio::spawn(async move {
        let _slot = session.edit_slot.lock().await;
        let _permit = task_state.0.workers.acquire().await.expect("worker pool open");
        job.lock().unwrap().advance(JobState::Editing);
        let model = task_state.0.model.clone();
        let progress_job = job.clone();
        let session = session.clone();
        let res = tokio::task::spawn_blocking(move || {
            run_edit(
                &model,
                &session.image,
                &session.mask,
                session.depth.as_ref(),
                &config,
                Some(&traj),
                &mut |p| {
                    let mut j = progress_job.lock().unwrap();
                    j.summary.progress = p.step as f64 / p.steps as f64;
                    j.summary.loss_curves = p.loss_curves.to_vec();
                },
            )
        })
        .await;
        let mut j = job.lock().unwrap();
        match res {
            Ok(Ok(out)) => {
                j.summary.loss_curves = out.loss_curves.clone();
                j.summary.progress = 1.0;
                j.outputs = Some(Arc::new(out));
                j.advance(JobState::Done);
            }
            Ok(Err(e)) => {
                j.summary.error = Some(e.to_string());
                j.advance(JobState::Failed);
            }
            Err(e) => {
                j.summary.error = Some(format!("edit worker failed: {e}"));
                j.advance(JobState::Failed);
            }
        }
    });
    Ok((
        StatusCode::ACCEPTED,
        Json(JobCreated {
            job_id: job_id.to_string(),
        }),
    ))
}

async fn get_job(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<JobSummary>> {
    let job = st.job(&id).ok_or_else(|| ApiError::not_found("job"))?;
    let summary = job.lock().unwrap().summary.clone();
    Ok(Json(summary))
}

fn finished(job: &Job) -> ApiResult<()> {
    match job.summary.state {
        JobState::Done => Ok(()),
        JobState::Failed => Err(ApiError::conflict(format!(
            "job failed: {}",
            job.summary.error.as_deref().unwrap_or("unknown error")
        ))),
        _ => Err(ApiError::conflict("job has not finished")),
    }
}

async fn get_result(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<JobResult>> {
    let job = st.job(&id).ok_or_else(|| ApiError::not_found("job"))?;
    let out = {
        let j = job.lock().unwrap();
        finished(&j)?;
        j.outputs.clone().expect("done jobs have outputs")
    };
    let diagnostics = out
        .diagnostics
        .iter()
        .map(|d| DiagnosticsEntry {
            step: d.step,
            block: d.block,
            shared: d.shared,
            y_ref_g_norm: d.y_ref_g_norm,
            y_edit_g_norm: d.y_edit_g_norm,
            output_norm: d.output_norm,
        })
        .collect();
    Ok(Json(JobResult {
        edited: png_b64(&out.edited)?,
        baseline: png_b64(&out.baseline)?,
        warp_error: out.warp_error,
        diagnostics,
    }))
}

async fn get_attention(
    State(st): State<AppState>,
    Path((id, step, block)): Path<(String, usize, usize)>,
) -> ApiResult<impl IntoResponse> {
    let job = st.job(&id).ok_or_else(|| ApiError::not_found("job"))?;
    let j = job.lock().unwrap();
    finished(&j)?;
    let d = j
        .diagnostics(step, block)
        .ok_or_else(|| ApiError::not_found("attention record"))?;
    let png = encode_png(&d.heatmap_raster()?)?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png))
}
