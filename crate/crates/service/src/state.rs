use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use geodiff::diffnet::Denoiser;
use geodiff::guidance::BlockDiagnostics;
use geodiff::pipeline::{EditOutputs, JobState, JobSummary};
use geodiff::sampler::Trajectory;
use geodiff::Raster;
use tokio::sync::Semaphore;
use uuid::Uuid;

pub(crate) enum Inversion {
    Running,
    Ready(Arc<Trajectory>),
    Failed(String),
}

pub(crate) struct Session {
    pub image: Raster,
    pub mask: Raster,
    pub depth: Option<Raster>,
    pub steps: usize,
    pub inversion: RwLock<Inversion>,
    /// Held by the running edit; later edits queue on it.
    pub edit_slot: tokio::sync::Mutex<()>,
}

pub(crate) struct Job {
    pub summary: JobSummary,
    pub outputs: Option<Arc<EditOutputs>>,
}

impl Job {
    pub fn new() -> Self {
        Self {
            summary: JobSummary {
                state: JobState::Queued,
                progress: 0.0,
                loss_curves: Vec::new(),
                error: None,
            },
            outputs: None,
        }
    }

    /// Moves to `next` if that is a forward transition.
    pub fn advance(&mut self, next: JobState) -> bool {
        let ok = self.summary.state.can_become(next);
        if ok {
            self.summary.state = next;
        }
        ok
    }

    pub fn diagnostics(&self, step: usize, block: usize) -> Option<&BlockDiagnostics> {
        self.outputs
            .as_ref()?
            .diagnostics
            .iter()
            .find(|d| d.step == step && d.block == block)
    }
}

pub(crate) struct Inner {
    pub model: Arc<Denoiser>,
    pub sessions: RwLock<HashMap<Uuid, Arc<Session>>>,
    pub jobs: RwLock<HashMap<Uuid, Arc<Mutex<Job>>>>,
    pub workers: Semaphore,
    pub inversions: AtomicUsize,
}

/// Shared service state: the model, sessions, jobs and the worker pool.
#[derive(Clone)]
pub struct AppState(pub(crate) Arc<Inner>);

impl AppState {
    /// `workers` bounds how many inversions and edits run at once.
    pub fn new(model: Denoiser, workers: usize) -> Self {
        Self(Arc::new(Inner {
            model: Arc::new(model),
            sessions: RwLock::new(HashMap::new()),
            jobs: RwLock::new(HashMap::new()),
            workers: Semaphore::new(workers.max(1)),
            inversions: AtomicUsize::new(0),
        }))
    }

    /// Number of inversions started since the service was created.
    pub fn inversion_count(&self) -> usize {
        self.0.inversions.load(Ordering::SeqCst)
    }

    pub(crate) fn session(&self, id: &str) -> Option<Arc<Session>> {
        let id = Uuid::parse_str(id).ok()?;
        self.0.sessions.read().unwrap().get(&id).cloned()
    }

    pub(crate) fn job(&self, id: &str) -> Option<Arc<Mutex<Job>>> {
        let id = Uuid::parse_str(id).ok()?;
        self.0.jobs.read().unwrap().get(&id).cloned()
    }
}
