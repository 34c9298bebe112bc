use serde::{Deserialize, Serialize};

use crate::optim::LossRecord;

/// Lifecycle of an edit job. States only move forward.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Queued,
    Inverting,
    Editing,
    Done,
    Failed,
}

impl JobState {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Done | JobState::Failed)
    }

    /// Whether moving from `self` to `next` is allowed.
    pub fn can_become(self, next: JobState) -> bool {
        !self.is_terminal() && next > self
    }
}

/// What a poll of a job returns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobSummary {
    pub state: JobState,
    /// Fraction of denoising steps finished.
    pub progress: f64,
    pub loss_curves: Vec<LossRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transitions_are_monotone() {
        use JobState::*;
        assert!(Queued.can_become(Inverting));
        assert!(Queued.can_become(Editing));
        assert!(Editing.can_become(Failed));
        assert!(Editing.can_become(Done));
        assert!(!Editing.can_become(Inverting));
        assert!(!Done.can_become(Failed));
        assert!(!Failed.can_become(Done));
        assert_eq!(serde_json::to_string(&Inverting).unwrap(), "\"inverting\"");
    }
}
