//! Training and optimization jobs.
//!
//! A job runs on a blocking worker thread. Its status lives in memory for
//! cheap polling and is written to the store on every state change, so a
//! restart can tell finished jobs from interrupted ones.

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use chrono::{DateTime, Utc};
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::error::{ApiError, ApiResult, ErrorBody};
use crate::store::{Kind, Store};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum JobKind {
    Train,
    Optimize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
    Cancelled,
}

impl JobState {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Done | JobState::Failed | JobState::Cancelled)
    }

    /// `queued -> running -> {done, failed, cancelled}`; queued jobs may
    /// also fail or be cancelled before they start.
    pub fn can_become(self, next: JobState) -> bool {
        match self {
            JobState::Queued => next != JobState::Queued && next != JobState::Done,
            JobState::Running => next.is_terminal(),
            _ => false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PartialMetrics {
    Training { epoch: usize, epochs: usize, train_loss: f64, val_loss: f64 },
    Optimization { iteration: usize, iterations: usize, total: f64, best_total: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct JobStatus {
    pub id: String,
    pub kind: JobKind,
    pub state: JobState,
    pub progress: f64,
    /// Entity the job works on: a dataset for training, a model for
    /// optimization. At most one job runs per subject.
    pub subject_id: String,
    /// Id of the entity the job produces.
    pub result_id: String,
    pub partial: Option<PartialMetrics>,
    pub error: Option<ErrorBody>,
    pub created_at: DateTime<Utc>,
    pub updated_at: DateTime<Utc>,
}

pub struct JobHandle {
    status: Mutex<JobStatus>,
    cancel: AtomicBool,
}

impl JobHandle {
    pub fn status(&self) -> JobStatus {
        self.status.lock().unwrap().clone()
    }

    pub fn cancel_requested(&self) -> bool {
        self.cancel.load(Ordering::Relaxed)
    }

    pub fn report(&self, progress: f64, partial: PartialMetrics) {
        let mut s = self.status.lock().unwrap();
        s.progress = progress.clamp(0.0, 1.0);
        s.partial = Some(partial);
        s.updated_at = Utc::now();
    }
}

pub struct Jobs {
    handles: RwLock<HashMap<String, Arc<JobHandle>>>,
    /// Subjects with a queued or running job.
    busy: Mutex<HashMap<String, String>>,
}

impl Jobs {
    /// Loads persisted jobs; anything left queued or running was cut off
    /// by a restart and is marked failed.
    pub fn recover(store: &Store) -> ApiResult<Jobs> {
        let mut handles = HashMap::new();
        for mut status in store.list::<JobStatus>(Kind::Job)? {
            if !status.state.is_terminal() {
                status.state = JobState::Failed;
                status.error = Some(ErrorBody {
                    code: "internal".into(),
                    key: "job.interrupted".into(),
                    message: "interrupted".into(),
                    field_path: None,
                });
                status.updated_at = Utc::now();
                store.put(Kind::Job, &status.id, &status)?;
            }
            let id = status.id.clone();
            handles.insert(id, Arc::new(JobHandle { status: Mutex::new(status), cancel: AtomicBool::new(false) }));
        }
        Ok(Jobs { handles: RwLock::new(handles), busy: Mutex::new(HashMap::new()) })
    }

    /// Registers a queued job, refusing a second active job per subject.
    pub fn create(&self, store: &Store, kind: JobKind, subject_id: &str, result_id: &str) -> ApiResult<Arc<JobHandle>> {
        let mut busy = self.busy.lock().unwrap();
        if let Some(other) = busy.get(subject_id) {
            return Err(ApiError::conflict(
                "job.subject_busy",
                format!("job `{other}` is already running on `{subject_id}`"),
            ));
        }
        let now = Utc::now();
        let status = JobStatus {
            id: format!("job-{}", uuid::Uuid::new_v4().simple()),
            kind,
            state: JobState::Queued,
            progress: 0.0,
            subject_id: subject_id.to_string(),
            result_id: result_id.to_string(),
            partial: None,
            error: None,
            created_at: now,
            updated_at: now,
        };
        store.put(Kind::Job, &status.id, &status)?;
        busy.insert(subject_id.to_string(), status.id.clone());
        let handle = Arc::new(JobHandle { status: Mutex::new(status.clone()), cancel: AtomicBool::new(false) });
        self.handles.write().unwrap().insert(status.id, handle.clone());
        Ok(handle)
    }

    pub fn transition(&self, store: &Store, handle: &JobHandle, next: JobState, error: Option<ErrorBody>) -> ApiResult<()> {
        let snapshot = {
            let mut s = handle.status.lock().unwrap();
            if !s.state.can_become(next) {
                return Err(ApiError::conflict(
                    "job.illegal_transition",
                    format!("job `{}` cannot go from {:?} to {next:?}", s.id, s.state),
                ));
            }
            s.state = next;
            if next == JobState::Done {
                s.progress = 1.0;
            }
            s.error = error;
            s.updated_at = Utc::now();
            s.clone()
        };
        store.put(Kind::Job, &snapshot.id, &snapshot)?;
        if next.is_terminal() {
            self.busy.lock().unwrap().remove(&snapshot.subject_id);
        }
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<Arc<JobHandle>> {
        self.handles.read().unwrap().get(id).cloned()
    }

    pub fn list(&self) -> Vec<JobStatus> {
        let mut all: Vec<JobStatus> = self.handles.read().unwrap().values().map(|h| h.status()).collect();
        all.sort_by(|a, b| a.created_at.cmp(&b.created_at).then_with(|| a.id.cmp(&b.id)));
        all
    }

    pub fn request_cancel(&self, id: &str) -> ApiResult<JobStatus> {
        let handle = self.get(id).ok_or_else(|| ApiError::not_found("job", id))?;
        let status = handle.status();
        if status.state.is_terminal() {
            return Err(ApiError::conflict("job.finished", format!("job `{id}` has already finished")));
        }
        handle.cancel.store(true, Ordering::Relaxed);
        Ok(handle.status())
    }
}
