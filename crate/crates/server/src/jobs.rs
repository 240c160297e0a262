use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use coopadapt_api::{ErrorKind, JobAccepted, JobState, JobStatus};
use coopadapt_core::training::EpochRecord;
use coopadapt_core::Error;
use tokio::sync::Semaphore;

use crate::runs::Plan;

struct Entry {
    status: JobStatus,
    cancel: Arc<AtomicBool>,
}

/// In-memory table of submitted jobs.
pub struct JobRegistry {
    next: AtomicU64,
    jobs: Arc<Mutex<BTreeMap<u64, Entry>>>,
    slots: Arc<Semaphore>,
}

impl JobRegistry {
    pub fn new(max_running: usize) -> Self {
        JobRegistry {
            next: AtomicU64::new(1),
            jobs: Arc::new(Mutex::new(BTreeMap::new())),
            slots: Arc::new(Semaphore::new(max_running.max(1))),
        }
    }

    pub(crate) fn submit(&self, plan: Plan) -> JobAccepted {
        let id = self.next.fetch_add(1, Ordering::Relaxed);
        let cancel = Arc::new(AtomicBool::new(false));
        let status = JobStatus {
            id,
            kind: plan.kind,
            state: JobState::Queued,
            run_dir: plan.run_dir.clone(),
            records: Vec::new(),
            result: None,
            error: None,
        };
        self.jobs.lock().unwrap().insert(
            id,
            Entry {
                status,
                cancel: cancel.clone(),
            },
        );
        let jobs = self.jobs.clone();
        let slots = self.slots.clone();
        let work = plan.work;
        tokio::spawn(async move {
            let _permit = slots.acquire_owned().await.expect("semaphore never closes");
            if cancel.load(Ordering::Relaxed) {
                return;
            }
            update(&jobs, id, |s| s.state = JobState::Running);
            let sink_jobs = jobs.clone();
            let flag = cancel.clone();
            let joined = tokio::task::spawn_blocking(move || {
                let mut sink = move |r: &EpochRecord| update(&sink_jobs, id, |s| s.records.push(r.clone()));
                work(&flag, &mut sink)
            })
            .await;
            update(&jobs, id, |s| match joined {
                Ok(Ok(result)) => {
                    s.state = JobState::Succeeded;
                    s.result = Some(result);
                }
                Ok(Err(Error::Cancelled)) => s.state = JobState::Cancelled,
                Ok(Err(e)) => {
                    log::warn!("job {id} failed: {e}");
                    s.state = JobState::Failed;
                    s.error = Some(crate::classify(&e));
                }
                Err(e) => {
                    s.state = JobState::Failed;
                    s.error = Some(coopadapt_api::ApiError {
                        kind: ErrorKind::Runtime,
                        message: format!("job panicked: {e}"),
                    });
                }
            });
        });
        JobAccepted {
            id,
            run_dir: plan.run_dir,
        }
    }

    pub fn status(&self, id: u64) -> Option<JobStatus> {
        self.jobs.lock().unwrap().get(&id).map(|e| e.status.clone())
    }

    pub fn list(&self) -> Vec<JobStatus> {
        self.jobs.lock().unwrap().values().map(|e| e.status.clone()).collect()
    }

    /// Requests cancellation. A queued job is cancelled at once; a running one stops at its next step.
    pub fn cancel(&self, id: u64) -> Option<JobStatus> {
        let mut jobs = self.jobs.lock().unwrap();
        let entry = jobs.get_mut(&id)?;
        entry.cancel.store(true, Ordering::Relaxed);
        if entry.status.state == JobState::Queued {
            entry.status.state = JobState::Cancelled;
        }
        Some(entry.status.clone())
    }
}

fn update(jobs: &Mutex<BTreeMap<u64, Entry>>, id: u64, f: impl FnOnce(&mut JobStatus)) {
    if let Some(e) = jobs.lock().unwrap().get_mut(&id) {
        f(&mut e.status);
    }
}
