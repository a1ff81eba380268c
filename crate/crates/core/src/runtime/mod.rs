//! The broker's workers: scheduling with dispatch, job monitoring, service
//! monitoring, and the orchestrator that runs them.

pub mod bench;
mod dispatch;
pub mod events;
mod monitor;
mod report;
mod run;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::{secs_to_ms, Clock};
use crate::exec::{ExecError, Executor, SimConfig};
use crate::interp::InterpError;
use crate::model::{
    AdapterKind, ApplicationContext, Credential, Diagnostic, ExpandError, IllegalTransition, Job, JobState, StagingMode,
    TransitionEvent,
};
use crate::sched::{PolicyKind, Scheduler};
use crate::store::{ActiveSet, Store, StoreError};

pub use events::{EventBus, JobEvent, Subscription, DEFAULT_LISTENER_CAPACITY};
pub use monitor::verify_completion;
pub use report::{status, JobRow, MetricSummary, RunReport, StatusSnapshot};
pub use run::{Driver, RunEnv};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Interp(#[from] InterpError),
    #[error("invalid application: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<Diagnostic>),
    #[error("invalid run configuration: {0}")]
    Config(String),
    #[error("credential {0} was not supplied")]
    MissingCredential(String),
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error(transparent)]
    Expand(#[from] ExpandError),
    #[error(transparent)]
    Illegal(#[from] IllegalTransition),
    #[error("worker {0} panicked")]
    WorkerPanic(String),
    #[error("I/O: {0}")]
    Io(#[from] std::io::Error),
}

impl RunError {
    /// Whether the run never got as far as dispatching anything.
    pub fn is_startup(&self) -> bool {
        matches!(
            self,
            RunError::Interp(_)
                | RunError::Invalid(_)
                | RunError::Config(_)
                | RunError::MissingCredential(_)
                | RunError::Exec(_)
                | RunError::Expand(_)
                | RunError::Store(StoreError::Locked(_) | StoreError::NoSuchInstance(_) | StoreError::MissingCredential(..))
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClockMode {
    /// Virtual when every compute server is simulated, wall time otherwise.
    #[default]
    Auto,
    Virtual,
    Real,
}

/// User-tunable parameters of one run. Persisted with the run so that
/// recovery continues with the same settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Scheduling policy; derived from the application's optimization goal when unset.
    pub policy: Option<PolicyKind>,
    pub active_set: usize,
    pub poll_interval_s: f64,
    pub poll_retries: u32,
    pub max_attempts: u32,
    /// Service probe interval; five poll intervals when unset.
    pub probe_interval_s: Option<f64>,
    /// Overrides every server's staging mode.
    pub staging: Option<StagingMode>,
    /// Overrides every server's adapter.
    pub adapter: Option<AdapterKind>,
    pub out_dir: PathBuf,
    pub store_dir: PathBuf,
    /// Base directory for local-adapter workdirs; `<out_dir>/work` when unset.
    pub work_dir: Option<PathBuf>,
    /// Directory relative broker-local paths in the application resolve against.
    pub base_dir: PathBuf,
    pub op_timeout_s: f64,
    pub bootstrap_s: f64,
    /// Dispatch-failure cool-down, in poll intervals.
    pub cooldown_polls: f64,
    /// Give up on unplaceable work after this long without progress.
    pub stall_timeout_s: f64,
    pub clock: ClockMode,
    /// fsync every store write.
    pub fsync: bool,
    pub sim: Option<SimConfig>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            policy: None,
            active_set: 100,
            poll_interval_s: 12.0,
            poll_retries: 3,
            max_attempts: 3,
            probe_interval_s: None,
            staging: None,
            adapter: None,
            out_dir: PathBuf::from("broker-out"),
            store_dir: PathBuf::from("broker-store"),
            work_dir: None,
            base_dir: PathBuf::from("."),
            op_timeout_s: 30.0,
            bootstrap_s: 60.0,
            cooldown_polls: 2.0,
            stall_timeout_s: 3600.0,
            clock: ClockMode::Auto,
            fsync: true,
            sim: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), RunError> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(RunError::Config(format!("{name} must be positive, got {v}")))
            }
        };
        if self.active_set == 0 {
            return Err(RunError::Config("active_set must be positive".into()));
        }
        if self.poll_retries == 0 || self.max_attempts == 0 {
            return Err(RunError::Config("poll_retries and max_attempts must be positive".into()));
        }
        positive("poll_interval_s", self.poll_interval_s)?;
        positive("probe_interval_s", self.probe_interval_s())?;
        positive("op_timeout_s", self.op_timeout_s)?;
        positive("bootstrap_s", self.bootstrap_s)?;
        positive("stall_timeout_s", self.stall_timeout_s)?;
        if self.cooldown_polls.is_nan() || self.cooldown_polls < 0.0 {
            return Err(RunError::Config("cooldown_polls must not be negative".into()));
        }
        Ok(())
    }

    pub fn probe_interval_s(&self) -> f64 {
        self.probe_interval_s.unwrap_or(5.0 * self.poll_interval_s)
    }

    pub fn poll_interval_ms(&self) -> u64 {
        secs_to_ms(self.poll_interval_s)
    }

    pub fn work_dir(&self) -> PathBuf {
        self.work_dir.clone().unwrap_or_else(|| self.out_dir.join("work"))
    }

    /// Local directory receiving a job's retrieved files.
    pub fn result_dir(&self, job_id: &str) -> PathBuf {
        self.out_dir.join("results").join(job_id)
    }
}

/// What is persisted as the store's config record.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct PersistedConfig {
    run: RunConfig,
    run_start_ms: u64,
}

struct SchedState {
    scheduler: Scheduler,
    active: ActiveSet,
    max_batch: usize,
}

#[derive(Default)]
struct MonState {
    /// Next poll instant per job.
    due: BTreeMap<String, u64>,
    /// Consecutive poll failures per job.
    failures: BTreeMap<String, u32>,
    next_probe_ms: u64,
}

/// Shared state of one broker instance. The workers coordinate through the
/// store; the rest is per-worker bookkeeping.
pub struct Runtime {
    store: Arc<Store>,
    exec: Executor,
    clock: Arc<dyn Clock>,
    driver: Driver,
    cfg: RunConfig,
    ctx: ApplicationContext,
    creds: Vec<Credential>,
    bus: EventBus,
    run_start_ms: u64,
    sched: Mutex<SchedState>,
    mon: Mutex<MonState>,
    last_progress_ms: AtomicU64,
    recovered: Vec<String>,
}

impl std::fmt::Debug for Runtime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Runtime").field("instance", &self.store.instance_id()).finish()
    }
}

fn relock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|p| p.into_inner())
}

impl Runtime {
    pub fn store(&self) -> &Store {
        &self.store
    }

    pub fn instance_id(&self) -> &str {
        self.store.instance_id()
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn context(&self) -> &ApplicationContext {
        &self.ctx
    }

    pub fn executor(&self) -> &Executor {
        &self.exec
    }

    pub fn bus(&self) -> &EventBus {
        &self.bus
    }

    pub fn now_ms(&self) -> u64 {
        self.clock.now_ms()
    }

    pub fn run_start_ms(&self) -> u64 {
        self.run_start_ms
    }

    pub fn register_listener(&self, capacity: usize) -> Arc<Subscription> {
        self.bus.register_listener(capacity)
    }

    /// Largest number of jobs dispatched in one scheduling tick so far.
    pub fn max_dispatch_batch(&self) -> usize {
        relock(&self.sched).max_batch
    }

    pub fn active_set_len(&self) -> usize {
        relock(&self.sched).active.len()
    }

    fn max_attempts(&self) -> u32 {
        self.cfg.max_attempts
    }

    /// Persists `job`, then publishes the state change if there was one.
    fn commit(&self, from: JobState, job: &Job, at_ms: u64, detail: Option<String>, sink: &mut Vec<JobEvent>) -> Result<(), RunError> {
        self.store.put_job(job)?;
        if from != job.state {
            self.last_progress_ms.fetch_max(at_ms, Ordering::SeqCst);
            let ev = JobEvent { job_id: job.job_id.clone(), old_state: from, new_state: job.state, at_ms, detail };
            sink.push(ev.clone());
            self.bus.publish(ev);
        }
        Ok(())
    }

    /// Applies `event`, lets `edit` adjust the result, and commits it.
    fn step_with(
        &self,
        job: Job,
        event: TransitionEvent,
        at_ms: u64,
        detail: Option<String>,
        sink: &mut Vec<JobEvent>,
        edit: impl FnOnce(&mut Job),
    ) -> Result<Job, RunError> {
        let from = job.state;
        let mut next = job;
        next.apply(event, at_ms)?;
        edit(&mut next);
        self.commit(from, &next, at_ms, detail, sink)?;
        Ok(next)
    }

    fn step(&self, job: Job, event: TransitionEvent, at_ms: u64, detail: Option<String>, sink: &mut Vec<JobEvent>) -> Result<Job, RunError> {
        self.step_with(job, event, at_ms, detail, sink, |_| {})
    }

    /// Failure edge followed by Reset unless the job has no attempt left.
    fn fail_and_reset(&self, job: Job, reason: String, at_ms: u64, sink: &mut Vec<JobEvent>) -> Result<Job, RunError> {
        tracing::warn!(job = %job.job_id, attempt = job.attempts, %reason, "job failed");
        let failed = if job.state == JobState::Failed {
            job
        } else {
            self.step(job, TransitionEvent::Failure(reason.clone()), at_ms, Some(reason), sink)?
        };
        relock(&self.mon).failures.remove(&failed.job_id);
        if failed.is_terminal(self.max_attempts()) {
            return Ok(failed);
        }
        self.step(failed, TransitionEvent::Reset, at_ms, Some("rescheduling".into()), sink)
    }

    /// Marks a job FAILED for good, whatever attempts it has left.
    fn abandon(&self, job: Job, reason: &str, at_ms: u64, sink: &mut Vec<JobEvent>) -> Result<Job, RunError> {
        let from = job.state;
        let mut next = job;
        if next.state != JobState::Failed {
            next.apply(TransitionEvent::Failure(reason.into()), at_ms)?;
        }
        next.abandoned = true;
        next.failure_reason = Some(reason.to_string());
        self.commit(from, &next, at_ms, Some(reason.to_string()), sink)?;
        relock(&self.mon).due.remove(&next.job_id);
        Ok(next)
    }

    /// Abandons every job that is not yet terminal.
    fn abandon_unfinished(&self, reason: &str, at_ms: u64) -> Result<usize, RunError> {
        let max = self.max_attempts();
        let ids: Vec<String> = self
            .store
            .job_index()
            .into_iter()
            .filter(|(_, e)| !e.is_terminal(max))
            .map(|(id, _)| id)
            .collect();
        let mut sink = Vec::new();
        for id in &ids {
            if let Some(job) = self.store.get_job(id)? {
                self.abandon(job, reason, at_ms, &mut sink)?;
            }
        }
        Ok(ids.len())
    }

    pub fn is_finished(&self) -> bool {
        self.store.terminal_count(self.max_attempts()) == self.store.job_count()
    }

    fn deadline_ms(&self) -> Option<u64> {
        self.ctx.qos.deadline_s.map(|d| self.run_start_ms + secs_to_ms(d))
    }

    fn credential(&self, id: Option<&str>) -> Option<&Credential> {
        let id = id?;
        self.creds.iter().find(|c| c.cred_id == id)
    }

    fn base_dir(&self) -> &Path {
        &self.cfg.base_dir
    }
}
