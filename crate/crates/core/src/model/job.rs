//! Jobs and their lifecycle state machine.

use std::cell::Cell;
use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::task::Value;
use super::Mapping;

/// Lifecycle state of a job.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum JobState {
    Ready,
    Scheduled,
    StageIn,
    Submitted,
    Pending,
    Active,
    StageOut,
    Done,
    Failed,
}

impl JobState {
    pub const ALL: [JobState; 9] = [
        JobState::Ready,
        JobState::Scheduled,
        JobState::StageIn,
        JobState::Submitted,
        JobState::Pending,
        JobState::Active,
        JobState::StageOut,
        JobState::Done,
        JobState::Failed,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            JobState::Ready => "READY",
            JobState::Scheduled => "SCHEDULED",
            JobState::StageIn => "STAGE_IN",
            JobState::Submitted => "SUBMITTED",
            JobState::Pending => "PENDING",
            JobState::Active => "ACTIVE",
            JobState::StageOut => "STAGE_OUT",
            JobState::Done => "DONE",
            JobState::Failed => "FAILED",
        }
    }

    /// States in which the job holds a remote handle and is watched by the job monitor.
    pub fn is_remote(self) -> bool {
        matches!(
            self,
            JobState::Submitted | JobState::Pending | JobState::Active | JobState::StageOut
        )
    }

    /// States that occupy an admission slot on the mapped server.
    pub fn occupies_slot(self) -> bool {
        matches!(self, JobState::Scheduled | JobState::StageIn) || self.is_remote()
    }
}

impl fmt::Display for JobState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for JobState {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        JobState::ALL
            .into_iter()
            .find(|st| st.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown job state {s:?}"))
    }
}

/// Inputs to [`Job::transition`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransitionEvent {
    Scheduled,
    StageInStarted,
    HandleObtained,
    Queued,
    Started,
    ExecutionComplete,
    OutputsVerified,
    Failure(String),
    Reset,
}

impl TransitionEvent {
    /// One representative of each event kind, for exhaustive checks.
    pub fn kinds() -> [TransitionEvent; 9] {
        [
            TransitionEvent::Scheduled,
            TransitionEvent::StageInStarted,
            TransitionEvent::HandleObtained,
            TransitionEvent::Queued,
            TransitionEvent::Started,
            TransitionEvent::ExecutionComplete,
            TransitionEvent::OutputsVerified,
            TransitionEvent::Failure(String::from("injected")),
            TransitionEvent::Reset,
        ]
    }

    pub fn name(&self) -> &'static str {
        match self {
            TransitionEvent::Scheduled => "Scheduled",
            TransitionEvent::StageInStarted => "StageInStarted",
            TransitionEvent::HandleObtained => "HandleObtained",
            TransitionEvent::Queued => "Queued",
            TransitionEvent::Started => "Started",
            TransitionEvent::ExecutionComplete => "ExecutionComplete",
            TransitionEvent::OutputsVerified => "OutputsVerified",
            TransitionEvent::Failure(_) => "Failure",
            TransitionEvent::Reset => "Reset",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("illegal transition: {event} in state {state}")]
pub struct IllegalTransition {
    pub state: JobState,
    pub event: &'static str,
}

/// Target state of the edge `(state, event)`, or `None` when no such edge exists.
pub fn next_state(state: JobState, event: &TransitionEvent) -> Option<JobState> {
    use JobState::*;
    use TransitionEvent as E;
    match (state, event) {
        (Ready, E::Scheduled) => Some(Scheduled),
        (Scheduled, E::StageInStarted) => Some(StageIn),
        (StageIn, E::HandleObtained) => Some(Submitted),
        (Submitted, E::Queued) => Some(Pending),
        (Submitted | Pending, E::Started) => Some(Active),
        (Active, E::ExecutionComplete) => Some(StageOut),
        (StageOut, E::OutputsVerified) => Some(Done),
        (Done | Failed, E::Failure(_)) => None,
        (_, E::Failure(_)) => Some(Failed),
        (Failed, E::Reset) => Some(Ready),
        _ => None,
    }
}

/// Handle on a job submitted to an execution service.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RemoteHandle {
    pub adapter: super::AdapterKind,
    pub token: String,
    pub workdir: String,
}

/// Per-job measurements accumulated by the workers.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct JobMetrics {
    /// Number of status queries issued in the current attempt.
    pub polls: u32,
    /// Total time spent in status queries, milliseconds.
    pub query_ms: u64,
    /// Time spent retrieving outputs and cleaning up, milliseconds.
    pub termination_ms: u64,
    /// Measured compute span of the last completed execution, milliseconds.
    pub compute_ms: Option<u64>,
}

/// One concrete instantiation of a task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub job_id: String,
    pub task_id: String,
    pub bindings: BTreeMap<String, Value>,
    pub state: JobState,
    pub attempts: u32,
    pub mapping: Option<Mapping>,
    pub remote_handle: Option<RemoteHandle>,
    pub timestamps: BTreeMap<JobState, u64>,
    pub failure_reason: Option<String>,
    /// Attempt number for which a submission is about to be (or was) sent.
    pub submit_intent: Option<u32>,
    #[serde(default)]
    pub metrics: JobMetrics,
    /// Set when the broker gives up on a FAILED job regardless of attempts
    /// left (deadline expired or no feasible placement).
    #[serde(default)]
    pub abandoned: bool,
    #[serde(skip)]
    live: LiveJob,
}

impl Job {
    pub fn new(job_id: impl Into<String>, task_id: impl Into<String>, bindings: BTreeMap<String, Value>) -> Self {
        Job {
            job_id: job_id.into(),
            task_id: task_id.into(),
            bindings,
            state: JobState::Ready,
            attempts: 0,
            mapping: None,
            remote_handle: None,
            timestamps: BTreeMap::new(),
            failure_reason: None,
            submit_intent: None,
            metrics: JobMetrics::default(),
            abandoned: false,
            live: LiveJob::new(),
        }
    }

    /// Applies `event` at time `at_ms` and returns the resulting job.
    pub fn transition(&self, event: TransitionEvent, at_ms: u64) -> Result<Job, IllegalTransition> {
        next_state(self.state, &event).ok_or(IllegalTransition { state: self.state, event: event.name() })?;
        let mut next = self.clone();
        next.apply(event, at_ms)?;
        Ok(next)
    }

    /// Applies `event` in place. The job is unchanged on error.
    pub fn apply(&mut self, event: TransitionEvent, at_ms: u64) -> Result<(), IllegalTransition> {
        let target = next_state(self.state, &event).ok_or(IllegalTransition {
            state: self.state,
            event: event.name(),
        })?;
        self.state = target;
        self.timestamps.insert(target, at_ms);
        match event {
            TransitionEvent::Failure(reason) => self.failure_reason = Some(reason),
            TransitionEvent::Reset => {
                self.attempts += 1;
                self.mapping = None;
                self.remote_handle = None;
                self.submit_intent = None;
                self.metrics = JobMetrics::default();
                self.timestamps.retain(|s, _| *s == JobState::Ready || *s == JobState::Failed);
            }
            _ => {}
        }
        Ok(())
    }

    /// Whether a FAILED job has used up its retry allowance.
    pub fn is_terminal(&self, max_attempts: u32) -> bool {
        match self.state {
            JobState::Done => true,
            JobState::Failed => self.abandoned || self.attempts + 1 >= max_attempts,
            _ => false,
        }
    }

    pub fn timestamp(&self, state: JobState) -> Option<u64> {
        self.timestamps.get(&state).copied()
    }
}

thread_local! {
    static LIVE: Cell<usize> = const { Cell::new(0) };
    static PEAK: Cell<usize> = const { Cell::new(0) };
}

/// Counts live `Job` values on the current thread.
#[derive(Debug)]
struct LiveJob;

impl LiveJob {
    fn bump() {
        LIVE.with(|l| {
            let n = l.get() + 1;
            l.set(n);
            PEAK.with(|p| p.set(p.get().max(n)));
        });
    }
}

impl LiveJob {
    fn new() -> Self {
        LiveJob::bump();
        LiveJob
    }
}

impl Default for LiveJob {
    fn default() -> Self {
        LiveJob::new()
    }
}

impl Clone for LiveJob {
    fn clone(&self) -> Self {
        LiveJob::new()
    }
}

impl Drop for LiveJob {
    fn drop(&mut self) {
        LIVE.with(|l| l.set(l.get().saturating_sub(1)));
    }
}

impl PartialEq for LiveJob {
    fn eq(&self, _: &Self) -> bool {
        true
    }
}

/// Instrumentation for the number of `Job` records materialized in memory.
///
/// Counters are per thread; the deterministic driver runs every worker on
/// the calling thread, so they cover a whole virtual-clock run.
pub mod gauge {
    use super::{LIVE, PEAK};

    pub fn live() -> usize {
        LIVE.with(|l| l.get())
    }

    pub fn peak() -> usize {
        PEAK.with(|p| p.get())
    }

    /// Resets the peak to the current live count.
    pub fn reset_peak() {
        let live = live();
        PEAK.with(|p| p.set(live));
    }
}
