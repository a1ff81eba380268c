//! Run reports and read-only status snapshots.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{RunError, Runtime};
use crate::clock::ms_to_secs;
use crate::model::{Job, JobState, Service};
use crate::store::{Store, StoreError};

/// One line of the per-job report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRow {
    pub job_id: String,
    pub state: JobState,
    pub attempts: u32,
    pub server: Option<String>,
    /// SCHEDULED to SUBMITTED.
    pub submission_s: Option<f64>,
    /// Time spent inside status queries.
    pub querying_s: f64,
    /// Retrieval, verification and cleanup.
    pub termination_s: f64,
    /// SUBMITTED to STAGE_OUT.
    pub wallclock_s: Option<f64>,
    pub polls: u32,
    pub est_cost: f64,
    pub failure_reason: Option<String>,
    pub recovered: bool,
}

impl JobRow {
    pub fn from_job(job: &Job, recovered: bool) -> JobRow {
        let span = |a: JobState, b: JobState| match (job.timestamps.get(&a), job.timestamps.get(&b)) {
            (Some(x), Some(y)) if y >= x => Some(ms_to_secs(y - x)),
            _ => None,
        };
        JobRow {
            job_id: job.job_id.clone(),
            state: job.state,
            attempts: job.attempts,
            server: job.mapping.as_ref().map(|m| m.compute_id.clone()),
            submission_s: span(JobState::Scheduled, JobState::Submitted),
            querying_s: ms_to_secs(job.metrics.query_ms),
            termination_s: ms_to_secs(job.metrics.termination_ms),
            wallclock_s: span(JobState::Submitted, JobState::StageOut),
            polls: job.metrics.polls,
            est_cost: job.mapping.as_ref().map_or(0.0, |m| m.est_cost),
            failure_reason: job.failure_reason.clone(),
            recovered,
        }
    }
}

/// Mean and spread of one metric over the DONE jobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub name: String,
    pub count: usize,
    pub mean: f64,
    pub min: f64,
    pub p50: f64,
    pub max: f64,
}

impl MetricSummary {
    pub fn of(name: &str, mut values: Vec<f64>) -> MetricSummary {
        values.sort_by(f64::total_cmp);
        let n = values.len();
        let (mean, min, p50, max) = if n == 0 {
            (0.0, 0.0, 0.0, 0.0)
        } else {
            (values.iter().sum::<f64>() / n as f64, values[0], values[(n - 1) / 2], values[n - 1])
        };
        MetricSummary { name: name.to_string(), count: n, mean, min, p50, max }
    }
}

pub const METRICS: [&str; 4] = ["submission", "querying", "termination", "wallclock"];

/// Outcome of a run: one row per job plus aggregates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub instance_id: String,
    pub total: usize,
    pub done: usize,
    pub failed: usize,
    pub wallclock_s: f64,
    /// Estimated cost of the DONE jobs.
    pub total_cost: f64,
    pub metrics: Vec<MetricSummary>,
    pub rows: Vec<JobRow>,
    pub recovered: Vec<String>,
}

impl RunReport {
    pub fn collect(rt: &Runtime, end_ms: u64) -> Result<RunReport, RunError> {
        Ok(RunReport::from_store(rt.store(), rt.run_start_ms(), end_ms, rt.recovered_jobs())?)
    }

    /// Builds the report one job record at a time.
    pub fn from_store(store: &Store, run_start_ms: u64, end_ms: u64, recovered: &[String]) -> Result<RunReport, StoreError> {
        let mut rows = Vec::with_capacity(store.job_count());
        for (id, _) in store.job_index() {
            if let Some(job) = store.get_job(&id)? {
                rows.push(JobRow::from_job(&job, recovered.contains(&id)));
            }
        }
        let done: Vec<&JobRow> = rows.iter().filter(|r| r.state == JobState::Done).collect();
        let metrics = vec![
            MetricSummary::of(METRICS[0], done.iter().filter_map(|r| r.submission_s).collect()),
            MetricSummary::of(METRICS[1], done.iter().map(|r| r.querying_s).collect()),
            MetricSummary::of(METRICS[2], done.iter().map(|r| r.termination_s).collect()),
            MetricSummary::of(METRICS[3], done.iter().filter_map(|r| r.wallclock_s).collect()),
        ];
        let total_cost = done.iter().map(|r| r.est_cost).sum();
        let n_done = done.len();
        Ok(RunReport {
            instance_id: store.instance_id().to_string(),
            total: rows.len(),
            done: n_done,
            failed: rows.len() - n_done,
            wallclock_s: ms_to_secs(end_ms.saturating_sub(run_start_ms)),
            total_cost,
            metrics,
            rows,
            recovered: recovered.to_vec(),
        })
    }

    pub fn metric(&self, name: &str) -> Option<&MetricSummary> {
        self.metrics.iter().find(|m| m.name == name)
    }

    pub fn row(&self, job_id: &str) -> Option<&JobRow> {
        self.rows.iter().find(|r| r.job_id == job_id)
    }

    /// 0 when every job is DONE, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        if self.done == self.total {
            0
        } else {
            1
        }
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<10} {:<9} {:>3} {:<12} {:>10} {:>9} {:>11} {:>10} {:>5} {:>9}  reason",
            "job", "state", "att", "server", "submit_s", "query_s", "terminate_s", "wall_s", "polls", "cost"
        );
        let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.2}"));
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<10} {:<9} {:>3} {:<12} {:>10} {:>9.2} {:>11.2} {:>10} {:>5} {:>9.4}  {}{}",
                r.job_id,
                r.state.as_str(),
                r.attempts,
                r.server.as_deref().unwrap_or("-"),
                opt(r.submission_s),
                r.querying_s,
                r.termination_s,
                opt(r.wallclock_s),
                r.polls,
                r.est_cost,
                r.failure_reason.as_deref().unwrap_or(""),
                if r.recovered { " (recovered)" } else { "" },
            );
        }
        let _ = writeln!(out);
        let _ = writeln!(out, "{:<12} {:>6} {:>10} {:>10} {:>10} {:>10}", "metric", "count", "mean_s", "min_s", "p50_s", "max_s");
        for m in &self.metrics {
            let _ = writeln!(out, "{:<12} {:>6} {:>10.3} {:>10.3} {:>10.3} {:>10.3}", m.name, m.count, m.mean, m.min, m.p50, m.max);
        }
        let _ = writeln!(out);
        let _ = writeln!(
            out,
            "instance {}: {} of {} done, {} failed, wallclock {:.1} s, cost {:.4}",
            self.instance_id, self.done, self.total, self.failed, self.wallclock_s, self.total_cost
        );
        if !self.recovered.is_empty() {
            let _ = writeln!(out, "recovered jobs: {}", self.recovered.len());
        }
        out
    }

    /// One JSON object per job, one per line.
    pub fn to_ndjson(&self) -> String {
        let mut out = String::new();
        for r in &self.rows {
            out.push_str(&serde_json::to_string(r).expect("rows serialize"));
            out.push('\n');
        }
        out
    }

    /// Writes `report.txt` and `report.ndjson` into `dir`.
    pub fn write(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.txt"), self.to_table())?;
        std::fs::write(dir.join("report.ndjson"), self.to_ndjson())
    }
}

/// Per-server view in a status snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerStatus {
    pub id: String,
    pub in_flight: u32,
    pub slots: u32,
    pub available: bool,
    pub price: f64,
}

/// Current state of an instance, read without taking its lock.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatusSnapshot {
    pub instance_id: String,
    pub total: usize,
    pub states: BTreeMap<JobState, usize>,
    pub servers: Vec<ServerStatus>,
    /// Jobs by number of failed attempts.
    pub attempts: BTreeMap<u32, usize>,
}

impl fmt::Display for StatusSnapshot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "instance {} ({} jobs)", self.instance_id, self.total)?;
        for s in JobState::ALL {
            writeln!(f, "  {:<10} {}", s.as_str(), self.states.get(&s).copied().unwrap_or(0))?;
        }
        writeln!(f, "servers:")?;
        for s in &self.servers {
            writeln!(
                f,
                "  {:<16} {}/{} in flight  {}  price {}",
                s.id,
                s.in_flight,
                s.slots,
                if s.available { "up" } else { "down" },
                s.price
            )?;
        }
        writeln!(f, "attempts:")?;
        for (a, n) in &self.attempts {
            writeln!(f, "  {a}: {n}")?;
        }
        Ok(())
    }
}

/// Reads the state of an instance. Works while a broker holds the lock.
pub fn status(store_dir: &Path, instance_id: &str) -> Result<StatusSnapshot, StoreError> {
    let store = Store::open_read_only(store_dir, instance_id)?;
    let (occupancy, _) = store.occupancy();
    let mut states: BTreeMap<JobState, usize> = JobState::ALL.iter().map(|s| (*s, 0)).collect();
    states.extend(store.state_counts());
    let mut attempts = BTreeMap::new();
    for (_, e) in store.job_index() {
        *attempts.entry(e.attempts).or_insert(0) += 1;
    }
    let servers = store
        .services()
        .iter()
        .filter_map(Service::as_compute)
        .map(|c| ServerStatus {
            id: c.service_id.clone(),
            in_flight: occupancy.get(&c.service_id).copied().unwrap_or(0),
            slots: c.slots,
            available: c.available,
            price: c.price_per_cpu_s,
        })
        .collect();
    Ok(StatusSnapshot { instance_id: instance_id.to_string(), total: store.job_count(), states, servers, attempts })
}
