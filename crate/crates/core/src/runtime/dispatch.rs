//! Scheduling worker: maps READY jobs and dispatches them.

use std::collections::BTreeMap;
use std::sync::Arc;

use tracing::{debug, info, warn};

use super::{relock, JobEvent, RunError, Runtime};
use crate::clock::secs_to_ms;
use crate::exec::{make_wrapper, workdir_for, ExecError, JobWrapper, Timed, WrapContext};
use crate::model::{link_id, Job, JobState, RemoteHandle, Service, TransitionEvent};
use crate::sched::{GridView, TickContext};
use crate::store::next_ready_batch;

/// Result of dispatching one job.
#[derive(Debug, Clone, PartialEq)]
pub struct DispatchOutcome {
    pub job_id: String,
    pub server_id: String,
    /// The handle, or why dispatch failed.
    pub result: Result<RemoteHandle, String>,
}

/// What one scheduling tick did.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TickSummary {
    pub considered: usize,
    pub outcomes: Vec<DispatchOutcome>,
    pub deferred: usize,
    pub abandoned: usize,
    pub events: Vec<JobEvent>,
}

impl Runtime {
    /// Services as the scheduler sees them: admission counts come from the
    /// jobs currently holding a slot.
    pub fn scheduler_view(&self) -> Vec<Service> {
        let (servers, queues) = self.store.occupancy();
        let mut services = self.store.services();
        for s in &mut services {
            if let Service::Compute(c) = s {
                c.in_flight = servers.get(&c.service_id).copied().unwrap_or(0);
                for q in &mut c.queues {
                    q.in_flight = queues.get(&(c.service_id.clone(), q.name.clone())).copied().unwrap_or(0);
                }
                if let Some(mode) = self.cfg.staging {
                    c.staging = mode;
                }
            }
        }
        services
    }

    /// One scheduling tick: load READY work into the active set, plan,
    /// move mapped jobs to SCHEDULED and dispatch them.
    pub fn schedule_tick(&self, now_ms: u64) -> Result<TickSummary, RunError> {
        let mut summary = TickSummary::default();
        let max = self.max_attempts();
        let mut st = relock(&self.sched);
        st.active.retire_finished(&self.store, max);

        // Members that came back to READY after a reset, then fresh work.
        let mut jobs = Vec::new();
        let members: Vec<String> = st.active.members().cloned().collect();
        for id in members {
            if self.store.job_entry(&id).is_some_and(|e| e.state == JobState::Ready) {
                if let Some(j) = self.store.get_job(&id)? {
                    jobs.push(j);
                }
            }
        }
        jobs.extend(next_ready_batch(&self.store, &mut st.active)?);
        summary.considered = jobs.len();
        if jobs.is_empty() {
            return Ok(summary);
        }

        let services = self.scheduler_view();
        let ready_total = self.store.job_ids_in(&[JobState::Ready]).len();
        let tick = TickContext {
            now_ms,
            run_start_ms: self.run_start_ms,
            spent: self.store.committed_cost(),
            backlog: ready_total.saturating_sub(jobs.len()),
        };
        let result = st.scheduler.tick(&jobs, &self.ctx, &services, &tick);
        summary.deferred = result.deferred.len();

        let mut by_id: BTreeMap<String, Job> = jobs.into_iter().map(|j| (j.job_id.clone(), j)).collect();
        let mut scheduled = Vec::with_capacity(result.mappings.len());
        for m in result.mappings {
            let Some(job) = by_id.remove(&m.job_id) else { continue };
            let detail = format!("server={} est_cost={:.4} est_s={:.1}", m.compute_id, m.est_cost, m.est_duration_s);
            let job = self.step_with(job, TransitionEvent::Scheduled, now_ms, Some(detail), &mut summary.events, |j| j.mapping = Some(m))?;
            scheduled.push(job);
        }
        // Infeasible work can only become feasible again while something is
        // in flight or a server is cooling down.
        let cooling = services
            .iter()
            .filter_map(Service::as_compute)
            .any(|c| c.available && c.cooldown_until.is_some_and(|t| t > now_ms));
        if !result.infeasible.is_empty() && scheduled.is_empty() && !cooling && self.store.in_flight_count() == 0 {
            for (id, why) in &result.infeasible {
                if let Some(job) = by_id.remove(id) {
                    info!(job = %id, reason = %why, "abandoning infeasible job");
                    self.abandon(job, &format!("infeasible: {why}"), now_ms, &mut summary.events)?;
                    summary.abandoned += 1;
                }
            }
        }
        drop(by_id);
        st.max_batch = st.max_batch.max(scheduled.len());
        drop(st);

        let (outcomes, mut events) = self.dispatch(scheduled, now_ms)?;
        summary.outcomes = outcomes;
        summary.events.append(&mut events);
        Ok(summary)
    }

    /// Drives each SCHEDULED job through stage-in and submission. Per-job
    /// failures become outcomes; only store failures abort the batch.
    pub fn dispatch(&self, jobs: Vec<Job>, now_ms: u64) -> Result<(Vec<DispatchOutcome>, Vec<JobEvent>), RunError> {
        let services = self.store.services();
        let view = GridView::new(&services);
        if !self.exec.options().threaded || jobs.len() <= 1 {
            let mut outcomes = Vec::with_capacity(jobs.len());
            let mut events = Vec::new();
            for job in jobs {
                outcomes.push(self.dispatch_one(job, &view, now_ms, &mut events)?);
            }
            return Ok((outcomes, events));
        }
        let results: Vec<Result<(DispatchOutcome, Vec<JobEvent>), RunError>> = std::thread::scope(|s| {
            let handles: Vec<_> = jobs
                .into_iter()
                .map(|job| {
                    let view = &view;
                    s.spawn(move || {
                        let mut ev = Vec::new();
                        self.dispatch_one(job, view, now_ms, &mut ev).map(|o| (o, ev))
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(RunError::WorkerPanic("dispatch".into()))))
                .collect()
        });
        let mut outcomes = Vec::new();
        let mut events = Vec::new();
        for r in results {
            let (o, mut ev) = r?;
            outcomes.push(o);
            events.append(&mut ev);
        }
        Ok((outcomes, events))
    }

    fn dispatch_one(&self, job: Job, view: &GridView, now_ms: u64, sink: &mut Vec<JobEvent>) -> Result<DispatchOutcome, RunError> {
        let job_id = job.job_id.clone();
        let mapping = job.mapping.clone().ok_or_else(|| RunError::Config(format!("job {job_id} has no mapping")))?;
        let server_id = mapping.compute_id.clone();
        let outcome = |result: Result<RemoteHandle, String>| DispatchOutcome { job_id: job_id.clone(), server_id: server_id.clone(), result };

        let job = self.step(job, TransitionEvent::StageInStarted, now_ms, None, sink)?;
        let Some(mut server) = view.computes.iter().find(|c| c.service_id == server_id).cloned() else {
            let why = format!("server {server_id} vanished");
            self.dispatch_failed(job, &server_id, why.clone(), now_ms, sink)?;
            return Ok(outcome(Err(why)));
        };
        if let Some(mode) = self.cfg.staging {
            server.staging = mode;
        }
        let task = self.ctx.task(&job.task_id).ok_or_else(|| RunError::Config(format!("unknown task {}", job.task_id)))?;
        let wc = WrapContext { instance_id: self.store.instance_id(), task, view, base_dir: self.base_dir() };
        let wrapper = match make_wrapper(&job, &mapping, &server, self.credential(server.credential_id.as_deref()), &wc) {
            Ok(w) => Arc::new(w),
            Err(e) => {
                self.dispatch_failed(job, &server_id, e.to_string(), now_ms, sink)?;
                return Ok(outcome(Err(e.to_string())));
            }
        };

        let w = wrapper.clone();
        let staged = match self.exec.call(&server_id, "stage_in", move |a| a.stage_in(&w, now_ms)) {
            Ok(s) => s,
            Err(e) => {
                self.dispatch_failed(job, &server_id, format!("stage-in: {e}"), now_ms, sink)?;
                return Ok(outcome(Err(e.to_string())));
            }
        };
        self.observe_links(&staged.value.files)?;

        // The intent record makes a submission that outlives this process recognizable.
        let mut job = job;
        job.submit_intent = Some(job.attempts);
        self.commit(job.state, &job, staged.end_ms, None, sink)?;

        let t1 = staged.end_ms;
        let w = wrapper.clone();
        let submitted = match self.exec.call(&server_id, "submit", move |a| a.submit(&w, t1)) {
            Ok(h) => Ok(h),
            Err(ExecError::Timeout(op)) => self.reconnoitre(&wrapper, &server_id, t1).ok_or(ExecError::Timeout(op)),
            Err(e) => Err(e),
        };
        let handle = match submitted {
            Ok(h) => h,
            Err(e) => {
                self.dispatch_failed(job, &server_id, format!("submit: {e}"), t1, sink)?;
                return Ok(outcome(Err(e.to_string())));
            }
        };
        let Timed { value: handle, end_ms } = handle;
        let h = handle.clone();
        let job = self.step_with(job, TransitionEvent::HandleObtained, end_ms, Some(handle.token.clone()), sink, move |j| {
            j.remote_handle = Some(h)
        })?;
        debug!(job = %job.job_id, server = %server_id, token = %handle.token, "submitted");
        relock(&self.mon).due.insert(job.job_id.clone(), end_ms + self.cfg.poll_interval_ms());
        Ok(outcome(Ok(handle)))
    }

    /// Looks for a submission whose acknowledgement timed out.
    fn reconnoitre(&self, w: &JobWrapper, server_id: &str, at_ms: u64) -> Option<Timed<RemoteHandle>> {
        let adapter = self.exec.adapter(server_id).ok()?;
        let h = adapter.find_submission(&w.job_id, &workdir_for(self.store.instance_id(), &w.job_id, w.attempt))?;
        warn!(job = %w.job_id, "submit timed out but the job reached the server; adopting it");
        Some(Timed { value: h, end_ms: at_ms })
    }

    fn dispatch_failed(&self, job: Job, server_id: &str, why: String, at_ms: u64, sink: &mut Vec<JobEvent>) -> Result<(), RunError> {
        self.fail_and_reset(job, why, at_ms, sink)?;
        let until = at_ms + secs_to_ms(self.cfg.cooldown_polls * self.cfg.poll_interval_s);
        self.store.update_service(server_id, |s| {
            if let Service::Compute(c) = s {
                c.cooldown_until = Some(c.cooldown_until.map_or(until, |t| t.max(until)));
            }
        })?;
        Ok(())
    }

    /// Folds measured transfer rates into the declared links.
    fn observe_links(&self, files: &[crate::exec::StagedFile]) -> Result<(), RunError> {
        for f in files.iter().filter(|f| f.duration_ms > 0 && f.bytes > 0) {
            let mbps = crate::model::bytes_to_mb(f.bytes) / (f.duration_ms as f64 / 1000.0);
            self.store.update_service(&link_id(&f.link.0, &f.link.1), |s| {
                if let Service::Link(l) = s {
                    l.observe(mbps);
                }
            })?;
        }
        Ok(())
    }
}
