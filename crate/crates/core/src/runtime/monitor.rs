//! Job monitor and service monitor workers.

use std::path::Path;

use tracing::{debug, warn};

use super::{relock, JobEvent, RunError, Runtime};
use crate::exec::agent::MANIFEST;
use crate::exec::{output_spec, AgentManifest, RemoteStatus, Retrieved, RETRIEVED_MARKER};
use crate::interp::{MarketDirectoryFile, ReplicaCatalogFile};
use crate::model::{DataProtocol, InfoKind, Job, JobState, ReplicaLocation, Service, TransitionEvent};

/// Decides whether a retrieved job really succeeded: the agent exited 0 and
/// every expected output pattern matches at least one retrieved file.
pub fn verify_completion(agent_exit: Option<i32>, files: &[String], patterns: &[String]) -> Result<(), String> {
    match agent_exit {
        None => return Err("no result manifest".into()),
        Some(0) => {}
        Some(code) => return Err(format!("nonzero exit {code}")),
    }
    for p in patterns {
        let matched = match glob::Pattern::new(p) {
            Ok(pat) => files.iter().any(|f| pat.matches(f)),
            Err(_) => files.iter().any(|f| f == p),
        };
        if !matched {
            return Err(format!("missing output {p}"));
        }
    }
    Ok(())
}

const REMOTE: [JobState; 4] = [JobState::Submitted, JobState::Pending, JobState::Active, JobState::StageOut];

impl Runtime {
    /// Next instant some job is due for a poll.
    pub fn next_poll_due(&self) -> Option<u64> {
        let ids = self.store.job_ids_in(&REMOTE);
        let mon = relock(&self.mon);
        ids.iter().map(|id| mon.due.get(id).copied().unwrap_or(0)).min()
    }

    /// Polls every watched job that is due at `now_ms`.
    pub fn monitor_tick(&self, now_ms: u64) -> Result<Vec<JobEvent>, RunError> {
        let due: Vec<String> = {
            let ids = self.store.job_ids_in(&REMOTE);
            let mon = relock(&self.mon);
            ids.into_iter().filter(|id| mon.due.get(id).is_none_or(|t| *t <= now_ms)).collect()
        };
        if !self.exec.options().threaded || due.len() <= 1 {
            let mut events = Vec::new();
            for id in due {
                self.monitor_job(&id, now_ms, &mut events)?;
            }
            return Ok(events);
        }
        let results: Vec<Result<Vec<JobEvent>, RunError>> = std::thread::scope(|s| {
            let handles: Vec<_> = due
                .iter()
                .map(|id| {
                    s.spawn(move || {
                        let mut ev = Vec::new();
                        self.monitor_job(id, now_ms, &mut ev).map(|_| ev)
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(RunError::WorkerPanic("job monitor".into()))))
                .collect()
        });
        let mut events = Vec::new();
        for r in results {
            events.append(&mut r?);
        }
        Ok(events)
    }

    fn schedule_next_poll(&self, job_id: &str, now_ms: u64) {
        let step = self.cfg.poll_interval_ms();
        let mut mon = relock(&self.mon);
        let prev = mon.due.get(job_id).copied().unwrap_or(now_ms);
        let mut next = prev + step;
        if next <= now_ms {
            next = now_ms + step;
        }
        mon.due.insert(job_id.to_string(), next);
    }

    fn monitor_job(&self, id: &str, now_ms: u64, sink: &mut Vec<JobEvent>) -> Result<(), RunError> {
        let Some(mut job) = self.store.get_job(id)? else { return Ok(()) };
        if !job.state.is_remote() {
            relock(&self.mon).due.remove(id);
            return Ok(());
        }
        let (Some(handle), Some(server_id)) = (job.remote_handle.clone(), job.mapping.as_ref().map(|m| m.compute_id.clone())) else {
            self.fail_and_reset(job, "no remote handle".into(), now_ms, sink)?;
            return Ok(());
        };

        let h = handle.clone();
        let polled = self.exec.call(&server_id, "poll", move |a| a.poll(&h, now_ms));
        let status = match polled {
            Err(e) => {
                let n = {
                    let mut mon = relock(&self.mon);
                    let n = mon.failures.entry(id.to_string()).or_insert(0);
                    *n += 1;
                    *n
                };
                if n >= self.cfg.poll_retries {
                    relock(&self.mon).due.remove(id);
                    self.fail_and_reset(job, format!("{n} consecutive poll failures: {e}"), now_ms, sink)?;
                } else {
                    debug!(job = %id, failures = n, error = %e, "poll failed; will retry");
                    self.schedule_next_poll(id, now_ms);
                }
                return Ok(());
            }
            Ok(t) => t,
        };
        relock(&self.mon).failures.remove(id);
        job.metrics.polls += 1;
        job.metrics.query_ms += status.end_ms.saturating_sub(now_ms);
        let at = status.end_ms;

        match status.value {
            RemoteStatus::Queued => {
                if job.state == JobState::Submitted {
                    self.step(job, TransitionEvent::Queued, at, None, sink)?;
                } else {
                    self.commit(job.state, &job, at, None, sink)?;
                }
                self.schedule_next_poll(id, now_ms);
            }
            RemoteStatus::Running => {
                if matches!(job.state, JobState::Submitted | JobState::Pending) {
                    self.step(job, TransitionEvent::Started, at, None, sink)?;
                } else {
                    self.commit(job.state, &job, at, None, sink)?;
                }
                self.schedule_next_poll(id, now_ms);
            }
            RemoteStatus::Exited(code) => {
                if matches!(job.state, JobState::Submitted | JobState::Pending) {
                    job = self.step(job, TransitionEvent::Started, at, Some("finished between polls".into()), sink)?;
                }
                if job.state == JobState::Active {
                    job = self.step(job, TransitionEvent::ExecutionComplete, at, Some(format!("exit {code}")), sink)?;
                }
                self.finish(job, &server_id, at, false, sink)?;
            }
            RemoteStatus::Lost => {
                if job.state == JobState::StageOut {
                    // Retrieval may have completed just before a crash.
                    self.finish(job, &server_id, at, true, sink)?;
                } else {
                    relock(&self.mon).due.remove(id);
                    self.fail_and_reset(job, "lost by the execution service".into(), at, sink)?;
                }
            }
        }
        Ok(())
    }

    /// Retrieves outputs of a job in STAGE_OUT and verifies them.
    fn finish(&self, mut job: Job, server_id: &str, at_ms: u64, lost: bool, sink: &mut Vec<JobEvent>) -> Result<(), RunError> {
        relock(&self.mon).due.remove(&job.job_id);
        let handle = job.remote_handle.clone().expect("remote states hold a handle");
        let dest = self.cfg.result_dir(&job.job_id);
        let task = self.ctx.task(&job.task_id).ok_or_else(|| RunError::Config(format!("unknown task {}", job.task_id)))?;
        let spec = match output_spec(&job, task) {
            Ok(s) => s,
            Err(e) => {
                self.fail_and_reset(job, e.to_string(), at_ms, sink)?;
                return Ok(());
            }
        };

        let already = std::fs::read_to_string(dest.join(RETRIEVED_MARKER)).is_ok_and(|t| t == handle.token);
        let (retrieved, end_ms) = if already {
            (local_retrieval(&dest)?, at_ms)
        } else if lost {
            self.fail_and_reset(job, "lost by the execution service during stage-out".into(), at_ms, sink)?;
            return Ok(());
        } else {
            if dest.exists() {
                std::fs::remove_dir_all(&dest)?;
            }
            let (h, s, d) = (handle.clone(), spec.clone(), dest.clone());
            match self.exec.call(server_id, "stage_out", move |a| a.stage_out_and_cleanup(&h, &s, &d, at_ms)) {
                Ok(t) => (t.value, t.end_ms),
                Err(e) => {
                    self.fail_and_reset(job, format!("stage-out: {e}"), at_ms, sink)?;
                    return Ok(());
                }
            }
        };
        if let Some(w) = &retrieved.cleanup_warning {
            warn!(job = %job.job_id, warning = %w, "remote cleanup failed; outputs are safe");
        }
        job.metrics.termination_ms = end_ms.saturating_sub(at_ms);
        let exit = retrieved.manifest.as_ref().and_then(|m| m.agent_exit);
        match verify_completion(exit, &retrieved.files, &spec.patterns) {
            Ok(()) => {
                let span = retrieved.manifest.as_ref().and_then(AgentManifest::span_ms);
                job.metrics.compute_ms = span;
                self.step(job, TransitionEvent::OutputsVerified, end_ms, None, sink)?;
                if let Some(ms) = span {
                    self.store.update_service(server_id, |s| {
                        if let Service::Compute(c) = s {
                            c.record_completion(ms as f64 / 1000.0);
                        }
                    })?;
                }
            }
            Err(why) => {
                self.fail_and_reset(job, why, end_ms, sink)?;
            }
        }
        Ok(())
    }

    /// Probes every service, refreshes catalogs and prices, and persists
    /// the result. Failures only mark services unavailable.
    pub fn service_monitor_tick(&self, now_ms: u64) -> Result<Vec<Service>, RunError> {
        relock(&self.mon).next_probe_ms = now_ms + crate::clock::secs_to_ms(self.cfg.probe_interval_s());
        for s in self.store.services() {
            let id = s.id().to_string();
            match s {
                Service::Compute(c) => {
                    let server = c.clone();
                    let probed = self.exec.call(&id, "probe", move |a| a.probe(&server, now_ms));
                    self.store.update_service(&id, |s| {
                        let Service::Compute(c) = s else { return };
                        match &probed {
                            Ok(f) => {
                                c.architecture = f.value.architecture.clone();
                                c.os = f.value.os.clone();
                                c.available = true;
                            }
                            Err(e) => {
                                if c.available {
                                    warn!(server = %c.service_id, error = %e, "server unreachable");
                                }
                                c.available = false;
                            }
                        }
                        c.last_probe = Some(now_ms);
                    })?;
                }
                Service::Data(d) => {
                    let up = match d.protocol {
                        DataProtocol::Localfs => crate::exec::datahost_local_path(&d.uri, "").is_dir(),
                        DataProtocol::Sftp | DataProtocol::Sim => true,
                    };
                    self.store.update_service(&id, |s| s.set_available(up, now_ms))?;
                }
                Service::Info(info) => {
                    let path = self.base_dir().join(&info.backing);
                    let loaded = load_backing(&path, info.subtype);
                    if let Err(e) = &loaded {
                        warn!(service = %id, error = %e, "information service unreadable");
                    }
                    self.store.update_service(&id, |s| {
                        let Service::Info(i) = s else { return };
                        i.available = loaded.is_ok();
                        i.last_probe = Some(now_ms);
                        if let Ok(b) = loaded {
                            match b {
                                Backing::Replicas(r) => i.replicas = r,
                                Backing::Prices(p) => i.prices = p,
                            }
                        }
                    })?;
                }
                Service::Link(_) => {}
            }
        }
        // Market prices apply after every directory has been read.
        for s in self.store.services() {
            let Service::Info(info) = s else { continue };
            if info.subtype != InfoKind::MarketDirectory || !info.available {
                continue;
            }
            for (target, price) in &info.prices {
                self.store.update_service(target, |t| t.apply_price(price))?;
            }
        }
        Ok(self.store.services())
    }

    pub fn next_probe_due(&self) -> u64 {
        relock(&self.mon).next_probe_ms
    }
}

enum Backing {
    Replicas(std::collections::BTreeMap<String, Vec<ReplicaLocation>>),
    Prices(std::collections::BTreeMap<String, crate::model::PriceOverride>),
}

fn load_backing(path: &Path, kind: InfoKind) -> Result<Backing, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    match kind {
        InfoKind::ReplicaCatalog => {
            let f: ReplicaCatalogFile = toml::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
            let mut out: std::collections::BTreeMap<String, Vec<ReplicaLocation>> = Default::default();
            for r in f.replicas {
                out.entry(r.logical_name).or_default().push(ReplicaLocation { datahost: r.datahost, path: r.path });
            }
            Ok(Backing::Replicas(out))
        }
        InfoKind::MarketDirectory => {
            let f: MarketDirectoryFile = toml::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
            Ok(Backing::Prices(f.prices))
        }
    }
}

/// Files already retrieved into `dest` by an earlier incarnation.
fn local_retrieval(dest: &Path) -> Result<Retrieved, RunError> {
    let mut files = Vec::new();
    for e in std::fs::read_dir(dest)? {
        let name = e?.file_name().to_string_lossy().into_owned();
        if name != RETRIEVED_MARKER {
            files.push(name);
        }
    }
    files.sort();
    let manifest = std::fs::read_to_string(dest.join(MANIFEST)).ok().map(|t| AgentManifest::parse(&t));
    Ok(Retrieved { files, manifest, cleanup_warning: None })
}
