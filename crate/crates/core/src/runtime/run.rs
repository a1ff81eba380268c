//! Starting, resuming and driving a broker instance.

use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use tracing::{error, info, warn};

use super::{relock, EventBus, MonState, PersistedConfig, RunConfig, RunError, RunReport, Runtime, SchedState};
use crate::clock::{secs_to_ms, Clock, SystemClock, VirtualClock};
use crate::exec::{workdir_for, Executor, ExecutorOptions, SimWorld};
use crate::model::{
    validate_application, AdapterKind, ApplicationContext, Credential, Job, JobExpansion, JobState, RemoteHandle,
    ReplicaIndex, Service,
};
use crate::sched::{PolicyKind, SchedConfig, Scheduler};
use crate::store::{recover, ActiveSet, RecoveryAction, RecoveryReport, Store, StoreError, StoreOptions, SubmissionProbe, SyncPolicy};

use super::ClockMode;

/// How time advances during a run.
#[derive(Debug, Clone)]
pub enum Driver {
    /// Single-threaded, deterministic; time jumps to the next event.
    Virtual(VirtualClock),
    /// Three long-lived worker threads on wall time.
    Real,
}

/// Process-level resources a run may share with its caller.
#[derive(Debug, Clone, Default)]
pub struct RunEnv {
    /// Simulated grid; created from the run configuration when absent.
    pub sim: Option<Arc<SimWorld>>,
    /// Forces the virtual driver on this clock.
    pub clock: Option<VirtualClock>,
}

fn store_options(cfg: &RunConfig) -> StoreOptions {
    StoreOptions { sync: if cfg.fsync { SyncPolicy::Always } else { SyncPolicy::OsBuffered }, ..StoreOptions::default() }
}

fn check_credentials(services: &[Service], creds: &[Credential]) -> Result<(), StoreError> {
    for s in services {
        if let Some(c) = s.credential_id() {
            if !creds.iter().any(|k| k.cred_id == c) {
                return Err(StoreError::MissingCredential(s.id().to_string(), c.to_string()));
            }
        }
    }
    Ok(())
}

/// Chooses the driver and builds the executor.
fn build_executor(
    cfg: &RunConfig,
    services: &[Service],
    creds: &[Credential],
    env: RunEnv,
    resume_at: Option<u64>,
) -> Result<(Driver, Executor), RunError> {
    let kinds: Vec<AdapterKind> =
        services.iter().filter_map(Service::as_compute).map(|c| cfg.adapter.unwrap_or(c.adapter)).collect();
    let all_sim = !kinds.is_empty() && kinds.iter().all(|k| *k == AdapterKind::Sim);
    let sim_clock_real = cfg.sim.as_ref().is_some_and(|s| s.clock == crate::exec::sim::SimClock::Real);
    let driver = match (env.clock, cfg.clock) {
        (Some(c), _) => Driver::Virtual(c),
        (None, ClockMode::Virtual) => Driver::Virtual(resume_at.map_or_else(VirtualClock::default, VirtualClock::starting_at)),
        (None, ClockMode::Real) => Driver::Real,
        (None, ClockMode::Auto) if all_sim && !sim_clock_real => {
            Driver::Virtual(resume_at.map_or_else(VirtualClock::default, VirtualClock::starting_at))
        }
        (None, ClockMode::Auto) => Driver::Real,
    };
    let sim = if kinds.contains(&AdapterKind::Sim) {
        Some(env.sim.unwrap_or_else(|| {
            let mut sc = cfg.sim.clone().unwrap_or_default();
            if matches!(driver, Driver::Real) && cfg.sim.is_none() {
                sc.clock = crate::exec::sim::SimClock::Real;
            }
            Arc::new(SimWorld::new(sc))
        }))
    } else {
        None
    };
    let opts = ExecutorOptions {
        op_timeout: Duration::from_secs_f64(cfg.op_timeout_s),
        threaded: matches!(driver, Driver::Real),
        adapter_override: cfg.adapter,
        local_base: cfg.work_dir(),
        sim,
        ..ExecutorOptions::default()
    };
    let exec = Executor::new(services, creds, opts)?;
    Ok((driver, exec))
}

/// Finds submissions through the adapters during recovery.
struct AdapterProbe<'a> {
    exec: &'a Executor,
    instance_id: &'a str,
}

impl SubmissionProbe for AdapterProbe<'_> {
    fn find_submission(&self, job: &Job) -> Option<RemoteHandle> {
        let server = &job.mapping.as_ref()?.compute_id;
        let adapter = self.exec.adapter(server).ok()?;
        adapter.find_submission(&job.job_id, &workdir_for(self.instance_id, &job.job_id, job.attempts))
    }
}

/// Wakes sleeping workers early.
#[derive(Default)]
struct Signal {
    flag: Mutex<bool>,
    cv: Condvar,
}

impl Signal {
    fn notify(&self) {
        *relock(&self.flag) = true;
        self.cv.notify_all();
    }

    fn wait(&self, timeout: Duration) {
        let g = relock(&self.flag);
        let (mut g, _) = self.cv.wait_timeout_while(g, timeout, |f| !*f).unwrap_or_else(|p| p.into_inner());
        *g = false;
    }
}

impl Runtime {
    #[allow(clippy::too_many_arguments)]
    fn assemble(
        store: Store,
        exec: Executor,
        driver: Driver,
        cfg: RunConfig,
        ctx: ApplicationContext,
        creds: Vec<Credential>,
        run_start_ms: u64,
        recovered: Vec<String>,
    ) -> Runtime {
        let clock: Arc<dyn Clock> = match &driver {
            Driver::Virtual(c) => Arc::new(c.clone()),
            Driver::Real => Arc::new(SystemClock),
        };
        let policy = cfg.policy.unwrap_or_else(|| PolicyKind::for_optimization(ctx.qos.optimization));
        let scheduler = Scheduler::new(policy, SchedConfig { bootstrap_s: cfg.bootstrap_s });
        let now = clock.now_ms();
        Runtime {
            sched: Mutex::new(SchedState { scheduler, active: ActiveSet::new(cfg.active_set), max_batch: 0 }),
            mon: Mutex::new(MonState::default()),
            last_progress_ms: AtomicU64::new(now),
            store: Arc::new(store),
            exec,
            clock,
            driver,
            cfg,
            ctx,
            creds,
            bus: EventBus::new(),
            run_start_ms,
            recovered,
        }
    }

    /// Validates the inputs, creates a new store instance, and expands every
    /// task into READY jobs.
    pub fn start(
        mut ctx: ApplicationContext,
        services: Vec<Service>,
        creds: Vec<Credential>,
        cfg: RunConfig,
        env: RunEnv,
    ) -> Result<Runtime, RunError> {
        cfg.validate()?;
        for c in &creds {
            if !ctx.credential_ids.contains(&c.cred_id) {
                ctx.credential_ids.push(c.cred_id.clone());
            }
        }
        let diags = validate_application(&ctx, &services);
        if !diags.is_empty() {
            return Err(RunError::Invalid(diags));
        }
        if let Some(c) = ctx.credential_ids.iter().find(|c| !creds.iter().any(|k| &k.cred_id == *c)) {
            return Err(RunError::MissingCredential(c.clone()));
        }
        check_credentials(&services, &creds)?;
        let (driver, exec) = build_executor(&cfg, &services, &creds, env, None)?;
        std::fs::create_dir_all(&cfg.out_dir)?;
        std::fs::create_dir_all(&cfg.store_dir)?;
        let store = Store::open_with(&cfg.store_dir, None, store_options(&cfg))?;
        store.put_context(&ctx)?;
        for s in &services {
            store.put_service(s)?;
        }
        let start = match &driver {
            Driver::Virtual(c) => c.now_ms(),
            Driver::Real => SystemClock.now_ms(),
        };
        let persisted = PersistedConfig { run: cfg.clone(), run_start_ms: start };
        store.put_config(&serde_json::to_value(&persisted).map_err(|e| RunError::Config(e.to_string()))?)?;
        info!(instance = %store.instance_id(), "starting run");

        let rt = Runtime::assemble(store, exec, driver, cfg, ctx, creds, start, Vec::new());
        rt.service_monitor_tick(start)?;
        rt.expand()?;
        Ok(rt)
    }

    fn expand(&self) -> Result<(), RunError> {
        let index = ReplicaIndex::from_services(&self.store.services());
        let mut next = 1;
        for task in &self.ctx.tasks {
            let exp = JobExpansion::new(task, Some(&index), next)?;
            next += exp.cardinality();
            for job in exp {
                self.store.put_job(&job)?;
            }
        }
        info!(jobs = self.store.job_count(), "expanded application");
        Ok(())
    }

    /// Reopens an instance after a crash, reconciles its jobs and returns a
    /// runtime ready to continue.
    pub fn resume(
        store_dir: &Path,
        instance_id: &str,
        creds: Vec<Credential>,
        env: RunEnv,
    ) -> Result<(Runtime, RecoveryReport), RunError> {
        let (persisted, latest) = {
            let ro = Store::open_read_only(store_dir, instance_id)?;
            let cfg = ro.config().ok_or_else(|| StoreError::Corrupt("instance has no run configuration".into()))?;
            let persisted: PersistedConfig =
                serde_json::from_value(cfg).map_err(|e| StoreError::Corrupt(format!("run configuration: {e}")))?;
            let latest = latest_timestamp(&ro)?;
            (persisted, latest)
        };
        let mut cfg = persisted.run;
        cfg.store_dir = store_dir.to_path_buf();
        let store = Store::open_with(store_dir, Some(instance_id), store_options(&cfg))?;
        let ctx = store.context().ok_or_else(|| StoreError::Corrupt("instance has no application".into()))?;
        let services = store.services();
        check_credentials(&services, &creds)?;
        let (driver, exec) = build_executor(&cfg, &services, &creds, env, Some(latest.max(persisted.run_start_ms)))?;
        let now = match &driver {
            Driver::Virtual(c) => c.now_ms(),
            Driver::Real => SystemClock.now_ms(),
        };
        let probe = AdapterProbe { exec: &exec, instance_id };
        let (_, report) = recover(&store, &creds, &probe, cfg.max_attempts, now)?;
        let recovered: Vec<String> = report
            .actions
            .iter()
            .filter_map(|a| match a {
                RecoveryAction::LeftFailed { .. } => None,
                RecoveryAction::Repoll { job_id, .. }
                | RecoveryAction::RepollRestage { job_id }
                | RecoveryAction::Adopted { job_id }
                | RecoveryAction::Reset { job_id, .. } => Some(job_id.clone()),
            })
            .collect();
        info!(instance = %instance_id, actions = report.actions.len(), "recovered");
        let rt = Runtime::assemble(store, exec, driver, cfg, ctx, creds, persisted.run_start_ms, recovered);
        {
            let max = rt.max_attempts();
            let mut st = relock(&rt.sched);
            for (id, e) in rt.store.job_index() {
                if e.state != JobState::Ready && !e.is_terminal(max) {
                    st.active.insert(id);
                }
            }
        }
        Ok((rt, report))
    }

    /// Jobs touched by recovery when this runtime was resumed.
    pub fn recovered_jobs(&self) -> &[String] {
        &self.recovered
    }

    /// Runs until every job is DONE or terminally FAILED, the deadline
    /// passes, or nothing can make progress. Writes the report to the
    /// output directory.
    pub fn run(&self) -> Result<RunReport, RunError> {
        match &self.driver {
            Driver::Virtual(c) => self.run_virtual(c)?,
            Driver::Real => self.run_real()?,
        }
        self.bus.close();
        let report = RunReport::collect(self, self.now_ms())?;
        report.write(&self.cfg.out_dir)?;
        Ok(report)
    }

    /// Checks for the end of the run; returns true when the loop should stop.
    fn check_end(&self, now: u64) -> Result<bool, RunError> {
        if self.is_finished() {
            return Ok(true);
        }
        if self.deadline_ms().is_some_and(|d| now >= d) {
            let n = self.abandon_unfinished("deadline expired", now)?;
            warn!(jobs = n, "deadline expired");
            return Ok(true);
        }
        let stall = secs_to_ms(self.cfg.stall_timeout_s);
        if self.store.in_flight_count() == 0 && now.saturating_sub(self.last_progress_ms.load(Ordering::SeqCst)) >= stall {
            let n = self.abandon_unfinished("no schedulable server", now)?;
            warn!(jobs = n, "no progress; giving up");
            return Ok(true);
        }
        Ok(false)
    }

    fn run_virtual(&self, clock: &VirtualClock) -> Result<(), RunError> {
        let interval = self.cfg.poll_interval_ms();
        loop {
            let now = clock.now_ms();
            if self.check_end(now)? {
                return Ok(());
            }
            if now >= self.next_probe_due() {
                self.service_monitor_tick(now)?;
            }
            self.monitor_tick(now)?;
            self.schedule_tick(now)?;
            if self.is_finished() {
                return Ok(());
            }
            let mut next = now + interval;
            if let Some(d) = self.next_poll_due() {
                next = next.min(d);
            }
            next = next.min(self.next_probe_due());
            if let Some(d) = self.deadline_ms() {
                next = next.min(d);
            }
            clock.advance_to(next.max(now + 1));
        }
    }

    fn run_real(&self) -> Result<(), RunError> {
        let stop = AtomicBool::new(false);
        let halt = Signal::default();
        let wake = Signal::default();
        let failure: Mutex<Option<RunError>> = Mutex::new(None);
        let interval = Duration::from_secs_f64(self.cfg.poll_interval_s);
        let fail = |e: RunError| {
            error!(error = %e, "worker stopped");
            relock(&failure).get_or_insert(e);
            stop.store(true, Ordering::SeqCst);
            halt.notify();
        };

        let outcome = std::thread::scope(|s| {
            let workers = [
                std::thread::Builder::new().name("scheduler".into()).spawn_scoped(s, || {
                    while !stop.load(Ordering::SeqCst) {
                        if let Err(e) = self.schedule_tick(self.now_ms()) {
                            return fail(e);
                        }
                        wake.wait(interval);
                    }
                }),
                std::thread::Builder::new().name("job-monitor".into()).spawn_scoped(s, || {
                    while !stop.load(Ordering::SeqCst) {
                        match self.monitor_tick(self.now_ms()) {
                            Ok(ev) => {
                                if ev.iter().any(|e| matches!(e.new_state, JobState::Ready | JobState::Done | JobState::Failed)) {
                                    wake.notify();
                                }
                            }
                            Err(e) => return fail(e),
                        }
                        let now = self.now_ms();
                        let until = self.next_poll_due().map_or(250, |d| d.saturating_sub(now)).clamp(10, 250);
                        halt.wait(Duration::from_millis(until));
                    }
                }),
                std::thread::Builder::new().name("service-monitor".into()).spawn_scoped(s, || {
                    while !stop.load(Ordering::SeqCst) {
                        let now = self.now_ms();
                        if now >= self.next_probe_due() {
                            if let Err(e) = self.service_monitor_tick(now) {
                                return fail(e);
                            }
                        }
                        let wait = self.next_probe_due().saturating_sub(self.now_ms()).clamp(10, 1000);
                        halt.wait(Duration::from_millis(wait));
                    }
                }),
            ];
            let mut ended = Ok(false);
            while !stop.load(Ordering::SeqCst) {
                if self.is_finished() {
                    ended = Ok(true);
                    break;
                }
                std::thread::sleep(Duration::from_millis(20));
                let now = self.now_ms();
                let expired = self.deadline_ms().is_some_and(|d| now >= d);
                let stalled = self.store.in_flight_count() == 0
                    && now.saturating_sub(self.last_progress_ms.load(Ordering::SeqCst)) >= secs_to_ms(self.cfg.stall_timeout_s);
                if expired || stalled {
                    break;
                }
            }
            stop.store(true, Ordering::SeqCst);
            halt.notify();
            wake.notify();
            for w in workers {
                match w {
                    Ok(h) => {
                        if h.join().is_err() {
                            relock(&failure).get_or_insert(RunError::WorkerPanic("worker".into()));
                        }
                    }
                    Err(e) => {
                        relock(&failure).get_or_insert(RunError::Io(e));
                    }
                }
            }
            ended
        });
        if let Some(e) = relock(&failure).take() {
            return Err(e);
        }
        match outcome {
            Ok(true) => Ok(()),
            Ok(false) => {
                // Workers are stopped; settle the remaining jobs.
                self.check_end(self.now_ms()).map(|_| ())
            }
            Err(e) => Err(e),
        }
    }
}

/// Latest instant recorded on any job.
fn latest_timestamp(store: &Store) -> Result<u64, StoreError> {
    let mut latest = 0;
    for (id, _) in store.job_index() {
        if let Some(j) = store.get_job(&id)? {
            latest = latest.max(j.timestamps.values().copied().max().unwrap_or(0));
        }
    }
    Ok(latest)
}
