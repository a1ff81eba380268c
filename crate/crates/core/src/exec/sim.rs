//! Simulated middleware. Every random draw comes from a generator seeded by
//! (seed, job, attempt, phase), so outcomes do not depend on call order.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::{Mutex, MutexGuard};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use super::agent::{AgentManifest, StepKind, StepRecord, MANIFEST, STDERR, STDOUT};
use super::{
    Adapter, CopyTarget, ExecError, JobWrapper, OutputSpec, RemoteStatus, Retrieved, ServerFacts, StageManifest,
    StagedFile, Timed, RETRIEVED_MARKER,
};
use crate::clock::secs_to_ms;
use crate::model::{AdapterKind, ComputeServer, RemoteHandle, StagingMode};

/// A duration distribution in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dist {
    Constant(f64),
    Uniform(f64, f64),
    /// Exponential with the given mean.
    Exp(f64),
}

impl Dist {
    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        let v = match *self {
            Dist::Constant(c) => c,
            Dist::Uniform(a, b) if b > a => rng.random_range(a..b),
            Dist::Uniform(a, _) => a,
            Dist::Exp(mean) if mean > 0.0 => Exp::new(1.0 / mean).map_or(mean, |d| d.sample(rng)),
            Dist::Exp(_) => 0.0,
        };
        v.max(0.0)
    }

    pub fn mean(&self) -> f64 {
        match *self {
            Dist::Constant(c) => c,
            Dist::Uniform(a, b) => (a + b) / 2.0,
            Dist::Exp(m) => m,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimClock {
    Real,
    #[default]
    Virtual,
}

/// Failure probabilities per phase.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FailureRates {
    pub submit: f64,
    pub stage_in: f64,
    pub run: f64,
    pub poll: f64,
    pub stage_out: f64,
    /// Job exits 0 but leaves its expected outputs unwritten.
    pub missing_output: f64,
    pub probe: f64,
}

/// Per-server overrides.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerModel {
    pub submit_latency_s: Option<Dist>,
    pub queue_wait_s: Option<Dist>,
    pub run_time_s: Option<Dist>,
    /// Divides modeled execution time.
    pub speed: Option<f64>,
    pub architecture: Option<String>,
    pub os: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultKind {
    SubmitFail,
    StageInFail,
    /// The run exits with `code` (default 1).
    RunFail,
    /// `count` consecutive polls fail with a transport error.
    PollFail,
    MissingOutput,
    StageOutFail,
    CleanupFail,
    /// The job vanishes from the middleware.
    Lost,
}

/// A fault aimed at one job, optionally at one attempt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptedFault {
    pub job: String,
    #[serde(default)]
    pub attempt: Option<u32>,
    pub kind: FaultKind,
    #[serde(default)]
    pub count: Option<u32>,
    #[serde(default)]
    pub code: Option<i32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub seed: u64,
    pub clock: SimClock,
    pub submit_latency_s: Dist,
    pub queue_wait_s: Dist,
    /// Run time of an execute step the simulator cannot interpret.
    pub run_time_s: Dist,
    pub stage_out_s: Dist,
    pub poll_latency_s: Dist,
    pub probe_latency_s: Dist,
    pub failures: FailureRates,
    pub servers: BTreeMap<String, ServerModel>,
    pub faults: Vec<ScriptedFault>,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            seed: 0,
            clock: SimClock::Virtual,
            submit_latency_s: Dist::Constant(1.0),
            queue_wait_s: Dist::Constant(0.0),
            run_time_s: Dist::Constant(1.0),
            stage_out_s: Dist::Constant(1.0),
            poll_latency_s: Dist::Constant(0.1),
            probe_latency_s: Dist::Constant(0.1),
            failures: FailureRates::default(),
            servers: BTreeMap::new(),
            faults: Vec::new(),
        }
    }
}

impl SimConfig {
    pub fn from_toml(text: &str) -> Result<SimConfig, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn load(path: &Path) -> Result<SimConfig, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        SimConfig::from_toml(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    fn server(&self, id: &str) -> Option<&ServerModel> {
        self.servers.get(id)
    }
}

/// A transfer as seen by the simulated network.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferRecord {
    pub job_id: String,
    pub attempt: u32,
    pub file: String,
    pub bytes: u64,
    pub at_ms: u64,
}

#[derive(Debug, Clone)]
struct SimJob {
    job_id: String,
    attempt: u32,
    start_ms: u64,
    end_ms: u64,
    exit: i32,
    missing_output: bool,
    steps: Vec<StepRecord>,
    polls: u32,
}

/// Modeled timeline of one accepted submission.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Timeline {
    pub handle_ms: u64,
    pub start_ms: u64,
    pub end_ms: u64,
    pub exit: i32,
}

#[derive(Default)]
struct WorldState {
    jobs: BTreeMap<String, SimJob>,
    workdirs: BTreeMap<String, String>,
    timelines: BTreeMap<String, Timeline>,
    executions: BTreeMap<String, u32>,
    transfers: Vec<TransferRecord>,
    used_faults: BTreeMap<usize, u32>,
    probe_down: BTreeSet<String>,
    probes: BTreeMap<String, u64>,
}

/// The simulated grid: outlives broker incarnations so recovery can be
/// checked against it.
pub struct SimWorld {
    cfg: SimConfig,
    state: Mutex<WorldState>,
}

impl std::fmt::Debug for SimWorld {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SimWorld").field("seed", &self.cfg.seed).finish()
    }
}

fn hash_parts(seed: u64, parts: &[&str]) -> u64 {
    let mut lo = crc32fast::Hasher::new_with_initial(seed as u32);
    let mut hi = crc32fast::Hasher::new_with_initial((seed >> 32) as u32 ^ 0x9e37_79b9);
    for p in parts {
        lo.update(p.as_bytes());
        lo.update(&[0]);
        hi.update(&[0xff]);
        hi.update(p.as_bytes());
    }
    (u64::from(hi.finalize()) << 32) | u64::from(lo.finalize())
}

impl SimWorld {
    pub fn new(cfg: SimConfig) -> Self {
        SimWorld { cfg, state: Mutex::new(WorldState::default()) }
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    fn lock(&self) -> MutexGuard<'_, WorldState> {
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn rng(&self, parts: &[&str]) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(hash_parts(self.cfg.seed, parts))
    }

    fn roll(&self, p: f64, parts: &[&str]) -> bool {
        p > 0.0 && self.rng(parts).random::<f64>() < p
    }

    /// Consumes one use of a matching scripted fault.
    fn scripted(&self, st: &mut WorldState, job: &str, attempt: u32, kind: FaultKind) -> Option<ScriptedFault> {
        for (i, f) in self.cfg.faults.iter().enumerate() {
            if f.kind != kind || f.job != job || f.attempt.is_some_and(|a| a != attempt) {
                continue;
            }
            let used = st.used_faults.entry(i).or_insert(0);
            if *used < f.count.unwrap_or(1) {
                *used += 1;
                return Some(f.clone());
            }
        }
        None
    }

    fn pause(&self, ms: u64) {
        if self.cfg.clock == SimClock::Real && ms > 0 {
            std::thread::sleep(std::time::Duration::from_millis(ms));
        }
    }

    /// Number of accepted submissions of `job_id`.
    pub fn executions(&self, job_id: &str) -> u32 {
        self.lock().executions.get(job_id).copied().unwrap_or(0)
    }

    pub fn execution_counts(&self) -> BTreeMap<String, u32> {
        self.lock().executions.clone()
    }

    pub fn transfers(&self) -> Vec<TransferRecord> {
        self.lock().transfers.clone()
    }

    /// Modeled timeline of the latest accepted submission of `job_id`.
    pub fn timeline(&self, job_id: &str) -> Option<Timeline> {
        self.lock().timelines.get(job_id).copied()
    }

    /// Makes probes of `server_id` fail until cleared.
    pub fn set_probe_failure(&self, server_id: &str, failing: bool) {
        let mut st = self.lock();
        if failing {
            st.probe_down.insert(server_id.to_string());
        } else {
            st.probe_down.remove(server_id);
        }
    }

    /// Removes a job from the middleware, as if the site lost it.
    pub fn remove_job(&self, token: &str) {
        self.lock().jobs.remove(token);
    }

    /// Modeled duration of one execute step.
    fn step_duration(&self, shell: &str, job: &str, attempt: u32, k: usize, server: &str) -> (f64, i32) {
        let mut words = shell.split_whitespace();
        let head = words.next().unwrap_or_default();
        let arg = words.next();
        let speed = self.cfg.server(server).and_then(|m| m.speed).filter(|s| *s > 0.0).unwrap_or(1.0);
        match head {
            "sleep" => (arg.and_then(|a| a.parse::<f64>().ok()).unwrap_or(0.0) / speed, 0),
            "true" | ":" => (0.0, 0),
            "false" => (0.0, 1),
            "fail" | "exit" => (0.0, arg.and_then(|a| a.parse().ok()).unwrap_or(1)),
            _ => {
                let d = self.cfg.server(server).and_then(|m| m.run_time_s).unwrap_or(self.cfg.run_time_s);
                (d.sample(&mut self.rng(&[job, &attempt.to_string(), "run_time", &k.to_string()])) / speed, 0)
            }
        }
    }
}

/// Turns an output pattern into a concrete file name.
fn concretize(pattern: &str) -> String {
    let mut out = String::new();
    let mut chars = pattern.chars();
    while let Some(c) = chars.next() {
        match c {
            '*' => out.push_str("out"),
            '?' => out.push('x'),
            '[' => {
                let mut first = None;
                for d in chars.by_ref() {
                    if d == ']' {
                        break;
                    }
                    if first.is_none() && d != '!' && d != '^' {
                        first = Some(d);
                    }
                }
                out.push(first.unwrap_or('x'));
            }
            _ => out.push(c),
        }
    }
    out
}

/// Adapter view over a shared simulated world.
pub struct SimAdapter {
    world: std::sync::Arc<SimWorld>,
}

impl SimAdapter {
    pub fn new(world: std::sync::Arc<SimWorld>) -> Self {
        SimAdapter { world }
    }
}

impl Adapter for SimAdapter {
    fn kind(&self) -> AdapterKind {
        AdapterKind::Sim
    }

    fn stage_in(&self, w: &JobWrapper, at_ms: u64) -> Result<Timed<StageManifest>, ExecError> {
        let world = &self.world;
        let a = w.attempt.to_string();
        let mut st = world.lock();
        if world.scripted(&mut st, &w.job_id, w.attempt, FaultKind::StageInFail).is_some()
            || world.roll(world.cfg.failures.stage_in, &[&w.job_id, &a, "stage_in"])
        {
            let name = w.staging_plan.first().map_or_else(|| "workdir".to_string(), |t| t.dest.clone());
            return Err(ExecError::TransferFailed(name, "injected stage-in failure".into()));
        }
        let mut manifest = StageManifest::default();
        let mut t = at_ms;
        if w.staging == StagingMode::Push {
            for tr in &w.staging_plan {
                let ms = secs_to_ms(crate::model::bytes_to_mb(tr.size_bytes) / tr.mbps.max(1e-9));
                st.transfers.push(TransferRecord {
                    job_id: w.job_id.clone(),
                    attempt: w.attempt,
                    file: tr.dest.clone(),
                    bytes: tr.size_bytes,
                    at_ms: t,
                });
                manifest.files.push(StagedFile { name: tr.dest.clone(), bytes: tr.size_bytes, duration_ms: ms, link: tr.link.clone() });
                t += ms;
            }
        }
        drop(st);
        world.pause(t - at_ms);
        Ok(Timed { value: manifest, end_ms: t })
    }

    fn submit(&self, w: &JobWrapper, at_ms: u64) -> Result<Timed<RemoteHandle>, ExecError> {
        let world = &self.world;
        let cfg = &world.cfg;
        let a = w.attempt.to_string();
        let model = cfg.server(&w.server_id);
        let mut st = world.lock();
        if world.scripted(&mut st, &w.job_id, w.attempt, FaultKind::SubmitFail).is_some()
            || world.roll(cfg.failures.submit, &[&w.job_id, &a, "submit"])
        {
            return Err(ExecError::SubmitFailed("injected submit failure".into()));
        }
        let latency = model.and_then(|m| m.submit_latency_s).unwrap_or(cfg.submit_latency_s);
        let handle_ms = at_ms + secs_to_ms(latency.sample(&mut world.rng(&[&w.job_id, &a, "submit_latency"])));
        let wait = model.and_then(|m| m.queue_wait_s).unwrap_or(cfg.queue_wait_s);
        let start_ms = handle_ms + secs_to_ms(wait.sample(&mut world.rng(&[&w.job_id, &a, "queue_wait"])));

        let mut t = start_ms;
        let mut steps = Vec::new();
        let mut exit = 0;
        let mut fetches = w.staging_plan.iter();
        for (k, step) in w.agent.steps.iter().enumerate() {
            let (dur_s, code) = match step.kind {
                StepKind::Fetch => match fetches.next() {
                    Some(tr) => {
                        st.transfers.push(TransferRecord {
                            job_id: w.job_id.clone(),
                            attempt: w.attempt,
                            file: tr.dest.clone(),
                            bytes: tr.size_bytes,
                            at_ms: t,
                        });
                        (crate::model::bytes_to_mb(tr.size_bytes) / tr.mbps.max(1e-9), 0)
                    }
                    None => (0.0, 0),
                },
                StepKind::Execute => world.step_duration(&step.shell, &w.job_id, w.attempt, k, &w.server_id),
                StepKind::Check | StepKind::Substitute => (0.0, 0),
            };
            let end = t + secs_to_ms(dur_s);
            steps.push(StepRecord { step: k as u32 + 1, cmd: step.label.clone(), exit: code, start_ms: t, end_ms: end });
            t = end;
            if code != 0 {
                exit = code;
                break;
            }
        }
        if exit == 0 {
            let forced = world.scripted(&mut st, &w.job_id, w.attempt, FaultKind::RunFail);
            if forced.is_some() || world.roll(cfg.failures.run, &[&w.job_id, &a, "run"]) {
                exit = forced.and_then(|f| f.code).unwrap_or(1);
                if let Some(last) = steps.last_mut() {
                    last.exit = exit;
                }
            }
        }
        let missing_output = exit == 0
            && (world.scripted(&mut st, &w.job_id, w.attempt, FaultKind::MissingOutput).is_some()
                || world.roll(cfg.failures.missing_output, &[&w.job_id, &a, "missing_output"]));

        let token = format!("sim:{}", w.remote_workdir);
        st.jobs.insert(
            token.clone(),
            SimJob { job_id: w.job_id.clone(), attempt: w.attempt, start_ms, end_ms: t, exit, missing_output, steps, polls: 0 },
        );
        st.workdirs.insert(w.remote_workdir.clone(), token.clone());
        st.timelines.insert(w.job_id.clone(), Timeline { handle_ms, start_ms, end_ms: t, exit });
        *st.executions.entry(w.job_id.clone()).or_insert(0) += 1;
        drop(st);
        world.pause(handle_ms - at_ms);
        Ok(Timed {
            value: RemoteHandle { adapter: AdapterKind::Sim, token, workdir: w.remote_workdir.clone() },
            end_ms: handle_ms,
        })
    }

    fn poll(&self, h: &RemoteHandle, at_ms: u64) -> Result<Timed<RemoteStatus>, ExecError> {
        let world = &self.world;
        let mut st = world.lock();
        let Some(job) = st.jobs.get_mut(&h.token) else {
            let end = at_ms + secs_to_ms(world.cfg.poll_latency_s.mean());
            return Ok(Timed { value: RemoteStatus::Lost, end_ms: end });
        };
        job.polls += 1;
        let (job_id, attempt, polls) = (job.job_id.clone(), job.attempt, job.polls);
        let a = attempt.to_string();
        let latency = world.cfg.poll_latency_s.sample(&mut world.rng(&[&job_id, &a, "poll_latency", &polls.to_string()]));
        let end_ms = at_ms + secs_to_ms(latency);
        if world.scripted(&mut st, &job_id, attempt, FaultKind::PollFail).is_some()
            || world.roll(world.cfg.failures.poll, &[&job_id, &a, "poll", &polls.to_string()])
        {
            drop(st);
            world.pause(end_ms - at_ms);
            return Err(ExecError::PollFailed("injected transport error".into()));
        }
        if world.scripted(&mut st, &job_id, attempt, FaultKind::Lost).is_some() {
            st.jobs.remove(&h.token);
            return Ok(Timed { value: RemoteStatus::Lost, end_ms });
        }
        let job = &st.jobs[&h.token];
        let status = if at_ms < job.start_ms {
            RemoteStatus::Queued
        } else if at_ms < job.end_ms {
            RemoteStatus::Running
        } else {
            RemoteStatus::Exited(job.exit)
        };
        drop(st);
        world.pause(end_ms - at_ms);
        Ok(Timed { value: status, end_ms })
    }

    fn stage_out_and_cleanup(
        &self,
        h: &RemoteHandle,
        outputs: &OutputSpec,
        dest: &Path,
        at_ms: u64,
    ) -> Result<Timed<Retrieved>, ExecError> {
        let world = &self.world;
        let mut st = world.lock();
        let job = st.jobs.get(&h.token).cloned().ok_or_else(|| ExecError::RetrieveFailed(format!("{} is gone", h.token)))?;
        let a = job.attempt.to_string();
        if world.scripted(&mut st, &job.job_id, job.attempt, FaultKind::StageOutFail).is_some()
            || world.roll(world.cfg.failures.stage_out, &[&job.job_id, &a, "stage_out"])
        {
            return Err(ExecError::RetrieveFailed("injected stage-out failure".into()));
        }
        let cleanup_fails = world.scripted(&mut st, &job.job_id, job.attempt, FaultKind::CleanupFail).is_some();
        let dur = world.cfg.stage_out_s.sample(&mut world.rng(&[&job.job_id, &a, "stage_out_time"]));
        drop(st);

        std::fs::create_dir_all(dest)?;
        let manifest = AgentManifest { steps: job.steps.clone(), agent_exit: Some(job.exit) };
        std::fs::write(dest.join(MANIFEST), manifest.render())?;
        std::fs::write(dest.join(STDOUT), format!("simulated {} attempt {}\n", job.job_id, job.attempt))?;
        std::fs::write(dest.join(STDERR), "")?;
        let mut files = vec![MANIFEST.to_string(), STDOUT.to_string(), STDERR.to_string()];
        if job.exit == 0 && !job.missing_output {
            let mut names: Vec<String> = outputs.patterns.iter().map(|p| concretize(p)).collect();
            names.extend(outputs.copies.iter().map(|(src, _)| src.clone()));
            names.sort();
            names.dedup();
            for n in names {
                if n.contains('/') || files.contains(&n) {
                    continue;
                }
                std::fs::write(dest.join(&n), format!("{} {}\n", job.job_id, n))?;
                files.push(n);
            }
            for (src, target) in &outputs.copies {
                if let CopyTarget::Local(p) = target {
                    let to = if p.is_absolute() { p.clone() } else { dest.join(p) };
                    if to != dest.join(src) {
                        if let Some(parent) = to.parent() {
                            std::fs::create_dir_all(parent)?;
                        }
                        std::fs::copy(dest.join(src), &to)?;
                    }
                }
            }
        }
        std::fs::write(dest.join(RETRIEVED_MARKER), h.token.as_bytes())?;
        let mut st = world.lock();
        let cleanup_warning = if cleanup_fails {
            Some("injected cleanup failure".to_string())
        } else {
            st.jobs.remove(&h.token);
            None
        };
        drop(st);
        let end_ms = at_ms + secs_to_ms(dur);
        world.pause(end_ms - at_ms);
        Ok(Timed { value: Retrieved { files, manifest: Some(manifest), cleanup_warning }, end_ms })
    }

    fn probe(&self, server: &ComputeServer, at_ms: u64) -> Result<Timed<ServerFacts>, ExecError> {
        let world = &self.world;
        let mut st = world.lock();
        let n = {
            let c = st.probes.entry(server.service_id.clone()).or_insert(0);
            *c += 1;
            *c
        };
        let down = st.probe_down.contains(&server.service_id);
        drop(st);
        if down || world.roll(world.cfg.failures.probe, &[&server.service_id, "probe", &n.to_string()]) {
            return Err(ExecError::ProbeFailed(format!("{} unreachable (simulated)", server.service_id)));
        }
        let model = world.cfg.server(&server.service_id);
        let facts = ServerFacts {
            architecture: model.and_then(|m| m.architecture.clone()).unwrap_or_else(|| "x86_64".into()),
            os: model.and_then(|m| m.os.clone()).unwrap_or_else(|| "linux".into()),
        };
        Ok(Timed { value: facts, end_ms: at_ms + secs_to_ms(world.cfg.probe_latency_s.mean()) })
    }

    fn find_submission(&self, _job_id: &str, workdir: &str) -> Option<RemoteHandle> {
        let st = self.world.lock();
        let token = st.workdirs.get(workdir)?;
        Some(RemoteHandle { adapter: AdapterKind::Sim, token: token.clone(), workdir: workdir.to_string() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exec::{AgentScript, AgentStep, Transfer, TransferSource};
    use std::sync::Arc;

    fn wrapper(job: &str, steps: &[&str], staging: StagingMode, plan: Vec<Transfer>) -> JobWrapper {
        let mut agent_steps: Vec<AgentStep> = Vec::new();
        if staging == StagingMode::Pull {
            agent_steps.extend(plan.iter().map(|t| AgentStep::new(StepKind::Fetch, format!("fetch {}", t.dest))));
        }
        agent_steps.extend(steps.iter().map(|s| AgentStep::new(StepKind::Execute, *s)));
        JobWrapper {
            job_id: job.into(),
            attempt: 0,
            adapter: AdapterKind::Sim,
            server_id: "s1".into(),
            agent: AgentScript { steps: agent_steps },
            staging,
            staging_plan: plan,
            remote_workdir: format!("i/{job}.a0"),
            queue: None,
        }
    }

    fn input() -> Vec<Transfer> {
        vec![Transfer {
            source: TransferSource::Local("x".into()),
            dest: "in.dat".into(),
            size_bytes: 10_000_000,
            mbps: 10.0,
            link: ("broker".into(), "broker".into()),
        }]
    }

    #[test]
    fn timeline_follows_steps() {
        let world = Arc::new(SimWorld::new(SimConfig { submit_latency_s: Dist::Constant(2.0), ..Default::default() }));
        let a = SimAdapter::new(world.clone());
        let w = wrapper("j1", &["sleep 30"], StagingMode::Push, vec![]);
        let h = a.submit(&w, 1_000).unwrap();
        assert_eq!(h.end_ms, 3_000);
        assert_eq!(a.poll(&h.value, 3_000).unwrap().value, RemoteStatus::Running);
        assert_eq!(a.poll(&h.value, 32_999).unwrap().value, RemoteStatus::Running);
        assert_eq!(a.poll(&h.value, 33_000).unwrap().value, RemoteStatus::Exited(0));
        assert_eq!(world.executions("j1"), 1);
        let out = tempfile::tempdir().unwrap();
        let spec = OutputSpec { patterns: vec!["out.*.dat".into()], copies: vec![] };
        let r = a.stage_out_and_cleanup(&h.value, &spec, out.path(), 40_000).unwrap().value;
        assert!(r.files.contains(&"out.out.dat".to_string()));
        assert_eq!(a.poll(&h.value, 50_000).unwrap().value, RemoteStatus::Lost);
        assert!(a.find_submission("j1", "i/j1.a0").is_some());
    }

    #[test]
    fn queue_wait_shows_queued() {
        let world = Arc::new(SimWorld::new(SimConfig { queue_wait_s: Dist::Constant(10.0), submit_latency_s: Dist::Constant(0.0), ..Default::default() }));
        let a = SimAdapter::new(world);
        let h = a.submit(&wrapper("j1", &["sleep 1"], StagingMode::Push, vec![]), 0).unwrap().value;
        assert_eq!(a.poll(&h, 5_000).unwrap().value, RemoteStatus::Queued);
    }

    #[test]
    fn pull_transfers_happen_at_run_start() {
        let world = Arc::new(SimWorld::new(SimConfig { queue_wait_s: Dist::Constant(5.0), submit_latency_s: Dist::Constant(1.0), ..Default::default() }));
        let a = SimAdapter::new(world.clone());
        let w = wrapper("j1", &["sleep 1"], StagingMode::Pull, input());
        assert!(a.stage_in(&w, 0).unwrap().value.files.is_empty());
        assert!(world.transfers().is_empty());
        a.submit(&w, 0).unwrap();
        assert_eq!(world.transfers()[0].at_ms, 6_000);
        assert_eq!(world.timeline("j1").unwrap().end_ms, 6_000 + 1_000 + 1_000);

        let w = wrapper("j2", &["sleep 1"], StagingMode::Push, input());
        let staged = a.stage_in(&w, 100).unwrap();
        assert_eq!(staged.end_ms, 1_100);
        assert_eq!(world.transfers()[1].at_ms, 100);
    }

    #[test]
    fn same_seed_same_outcomes() {
        let cfg = SimConfig {
            seed: 42,
            run_time_s: Dist::Exp(20.0),
            failures: FailureRates { run: 0.3, poll: 0.2, ..Default::default() },
            ..Default::default()
        };
        let run = |cfg: &SimConfig| {
            let a = SimAdapter::new(Arc::new(SimWorld::new(cfg.clone())));
            (0..20)
                .map(|i| {
                    let h = a.submit(&wrapper(&format!("j{i}"), &["work"], StagingMode::Push, vec![]), 0).unwrap().value;
                    let polls: Vec<_> = (0..5).map(|k| a.poll(&h, k * 10_000).map(|t| t.value).ok()).collect();
                    polls
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(run(&cfg), run(&cfg));
        assert_ne!(run(&cfg), run(&SimConfig { seed: 43, ..cfg.clone() }));
    }

    #[test]
    fn scripted_faults() {
        let cfg = SimConfig {
            faults: vec![
                ScriptedFault { job: "j1".into(), attempt: Some(0), kind: FaultKind::PollFail, count: Some(2), code: None },
                ScriptedFault { job: "j1".into(), attempt: None, kind: FaultKind::MissingOutput, count: None, code: None },
                ScriptedFault { job: "j2".into(), attempt: None, kind: FaultKind::SubmitFail, count: None, code: None },
            ],
            ..Default::default()
        };
        let a = SimAdapter::new(Arc::new(SimWorld::new(cfg)));
        let h = a.submit(&wrapper("j1", &["true"], StagingMode::Push, vec![]), 0).unwrap().value;
        assert!(a.poll(&h, 10_000).is_err());
        assert!(a.poll(&h, 20_000).is_err());
        assert_eq!(a.poll(&h, 30_000).unwrap().value, RemoteStatus::Exited(0));
        let out = tempfile::tempdir().unwrap();
        let spec = OutputSpec { patterns: vec!["r.dat".into()], copies: vec![] };
        let r = a.stage_out_and_cleanup(&h, &spec, out.path(), 31_000).unwrap().value;
        assert!(!r.files.contains(&"r.dat".to_string()));
        assert!(a.submit(&wrapper("j2", &["true"], StagingMode::Push, vec![]), 0).is_err());
        // The fault is used up.
        assert!(a.submit(&wrapper("j2", &["true"], StagingMode::Push, vec![]), 0).is_ok());
    }

    #[test]
    fn config_from_toml() {
        let cfg = SimConfig::from_toml(
            r#"
            seed = 7
            submit_latency_s = { uniform = [1.0, 2.0] }
            run_time_s = { exp = 30.0 }
            [failures]
            poll = 0.1
            [servers.s1]
            speed = 2.0
            [[faults]]
            job = "j000001"
            kind = "run_fail"
            code = 4
            "#,
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.submit_latency_s, Dist::Uniform(1.0, 2.0));
        assert_eq!(cfg.servers["s1"].speed, Some(2.0));
        assert_eq!(cfg.faults[0].code, Some(4));
        assert!(SimConfig::from_toml("bogus = 1").is_err());
    }

    #[test]
    fn concretized_names_match_their_pattern() {
        for p in ["out.*.dat", "r?.txt", "x[abc].log", "plain"] {
            assert!(glob::Pattern::new(p).unwrap().matches(&concretize(p)), "{p}");
        }
    }
}
