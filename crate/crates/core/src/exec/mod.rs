//! Execution layer: job wrappers, the adapter contract and its local, ssh
//! and simulated implementations.

pub mod agent;
mod shell;
pub mod sim;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{mpsc, Arc};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    substitute, AdapterKind, ComputeServer, Credential, DataProtocol, Endpoint, Job, JobState, Mapping, RemoteHandle,
    Service, StagingMode, SubstError, Task, TaskCommand, BROKER_ENDPOINT,
};
use crate::sched::{job_inputs, GridView, InputRef};

pub use agent::{AgentManifest, AgentScript, AgentStep, StepKind, StepRecord};
pub use shell::{LocalTransport, ShellAdapter, SshTransport, Transport};
pub use sim::{Dist, FaultKind, SimAdapter, SimConfig, SimWorld};

/// Default limit on one remote operation.
pub const DEFAULT_OP_TIMEOUT: Duration = Duration::from_secs(30);

/// Local marker written once a job's outputs are safely retrieved.
pub const RETRIEVED_MARKER: &str = ".retrieved";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExecError {
    #[error(transparent)]
    UnboundVariable(#[from] SubstError),
    #[error("unsupported adapter: {0}")]
    UnsupportedAdapter(String),
    #[error("transfer of {0} failed: {1}")]
    TransferFailed(String, String),
    #[error("submit failed: {0}")]
    SubmitFailed(String),
    #[error("{0} timed out")]
    Timeout(String),
    #[error("poll failed: {0}")]
    PollFailed(String),
    #[error("retrieve failed: {0}")]
    RetrieveFailed(String),
    #[error("probe failed: {0}")]
    ProbeFailed(String),
    #[error("{0}")]
    Io(String),
}

impl From<std::io::Error> for ExecError {
    fn from(e: std::io::Error) -> Self {
        ExecError::Io(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", content = "code", rename_all = "lowercase")]
pub enum RemoteStatus {
    Queued,
    Running,
    Exited(i32),
    Lost,
}

/// Where an input comes from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransferSource {
    /// A file on the broker machine.
    Local(PathBuf),
    DataHost { id: String, protocol: DataProtocol, uri: String, path: String },
}

impl TransferSource {
    /// Link endpoint the data leaves from.
    pub fn endpoint(&self) -> &str {
        match self {
            TransferSource::Local(_) => BROKER_ENDPOINT,
            TransferSource::DataHost { id, .. } => id,
        }
    }
}

/// One input to place in the working directory.
#[derive(Debug, Clone, PartialEq)]
pub struct Transfer {
    pub source: TransferSource,
    /// Name relative to the working directory.
    pub dest: String,
    pub size_bytes: u64,
    /// Modeled bandwidth of the link carrying it, MB/s.
    pub mbps: f64,
    /// Link (from, to) the transfer is measured against.
    pub link: (String, String),
}

/// Measured transfer of one staged file.
#[derive(Debug, Clone, PartialEq)]
pub struct StagedFile {
    pub name: String,
    pub bytes: u64,
    pub duration_ms: u64,
    pub link: (String, String),
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct StageManifest {
    pub files: Vec<StagedFile>,
}

/// What stage-out should bring back for one job.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OutputSpec {
    /// Expected output patterns, substituted, relative to the workdir.
    pub patterns: Vec<String>,
    /// Explicit remote-to-local copies: (remote name, local destination).
    pub copies: Vec<(String, CopyTarget)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CopyTarget {
    /// Path relative to the job's result directory, or absolute.
    Local(PathBuf),
    DataHost { id: String, path: String },
}

/// Files brought back by stage-out.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Retrieved {
    /// Names relative to the result directory.
    pub files: Vec<String>,
    pub manifest: Option<AgentManifest>,
    pub cleanup_warning: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ServerFacts {
    pub architecture: String,
    pub os: String,
}

/// An adapter result with the instant the operation finished.
#[derive(Debug, Clone, PartialEq)]
pub struct Timed<T> {
    pub value: T,
    pub end_ms: u64,
}

/// Adapter-specific translation of one job, built at dispatch and dropped
/// once a handle is obtained.
#[derive(Debug, Clone)]
pub struct JobWrapper {
    pub job_id: String,
    pub attempt: u32,
    pub adapter: AdapterKind,
    pub server_id: String,
    pub agent: AgentScript,
    pub staging: StagingMode,
    pub staging_plan: Vec<Transfer>,
    /// Working directory relative to the adapter's base directory.
    pub remote_workdir: String,
    pub queue: Option<String>,
}

/// Workdir name, unique per (instance, job, attempt).
pub fn workdir_for(instance_id: &str, job_id: &str, attempt: u32) -> String {
    format!("{instance_id}/{job_id}.a{attempt}")
}

/// Everything `make_wrapper` needs besides the job itself.
pub struct WrapContext<'a> {
    pub instance_id: &'a str,
    pub task: &'a Task,
    pub view: &'a GridView,
    /// Directory that relative broker-local paths and templates resolve against.
    pub base_dir: &'a Path,
}

fn local_path(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Absolute path of a file on a file-system data host.
pub fn datahost_local_path(uri: &str, path: &str) -> PathBuf {
    let root = uri.strip_prefix("file://").unwrap_or(uri);
    Path::new(root).join(path.trim_start_matches('/'))
}

fn fetch_shell(t: &Transfer) -> Result<String, ExecError> {
    use agent::sh_quote;
    let dest = sh_quote(&t.dest);
    match &t.source {
        TransferSource::Local(p) => Ok(format!("cp {} {dest}", sh_quote(&p.to_string_lossy()))),
        TransferSource::DataHost { protocol: DataProtocol::Localfs, uri, path, .. } => {
            Ok(format!("cp {} {dest}", sh_quote(&datahost_local_path(uri, path).to_string_lossy())))
        }
        TransferSource::DataHost { protocol: DataProtocol::Sftp, uri, path, .. } => {
            let host = uri.strip_prefix("sftp://").unwrap_or(uri).split('/').next().unwrap_or_default();
            Ok(format!("scp -q -o BatchMode=yes {} {dest}", sh_quote(&format!("{host}:{path}"))))
        }
        TransferSource::DataHost { protocol: DataProtocol::Sim, id, .. } => {
            Err(ExecError::UnsupportedAdapter(format!("simulated data host {id} cannot be fetched by a shell agent")))
        }
    }
}

/// Builds the adapter-specific wrapper for a job about to be dispatched.
pub fn make_wrapper(
    job: &Job,
    mapping: &Mapping,
    server: &ComputeServer,
    cred: Option<&Credential>,
    wc: &WrapContext,
) -> Result<JobWrapper, ExecError> {
    if !matches!(job.state, JobState::Scheduled | JobState::StageIn) {
        return Err(ExecError::SubmitFailed(format!("job {} is {} rather than SCHEDULED", job.job_id, job.state)));
    }
    if server.adapter == AdapterKind::Ssh && cred.is_none() {
        return Err(ExecError::UnsupportedAdapter(format!("ssh server {} has no credential", server.service_id)));
    }
    let b = &job.bindings;
    let jid = &job.job_id;
    let endpoint = crate::sched::transfer_endpoint(server).to_string();

    let to_transfer = |source: TransferSource, dest: String, size: u64| {
        let from = source.endpoint().to_string();
        let link = wc.view.links.lookup(&endpoint, &from);
        Transfer { source, dest, size_bytes: size, mbps: link.effective_mbps(), link: (endpoint.clone(), from) }
    };
    let host_source = |id: &str, path: &str| -> Result<(TransferSource, u64), ExecError> {
        let h = wc
            .view
            .datahosts
            .get(id)
            .ok_or_else(|| ExecError::TransferFailed(path.to_string(), format!("unknown data host {id}")))?;
        let size = h.file_by_path(path).map_or(0, |f| f.size_bytes);
        let src = TransferSource::DataHost { id: id.to_string(), protocol: h.protocol, uri: h.uri.clone(), path: path.to_string() };
        Ok((src, size))
    };

    // Implicit inputs for gridfile bindings, then explicit copies by position.
    let mut implicit = Vec::new();
    let mut explicit = BTreeMap::new();
    let inputs = job_inputs(job, wc.task)?;
    for input in &inputs {
        match input {
            InputRef::Logical { name, staged_as } => {
                let dh = mapping
                    .data_selection
                    .get(name)
                    .ok_or_else(|| ExecError::TransferFailed(name.clone(), "no data host selected".into()))?;
                let replica = wc
                    .view
                    .replicas
                    .replicas(name)
                    .iter()
                    .find(|r| &r.datahost == dh)
                    .ok_or_else(|| ExecError::TransferFailed(name.clone(), format!("{dh} holds no replica")))?;
                let (src, _) = host_source(dh, &replica.path)?;
                implicit.push(to_transfer(src, staged_as.clone(), replica.size_bytes));
            }
            InputRef::Fixed { datahost, path, dest } => {
                let (src, size) = host_source(datahost, path)?;
                explicit.insert(dest.clone(), to_transfer(src, dest.clone(), size));
            }
            InputRef::Local { path, dest } => {
                let p = local_path(wc.base_dir, path);
                let size = std::fs::metadata(&p).map_or(0, |m| m.len());
                explicit.insert(dest.clone(), to_transfer(TransferSource::Local(p), dest.clone(), size));
            }
        }
    }

    let pull = server.staging == StagingMode::Pull;
    let shell_agent = server.adapter != AdapterKind::Sim;
    let mut steps = Vec::new();
    if pull {
        for t in &implicit {
            let shell = if shell_agent { fetch_shell(t)? } else { format!("fetch {}", t.dest) };
            steps.push(AgentStep::new(StepKind::Fetch, shell));
        }
    }
    for cmd in &wc.task.commands {
        match cmd {
            TaskCommand::Copy { source: _, dest: Endpoint::Remote(d) } => {
                let dest = substitute(d, b, jid)?;
                let t = &explicit[&dest];
                if pull {
                    let shell = if shell_agent { fetch_shell(t)? } else { format!("fetch {}", t.dest) };
                    steps.push(AgentStep::new(StepKind::Fetch, shell));
                } else {
                    steps.push(AgentStep::new(StepKind::Check, format!("test -e {}", agent::sh_quote(&dest))));
                }
            }
            TaskCommand::Copy { source: Endpoint::Remote(s), .. } => {
                let src = substitute(s, b, jid)?;
                steps.push(AgentStep::new(StepKind::Check, format!("test -e {}", agent::sh_quote(&src))));
            }
            TaskCommand::Copy { .. } => {}
            TaskCommand::Substitute { template, dest } => {
                let tpath = local_path(wc.base_dir, &substitute(template, b, jid)?);
                let text = std::fs::read_to_string(&tpath)
                    .map_err(|e| ExecError::TransferFailed(tpath.display().to_string(), e.to_string()))?;
                let body = substitute(&text, b, jid)?;
                let dest = substitute(dest, b, jid)?;
                let mut marker = String::from("__BROKER_EOF__");
                while body.contains(&marker) {
                    marker.push('_');
                }
                let nl = if body.ends_with('\n') { "" } else { "\n" };
                let shell = format!("cat > {} <<'{marker}'\n{body}{nl}{marker}", agent::sh_quote(&dest));
                steps.push(AgentStep::new(StepKind::Substitute, shell).with_label(format!("substitute {template} > {dest}")));
            }
            TaskCommand::Execute { cmd, args } => {
                let mut line = substitute(cmd, b, jid)?;
                for a in args {
                    line.push(' ');
                    line.push_str(&agent::sh_quote(&substitute(a, b, jid)?));
                }
                steps.push(AgentStep::new(StepKind::Execute, line));
            }
        }
    }

    let mut staging_plan = implicit;
    staging_plan.extend(explicit.into_values());
    Ok(JobWrapper {
        job_id: job.job_id.clone(),
        attempt: job.attempts,
        adapter: server.adapter,
        server_id: server.service_id.clone(),
        agent: AgentScript { steps },
        staging: server.staging,
        staging_plan,
        remote_workdir: workdir_for(wc.instance_id, &job.job_id, job.attempts),
        queue: mapping.queue.clone(),
    })
}

/// Outputs to retrieve for a job, from its task description.
pub fn output_spec(job: &Job, task: &Task) -> Result<OutputSpec, ExecError> {
    let mut spec = OutputSpec::default();
    for p in &task.expected_outputs {
        spec.patterns.push(substitute(p, &job.bindings, &job.job_id)?);
    }
    for cmd in &task.commands {
        if let TaskCommand::Copy { source: Endpoint::Remote(s), dest } = cmd {
            let src = substitute(s, &job.bindings, &job.job_id)?;
            let target = match dest {
                Endpoint::Local(p) => CopyTarget::Local(PathBuf::from(substitute(p, &job.bindings, &job.job_id)?)),
                Endpoint::DataHost { id, path } => {
                    CopyTarget::DataHost { id: id.clone(), path: substitute(path, &job.bindings, &job.job_id)? }
                }
                Endpoint::Remote(_) => continue,
            };
            spec.copies.push((src, target));
        }
    }
    Ok(spec)
}

/// Contract every execution back end implements. Operations take the
/// instant they begin and report the instant they end, so simulated
/// back ends can model durations on a virtual clock.
pub trait Adapter: Send + Sync {
    fn kind(&self) -> AdapterKind;

    fn stage_in(&self, w: &JobWrapper, at_ms: u64) -> Result<Timed<StageManifest>, ExecError>;

    /// Starts the agent. Leaves a marker in the workdir so that
    /// `find_submission` can recognize the job after a broker crash.
    fn submit(&self, w: &JobWrapper, at_ms: u64) -> Result<Timed<RemoteHandle>, ExecError>;

    fn poll(&self, h: &RemoteHandle, at_ms: u64) -> Result<Timed<RemoteStatus>, ExecError>;

    /// Copies manifest, stdout/stderr and outputs into `dest`, then removes
    /// the remote workdir. Cleanup failure is reported, not raised.
    fn stage_out_and_cleanup(&self, h: &RemoteHandle, outputs: &OutputSpec, dest: &Path, at_ms: u64)
        -> Result<Timed<Retrieved>, ExecError>;

    fn probe(&self, server: &ComputeServer, at_ms: u64) -> Result<Timed<ServerFacts>, ExecError>;

    /// Looks for a submission of `job_id` in the given workdir.
    fn find_submission(&self, job_id: &str, workdir: &str) -> Option<RemoteHandle>;
}

/// Runs `f` on a helper thread and gives up after `limit`. An abandoned
/// operation keeps running; its effects are reconciled by recovery.
pub fn with_timeout<T: Send + 'static>(
    limit: Duration,
    op: &str,
    f: impl FnOnce() -> Result<T, ExecError> + Send + 'static,
) -> Result<T, ExecError> {
    let (tx, rx) = mpsc::sync_channel(1);
    std::thread::Builder::new()
        .name(format!("op-{op}"))
        .spawn(move || {
            let _ = tx.send(f());
        })
        .map_err(|e| ExecError::Io(e.to_string()))?;
    match rx.recv_timeout(limit) {
        Ok(r) => r,
        Err(mpsc::RecvTimeoutError::Timeout) => Err(ExecError::Timeout(op.to_string())),
        Err(mpsc::RecvTimeoutError::Disconnected) => Err(ExecError::Io(format!("{op} worker panicked"))),
    }
}

#[derive(Clone)]
pub struct ExecutorOptions {
    pub op_timeout: Duration,
    /// Run adapter calls on helper threads with `op_timeout`.
    pub threaded: bool,
    /// Replace every compute server's adapter kind.
    pub adapter_override: Option<AdapterKind>,
    /// Base directory for local-adapter workdirs.
    pub local_base: PathBuf,
    /// Base directory for ssh workdirs when the server uri names none.
    pub ssh_base: String,
    pub sim: Option<Arc<SimWorld>>,
}

impl Default for ExecutorOptions {
    fn default() -> Self {
        ExecutorOptions {
            op_timeout: DEFAULT_OP_TIMEOUT,
            threaded: false,
            adapter_override: None,
            local_base: std::env::temp_dir().join("broker-work"),
            ssh_base: "broker-work".into(),
            sim: None,
        }
    }
}

/// Adapter instances per compute server.
#[derive(Clone)]
pub struct Executor {
    adapters: BTreeMap<String, Arc<dyn Adapter>>,
    opts: ExecutorOptions,
}

impl std::fmt::Debug for Executor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Executor").field("servers", &self.adapters.keys().collect::<Vec<_>>()).finish()
    }
}

impl Executor {
    pub fn new(services: &[Service], creds: &[Credential], opts: ExecutorOptions) -> Result<Executor, ExecError> {
        let mut adapters: BTreeMap<String, Arc<dyn Adapter>> = BTreeMap::new();
        let mut local: Option<Arc<dyn Adapter>> = None;
        let mut sim: Option<Arc<dyn Adapter>> = None;
        for s in services.iter().filter_map(Service::as_compute) {
            let kind = opts.adapter_override.unwrap_or(s.adapter);
            let a: Arc<dyn Adapter> = match kind {
                AdapterKind::Local => local
                    .get_or_insert_with(|| Arc::new(ShellAdapter::new(LocalTransport, opts.local_base.to_string_lossy())))
                    .clone(),
                AdapterKind::Sim => {
                    let world = opts
                        .sim
                        .clone()
                        .ok_or_else(|| ExecError::UnsupportedAdapter(format!("{} needs a simulator", s.service_id)))?;
                    sim.get_or_insert_with(|| Arc::new(SimAdapter::new(world))).clone()
                }
                AdapterKind::Ssh => {
                    let cred = s
                        .credential_id
                        .as_deref()
                        .and_then(|id| creds.iter().find(|c| c.cred_id == id))
                        .ok_or_else(|| ExecError::UnsupportedAdapter(format!("ssh server {} has no credential", s.service_id)))?;
                    let (t, base) = SshTransport::from_uri(&s.uri, cred.clone(), &opts.ssh_base)?;
                    Arc::new(ShellAdapter::new(t, base))
                }
            };
            adapters.insert(s.service_id.clone(), a);
        }
        Ok(Executor { adapters, opts })
    }

    /// An executor that serves every server id with the same adapter.
    pub fn uniform(adapter: Arc<dyn Adapter>, server_ids: &[&str], opts: ExecutorOptions) -> Executor {
        Executor { adapters: server_ids.iter().map(|id| (id.to_string(), adapter.clone())).collect(), opts }
    }

    pub fn options(&self) -> &ExecutorOptions {
        &self.opts
    }

    pub fn adapter(&self, server_id: &str) -> Result<Arc<dyn Adapter>, ExecError> {
        self.adapters
            .get(server_id)
            .cloned()
            .ok_or_else(|| ExecError::UnsupportedAdapter(format!("no adapter for server {server_id}")))
    }

    /// Applies the adapter override to a server description.
    pub fn effective_kind(&self, server: &ComputeServer) -> AdapterKind {
        self.opts.adapter_override.unwrap_or(server.adapter)
    }

    /// Runs one adapter operation, bounded by the operation timeout when
    /// running threaded.
    pub fn call<T: Send + 'static>(
        &self,
        server_id: &str,
        op: &str,
        f: impl FnOnce(&dyn Adapter) -> Result<T, ExecError> + Send + 'static,
    ) -> Result<T, ExecError> {
        let a = self.adapter(server_id)?;
        if self.opts.threaded {
            with_timeout(self.opts.op_timeout, op, move || f(a.as_ref()))
        } else {
            f(a.as_ref())
        }
    }
}
