//! Adapter for machines reachable through a POSIX shell, locally or over ssh.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::Instant;

use tracing::{debug, warn};

use super::agent::{sh_quote, AgentManifest, AGENT, MANIFEST, PID, STDERR, STDOUT};
use super::{
    datahost_local_path, Adapter, CopyTarget, ExecError, JobWrapper, OutputSpec, RemoteStatus, Retrieved, ServerFacts,
    StageManifest, StagedFile, Timed, TransferSource, RETRIEVED_MARKER,
};
use crate::clock::{Clock, SystemClock};
use crate::model::{AdapterKind, ComputeServer, Credential, CredentialKind, DataProtocol, RemoteHandle, StagingMode};

#[derive(Debug, Clone)]
pub struct ShellOutput {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

/// How commands and files reach the execution host.
pub trait Transport: Send + Sync + 'static {
    fn kind(&self) -> AdapterKind;
    /// Runs `script` with `sh -c` on the host.
    fn exec(&self, script: &str) -> io::Result<ShellOutput>;
    fn put(&self, local: &Path, remote: &str) -> io::Result<()>;
    fn get(&self, remote: &str, local: &Path) -> io::Result<()>;
}

fn output(mut cmd: Command) -> io::Result<ShellOutput> {
    let out = cmd.stdin(Stdio::null()).output()?;
    Ok(ShellOutput {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    })
}

fn ensure_ok(what: &str, o: io::Result<ShellOutput>) -> io::Result<ShellOutput> {
    let o = o?;
    if o.code != 0 {
        return Err(io::Error::other(format!("{what} exited {}: {}", o.code, o.stderr.trim())));
    }
    Ok(o)
}

/// Runs everything on this machine.
#[derive(Debug, Clone, Copy, Default)]
pub struct LocalTransport;

impl Transport for LocalTransport {
    fn kind(&self) -> AdapterKind {
        AdapterKind::Local
    }

    fn exec(&self, script: &str) -> io::Result<ShellOutput> {
        let mut c = Command::new("sh");
        c.arg("-c").arg(script);
        output(c)
    }

    fn put(&self, local: &Path, remote: &str) -> io::Result<()> {
        if let Some(p) = Path::new(remote).parent() {
            fs::create_dir_all(p)?;
        }
        fs::copy(local, remote).map(|_| ())
    }

    fn get(&self, remote: &str, local: &Path) -> io::Result<()> {
        if let Some(p) = local.parent() {
            fs::create_dir_all(p)?;
        }
        fs::copy(remote, local).map(|_| ())
    }
}

/// Runs commands through the `ssh` and `scp` binaries. Passwords are handed
/// to `sshpass` through its environment, never on a command line.
#[derive(Debug, Clone)]
pub struct SshTransport {
    target: String,
    port: Option<u16>,
    cred: Credential,
}

impl SshTransport {
    /// Parses `ssh://user@host[:port][/base]`; returns the transport and the
    /// remote base directory.
    pub fn from_uri(uri: &str, cred: Credential, default_base: &str) -> Result<(SshTransport, String), ExecError> {
        let rest = uri
            .strip_prefix("ssh://")
            .ok_or_else(|| ExecError::UnsupportedAdapter(format!("ssh uri {uri:?} must start with ssh://")))?;
        let (authority, path) = match rest.find('/') {
            Some(i) => (&rest[..i], &rest[i..]),
            None => (rest, ""),
        };
        let (target, port) = match authority.rsplit_once(':') {
            Some((h, p)) => (h, Some(p.parse().map_err(|_| ExecError::UnsupportedAdapter(format!("bad port in {uri:?}")))?)),
            None => (authority, None),
        };
        if target.is_empty() {
            return Err(ExecError::UnsupportedAdapter(format!("ssh uri {uri:?} names no host")));
        }
        let base = if path.len() > 1 { path.to_string() } else { default_base.to_string() };
        Ok((SshTransport { target: target.to_string(), port, cred }, base))
    }

    fn base_cmd(&self, program: &str) -> Command {
        let mut c = match &self.cred.kind {
            CredentialKind::UserPass { secret, .. } => {
                let mut c = Command::new("sshpass");
                c.arg("-e").arg(program).env("SSHPASS", secret.expose());
                c
            }
            CredentialKind::KeyFile { path } => {
                let mut c = Command::new(program);
                c.arg("-i").arg(path).arg("-o").arg("BatchMode=yes");
                c
            }
        };
        c.arg("-o").arg("StrictHostKeyChecking=accept-new");
        if let Some(p) = self.port {
            c.arg(if program == "scp" { "-P" } else { "-p" }).arg(p.to_string());
        }
        c
    }
}

impl Transport for SshTransport {
    fn kind(&self) -> AdapterKind {
        AdapterKind::Ssh
    }

    fn exec(&self, script: &str) -> io::Result<ShellOutput> {
        let mut c = self.base_cmd("ssh");
        c.arg(&self.target).arg(format!("sh -c {}", sh_quote(script)));
        output(c)
    }

    fn put(&self, local: &Path, remote: &str) -> io::Result<()> {
        let mut c = self.base_cmd("scp");
        c.arg("-q").arg(local).arg(format!("{}:{remote}", self.target));
        ensure_ok("scp", output(c)).map(|_| ())
    }

    fn get(&self, remote: &str, local: &Path) -> io::Result<()> {
        if let Some(p) = local.parent() {
            fs::create_dir_all(p)?;
        }
        let mut c = self.base_cmd("scp");
        c.arg("-q").arg(format!("{}:{remote}", self.target)).arg(local);
        ensure_ok("scp", output(c)).map(|_| ())
    }
}

/// Adapter driving the generated shell agent through a transport.
pub struct ShellAdapter<T: Transport> {
    transport: T,
    base: String,
    clock: SystemClock,
}

impl<T: Transport> ShellAdapter<T> {
    pub fn new(transport: T, base: impl Into<String>) -> Self {
        ShellAdapter { transport, base: base.into(), clock: SystemClock }
    }

    fn abs(&self, rel: &str) -> String {
        format!("{}/{rel}", self.base.trim_end_matches('/'))
    }

    fn run(&self, what: &str, script: &str) -> io::Result<ShellOutput> {
        ensure_ok(what, self.transport.exec(script))
    }

    fn source_path(&self, src: &TransferSource, scratch: &Path) -> Result<PathBuf, ExecError> {
        match src {
            TransferSource::Local(p) => Ok(p.clone()),
            TransferSource::DataHost { protocol: DataProtocol::Localfs, uri, path, .. } => Ok(datahost_local_path(uri, path)),
            TransferSource::DataHost { protocol: DataProtocol::Sftp, uri, path, id } => {
                let host = uri.strip_prefix("sftp://").unwrap_or(uri).split('/').next().unwrap_or_default();
                let tmp = scratch.join(path.rsplit('/').next().unwrap_or("input"));
                let o = output({
                    let mut c = Command::new("scp");
                    c.arg("-q").arg("-o").arg("BatchMode=yes").arg(format!("{host}:{path}")).arg(&tmp);
                    c
                })
                .map_err(|e| ExecError::TransferFailed(path.clone(), e.to_string()))?;
                if o.code != 0 {
                    return Err(ExecError::TransferFailed(path.clone(), format!("fetch from {id}: {}", o.stderr.trim())));
                }
                Ok(tmp)
            }
            TransferSource::DataHost { protocol: DataProtocol::Sim, id, .. } => {
                Err(ExecError::UnsupportedAdapter(format!("simulated data host {id} cannot feed a shell adapter")))
            }
        }
    }
}

fn scratch_dir() -> io::Result<tempfile::TempDir> {
    tempfile::Builder::new().prefix("broker-stage").tempdir()
}

impl<T: Transport> Adapter for ShellAdapter<T> {
    fn kind(&self) -> AdapterKind {
        self.transport.kind()
    }

    fn stage_in(&self, w: &JobWrapper, _at_ms: u64) -> Result<Timed<StageManifest>, ExecError> {
        let wd = self.abs(&w.remote_workdir);
        // Retried attempts start from an empty directory.
        self.run("mkdir", &format!("rm -rf {q} && mkdir -p {q}", q = sh_quote(&wd)))
            .map_err(|e| ExecError::TransferFailed(wd.clone(), e.to_string()))?;
        let scratch = scratch_dir()?;
        let agent = scratch.path().join(AGENT);
        fs::write(&agent, w.agent.render())?;
        self.transport
            .put(&agent, &format!("{wd}/{AGENT}"))
            .map_err(|e| ExecError::TransferFailed(AGENT.into(), e.to_string()))?;
        let mut manifest = StageManifest::default();
        if w.staging == StagingMode::Push {
            for t in &w.staging_plan {
                let src = self.source_path(&t.source, scratch.path())?;
                let started = Instant::now();
                self.transport
                    .put(&src, &format!("{wd}/{}", t.dest))
                    .map_err(|e| ExecError::TransferFailed(t.dest.clone(), e.to_string()))?;
                manifest.files.push(StagedFile {
                    name: t.dest.clone(),
                    bytes: fs::metadata(&src).map_or(t.size_bytes, |m| m.len()),
                    duration_ms: started.elapsed().as_millis() as u64,
                    link: t.link.clone(),
                });
            }
        }
        Ok(Timed { value: manifest, end_ms: self.clock.now_ms() })
    }

    fn submit(&self, w: &JobWrapper, _at_ms: u64) -> Result<Timed<RemoteHandle>, ExecError> {
        let wd = self.abs(&w.remote_workdir);
        let script = format!(
            "cd {} || exit 1\nnohup sh {AGENT} </dev/null >/dev/null 2>&1 &\npid=$!\necho \"$pid\" > {PID}\necho \"$pid\"",
            sh_quote(&wd)
        );
        let out = self.run("submit", &script).map_err(|e| ExecError::SubmitFailed(e.to_string()))?;
        let token = out.stdout.trim().to_string();
        if token.is_empty() {
            return Err(ExecError::SubmitFailed("agent start printed no process id".into()));
        }
        debug!(job = %w.job_id, pid = %token, workdir = %wd, "agent started");
        Ok(Timed { value: RemoteHandle { adapter: self.kind(), token, workdir: wd }, end_ms: self.clock.now_ms() })
    }

    fn poll(&self, h: &RemoteHandle, _at_ms: u64) -> Result<Timed<RemoteStatus>, ExecError> {
        let script = format!(
            "cd {} 2>/dev/null || {{ echo lost; exit 0; }}\n\
             done_line() {{ grep '^agent_exit=' {MANIFEST} 2>/dev/null | tail -n 1; }}\n\
             d=$(done_line); if [ -n \"$d\" ]; then echo \"$d\"; exit 0; fi\n\
             if kill -0 {} 2>/dev/null; then echo running; exit 0; fi\n\
             d=$(done_line); if [ -n \"$d\" ]; then echo \"$d\"; else echo lost; fi",
            sh_quote(&h.workdir),
            sh_quote(&h.token),
        );
        let out = self.run("poll", &script).map_err(|e| ExecError::PollFailed(e.to_string()))?;
        let line = out.stdout.trim();
        let status = if let Some(code) = line.strip_prefix("agent_exit=") {
            RemoteStatus::Exited(code.parse().map_err(|_| ExecError::PollFailed(format!("bad exit line {line:?}")))?)
        } else if line == "running" {
            RemoteStatus::Running
        } else if line == "lost" {
            RemoteStatus::Lost
        } else {
            return Err(ExecError::PollFailed(format!("unexpected poll output {line:?}")));
        };
        Ok(Timed { value: status, end_ms: self.clock.now_ms() })
    }

    fn stage_out_and_cleanup(
        &self,
        h: &RemoteHandle,
        outputs: &OutputSpec,
        dest: &Path,
        _at_ms: u64,
    ) -> Result<Timed<Retrieved>, ExecError> {
        fs::create_dir_all(dest)?;
        let listing = self
            .run("list", &format!("cd {} && ls -1A", sh_quote(&h.workdir)))
            .map_err(|e| ExecError::RetrieveFailed(e.to_string()))?;
        let patterns: Vec<glob::Pattern> = outputs.patterns.iter().filter_map(|p| glob::Pattern::new(p).ok()).collect();
        let mut retrieved = Retrieved::default();
        for name in listing.stdout.lines().map(str::trim).filter(|n| !n.is_empty()) {
            let wanted = [MANIFEST, STDOUT, STDERR].contains(&name)
                || patterns.iter().any(|p| p.matches(name))
                || outputs.copies.iter().any(|(src, _)| src == name);
            if !wanted {
                continue;
            }
            self.transport
                .get(&format!("{}/{name}", h.workdir), &dest.join(name))
                .map_err(|e| ExecError::RetrieveFailed(format!("{name}: {e}")))?;
            retrieved.files.push(name.to_string());
        }
        for (src, target) in &outputs.copies {
            let local = dest.join(src);
            if !local.exists() {
                continue;
            }
            let to = match target {
                CopyTarget::Local(p) if p.is_absolute() => p.clone(),
                CopyTarget::Local(p) => dest.join(p),
                CopyTarget::DataHost { path, .. } => {
                    warn!(file = %src, path = %path, "copy to a data host is not supported by the shell adapter; kept in the result directory");
                    continue;
                }
            };
            if to != local {
                if let Some(parent) = to.parent() {
                    fs::create_dir_all(parent)?;
                }
                fs::copy(&local, &to).map_err(|e| ExecError::RetrieveFailed(format!("{}: {e}", to.display())))?;
            }
        }
        if let Ok(text) = fs::read_to_string(dest.join(MANIFEST)) {
            retrieved.manifest = Some(AgentManifest::parse(&text));
        }
        fs::write(dest.join(RETRIEVED_MARKER), h.token.as_bytes())?;
        if let Err(e) = self.run("cleanup", &format!("rm -rf {}", sh_quote(&h.workdir))) {
            warn!(workdir = %h.workdir, error = %e, "cleanup failed after retrieval");
            retrieved.cleanup_warning = Some(e.to_string());
        }
        Ok(Timed { value: retrieved, end_ms: self.clock.now_ms() })
    }

    fn probe(&self, _server: &ComputeServer, _at_ms: u64) -> Result<Timed<ServerFacts>, ExecError> {
        let out = self.run("probe", "uname -m; uname -s").map_err(|e| ExecError::ProbeFailed(e.to_string()))?;
        let mut lines = out.stdout.lines();
        let facts = ServerFacts {
            architecture: lines.next().unwrap_or_default().trim().to_string(),
            os: lines.next().unwrap_or_default().trim().to_lowercase(),
        };
        Ok(Timed { value: facts, end_ms: self.clock.now_ms() })
    }

    fn find_submission(&self, _job_id: &str, workdir: &str) -> Option<RemoteHandle> {
        let wd = self.abs(workdir);
        let out = self.run("recon", &format!("cat {}/{PID}", sh_quote(&wd))).ok()?;
        let token = out.stdout.trim().to_string();
        (!token.is_empty()).then(|| RemoteHandle { adapter: self.kind(), token, workdir: wd })
    }
}

#[cfg(all(test, unix))]
mod tests {
    use super::*;
    use crate::exec::{AgentScript, AgentStep, StepKind, Transfer};
    use std::time::Duration;

    fn wrapper(steps: Vec<AgentStep>, plan: Vec<Transfer>) -> JobWrapper {
        JobWrapper {
            job_id: "j1".into(),
            attempt: 0,
            adapter: AdapterKind::Local,
            server_id: "s1".into(),
            agent: AgentScript { steps },
            staging: StagingMode::Push,
            staging_plan: plan,
            remote_workdir: "inst/j1.a0".into(),
            queue: None,
        }
    }

    fn wait_exit(a: &ShellAdapter<LocalTransport>, h: &RemoteHandle) -> RemoteStatus {
        for _ in 0..500 {
            match a.poll(h, 0).unwrap().value {
                RemoteStatus::Running | RemoteStatus::Queued => std::thread::sleep(Duration::from_millis(10)),
                other => return other,
            }
        }
        panic!("agent did not finish");
    }

    #[test]
    fn local_lifecycle() {
        let base = tempfile::tempdir().unwrap();
        let src = tempfile::tempdir().unwrap();
        let out = tempfile::tempdir().unwrap();
        fs::write(src.path().join("a"), "1").unwrap();
        fs::write(src.path().join("b"), "22").unwrap();
        let plan = ["a", "b"]
            .iter()
            .map(|n| Transfer {
                source: TransferSource::Local(src.path().join(n)),
                dest: n.to_string(),
                size_bytes: 0,
                mbps: 100.0,
                link: ("broker".into(), "broker".into()),
            })
            .collect();
        let a = ShellAdapter::new(LocalTransport, base.path().to_string_lossy());
        let w = wrapper(vec![AgentStep::new(StepKind::Execute, "cat a b > out.j1.dat")], plan);
        let staged = a.stage_in(&w, 0).unwrap().value;
        assert_eq!(staged.files.len(), 2);
        assert_eq!(staged.files[1].bytes, 2);
        let h = a.submit(&w, 0).unwrap().value;
        assert_eq!(a.find_submission("j1", "inst/j1.a0").unwrap().token, h.token);
        assert_eq!(wait_exit(&a, &h), RemoteStatus::Exited(0));
        let spec = OutputSpec { patterns: vec!["out.*.dat".into()], copies: vec![] };
        let r = a.stage_out_and_cleanup(&h, &spec, out.path(), 0).unwrap().value;
        assert!(r.files.contains(&"out.j1.dat".to_string()));
        assert_eq!(fs::read_to_string(out.path().join("out.j1.dat")).unwrap(), "122");
        assert_eq!(r.manifest.unwrap().agent_exit, Some(0));
        assert!(out.path().join(RETRIEVED_MARKER).exists());
        assert!(!Path::new(&h.workdir).exists());
        assert_eq!(a.poll(&h, 0).unwrap().value, RemoteStatus::Lost);
    }

    #[test]
    fn failing_job_still_returns_logs() {
        let base = tempfile::tempdir().unwrap();
        let out = tempfile::tempdir().unwrap();
        let a = ShellAdapter::new(LocalTransport, base.path().to_string_lossy());
        let w = wrapper(vec![AgentStep::new(StepKind::Execute, "echo oops >&2; exit 1")], vec![]);
        a.stage_in(&w, 0).unwrap();
        let h = a.submit(&w, 0).unwrap().value;
        assert_eq!(wait_exit(&a, &h), RemoteStatus::Exited(1));
        let r = a.stage_out_and_cleanup(&h, &OutputSpec::default(), out.path(), 0).unwrap().value;
        let mut files = r.files.clone();
        files.sort();
        assert_eq!(files, [MANIFEST, STDERR, STDOUT]);
        assert_eq!(fs::read_to_string(out.path().join(STDERR)).unwrap(), "oops\n");
    }

    #[test]
    fn ssh_uri_parsing() {
        let cred = Credential { cred_id: "c".into(), kind: CredentialKind::KeyFile { path: "/k".into() } };
        let (t, base) = SshTransport::from_uri("ssh://me@host:2222/scratch/b", cred.clone(), "d").unwrap();
        assert_eq!((t.target.as_str(), t.port, base.as_str()), ("me@host", Some(2222), "/scratch/b"));
        let (_, base) = SshTransport::from_uri("ssh://me@host", cred.clone(), "d").unwrap();
        assert_eq!(base, "d");
        assert!(SshTransport::from_uri("http://x", cred, "d").is_err());
    }
}
