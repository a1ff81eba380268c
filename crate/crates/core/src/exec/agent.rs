//! The agent: a POSIX shell script that runs a job's steps in order inside
//! its working directory and writes a result manifest.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

pub const MANIFEST: &str = "manifest.txt";
pub const STDOUT: &str = "stdout.txt";
pub const STDERR: &str = "stderr.txt";
pub const AGENT: &str = "agent.sh";
pub const PID: &str = "agent.pid";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepKind {
    /// Fetches an input at run start (pull staging).
    Fetch,
    /// Checks that a pushed input or a produced output is present.
    Check,
    Substitute,
    Execute,
}

/// One rendered step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentStep {
    pub kind: StepKind,
    /// Shell text run for this step.
    pub shell: String,
    /// One-line description written to the manifest.
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AgentScript {
    pub steps: Vec<AgentStep>,
}

/// Single-quotes `s` for the shell.
pub fn sh_quote(s: &str) -> String {
    if !s.is_empty() && s.bytes().all(|b| b.is_ascii_alphanumeric() || b"-_./=:,+@%".contains(&b)) {
        return s.to_string();
    }
    format!("'{}'", s.replace('\'', r"'\''"))
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

impl AgentStep {
    pub fn new(kind: StepKind, shell: impl Into<String>) -> Self {
        let shell = shell.into();
        let label = one_line(&shell);
        AgentStep { kind, shell, label }
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = one_line(&label.into());
        self
    }
}

impl AgentScript {
    /// Renders the script. It must be started with the working directory as
    /// its current directory.
    pub fn render(&self) -> String {
        let mut s = String::from(
            "#!/bin/sh\n\
             # Generated job agent. Runs each step in order and stops at the first failure.\n\
             now() {\n  t=$(date +%s%3N 2>/dev/null)\n  case $t in *N*|'') t=$(( $(date +%s) * 1000 ));; esac\n  echo \"$t\"\n}\n",
        );
        let _ = writeln!(s, ": > {MANIFEST}\n: >> {STDOUT}\n: >> {STDERR}");
        for (i, step) in self.steps.iter().enumerate() {
            let n = i + 1;
            let _ = write!(
                s,
                "s=$(now)\n(\n{}\n) >>{STDOUT} 2>>{STDERR} </dev/null\nrc=$?\ne=$(now)\n\
                 printf 'step=%s cmd=%s exit=%s start=%s end=%s\\n' {n} {} \"$rc\" \"$s\" \"$e\" >> {MANIFEST}\n\
                 if [ \"$rc\" -ne 0 ]; then echo \"agent_exit=$rc\" >> {MANIFEST}; exit \"$rc\"; fi\n",
                step.shell,
                sh_quote(&step.label),
            );
        }
        let _ = writeln!(s, "echo agent_exit=0 >> {MANIFEST}\nexit 0");
        s
    }
}

/// One executed step as reported by the agent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u32,
    pub cmd: String,
    pub exit: i32,
    pub start_ms: u64,
    pub end_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AgentManifest {
    pub steps: Vec<StepRecord>,
    pub agent_exit: Option<i32>,
}

impl AgentManifest {
    /// Parses manifest text. Lines that do not parse are skipped.
    pub fn parse(text: &str) -> AgentManifest {
        let mut m = AgentManifest::default();
        for line in text.lines() {
            if let Some(code) = line.strip_prefix("agent_exit=") {
                m.agent_exit = code.trim().parse().ok();
            } else if let Some(rec) = parse_step(line) {
                m.steps.push(rec);
            }
        }
        m
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for r in &self.steps {
            let _ = writeln!(s, "step={} cmd={} exit={} start={} end={}", r.step, r.cmd, r.exit, r.start_ms, r.end_ms);
        }
        if let Some(c) = self.agent_exit {
            let _ = writeln!(s, "agent_exit={c}");
        }
        s
    }

    /// Span from the first step's start to the last step's end.
    pub fn span_ms(&self) -> Option<u64> {
        let first = self.steps.first()?;
        let last = self.steps.last()?;
        Some(last.end_ms.saturating_sub(first.start_ms))
    }
}

fn parse_step(line: &str) -> Option<StepRecord> {
    let rest = line.strip_prefix("step=")?;
    let (step, rest) = rest.split_once(" cmd=")?;
    let (rest, end) = rest.rsplit_once(" end=")?;
    let (rest, start) = rest.rsplit_once(" start=")?;
    let (cmd, exit) = rest.rsplit_once(" exit=")?;
    Some(StepRecord {
        step: step.parse().ok()?,
        cmd: cmd.to_string(),
        exit: exit.parse().ok()?,
        start_ms: start.parse().ok()?,
        end_ms: end.trim().parse().ok()?,
    })
}
