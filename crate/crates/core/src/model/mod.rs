//! Passive entities of the broker and the job state machine.

mod job;
mod service;
mod subst;
mod task;
mod validate;

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

pub use job::{gauge, next_state, IllegalTransition, Job, JobMetrics, JobState, RemoteHandle, TransitionEvent};
pub use service::{
    bytes_to_mb, link_id, AdapterKind, ComputeServer, DataFile, DataHost, DataProtocol, InfoKind, InformationService,
    LinkTable, NetworkLink, PriceOverride, Queue, Replica, ReplicaIndex, ReplicaLocation, Service, StagingMode,
    ANY_ENDPOINT, BROKER_ENDPOINT, DEFAULT_LINK_MBPS, LINK_EWMA_ALPHA, RATE_EWMA_ALPHA,
};
pub use subst::{references, substitute, SubstError, JOBID};
pub use task::{
    expand_task, job_id_for, staged_name, Domain, Endpoint, ExpandError, JobExpansion, ReplicaResolver, Requirements,
    Task, TaskCommand, Value, VarType, Variable,
};
pub use validate::{validate_application, validate_context, Diagnostic};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimization {
    #[default]
    None,
    Cost,
    Time,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct QoS {
    /// Seconds from run start by which all jobs should be complete.
    pub deadline_s: Option<f64>,
    pub budget: Option<f64>,
    pub optimization: Optimization,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApplicationContext {
    pub app_id: String,
    pub name: String,
    pub qos: QoS,
    pub credential_ids: Vec<String>,
    pub tasks: Vec<Task>,
}

impl ApplicationContext {
    pub fn task(&self, task_id: &str) -> Option<&Task> {
        self.tasks.iter().find(|t| t.task_id == task_id)
    }
}

/// Assignment of a job to a compute server and to data hosts for its inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mapping {
    pub job_id: String,
    pub compute_id: String,
    pub queue: Option<String>,
    /// Logical file name to selected data host.
    pub data_selection: BTreeMap<String, String>,
    pub est_cost: f64,
    pub est_duration_s: f64,
}

/// A secret held only in memory.
#[derive(Clone, PartialEq, Eq)]
pub struct Secret(String);

impl Secret {
    pub fn new(s: impl Into<String>) -> Self {
        Secret(s.into())
    }

    pub fn expose(&self) -> &str {
        &self.0
    }
}

impl fmt::Debug for Secret {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("Secret(***)")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CredentialKind {
    UserPass {
        user: String,
        /// Name of the environment variable the secret was read from.
        password_env: String,
        secret: Secret,
    },
    KeyFile {
        path: PathBuf,
    },
}

/// Authentication material for remote services. Never serialized with its secret.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Credential {
    pub cred_id: String,
    pub kind: CredentialKind,
}

impl Credential {
    pub fn secret(&self) -> Option<&str> {
        match &self.kind {
            CredentialKind::UserPass { secret, .. } => Some(secret.expose()),
            CredentialKind::KeyFile { .. } => None,
        }
    }
}
