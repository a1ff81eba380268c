//! Interpreters for application, service and credential description documents.
//!
//! Documents are TOML. Every table rejects fields it does not know.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    link_id, validate_context, AdapterKind, ApplicationContext, ComputeServer, Credential, CredentialKind, DataFile,
    DataHost, DataProtocol, Diagnostic, Domain, InfoKind, InformationService, NetworkLink, Optimization, QoS, Queue,
    Requirements, Secret, Service, StagingMode, Task, TaskCommand, VarType, Variable,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DocumentKind {
    Application,
    Services,
    Credentials,
}

impl fmt::Display for DocumentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DocumentKind::Application => "application",
            DocumentKind::Services => "services",
            DocumentKind::Credentials => "credentials",
        })
    }
}

/// A parsed description document.
#[derive(Debug, Clone)]
pub struct DescriptionDocument {
    pub path: PathBuf,
    pub kind: DocumentKind,
    pub root: toml::Table,
    text: String,
}

#[derive(Debug, Error)]
pub enum InterpError {
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("{path}: expected a {expected} document, got {actual}")]
    WrongKind { path: String, expected: DocumentKind, actual: DocumentKind },
    #[error("invalid application: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    Validation(Vec<Diagnostic>),
    #[error("duplicate service id {0:?}")]
    DuplicateServiceId(String),
    #[error("unknown service type {0:?}")]
    UnknownServiceType(String),
    #[error("credential {id}: environment variable {var} is not set")]
    MissingSecret { id: String, var: String },
    #[error("credential {id}: key file {path} does not exist")]
    MissingKeyfile { id: String, path: String },
    #[error("reading {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl DescriptionDocument {
    pub fn parse(text: &str, kind: DocumentKind, path: impl Into<PathBuf>) -> Result<Self, InterpError> {
        let path = path.into();
        let root: toml::Table = toml::from_str(text).map_err(|e| InterpError::Parse {
            path: path.display().to_string(),
            message: e.to_string().trim_end().to_string(),
        })?;
        Ok(DescriptionDocument { path, kind, root, text: text.to_string() })
    }

    pub fn load(path: impl AsRef<Path>, kind: DocumentKind) -> Result<Self, InterpError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|source| InterpError::Io { path: path.display().to_string(), source })?;
        DescriptionDocument::parse(&text, kind, path)
    }

    fn expect(&self, kind: DocumentKind) -> Result<(), InterpError> {
        if self.kind != kind {
            return Err(InterpError::WrongKind {
                path: self.path.display().to_string(),
                expected: kind,
                actual: self.kind,
            });
        }
        Ok(())
    }

    /// Deserializes from the original text so errors carry line and field.
    fn decode<T: for<'de> Deserialize<'de>>(&self) -> Result<T, InterpError> {
        toml::from_str(&self.text).map_err(|e| self.error(e.to_string().trim_end()))
    }

    fn error(&self, message: impl Into<String>) -> InterpError {
        InterpError::Parse { path: self.path.display().to_string(), message: message.into() }
    }
}

// ---- application documents ----

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
enum Number {
    Int(i64),
    Float(f64),
}

impl Number {
    fn as_f64(self) -> f64 {
        match self {
            Number::Int(i) => i as f64,
            Number::Float(f) => f,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRange {
    from: Number,
    to: Number,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    step: Option<Number>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawVariable {
    name: String,
    #[serde(rename = "type")]
    vtype: VarType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    range: Option<RawRange>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    values: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pattern: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawQos {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    deadline_s: Option<Number>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    budget: Option<Number>,
    #[serde(default)]
    optimization: Optimization,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "lowercase")]
enum RawCommand {
    Copy(RawCopy),
    Execute(RawExecute),
    Substitute(RawSubstitute),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCopy {
    source: String,
    dest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawExecute {
    cmd: String,
    #[serde(default)]
    args: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSubstitute {
    template: String,
    dest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawApplication {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id: Option<String>,
    name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    qos: Option<RawQos>,
    #[serde(default)]
    variables: Vec<RawVariable>,
    task: Vec<RawCommand>,
    #[serde(default)]
    expected_outputs: Vec<String>,
    #[serde(default, skip_serializing_if = "Requirements::is_empty")]
    requirements: Requirements,
}

fn convert_variable(doc: &DescriptionDocument, v: RawVariable) -> Result<Variable, InterpError> {
    let bad = |what: &str| doc.error(format!("variables.{}: {what}", v.name));
    let given = [v.range.is_some(), v.values.is_some(), v.pattern.is_some()].iter().filter(|b| **b).count();
    if given != 1 {
        return Err(bad("exactly one of range, values or pattern is required"));
    }
    let domain = match v.vtype {
        VarType::Integer => {
            let r = v.range.as_ref().ok_or_else(|| bad("integer variables need a range"))?;
            let int = |n: Number| match n {
                Number::Int(i) => Ok(i),
                Number::Float(_) => Err(bad("integer range bounds must be integers")),
            };
            Domain::IntRange { from: int(r.from)?, to: int(r.to)?, step: int(r.step.unwrap_or(Number::Int(1)))? }
        }
        VarType::Float => {
            let r = v.range.as_ref().ok_or_else(|| bad("float variables need a range"))?;
            Domain::FloatRange {
                from: r.from.as_f64(),
                to: r.to.as_f64(),
                step: r.step.unwrap_or(Number::Float(1.0)).as_f64(),
            }
        }
        VarType::String => Domain::Values(v.values.clone().ok_or_else(|| bad("string variables need values"))?),
        VarType::Gridfile => Domain::Pattern(v.pattern.clone().ok_or_else(|| bad("gridfile variables need a pattern"))?),
    };
    Ok(Variable { name: v.name, vtype: v.vtype, domain })
}

fn convert_command(doc: &DescriptionDocument, c: RawCommand) -> Result<TaskCommand, InterpError> {
    Ok(match c {
        RawCommand::Copy(RawCopy { source, dest }) => TaskCommand::Copy {
            source: source.parse().map_err(|e| doc.error(format!("task.copy.source: {e}")))?,
            dest: dest.parse().map_err(|e| doc.error(format!("task.copy.dest: {e}")))?,
        },
        RawCommand::Execute(RawExecute { cmd, args }) => TaskCommand::Execute { cmd, args },
        RawCommand::Substitute(RawSubstitute { template, dest }) => TaskCommand::Substitute { template, dest },
    })
}

/// Builds an application context from an application document.
pub fn parse_application(doc: &DescriptionDocument) -> Result<ApplicationContext, InterpError> {
    doc.expect(DocumentKind::Application)?;
    let raw: RawApplication = doc.decode()?;
    let qos = raw
        .qos
        .map(|q| QoS {
            deadline_s: q.deadline_s.map(Number::as_f64),
            budget: q.budget.map(Number::as_f64),
            optimization: q.optimization,
        })
        .unwrap_or_default();
    let variables = raw
        .variables
        .into_iter()
        .map(|v| convert_variable(doc, v))
        .collect::<Result<Vec<_>, _>>()?;
    let commands = raw
        .task
        .into_iter()
        .map(|c| convert_command(doc, c))
        .collect::<Result<Vec<_>, _>>()?;
    let app_id = raw.id.unwrap_or_else(|| slug(&raw.name));
    let ctx = ApplicationContext {
        app_id,
        name: raw.name,
        qos,
        credential_ids: Vec::new(),
        tasks: vec![Task {
            task_id: "t1".to_string(),
            commands,
            variables,
            expected_outputs: raw.expected_outputs,
            requirements: raw.requirements,
        }],
    };
    let diags = validate_context(&ctx);
    if !diags.is_empty() {
        return Err(InterpError::Validation(diags));
    }
    Ok(ctx)
}

fn slug(name: &str) -> String {
    let s: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '-' })
        .collect();
    let s = s.trim_matches('-').to_string();
    if s.is_empty() {
        "app".to_string()
    } else {
        s
    }
}

/// Renders an application context as an application document.
pub fn application_to_document(ctx: &ApplicationContext) -> String {
    let task = &ctx.tasks[0];
    let raw = RawApplication {
        id: Some(ctx.app_id.clone()),
        name: ctx.name.clone(),
        qos: Some(RawQos {
            deadline_s: ctx.qos.deadline_s.map(Number::Float),
            budget: ctx.qos.budget.map(Number::Float),
            optimization: ctx.qos.optimization,
        }),
        variables: task
            .variables
            .iter()
            .map(|v| {
                let mut raw = RawVariable { name: v.name.clone(), vtype: v.vtype, range: None, values: None, pattern: None };
                match &v.domain {
                    Domain::IntRange { from, to, step } => {
                        raw.range = Some(RawRange {
                            from: Number::Int(*from),
                            to: Number::Int(*to),
                            step: Some(Number::Int(*step)),
                        })
                    }
                    Domain::FloatRange { from, to, step } => {
                        raw.range = Some(RawRange {
                            from: Number::Float(*from),
                            to: Number::Float(*to),
                            step: Some(Number::Float(*step)),
                        })
                    }
                    Domain::Values(vs) => raw.values = Some(vs.clone()),
                    Domain::Pattern(p) => raw.pattern = Some(p.clone()),
                }
                raw
            })
            .collect(),
        task: task
            .commands
            .iter()
            .map(|c| match c {
                TaskCommand::Copy { source, dest } => {
                    RawCommand::Copy(RawCopy { source: source.to_string(), dest: dest.to_string() })
                }
                TaskCommand::Execute { cmd, args } => RawCommand::Execute(RawExecute { cmd: cmd.clone(), args: args.clone() }),
                TaskCommand::Substitute { template, dest } => {
                    RawCommand::Substitute(RawSubstitute { template: template.clone(), dest: dest.clone() })
                }
            })
            .collect(),
        expected_outputs: task.expected_outputs.clone(),
        requirements: task.requirements.clone(),
    };
    toml::to_string(&raw).expect("application documents always serialize")
}

// ---- service documents ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawQueue {
    name: String,
    max_wallclock_s: Number,
    slots: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawService {
    #[serde(rename = "type")]
    stype: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    uri: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    adapter: Option<AdapterKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    protocol: Option<DataProtocol>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    subtype: Option<InfoKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    slots: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    queues: Option<Vec<RawQueue>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    price_per_cpu_s: Option<Number>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    price_per_mb: Option<Number>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    credential: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    from: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    to: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bandwidth_mbps: Option<Number>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    cost_per_mb: Option<Number>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    backing: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    architecture: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    os: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    staging: Option<StagingMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    files: Option<Vec<RawFile>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFile {
    logical_name: String,
    path: String,
    size_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawServices {
    services: Vec<RawService>,
}

fn convert_service(doc: &DescriptionDocument, idx: usize, r: RawService) -> Result<Service, InterpError> {
    let at = |msg: String| doc.error(format!("services[{idx}]: {msg}"));
    let id = |r: &RawService| r.id.clone().ok_or_else(|| at("missing id".into()));
    // Fields that only apply to other service types are rejected.
    let forbid = |r: &RawService, allowed: &[&str]| -> Result<(), InterpError> {
        let present: [(&str, bool); 18] = [
            ("uri", r.uri.is_some()),
            ("adapter", r.adapter.is_some()),
            ("protocol", r.protocol.is_some()),
            ("subtype", r.subtype.is_some()),
            ("slots", r.slots.is_some()),
            ("queues", r.queues.is_some()),
            ("price_per_cpu_s", r.price_per_cpu_s.is_some()),
            ("price_per_mb", r.price_per_mb.is_some()),
            ("credential", r.credential.is_some()),
            ("from", r.from.is_some()),
            ("to", r.to.is_some()),
            ("bandwidth_mbps", r.bandwidth_mbps.is_some()),
            ("cost_per_mb", r.cost_per_mb.is_some()),
            ("backing", r.backing.is_some()),
            ("architecture", r.architecture.is_some()),
            ("os", r.os.is_some()),
            ("staging", r.staging.is_some()),
            ("files", r.files.is_some()),
        ];
        for (name, set) in present {
            if set && !allowed.contains(&name) {
                return Err(at(format!("field {name} does not apply to type {}", r.stype)));
            }
        }
        Ok(())
    };
    match r.stype.as_str() {
        "compute" => {
            forbid(&r, &["uri", "adapter", "slots", "queues", "price_per_cpu_s", "credential", "architecture", "os", "staging"])?;
            let adapter = r.adapter.ok_or_else(|| at("compute services need an adapter".into()))?;
            let mut s = ComputeServer::new(id(&r)?, adapter, r.slots.unwrap_or(1), r.price_per_cpu_s.map_or(0.0, Number::as_f64));
            s.uri = r.uri.unwrap_or_default();
            s.architecture = r.architecture.unwrap_or_default();
            s.os = r.os.unwrap_or_default();
            s.credential_id = r.credential;
            s.staging = r.staging.unwrap_or_default();
            s.queues = r
                .queues
                .unwrap_or_default()
                .into_iter()
                .map(|q| Queue { name: q.name, max_wallclock_s: q.max_wallclock_s.as_f64(), slots: q.slots, in_flight: 0 })
                .collect();
            Ok(Service::Compute(s))
        }
        "datahost" => {
            forbid(&r, &["uri", "protocol", "price_per_mb", "credential", "files"])?;
            Ok(Service::Data(DataHost {
                service_id: id(&r)?,
                uri: r.uri.unwrap_or_default(),
                available: true,
                last_probe: None,
                protocol: r.protocol.ok_or_else(|| at("datahost services need a protocol".into()))?,
                files: r
                    .files
                    .unwrap_or_default()
                    .into_iter()
                    .map(|f| DataFile { logical_name: f.logical_name, path: f.path, size_bytes: f.size_bytes })
                    .collect(),
                price_per_mb: r.price_per_mb.map_or(0.0, Number::as_f64),
                credential_id: r.credential,
            }))
        }
        "information" => {
            forbid(&r, &["uri", "subtype", "backing"])?;
            Ok(Service::Info(InformationService {
                service_id: id(&r)?,
                uri: r.uri.unwrap_or_default(),
                available: true,
                last_probe: None,
                subtype: r.subtype.ok_or_else(|| at("information services need a subtype".into()))?,
                backing: r.backing.ok_or_else(|| at("information services need a backing file".into()))?,
                replicas: Default::default(),
                prices: Default::default(),
            }))
        }
        "network" => {
            forbid(&r, &["from", "to", "bandwidth_mbps", "cost_per_mb"])?;
            let from = r.from.clone().ok_or_else(|| at("network links need from".into()))?;
            let to = r.to.clone().ok_or_else(|| at("network links need to".into()))?;
            let bw = r.bandwidth_mbps.ok_or_else(|| at("network links need bandwidth_mbps".into()))?.as_f64();
            if bw.is_nan() || bw <= 0.0 {
                return Err(at(format!("bandwidth_mbps must be positive, got {bw}")));
            }
            let mut link = NetworkLink::new(from, to, bw, r.cost_per_mb.map_or(0.0, Number::as_f64));
            if let Some(id) = r.id {
                link.service_id = id;
            }
            Ok(Service::Link(link))
        }
        other => Err(InterpError::UnknownServiceType(other.to_string())),
    }
}

/// Builds the service set from a services document.
pub fn parse_services(doc: &DescriptionDocument) -> Result<Vec<Service>, InterpError> {
    doc.expect(DocumentKind::Services)?;
    let raw: RawServices = doc.decode()?;
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(raw.services.len());
    for (i, r) in raw.services.into_iter().enumerate() {
        let s = convert_service(doc, i, r)?;
        if !seen.insert(s.id().to_string()) {
            return Err(InterpError::DuplicateServiceId(s.id().to_string()));
        }
        out.push(s);
    }
    Ok(out)
}

/// Renders services as a services document. Runtime observations are not included.
pub fn services_to_document(services: &[Service]) -> String {
    let nonempty = |s: &str| (!s.is_empty()).then(|| s.to_string());
    let raw = RawServices {
        services: services
            .iter()
            .map(|s| match s {
                Service::Compute(c) => RawService {
                    stype: "compute".into(),
                    id: Some(c.service_id.clone()),
                    uri: nonempty(&c.uri),
                    adapter: Some(c.adapter),
                    slots: Some(c.slots),
                    queues: (!c.queues.is_empty()).then(|| {
                        c.queues
                            .iter()
                            .map(|q| RawQueue {
                                name: q.name.clone(),
                                max_wallclock_s: Number::Float(q.max_wallclock_s),
                                slots: q.slots,
                            })
                            .collect()
                    }),
                    price_per_cpu_s: Some(Number::Float(c.price_per_cpu_s)),
                    credential: c.credential_id.clone(),
                    architecture: nonempty(&c.architecture),
                    os: nonempty(&c.os),
                    staging: Some(c.staging),
                    ..Default::default()
                },
                Service::Data(d) => RawService {
                    stype: "datahost".into(),
                    id: Some(d.service_id.clone()),
                    uri: nonempty(&d.uri),
                    protocol: Some(d.protocol),
                    price_per_mb: Some(Number::Float(d.price_per_mb)),
                    credential: d.credential_id.clone(),
                    files: (!d.files.is_empty()).then(|| {
                        d.files
                            .iter()
                            .map(|f| RawFile { logical_name: f.logical_name.clone(), path: f.path.clone(), size_bytes: f.size_bytes })
                            .collect()
                    }),
                    ..Default::default()
                },
                Service::Info(i) => RawService {
                    stype: "information".into(),
                    id: Some(i.service_id.clone()),
                    uri: nonempty(&i.uri),
                    subtype: Some(i.subtype),
                    backing: Some(i.backing.clone()),
                    ..Default::default()
                },
                Service::Link(l) => RawService {
                    stype: "network".into(),
                    id: (l.service_id != link_id(&l.from, &l.to)).then(|| l.service_id.clone()),
                    from: Some(l.from.clone()),
                    to: Some(l.to.clone()),
                    bandwidth_mbps: Some(Number::Float(l.bandwidth_mbps)),
                    cost_per_mb: Some(Number::Float(l.cost_per_mb)),
                    ..Default::default()
                },
            })
            .collect(),
    };
    toml::to_string(&raw).expect("service documents always serialize")
}

// ---- credential documents ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCredential {
    id: String,
    #[serde(rename = "type")]
    ctype: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    user: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    password_env: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    path: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCredentials {
    credentials: Vec<RawCredential>,
}

/// Builds credentials, reading secrets from the environment variables the document names.
pub fn parse_credentials(doc: &DescriptionDocument) -> Result<Vec<Credential>, InterpError> {
    parse_credentials_with(doc, |var| std::env::var(var).ok())
}

/// As [`parse_credentials`] with an explicit environment lookup.
pub fn parse_credentials_with(
    doc: &DescriptionDocument,
    env: impl Fn(&str) -> Option<String>,
) -> Result<Vec<Credential>, InterpError> {
    doc.expect(DocumentKind::Credentials)?;
    let raw: RawCredentials = doc.decode()?;
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (i, r) in raw.credentials.into_iter().enumerate() {
        let at = |msg: &str| doc.error(format!("credentials[{i}]: {msg}"));
        if !seen.insert(r.id.clone()) {
            return Err(at(&format!("duplicate credential id {:?}", r.id)));
        }
        let kind = match r.ctype.as_str() {
            "userpass" => {
                if r.path.is_some() {
                    return Err(at("userpass credentials take no path"));
                }
                let user = r.user.ok_or_else(|| at("userpass credentials need a user"))?;
                let var = r.password_env.ok_or_else(|| at("userpass credentials need password_env"))?;
                let secret = env(&var).ok_or_else(|| InterpError::MissingSecret { id: r.id.clone(), var: var.clone() })?;
                CredentialKind::UserPass { user, password_env: var, secret: Secret::new(secret) }
            }
            "keyfile" => {
                if r.user.is_some() || r.password_env.is_some() {
                    return Err(at("keyfile credentials take only a path"));
                }
                let path = r.path.ok_or_else(|| at("keyfile credentials need a path"))?;
                if !Path::new(&path).exists() {
                    return Err(InterpError::MissingKeyfile { id: r.id.clone(), path });
                }
                CredentialKind::KeyFile { path: PathBuf::from(path) }
            }
            other => return Err(at(&format!("unknown credential type {other:?}"))),
        };
        out.push(Credential { cred_id: r.id, kind });
    }
    Ok(out)
}

/// Renders credentials as a document. Secrets are written only as their variable names.
pub fn credentials_to_document(creds: &[Credential]) -> String {
    let raw = RawCredentials {
        credentials: creds
            .iter()
            .map(|c| match &c.kind {
                CredentialKind::UserPass { user, password_env, .. } => RawCredential {
                    id: c.cred_id.clone(),
                    ctype: "userpass".into(),
                    user: Some(user.clone()),
                    password_env: Some(password_env.clone()),
                    path: None,
                },
                CredentialKind::KeyFile { path } => RawCredential {
                    id: c.cred_id.clone(),
                    ctype: "keyfile".into(),
                    user: None,
                    password_env: None,
                    path: Some(path.display().to_string()),
                },
            })
            .collect(),
    };
    toml::to_string(&raw).expect("credential documents always serialize")
}

/// Contents of a replica-catalog backing file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReplicaCatalogFile {
    #[serde(default)]
    pub replicas: Vec<ReplicaEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReplicaEntry {
    pub logical_name: String,
    pub datahost: String,
    pub path: String,
}

/// Contents of a market-directory backing file: service id to price overrides.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketDirectoryFile {
    #[serde(default)]
    pub prices: std::collections::BTreeMap<String, crate::model::PriceOverride>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{expand_task, CredentialKind};

    fn app(text: &str) -> Result<ApplicationContext, InterpError> {
        parse_application(&DescriptionDocument::parse(text, DocumentKind::Application, "app.toml")?)
    }

    fn services(text: &str) -> Result<Vec<Service>, InterpError> {
        parse_services(&DescriptionDocument::parse(text, DocumentKind::Services, "svc.toml")?)
    }

    #[test]
    fn minimal_application() {
        let ctx = app("name = \"min\"\n[[task]]\nexecute = { cmd = \"/bin/true\" }\n").unwrap();
        assert_eq!(ctx.tasks.len(), 1);
        assert!(ctx.tasks[0].variables.is_empty());
        assert_eq!(ctx.qos, QoS::default());
        assert_eq!(ctx.app_id, "min");
    }

    #[test]
    fn range_of_one_hundred() {
        let ctx = app(
            r#"
name = "sweep"
variables = [{ name = "x", type = "integer", range = { from = 1, to = 100, step = 1 } }]
task = [{ execute = { cmd = "echo", args = ["$x"] } }]
"#,
        )
        .unwrap();
        assert_eq!(expand_task(&ctx.tasks[0], None).unwrap().len(), 100);
    }

    #[test]
    fn qos_verbatim() {
        let ctx = app(
            r#"
name = "q"
qos = { deadline_s = 3600, budget = 100, optimization = "cost" }
task = [{ execute = { cmd = "x" } }]
"#,
        )
        .unwrap();
        assert_eq!(ctx.qos, QoS { deadline_s: Some(3600.0), budget: Some(100.0), optimization: Optimization::Cost });
    }

    #[test]
    fn unknown_fields_fail_closed() {
        let e = app("name = \"x\"\nbogus = 1\ntask = [{ execute = { cmd = \"x\" } }]\n").unwrap_err();
        assert!(matches!(e, InterpError::Parse { .. }), "{e}");
        assert!(e.to_string().contains("bogus"), "{e}");
        let e = app("name = \"x\"\ntask = [{ execute = { cmd = \"x\", shell = true } }]\n").unwrap_err();
        assert!(matches!(e, InterpError::Parse { .. }), "{e}");
    }

    #[test]
    fn parse_error_has_line() {
        let e = app("name = \"x\"\n\ntask = [{ execute = { cmd = 3 } }]\n").unwrap_err();
        assert!(e.to_string().contains("line 3"), "{e}");
    }

    #[test]
    fn validation_error() {
        let e = app("name = \"x\"\ntask = [{ execute = { cmd = \"run $z\" } }]\n").unwrap_err();
        assert!(matches!(e, InterpError::Validation(_)), "{e}");
    }

    #[test]
    fn compute_and_link() {
        let s = services(
            r#"
[[services]]
type = "compute"
id = "s1"
adapter = "sim"
slots = 4
price_per_cpu_s = 0.01

[[services]]
type = "network"
from = "broker"
to = "s1"
bandwidth_mbps = 100
"#,
        )
        .unwrap();
        let c = s[0].as_compute().unwrap();
        assert_eq!((c.slots, c.price_per_cpu_s, c.adapter), (4, 0.01, AdapterKind::Sim));
        let l = s[1].as_link().unwrap();
        assert_eq!((l.from.as_str(), l.to.as_str(), l.bandwidth_mbps), ("broker", "s1", 100.0));
    }

    #[test]
    fn duplicate_and_unknown_services() {
        let dup = "[[services]]\ntype = \"compute\"\nid = \"s1\"\nadapter = \"sim\"\n[[services]]\ntype = \"datahost\"\nid = \"s1\"\nprotocol = \"sim\"\n";
        assert!(matches!(services(dup), Err(InterpError::DuplicateServiceId(id)) if id == "s1"));
        let unk = "[[services]]\ntype = \"condor\"\nid = \"c\"\n";
        assert!(matches!(services(unk), Err(InterpError::UnknownServiceType(t)) if t == "condor"));
        let misplaced = "[[services]]\ntype = \"compute\"\nid = \"s1\"\nadapter = \"sim\"\nprotocol = \"sim\"\n";
        assert!(matches!(services(misplaced), Err(InterpError::Parse { .. })));
    }

    fn creds(text: &str, env: &[(&str, &str)]) -> Result<Vec<Credential>, InterpError> {
        let doc = DescriptionDocument::parse(text, DocumentKind::Credentials, "c.toml")?;
        parse_credentials_with(&doc, |k| env.iter().find(|(n, _)| *n == k).map(|(_, v)| v.to_string()))
    }

    #[test]
    fn userpass_from_env() {
        let doc = "[[credentials]]\nid = \"c1\"\ntype = \"userpass\"\nuser = \"u\"\npassword_env = \"BK_PW\"\n";
        let c = creds(doc, &[("BK_PW", "hunter2")]).unwrap();
        assert_eq!(c[0].secret(), Some("hunter2"));
        assert!(matches!(&c[0].kind, CredentialKind::UserPass { user, .. } if user == "u"));
        assert!(!format!("{c:?}").contains("hunter2"));
        assert!(matches!(creds(doc, &[]), Err(InterpError::MissingSecret { var, .. }) if var == "BK_PW"));
    }

    #[test]
    fn missing_keyfile() {
        let doc = "[[credentials]]\nid = \"c2\"\ntype = \"keyfile\"\npath = \"/nonexistent\"\n";
        assert!(matches!(creds(doc, &[]), Err(InterpError::MissingKeyfile { .. })));
    }

    #[test]
    fn wrong_kind() {
        let doc = DescriptionDocument::parse("services = []", DocumentKind::Services, "s.toml").unwrap();
        assert!(matches!(parse_application(&doc), Err(InterpError::WrongKind { .. })));
    }
}
