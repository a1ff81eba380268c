//! Tasks, variables and parameter-sweep expansion into jobs.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::job::Job;

/// A bound variable value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "value", rename_all = "lowercase")]
pub enum Value {
    Integer(i64),
    Float(f64),
    String(String),
    /// Logical name of a replicated file.
    Gridfile(String),
}

impl Value {
    /// Canonical text used when the value is substituted into commands.
    pub fn render(&self) -> String {
        match self {
            Value::Integer(i) => i.to_string(),
            // Display for f64 is the shortest representation that round-trips.
            Value::Float(f) => f.to_string(),
            Value::String(s) => s.clone(),
            Value::Gridfile(logical) => staged_name(logical).to_string(),
        }
    }
}

/// File name a logical file gets once staged into a job's working directory.
pub fn staged_name(logical: &str) -> &str {
    logical.rsplit('/').next().unwrap_or(logical)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VarType {
    Integer,
    Float,
    String,
    Gridfile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    IntRange { from: i64, to: i64, step: i64 },
    FloatRange { from: f64, to: f64, step: f64 },
    Values(Vec<String>),
    /// Logical-file pattern resolved through a replica catalog.
    Pattern(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variable {
    pub name: String,
    pub vtype: VarType,
    pub domain: Domain,
}

// Float ranges tolerate representation error in (to - from) / step.
const FLOAT_RANGE_EPS: f64 = 1e-9;

impl Variable {
    /// Values of the domain in ascending domain order.
    pub fn values(&self, catalog: Option<&dyn ReplicaResolver>) -> Result<Vec<Value>, ExpandError> {
        let empty = || ExpandError::EmptyDomain(self.name.clone());
        let vals = match (&self.vtype, &self.domain) {
            (VarType::Integer, Domain::IntRange { from, to, step }) => {
                if *step == 0 || (to - from).signum() * step.signum() < 0 {
                    return Err(empty());
                }
                let count = (to - from) / step + 1;
                (0..count).map(|k| Value::Integer(from + k * step)).collect()
            }
            (VarType::Float, Domain::FloatRange { from, to, step }) => {
                if *step == 0.0 || !step.is_finite() {
                    return Err(empty());
                }
                let span = (to - from) / step;
                if span < -FLOAT_RANGE_EPS || !span.is_finite() {
                    return Err(empty());
                }
                let count = (span + FLOAT_RANGE_EPS).floor() as u64 + 1;
                (0..count).map(|k| Value::Float(from + k as f64 * step)).collect()
            }
            (VarType::String, Domain::Values(vs)) => vs.iter().cloned().map(Value::String).collect(),
            (VarType::Gridfile, Domain::Pattern(p)) => {
                let names = catalog.map(|c| c.resolve(p)).unwrap_or_default();
                if names.is_empty() {
                    return Err(ExpandError::UnresolvedGridfile(p.clone()));
                }
                names.into_iter().map(Value::Gridfile).collect()
            }
            _ => return Err(ExpandError::DomainMismatch(self.name.clone())),
        };
        let vals: Vec<Value> = vals;
        if vals.is_empty() {
            return Err(empty());
        }
        Ok(vals)
    }
}

/// One end of a file transfer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Endpoint {
    /// A path on the broker machine.
    Local(String),
    /// A path relative to the job's remote working directory.
    Remote(String),
    DataHost { id: String, path: String },
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Endpoint::Local(p) => write!(f, "local:{p}"),
            Endpoint::Remote(p) => write!(f, "remote:{p}"),
            Endpoint::DataHost { id, path } => write!(f, "datahost:{id}:{path}"),
        }
    }
}

impl FromStr for Endpoint {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (kind, rest) = s
            .split_once(':')
            .ok_or_else(|| format!("endpoint {s:?} lacks a local:/remote:/datahost: prefix"))?;
        let nonempty = |p: &str| {
            if p.is_empty() {
                Err(format!("endpoint {s:?} has an empty path"))
            } else {
                Ok(p.to_string())
            }
        };
        match kind {
            "local" => Ok(Endpoint::Local(nonempty(rest)?)),
            "remote" => Ok(Endpoint::Remote(nonempty(rest)?)),
            "datahost" => {
                let (id, path) = rest
                    .split_once(':')
                    .ok_or_else(|| format!("endpoint {s:?} must be datahost:<id>:<path>"))?;
                if id.is_empty() {
                    return Err(format!("endpoint {s:?} has an empty datahost id"));
                }
                Ok(Endpoint::DataHost { id: id.to_string(), path: nonempty(path)? })
            }
            other => Err(format!("unknown endpoint kind {other:?}")),
        }
    }
}

impl TryFrom<String> for Endpoint {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<Endpoint> for String {
    fn from(e: Endpoint) -> String {
        e.to_string()
    }
}

impl Endpoint {
    pub fn path(&self) -> &str {
        match self {
            Endpoint::Local(p) | Endpoint::Remote(p) => p,
            Endpoint::DataHost { path, .. } => path,
        }
    }

    pub fn is_remote(&self) -> bool {
        matches!(self, Endpoint::Remote(_))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskCommand {
    Copy { source: Endpoint, dest: Endpoint },
    Execute { cmd: String, #[serde(default)] args: Vec<String> },
    Substitute { template: String, dest: String },
}

impl TaskCommand {
    /// Text fields that may contain variable references.
    pub fn texts(&self) -> Vec<&str> {
        match self {
            TaskCommand::Copy { source, dest } => vec![source.path(), dest.path()],
            TaskCommand::Execute { cmd, args } => {
                let mut v = vec![cmd.as_str()];
                v.extend(args.iter().map(String::as_str));
                v
            }
            TaskCommand::Substitute { template, dest } => vec![template.as_str(), dest.as_str()],
        }
    }

    /// Copy into the working directory from outside it.
    pub fn is_stage_in(&self) -> bool {
        matches!(self, TaskCommand::Copy { source, dest } if dest.is_remote() && !source.is_remote())
    }

    /// Copy out of the working directory.
    pub fn is_stage_out(&self) -> bool {
        matches!(self, TaskCommand::Copy { source, dest } if source.is_remote() && !dest.is_remote())
    }
}

/// Minimum requirements a job places on its compute server.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Requirements {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arch: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub os: Option<String>,
    /// Pins the job to a named queue.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub queue: Option<String>,
}

impl Requirements {
    pub fn is_empty(&self) -> bool {
        self.arch.is_none() && self.os.is_none() && self.queue.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub task_id: String,
    pub commands: Vec<TaskCommand>,
    pub variables: Vec<Variable>,
    pub expected_outputs: Vec<String>,
    #[serde(default)]
    pub requirements: Requirements,
}

/// Resolves logical-file patterns to logical names.
pub trait ReplicaResolver {
    /// Matching logical names, ascending.
    fn resolve(&self, pattern: &str) -> Vec<String>;
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExpandError {
    #[error("variable {0} has an empty domain")]
    EmptyDomain(String),
    #[error("gridfile pattern {0:?} matches no catalog entry")]
    UnresolvedGridfile(String),
    #[error("variable {0} has a domain that does not fit its type")]
    DomainMismatch(String),
}

/// Lazily enumerates the cross product of a task's variable domains.
///
/// The first declared variable varies slowest.
pub struct JobExpansion<'a> {
    task: &'a Task,
    domains: Vec<Vec<Value>>,
    cursor: Vec<usize>,
    next_index: u64,
    done: bool,
}

impl<'a> JobExpansion<'a> {
    pub fn new(task: &'a Task, catalog: Option<&dyn ReplicaResolver>, first_index: u64) -> Result<Self, ExpandError> {
        let domains = task
            .variables
            .iter()
            .map(|v| v.values(catalog))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(JobExpansion {
            task,
            cursor: vec![0; domains.len()],
            domains,
            next_index: first_index,
            done: false,
        })
    }

    /// Number of jobs the expansion yields in total.
    pub fn cardinality(&self) -> u64 {
        self.domains.iter().map(|d| d.len() as u64).product()
    }
}

/// Canonical job identifier for the `index`-th job of a run.
pub fn job_id_for(index: u64) -> String {
    format!("j{index:06}")
}

impl Iterator for JobExpansion<'_> {
    type Item = Job;

    fn next(&mut self) -> Option<Job> {
        if self.done {
            return None;
        }
        let bindings: BTreeMap<String, Value> = self
            .task
            .variables
            .iter()
            .zip(&self.cursor)
            .zip(&self.domains)
            .map(|((var, &i), dom)| (var.name.clone(), dom[i].clone()))
            .collect();
        let job = Job::new(job_id_for(self.next_index), self.task.task_id.clone(), bindings);
        self.next_index += 1;

        // Odometer increment, last variable fastest.
        self.done = true;
        for pos in (0..self.cursor.len()).rev() {
            self.cursor[pos] += 1;
            if self.cursor[pos] < self.domains[pos].len() {
                self.done = false;
                break;
            }
            self.cursor[pos] = 0;
        }
        Some(job)
    }
}

/// Expands a task into one READY job per combination of variable values.
pub fn expand_task(task: &Task, catalog: Option<&dyn ReplicaResolver>) -> Result<Vec<Job>, ExpandError> {
    Ok(JobExpansion::new(task, catalog, 1)?.collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn task(vars: Vec<Variable>) -> Task {
        Task {
            task_id: "t1".into(),
            commands: vec![TaskCommand::Execute { cmd: "/bin/true".into(), args: vec![] }],
            variables: vars,
            expected_outputs: vec![],
            requirements: Requirements::default(),
        }
    }

    fn int(name: &str, from: i64, to: i64, step: i64) -> Variable {
        Variable { name: name.into(), vtype: VarType::Integer, domain: Domain::IntRange { from, to, step } }
    }

    fn strings(name: &str, vals: &[&str]) -> Variable {
        Variable {
            name: name.into(),
            vtype: VarType::String,
            domain: Domain::Values(vals.iter().map(|s| s.to_string()).collect()),
        }
    }

    #[test]
    fn single_range() {
        let jobs = expand_task(&task(vec![int("x", 1, 3, 1)]), None).unwrap();
        let xs: Vec<_> = jobs.iter().map(|j| j.bindings["x"].clone()).collect();
        assert_eq!(xs, vec![Value::Integer(1), Value::Integer(2), Value::Integer(3)]);
        assert!(jobs.iter().all(|j| j.state == super::super::JobState::Ready && j.attempts == 0));
    }

    #[test]
    fn cross_product_order() {
        let jobs = expand_task(&task(vec![int("x", 1, 2, 1), strings("y", &["a", "b", "c"])]), None).unwrap();
        let got: Vec<String> = jobs
            .iter()
            .map(|j| format!("{},{}", j.bindings["x"].render(), j.bindings["y"].render()))
            .collect();
        assert_eq!(got, ["1,a", "1,b", "1,c", "2,a", "2,b", "2,c"]);
    }

    #[test]
    fn no_variables_yields_one_job() {
        assert_eq!(expand_task(&task(vec![]), None).unwrap().len(), 1);
    }

    #[test]
    fn negative_step_and_bad_direction() {
        assert_eq!(expand_task(&task(vec![int("x", 5, 1, -2)]), None).unwrap().len(), 3);
        assert_eq!(
            expand_task(&task(vec![int("x", 1, 5, -1)]), None).unwrap_err(),
            ExpandError::EmptyDomain("x".into())
        );
        assert!(expand_task(&task(vec![int("x", 1, 5, 0)]), None).is_err());
        assert!(expand_task(&task(vec![strings("s", &[])]), None).is_err());
    }

    #[test]
    fn float_range_multiplies() {
        let v = Variable {
            name: "f".into(),
            vtype: VarType::Float,
            domain: Domain::FloatRange { from: 0.0, to: 0.3, step: 0.1 },
        };
        let vals = v.values(None).unwrap();
        assert_eq!(vals.len(), 4);
        assert_eq!(vals[3], Value::Float(3.0 * 0.1));
    }

    #[test]
    fn unresolved_gridfile() {
        struct Empty;
        impl ReplicaResolver for Empty {
            fn resolve(&self, _: &str) -> Vec<String> {
                vec![]
            }
        }
        let v = Variable { name: "g".into(), vtype: VarType::Gridfile, domain: Domain::Pattern("lfn:*".into()) };
        assert_eq!(
            expand_task(&task(vec![v.clone()]), Some(&Empty)).unwrap_err(),
            ExpandError::UnresolvedGridfile("lfn:*".into())
        );
        assert!(expand_task(&task(vec![v]), None).is_err());
    }

    #[test]
    fn endpoint_syntax() {
        assert_eq!("datahost:d1:/data/a".parse::<Endpoint>().unwrap(), Endpoint::DataHost {
            id: "d1".into(),
            path: "/data/a".into()
        });
        assert!("ftp:/x".parse::<Endpoint>().is_err());
        assert!("remote:".parse::<Endpoint>().is_err());
        let e: Endpoint = "local:in.txt".parse().unwrap();
        assert_eq!(e.to_string(), "local:in.txt");
    }

    #[test]
    fn rendering() {
        assert_eq!(Value::Integer(5).render(), "5");
        assert_eq!(Value::Float(0.1).render(), "0.1");
        assert_eq!(Value::Float(2.5).render(), "2.5");
        assert_eq!(Value::Gridfile("lfn:/grid/data/set1.dat".into()).render(), "set1.dat");
    }
}
