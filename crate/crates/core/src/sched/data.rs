//! Input discovery, replica selection, queue fitting and estimation.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::model::{
    bytes_to_mb, substitute, ComputeServer, DataHost, Endpoint, Job, LinkTable, ReplicaIndex, Service, StagingMode,
    SubstError, Task, TaskCommand, Value, BROKER_ENDPOINT,
};

/// An input a job needs in its working directory before it runs.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum InputRef {
    /// A gridfile binding; the data host is chosen by replica selection.
    Logical { name: String, staged_as: String },
    /// A copy from a named data host.
    Fixed { datahost: String, path: String, dest: String },
    /// A copy from the broker's file system.
    Local { path: String, dest: String },
}

/// Every input of `job`, in a stable order: gridfile bindings by variable
/// name, then copy commands in declaration order.
pub fn job_inputs(job: &Job, task: &Task) -> Result<Vec<InputRef>, SubstError> {
    let mut out = Vec::new();
    for v in job.bindings.values() {
        if let Value::Gridfile(name) = v {
            out.push(InputRef::Logical { name: name.clone(), staged_as: v.render() });
        }
    }
    for cmd in &task.commands {
        let TaskCommand::Copy { source, dest: Endpoint::Remote(dest) } = cmd else { continue };
        let dest = substitute(dest, &job.bindings, &job.job_id)?;
        match source {
            Endpoint::DataHost { id, path } => out.push(InputRef::Fixed {
                datahost: id.clone(),
                path: substitute(path, &job.bindings, &job.job_id)?,
                dest,
            }),
            Endpoint::Local(path) => {
                out.push(InputRef::Local { path: substitute(path, &job.bindings, &job.job_id)?, dest })
            }
            Endpoint::Remote(_) => {}
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SelectError {
    #[error("no available replica of {0}")]
    NoReplica(String),
}

/// Snapshot of the grid used by one scheduling pass.
#[derive(Debug, Clone)]
pub struct GridView {
    pub computes: Vec<ComputeServer>,
    pub datahosts: BTreeMap<String, DataHost>,
    pub replicas: ReplicaIndex,
    pub links: LinkTable,
}

impl GridView {
    pub fn new(services: &[Service]) -> Self {
        let mut computes: Vec<ComputeServer> = services.iter().filter_map(Service::as_compute).cloned().collect();
        computes.sort_by(|a, b| a.service_id.cmp(&b.service_id));
        GridView {
            computes,
            datahosts: services
                .iter()
                .filter_map(Service::as_data)
                .map(|d| (d.service_id.clone(), d.clone()))
                .collect(),
            replicas: ReplicaIndex::from_services(services),
            links: LinkTable::from_services(services),
        }
    }

    fn host_available(&self, id: &str) -> bool {
        self.datahosts.get(id).is_some_and(|d| d.available)
    }

    fn host_price(&self, id: &str) -> f64 {
        self.datahosts.get(id).map_or(0.0, |d| d.price_per_mb)
    }
}

/// Endpoint whose links carry a server's inputs: the broker when it pushes,
/// the server itself when it pulls.
pub fn transfer_endpoint(server: &ComputeServer) -> &str {
    match server.staging {
        StagingMode::Push => BROKER_ENDPOINT,
        StagingMode::Pull => &server.service_id,
    }
}

/// Replica chosen for one logical file.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicaChoice {
    pub datahost: String,
    pub path: String,
    pub size_bytes: u64,
    pub transfer_s: f64,
    pub cost: f64,
}

fn score(view: &GridView, endpoint: &str, datahost: &str, size: u64) -> (f64, f64) {
    let link = view.links.lookup(endpoint, datahost);
    let mb = bytes_to_mb(size);
    (link.transfer_s(size), mb * (view.host_price(datahost) + link.cost_per_mb))
}

/// Picks a replica per logical name. Without `economy` the transfer time is
/// minimized; with it the monetary cost, tie-broken by transfer time. Final
/// ties go to the lower data host id.
pub fn select_data_hosts<'a>(
    names: impl IntoIterator<Item = &'a str>,
    view: &GridView,
    endpoint: &str,
    economy: bool,
) -> Result<BTreeMap<String, ReplicaChoice>, SelectError> {
    let mut out = BTreeMap::new();
    for name in names {
        let mut best: Option<ReplicaChoice> = None;
        for r in view.replicas.replicas(name) {
            if !view.host_available(&r.datahost) {
                continue;
            }
            let (t, c) = score(view, endpoint, &r.datahost, r.size_bytes);
            let cand = ReplicaChoice {
                datahost: r.datahost.clone(),
                path: r.path.clone(),
                size_bytes: r.size_bytes,
                transfer_s: t,
                cost: c,
            };
            let better = match &best {
                None => true,
                Some(b) => {
                    let key = |x: &ReplicaChoice| if economy { (x.cost, x.transfer_s) } else { (x.transfer_s, 0.0) };
                    match key(&cand).partial_cmp(&key(b)) {
                        Some(std::cmp::Ordering::Less) => true,
                        Some(std::cmp::Ordering::Equal) => cand.datahost < b.datahost,
                        _ => false,
                    }
                }
            };
            if better {
                best = Some(cand);
            }
        }
        out.insert(name.to_string(), best.ok_or_else(|| SelectError::NoReplica(name.to_string()))?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum QueueError {
    #[error("no queue on {0} fits the job")]
    NoFittingQueue(String),
}

/// Queue a job should enter on `server`. `extra` counts admissions made
/// earlier in the same pass, per queue name.
pub fn select_queue(
    pinned: Option<&str>,
    server: &ComputeServer,
    est_duration_s: f64,
    extra: &BTreeMap<String, u32>,
) -> Result<Option<String>, QueueError> {
    if server.queues.is_empty() {
        return Ok(None);
    }
    let free = |q: &crate::model::Queue| q.in_flight + extra.get(&q.name).copied().unwrap_or(0) < q.slots;
    if let Some(p) = pinned {
        return match server.queues.iter().find(|q| q.name == p) {
            Some(q) if free(q) => Ok(Some(p.to_string())),
            _ => Err(QueueError::NoFittingQueue(server.service_id.clone())),
        };
    }
    server
        .queues
        .iter()
        .filter(|q| q.max_wallclock_s >= est_duration_s && free(q))
        .min_by(|a, b| a.max_wallclock_s.total_cmp(&b.max_wallclock_s).then_with(|| a.name.cmp(&b.name)))
        .map(|q| Some(q.name.clone()))
        .ok_or_else(|| QueueError::NoFittingQueue(server.service_id.clone()))
}

/// Estimated cost and duration of running one job on one server.
#[derive(Debug, Clone, PartialEq)]
pub struct Estimate {
    pub stage_in_s: f64,
    pub compute_s: f64,
    pub duration_s: f64,
    pub cost: f64,
    /// Logical file name to chosen replica.
    pub selection: BTreeMap<String, ReplicaChoice>,
}

/// Compute time expected on `server`: the observed mean once it has
/// finished a job, the bootstrap value before that.
pub fn compute_time(server: &ComputeServer, bootstrap_s: f64) -> f64 {
    match server.observed_rate {
        Some(rate) if server.completed > 0 && rate > 0.0 => 1.0 / rate,
        _ => bootstrap_s,
    }
}

pub fn estimate(
    inputs: &[InputRef],
    server: &ComputeServer,
    view: &GridView,
    bootstrap_s: f64,
    economy: bool,
) -> Result<Estimate, SelectError> {
    let endpoint = transfer_endpoint(server);
    let names = inputs.iter().filter_map(|i| match i {
        InputRef::Logical { name, .. } => Some(name.as_str()),
        _ => None,
    });
    let selection = select_data_hosts(names, view, endpoint, economy)?;
    let mut stage_in_s: f64 = selection.values().map(|c| c.transfer_s).sum();
    let mut data_cost: f64 = selection.values().map(|c| c.cost).sum();
    for i in inputs {
        if let InputRef::Fixed { datahost, path, .. } = i {
            let size = view.datahosts.get(datahost).and_then(|d| d.file_by_path(path)).map_or(0, |f| f.size_bytes);
            let (t, c) = score(view, endpoint, datahost, size);
            stage_in_s += t;
            data_cost += c;
        }
    }
    let compute_s = compute_time(server, bootstrap_s);
    Ok(Estimate {
        stage_in_s,
        compute_s,
        duration_s: stage_in_s + compute_s,
        cost: compute_s * server.price_per_cpu_s + data_cost,
        selection,
    })
}
