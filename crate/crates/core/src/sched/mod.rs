//! Mapping of ready jobs onto compute servers and data hosts.
//!
//! Every policy is a list scheduler over slot lanes: a server with `k` slots
//! has `k` lanes, each free at some offset from now. Jobs are taken in id
//! order and appended to the lane the policy prefers. The whole batch is
//! planned so that deadline and budget checks see the full picture, but only
//! jobs landing at offset zero on a free lane are mapped this tick; the rest
//! are deferred and re-planned on the next tick.

mod data;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use tracing::debug;

use crate::model::{ApplicationContext, ComputeServer, Job, Mapping, Optimization, QoS, Requirements, Service};

pub use data::{
    compute_time, estimate, job_inputs, select_data_hosts, select_queue, transfer_endpoint, Estimate, GridView,
    InputRef, QueueError, ReplicaChoice, SelectError,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    RoundRobin,
    CostDbc,
    TimeDbc,
    DataAware,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 4] = [PolicyKind::RoundRobin, PolicyKind::CostDbc, PolicyKind::TimeDbc, PolicyKind::DataAware];

    pub fn as_str(self) -> &'static str {
        match self {
            PolicyKind::RoundRobin => "round_robin",
            PolicyKind::CostDbc => "cost",
            PolicyKind::TimeDbc => "time",
            PolicyKind::DataAware => "data_aware",
        }
    }

    /// Policy implied by an application's optimization preference.
    pub fn for_optimization(o: Optimization) -> PolicyKind {
        match o {
            Optimization::Cost => PolicyKind::CostDbc,
            Optimization::Time => PolicyKind::TimeDbc,
            Optimization::None => PolicyKind::RoundRobin,
        }
    }

    fn economy(self) -> bool {
        self == PolicyKind::CostDbc
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PolicyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "round_robin" => Ok(PolicyKind::RoundRobin),
            "cost" | "cost_dbc" => Ok(PolicyKind::CostDbc),
            "time" | "time_dbc" => Ok(PolicyKind::TimeDbc),
            "data_aware" => Ok(PolicyKind::DataAware),
            other => Err(format!("unknown policy {other:?} (expected round_robin, cost, time or data_aware)")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SchedConfig {
    /// Compute time assumed for servers without history.
    pub bootstrap_s: f64,
}

impl Default for SchedConfig {
    fn default() -> Self {
        SchedConfig { bootstrap_s: 60.0 }
    }
}

/// Run-level facts a tick needs beyond the jobs and services.
#[derive(Debug, Clone, Copy, Default)]
pub struct TickContext {
    pub now_ms: u64,
    pub run_start_ms: u64,
    /// Estimated cost already committed to mapped jobs.
    pub spent: f64,
    /// READY jobs waiting in the store behind this batch.
    pub backlog: usize,
}

impl TickContext {
    fn deadline_left_s(&self, qos: &QoS) -> f64 {
        match qos.deadline_s {
            Some(d) => d - self.now_ms.saturating_sub(self.run_start_ms) as f64 / 1000.0,
            None => f64::INFINITY,
        }
    }

    fn budget_left(&self, qos: &QoS) -> f64 {
        qos.budget.map_or(f64::INFINITY, |b| b - self.spent)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScheduleTickResult {
    pub mappings: Vec<Mapping>,
    pub deferred: Vec<String>,
    pub infeasible: Vec<(String, String)>,
}

/// A planned placement of one job.
#[derive(Debug, Clone, PartialEq)]
pub struct Placement {
    pub job_id: String,
    pub service_id: String,
    pub lane: usize,
    /// Seconds from now.
    pub start_s: f64,
    pub finish_s: f64,
    pub estimate: Estimate,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Plan {
    pub placements: Vec<Placement>,
    pub infeasible: Vec<(String, String)>,
}

impl Plan {
    pub fn makespan_s(&self) -> f64 {
        self.placements.iter().map(|p| p.finish_s).fold(0.0, f64::max)
    }

    pub fn cost(&self) -> f64 {
        self.placements.iter().map(|p| p.estimate.cost).sum()
    }

    pub fn count_on(&self, service_id: &str) -> usize {
        self.placements.iter().filter(|p| p.service_id == service_id).count()
    }
}

fn meets(req: &Requirements, s: &ComputeServer) -> bool {
    let eq = |want: &Option<String>, have: &str| want.as_deref().is_none_or(|w| w.eq_ignore_ascii_case(have));
    eq(&req.arch, &s.architecture)
        && eq(&req.os, &s.os)
        && req.queue.as_deref().is_none_or(|q| s.queues.iter().any(|x| x.name == q))
}

#[derive(Clone)]
struct Lanes {
    server: usize,
    free_at: Vec<f64>,
}

impl Lanes {
    fn earliest(&self) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for (i, &t) in self.free_at.iter().enumerate() {
            if t < best.1 {
                best = (i, t);
            }
        }
        best
    }
}

/// A job with its estimate on every qualifying server.
struct Prepared<'a> {
    job_id: &'a str,
    options: Vec<(usize, Estimate)>,
}

enum Rank {
    Cost,
    DataFirst,
    RoundRobin,
}

/// Stateful scheduler; round robin keeps its pointer between ticks.
#[derive(Debug, Clone)]
pub struct Scheduler {
    pub policy: PolicyKind,
    pub cfg: SchedConfig,
    rr_next: usize,
}

impl Scheduler {
    pub fn new(policy: PolicyKind, cfg: SchedConfig) -> Self {
        Scheduler { policy, cfg, rr_next: 0 }
    }

    /// Plans the whole batch without admitting anything.
    pub fn plan(&mut self, jobs: &[Job], ctx: &ApplicationContext, view: &GridView, tick: &TickContext) -> Plan {
        let qos = &ctx.qos;
        let deadline = tick.deadline_left_s(qos);
        let budget = tick.budget_left(qos);
        let lanes: Vec<Lanes> = view
            .computes
            .iter()
            .enumerate()
            .filter(|(_, s)| s.is_schedulable(tick.now_ms) && s.slots > 0)
            .map(|(i, s)| {
                let busy = compute_time(s, self.cfg.bootstrap_s);
                let mut free_at = vec![0.0; s.free_slots() as usize];
                free_at.resize(s.slots as usize, busy);
                Lanes { server: i, free_at }
            })
            .collect();

        let mut infeasible = Vec::new();
        let mut prepared = Vec::with_capacity(jobs.len());
        for job in jobs {
            match self.prepare(job, ctx, view, &lanes) {
                Ok(p) => prepared.push(p),
                Err(why) => infeasible.push((job.job_id.clone(), why)),
            }
        }

        let mut plan = match self.policy {
            PolicyKind::CostDbc => self.greedy(&prepared, view, &lanes, Rank::Cost, deadline, budget),
            PolicyKind::DataAware => self.greedy(&prepared, view, &lanes, Rank::DataFirst, deadline, budget),
            PolicyKind::RoundRobin => self.greedy(&prepared, view, &lanes, Rank::RoundRobin, f64::INFINITY, budget),
            PolicyKind::TimeDbc => {
                let reserve = tick.backlog as f64
                    * prepared
                        .first()
                        .map_or(0.0, |p| p.options.iter().map(|(_, e)| e.cost).fold(f64::INFINITY, f64::min));
                self.shortest_horizon(&prepared, view, &lanes, deadline, budget - reserve)
                    .unwrap_or_else(|| self.greedy(&prepared, view, &lanes, Rank::Cost, deadline, budget))
            }
        };
        infeasible.append(&mut plan.infeasible);
        plan.infeasible = infeasible;
        plan
    }

    fn prepare<'a>(&self, job: &'a Job, ctx: &ApplicationContext, view: &GridView, lanes: &[Lanes]) -> Result<Prepared<'a>, String> {
        let task = ctx.task(&job.task_id).ok_or_else(|| format!("unknown task {}", job.task_id))?;
        let inputs = job_inputs(job, task).map_err(|e| e.to_string())?;
        let mut options = Vec::new();
        let mut last_err = None;
        for (li, l) in lanes.iter().enumerate() {
            let server = &view.computes[l.server];
            if !meets(&task.requirements, server) {
                continue;
            }
            match estimate(&inputs, server, view, self.cfg.bootstrap_s, self.policy.economy()) {
                Ok(est) => options.push((li, est)),
                Err(e) => last_err = Some(e.to_string()),
            }
        }
        if options.is_empty() {
            return Err(last_err.unwrap_or_else(|| "no available server meets the job's requirements".into()));
        }
        Ok(Prepared { job_id: &job.job_id, options })
    }

    /// Smallest horizon within which the cheapest-first list schedule places
    /// every job inside the budget.
    fn shortest_horizon(&mut self, jobs: &[Prepared], view: &GridView, lanes: &[Lanes], deadline: f64, budget: f64) -> Option<Plan> {
        let mut horizons: Vec<f64> = Vec::new();
        for p in jobs.iter().take(1) {
            for (li, est) in &p.options {
                for &t0 in &lanes[*li].free_at {
                    horizons.extend((1..=jobs.len()).map(|k| t0 + k as f64 * est.duration_s));
                }
            }
        }
        // Non-uniform batches may finish off the first job's grid.
        for p in jobs {
            for (li, est) in &p.options {
                horizons.extend(lanes[*li].free_at.iter().map(|t0| t0 + est.duration_s));
            }
        }
        horizons.retain(|h| *h <= deadline + 1e-9);
        horizons.sort_by(f64::total_cmp);
        horizons.dedup_by(|a, b| (*a - *b).abs() < 1e-9);
        let fits = |s: &mut Self, h: f64| {
            let plan = s.greedy(jobs, view, lanes, Rank::Cost, h, budget);
            plan.infeasible.is_empty().then_some(plan)
        };
        let (mut lo, mut hi) = (0usize, horizons.len());
        while lo < hi {
            let mid = (lo + hi) / 2;
            if fits(self, horizons[mid]).is_some() {
                hi = mid;
            } else {
                lo = mid + 1;
            }
        }
        horizons.get(lo).and_then(|&h| fits(self, h))
    }

    /// List scheduling: each job goes to the best-ranked lane that keeps it
    /// within `deadline` and the running total within `budget`.
    fn greedy(&mut self, jobs: &[Prepared], view: &GridView, lanes: &[Lanes], rank: Rank, deadline: f64, budget: f64) -> Plan {
        let mut lanes = lanes.to_vec();
        let mut plan = Plan::default();
        let mut spent = 0.0;
        for p in jobs {
            let room = budget - spent;
            let mut cands: Vec<(usize, usize, f64, &Estimate)> = p
                .options
                .iter()
                .map(|(li, est)| {
                    let (lane, start) = lanes[*li].earliest();
                    (*li, lane, start, est)
                })
                .collect();
            let id = |li: usize| view.computes[lanes[li].server].service_id.as_str();
            let fits = |c: &(usize, usize, f64, &Estimate)| c.2 + c.3.duration_s <= deadline + 1e-9 && c.3.cost <= room + 1e-9;
            let chosen = match rank {
                Rank::Cost => {
                    cands.sort_by(|a, b| {
                        a.3.cost
                            .total_cmp(&b.3.cost)
                            .then((a.2 + a.3.duration_s).total_cmp(&(b.2 + b.3.duration_s)))
                            .then(id(a.0).cmp(id(b.0)))
                    });
                    cands.iter().position(fits)
                }
                Rank::DataFirst => {
                    cands.sort_by(|a, b| {
                        a.3.stage_in_s
                            .total_cmp(&b.3.stage_in_s)
                            .then((a.2 + a.3.duration_s).total_cmp(&(b.2 + b.3.duration_s)))
                            .then(a.3.cost.total_cmp(&b.3.cost))
                            .then(id(a.0).cmp(id(b.0)))
                    });
                    cands.iter().position(fits)
                }
                Rank::RoundRobin => {
                    let m = lanes.len();
                    let by_pointer = (0..m).find_map(|step| {
                        let li = (self.rr_next + step) % m;
                        cands.iter().position(|c| c.0 == li && c.2 == 0.0 && fits(c))
                    });
                    match by_pointer {
                        Some(k) => {
                            self.rr_next = (cands[k].0 + 1) % m;
                            Some(k)
                        }
                        // Everything is busy: queue behind the lane that frees up first.
                        None => (0..cands.len()).filter(|&k| fits(&cands[k])).min_by(|&a, &b| {
                            cands[a].2.total_cmp(&cands[b].2).then(id(cands[a].0).cmp(id(cands[b].0)))
                        }),
                    }
                }
            };
            let Some(k) = chosen else {
                let reason = if cands.iter().all(|c| c.2 + c.3.duration_s > deadline + 1e-9) {
                    "no server can meet the deadline"
                } else {
                    "budget exhausted"
                };
                plan.infeasible.push((p.job_id.to_string(), reason.to_string()));
                continue;
            };
            let (li, lane, start_s, est) = cands[k];
            let finish_s = start_s + est.duration_s;
            lanes[li].free_at[lane] = finish_s;
            spent += est.cost;
            plan.placements.push(Placement {
                job_id: p.job_id.to_string(),
                service_id: view.computes[lanes[li].server].service_id.clone(),
                lane,
                start_s,
                finish_s,
                estimate: est.clone(),
            });
        }
        plan
    }

    /// Plans the batch and maps the jobs that can start now.
    pub fn tick(&mut self, jobs: &[Job], ctx: &ApplicationContext, services: &[Service], tick: &TickContext) -> ScheduleTickResult {
        let view = GridView::new(services);
        let plan = self.plan(jobs, ctx, &view, tick);
        let mut out = ScheduleTickResult { infeasible: plan.infeasible, ..Default::default() };
        let mut queue_use: BTreeMap<String, BTreeMap<String, u32>> = BTreeMap::new();
        for p in plan.placements {
            if p.start_s > 0.0 {
                out.deferred.push(p.job_id);
                continue;
            }
            let server = view.computes.iter().find(|s| s.service_id == p.service_id).expect("planned on a known server");
            let task = jobs
                .iter()
                .find(|j| j.job_id == p.job_id)
                .and_then(|j| ctx.task(&j.task_id))
                .expect("planned job has a task");
            let used = queue_use.entry(p.service_id.clone()).or_default();
            let queue = match select_queue(task.requirements.queue.as_deref(), server, p.estimate.duration_s, used) {
                Ok(q) => q,
                Err(e) => {
                    debug!(job = %p.job_id, error = %e, "deferring");
                    out.deferred.push(p.job_id);
                    continue;
                }
            };
            if let Some(q) = &queue {
                *used.entry(q.clone()).or_insert(0) += 1;
            }
            debug!(job = %p.job_id, server = %p.service_id, est_s = p.estimate.duration_s, est_cost = p.estimate.cost, "mapped");
            out.mappings.push(Mapping {
                job_id: p.job_id,
                compute_id: p.service_id,
                queue,
                data_selection: p.estimate.selection.iter().map(|(k, v)| (k.clone(), v.datahost.clone())).collect(),
                est_cost: p.estimate.cost,
                est_duration_s: p.estimate.duration_s,
            });
        }
        out
    }
}

/// One-shot tick with a fresh scheduler.
pub fn schedule_tick(
    jobs: &[Job],
    ctx: &ApplicationContext,
    services: &[Service],
    policy: PolicyKind,
    tick: &TickContext,
) -> ScheduleTickResult {
    Scheduler::new(policy, SchedConfig::default()).tick(jobs, ctx, services, tick)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::*;

    pub(crate) fn app(qos: QoS) -> ApplicationContext {
        ApplicationContext {
            app_id: "a".into(),
            name: "a".into(),
            qos,
            credential_ids: vec![],
            tasks: vec![Task {
                task_id: "t1".into(),
                commands: vec![TaskCommand::Execute { cmd: "true".into(), args: vec![] }],
                variables: vec![],
                expected_outputs: vec![],
                requirements: Requirements::default(),
            }],
        }
    }

    fn jobs(n: u64) -> Vec<Job> {
        (1..=n).map(|i| Job::new(job_id_for(i), "t1", Default::default())).collect()
    }

    fn server(id: &str, slots: u32, price_per_min: f64) -> Service {
        Service::Compute(ComputeServer::new(id, AdapterKind::Sim, slots, price_per_min / 60.0))
    }

    #[test]
    fn round_robin_splits_evenly() {
        let r = schedule_tick(&jobs(4), &app(QoS::default()), &[server("s1", 2, 1.0), server("s2", 2, 1.0)], PolicyKind::RoundRobin, &TickContext::default());
        let on = |s: &str| r.mappings.iter().filter(|m| m.compute_id == s).count();
        assert_eq!((on("s1"), on("s2")), (2, 2));
    }

    #[test]
    fn no_servers_defers_everything() {
        let r = schedule_tick(&jobs(1), &app(QoS::default()), &[], PolicyKind::CostDbc, &TickContext::default());
        assert!(r.mappings.is_empty());
        assert_eq!(r.deferred.len() + r.infeasible.len(), 1);
    }

    #[test]
    fn worked_cost_instance() {
        let qos = QoS { deadline_s: Some(600.0), budget: None, optimization: Optimization::Cost };
        let services = [server("s1", 1, 2.0), server("s2", 1, 1.0)];
        let mut s = Scheduler::new(PolicyKind::CostDbc, SchedConfig::default());
        let plan = s.plan(&jobs(10), &app(qos.clone()), &GridView::new(&services), &TickContext::default());
        assert_eq!(plan.count_on("s2"), 10);
        assert!((plan.cost() - 10.0).abs() < 1e-9);
        let r = s.tick(&jobs(10), &app(qos), &services, &TickContext::default());
        assert_eq!(r.mappings.len(), 1);
        assert_eq!(r.mappings[0].compute_id, "s2");
        assert_eq!(r.deferred.len(), 9);
    }

    #[test]
    fn worked_time_instance() {
        let qos = QoS { deadline_s: None, budget: Some(20.0), optimization: Optimization::Time };
        let services = [server("s1", 1, 2.0), server("s2", 1, 1.0)];
        let mut s = Scheduler::new(PolicyKind::TimeDbc, SchedConfig::default());
        let plan = s.plan(&jobs(10), &app(qos), &GridView::new(&services), &TickContext::default());
        assert_eq!((plan.count_on("s1"), plan.count_on("s2")), (5, 5));
        assert!((plan.makespan_s() - 300.0).abs() < 1e-9);
        assert!((plan.cost() - 15.0).abs() < 1e-9);
    }

    #[test]
    fn deadline_too_tight_is_infeasible() {
        let qos = QoS { deadline_s: Some(1.0), budget: None, optimization: Optimization::Cost };
        let r = schedule_tick(&jobs(2), &app(qos), &[server("s1", 4, 1.0)], PolicyKind::CostDbc, &TickContext::default());
        assert_eq!(r.infeasible.len(), 2);
        assert!(r.mappings.is_empty());
    }

    #[test]
    fn admission_never_exceeds_slots() {
        let mut c = ComputeServer::new("s1", AdapterKind::Sim, 3, 0.0);
        c.in_flight = 2;
        let r = schedule_tick(&jobs(5), &app(QoS::default()), &[Service::Compute(c)], PolicyKind::TimeDbc, &TickContext::default());
        assert_eq!(r.mappings.len(), 1);
    }

    #[test]
    fn unavailable_and_cooling_servers_are_skipped() {
        let mut a = ComputeServer::new("s1", AdapterKind::Sim, 1, 0.0);
        a.available = false;
        let mut b = ComputeServer::new("s2", AdapterKind::Sim, 1, 0.0);
        b.cooldown_until = Some(10_000);
        let services = [Service::Compute(a), Service::Compute(b)];
        let t = TickContext { now_ms: 5_000, ..Default::default() };
        assert!(schedule_tick(&jobs(1), &app(QoS::default()), &services, PolicyKind::RoundRobin, &t).mappings.is_empty());
        let t = TickContext { now_ms: 10_000, ..Default::default() };
        assert_eq!(schedule_tick(&jobs(1), &app(QoS::default()), &services, PolicyKind::RoundRobin, &t).mappings[0].compute_id, "s2");
    }

    #[test]
    fn policy_names_round_trip() {
        for p in PolicyKind::ALL {
            assert_eq!(p.as_str().parse::<PolicyKind>().unwrap(), p);
        }
    }
}
