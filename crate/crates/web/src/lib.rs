//! Browser bindings. Every export takes and returns plain strings; results
//! are JSON documents rendered by `www/index.html`.

use std::collections::BTreeMap;

use broker_core::interp::{parse_application, parse_services, DescriptionDocument, DocumentKind};
use broker_core::model::{next_state, substitute, ApplicationContext, Job, JobExpansion, JobState, TaskCommand, TransitionEvent};
use broker_core::sched::{GridView, PolicyKind, SchedConfig, Scheduler, TickContext};
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Debug, Serialize)]
pub struct JobView {
    pub job_id: String,
    pub bindings: BTreeMap<String, String>,
    pub commands: Vec<String>,
}

#[derive(Debug, Serialize)]
pub struct Expansion {
    pub count: u64,
    pub jobs: Vec<JobView>,
}

fn application(text: &str) -> Result<ApplicationContext, String> {
    let doc = DescriptionDocument::parse(text, DocumentKind::Application, "application").map_err(|e| e.to_string())?;
    parse_application(&doc).map_err(|e| e.to_string())
}

fn render(cmd: &TaskCommand, job: &Job) -> Result<String, String> {
    let sub = |t: &str| substitute(t, &job.bindings, &job.job_id).map_err(|e| e.to_string());
    Ok(match cmd {
        TaskCommand::Copy { source, dest } => format!("copy {} -> {}", sub(&source.to_string())?, sub(&dest.to_string())?),
        TaskCommand::Execute { cmd, args } => {
            let mut words = vec![sub(cmd)?];
            for a in args {
                words.push(sub(a)?);
            }
            format!("execute {}", words.join(" "))
        }
        TaskCommand::Substitute { template, dest } => format!("substitute {} -> {}", sub(template)?, sub(dest)?),
    })
}

/// Expands an application document, listing at most `limit` jobs.
pub fn expand_document(app_toml: &str, limit: usize) -> Result<Expansion, String> {
    let ctx = application(app_toml)?;
    let task = &ctx.tasks[0];
    let jobs = JobExpansion::new(task, None, 1).map_err(|e| e.to_string())?;
    let count = jobs.cardinality();
    let jobs = jobs
        .take(limit)
        .map(|job| {
            Ok(JobView {
                bindings: job.bindings.iter().map(|(k, v)| (k.clone(), v.render())).collect(),
                commands: task.commands.iter().map(|c| render(c, &job)).collect::<Result<_, String>>()?,
                job_id: job.job_id,
            })
        })
        .collect::<Result<_, String>>()?;
    Ok(Expansion { count, jobs })
}

#[derive(Debug, Serialize)]
pub struct PlacementView {
    pub job_id: String,
    pub server: String,
    pub start_s: f64,
    pub finish_s: f64,
    pub cost: f64,
}

#[derive(Debug, Serialize)]
pub struct PlanView {
    pub policy: String,
    pub placements: Vec<PlacementView>,
    pub infeasible: Vec<(String, String)>,
    pub makespan_s: f64,
    pub cost: f64,
    pub per_server: BTreeMap<String, usize>,
}

/// Plans every job of the application onto the services, assuming each job
/// computes for `job_length_s` seconds.
pub fn plan_documents(app_toml: &str, services_toml: &str, policy: &str, job_length_s: f64) -> Result<PlanView, String> {
    if job_length_s.is_nan() || job_length_s <= 0.0 {
        return Err("job length must be positive".into());
    }
    let ctx = application(app_toml)?;
    let doc = DescriptionDocument::parse(services_toml, DocumentKind::Services, "services").map_err(|e| e.to_string())?;
    let services = parse_services(&doc).map_err(|e| e.to_string())?;
    let policy = if policy.is_empty() {
        PolicyKind::for_optimization(ctx.qos.optimization)
    } else {
        policy.parse::<PolicyKind>()?
    };
    let jobs: Vec<Job> = JobExpansion::new(&ctx.tasks[0], None, 1).map_err(|e| e.to_string())?.collect();
    let mut scheduler = Scheduler::new(policy, SchedConfig { bootstrap_s: job_length_s });
    let plan = scheduler.plan(&jobs, &ctx, &GridView::new(&services), &TickContext::default());
    let mut per_server = BTreeMap::new();
    for p in &plan.placements {
        *per_server.entry(p.service_id.clone()).or_insert(0) += 1;
    }
    Ok(PlanView {
        policy: policy.as_str().to_string(),
        makespan_s: plan.makespan_s(),
        cost: plan.cost(),
        placements: plan
            .placements
            .iter()
            .map(|p| PlacementView {
                job_id: p.job_id.clone(),
                server: p.service_id.clone(),
                start_s: p.start_s,
                finish_s: p.finish_s,
                cost: p.estimate.cost,
            })
            .collect(),
        infeasible: plan.infeasible,
        per_server,
    })
}

/// A single job driven by hand through its lifecycle.
#[wasm_bindgen]
pub struct Machine {
    job: Job,
    max_attempts: u32,
    clock_s: u64,
    history: Vec<String>,
}

#[derive(Debug, Serialize)]
pub struct MachineView<'a> {
    pub state: JobState,
    pub attempts: u32,
    pub terminal: bool,
    pub legal: Vec<&'static str>,
    pub failure_reason: Option<&'a str>,
    pub history: &'a [String],
}

impl Machine {
    pub fn create(max_attempts: u32) -> Machine {
        Machine { job: Job::new("j000001", "t1", BTreeMap::new()), max_attempts: max_attempts.max(1), clock_s: 0, history: Vec::new() }
    }

    fn event(name: &str) -> Option<TransitionEvent> {
        TransitionEvent::kinds().into_iter().find(|e| e.name() == name).map(|e| match e {
            TransitionEvent::Failure(_) => TransitionEvent::Failure("failed by hand".into()),
            other => other,
        })
    }

    /// Events accepted in the current state. A FAILED job that used up its
    /// attempts accepts nothing.
    pub fn legal(&self) -> Vec<&'static str> {
        if self.job.is_terminal(self.max_attempts) {
            return Vec::new();
        }
        TransitionEvent::kinds().iter().filter(|e| next_state(self.job.state, e).is_some()).map(TransitionEvent::name).collect()
    }

    pub fn fire(&mut self, name: &str) -> Result<JobState, String> {
        let event = Machine::event(name).ok_or_else(|| format!("unknown event {name}"))?;
        if !self.legal().contains(&name) {
            return Err(format!("{name} is not allowed in state {}", self.job.state));
        }
        let from = self.job.state;
        self.clock_s += 1;
        self.job.apply(event, self.clock_s * 1000).map_err(|e| e.to_string())?;
        self.history.push(format!("t={}s {from} --{name}--> {}", self.clock_s, self.job.state));
        Ok(self.job.state)
    }

    pub fn view(&self) -> MachineView<'_> {
        MachineView {
            state: self.job.state,
            attempts: self.job.attempts,
            terminal: self.job.is_terminal(self.max_attempts),
            legal: self.legal(),
            failure_reason: self.job.failure_reason.as_deref(),
            history: &self.history,
        }
    }
}

fn json<T: Serialize>(r: Result<T, String>) -> Result<String, JsError> {
    r.map(|v| serde_json::to_string(&v).expect("views serialize")).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn expand(app_toml: &str, limit: usize) -> Result<String, JsError> {
    json(expand_document(app_toml, limit))
}

#[wasm_bindgen]
pub fn plan(app_toml: &str, services_toml: &str, policy: &str, job_length_s: f64) -> Result<String, JsError> {
    json(plan_documents(app_toml, services_toml, policy, job_length_s))
}

#[wasm_bindgen]
impl Machine {
    #[wasm_bindgen(constructor)]
    pub fn new(max_attempts: u32) -> Machine {
        Machine::create(max_attempts)
    }

    #[wasm_bindgen(js_name = fire)]
    pub fn fire_js(&mut self, name: &str) -> Result<String, JsError> {
        self.fire(name).map_err(|e| JsError::new(&e))?;
        Ok(self.view_json())
    }

    #[wasm_bindgen(js_name = view)]
    pub fn view_json(&self) -> String {
        serde_json::to_string(&self.view()).expect("views serialize")
    }
}
