use std::collections::BTreeSet;
use std::fmt;

use super::subst::references;
use super::task::{Domain, Endpoint, TaskCommand, VarType};
use super::{ApplicationContext, Optimization, Service};

/// A problem found in an application or service description.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub entity: String,
    pub message: String,
}

impl Diagnostic {
    fn new(entity: impl Into<String>, message: impl Into<String>) -> Self {
        Diagnostic { entity: entity.into(), message: message.into() }
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.entity, self.message)
    }
}

/// Checks entity invariants and cross references. An empty result means valid.
pub fn validate_application(ctx: &ApplicationContext, services: &[Service]) -> Vec<Diagnostic> {
    check(ctx, Some(services))
}

/// Checks only what the application context can verify on its own.
pub fn validate_context(ctx: &ApplicationContext) -> Vec<Diagnostic> {
    check(ctx, None)
}

fn check(ctx: &ApplicationContext, services: Option<&[Service]>) -> Vec<Diagnostic> {
    let with_services = services.is_some();
    let services = services.unwrap_or(&[]);
    let mut out = Vec::new();
    let app = format!("application {}", ctx.app_id);
    if ctx.app_id.is_empty() {
        out.push(Diagnostic::new("application", "app_id is empty"));
    }

    let qos = &ctx.qos;
    if let Some(d) = qos.deadline_s {
        if d.is_nan() || d <= 0.0 {
            out.push(Diagnostic::new(&app, format!("deadline_s must be positive, got {d}")));
        }
    }
    if let Some(b) = qos.budget {
        if b.is_nan() || b < 0.0 {
            out.push(Diagnostic::new(&app, format!("budget must be non-negative, got {b}")));
        }
    }
    match qos.optimization {
        Optimization::Cost if qos.budget.is_none() => {
            out.push(Diagnostic::new(&app, "cost optimization requires a budget"))
        }
        Optimization::Time if qos.deadline_s.is_none() => {
            out.push(Diagnostic::new(&app, "time optimization requires a deadline"))
        }
        _ => {}
    }

    let mut ids = BTreeSet::new();
    for s in services {
        if !ids.insert(s.id()) {
            out.push(Diagnostic::new(s.id(), "duplicate service id"));
        }
    }
    let datahosts: BTreeSet<&str> = services.iter().filter_map(Service::as_data).map(|d| d.service_id.as_str()).collect();
    let computes: Vec<_> = services.iter().filter_map(Service::as_compute).collect();
    if with_services && computes.is_empty() {
        out.push(Diagnostic::new(&app, "no compute service declared"));
    }
    let queue_names: BTreeSet<&str> = computes.iter().flat_map(|c| c.queues.iter().map(|q| q.name.as_str())).collect();
    let creds: BTreeSet<&str> = ctx.credential_ids.iter().map(String::as_str).collect();

    for s in services {
        if let Some(c) = s.credential_id() {
            if !creds.contains(c) {
                out.push(Diagnostic::new(s.id(), format!("credential {c:?} is not supplied")));
            }
        }
        match s {
            Service::Compute(c) => {
                if c.slots == 0 {
                    out.push(Diagnostic::new(s.id(), "slots must be positive"));
                }
                let qsum: u32 = c.queues.iter().map(|q| q.slots).sum();
                if !c.queues.is_empty() && qsum > c.slots {
                    out.push(Diagnostic::new(s.id(), format!("queue slots {qsum} exceed server slots {}", c.slots)));
                }
                if c.price_per_cpu_s < 0.0 {
                    out.push(Diagnostic::new(s.id(), "negative price"));
                }
            }
            Service::Link(l) if l.bandwidth_mbps.is_nan() || l.bandwidth_mbps <= 0.0 => {
                out.push(Diagnostic::new(s.id(), "bandwidth_mbps must be positive"));
            }
            _ => {}
        }
    }

    let mut task_ids = BTreeSet::new();
    for task in &ctx.tasks {
        let ent = format!("task {}", task.task_id);
        if !task_ids.insert(task.task_id.as_str()) {
            out.push(Diagnostic::new(&ent, "duplicate task id"));
        }
        if task.commands.is_empty() {
            out.push(Diagnostic::new(&ent, "task has no commands"));
        }
        if !task.commands.iter().any(|c| matches!(c, TaskCommand::Execute { .. })) {
            out.push(Diagnostic::new(&ent, "task has no execute command"));
        }
        let mut declared = BTreeSet::new();
        for v in &task.variables {
            if !declared.insert(v.name.as_str()) {
                out.push(Diagnostic::new(&ent, format!("variable {} declared twice", v.name)));
            }
            let ok = match (&v.vtype, &v.domain) {
                (VarType::Integer, Domain::IntRange { from, to, step }) => {
                    *step != 0 && (to - from).signum() * step.signum() >= 0
                }
                (VarType::Float, Domain::FloatRange { from, to, step }) => {
                    *step != 0.0 && step.is_finite() && (to - from) / step >= -1e-9
                }
                (VarType::String, Domain::Values(vs)) => !vs.is_empty(),
                (VarType::Gridfile, Domain::Pattern(p)) => !p.is_empty(),
                _ => {
                    out.push(Diagnostic::new(&ent, format!("variable {} has a domain that does not fit its type", v.name)));
                    continue;
                }
            };
            if !ok {
                out.push(Diagnostic::new(&ent, format!("variable {} has an empty domain", v.name)));
            }
        }
        let texts = task
            .commands
            .iter()
            .flat_map(|c| c.texts())
            .chain(task.expected_outputs.iter().map(String::as_str));
        for text in texts {
            match references(text) {
                Ok(names) => {
                    for n in names {
                        if !declared.contains(n.as_str()) {
                            out.push(Diagnostic::new(&ent, format!("undeclared variable ${n} in {text:?}")));
                        }
                    }
                }
                Err(e) => out.push(Diagnostic::new(&ent, e.to_string())),
            }
        }
        for cmd in &task.commands {
            if let TaskCommand::Copy { source, dest } = cmd {
                if source == dest {
                    out.push(Diagnostic::new(&ent, format!("copy source equals dest ({source})")));
                }
                if !source.is_remote() && !dest.is_remote() {
                    out.push(Diagnostic::new(&ent, format!("copy {source} -> {dest} does not involve the job")));
                }
                for e in [source, dest] {
                    if let Endpoint::DataHost { id, .. } = e {
                        if with_services && !datahosts.contains(id.as_str()) {
                            out.push(Diagnostic::new(&ent, format!("unknown datahost {id:?}")));
                        }
                    }
                }
            }
        }
        if let Some(q) = &task.requirements.queue {
            if with_services && !queue_names.contains(q.as_str()) {
                out.push(Diagnostic::new(&ent, format!("unknown queue {q:?}")));
            }
        }
    }
    if ctx.tasks.is_empty() {
        out.push(Diagnostic::new(&app, "application has no tasks"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::super::*;
    use super::*;

    fn ctx(cmds: Vec<TaskCommand>) -> ApplicationContext {
        ApplicationContext {
            app_id: "a1".into(),
            name: "demo".into(),
            qos: QoS::default(),
            credential_ids: vec![],
            tasks: vec![Task {
                task_id: "t1".into(),
                commands: cmds,
                variables: vec![],
                expected_outputs: vec![],
                requirements: Requirements::default(),
            }],
        }
    }

    fn exec(cmd: &str) -> TaskCommand {
        TaskCommand::Execute { cmd: cmd.into(), args: vec![] }
    }

    fn compute() -> Service {
        Service::Compute(ComputeServer::new("s1", AdapterKind::Sim, 1, 0.0))
    }

    #[test]
    fn well_formed_is_clean() {
        assert!(validate_application(&ctx(vec![exec("/bin/true")]), &[compute()]).is_empty());
    }

    #[test]
    fn undeclared_variable() {
        let d = validate_application(&ctx(vec![exec("run $z")]), &[compute()]);
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].entity, "task t1");
        assert!(d[0].message.contains("$z"));
    }

    #[test]
    fn no_compute_service() {
        let d = validate_application(&ctx(vec![exec("/bin/true")]), &[]);
        assert_eq!(d.len(), 1);
        assert!(d[0].message.contains("no compute service"));
    }

    #[test]
    fn qos_binding_constraints() {
        let mut c = ctx(vec![exec("x")]);
        c.qos.optimization = Optimization::Cost;
        assert!(validate_application(&c, &[compute()])[0].message.contains("budget"));
        c.qos = QoS { deadline_s: Some(0.0), budget: Some(-1.0), optimization: Optimization::None };
        assert_eq!(validate_application(&c, &[compute()]).len(), 2);
    }

    #[test]
    fn missing_execute_and_bad_copy() {
        let c = ctx(vec![TaskCommand::Copy {
            source: "datahost:nope:/x".parse().unwrap(),
            dest: "local:y".parse().unwrap(),
        }]);
        let d = validate_application(&c, &[compute()]);
        let msgs: Vec<_> = d.iter().map(|d| d.message.as_str()).collect();
        assert!(msgs.iter().any(|m| m.contains("no execute")));
        assert!(msgs.iter().any(|m| m.contains("unknown datahost")));
        assert!(msgs.iter().any(|m| m.contains("does not involve")));
    }

    #[test]
    fn unsupplied_credential() {
        let mut s = ComputeServer::new("s1", AdapterKind::Ssh, 1, 0.0);
        s.credential_id = Some("c9".into());
        let d = validate_application(&ctx(vec![exec("x")]), &[Service::Compute(s)]);
        assert!(d[0].message.contains("c9"));
    }
}
