mod common;

use broker_core::exec::sim::{FaultKind, ScriptedFault, SimConfig};
use broker_core::model::{JobState, Optimization};
use broker_core::runtime::{Runtime, DEFAULT_LISTENER_CAPACITY};
use broker_core::sched::PolicyKind;
use common::*;

#[test]
fn missing_output_and_poll_retry_threshold() {
    checks::fault_tolerance().unwrap();
}

fn scripted(job: &str, kind: FaultKind, code: Option<i32>) -> ScriptedFault {
    ScriptedFault { job: job.into(), attempt: Some(0), kind, count: None, code }
}

#[test]
fn nonzero_exit_fails_verification() {
    let bed = SimBed::new(SimConfig { faults: vec![scripted("j000001", FaultKind::RunFail, Some(2))], ..Default::default() });
    let rt = Runtime::start(sweep(1, &sleep_touch(5.0), &["out.$jobid.dat"]), services(&compute("s1", "sim", 1, 0.0)), vec![], bed.config(), bed.env()).unwrap();
    let sub = rt.register_listener(64);
    let report = rt.run().unwrap();
    assert!(sub.drain().iter().any(|e| e.new_state == JobState::Failed && e.detail.as_deref() == Some("nonzero exit 2")));
    assert_eq!((report.rows[0].state, report.rows[0].attempts), (JobState::Done, 1));
}

#[test]
fn dispatch_failures_reschedule_and_cool_down() {
    let bed = SimBed::new(SimConfig {
        faults: vec![scripted("j000001", FaultKind::SubmitFail, None), scripted("j000002", FaultKind::StageInFail, None)],
        ..Default::default()
    });
    let svc = services(&(compute("s1", "sim", 2, 0.0) + &compute("s2", "sim", 2, 0.0)));
    let rt = Runtime::start(sweep(2, &sleep_touch(5.0), &["out.$jobid.dat"]), svc, vec![], bed.config(), bed.env()).unwrap();
    let report = rt.run().unwrap();
    assert_eq!(report.done, 2);
    for r in &report.rows {
        assert_eq!(r.attempts, 1, "{r:?}");
    }
    assert!(rt.store().services().iter().filter_map(|s| s.as_compute()).any(|c| c.cooldown_until.is_some()));
}

#[test]
fn stage_out_failure_and_lost_jobs_are_retried() {
    let bed = SimBed::new(SimConfig {
        faults: vec![scripted("j000001", FaultKind::StageOutFail, None), scripted("j000002", FaultKind::Lost, None)],
        ..Default::default()
    });
    let rt = Runtime::start(sweep(2, &sleep_touch(20.0), &["out.$jobid.dat"]), services(&compute("s1", "sim", 2, 0.0)), vec![], bed.config(), bed.env()).unwrap();
    let report = rt.run().unwrap();
    assert_eq!(report.done, 2);
    assert!(report.rows.iter().all(|r| r.attempts == 1));
}

#[test]
fn cleanup_failure_is_only_a_warning() {
    let bed = SimBed::new(SimConfig { faults: vec![scripted("j000001", FaultKind::CleanupFail, None)], ..Default::default() });
    let rt = Runtime::start(sweep(1, &sleep_touch(5.0), &["out.$jobid.dat"]), services(&compute("s1", "sim", 1, 0.0)), vec![], bed.config(), bed.env()).unwrap();
    let report = rt.run().unwrap();
    assert_eq!((report.rows[0].state, report.rows[0].attempts), (JobState::Done, 0));
}

#[test]
fn unreachable_server_receives_no_work() {
    let bed = SimBed::new(SimConfig::default());
    bed.world.set_probe_failure("s1", true);
    let svc = services(&(compute("s1", "sim", 4, 0.0) + &compute("s2", "sim", 4, 0.0)));
    let rt = Runtime::start(sweep(6, &sleep_touch(5.0), &["out.$jobid.dat"]), svc, vec![], bed.config(), bed.env()).unwrap();
    let report = rt.run().unwrap();
    assert_eq!(report.done, 6);
    assert!(report.rows.iter().all(|r| r.server.as_deref() == Some("s2")));
}

#[test]
fn deadline_expiry_fails_unfinished_jobs() {
    let bed = SimBed::new(SimConfig::default());
    let mut a = sweep(3, &sleep_touch(60.0), &["out.$jobid.dat"]);
    a.qos.deadline_s = Some(30.0);
    let mut cfg = bed.config();
    cfg.policy = Some(PolicyKind::RoundRobin);
    let rt = Runtime::start(a, services(&compute("s1", "sim", 3, 0.0)), vec![], cfg, bed.env()).unwrap();
    let report = rt.run().unwrap();
    assert_eq!(report.done, 0);
    assert_ne!(report.exit_code(), 0);
    assert!(report.rows.iter().all(|r| r.state == JobState::Failed && r.failure_reason.as_deref() == Some("deadline expired")));
}

#[test]
fn infeasible_jobs_are_reported_failed() {
    let bed = SimBed::new(SimConfig::default());
    let mut a = sweep(3, &sleep_touch(60.0), &["out.$jobid.dat"]);
    a.qos.deadline_s = Some(1.0);
    a.qos.optimization = Optimization::Cost;
    a.qos.budget = Some(100.0);
    let rt = Runtime::start(a, services(&compute("s1", "sim", 3, 0.01)), vec![], bed.config(), bed.env()).unwrap();
    let sub = rt.register_listener(DEFAULT_LISTENER_CAPACITY);
    let report = rt.run().unwrap();
    assert_eq!(report.failed, 3);
    assert_eq!(report.exit_code(), 1);
    assert!(report.rows.iter().all(|r| r.failure_reason.as_deref().is_some_and(|f| f.starts_with("infeasible"))));
    assert!(sub.drain().iter().all(|e| e.new_state == JobState::Failed));
    assert!(bed.world.execution_counts().is_empty());
}

#[test]
fn failing_command_stops_after_max_attempts() {
    let bed = SimBed::new(SimConfig::default());
    let mut cfg = bed.config();
    cfg.max_attempts = 3;
    let rt = Runtime::start(sweep(1, "{ execute = { cmd = \"exit\", args = [\"1\"] } }", &[]), services(&compute("s1", "sim", 1, 0.0)), vec![], cfg, bed.env()).unwrap();
    let report = rt.run().unwrap();
    assert_eq!((report.rows[0].state, report.rows[0].attempts), (JobState::Failed, 2));
    assert_eq!(bed.world.executions("j000001"), 3);
    assert_eq!(report.exit_code(), 1);
}
