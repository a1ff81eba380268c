//! One check per acceptance criterion. Each returns a short summary on
//! success and the first violation otherwise. Expected values come from the
//! brute-force references in `oracle` or from arithmetic on the models.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use broker_core::exec::sim::{Dist, FaultKind, ScriptedFault, SimConfig};
use broker_core::model::*;
use broker_core::runtime::bench::{bench, BenchOptions, BenchProfile, DATA_INPUT_BYTES, DATA_LINK_MBPS};
use broker_core::runtime::{RunError, RunReport, Runtime, DEFAULT_LISTENER_CAPACITY};
use broker_core::sched::*;
use broker_core::store::{RecoveryAction, Store, StoreError};

use super::oracle::{self, OServer};
use super::*;

pub type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        {
            let ok: bool = $cond;
            if !ok {
                return Err(format!($($fmt)+));
            }
        }
    };
}

fn run_err(e: RunError) -> String {
    format!("run error: {e}")
}

// ---- 1: state machine ----

/// The legal edges, written out independently of the implementation.
pub fn edge_oracle(state: JobState, event: &TransitionEvent) -> Option<JobState> {
    use JobState as S;
    const EDGES: [(JobState, &str, JobState); 9] = [
        (S::Ready, "Scheduled", S::Scheduled),
        (S::Scheduled, "StageInStarted", S::StageIn),
        (S::StageIn, "HandleObtained", S::Submitted),
        (S::Submitted, "Queued", S::Pending),
        (S::Submitted, "Started", S::Active),
        (S::Pending, "Started", S::Active),
        (S::Active, "ExecutionComplete", S::StageOut),
        (S::StageOut, "OutputsVerified", S::Done),
        (S::Failed, "Reset", S::Ready),
    ];
    let name = match event {
        TransitionEvent::Scheduled => "Scheduled",
        TransitionEvent::StageInStarted => "StageInStarted",
        TransitionEvent::HandleObtained => "HandleObtained",
        TransitionEvent::Queued => "Queued",
        TransitionEvent::Started => "Started",
        TransitionEvent::ExecutionComplete => "ExecutionComplete",
        TransitionEvent::OutputsVerified => "OutputsVerified",
        TransitionEvent::Failure(_) => {
            return (state != S::Done && state != S::Failed).then_some(S::Failed);
        }
        TransitionEvent::Reset => "Reset",
    };
    EDGES.iter().find(|(s, e, _)| *s == state && *e == name).map(|(_, _, t)| *t)
}

pub fn state_machine(sequences: usize) -> Check {
    let mut pairs = 0;
    let mut legal = 0;
    for s in JobState::ALL {
        for e in TransitionEvent::kinds() {
            pairs += 1;
            let mut job = Job::new("j1", "t1", Default::default());
            job.state = s;
            let want = edge_oracle(s, &e);
            match (job.transition(e.clone(), 5), want) {
                (Ok(next), Some(w)) => {
                    ensure!(next.state == w, "{s} --{e:?}--> {} but expected {w}", next.state);
                    legal += 1;
                }
                (Err(_), None) => {}
                (got, want) => return Err(format!("{s} --{e:?}: got {:?}, expected {want:?}", got.map(|j| j.state))),
            }
        }
    }
    ensure!(pairs == 81, "enumerated {pairs} pairs");

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let events = TransitionEvent::kinds();
    let mut steps = 0;
    for _ in 0..sequences {
        let mut job = Job::new("j1", "t1", Default::default());
        for t in 0..rng.random_range(1..60u64) {
            let e = events[rng.random_range(0..events.len())].clone();
            let before = (job.state, job.attempts);
            match job.transition(e.clone(), t) {
                Ok(next) => {
                    ensure!(edge_oracle(before.0, &e) == Some(next.state), "illegal edge {} -> {}", before.0, next.state);
                    let expected_attempts = if matches!(e, TransitionEvent::Reset) { before.1 + 1 } else { before.1 };
                    ensure!(next.attempts == expected_attempts, "attempts {} -> {} on {e:?}", before.1, next.attempts);
                    ensure!(next.timestamp(next.state) == Some(t), "no timestamp for {}", next.state);
                    job = next;
                }
                Err(_) => ensure!(edge_oracle(before.0, &e).is_none(), "rejected legal edge {} on {e:?}", before.0),
            }
            steps += 1;
        }
    }
    Ok(format!("81/81 pairs match ({legal} legal edges); {sequences} random sequences, {steps} steps"))
}

// ---- 2: expansion ----

pub fn expansion() -> Check {
    let range = app("name = \"r\"\nvariables = [{ name = \"x\", type = \"integer\", range = { from = 1, to = 100 } }]\ntask = [{ execute = { cmd = \"run $x\" } }]\n");
    let jobs = expand_task(&range.tasks[0], None).map_err(|e| e.to_string())?;
    ensure!(jobs.len() == 100, "range gave {} jobs", jobs.len());
    let xs: Vec<String> = jobs.iter().map(|j| j.bindings["x"].render()).collect();
    ensure!(xs == (1..=100).map(|i| i.to_string()).collect::<Vec<_>>(), "range values out of order");

    let cross = app("name = \"c\"\nvariables = [\n  { name = \"a\", type = \"string\", values = [\"p\", \"q\"] },\n  { name = \"b\", type = \"integer\", range = { from = 1, to = 3 } },\n]\ntask = [{ execute = { cmd = \"run $a $b\" } }]\n");
    let jobs = expand_task(&cross.tasks[0], None).map_err(|e| e.to_string())?;
    let got: Vec<String> = jobs.iter().map(|j| format!("{}{}", j.bindings["a"].render(), j.bindings["b"].render())).collect();
    ensure!(got == ["p1", "p2", "p3", "q1", "q2", "q3"], "cross product order {got:?}");
    let ids: Vec<&str> = jobs.iter().map(|j| j.job_id.as_str()).collect();
    ensure!(ids.windows(2).all(|w| w[0] < w[1]), "job ids not ascending");

    let none = app("name = \"n\"\ntask = [{ execute = { cmd = \"true\" } }]\n");
    let jobs = expand_task(&none.tasks[0], None).map_err(|e| e.to_string())?;
    ensure!(jobs.len() == 1 && jobs[0].bindings.is_empty(), "zero-variable task gave {} jobs", jobs.len());
    Ok("range 100, cross product 6 in order, no variables 1".into())
}

// ---- 3: scheduling ----

const LEN_S: f64 = 60.0;

fn sched_app(qos: QoS) -> ApplicationContext {
    let mut a = app("name = \"s\"\ntask = [{ execute = { cmd = \"true\" } }]\n");
    a.qos = qos;
    a
}

fn compute_services(servers: &[OServer]) -> Vec<Service> {
    servers
        .iter()
        .enumerate()
        .map(|(i, s)| Service::Compute(ComputeServer::new(format!("s{}", i + 1), AdapterKind::Sim, s.slots, s.price)))
        .collect()
}

fn plan(policy: PolicyKind, qos: QoS, n: usize, servers: &[OServer]) -> Plan {
    let jobs: Vec<Job> = (1..=n as u64).map(|i| Job::new(job_id_for(i), "t1", Default::default())).collect();
    let ctx = sched_app(qos);
    let task_id = ctx.tasks[0].task_id.clone();
    let jobs: Vec<Job> = jobs.into_iter().map(|mut j| { j.task_id = task_id.clone(); j }).collect();
    Scheduler::new(policy, SchedConfig { bootstrap_s: LEN_S }).plan(
        &jobs,
        &ctx,
        &GridView::new(&compute_services(servers)),
        &TickContext::default(),
    )
}

pub fn scheduling(instances: usize) -> Check {
    let start = Instant::now();
    // Worked instance: prices of 2 and 1 per CPU-minute.
    let worked = [OServer { slots: 1, price: 2.0 / 60.0 }, OServer { slots: 1, price: 1.0 / 60.0 }];
    let cost_qos = QoS { deadline_s: Some(600.0), budget: None, optimization: Optimization::Cost };
    let p = plan(PolicyKind::CostDbc, cost_qos, 10, &worked);
    ensure!(oracle::min_cost(10, &worked, LEN_S, 600.0).is_some_and(|c| (c - 10.0).abs() < 1e-9), "oracle disagrees on worked cost");
    ensure!((p.cost() - 10.0).abs() < 1e-9 && p.count_on("s2") == 10, "worked cost_dbc: cost {} with {} on s2", p.cost(), p.count_on("s2"));
    let time_qos = QoS { deadline_s: None, budget: Some(20.0), optimization: Optimization::Time };
    let p = plan(PolicyKind::TimeDbc, time_qos, 10, &worked);
    ensure!(
        p.count_on("s1") == 5 && p.count_on("s2") == 5 && (p.makespan_s() - 300.0).abs() < 1e-9 && (p.cost() - 15.0).abs() < 1e-9,
        "worked time_dbc: {}/{} split, makespan {}, cost {}",
        p.count_on("s1"),
        p.count_on("s2"),
        p.makespan_s(),
        p.cost()
    );

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut feasible, mut infeasible) = (0, 0);
    for _ in 0..instances {
        let n = rng.random_range(1..=8);
        let m = rng.random_range(1..=3);
        let servers: Vec<OServer> =
            (0..m).map(|_| OServer { slots: rng.random_range(1..=2), price: rng.random_range(1..=4) as f64 / 60.0 }).collect();

        let deadline = rng.random_range(1..=8) as f64 * LEN_S;
        let p = plan(PolicyKind::CostDbc, QoS { deadline_s: Some(deadline), budget: None, optimization: Optimization::Cost }, n, &servers);
        match oracle::min_cost(n, &servers, LEN_S, deadline) {
            Some(best) => {
                ensure!(p.infeasible.is_empty(), "cost_dbc {n}x{servers:?} D={deadline}: infeasible {:?}", p.infeasible);
                ensure!((p.cost() - best).abs() < 1e-9, "cost_dbc {n}x{servers:?} D={deadline}: {} vs {best}", p.cost());
                feasible += 1;
            }
            None => {
                ensure!(!p.infeasible.is_empty(), "cost_dbc placed an infeasible instance");
                infeasible += 1;
            }
        }

        let budget = rng.random_range(1..=30) as f64;
        let p = plan(PolicyKind::TimeDbc, QoS { deadline_s: None, budget: Some(budget), optimization: Optimization::Time }, n, &servers);
        match oracle::min_makespan(n, &servers, LEN_S, budget) {
            Some(best) => {
                ensure!(p.infeasible.is_empty(), "time_dbc {n}x{servers:?} B={budget}: infeasible {:?}", p.infeasible);
                ensure!((p.makespan_s() - best).abs() < 1e-9, "time_dbc {n}x{servers:?} B={budget}: {} vs {best}", p.makespan_s());
                ensure!(p.cost() <= budget + 1e-9, "time_dbc over budget");
                feasible += 1;
            }
            None => {
                ensure!(!p.infeasible.is_empty(), "time_dbc placed an infeasible instance");
                infeasible += 1;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 10.0, "took {secs:.1} s");
    Ok(format!("worked instance ok; {feasible} feasible and {infeasible} infeasible random plans match brute force in {secs:.2} s"))
}

// ---- 4: replica selection ----

struct Candidate {
    host: String,
    size: u64,
    mbps: f64,
    link_cost: f64,
    price: f64,
}

fn replica_view(cands: &[Candidate], scale: f64) -> GridView {
    let mut services = Vec::new();
    for c in cands {
        services.push(Service::Data(DataHost {
            service_id: c.host.clone(),
            uri: String::new(),
            available: true,
            last_probe: None,
            protocol: DataProtocol::Sim,
            files: vec![DataFile { logical_name: "f".into(), path: format!("{}/f.dat", c.host), size_bytes: c.size }],
            price_per_mb: c.price,
            credential_id: None,
        }));
        services.push(Service::Link(NetworkLink::new("broker", c.host.clone(), c.mbps * scale, c.link_cost)));
    }
    GridView::new(&services)
}

pub fn replica_selection(trials: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut checked = 0;
    for trial in 0..trials {
        let k = rng.random_range(1..=5);
        // Small integer grids make exact ties common.
        let cands: Vec<Candidate> = (0..k)
            .map(|i| Candidate {
                host: format!("d{i}"),
                size: rng.random_range(1..=4) * 25_000_000,
                mbps: [1.0, 2.0, 5.0, 10.0][rng.random_range(0..4)],
                link_cost: rng.random_range(0..=2) as f64 * 0.001,
                price: rng.random_range(0..=3) as f64 * 0.01,
            })
            .collect();
        for economy in [false, true] {
            let key = |c: &Candidate| {
                let mb = c.size as f64 / 1e6;
                let t = mb / c.mbps;
                if economy { (mb * (c.price + c.link_cost), t) } else { (t, 0.0) }
            };
            let want = &cands[oracle::argmin_by(&cands, key).unwrap()].host;
            for scale in [1.0, 0.37, 8.0] {
                let view = replica_view(&cands, scale);
                let got = select_data_hosts(["f"], &view, "broker", economy).map_err(|e| e.to_string())?;
                ensure!(
                    &got["f"].datahost == want,
                    "trial {trial} economy={economy} scale={scale}: picked {} expected {want}",
                    got["f"].datahost
                );
                checked += 1;
            }
        }
    }
    Ok(format!("{checked} selections equal the enumerated argmin, stable under bandwidth scaling"))
}

// ---- 5: crash recovery ----

pub fn crash_recovery(seed: u64, jobs: usize, kills: usize) -> Check {
    let start = Instant::now();
    let sim = SimConfig {
        seed,
        submit_latency_s: Dist::Uniform(0.5, 3.0),
        queue_wait_s: Dist::Uniform(0.0, 20.0),
        run_time_s: Dist::Uniform(5.0, 90.0),
        ..SimConfig::default()
    };
    let app = sweep(jobs, "{ execute = { cmd = \"simulate\", args = [\"$i\"] } }", &["out.$jobid.dat"]);
    let svcs = services(&(compute("s1", "sim", 40, 0.01) + &compute("s2", "sim", 25, 0.02)));

    // Reference run without crashes sizes the kill schedule.
    let total_writes = {
        let bed = SimBed::new(sim.clone());
        let mut cfg = bed.config();
        cfg.max_attempts = kills as u32 + 2;
        let rt = Runtime::start(app.clone(), svcs.clone(), vec![], cfg, bed.env()).map_err(run_err)?;
        let before = rt.store().writes();
        let r = rt.run().map_err(run_err)?;
        ensure!(r.done == jobs, "reference run: {} of {jobs} done", r.done);
        rt.store().writes() - before
    };

    let bed = SimBed::new(sim);
    let mut cfg = bed.config();
    cfg.max_attempts = kills as u32 + 2;
    let store_dir = cfg.store_dir.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut rt = Runtime::start(app, svcs, vec![], cfg, bed.env()).map_err(run_err)?;
    let instance = rt.instance_id().to_string();
    let (mut crashes, mut pre_handle, mut adopted) = (0, 0, 0);
    let report = loop {
        if crashes < kills {
            rt.store().crash_after(rng.random_range(1..=(2 * total_writes / (kills as u64 + 2)).max(2)));
        }
        match rt.run() {
            Ok(r) => break r,
            Err(RunError::Store(StoreError::Crashed)) => {}
            Err(e) => return Err(run_err(e)),
        }
        crashes += 1;
        drop(rt);
        // Attempts of jobs that never got a handle, as persisted at the crash.
        let before: BTreeMap<String, u32> = {
            let ro = Store::open_read_only(&store_dir, &instance).map_err(|e| e.to_string())?;
            ro.job_index()
                .into_iter()
                .filter(|(_, e)| matches!(e.state, JobState::Scheduled | JobState::StageIn))
                .map(|(id, e)| (id, e.attempts))
                .collect()
        };
        let (next, rec) = Runtime::resume(&store_dir, &instance, vec![], bed.env()).map_err(run_err)?;
        for a in &rec.actions {
            match a {
                RecoveryAction::Reset { job_id, from, attempts } if matches!(from, JobState::Scheduled | JobState::StageIn) => {
                    ensure!(before.get(job_id).is_some_and(|b| b + 1 == *attempts), "{job_id} reset from {from} without an attempt increment");
                    pre_handle += 1;
                }
                RecoveryAction::Adopted { job_id } => {
                    ensure!(before.contains_key(job_id), "{job_id} adopted from an unexpected state");
                    adopted += 1;
                }
                _ => {}
            }
        }
        rt = next;
    };
    ensure!(crashes == kills, "only {crashes} of {kills} crashes happened before the run finished");
    ensure!(report.done == jobs, "{} of {jobs} done after recovery", report.done);
    let counts = bed.world.execution_counts();
    ensure!(counts.len() == jobs, "{} jobs executed", counts.len());
    if let Some((id, n)) = counts.iter().find(|(_, n)| **n != 1) {
        return Err(format!("{id} executed {n} times"));
    }
    ensure!(pre_handle > 0, "no crash landed before a handle was obtained");
    Ok(format!(
        "{jobs} DONE after {crashes} crashes, each job executed once; {pre_handle} pre-handle resets, {adopted} adopted ({:.1} s)",
        start.elapsed().as_secs_f64()
    ))
}

// ---- 6: fault tolerance ----

pub fn fault_tolerance() -> Check {
    let retries = 3;
    let fault = |job: &str, kind: FaultKind, count: u32| ScriptedFault {
        job: job.into(),
        attempt: Some(0),
        kind,
        count: Some(count),
        code: None,
    };
    let bed = SimBed::new(SimConfig {
        faults: vec![
            fault("j000001", FaultKind::MissingOutput, 1),
            fault("j000002", FaultKind::PollFail, retries - 1),
            fault("j000003", FaultKind::PollFail, retries),
        ],
        ..SimConfig::default()
    });
    let mut cfg = bed.config();
    cfg.poll_retries = retries;
    let app = sweep(4, &sleep_touch(30.0), &["out.$jobid.dat"]);
    let rt = Runtime::start(app, services(&compute("s1", "sim", 4, 0.0)), vec![], cfg, bed.env()).map_err(run_err)?;
    let sub = rt.register_listener(DEFAULT_LISTENER_CAPACITY);
    let report = rt.run().map_err(run_err)?;
    let events = sub.drain();
    let p = paths(&events);
    let failed_with = |job: &str, text: &str| {
        events.iter().any(|e| e.job_id == job && e.new_state == JobState::Failed && e.detail.as_deref().is_some_and(|d| d.contains(text)))
    };
    let row = |job: &str| report.row(job).cloned().ok_or_else(|| format!("{job} missing from report"));
    use JobState::*;

    // Missing output despite a clean exit.
    let j1 = &p["j000001"];
    ensure!(failed_with("j000001", "missing output"), "j000001 did not fail for missing output: {j1:?}");
    ensure!(j1.windows(3).any(|w| w == [StageOut, Failed, Ready]), "j000001 not rescheduled: {j1:?}");
    let r1 = row("j000001")?;
    ensure!(r1.state == Done && r1.attempts == 1, "j000001 ended {} after {} resets", r1.state, r1.attempts);

    // Fewer failed polls than the limit change nothing.
    ensure!(p["j000002"] == p["j000004"], "j000002 path {:?} differs from the fault-free {:?}", p["j000002"], p["j000004"]);
    ensure!(!p["j000002"].contains(&Failed) && row("j000002")?.attempts == 0, "j000002 changed state");

    // Reaching the limit reschedules.
    ensure!(failed_with("j000003", "consecutive poll failures"), "j000003 did not fail on polls: {:?}", p["j000003"]);
    ensure!(p["j000003"].windows(2).any(|w| w == [Failed, Ready]), "j000003 not rescheduled");
    let r3 = row("j000003")?;
    ensure!(r3.state == Done && r3.attempts == 1, "j000003 ended {} after {} resets", r3.state, r3.attempts);
    ensure!(report.exit_code() == 0, "run did not complete");
    Ok(format!("missing output rescheduled; {} failed polls ignored; {retries} failed polls rescheduled", retries - 1))
}

// ---- 7: bench ----

pub fn bench_profiles(jobs: usize) -> Check {
    let mut means = BTreeMap::new();
    for p in BenchProfile::ALL {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let r = bench(&BenchOptions::new(p, jobs, dir.path())).map_err(run_err)?;
        ensure!(r.report.done == jobs, "{p}: {} of {jobs} done", r.report.done);
        means.insert(p.name(), (r.mean("submission"), r.mean("querying"), r.mean("termination")));
    }
    let (simple, data, compute) = (means["simple"], means["data"], means["compute"]);
    let stage_in_s = DATA_INPUT_BYTES as f64 / 1e6 / DATA_LINK_MBPS;
    ensure!(
        data.0 - simple.0 >= stage_in_s - 1e-9,
        "data submission {:.3} s not above simple {:.3} s by {stage_in_s} s",
        data.0,
        simple.0
    );
    let interval = 12.0_f64;
    let expected = (600.0_f64 / interval).ceil() / (30.0_f64 / interval).ceil();
    let ratio = compute.1 / simple.1;
    ensure!((ratio - expected).abs() <= 0.1 * expected, "querying ratio {ratio:.3}, expected {expected:.3} within 10%");
    let terms = [simple.2, data.2, compute.2];
    let spread = terms.iter().cloned().fold(f64::MIN, f64::max) - terms.iter().cloned().fold(f64::MAX, f64::min);
    ensure!(spread <= interval, "termination spread {spread:.3} s exceeds one tick");
    Ok(format!(
        "submission simple {:.2} s, data {:.2} s (stage-in {stage_in_s} s); querying ratio {ratio:.3} vs {expected:.3}; termination spread {spread:.3} s",
        simple.0, data.0
    ))
}

// ---- 8: memory bound ----

pub fn memory_bound(jobs: usize, capacity: usize) -> Check {
    let bed = SimBed::new(SimConfig { run_time_s: Dist::Uniform(10.0, 60.0), ..SimConfig::default() });
    let mut cfg = bed.config();
    cfg.active_set = capacity;
    let app = sweep(jobs, "{ execute = { cmd = \"simulate\" } }", &[]);
    let base = gauge::live();
    gauge::reset_peak();
    let rt = Runtime::start(app, services(&(compute("s1", "sim", 30, 0.0) + &compute("s2", "sim", 20, 0.0))), vec![], cfg, bed.env())
        .map_err(run_err)?;
    let report = rt.run().map_err(run_err)?;
    let peak = gauge::peak() - base;
    let batch = rt.max_dispatch_batch();
    ensure!(report.done == jobs, "{} of {jobs} done", report.done);
    ensure!(peak <= capacity + batch, "peak {peak} in-memory jobs exceeds {capacity} + batch {batch}");
    Ok(format!("peak {peak} in-memory jobs for {jobs} jobs; bound {capacity} + batch {batch}"))
}

// ---- 9: secrets ----

pub fn no_secrets() -> Check {
    let secret = format!("pw-{:016x}", ChaCha8Rng::seed_from_u64(9).random::<u64>());
    let creds = credentials(
        "[[credentials]]\nid = \"c1\"\ntype = \"userpass\"\nuser = \"alice\"\npassword_env = \"BROKER_TEST_PW\"\n",
        &[("BROKER_TEST_PW", &secret)],
    );
    let svc = "[[services]]\ntype = \"compute\"\nid = \"s1\"\nadapter = \"sim\"\nslots = 2\ncredential = \"c1\"\n";
    let bed = SimBed::new(SimConfig::default());
    let cfg = bed.config();
    let (store_dir, out_dir) = (cfg.store_dir.clone(), cfg.out_dir.clone());
    let rt = Runtime::start(sweep(4, &sleep_touch(5.0), &["out.$jobid.dat"]), services(svc), creds.clone(), cfg, bed.env())
        .map_err(run_err)?;
    let instance = rt.instance_id().to_string();
    rt.store().crash_after(12);
    ensure!(matches!(rt.run(), Err(RunError::Store(StoreError::Crashed))), "crash was not injected");
    drop(rt);
    let missing = Runtime::resume(&store_dir, &instance, vec![], bed.env());
    ensure!(
        matches!(missing, Err(RunError::Store(StoreError::MissingCredential(..)))),
        "resume without credentials did not fail with MissingCredential"
    );
    let (rt, _) = Runtime::resume(&store_dir, &instance, creds, bed.env()).map_err(run_err)?;
    let report = rt.run().map_err(run_err)?;
    rt.store().compact().map_err(|e| e.to_string())?;
    drop(rt);
    ensure!(report.done == 4, "{} of 4 done", report.done);
    let bytes = all_bytes(&store_dir);
    ensure!(!bytes.is_empty(), "store is empty");
    ensure!(!contains(&bytes, secret.as_bytes()), "secret found in the store");
    ensure!(!contains(&all_bytes(&out_dir), secret.as_bytes()), "secret found in the outputs");
    Ok(format!("{} store bytes and all outputs free of the secret", bytes.len()))
}

// ---- 10: adapter interchangeability ----

/// Lifecycle suite shared by every adapter. Returns the wall time of the
/// five-job run.
pub fn lifecycle(adapter: &str) -> Result<f64, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = |name: &str| {
        let mut c = run_config(&dir.path().join(name));
        c.base_dir = dir.path().to_path_buf();
        c.poll_interval_s = 0.2;
        c
    };
    let svc = services(&compute("s1", adapter, 5, 0.0));

    // Five trivial jobs end to end.
    let t0 = Instant::now();
    let rt = Runtime::start(sweep(5, &sleep_touch(0.2), &["out.$jobid.dat"]), svc.clone(), vec![], config("five"), Default::default())
        .map_err(run_err)?;
    let sub = rt.register_listener(DEFAULT_LISTENER_CAPACITY);
    let report = rt.run().map_err(run_err)?;
    let wall = t0.elapsed().as_secs_f64();
    check_report(&report, 5, 5)?;
    for (job, path) in paths(&sub.drain()) {
        ensure!(path.first() == Some(&JobState::Ready) && path.last() == Some(&JobState::Done), "{job}: {path:?}");
        for w in path.windows(2) {
            ensure!(
                TransitionEvent::kinds().iter().any(|e| next_state(w[0], e) == Some(w[1])),
                "{job}: no edge {} -> {}",
                w[0],
                w[1]
            );
        }
        let out = rt.config().result_dir(&job).join(format!("out.{job}.dat"));
        ensure!(out.is_file(), "{job}: {} missing", out.display());
    }
    ensure!(report.exit_code() == 0, "exit code {}", report.exit_code());
    drop(rt);

    // A broker-local input staged next to the command.
    std::fs::write(dir.path().join("input.txt"), "payload\n").map_err(|e| e.to_string())?;
    let staged = sweep(
        2,
        "{ copy = { source = \"local:input.txt\", dest = \"remote:input.txt\" } }, { execute = { cmd = \"cp\", args = [\"input.txt\", \"out.$jobid.dat\"] } }",
        &["out.$jobid.dat"],
    );
    let rt = Runtime::start(staged, svc.clone(), vec![], config("staged"), Default::default()).map_err(run_err)?;
    check_report(&rt.run().map_err(run_err)?, 2, 2)?;
    drop(rt);

    // A command that always fails uses up its attempts.
    let mut cfg = config("failing");
    cfg.max_attempts = 3;
    let rt = Runtime::start(sweep(1, "{ execute = { cmd = \"false\" } }", &[]), svc, vec![], cfg, Default::default())
        .map_err(run_err)?;
    let report = rt.run().map_err(run_err)?;
    check_report(&report, 1, 0)?;
    let row = &report.rows[0];
    ensure!(row.state == JobState::Failed && row.attempts == 2, "failing job ended {} with attempts {}", row.state, row.attempts);
    ensure!(row.failure_reason.as_deref().is_some_and(|r| r.contains("nonzero exit")), "reason {:?}", row.failure_reason);
    ensure!(report.exit_code() == 1, "exit code {}", report.exit_code());
    Ok(wall)
}

fn check_report(r: &RunReport, total: usize, done: usize) -> Result<(), String> {
    ensure!(r.total == total && r.done == done, "{} of {} done, expected {done} of {total}", r.done, r.total);
    ensure!(r.done + r.failed == r.total, "report does not add up");
    ensure!(r.rows.len() == total, "{} report rows", r.rows.len());
    Ok(())
}

pub fn interchangeability() -> Check {
    let sim = lifecycle("sim")?;
    let local = lifecycle("local")?;
    ensure!(local < 30.0, "five-job local run took {local:.1} s");
    Ok(format!("suite passes on sim and local; five-job local run {local:.2} s (sim {sim:.2} s)"))
}
