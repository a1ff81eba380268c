//! Synthetic job profiles for measuring broker overheads.

use std::fmt::{self, Write as _};
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{RunConfig, RunEnv, RunError, RunReport, Runtime};
use crate::exec::sim::{Dist, SimConfig};
use crate::interp::{parse_application, parse_services, DescriptionDocument, DocumentKind};
use crate::model::{AdapterKind, StagingMode};
use crate::sched::PolicyKind;

/// Size of the data profile's input file.
pub const DATA_INPUT_BYTES: u64 = 100_000_000;
/// Modeled bandwidth between the broker and the data host, MB/s.
pub const DATA_LINK_MBPS: f64 = 10.0;
/// Modeled submission latency of the simulated middleware.
pub const SIM_SUBMIT_LATENCY_S: f64 = 2.0;
/// Modeled stage-out and cleanup time of the simulated middleware.
pub const SIM_STAGE_OUT_S: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BenchProfile {
    Simple,
    Data,
    Compute,
}

impl BenchProfile {
    pub const ALL: [BenchProfile; 3] = [BenchProfile::Simple, BenchProfile::Data, BenchProfile::Compute];

    pub fn job_length_s(self) -> f64 {
        match self {
            BenchProfile::Simple => 30.0,
            BenchProfile::Data => 300.0,
            BenchProfile::Compute => 600.0,
        }
    }

    /// Input volume per job.
    pub fn io_bytes(self) -> u64 {
        match self {
            BenchProfile::Data => DATA_INPUT_BYTES,
            BenchProfile::Simple | BenchProfile::Compute => 0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BenchProfile::Simple => "simple",
            BenchProfile::Data => "data",
            BenchProfile::Compute => "compute",
        }
    }
}

impl fmt::Display for BenchProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BenchProfile {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        BenchProfile::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| format!("unknown profile {s}; expected simple, data or compute"))
    }
}

#[derive(Debug, Clone)]
pub struct BenchOptions {
    pub profile: BenchProfile,
    pub jobs: usize,
    /// `Sim` or `Local`.
    pub adapter: AdapterKind,
    pub seed: u64,
    /// Wall time instead of the simulator's virtual clock.
    pub real_clock: bool,
    /// Multiplies job lengths and the poll interval; shortens local runs.
    pub time_scale: f64,
    pub poll_interval_s: f64,
    /// Holds the store, outputs and data files.
    pub dir: PathBuf,
}

impl BenchOptions {
    pub fn new(profile: BenchProfile, jobs: usize, dir: impl Into<PathBuf>) -> Self {
        BenchOptions {
            profile,
            jobs,
            adapter: AdapterKind::Sim,
            seed: 1,
            real_clock: false,
            time_scale: 1.0,
            poll_interval_s: 12.0,
            dir: dir.into(),
        }
    }
}

/// Result of one profile run.
#[derive(Debug, Clone)]
pub struct BenchResult {
    pub profile: BenchProfile,
    pub report: RunReport,
}

impl BenchResult {
    /// Mean of one metric, seconds.
    pub fn mean(&self, metric: &str) -> f64 {
        self.report.metric(metric).map_or(0.0, |m| m.mean)
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "profile {} ({} jobs, {} done)", self.profile, self.report.total, self.report.done);
        let _ = writeln!(out, "{:<12} {:>10} {:>10} {:>10} {:>10}", "metric", "mean_s", "min_s", "p50_s", "max_s");
        for m in &self.report.metrics {
            let _ = writeln!(out, "{:<12} {:>10.3} {:>10.3} {:>10.3} {:>10.3}", m.name, m.mean, m.min, m.p50, m.max);
        }
        let polls: f64 =
            self.report.rows.iter().map(|r| f64::from(r.polls)).sum::<f64>() / self.report.rows.len().max(1) as f64;
        let _ = writeln!(out, "{:<12} {:>10.2}", "polls/job", polls);
        out
    }
}

fn application(p: BenchProfile, scale: f64) -> String {
    let length = p.job_length_s() * scale;
    let copy = if p.io_bytes() > 0 {
        "  { copy = { source = \"datahost:d1:input.dat\", dest = \"remote:input.dat\" } },\n"
    } else {
        ""
    };
    format!(
        "name = \"bench-{p}\"\n\
         variables = [{{ name = \"i\", type = \"integer\", range = {{ from = 1, to = JOBS }} }}]\n\
         expected_outputs = [\"out.$jobid.dat\"]\n\
         task = [\n{copy}  {{ execute = {{ cmd = \"sleep\", args = [\"{length}\"] }} }},\n  {{ execute = {{ cmd = \"touch\", args = [\"out.$jobid.dat\"] }} }},\n]\n"
    )
}

fn services(opts: &BenchOptions, data_dir: &str) -> String {
    let adapter = match opts.adapter {
        AdapterKind::Local => "local",
        _ => "sim",
    };
    let mut s = format!(
        "[[services]]\ntype = \"compute\"\nid = \"s1\"\nadapter = \"{adapter}\"\nslots = {}\nprice_per_cpu_s = 0\n",
        opts.jobs.max(1)
    );
    if opts.profile.io_bytes() > 0 {
        let protocol = if opts.adapter == AdapterKind::Sim { "sim" } else { "localfs" };
        let _ = write!(
            s,
            "\n[[services]]\ntype = \"datahost\"\nid = \"d1\"\nprotocol = \"{protocol}\"\nuri = {uri}\nfiles = [{{ logical_name = \"input\", path = \"input.dat\", size_bytes = {size} }}]\n\n[[services]]\ntype = \"network\"\nfrom = \"broker\"\nto = \"d1\"\nbandwidth_mbps = {DATA_LINK_MBPS}\n",
            uri = toml::Value::String(data_dir.to_string()),
            size = opts.profile.io_bytes(),
        );
    }
    s
}

/// Runs `jobs` synthetic jobs of one profile and reports the per-job
/// overhead metrics.
pub fn bench(opts: &BenchOptions) -> Result<BenchResult, RunError> {
    if opts.jobs == 0 || opts.time_scale.is_nan() || opts.time_scale <= 0.0 {
        return Err(RunError::Config("bench needs at least one job and a positive time scale".into()));
    }
    let data_dir = opts.dir.join("data");
    if opts.adapter == AdapterKind::Local && opts.profile.io_bytes() > 0 {
        std::fs::create_dir_all(&data_dir)?;
        let f = std::fs::File::create(data_dir.join("input.dat"))?;
        f.set_len(opts.profile.io_bytes())?;
    }
    let app_text = application(opts.profile, opts.time_scale).replace("JOBS", &opts.jobs.to_string());
    let app = parse_application(&DescriptionDocument::parse(&app_text, DocumentKind::Application, "bench-app.toml")?)?;
    let svc_text = services(opts, &data_dir.to_string_lossy());
    let services = parse_services(&DescriptionDocument::parse(&svc_text, DocumentKind::Services, "bench-services.toml")?)?;

    let cfg = RunConfig {
        policy: Some(PolicyKind::RoundRobin),
        active_set: opts.jobs.max(1),
        poll_interval_s: opts.poll_interval_s * opts.time_scale,
        staging: Some(StagingMode::Push),
        out_dir: opts.dir.join("out"),
        store_dir: opts.dir.join("store"),
        base_dir: opts.dir.clone(),
        clock: if opts.real_clock { super::ClockMode::Real } else { super::ClockMode::Auto },
        fsync: false,
        stall_timeout_s: 1e6,
        sim: Some(SimConfig {
            seed: opts.seed,
            clock: if opts.real_clock { crate::exec::sim::SimClock::Real } else { crate::exec::sim::SimClock::Virtual },
            submit_latency_s: Dist::Constant(SIM_SUBMIT_LATENCY_S),
            run_time_s: Dist::Constant(0.0),
            stage_out_s: Dist::Constant(SIM_STAGE_OUT_S),
            ..SimConfig::default()
        }),
        ..RunConfig::default()
    };
    let rt = Runtime::start(app, services, Vec::new(), cfg, RunEnv::default())?;
    let report = rt.run()?;
    Ok(BenchResult { profile: opts.profile, report })
}
