use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use broker_core::exec::sim::SimConfig;
use broker_core::interp::{parse_application, parse_credentials, parse_services, DescriptionDocument, DocumentKind};
use broker_core::model::{AdapterKind, Credential, StagingMode};
use broker_core::runtime::bench::{bench, BenchOptions, BenchProfile};
use broker_core::runtime::{status, ClockMode, RunConfig, RunEnv, RunError, RunReport, Runtime};
use broker_core::sched::PolicyKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use tracing_subscriber::EnvFilter;

/// Parameter-sweep resource broker.
#[derive(Parser)]
#[command(name = "broker", version)]
struct Cli {
    /// Log verbosity (-v info, -vv debug). RUST_LOG overrides.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Expand an application and run every job to completion.
    Submit(SubmitArgs),
    /// Resume an interrupted run from its store.
    Recover(RecoverArgs),
    /// Print the state of a run. Works while the run is live.
    Status(StatusArgs),
    /// Run synthetic jobs and report per-job overheads.
    Bench(BenchArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Staging {
    Push,
    Pull,
}

#[derive(Clone, Copy, ValueEnum)]
enum Adapter {
    Sim,
    Local,
    Ssh,
}

impl From<Adapter> for AdapterKind {
    fn from(a: Adapter) -> Self {
        match a {
            Adapter::Sim => AdapterKind::Sim,
            Adapter::Local => AdapterKind::Local,
            Adapter::Ssh => AdapterKind::Ssh,
        }
    }
}

#[derive(Args)]
struct SubmitArgs {
    #[arg(long)]
    app: PathBuf,
    #[arg(long)]
    services: PathBuf,
    /// Credentials document. Secrets are read from the environment variables it names.
    #[arg(long)]
    credentials: Option<PathBuf>,
    /// round_robin, cost, time or data_aware. Defaults to the application's optimization goal.
    #[arg(long)]
    policy: Option<PolicyKind>,
    /// Upper bound on jobs held in memory.
    #[arg(long, default_value_t = 100)]
    active_set: usize,
    /// Seconds between status polls of each job.
    #[arg(long, default_value_t = 12.0)]
    poll_interval: f64,
    #[arg(long, default_value_t = 3)]
    max_attempts: u32,
    /// Consecutive failed polls before a job is reset.
    #[arg(long, default_value_t = 3)]
    poll_retries: u32,
    #[arg(long, value_enum)]
    staging: Option<Staging>,
    /// Run every compute service through this adapter.
    #[arg(long, value_enum)]
    adapter: Option<Adapter>,
    #[arg(long, default_value = "broker-store")]
    store: PathBuf,
    #[arg(long, default_value = "broker-out")]
    out: PathBuf,
    /// Simulator settings (TOML) for sim services.
    #[arg(long)]
    sim_config: Option<PathBuf>,
    /// Use wall time even when every service is simulated.
    #[arg(long)]
    real_clock: bool,
    /// Skip fsync on store writes.
    #[arg(long)]
    no_fsync: bool,
}

#[derive(Args)]
struct RecoverArgs {
    #[arg(long, default_value = "broker-store")]
    store: PathBuf,
    #[arg(long)]
    instance: String,
    #[arg(long)]
    credentials: Option<PathBuf>,
}

#[derive(Args)]
struct StatusArgs {
    #[arg(long, default_value = "broker-store")]
    store: PathBuf,
    #[arg(long)]
    instance: String,
}

#[derive(Args)]
struct BenchArgs {
    /// simple, data or compute.
    #[arg(long)]
    profile: BenchProfile,
    #[arg(long, default_value_t = 50)]
    jobs: usize,
    #[arg(long, value_enum, default_value = "sim")]
    adapter: Adapter,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 12.0)]
    poll_interval: f64,
    /// Measure wall time instead of the simulator's virtual clock.
    #[arg(long)]
    real_clock: bool,
    /// Multiplies job lengths and the poll interval.
    #[arg(long, default_value_t = 1.0)]
    time_scale: f64,
    /// Keep the store and outputs here instead of a temporary directory.
    #[arg(long)]
    dir: Option<PathBuf>,
}

const EXIT_STARTUP: u8 = 2;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new(level)))
        .with_writer(std::io::stderr)
        .init();

    let outcome = match cli.command {
        Command::Submit(a) => submit(a),
        Command::Recover(a) => recover(a),
        Command::Status(a) => show_status(a),
        Command::Bench(a) => run_bench(a),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_STARTUP)
        }
    }
}

fn load(path: &Path, kind: DocumentKind) -> Result<DescriptionDocument> {
    DescriptionDocument::load(path, kind).with_context(|| format!("loading {}", path.display()))
}

fn credentials(path: Option<&Path>) -> Result<Vec<Credential>> {
    match path {
        Some(p) => Ok(parse_credentials(&load(p, DocumentKind::Credentials)?)?),
        None => Ok(Vec::new()),
    }
}

fn submit(a: SubmitArgs) -> Result<u8> {
    let app = parse_application(&load(&a.app, DocumentKind::Application)?)?;
    let services = parse_services(&load(&a.services, DocumentKind::Services)?)?;
    let creds = credentials(a.credentials.as_deref())?;
    let sim = match &a.sim_config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Some(toml::from_str::<SimConfig>(&text).with_context(|| format!("parsing {}", p.display()))?)
        }
        None => None,
    };
    let base_dir = a.app.parent().filter(|p| !p.as_os_str().is_empty()).map_or_else(|| PathBuf::from("."), Path::to_path_buf);
    let cfg = RunConfig {
        policy: a.policy,
        active_set: a.active_set,
        poll_interval_s: a.poll_interval,
        poll_retries: a.poll_retries,
        max_attempts: a.max_attempts,
        staging: a.staging.map(|s| match s {
            Staging::Push => StagingMode::Push,
            Staging::Pull => StagingMode::Pull,
        }),
        adapter: a.adapter.map(Into::into),
        out_dir: a.out,
        store_dir: a.store,
        base_dir,
        clock: if a.real_clock { ClockMode::Real } else { ClockMode::Auto },
        fsync: !a.no_fsync,
        sim,
        ..RunConfig::default()
    };
    let rt = Runtime::start(app, services, creds, cfg, RunEnv::default())?;
    eprintln!("instance {}", rt.instance_id());
    finish(&rt, rt.run())
}

fn recover(a: RecoverArgs) -> Result<u8> {
    let creds = credentials(a.credentials.as_deref())?;
    let (rt, rec) = Runtime::resume(&a.store, &a.instance, creds, RunEnv::default())?;
    eprintln!("instance {}: {} jobs recovered", rt.instance_id(), rt.recovered_jobs().len());
    for action in &rec.actions {
        tracing::info!(?action, "recovery");
    }
    finish(&rt, rt.run())
}

fn finish(rt: &Runtime, result: Result<RunReport, RunError>) -> Result<u8> {
    match result {
        Ok(report) => {
            print!("{}", report.to_table());
            eprintln!("report written to {}", rt.config().out_dir.display());
            Ok(report.exit_code() as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            eprintln!(
                "the store is consistent; resume with: broker recover --store {} --instance {}",
                rt.config().store_dir.display(),
                rt.instance_id()
            );
            Ok(1)
        }
    }
}

fn show_status(a: StatusArgs) -> Result<u8> {
    print!("{}", status(&a.store, &a.instance)?);
    Ok(0)
}

fn run_bench(a: BenchArgs) -> Result<u8> {
    let scratch = tempfile::tempdir()?;
    let dir = a.dir.unwrap_or_else(|| scratch.path().to_path_buf());
    let mut opts = BenchOptions::new(a.profile, a.jobs, &dir);
    opts.adapter = a.adapter.into();
    opts.seed = a.seed;
    opts.poll_interval_s = a.poll_interval;
    opts.real_clock = a.real_clock;
    opts.time_scale = a.time_scale;
    let result = bench(&opts)?;
    print!("{}", result.to_table());
    Ok(result.report.exit_code() as u8)
}
