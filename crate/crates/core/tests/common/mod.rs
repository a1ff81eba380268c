#![allow(dead_code)]

pub mod checks;
pub mod oracle;

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use broker_core::clock::VirtualClock;
use broker_core::exec::{SimConfig, SimWorld};
use broker_core::interp::{parse_application, parse_credentials_with, parse_services, DescriptionDocument, DocumentKind};
use broker_core::model::{ApplicationContext, Credential, JobState, Service};
use broker_core::runtime::{JobEvent, RunConfig, RunEnv};

pub fn app(text: &str) -> ApplicationContext {
    parse_application(&DescriptionDocument::parse(text, DocumentKind::Application, "app.toml").unwrap()).unwrap()
}

pub fn services(text: &str) -> Vec<Service> {
    parse_services(&DescriptionDocument::parse(text, DocumentKind::Services, "services.toml").unwrap()).unwrap()
}

pub fn credentials(text: &str, env: &[(&str, &str)]) -> Vec<Credential> {
    let doc = DescriptionDocument::parse(text, DocumentKind::Credentials, "credentials.toml").unwrap();
    parse_credentials_with(&doc, |k| env.iter().find(|(n, _)| *n == k).map(|(_, v)| v.to_string())).unwrap()
}

/// `n` jobs, one per value of `i`, running `commands` (TOML inline array
/// items) and expecting `outputs`.
pub fn sweep(n: usize, commands: &str, outputs: &[&str]) -> ApplicationContext {
    let outs: Vec<String> = outputs.iter().map(|o| format!("{o:?}")).collect();
    app(&format!(
        "name = \"sweep\"\n\
         variables = [{{ name = \"i\", type = \"integer\", range = {{ from = 1, to = {n} }} }}]\n\
         expected_outputs = [{}]\n\
         task = [{commands}]\n",
        outs.join(", ")
    ))
}

/// The usual synthetic job: run for `secs`, then create its output.
pub fn sleep_touch(secs: f64) -> String {
    format!(
        "{{ execute = {{ cmd = \"sleep\", args = [\"{secs}\"] }} }}, {{ execute = {{ cmd = \"touch\", args = [\"out.$jobid.dat\"] }} }}"
    )
}

pub fn compute(id: &str, adapter: &str, slots: u32, price: f64) -> String {
    format!("[[services]]\ntype = \"compute\"\nid = \"{id}\"\nadapter = \"{adapter}\"\nslots = {slots}\nprice_per_cpu_s = {price:?}\n\n")
}

/// A scratch directory with a simulated grid on a shared virtual clock.
pub struct SimBed {
    pub dir: tempfile::TempDir,
    pub world: Arc<SimWorld>,
    pub clock: VirtualClock,
}

impl SimBed {
    pub fn new(cfg: SimConfig) -> SimBed {
        SimBed { dir: tempfile::tempdir().unwrap(), world: Arc::new(SimWorld::new(cfg)), clock: VirtualClock::default() }
    }

    pub fn env(&self) -> RunEnv {
        RunEnv { sim: Some(self.world.clone()), clock: Some(self.clock.clone()) }
    }

    pub fn config(&self) -> RunConfig {
        run_config(self.dir.path())
    }
}

pub fn run_config(dir: &Path) -> RunConfig {
    RunConfig {
        store_dir: dir.join("store"),
        out_dir: dir.join("out"),
        base_dir: dir.to_path_buf(),
        fsync: false,
        ..RunConfig::default()
    }
}

/// State sequence per job, in publication order.
pub fn paths(events: &[JobEvent]) -> BTreeMap<String, Vec<JobState>> {
    let mut out: BTreeMap<String, Vec<JobState>> = BTreeMap::new();
    for e in events {
        let p = out.entry(e.job_id.clone()).or_insert_with(|| vec![e.old_state]);
        p.push(e.new_state);
    }
    out
}

/// Every file under `dir`, concatenated.
pub fn all_bytes(dir: &Path) -> Vec<u8> {
    let mut out = Vec::new();
    for entry in walk(dir) {
        out.extend(std::fs::read(entry).unwrap_or_default());
    }
    out
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut files = Vec::new();
    let Ok(rd) = std::fs::read_dir(dir) else { return files };
    for e in rd.flatten() {
        let p = e.path();
        if p.is_dir() {
            files.extend(walk(&p));
        } else {
            files.push(p);
        }
    }
    files
}

pub fn contains(haystack: &[u8], needle: &[u8]) -> bool {
    !needle.is_empty() && haystack.windows(needle.len()).any(|w| w == needle)
}
