//! Durable entity store keyed by broker instance id.
//!
//! Layout: `<dir>/<instance_id>/log`, `<dir>/<instance_id>/snapshot-<n>` and
//! `<dir>/<instance_id>/LOCK`. Both log and snapshots are sequences of
//! records framed as `[len: u32 LE][crc32: u32 LE][json payload]`. A
//! snapshot holds the full entity set; the log holds every write since.
//! Only an index of jobs (id, state, placement) is kept in memory; job
//! bodies are read back from disk on demand.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufReader, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, MutexGuard};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{debug, warn};

use crate::model::{ApplicationContext, Credential, Job, JobState, RemoteHandle, Service, TransitionEvent};

pub const SCHEMA_VERSION: u32 = 1;
const MAX_RECORD_BYTES: u32 = 64 << 20;
const LOG_FILE: &str = "log";
const LOCK_FILE: &str = "LOCK";
const SNAPSHOT_PREFIX: &str = "snapshot-";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("instance {0} is locked by another broker")]
    Locked(String),
    #[error("store schema version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("no such instance {0}")]
    NoSuchInstance(String),
    #[error("store I/O: {0}")]
    Io(#[from] io::Error),
    #[error("rejected write: {0}")]
    Invalid(String),
    #[error("store is read-only")]
    ReadOnly,
    #[error("store crashed (injected)")]
    Crashed,
    #[error("service {0} missing credential {1}")]
    MissingCredential(String, String),
    #[error("corrupt store: {0}")]
    Corrupt(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SyncPolicy {
    /// fsync after every write.
    #[default]
    Always,
    /// Leave flushing to the OS. Survives process death, not power loss.
    OsBuffered,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "record", content = "body", rename_all = "snake_case")]
enum Record {
    Meta { schema_version: u32, instance_id: String },
    Context(ApplicationContext),
    Config(serde_json::Value),
    Service(Service),
    Job(Job),
}

/// Serializes exactly like `Record::Job` without copying the job.
#[derive(Serialize)]
#[serde(tag = "record", content = "body", rename_all = "snake_case")]
enum JobRecordRef<'a> {
    Job(&'a Job),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Segment {
    Snapshot,
    Log,
}

#[derive(Debug, Clone, Copy)]
struct Loc {
    segment: Segment,
    offset: u64,
    len: u32,
}

/// What the store remembers about a job without holding the job itself.
#[derive(Debug, Clone)]
pub struct JobIndexEntry {
    pub state: JobState,
    pub attempts: u32,
    pub compute_id: Option<String>,
    pub queue: Option<String>,
    pub est_cost: f64,
    pub has_handle: bool,
    pub abandoned: bool,
    loc: Loc,
}

impl JobIndexEntry {
    /// DONE, or FAILED with no retry left.
    pub fn is_terminal(&self, max_attempts: u32) -> bool {
        match self.state {
            JobState::Done => true,
            JobState::Failed => self.abandoned || self.attempts + 1 >= max_attempts,
            _ => false,
        }
    }
}

/// Persisted snapshot of every entity of one broker instance.
#[derive(Debug, Clone)]
pub struct BrokerState {
    pub instance_id: String,
    pub schema_version: u32,
    pub context: Option<ApplicationContext>,
    pub jobs: Vec<Job>,
    pub services: Vec<Service>,
    pub config: Option<serde_json::Value>,
}

struct Inner {
    log: File,
    log_len: u64,
    log_reader: File,
    snapshot_reader: Option<File>,
    snapshot_no: u64,
    jobs: BTreeMap<String, JobIndexEntry>,
    ready: BTreeSet<String>,
    services: BTreeMap<String, Service>,
    context: Option<ApplicationContext>,
    config: Option<serde_json::Value>,
    log_records: u64,
    writes: u64,
    crash_at: Option<u64>,
    crashed: bool,
}

/// Handle on one broker instance's store. Shareable across threads.
pub struct Store {
    dir: PathBuf,
    instance_id: String,
    read_only: bool,
    sync: SyncPolicy,
    compact_after: u64,
    inner: Mutex<Inner>,
    _lock: Option<File>,
}

impl std::fmt::Debug for Store {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Store").field("dir", &self.dir).field("instance_id", &self.instance_id).finish()
    }
}

fn new_instance_id() -> String {
    #[cfg(not(target_arch = "wasm32"))]
    {
        uuid::Uuid::new_v4().simple().to_string()
    }
    #[cfg(target_arch = "wasm32")]
    {
        use std::sync::atomic::{AtomicU64, Ordering};
        static N: AtomicU64 = AtomicU64::new(0);
        format!("wasm{:012x}", N.fetch_add(1, Ordering::Relaxed))
    }
}

fn encode<R: Serialize>(rec: &R) -> Vec<u8> {
    let payload = serde_json::to_vec(rec).expect("records always serialize");
    let mut buf = Vec::with_capacity(payload.len() + 8);
    buf.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    buf.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    buf.extend_from_slice(&payload);
    buf
}

/// Reads one framed record; `Ok(None)` at a clean end or a torn/corrupt tail.
fn read_frame<R: Read>(r: &mut R) -> io::Result<Option<Vec<u8>>> {
    let mut head = [0u8; 8];
    let mut got = 0;
    while got < head.len() {
        match r.read(&mut head[got..])? {
            0 => return Ok(None),
            n => got += n,
        }
    }
    let len = u32::from_le_bytes(head[..4].try_into().unwrap());
    let crc = u32::from_le_bytes(head[4..].try_into().unwrap());
    if len > MAX_RECORD_BYTES {
        return Ok(None);
    }
    let mut payload = vec![0u8; len as usize];
    if let Err(e) = r.read_exact(&mut payload) {
        return if e.kind() == io::ErrorKind::UnexpectedEof { Ok(None) } else { Err(e) };
    }
    if crc32fast::hash(&payload) != crc {
        return Ok(None);
    }
    Ok(Some(payload))
}

fn snapshot_numbers(dir: &Path) -> io::Result<Vec<u64>> {
    let mut nums = Vec::new();
    for entry in fs::read_dir(dir)? {
        let name = entry?.file_name();
        let name = name.to_string_lossy();
        if let Some(n) = name.strip_prefix(SNAPSHOT_PREFIX).and_then(|s| s.parse::<u64>().ok()) {
            nums.push(n);
        }
    }
    nums.sort_unstable();
    Ok(nums)
}

fn sync_dir(dir: &Path) {
    #[cfg(unix)]
    if let Ok(d) = File::open(dir) {
        let _ = d.sync_all();
    }
    #[cfg(not(unix))]
    let _ = dir;
}

#[derive(Debug, Clone)]
pub struct StoreOptions {
    pub sync: SyncPolicy,
    /// Log records after which a snapshot is taken.
    pub compact_after: u64,
}

impl Default for StoreOptions {
    fn default() -> Self {
        StoreOptions { sync: SyncPolicy::Always, compact_after: 50_000 }
    }
}

impl Store {
    /// Opens (or creates, when `instance_id` is `None`) an instance for writing.
    pub fn open(dir: impl AsRef<Path>, instance_id: Option<&str>) -> Result<Store, StoreError> {
        Store::open_with(dir, instance_id, StoreOptions::default())
    }

    pub fn open_with(dir: impl AsRef<Path>, instance_id: Option<&str>, opts: StoreOptions) -> Result<Store, StoreError> {
        let base = dir.as_ref();
        let (id, fresh) = match instance_id {
            Some(id) => {
                if !base.join(id).is_dir() {
                    return Err(StoreError::NoSuchInstance(id.to_string()));
                }
                (id.to_string(), false)
            }
            None => (new_instance_id(), true),
        };
        let idir = base.join(&id);
        fs::create_dir_all(&idir)?;
        let lock = OpenOptions::new().create(true).truncate(false).write(true).open(idir.join(LOCK_FILE))?;
        match lock.try_lock() {
            Ok(()) => {}
            Err(fs::TryLockError::WouldBlock) => return Err(StoreError::Locked(id)),
            Err(fs::TryLockError::Error(e)) => return Err(e.into()),
        }
        if fresh {
            sync_dir(base);
        }
        let store = Store::load(idir, id, false, opts, Some(lock))?;
        Ok(store)
    }

    /// Opens an instance for inspection without taking the writer lock.
    pub fn open_read_only(dir: impl AsRef<Path>, instance_id: &str) -> Result<Store, StoreError> {
        let idir = dir.as_ref().join(instance_id);
        if !idir.join(LOG_FILE).is_file() {
            return Err(StoreError::NoSuchInstance(instance_id.to_string()));
        }
        Store::load(idir, instance_id.to_string(), true, StoreOptions::default(), None)
    }

    /// Instance ids present under `dir`.
    pub fn instances(dir: impl AsRef<Path>) -> io::Result<Vec<String>> {
        let mut out = Vec::new();
        for e in fs::read_dir(dir)? {
            let e = e?;
            if e.path().join(LOG_FILE).is_file() {
                out.push(e.file_name().to_string_lossy().into_owned());
            }
        }
        out.sort();
        Ok(out)
    }

    fn load(idir: PathBuf, id: String, read_only: bool, opts: StoreOptions, lock: Option<File>) -> Result<Store, StoreError> {
        let log_path = idir.join(LOG_FILE);
        let mut inner = Inner {
            log: OpenOptions::new()
                .create(!read_only)
                .truncate(false)
                .read(true)
                .append(!read_only)
                .open(&log_path)?,
            log_len: 0,
            log_reader: File::open(&log_path)?,
            snapshot_reader: None,
            snapshot_no: 0,
            jobs: BTreeMap::new(),
            ready: BTreeSet::new(),
            services: BTreeMap::new(),
            context: None,
            config: None,
            log_records: 0,
            writes: 0,
            crash_at: None,
            crashed: false,
        };

        let mut meta_seen = false;
        if let Some(&n) = snapshot_numbers(&idir)?.last() {
            let path = idir.join(format!("{SNAPSHOT_PREFIX}{n}"));
            let (end, _) = replay(&path, Segment::Snapshot, &mut inner, &mut meta_seen)?;
            if end != fs::metadata(&path)?.len() {
                return Err(StoreError::Corrupt(format!("snapshot {} is damaged", path.display())));
            }
            inner.snapshot_reader = Some(File::open(&path)?);
            inner.snapshot_no = n;
        }
        let (good, records) = replay(&log_path, Segment::Log, &mut inner, &mut meta_seen)?;
        inner.log_records = records;
        let actual = fs::metadata(&log_path)?.len();
        if good < actual {
            if read_only {
                debug!(instance = %id, good, actual, "ignoring torn log tail in read-only open");
            } else {
                warn!(instance = %id, good, actual, "truncating corrupt log tail");
                inner.log.set_len(good)?;
                inner.log.sync_all()?;
            }
        }
        inner.log_len = good;

        let store = Store {
            dir: idir,
            instance_id: id.clone(),
            read_only,
            sync: opts.sync,
            compact_after: opts.compact_after,
            inner: Mutex::new(inner),
            _lock: lock,
        };
        if !meta_seen && !read_only {
            let meta = Record::Meta { schema_version: SCHEMA_VERSION, instance_id: id };
            store.append(&mut store.lock(), &meta)?;
        }
        Ok(store)
    }

    pub fn instance_id(&self) -> &str {
        &self.instance_id
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Makes the store fail every write after `n` more successful writes.
    pub fn crash_after(&self, n: u64) {
        let mut g = self.lock();
        g.crash_at = Some(g.writes + n);
    }

    pub fn writes(&self) -> u64 {
        self.lock().writes
    }

    fn append<R: Serialize>(&self, g: &mut Inner, rec: &R) -> Result<Loc, StoreError> {
        if self.read_only {
            return Err(StoreError::ReadOnly);
        }
        if g.crashed || g.crash_at.is_some_and(|c| g.writes >= c) {
            g.crashed = true;
            return Err(StoreError::Crashed);
        }
        let buf = encode(rec);
        g.log.write_all(&buf)?;
        if self.sync == SyncPolicy::Always {
            g.log.sync_data()?;
        }
        let loc = Loc { segment: Segment::Log, offset: g.log_len + 8, len: (buf.len() - 8) as u32 };
        g.log_len += buf.len() as u64;
        g.log_records += 1;
        g.writes += 1;
        Ok(loc)
    }

    fn after_write(&self, g: &mut Inner) -> Result<(), StoreError> {
        if g.log_records >= self.compact_after {
            self.compact_locked(g)?;
        }
        Ok(())
    }

    /// Persists a job. Durable when this returns.
    pub fn put_job(&self, job: &Job) -> Result<(), StoreError> {
        let mut g = self.lock();
        let ctx = g
            .context
            .as_ref()
            .ok_or_else(|| StoreError::Invalid(format!("job {} written before the application context", job.job_id)))?;
        if ctx.task(&job.task_id).is_none() {
            return Err(StoreError::Invalid(format!("job {} references unknown task {}", job.job_id, job.task_id)));
        }
        if let Some(m) = &job.mapping {
            if !matches!(g.services.get(&m.compute_id), Some(Service::Compute(_))) {
                return Err(StoreError::Invalid(format!("job {} mapped to unknown server {}", job.job_id, m.compute_id)));
            }
            for dh in m.data_selection.values() {
                if !matches!(g.services.get(dh), Some(Service::Data(_))) {
                    return Err(StoreError::Invalid(format!("job {} mapped to unknown datahost {dh}", job.job_id)));
                }
            }
        }
        let loc = self.append(&mut g, &JobRecordRef::Job(job))?;
        index_job(&mut g, job, loc);
        self.after_write(&mut g)
    }

    pub fn put_service(&self, service: &Service) -> Result<(), StoreError> {
        let mut g = self.lock();
        self.append(&mut g, &Record::Service(service.clone()))?;
        g.services.insert(service.id().to_string(), service.clone());
        self.after_write(&mut g)
    }

    pub fn put_context(&self, ctx: &ApplicationContext) -> Result<(), StoreError> {
        let mut g = self.lock();
        self.append(&mut g, &Record::Context(ctx.clone()))?;
        g.context = Some(ctx.clone());
        self.after_write(&mut g)
    }

    pub fn put_config(&self, config: &serde_json::Value) -> Result<(), StoreError> {
        let mut g = self.lock();
        self.append(&mut g, &Record::Config(config.clone()))?;
        g.config = Some(config.clone());
        self.after_write(&mut g)
    }

    /// Read-modify-write of one service under the store lock.
    pub fn update_service(&self, id: &str, f: impl FnOnce(&mut Service)) -> Result<Option<Service>, StoreError> {
        let mut g = self.lock();
        let Some(mut s) = g.services.get(id).cloned() else { return Ok(None) };
        let before = s.clone();
        f(&mut s);
        if s != before {
            self.append(&mut g, &Record::Service(s.clone()))?;
            g.services.insert(id.to_string(), s.clone());
            self.after_write(&mut g)?;
        }
        Ok(Some(s))
    }

    pub fn context(&self) -> Option<ApplicationContext> {
        self.lock().context.clone()
    }

    pub fn config(&self) -> Option<serde_json::Value> {
        self.lock().config.clone()
    }

    pub fn services(&self) -> Vec<Service> {
        self.lock().services.values().cloned().collect()
    }

    pub fn service(&self, id: &str) -> Option<Service> {
        self.lock().services.get(id).cloned()
    }

    pub fn job_count(&self) -> usize {
        self.lock().jobs.len()
    }

    pub fn job_entry(&self, id: &str) -> Option<JobIndexEntry> {
        self.lock().jobs.get(id).cloned()
    }

    /// Loads one job from disk.
    pub fn get_job(&self, id: &str) -> Result<Option<Job>, StoreError> {
        let mut g = self.lock();
        let Some(loc) = g.jobs.get(id).map(|e| e.loc) else { return Ok(None) };
        let job = read_job_at(&mut g, loc)?;
        Ok(Some(job))
    }

    /// Ids of jobs in any of `states`, ascending.
    pub fn job_ids_in(&self, states: &[JobState]) -> Vec<String> {
        let g = self.lock();
        g.jobs
            .iter()
            .filter(|(_, e)| states.contains(&e.state))
            .map(|(id, _)| id.clone())
            .collect()
    }

    /// All job ids with their index entries, ascending.
    pub fn job_index(&self) -> Vec<(String, JobIndexEntry)> {
        self.lock().jobs.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    pub fn state_counts(&self) -> BTreeMap<JobState, usize> {
        let g = self.lock();
        let mut out = BTreeMap::new();
        for e in g.jobs.values() {
            *out.entry(e.state).or_insert(0) += 1;
        }
        out
    }

    /// Admitted jobs per compute server and per (server, queue).
    pub fn occupancy(&self) -> (BTreeMap<String, u32>, BTreeMap<(String, String), u32>) {
        let g = self.lock();
        let mut servers = BTreeMap::new();
        let mut queues = BTreeMap::new();
        for e in g.jobs.values().filter(|e| e.state.occupies_slot()) {
            if let Some(c) = &e.compute_id {
                *servers.entry(c.clone()).or_insert(0) += 1;
                if let Some(q) = &e.queue {
                    *queues.entry((c.clone(), q.clone())).or_insert(0) += 1;
                }
            }
        }
        (servers, queues)
    }

    /// Number of jobs that are DONE or FAILED for good.
    pub fn terminal_count(&self, max_attempts: u32) -> usize {
        self.lock().jobs.values().filter(|e| e.is_terminal(max_attempts)).count()
    }

    /// Number of jobs between SCHEDULED and STAGE_OUT.
    pub fn in_flight_count(&self) -> usize {
        self.lock().jobs.values().filter(|e| e.state.occupies_slot()).count()
    }

    /// Estimated cost of every job that currently holds a mapping.
    pub fn committed_cost(&self) -> f64 {
        self.lock().jobs.values().filter(|e| e.compute_id.is_some()).map(|e| e.est_cost).sum()
    }

    /// Materializes the full entity set. Holds every job in memory at once.
    pub fn state(&self) -> Result<BrokerState, StoreError> {
        let ids: Vec<String> = self.lock().jobs.keys().cloned().collect();
        let mut jobs = Vec::with_capacity(ids.len());
        for id in ids {
            if let Some(j) = self.get_job(&id)? {
                jobs.push(j);
            }
        }
        let g = self.lock();
        Ok(BrokerState {
            instance_id: self.instance_id.clone(),
            schema_version: SCHEMA_VERSION,
            context: g.context.clone(),
            jobs,
            services: g.services.values().cloned().collect(),
            config: g.config.clone(),
        })
    }

    /// Writes a snapshot of the current entity set and starts an empty log.
    pub fn compact(&self) -> Result<(), StoreError> {
        if self.read_only {
            return Err(StoreError::ReadOnly);
        }
        let mut g = self.lock();
        self.compact_locked(&mut g)
    }

    fn compact_locked(&self, g: &mut Inner) -> Result<(), StoreError> {
        if g.crashed {
            return Err(StoreError::Crashed);
        }
        let next = g.snapshot_no + 1;
        let final_path = self.dir.join(format!("{SNAPSHOT_PREFIX}{next}"));
        let tmp_path = self.dir.join(format!("{SNAPSHOT_PREFIX}{next}.tmp"));
        let mut out = io::BufWriter::new(File::create(&tmp_path)?);
        let mut offset = 0u64;
        let mut new_locs = BTreeMap::new();
        let mut put = |out: &mut io::BufWriter<File>, rec: &Record| -> io::Result<Loc> {
            let buf = encode(rec);
            out.write_all(&buf)?;
            let loc = Loc { segment: Segment::Snapshot, offset: offset + 8, len: (buf.len() - 8) as u32 };
            offset += buf.len() as u64;
            Ok(loc)
        };
        put(&mut out, &Record::Meta { schema_version: SCHEMA_VERSION, instance_id: self.instance_id.clone() })?;
        if let Some(c) = &g.context {
            put(&mut out, &Record::Context(c.clone()))?;
        }
        if let Some(c) = &g.config {
            put(&mut out, &Record::Config(c.clone()))?;
        }
        for s in g.services.values() {
            put(&mut out, &Record::Service(s.clone()))?;
        }
        let ids: Vec<(String, Loc)> = g.jobs.iter().map(|(k, e)| (k.clone(), e.loc)).collect();
        for (id, loc) in ids {
            let job = read_job_at(g, loc)?;
            new_locs.insert(id, put(&mut out, &Record::Job(job))?);
        }
        let file = out.into_inner().map_err(|e| e.into_error())?;
        file.sync_all()?;
        drop(file);
        fs::rename(&tmp_path, &final_path)?;
        sync_dir(&self.dir);

        // A crash here leaves the old log next to the new snapshot; replaying
        // it over the snapshot reproduces the same final state.
        let log_path = self.dir.join(LOG_FILE);
        let tmp_log = self.dir.join("log.tmp");
        {
            let mut f = File::create(&tmp_log)?;
            f.write_all(&encode(&Record::Meta {
                schema_version: SCHEMA_VERSION,
                instance_id: self.instance_id.clone(),
            }))?;
            f.sync_all()?;
        }
        fs::rename(&tmp_log, &log_path)?;
        sync_dir(&self.dir);
        g.log = OpenOptions::new().read(true).append(true).open(&log_path)?;
        g.log_reader = File::open(&log_path)?;
        g.log_len = g.log.metadata()?.len();
        g.log_records = 1;
        g.snapshot_reader = Some(File::open(&final_path)?);
        let old = g.snapshot_no;
        g.snapshot_no = next;
        for (id, loc) in new_locs {
            if let Some(e) = g.jobs.get_mut(&id) {
                e.loc = loc;
            }
        }
        if old > 0 {
            let _ = fs::remove_file(self.dir.join(format!("{SNAPSHOT_PREFIX}{old}")));
        }
        debug!(instance = %self.instance_id, snapshot = next, "compacted store");
        Ok(())
    }

    /// Raw bytes of every file in the instance directory.
    pub fn raw_bytes(&self) -> io::Result<Vec<u8>> {
        let mut all = Vec::new();
        for e in fs::read_dir(&self.dir)? {
            let p = e?.path();
            if p.is_file() {
                all.extend(fs::read(p)?);
            }
        }
        Ok(all)
    }
}

fn index_job(g: &mut Inner, job: &Job, loc: Loc) {
    if job.state == JobState::Ready {
        g.ready.insert(job.job_id.clone());
    } else {
        g.ready.remove(&job.job_id);
    }
    g.jobs.insert(
        job.job_id.clone(),
        JobIndexEntry {
            state: job.state,
            attempts: job.attempts,
            compute_id: job.mapping.as_ref().map(|m| m.compute_id.clone()),
            queue: job.mapping.as_ref().and_then(|m| m.queue.clone()),
            est_cost: job.mapping.as_ref().map_or(0.0, |m| m.est_cost),
            has_handle: job.remote_handle.is_some(),
            abandoned: job.abandoned,
            loc,
        },
    );
}

fn read_job_at(g: &mut Inner, loc: Loc) -> Result<Job, StoreError> {
    let f = match loc.segment {
        Segment::Log => &mut g.log_reader,
        Segment::Snapshot => g
            .snapshot_reader
            .as_mut()
            .ok_or_else(|| StoreError::Corrupt("job located in a missing snapshot".into()))?,
    };
    f.seek(SeekFrom::Start(loc.offset))?;
    let mut buf = vec![0u8; loc.len as usize];
    f.read_exact(&mut buf)?;
    match serde_json::from_slice::<Record>(&buf) {
        Ok(Record::Job(j)) => Ok(j),
        Ok(_) => Err(StoreError::Corrupt("index points at a non-job record".into())),
        Err(e) => Err(StoreError::Corrupt(e.to_string())),
    }
}

/// Applies every intact record of `path`; returns the end offset of the
/// last intact record and the number of records read.
fn replay(path: &Path, segment: Segment, g: &mut Inner, meta_seen: &mut bool) -> Result<(u64, u64), StoreError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut offset = 0u64;
    let mut count = 0u64;
    while let Some(payload) = read_frame(&mut r)? {
        let rec: Record = match serde_json::from_slice(&payload) {
            Ok(r) => r,
            Err(e) => {
                warn!(path = %path.display(), offset, error = %e, "undecodable record; treating as end of data");
                break;
            }
        };
        let loc = Loc { segment, offset: offset + 8, len: payload.len() as u32 };
        match rec {
            Record::Meta { schema_version, .. } => {
                if schema_version != SCHEMA_VERSION {
                    return Err(StoreError::VersionMismatch { found: schema_version, expected: SCHEMA_VERSION });
                }
                *meta_seen = true;
            }
            Record::Context(c) => g.context = Some(c),
            Record::Config(c) => g.config = Some(c),
            Record::Service(s) => {
                g.services.insert(s.id().to_string(), s);
            }
            Record::Job(j) => index_job(g, &j, loc),
        }
        offset += 8 + payload.len() as u64;
        count += 1;
    }
    Ok((offset, count))
}

/// The bounded set of jobs the broker works on at a time.
#[derive(Debug, Clone)]
pub struct ActiveSet {
    capacity: usize,
    members: BTreeSet<String>,
}

impl ActiveSet {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "active set capacity must be positive");
        ActiveSet { capacity, members: BTreeSet::new() }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.members.contains(id)
    }

    pub fn members(&self) -> impl Iterator<Item = &String> {
        self.members.iter()
    }

    pub fn insert(&mut self, id: String) -> bool {
        if self.members.len() >= self.capacity {
            return false;
        }
        self.members.insert(id)
    }

    pub fn remove(&mut self, id: &str) {
        self.members.remove(id);
    }

    /// Drops members that are DONE or have failed for the last time.
    pub fn retire_finished(&mut self, store: &Store, max_attempts: u32) {
        let g = store.lock();
        self.members.retain(|id| g.jobs.get(id).is_some_and(|e| !e.is_terminal(max_attempts)));
    }
}

/// Loads READY jobs that are not yet members, oldest id first, up to the
/// free capacity of `active`, and makes them members.
pub fn next_ready_batch(store: &Store, active: &mut ActiveSet) -> Result<Vec<Job>, StoreError> {
    let free = active.capacity.saturating_sub(active.members.len());
    if free == 0 {
        return Ok(Vec::new());
    }
    let ids: Vec<String> = {
        let g = store.lock();
        g.ready.iter().filter(|id| !active.members.contains(*id)).take(free).cloned().collect()
    };
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        if let Some(j) = store.get_job(&id)? {
            active.members.insert(id);
            out.push(j);
        }
    }
    Ok(out)
}

/// Looks for evidence that a submission reached the execution service.
pub trait SubmissionProbe {
    fn find_submission(&self, job: &Job) -> Option<RemoteHandle>;
}

/// Probe for callers without adapters: never finds anything.
pub struct NoProbe;

impl SubmissionProbe for NoProbe {
    fn find_submission(&self, _: &Job) -> Option<RemoteHandle> {
        None
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RecoveryAction {
    /// Job holds a handle; keep its state and poll it again.
    Repoll { job_id: String, state: JobState },
    /// Job was in stage-out; poll again, then retrieve outputs again.
    RepollRestage { job_id: String },
    /// A submission intent found its remote job; the handle was adopted.
    Adopted { job_id: String },
    /// Job never reached the execution service and goes back to READY.
    Reset { job_id: String, from: JobState, attempts: u32 },
    /// Job had failed for the last time before the crash.
    LeftFailed { job_id: String },
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RecoveryReport {
    pub actions: Vec<RecoveryAction>,
}

impl RecoveryReport {
    pub fn repoll_ids(&self) -> Vec<&str> {
        self.actions
            .iter()
            .filter_map(|a| match a {
                RecoveryAction::Repoll { job_id, .. } | RecoveryAction::RepollRestage { job_id } | RecoveryAction::Adopted { job_id } => {
                    Some(job_id.as_str())
                }
                _ => None,
            })
            .collect()
    }

    pub fn reset_count(&self) -> usize {
        self.actions.iter().filter(|a| matches!(a, RecoveryAction::Reset { .. })).count()
    }
}

/// Reconciles persisted jobs after an unclean shutdown.
pub fn recover(
    store: &Store,
    creds: &[Credential],
    probe: &dyn SubmissionProbe,
    max_attempts: u32,
    now_ms: u64,
) -> Result<(BrokerStateSummary, RecoveryReport), StoreError> {
    for s in store.services() {
        if let Some(c) = s.credential_id() {
            if !creds.iter().any(|k| k.cred_id == c) {
                return Err(StoreError::MissingCredential(s.id().to_string(), c.to_string()));
            }
        }
    }
    let mut report = RecoveryReport::default();
    for (id, entry) in store.job_index() {
        let action = match entry.state {
            JobState::Ready | JobState::Done => continue,
            JobState::Submitted | JobState::Pending | JobState::Active if entry.has_handle => {
                RecoveryAction::Repoll { job_id: id, state: entry.state }
            }
            JobState::StageOut if entry.has_handle => RecoveryAction::RepollRestage { job_id: id },
            JobState::Failed if entry.is_terminal(max_attempts) => RecoveryAction::LeftFailed { job_id: id },
            from => {
                let Some(job) = store.get_job(&id)? else { continue };
                if from == JobState::StageIn && job.submit_intent == Some(job.attempts) {
                    if let Some(handle) = probe.find_submission(&job) {
                        let mut adopted = job
                            .transition(TransitionEvent::HandleObtained, now_ms)
                            .map_err(|e| StoreError::Invalid(e.to_string()))?;
                        adopted.remote_handle = Some(handle);
                        store.put_job(&adopted)?;
                        report.actions.push(RecoveryAction::Adopted { job_id: id });
                        continue;
                    }
                }
                let failed = if job.state == JobState::Failed {
                    job
                } else {
                    job.transition(TransitionEvent::Failure("interrupted before submission".into()), now_ms)
                        .map_err(|e| StoreError::Invalid(e.to_string()))?
                };
                if failed.is_terminal(max_attempts) {
                    store.put_job(&failed)?;
                    RecoveryAction::LeftFailed { job_id: id }
                } else {
                    let reset = failed.transition(TransitionEvent::Reset, now_ms).map_err(|e| StoreError::Invalid(e.to_string()))?;
                    store.put_job(&reset)?;
                    RecoveryAction::Reset { job_id: id, from, attempts: reset.attempts }
                }
            }
        };
        report.actions.push(action);
    }
    let summary = BrokerStateSummary {
        instance_id: store.instance_id().to_string(),
        context: store.context(),
        services: store.services(),
        state_counts: store.state_counts(),
    };
    Ok((summary, report))
}

/// Entity set after recovery, with jobs summarized by state.
#[derive(Debug, Clone)]
pub struct BrokerStateSummary {
    pub instance_id: String,
    pub context: Option<ApplicationContext>,
    pub services: Vec<Service>,
    pub state_counts: BTreeMap<JobState, usize>,
}
