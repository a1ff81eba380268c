//! The broker's model of the grid: compute servers, data hosts,
//! information services and network links.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::task::ReplicaResolver;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdapterKind {
    Local,
    Ssh,
    Sim,
}

impl fmt::Display for AdapterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AdapterKind::Local => "local",
            AdapterKind::Ssh => "ssh",
            AdapterKind::Sim => "sim",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StagingMode {
    #[default]
    Push,
    Pull,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Queue {
    pub name: String,
    pub max_wallclock_s: f64,
    pub slots: u32,
    #[serde(default)]
    pub in_flight: u32,
}

impl Queue {
    pub fn has_free_slot(&self) -> bool {
        self.in_flight < self.slots
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComputeServer {
    pub service_id: String,
    pub uri: String,
    pub available: bool,
    pub last_probe: Option<u64>,
    pub adapter: AdapterKind,
    pub architecture: String,
    pub os: String,
    pub slots: u32,
    #[serde(default)]
    pub queues: Vec<Queue>,
    pub price_per_cpu_s: f64,
    pub credential_id: Option<String>,
    /// Completed jobs per second, smoothed over measured compute durations.
    pub observed_rate: Option<f64>,
    /// Jobs completed on this server during the current run.
    #[serde(default)]
    pub completed: u32,
    /// Jobs currently admitted (scheduled through stage-out).
    #[serde(default)]
    pub in_flight: u32,
    /// Excluded from scheduling until this instant after a dispatch failure.
    #[serde(default)]
    pub cooldown_until: Option<u64>,
    #[serde(default)]
    pub staging: StagingMode,
}

/// Smoothing factor for the per-server compute-duration average.
pub const RATE_EWMA_ALPHA: f64 = 0.5;

impl ComputeServer {
    pub fn new(service_id: impl Into<String>, adapter: AdapterKind, slots: u32, price_per_cpu_s: f64) -> Self {
        ComputeServer {
            service_id: service_id.into(),
            uri: String::new(),
            available: true,
            last_probe: None,
            adapter,
            architecture: String::new(),
            os: String::new(),
            slots,
            queues: Vec::new(),
            price_per_cpu_s,
            credential_id: None,
            observed_rate: None,
            completed: 0,
            in_flight: 0,
            cooldown_until: None,
            staging: StagingMode::Push,
        }
    }

    /// Whether the scheduler may place new work here at `now_ms`.
    pub fn is_schedulable(&self, now_ms: u64) -> bool {
        self.available && self.cooldown_until.is_none_or(|t| now_ms >= t)
    }

    pub fn free_slots(&self) -> u32 {
        self.slots.saturating_sub(self.in_flight)
    }

    /// Folds one measured compute duration into the observed rate.
    pub fn record_completion(&mut self, compute_s: f64) {
        let sample = compute_s.max(1e-3);
        let duration = match self.observed_rate {
            Some(rate) if self.completed > 0 => RATE_EWMA_ALPHA * sample + (1.0 - RATE_EWMA_ALPHA) / rate,
            _ => sample,
        };
        self.observed_rate = Some(1.0 / duration);
        self.completed += 1;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataProtocol {
    Localfs,
    Sftp,
    Sim,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataFile {
    pub logical_name: String,
    pub path: String,
    pub size_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataHost {
    pub service_id: String,
    pub uri: String,
    pub available: bool,
    pub last_probe: Option<u64>,
    pub protocol: DataProtocol,
    #[serde(default)]
    pub files: Vec<DataFile>,
    pub price_per_mb: f64,
    #[serde(default)]
    pub credential_id: Option<String>,
}

impl DataHost {
    pub fn file_by_path(&self, path: &str) -> Option<&DataFile> {
        self.files.iter().find(|f| f.path == path)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InfoKind {
    ReplicaCatalog,
    MarketDirectory,
}

/// Location of one copy of a logical file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicaLocation {
    pub datahost: String,
    pub path: String,
}

/// Price fields a market directory may override.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriceOverride {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub price_per_cpu_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub price_per_mb: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cost_per_mb: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InformationService {
    pub service_id: String,
    pub uri: String,
    pub available: bool,
    pub last_probe: Option<u64>,
    pub subtype: InfoKind,
    /// Local file holding the catalog or directory contents.
    pub backing: String,
    /// Replica catalog contents as of the last probe.
    #[serde(default)]
    pub replicas: BTreeMap<String, Vec<ReplicaLocation>>,
    /// Market directory contents as of the last probe.
    #[serde(default)]
    pub prices: BTreeMap<String, PriceOverride>,
}

/// Wildcard endpoint for default links.
pub const ANY_ENDPOINT: &str = "*";
pub const BROKER_ENDPOINT: &str = "broker";

/// Smoothing factor for measured link bandwidth.
pub const LINK_EWMA_ALPHA: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkLink {
    pub service_id: String,
    pub from: String,
    pub to: String,
    /// Nominal bandwidth in megabytes per second.
    pub bandwidth_mbps: f64,
    pub cost_per_mb: f64,
    pub measured_mbps: Option<f64>,
}

impl NetworkLink {
    pub fn new(from: impl Into<String>, to: impl Into<String>, bandwidth_mbps: f64, cost_per_mb: f64) -> Self {
        let (from, to) = (from.into(), to.into());
        NetworkLink {
            service_id: link_id(&from, &to),
            from,
            to,
            bandwidth_mbps,
            cost_per_mb,
            measured_mbps: None,
        }
    }

    pub fn effective_mbps(&self) -> f64 {
        self.measured_mbps.unwrap_or(self.bandwidth_mbps)
    }

    pub fn observe(&mut self, mbps: f64) {
        if !(mbps.is_finite() && mbps > 0.0) {
            return;
        }
        self.measured_mbps = Some(match self.measured_mbps {
            Some(m) => LINK_EWMA_ALPHA * mbps + (1.0 - LINK_EWMA_ALPHA) * m,
            None => mbps,
        });
    }

    /// Seconds to move `bytes` across this link.
    pub fn transfer_s(&self, bytes: u64) -> f64 {
        bytes_to_mb(bytes) / self.effective_mbps()
    }
}

pub fn link_id(from: &str, to: &str) -> String {
    format!("link:{from}->{to}")
}

pub fn bytes_to_mb(bytes: u64) -> f64 {
    bytes as f64 / 1_000_000.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Service {
    Compute(ComputeServer),
    Data(DataHost),
    Info(InformationService),
    Link(NetworkLink),
}

impl Service {
    pub fn id(&self) -> &str {
        match self {
            Service::Compute(s) => &s.service_id,
            Service::Data(s) => &s.service_id,
            Service::Info(s) => &s.service_id,
            Service::Link(s) => &s.service_id,
        }
    }

    pub fn available(&self) -> bool {
        match self {
            Service::Compute(s) => s.available,
            Service::Data(s) => s.available,
            Service::Info(s) => s.available,
            Service::Link(_) => true,
        }
    }

    pub fn set_available(&mut self, available: bool, at_ms: u64) {
        match self {
            Service::Compute(s) => (s.available, s.last_probe) = (available, Some(at_ms)),
            Service::Data(s) => (s.available, s.last_probe) = (available, Some(at_ms)),
            Service::Info(s) => (s.available, s.last_probe) = (available, Some(at_ms)),
            Service::Link(_) => {}
        }
    }

    pub fn credential_id(&self) -> Option<&str> {
        match self {
            Service::Compute(s) => s.credential_id.as_deref(),
            Service::Data(s) => s.credential_id.as_deref(),
            _ => None,
        }
    }

    pub fn as_compute(&self) -> Option<&ComputeServer> {
        match self {
            Service::Compute(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_data(&self) -> Option<&DataHost> {
        match self {
            Service::Data(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_link(&self) -> Option<&NetworkLink> {
        match self {
            Service::Link(s) => Some(s),
            _ => None,
        }
    }

    /// Applies a market-directory price override.
    pub fn apply_price(&mut self, p: &PriceOverride) {
        match self {
            Service::Compute(s) => {
                if let Some(v) = p.price_per_cpu_s {
                    s.price_per_cpu_s = v;
                }
            }
            Service::Data(s) => {
                if let Some(v) = p.price_per_mb {
                    s.price_per_mb = v;
                }
            }
            Service::Link(s) => {
                if let Some(v) = p.cost_per_mb {
                    s.cost_per_mb = v;
                }
            }
            Service::Info(_) => {}
        }
    }
}

/// Directional link lookup with a default for unlisted pairs.
#[derive(Debug, Clone)]
pub struct LinkTable {
    links: BTreeMap<(String, String), NetworkLink>,
    default: NetworkLink,
}

/// Link used when neither a specific nor a wildcard link is declared.
pub const DEFAULT_LINK_MBPS: f64 = 100.0;

impl LinkTable {
    pub fn new<'a>(links: impl IntoIterator<Item = &'a NetworkLink>) -> Self {
        let mut map = BTreeMap::new();
        let mut default = NetworkLink::new(ANY_ENDPOINT, ANY_ENDPOINT, DEFAULT_LINK_MBPS, 0.0);
        for l in links {
            if l.from == ANY_ENDPOINT && l.to == ANY_ENDPOINT {
                default = l.clone();
            } else {
                map.insert((l.from.clone(), l.to.clone()), l.clone());
            }
        }
        LinkTable { links: map, default }
    }

    pub fn from_services(services: &[Service]) -> Self {
        LinkTable::new(services.iter().filter_map(Service::as_link))
    }

    pub fn lookup(&self, from: &str, to: &str) -> &NetworkLink {
        let key = |a: &str, b: &str| (a.to_string(), b.to_string());
        self.links
            .get(&key(from, to))
            .or_else(|| self.links.get(&key(from, ANY_ENDPOINT)))
            .or_else(|| self.links.get(&key(ANY_ENDPOINT, to)))
            .unwrap_or(&self.default)
    }
}

/// One replica of a logical file with its size and host pricing.
#[derive(Debug, Clone, PartialEq)]
pub struct Replica {
    pub datahost: String,
    pub path: String,
    pub size_bytes: u64,
}

/// Logical name to replica map assembled from data hosts and replica catalogs.
#[derive(Debug, Clone, Default)]
pub struct ReplicaIndex {
    pub entries: BTreeMap<String, Vec<Replica>>,
}

impl ReplicaIndex {
    pub fn from_services(services: &[Service]) -> Self {
        let hosts: BTreeMap<&str, &DataHost> = services
            .iter()
            .filter_map(Service::as_data)
            .map(|d| (d.service_id.as_str(), d))
            .collect();
        let mut entries: BTreeMap<String, Vec<Replica>> = BTreeMap::new();
        for d in hosts.values() {
            for f in &d.files {
                entries.entry(f.logical_name.clone()).or_default().push(Replica {
                    datahost: d.service_id.clone(),
                    path: f.path.clone(),
                    size_bytes: f.size_bytes,
                });
            }
        }
        for s in services {
            let Service::Info(info) = s else { continue };
            if info.subtype != InfoKind::ReplicaCatalog || !info.available {
                continue;
            }
            for (logical, locs) in &info.replicas {
                let list = entries.entry(logical.clone()).or_default();
                for loc in locs {
                    if list.iter().any(|r| r.datahost == loc.datahost && r.path == loc.path) {
                        continue;
                    }
                    let size = hosts
                        .get(loc.datahost.as_str())
                        .and_then(|h| h.file_by_path(&loc.path))
                        .map_or(0, |f| f.size_bytes);
                    list.push(Replica { datahost: loc.datahost.clone(), path: loc.path.clone(), size_bytes: size });
                }
            }
        }
        for list in entries.values_mut() {
            list.sort_by(|a, b| a.datahost.cmp(&b.datahost).then_with(|| a.path.cmp(&b.path)));
        }
        ReplicaIndex { entries }
    }

    pub fn replicas(&self, logical: &str) -> &[Replica] {
        self.entries.get(logical).map_or(&[], Vec::as_slice)
    }
}

impl ReplicaResolver for ReplicaIndex {
    fn resolve(&self, pattern: &str) -> Vec<String> {
        match glob::Pattern::new(pattern) {
            Ok(p) => self
                .entries
                .iter()
                .filter(|(name, reps)| !reps.is_empty() && p.matches(name))
                .map(|(name, _)| name.clone())
                .collect(),
            Err(_) => Vec::new(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn link_lookup_falls_back() {
        let specific = NetworkLink::new("broker", "s1", 10.0, 0.0);
        let wild = NetworkLink::new("*", "*", 5.0, 0.1);
        let table = LinkTable::new([&specific, &wild]);
        assert_eq!(table.lookup("broker", "s1").bandwidth_mbps, 10.0);
        assert_eq!(table.lookup("s1", "broker").bandwidth_mbps, 5.0);
        assert_eq!(LinkTable::new([]).lookup("a", "b").bandwidth_mbps, DEFAULT_LINK_MBPS);
    }

    #[test]
    fn equal_samples_give_equal_rate() {
        let mut s = ComputeServer::new("s1", AdapterKind::Sim, 1, 0.0);
        s.record_completion(60.0);
        s.record_completion(60.0);
        assert!((1.0 / s.observed_rate.unwrap() - 60.0).abs() < 1e-9);
        s.record_completion(120.0);
        assert!((1.0 / s.observed_rate.unwrap() - 90.0).abs() < 1e-9);
    }

    #[test]
    fn replica_index_merges_catalog() {
        let d1 = DataHost {
            service_id: "d1".into(),
            uri: String::new(),
            available: true,
            last_probe: None,
            protocol: DataProtocol::Sim,
            files: vec![DataFile { logical_name: "lfn:a".into(), path: "/a".into(), size_bytes: 7 }],
            price_per_mb: 0.0,
            credential_id: None,
        };
        let mut d2 = d1.clone();
        d2.service_id = "d2".into();
        d2.files[0].logical_name = "other".into();
        let cat = InformationService {
            service_id: "rc".into(),
            uri: String::new(),
            available: true,
            last_probe: None,
            subtype: InfoKind::ReplicaCatalog,
            backing: String::new(),
            replicas: BTreeMap::from([(
                "lfn:a".to_string(),
                vec![ReplicaLocation { datahost: "d2".into(), path: "/a".into() }],
            )]),
            prices: BTreeMap::new(),
        };
        let idx = ReplicaIndex::from_services(&[Service::Data(d1), Service::Data(d2), Service::Info(cat)]);
        let reps = idx.replicas("lfn:a");
        assert_eq!(reps.len(), 2);
        assert_eq!(reps[1].datahost, "d2");
        assert_eq!(reps[1].size_bytes, 7);
        assert_eq!(idx.resolve("lfn:*"), vec!["lfn:a"]);
    }
}
