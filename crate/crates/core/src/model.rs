//! Profile data model.
//!
//! Samples are per-period deltas of one resource kind; a [`Profile`] carries
//! one ordered series per watched kind plus the integrated [`Totals`].
//! Derived CPU metrics (efficiency, utilization, FLOPs) are computed on
//! demand from primary counters and never stored.

use std::collections::{BTreeMap, BTreeSet};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Current profile schema version.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("incompatible profiles: {0}")]
    IncompatibleProfiles(String),
    #[error("profile invariant violated: {0}")]
    Invariant(String),
}

/// Kind of resource a metric or watcher belongs to.
///
/// Network is intentionally absent: it cannot be profiled yet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResourceKind {
    System,
    Compute,
    Storage,
    Memory,
}

impl ResourceKind {
    /// Kinds that have a periodic watcher and an emulation atom.
    pub const WATCHED: [ResourceKind; 3] =
        [ResourceKind::Compute, ResourceKind::Memory, ResourceKind::Storage];

    pub fn name(self) -> &'static str {
        match self {
            ResourceKind::System => "system",
            ResourceKind::Compute => "compute",
            ResourceKind::Storage => "storage",
            ResourceKind::Memory => "memory",
        }
    }
}

impl std::fmt::Display for ResourceKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ResourceKind {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "system" => Ok(ResourceKind::System),
            "compute" | "cpu" => Ok(ResourceKind::Compute),
            "storage" | "io" | "disk" => Ok(ResourceKind::Storage),
            "memory" | "mem" => Ok(ResourceKind::Memory),
            other => Err(ModelError::InvalidArgument(format!("unknown resource kind `{other}`"))),
        }
    }
}

/// Static machine facts used for derived metrics.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SystemInfo {
    pub core_count: u32,
    pub max_freq_hz: u64,
    pub total_memory_bytes: u64,
    pub os_descriptor: String,
    pub cpu_model: String,
}

impl SystemInfo {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.core_count == 0 {
            return Err(ModelError::Invariant("core_count must be >= 1".into()));
        }
        if self.max_freq_hz == 0 {
            return Err(ModelError::Invariant("max_freq_hz must be > 0".into()));
        }
        if self.total_memory_bytes == 0 {
            return Err(ModelError::Invariant("total_memory_bytes must be > 0".into()));
        }
        Ok(())
    }
}

/// Compute counters for one sampling period.
///
/// Stall counters are `None` when the host could not provide them.
/// `threads` is a gauge (thread count at sample time), not a delta.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CpuSample {
    pub instructions: u64,
    pub cycles_used: u64,
    pub cycles_stalled_frontend: Option<u64>,
    pub cycles_stalled_backend: Option<u64>,
    #[serde(default)]
    pub cpu_time_ns: u64,
    #[serde(default)]
    pub threads: u32,
}

impl CpuSample {
    /// Per-sample efficiency, available only with stall counters.
    pub fn efficiency(&self) -> Option<f64> {
        match (self.cycles_stalled_frontend, self.cycles_stalled_backend) {
            (Some(fe), Some(be)) => Some(derive_cpu_efficiency(self.cycles_used, fe, be)),
            _ => None,
        }
    }
}

/// Memory counters for one sampling period. `peak_bytes` and
/// `resident_bytes` are gauges; allocated/freed are deltas.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MemSample {
    pub peak_bytes: u64,
    pub resident_bytes: u64,
    pub allocated_bytes: u64,
    pub freed_bytes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct IoSample {
    pub bytes_read: u64,
    pub bytes_written: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Payload {
    Cpu(CpuSample),
    Mem(MemSample),
    Io(IoSample),
}

impl Payload {
    pub fn kind(&self) -> ResourceKind {
        match self {
            Payload::Cpu(_) => ResourceKind::Compute,
            Payload::Mem(_) => ResourceKind::Memory,
            Payload::Io(_) => ResourceKind::Storage,
        }
    }
}

/// One sampling-period record of one resource kind.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub index: u64,
    /// Seconds since the target was spawned.
    #[serde(rename = "t")]
    pub timestamp_s: f64,
    #[serde(flatten)]
    pub payload: Payload,
}

impl Sample {
    pub fn kind(&self) -> ResourceKind {
        self.payload.kind()
    }

    pub fn cpu(&self) -> Option<&CpuSample> {
        match &self.payload {
            Payload::Cpu(c) => Some(c),
            _ => None,
        }
    }

    pub fn mem(&self) -> Option<&MemSample> {
        match &self.payload {
            Payload::Mem(m) => Some(m),
            _ => None,
        }
    }

    pub fn io(&self) -> Option<&IoSample> {
        match &self.payload {
            Payload::Io(i) => Some(i),
            _ => None,
        }
    }
}

pub type Series = BTreeMap<ResourceKind, Vec<Sample>>;

/// Integrated totals over a whole run.
///
/// Delta metrics are sums over samples; gauges (`peak_bytes`,
/// `resident_bytes`, `threads`) are maxima.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Totals {
    pub runtime_s: f64,
    pub instructions: u64,
    pub cycles_used: u64,
    pub cycles_stalled_frontend: Option<u64>,
    pub cycles_stalled_backend: Option<u64>,
    pub cpu_time_ns: u64,
    pub threads: u32,
    pub bytes_read: u64,
    pub bytes_written: u64,
    pub peak_bytes: u64,
    pub resident_bytes: u64,
    pub allocated_bytes: u64,
    pub freed_bytes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DerivedCpuMetrics {
    /// `None` when stall counters were unavailable.
    pub efficiency: Option<f64>,
    pub utilization: f64,
    pub flops: u64,
    pub flops_per_s: f64,
}

impl Totals {
    pub fn zero(runtime_s: f64) -> Self {
        Totals {
            runtime_s,
            cycles_stalled_frontend: Some(0),
            cycles_stalled_backend: Some(0),
            ..Default::default()
        }
    }

    pub fn derived(&self, sys: &SystemInfo, fp_fraction: f64) -> Result<DerivedCpuMetrics, ModelError> {
        let efficiency = match (self.cycles_stalled_frontend, self.cycles_stalled_backend) {
            (Some(fe), Some(be)) => Some(derive_cpu_efficiency(self.cycles_used, fe, be)),
            _ => None,
        };
        let utilization = derive_cpu_utilization(self.cycles_used, self.runtime_s, sys)?;
        let flops = flops_from_instructions(self.instructions, fp_fraction)?;
        Ok(DerivedCpuMetrics {
            efficiency,
            utilization,
            flops,
            flops_per_s: flops as f64 / self.runtime_s,
        })
    }

    /// Named numeric view used for statistics and reports. Absent
    /// counters map to `None`.
    pub fn metrics(&self) -> Vec<(&'static str, Option<f64>)> {
        vec![
            ("runtime_s", Some(self.runtime_s)),
            ("instructions", Some(self.instructions as f64)),
            ("cycles_used", Some(self.cycles_used as f64)),
            ("cycles_stalled_frontend", self.cycles_stalled_frontend.map(|v| v as f64)),
            ("cycles_stalled_backend", self.cycles_stalled_backend.map(|v| v as f64)),
            ("cpu_time_ns", Some(self.cpu_time_ns as f64)),
            ("threads", Some(self.threads as f64)),
            ("bytes_read", Some(self.bytes_read as f64)),
            ("bytes_written", Some(self.bytes_written as f64)),
            ("peak_bytes", Some(self.peak_bytes as f64)),
            ("resident_bytes", Some(self.resident_bytes as f64)),
            ("allocated_bytes", Some(self.allocated_bytes as f64)),
            ("freed_bytes", Some(self.freed_bytes as f64)),
        ]
    }
}

/// `used / (used + stalled_fe + stalled_be)`; an all-zero sample is 0.0.
pub fn derive_cpu_efficiency(used: u64, stalled_fe: u64, stalled_be: u64) -> f64 {
    let spent = used as f64 + stalled_fe as f64 + stalled_be as f64;
    if spent == 0.0 {
        0.0
    } else {
        used as f64 / spent
    }
}

/// `used / (max_freq * elapsed * cores)`. Not clamped: clock boost can
/// push it above 1.
pub fn derive_cpu_utilization(used: u64, elapsed_s: f64, sys: &SystemInfo) -> Result<f64, ModelError> {
    if !(elapsed_s > 0.0) {
        return Err(ModelError::InvalidArgument(format!("elapsed_s must be > 0, got {elapsed_s}")));
    }
    let cycles_max = sys.max_freq_hz as f64 * elapsed_s * sys.core_count as f64;
    Ok(used as f64 / cycles_max)
}

pub fn derive_flops(cpu: &CpuSample, fp_fraction: f64) -> Result<u64, ModelError> {
    flops_from_instructions(cpu.instructions, fp_fraction)
}

fn flops_from_instructions(instructions: u64, fp_fraction: f64) -> Result<u64, ModelError> {
    if !(0.0..=1.0).contains(&fp_fraction) {
        return Err(ModelError::InvalidArgument(format!(
            "fp_fraction must be within [0, 1], got {fp_fraction}"
        )));
    }
    Ok((instructions as f64 * fp_fraction).round() as u64)
}

fn add_opt(acc: Option<u64>, v: Option<u64>) -> Option<u64> {
    match (acc, v) {
        (Some(a), Some(b)) => Some(a + b),
        _ => None,
    }
}

/// Sums delta metrics and takes the maximum of gauges over every series.
pub fn integrate_totals(series: &Series, runtime_s: f64) -> Totals {
    let mut t = Totals::zero(runtime_s);
    for sample in series.values().flatten() {
        match &sample.payload {
            Payload::Cpu(c) => {
                t.instructions += c.instructions;
                t.cycles_used += c.cycles_used;
                t.cycles_stalled_frontend = add_opt(t.cycles_stalled_frontend, c.cycles_stalled_frontend);
                t.cycles_stalled_backend = add_opt(t.cycles_stalled_backend, c.cycles_stalled_backend);
                t.cpu_time_ns += c.cpu_time_ns;
                t.threads = t.threads.max(c.threads);
            }
            Payload::Mem(m) => {
                t.peak_bytes = t.peak_bytes.max(m.peak_bytes);
                t.resident_bytes = t.resident_bytes.max(m.resident_bytes);
                t.allocated_bytes += m.allocated_bytes;
                t.freed_bytes += m.freed_bytes;
            }
            Payload::Io(i) => {
                t.bytes_read += i.bytes_read;
                t.bytes_written += i.bytes_written;
            }
        }
    }
    t
}

/// A complete profile of one run of a command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Profile {
    pub version: u32,
    pub command: String,
    pub tags: BTreeSet<String>,
    pub system: SystemInfo,
    pub sample_rate_hz: f64,
    pub spawn_offset_s: f64,
    /// Exit status of the target; `128 + signal` when killed by a signal.
    pub exit_status: i32,
    /// Wall time from spawn to target exit.
    pub ttc_s: f64,
    /// Whether cycle/instruction counts come from hardware counters.
    pub hw_counters: bool,
    pub fp_fraction: f64,
    pub load_avg_1m: f64,
    pub series: Series,
    /// Sample indices skipped because a snapshot failed.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub gaps: BTreeMap<ResourceKind, Vec<u64>>,
    pub totals: Totals,
    pub created_at: DateTime<Utc>,
}

impl Profile {
    /// Runs that exited nonzero are kept but flagged.
    pub fn is_flagged(&self) -> bool {
        self.exit_status != 0
    }

    pub fn sample_count(&self) -> usize {
        self.series.values().map(Vec::len).sum()
    }

    /// Union of sample indices across all series.
    pub fn merged_indices(&self) -> BTreeSet<u64> {
        self.series.values().flatten().map(|s| s.index).collect()
    }

    pub fn derived(&self) -> Result<DerivedCpuMetrics, ModelError> {
        self.totals.derived(&self.system, self.fp_fraction)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.version != SCHEMA_VERSION {
            return Err(ModelError::Invariant(format!("unsupported schema version {}", self.version)));
        }
        self.system.validate()?;
        if !(self.sample_rate_hz > 0.0) {
            return Err(ModelError::Invariant("sample_rate_hz must be > 0".into()));
        }
        for (kind, samples) in &self.series {
            validate_series(*kind, samples)?;
        }
        let recomputed = integrate_totals(&self.series, self.totals.runtime_s);
        if recomputed != self.totals {
            return Err(ModelError::Invariant("totals do not match the integrated series".into()));
        }
        Ok(())
    }
}

fn validate_series(kind: ResourceKind, samples: &[Sample]) -> Result<(), ModelError> {
    let mut last_peak = 0;
    for (i, s) in samples.iter().enumerate() {
        if s.kind() != kind {
            return Err(ModelError::Invariant(format!(
                "{kind} series holds a {} sample at index {}",
                s.kind(),
                s.index
            )));
        }
        if i > 0 {
            let prev = &samples[i - 1];
            if s.index <= prev.index || !(s.timestamp_s > prev.timestamp_s) {
                return Err(ModelError::Invariant(format!(
                    "{kind} series not strictly increasing at index {}",
                    s.index
                )));
            }
        }
        if let Some(m) = s.mem() {
            if m.peak_bytes < last_peak {
                return Err(ModelError::Invariant(format!("peak_bytes decreases at index {}", s.index)));
            }
            last_peak = m.peak_bytes;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricStats {
    pub mean: f64,
    /// Population standard deviation.
    pub stddev: f64,
}

/// Repeat-run statistics over profiles sharing one command and tag set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileStats {
    pub n: usize,
    pub metrics: BTreeMap<String, MetricStats>,
}

impl ProfileStats {
    pub fn get(&self, metric: &str) -> Option<&MetricStats> {
        self.metrics.get(metric)
    }
}

/// Two-pass mean and population standard deviation.
pub fn mean_stddev(values: &[f64]) -> MetricStats {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    MetricStats { mean, stddev: var.sqrt() }
}

/// Per-metric mean and population stddev over the profiles' totals.
/// Metrics absent from any profile are omitted.
pub fn aggregate_stats(profiles: &[Profile]) -> Result<ProfileStats, ModelError> {
    let first = profiles
        .first()
        .ok_or_else(|| ModelError::InvalidArgument("cannot aggregate an empty profile list".into()))?;
    for p in &profiles[1..] {
        if p.command != first.command || p.tags != first.tags {
            return Err(ModelError::IncompatibleProfiles(format!(
                "`{}` {:?} vs `{}` {:?}",
                first.command, first.tags, p.command, p.tags
            )));
        }
    }
    let per_profile: Vec<Vec<(&'static str, Option<f64>)>> =
        profiles.iter().map(|p| p.totals.metrics()).collect();
    let names: Vec<&'static str> = per_profile[0].iter().map(|(n, _)| *n).collect();

    let columns: Vec<(usize, &'static str)> = names.into_iter().enumerate().collect();
    let stats = crate::exec::map(&columns, |&(col, name)| {
        let values: Option<Vec<f64>> = per_profile.iter().map(|m| m[col].1).collect();
        values.map(|v| (name.to_string(), mean_stddev(&v)))
    });
    Ok(ProfileStats {
        n: profiles.len(),
        metrics: stats.into_iter().flatten().collect(),
    })
}
