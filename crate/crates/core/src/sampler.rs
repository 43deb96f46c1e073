//! Spawns a target and samples it with one periodic watcher per resource
//! kind.
//!
//! Watchers run unsynchronised on their own threads, each on its own
//! clock: timestamps of different kinds may drift apart. When the target
//! exits, every watcher still waits for its next period boundary, takes a
//! final snapshot and stops, so profiling always ends on a full period.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use chrono::Utc;
use thiserror::Error;

use crate::model::{integrate_totals, ModelError, Payload, Profile, ResourceKind, Sample, Series, SCHEMA_VERSION};
use crate::telemetry::{
    counter_delta, Accounting, OsTarget, ProbeTarget, TargetProcess, Telemetry, TelemetryError,
};

pub const DEFAULT_SAMPLE_RATE_HZ: f64 = 1.0;
/// One sample every 100 ms at most.
pub const MAX_SAMPLE_RATE_HZ: f64 = 10.0;
pub const SAMPLE_RATE_ENV: &str = "SYNAPSE_SAMPLE_RATE";

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("invalid profiler configuration: {0}")]
    InvalidConfig(String),
    #[error("cannot spawn `{command}`: {reason}")]
    Spawn { command: String, reason: String },
    #[error(transparent)]
    Backend(#[from] TelemetryError),
    #[error("waiting for target failed: {0}")]
    Wait(#[from] std::io::Error),
    #[error("watcher lifecycle violated: {0}")]
    Lifecycle(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProfilerConfig {
    pub sample_rate_hz: f64,
    pub tags: BTreeSet<String>,
    pub watchers_enabled: BTreeSet<ResourceKind>,
    /// Fraction of instructions counted as floating point when deriving FLOPs.
    pub fp_fraction: f64,
    /// Discard the target's stdout/stderr.
    pub quiet: bool,
}

impl Default for ProfilerConfig {
    fn default() -> Self {
        ProfilerConfig {
            sample_rate_hz: DEFAULT_SAMPLE_RATE_HZ,
            tags: BTreeSet::new(),
            watchers_enabled: ResourceKind::WATCHED.into_iter().collect(),
            fp_fraction: 1.0,
            quiet: false,
        }
    }
}

impl ProfilerConfig {
    pub fn with_rate(mut self, hz: f64) -> Self {
        self.sample_rate_hz = hz;
        self
    }

    pub fn with_tags<I, S>(mut self, tags: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.tags = tags.into_iter().map(Into::into).collect();
        self
    }

    pub fn quiet(mut self, quiet: bool) -> Self {
        self.quiet = quiet;
        self
    }

    pub fn validate(&self) -> Result<(), SamplerError> {
        validate_rate(self.sample_rate_hz)?;
        if self.watchers_enabled.is_empty() {
            return Err(SamplerError::InvalidConfig("no watchers enabled".into()));
        }
        if let Some(k) = self.watchers_enabled.iter().find(|k| !ResourceKind::WATCHED.contains(k)) {
            return Err(SamplerError::InvalidConfig(format!("no watcher exists for {k}")));
        }
        if !(0.0..=1.0).contains(&self.fp_fraction) {
            return Err(SamplerError::InvalidConfig(format!("fp_fraction {} outside [0, 1]", self.fp_fraction)));
        }
        Ok(())
    }
}

pub fn validate_rate(hz: f64) -> Result<f64, SamplerError> {
    if hz.is_finite() && hz > 0.0 && hz <= MAX_SAMPLE_RATE_HZ {
        Ok(hz)
    } else {
        Err(SamplerError::InvalidConfig(format!(
            "sample rate must be within (0, {MAX_SAMPLE_RATE_HZ}] Hz, got {hz}"
        )))
    }
}

/// Resolves the sampling rate: explicit flag, then `SYNAPSE_SAMPLE_RATE`,
/// then the default.
pub fn resolve_sample_rate(flag: Option<f64>) -> Result<f64, SamplerError> {
    if let Some(hz) = flag {
        return validate_rate(hz);
    }
    match std::env::var(SAMPLE_RATE_ENV) {
        Ok(v) => {
            let hz = v
                .trim()
                .parse::<f64>()
                .map_err(|_| SamplerError::InvalidConfig(format!("{SAMPLE_RATE_ENV}=`{v}` is not a number")))?;
            validate_rate(hz)
        }
        Err(_) => Ok(DEFAULT_SAMPLE_RATE_HZ),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum WatcherState {
    Created,
    PreProcessed,
    Sampling,
    PostProcessed,
    Finalized,
}

impl WatcherState {
    fn next(self) -> Option<WatcherState> {
        use WatcherState::*;
        match self {
            Created => Some(PreProcessed),
            PreProcessed => Some(Sampling),
            Sampling => Some(PostProcessed),
            PostProcessed => Some(Finalized),
            Finalized => None,
        }
    }
}

/// Enforces the watcher state order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WatcherLifecycle(WatcherState);

impl Default for WatcherLifecycle {
    fn default() -> Self {
        WatcherLifecycle(WatcherState::Created)
    }
}

impl WatcherLifecycle {
    pub fn state(&self) -> WatcherState {
        self.0
    }

    pub fn advance(&mut self, to: WatcherState) -> Result<(), SamplerError> {
        if self.0.next() == Some(to) {
            self.0 = to;
            Ok(())
        } else {
            Err(SamplerError::Lifecycle(format!("{:?} -> {:?}", self.0, to)))
        }
    }
}

/// Raw output of one watcher.
#[derive(Debug, Clone)]
pub struct WatcherOutput {
    pub kind: ResourceKind,
    pub samples: Vec<Sample>,
    pub gaps: Vec<u64>,
    pub lifecycle: WatcherLifecycle,
    /// When the final snapshot was attempted.
    pub ended_at: Instant,
}

fn sleep_until(deadline: Instant) {
    let now = Instant::now();
    if deadline > now {
        std::thread::sleep(deadline - now);
    }
}

/// Samples one resource kind every period until `stop` is raised, then
/// takes one last snapshot at the next period boundary.
///
/// Failed snapshots leave a gap (the index is skipped and recorded); the
/// following sample's delta spans the gap. A vanished target ends the loop.
pub fn watcher_loop(
    backend: &dyn Telemetry,
    kind: ResourceKind,
    target: &ProbeTarget,
    rate_hz: f64,
    stop: &AtomicBool,
) -> WatcherOutput {
    let mut lifecycle = WatcherLifecycle::default();
    let period = Duration::from_secs_f64(1.0 / rate_hz);
    lifecycle.advance(WatcherState::PreProcessed).expect("fresh lifecycle");
    let start = Instant::now();
    let mut prev: Option<Payload> = None;
    let mut samples = Vec::new();
    let mut gaps = Vec::new();
    lifecycle.advance(WatcherState::Sampling).expect("pre-processed lifecycle");
    let mut index = 0u64;
    let ended_at = loop {
        sleep_until(start + period.mul_f64(index as f64));
        let stopping = stop.load(Ordering::Acquire);
        let attempted_at = Instant::now();
        match backend.snapshot(target, kind) {
            Ok(snap) => {
                let payload = counter_delta(&snap.counters, prev.as_ref());
                samples.push(Sample { index, timestamp_s: target.elapsed_s(snap.taken_at), payload });
                prev = Some(snap.counters);
            }
            Err(TelemetryError::TargetGone) => break attempted_at,
            Err(_) => gaps.push(index),
        }
        index += 1;
        if stopping {
            break attempted_at;
        }
    };
    lifecycle.advance(WatcherState::PostProcessed).expect("sampling lifecycle");
    WatcherOutput { kind, samples, gaps, lifecycle, ended_at }
}

/// Everything known about a run besides the watcher series.
#[derive(Debug, Clone)]
pub struct RunInfo {
    pub command: String,
    pub tags: BTreeSet<String>,
    pub system: crate::model::SystemInfo,
    pub sample_rate_hz: f64,
    pub exit_status: i32,
    pub ttc_s: f64,
    pub runtime_s: f64,
    pub hw_counters: bool,
    pub fp_fraction: f64,
    pub load_avg_1m: f64,
}

/// Merges watcher series into a profile and applies the startup-offset
/// correction from the wrapped process's own accounting: a larger
/// accounted peak raises the last memory sample's peak, and accounted CPU
/// time missing from the samples is credited to the first compute sample.
pub fn finalize(mut raw: Vec<WatcherOutput>, accounting: &Accounting, run: RunInfo) -> Result<Profile, SamplerError> {
    if let Some(w) = raw.iter().find(|w| w.lifecycle.state() != WatcherState::PostProcessed) {
        return Err(SamplerError::Lifecycle(format!("{} watcher is {:?}, not post-processed", w.kind, w.lifecycle.state())));
    }
    let spawn_offset_s = raw
        .iter()
        .filter_map(|w| w.samples.first())
        .map(|s| s.timestamp_s)
        .fold(f64::INFINITY, f64::min);
    let spawn_offset_s = if spawn_offset_s.is_finite() { spawn_offset_s } else { 0.0 };

    let mut series = Series::new();
    let mut gaps = BTreeMap::new();
    for w in &mut raw {
        w.lifecycle.advance(WatcherState::Finalized)?;
        if !w.gaps.is_empty() {
            gaps.insert(w.kind, std::mem::take(&mut w.gaps));
        }
        series.insert(w.kind, std::mem::take(&mut w.samples));
    }
    apply_accounting(&mut series, accounting, &run);

    let totals = integrate_totals(&series, run.runtime_s);
    let profile = Profile {
        version: SCHEMA_VERSION,
        command: run.command,
        tags: run.tags,
        system: run.system,
        sample_rate_hz: run.sample_rate_hz,
        spawn_offset_s,
        exit_status: run.exit_status,
        ttc_s: run.ttc_s,
        hw_counters: run.hw_counters,
        fp_fraction: run.fp_fraction,
        load_avg_1m: run.load_avg_1m,
        series,
        gaps,
        totals,
        created_at: Utc::now(),
    };
    profile.validate()?;
    Ok(profile)
}

fn apply_accounting(series: &mut Series, accounting: &Accounting, run: &RunInfo) {
    if let (Some(peak), Some(mem)) = (accounting.peak_bytes, series.get_mut(&ResourceKind::Memory)) {
        let sampled = mem.iter().filter_map(|s| s.mem()).map(|m| m.peak_bytes).max().unwrap_or(0);
        if peak > sampled {
            if let Some(Payload::Mem(m)) = mem.last_mut().map(|s| &mut s.payload) {
                m.peak_bytes = peak;
            }
        }
    }
    if let (Some(cpu_ns), Some(cpu)) = (accounting.cpu_time_ns, series.get_mut(&ResourceKind::Compute)) {
        let (sampled_ns, sampled_instr, sampled_cycles) = cpu
            .iter()
            .filter_map(|s| s.cpu())
            .fold((0u64, 0u64, 0u64), |(n, i, c), s| (n + s.cpu_time_ns, i + s.instructions, c + s.cycles_used));
        if cpu_ns > sampled_ns {
            let missing = cpu_ns - sampled_ns;
            let (extra_instr, extra_cycles) = if run.hw_counters {
                if sampled_ns == 0 {
                    (0, 0)
                } else {
                    let scale = |v: u64| (v as u128 * missing as u128 / sampled_ns as u128) as u64;
                    (scale(sampled_instr), scale(sampled_cycles))
                }
            } else {
                let c = (missing as u128 * run.system.max_freq_hz as u128 / 1_000_000_000) as u64;
                (c, c)
            };
            if let Some(Payload::Cpu(c)) = cpu.first_mut().map(|s| &mut s.payload) {
                c.cpu_time_ns += missing;
                c.instructions += extra_instr;
                c.cycles_used += extra_cycles;
            }
        }
    }
}

/// Profiles commands or arbitrary [`TargetProcess`]es with one backend.
pub struct Profiler {
    backend: Arc<dyn Telemetry>,
    config: ProfilerConfig,
}

impl Profiler {
    pub fn new(backend: Arc<dyn Telemetry>, config: ProfilerConfig) -> Result<Self, SamplerError> {
        config.validate()?;
        Ok(Profiler { backend, config })
    }

    pub fn config(&self) -> &ProfilerConfig {
        &self.config
    }

    /// Spawns `argv` and profiles it until exit.
    pub fn profile_command(&self, argv: &[String]) -> Result<Profile, SamplerError> {
        let command = argv.join(" ");
        let system = self.backend.read_system_info()?;
        let target = OsTarget::spawn(argv, self.config.quiet)
            .map_err(|e| SamplerError::Spawn { command: command.clone(), reason: e.to_string() })?;
        self.run(command, system, Box::new(target))
    }

    /// Runs `argv` without any watcher and records only its TTC and exit
    /// status. The profile has no samples and zero totals; it is the
    /// unprofiled baseline for overhead comparisons.
    pub fn time_command(&self, argv: &[String]) -> Result<Profile, SamplerError> {
        let command = argv.join(" ");
        let system = self.backend.read_system_info()?;
        let mut target = OsTarget::spawn(argv, self.config.quiet)
            .map_err(|e| SamplerError::Spawn { command: command.clone(), reason: e.to_string() })?;
        let probe = target.probe();
        let exit = target.wait_exit()?;
        let (status, _) = target.reap()?;
        let ttc_s = probe.elapsed_s(exit.exited_at);
        let run = RunInfo {
            command,
            tags: self.config.tags.clone(),
            system,
            sample_rate_hz: self.config.sample_rate_hz,
            exit_status: status,
            ttc_s,
            runtime_s: ttc_s,
            hw_counters: false,
            fp_fraction: self.config.fp_fraction,
            load_avg_1m: self.backend.load_average().unwrap_or(0.0),
        };
        finalize(Vec::new(), &Accounting::default(), run)
    }

    pub fn profile_target(&self, command: &str, target: Box<dyn TargetProcess>) -> Result<Profile, SamplerError> {
        let system = self.backend.read_system_info()?;
        self.run(command.to_string(), system, target)
    }

    fn run(
        &self,
        command: String,
        system: crate::model::SystemInfo,
        mut target: Box<dyn TargetProcess>,
    ) -> Result<Profile, SamplerError> {
        let probe = target.probe();
        let backend = self.backend.as_ref();
        if let Err(e) = backend.attach(&probe) {
            let _ = target.wait_exit();
            let _ = target.reap();
            return Err(e.into());
        }
        let load_avg_1m = backend.load_average().unwrap_or(0.0);
        let stop = AtomicBool::new(false);
        let rate = self.config.sample_rate_hz;

        let (exit, outputs) = std::thread::scope(|s| {
            let handles: Vec<_> = self
                .config
                .watchers_enabled
                .iter()
                .map(|&kind| {
                    let stop = &stop;
                    std::thread::Builder::new()
                        .name(format!("watch-{kind}"))
                        .spawn_scoped(s, move || watcher_loop(backend, kind, &probe, rate, stop))
                        .expect("spawn watcher thread")
                })
                .collect();
            let exit = target.wait_exit();
            stop.store(true, Ordering::Release);
            let outputs: Vec<WatcherOutput> =
                handles.into_iter().map(|h| h.join().expect("watcher thread panicked")).collect();
            (exit, outputs)
        });
        let hw_counters = backend.hw_counters(&probe);
        let exit = match exit {
            Ok(e) => e,
            Err(e) => {
                backend.detach(&probe);
                return Err(e.into());
            }
        };
        let (status, accounting) = target.reap()?;
        backend.detach(&probe);

        let ended_at = outputs.iter().map(|w| w.ended_at).max().unwrap_or(exit.exited_at);
        let run = RunInfo {
            command,
            tags: self.config.tags.clone(),
            system,
            sample_rate_hz: rate,
            exit_status: status,
            ttc_s: probe.elapsed_s(exit.exited_at),
            runtime_s: probe.elapsed_s(ended_at.max(exit.exited_at)),
            hw_counters,
            fp_fraction: self.config.fp_fraction,
            load_avg_1m,
        };
        finalize(outputs, &accounting, run)
    }
}
