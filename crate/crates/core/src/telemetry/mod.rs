//! Counter backends.
//!
//! A [`Telemetry`] backend turns a live target into cumulative counter
//! snapshots. [`OsTelemetry`] reads the host's process accounting;
//! [`SyntheticTelemetry`] replays a scripted trajectory and is used as an
//! exact oracle for the sampler.

mod os;
mod perf;
mod synthetic;

use std::time::Instant;

use thiserror::Error;

use crate::model::{CpuSample, IoSample, MemSample, Payload, ResourceKind, SystemInfo};

pub use os::{OsTarget, OsTelemetry};
pub use synthetic::{ScriptedTrajectory, SyntheticTarget, SyntheticTelemetry};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TelemetryError {
    /// The target exited and its counters are gone. Normal end of sampling.
    #[error("target process vanished")]
    TargetGone,
    #[error("backend unavailable: {0}")]
    Unavailable(String),
    #[error("no counters for resource kind {0}")]
    UnsupportedKind(ResourceKind),
}

/// Handle on a process spawned by this run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProbeTarget {
    pub pid: i32,
    pub spawned_at: Instant,
}

impl ProbeTarget {
    pub fn new(pid: i32, spawned_at: Instant) -> Self {
        ProbeTarget { pid, spawned_at }
    }

    /// The calling process, used for self-measurement.
    pub fn current() -> Self {
        ProbeTarget { pid: std::process::id() as i32, spawned_at: Instant::now() }
    }

    pub fn elapsed_s(&self, at: Instant) -> f64 {
        at.saturating_duration_since(self.spawned_at).as_secs_f64()
    }
}

/// Cumulative counters at one instant. Uses the sample payload types with
/// cumulative-since-spawn semantics; gauges (peak, resident, threads) are
/// instantaneous.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CounterSnapshot {
    pub taken_at: Instant,
    pub counters: Payload,
}

impl CounterSnapshot {
    pub fn kind(&self) -> ResourceKind {
        self.counters.kind()
    }
}

fn sub_opt(now: Option<u64>, prev: Option<u64>) -> Option<u64> {
    match (now, prev) {
        (Some(a), Some(b)) => Some(a.saturating_sub(b)),
        _ => None,
    }
}

/// Per-period delta between two cumulative readings of the same kind.
/// `prev = None` means "since spawn", when every counter was zero.
pub fn counter_delta(now: &Payload, prev: Option<&Payload>) -> Payload {
    match (now, prev) {
        (Payload::Cpu(c), Some(Payload::Cpu(p))) => Payload::Cpu(CpuSample {
            instructions: c.instructions.saturating_sub(p.instructions),
            cycles_used: c.cycles_used.saturating_sub(p.cycles_used),
            cycles_stalled_frontend: sub_opt(c.cycles_stalled_frontend, p.cycles_stalled_frontend),
            cycles_stalled_backend: sub_opt(c.cycles_stalled_backend, p.cycles_stalled_backend),
            cpu_time_ns: c.cpu_time_ns.saturating_sub(p.cpu_time_ns),
            threads: c.threads,
        }),
        (Payload::Mem(m), Some(Payload::Mem(p))) => Payload::Mem(MemSample {
            peak_bytes: m.peak_bytes.max(p.peak_bytes),
            resident_bytes: m.resident_bytes,
            allocated_bytes: m.allocated_bytes.saturating_sub(p.allocated_bytes),
            freed_bytes: m.freed_bytes.saturating_sub(p.freed_bytes),
        }),
        (Payload::Io(i), Some(Payload::Io(p))) => Payload::Io(IoSample {
            bytes_read: i.bytes_read.saturating_sub(p.bytes_read),
            bytes_written: i.bytes_written.saturating_sub(p.bytes_written),
        }),
        (now, _) => *now,
    }
}

/// Resource accounting the OS keeps for a reaped child (`wait4` rusage).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Accounting {
    pub peak_bytes: Option<u64>,
    pub cpu_time_ns: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExitInfo {
    pub exited_at: Instant,
    pub status: i32,
}

/// Process side of a profiling run: something that runs, exits, and leaves
/// accounting behind.
pub trait TargetProcess: Send {
    fn probe(&self) -> ProbeTarget;

    /// Blocks until the target exits. The target's counters stay readable
    /// until [`TargetProcess::reap`].
    fn wait_exit(&mut self) -> std::io::Result<ExitInfo>;

    /// Releases the target and returns its exit status and accounting.
    fn reap(&mut self) -> std::io::Result<(i32, Accounting)>;
}

pub trait Telemetry: Send + Sync {
    fn read_system_info(&self) -> Result<SystemInfo, TelemetryError>;

    /// Called once per target before sampling starts.
    fn attach(&self, _target: &ProbeTarget) -> Result<(), TelemetryError> {
        Ok(())
    }

    /// Releases per-target state after sampling has finished.
    fn detach(&self, _target: &ProbeTarget) {}

    /// True when cycle and instruction counts for `target` come from
    /// hardware counters rather than CPU-time estimates.
    fn hw_counters(&self, _target: &ProbeTarget) -> bool {
        false
    }

    fn snapshot(&self, target: &ProbeTarget, kind: ResourceKind) -> Result<CounterSnapshot, TelemetryError>;

    /// One-minute system load average, when the backend knows it.
    fn load_average(&self) -> Option<f64> {
        None
    }
}
