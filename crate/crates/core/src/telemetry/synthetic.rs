use std::collections::BTreeMap;
use std::io;
use std::sync::Arc;
use std::time::{Duration, Instant};

use super::{Accounting, CounterSnapshot, ExitInfo, ProbeTarget, TargetProcess, Telemetry, TelemetryError};
use crate::model::{CpuSample, IoSample, MemSample, ModelError, Payload, ResourceKind, SystemInfo};

/// Cumulative counter breakpoints per resource kind, linearly interpolated
/// in between and clamped to the last breakpoint afterwards.
#[derive(Debug, Clone, PartialEq)]
pub struct ScriptedTrajectory {
    pub system: SystemInfo,
    pub exit_status: i32,
    pub hw_counters: bool,
    breakpoints: BTreeMap<ResourceKind, Vec<(f64, Payload)>>,
}

fn lerp(a: u64, b: u64, frac: f64) -> u64 {
    if b >= a {
        a + ((b - a) as f64 * frac).floor() as u64
    } else {
        a - ((a - b) as f64 * frac).floor() as u64
    }
}

fn lerp_opt(a: Option<u64>, b: Option<u64>, frac: f64) -> Option<u64> {
    Some(lerp(a?, b?, frac))
}

fn lerp_payload(a: &Payload, b: &Payload, frac: f64) -> Payload {
    match (a, b) {
        (Payload::Cpu(a), Payload::Cpu(b)) => Payload::Cpu(CpuSample {
            instructions: lerp(a.instructions, b.instructions, frac),
            cycles_used: lerp(a.cycles_used, b.cycles_used, frac),
            cycles_stalled_frontend: lerp_opt(a.cycles_stalled_frontend, b.cycles_stalled_frontend, frac),
            cycles_stalled_backend: lerp_opt(a.cycles_stalled_backend, b.cycles_stalled_backend, frac),
            cpu_time_ns: lerp(a.cpu_time_ns, b.cpu_time_ns, frac),
            threads: if frac < 1.0 { a.threads } else { b.threads },
        }),
        (Payload::Mem(a), Payload::Mem(b)) => Payload::Mem(MemSample {
            peak_bytes: lerp(a.peak_bytes, b.peak_bytes, frac),
            resident_bytes: lerp(a.resident_bytes, b.resident_bytes, frac),
            allocated_bytes: lerp(a.allocated_bytes, b.allocated_bytes, frac),
            freed_bytes: lerp(a.freed_bytes, b.freed_bytes, frac),
        }),
        (Payload::Io(a), Payload::Io(b)) => Payload::Io(IoSample {
            bytes_read: lerp(a.bytes_read, b.bytes_read, frac),
            bytes_written: lerp(a.bytes_written, b.bytes_written, frac),
        }),
        _ => *b,
    }
}

fn cumulative_le(a: &Payload, b: &Payload) -> bool {
    let le_opt = |x: Option<u64>, y: Option<u64>| match (x, y) {
        (Some(x), Some(y)) => x <= y,
        (None, None) => true,
        _ => false,
    };
    match (a, b) {
        (Payload::Cpu(a), Payload::Cpu(b)) => {
            a.instructions <= b.instructions
                && a.cycles_used <= b.cycles_used
                && a.cpu_time_ns <= b.cpu_time_ns
                && le_opt(a.cycles_stalled_frontend, b.cycles_stalled_frontend)
                && le_opt(a.cycles_stalled_backend, b.cycles_stalled_backend)
        }
        (Payload::Mem(a), Payload::Mem(b)) => {
            a.peak_bytes <= b.peak_bytes && a.allocated_bytes <= b.allocated_bytes && a.freed_bytes <= b.freed_bytes
        }
        (Payload::Io(a), Payload::Io(b)) => a.bytes_read <= b.bytes_read && a.bytes_written <= b.bytes_written,
        _ => false,
    }
}

impl ScriptedTrajectory {
    pub fn new(system: SystemInfo) -> Self {
        ScriptedTrajectory { system, exit_status: 0, hw_counters: true, breakpoints: BTreeMap::new() }
    }

    /// Adds the breakpoints of one kind. Times must be non-decreasing,
    /// payloads must match `kind`, and cumulative fields must not decrease.
    pub fn with_breakpoints(mut self, kind: ResourceKind, points: Vec<(f64, Payload)>) -> Result<Self, ModelError> {
        for (i, (t, p)) in points.iter().enumerate() {
            if p.kind() != kind {
                return Err(ModelError::InvalidArgument(format!("{} breakpoint in {kind} trajectory", p.kind())));
            }
            if !(*t >= 0.0) {
                return Err(ModelError::InvalidArgument(format!("negative breakpoint time {t}")));
            }
            if i > 0 {
                let (pt, pp) = &points[i - 1];
                if t < pt {
                    return Err(ModelError::InvalidArgument("breakpoints not time-ordered".into()));
                }
                if !cumulative_le(pp, p) {
                    return Err(ModelError::InvalidArgument(format!("cumulative {kind} counter decreases at t={t}")));
                }
            }
        }
        self.breakpoints.insert(kind, points);
        Ok(self)
    }

    pub fn with_exit_status(mut self, status: i32) -> Self {
        self.exit_status = status;
        self
    }

    /// Time of the last breakpoint over all kinds; the target exits then.
    pub fn duration_s(&self) -> f64 {
        self.breakpoints.values().filter_map(|v| v.last()).map(|(t, _)| *t).fold(0.0, f64::max)
    }

    pub fn kinds(&self) -> impl Iterator<Item = ResourceKind> + '_ {
        self.breakpoints.keys().copied()
    }

    pub fn final_values(&self, kind: ResourceKind) -> Option<Payload> {
        self.breakpoints.get(&kind)?.last().map(|(_, p)| *p)
    }

    pub fn value_at(&self, kind: ResourceKind, t: f64) -> Option<Payload> {
        let points = self.breakpoints.get(&kind)?;
        let first = points.first()?;
        if t <= first.0 {
            // counters are zero at spawn, ramping to the first breakpoint
            return Some(if first.0 > 0.0 { lerp_payload(&zero_like(&first.1), &first.1, t / first.0) } else { first.1 });
        }
        for w in points.windows(2) {
            let ((t0, a), (t1, b)) = (&w[0], &w[1]);
            if t <= *t1 {
                let frac = if t1 > t0 { (t - t0) / (t1 - t0) } else { 1.0 };
                return Some(lerp_payload(a, b, frac));
            }
        }
        points.last().map(|(_, p)| *p)
    }

    fn accounting(&self) -> Accounting {
        let peak = match self.final_values(ResourceKind::Memory) {
            Some(Payload::Mem(m)) => Some(m.peak_bytes),
            _ => None,
        };
        let cpu = match self.final_values(ResourceKind::Compute) {
            Some(Payload::Cpu(c)) => Some(c.cpu_time_ns),
            _ => None,
        };
        Accounting { peak_bytes: peak, cpu_time_ns: cpu }
    }
}

fn zero_like(p: &Payload) -> Payload {
    match p {
        Payload::Cpu(c) => Payload::Cpu(CpuSample {
            cycles_stalled_frontend: c.cycles_stalled_frontend.map(|_| 0),
            cycles_stalled_backend: c.cycles_stalled_backend.map(|_| 0),
            threads: c.threads,
            ..Default::default()
        }),
        Payload::Mem(_) => Payload::Mem(MemSample::default()),
        Payload::Io(_) => Payload::Io(IoSample::default()),
    }
}

/// Backend that answers from a [`ScriptedTrajectory`] using wall time since
/// the target's spawn.
#[derive(Debug, Clone)]
pub struct SyntheticTelemetry {
    script: Arc<ScriptedTrajectory>,
    outages: Vec<(ResourceKind, f64, f64)>,
}

impl SyntheticTelemetry {
    pub fn new(script: Arc<ScriptedTrajectory>) -> Self {
        SyntheticTelemetry { script, outages: Vec::new() }
    }

    /// Makes `kind` unavailable for snapshots taken within `[from_s, to_s)`.
    pub fn with_outage(mut self, kind: ResourceKind, from_s: f64, to_s: f64) -> Self {
        self.outages.push((kind, from_s, to_s));
        self
    }

    pub fn script(&self) -> &ScriptedTrajectory {
        &self.script
    }

    pub fn snapshot_at(&self, kind: ResourceKind, t: f64) -> Result<Payload, TelemetryError> {
        if self.outages.iter().any(|&(k, a, b)| k == kind && t >= a && t < b) {
            return Err(TelemetryError::Unavailable(format!("scripted {kind} outage")));
        }
        self.script.value_at(kind, t).ok_or(TelemetryError::UnsupportedKind(kind))
    }
}

impl Telemetry for SyntheticTelemetry {
    fn read_system_info(&self) -> Result<SystemInfo, TelemetryError> {
        Ok(self.script.system.clone())
    }

    fn hw_counters(&self, _target: &ProbeTarget) -> bool {
        self.script.hw_counters
    }

    fn snapshot(&self, target: &ProbeTarget, kind: ResourceKind) -> Result<CounterSnapshot, TelemetryError> {
        let taken_at = Instant::now();
        let counters = self.snapshot_at(kind, target.elapsed_s(taken_at))?;
        Ok(CounterSnapshot { taken_at, counters })
    }

    fn load_average(&self) -> Option<f64> {
        Some(0.0)
    }
}

/// A stand-in process that "runs" for the trajectory's duration.
pub struct SyntheticTarget {
    script: Arc<ScriptedTrajectory>,
    probe: ProbeTarget,
}

impl SyntheticTarget {
    pub fn start(script: Arc<ScriptedTrajectory>) -> Self {
        SyntheticTarget { script, probe: ProbeTarget::new(0, Instant::now()) }
    }
}

impl TargetProcess for SyntheticTarget {
    fn probe(&self) -> ProbeTarget {
        self.probe
    }

    fn wait_exit(&mut self) -> io::Result<ExitInfo> {
        let end = self.probe.spawned_at + Duration::from_secs_f64(self.script.duration_s());
        let now = Instant::now();
        if end > now {
            std::thread::sleep(end - now);
        }
        Ok(ExitInfo { exited_at: Instant::now(), status: self.script.exit_status })
    }

    fn reap(&mut self) -> io::Result<(i32, Accounting)> {
        Ok((self.script.exit_status, self.script.accounting()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::test_system;

    const MB: u64 = 1 << 20;

    fn writes(points: &[(f64, u64)]) -> Vec<(f64, Payload)> {
        points.iter().map(|&(t, w)| (t, Payload::Io(IoSample { bytes_read: 0, bytes_written: w }))).collect()
    }

    #[test]
    fn system_info_passthrough() {
        let mut sys = test_system();
        sys.core_count = 4;
        sys.max_freq_hz = 2_000_000_000;
        sys.total_memory_bytes = 8_000_000_000;
        let t = SyntheticTelemetry::new(Arc::new(ScriptedTrajectory::new(sys.clone())));
        assert_eq!(t.read_system_info().unwrap(), sys);
    }

    #[test]
    fn interpolates_and_clamps() {
        let script = ScriptedTrajectory::new(test_system())
            .with_breakpoints(ResourceKind::Storage, writes(&[(0.0, 0), (10.0, 10 * MB)]))
            .unwrap();
        let t = SyntheticTelemetry::new(Arc::new(script));
        assert_eq!(t.snapshot_at(ResourceKind::Storage, 5.0).unwrap(), writes(&[(0.0, 5 * MB)])[0].1);
        assert_eq!(t.snapshot_at(ResourceKind::Storage, 25.0).unwrap(), writes(&[(0.0, 10 * MB)])[0].1);
        assert_eq!(t.snapshot_at(ResourceKind::Storage, 0.0).unwrap(), writes(&[(0.0, 0)])[0].1);
        assert!(matches!(t.snapshot_at(ResourceKind::Compute, 1.0), Err(TelemetryError::UnsupportedKind(_))));
    }

    #[test]
    fn ramps_from_zero_before_first_breakpoint() {
        let script = ScriptedTrajectory::new(test_system())
            .with_breakpoints(ResourceKind::Storage, writes(&[(2.0, 4 * MB)]))
            .unwrap();
        assert_eq!(script.value_at(ResourceKind::Storage, 1.0).unwrap(), writes(&[(0.0, 2 * MB)])[0].1);
    }

    #[test]
    fn successive_cpu_snapshots_are_monotone() {
        let cpu = |t: f64, i: u64| (t, Payload::Cpu(CpuSample { instructions: i, cycles_used: i, ..Default::default() }));
        let script = ScriptedTrajectory::new(test_system())
            .with_breakpoints(ResourceKind::Compute, vec![cpu(0.0, 0), cpu(1.0, 1000), cpu(3.0, 1001)])
            .unwrap();
        let mut last = 0;
        for k in 0..40 {
            match script.value_at(ResourceKind::Compute, k as f64 * 0.1).unwrap() {
                Payload::Cpu(c) => {
                    assert!(c.instructions >= last);
                    last = c.instructions;
                }
                _ => unreachable!(),
            }
        }
        assert_eq!(last, 1001);
    }

    #[test]
    fn rejects_bad_breakpoints() {
        let s = ScriptedTrajectory::new(test_system());
        assert!(s.clone().with_breakpoints(ResourceKind::Storage, writes(&[(1.0, 5), (0.5, 6)])).is_err());
        assert!(s.clone().with_breakpoints(ResourceKind::Storage, writes(&[(0.0, 5), (1.0, 4)])).is_err());
        assert!(s.with_breakpoints(ResourceKind::Compute, writes(&[(0.0, 5)])).is_err());
    }

    #[test]
    fn outage_window() {
        let script = ScriptedTrajectory::new(test_system())
            .with_breakpoints(ResourceKind::Storage, writes(&[(0.0, 0), (4.0, 4)]))
            .unwrap();
        let t = SyntheticTelemetry::new(Arc::new(script)).with_outage(ResourceKind::Storage, 1.0, 2.0);
        assert!(t.snapshot_at(ResourceKind::Storage, 0.5).is_ok());
        assert!(matches!(t.snapshot_at(ResourceKind::Storage, 1.5), Err(TelemetryError::Unavailable(_))));
        assert!(t.snapshot_at(ResourceKind::Storage, 2.0).is_ok());
    }
}
