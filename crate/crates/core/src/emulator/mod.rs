//! Replays a profile by driving resource-consuming atoms.
//!
//! A profile becomes an [`EmulationPlan`]: one [`SampleGroup`] per profiled
//! sample index, in index order, with all timing dropped. [`Emulator`] runs
//! the groups one after another. Within a group every atom starts at once
//! on its own worker and the group ends when the last atom finishes, so
//! the profiled order across resource kinds is kept without replaying
//! timestamps.

mod atoms;
mod kernel;
mod load;

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::{self, ExecMode, Task};
use crate::model::{
    integrate_totals, CpuSample, IoSample, MemSample, Payload, Profile, ResourceKind, Sample, Series, SystemInfo,
    SCHEMA_VERSION,
};
use crate::telemetry::Telemetry;

pub use atoms::{
    block_ops, compute_atom, memory_atom, storage_atom, AtomError, Consumed, MemoryPool, StorageScratch,
    READ_SEED_BYTES, WRITE_WRAP_BYTES,
};
pub use kernel::{
    calibrate, thread_user_time_ns, Calibration, CalibrationSource, Kernel, DUTY_QUANTUM, KERNEL_DIM,
    STATIC_INSTRUCTIONS_PER_ITERATION,
};
pub use load::{background_load, LoadHandle, LoadSpec, LoadStats};

pub const DEFAULT_BLOCK_BYTES: u64 = 1 << 20;
/// Tag added to profiles that describe an emulation run.
pub const EMULATED_TAG: &str = "emulated";
pub const DEFAULT_CALIBRATION: Duration = Duration::from_millis(100);

type AtomOutcome = (ResourceKind, f64, f64, Result<Consumed, AtomError>);

#[derive(Debug, Error)]
pub enum EmulationError {
    #[error("profile has nothing to emulate")]
    EmptyPlan,
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error("cannot prepare scratch space: {0}")]
    Scratch(AtomError),
    #[error("{kind} atom failed in sample group {group}: {source}")]
    AtomFailed {
        group: u64,
        kind: ResourceKind,
        source: AtomError,
        partial: Box<EmulationReport>,
    },
}

/// One quantity of one resource kind to consume.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum AtomTask {
    Compute { instructions: u64, efficiency_target: f64 },
    Memory { alloc_bytes: u64, free_bytes: u64, block_bytes: u64 },
    Storage { read_bytes: u64, write_bytes: u64, block_bytes: u64 },
}

impl AtomTask {
    pub fn kind(&self) -> ResourceKind {
        match self {
            AtomTask::Compute { .. } => ResourceKind::Compute,
            AtomTask::Memory { .. } => ResourceKind::Memory,
            AtomTask::Storage { .. } => ResourceKind::Storage,
        }
    }

    fn validate(&self) -> Result<(), String> {
        match *self {
            AtomTask::Compute { efficiency_target: e, .. } if !(e > 0.0 && e <= 1.0) => {
                Err(format!("efficiency target {e} outside (0, 1]"))
            }
            AtomTask::Memory { block_bytes: 0, .. } | AtomTask::Storage { block_bytes: 0, .. } => {
                Err("block size must be positive".into())
            }
            _ => Ok(()),
        }
    }

    fn planned(&self) -> Consumed {
        match *self {
            AtomTask::Compute { instructions, .. } => Consumed { instructions, ..Default::default() },
            AtomTask::Memory { alloc_bytes, free_bytes, .. } => {
                Consumed { allocated_bytes: alloc_bytes, freed_bytes: free_bytes, ..Default::default() }
            }
            AtomTask::Storage { read_bytes, write_bytes, .. } => {
                Consumed { bytes_read: read_bytes, bytes_written: write_bytes, ..Default::default() }
            }
        }
    }
}

/// Tasks derived from one profiled sample index; at most one per kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleGroup {
    pub index: u64,
    pub tasks: Vec<AtomTask>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmulationPlan {
    groups: Vec<SampleGroup>,
}

impl EmulationPlan {
    /// Checks ordering, one task per kind per group, and task parameters.
    pub fn new(groups: Vec<SampleGroup>) -> Result<Self, EmulationError> {
        if groups.is_empty() {
            return Err(EmulationError::EmptyPlan);
        }
        for w in groups.windows(2) {
            if w[1].index <= w[0].index {
                return Err(EmulationError::InvalidPlan(format!("group {} follows {}", w[1].index, w[0].index)));
            }
        }
        for g in &groups {
            let mut seen = Vec::new();
            for t in &g.tasks {
                if seen.contains(&t.kind()) {
                    return Err(EmulationError::InvalidPlan(format!("group {} has two {} tasks", g.index, t.kind())));
                }
                seen.push(t.kind());
                t.validate().map_err(|e| EmulationError::InvalidPlan(format!("group {}: {e}", g.index)))?;
            }
        }
        Ok(EmulationPlan { groups })
    }

    pub fn groups(&self) -> &[SampleGroup] {
        &self.groups
    }

    pub fn task_count(&self) -> usize {
        self.groups.iter().map(|g| g.tasks.len()).sum()
    }

    pub fn totals(&self) -> Consumed {
        let mut t = Consumed::default();
        for task in self.groups.iter().flat_map(|g| &g.tasks) {
            add(&mut t, &task.planned());
        }
        t
    }

    fn max_storage_block(&self) -> Option<u64> {
        self.groups
            .iter()
            .flat_map(|g| &g.tasks)
            .filter_map(|t| match t {
                AtomTask::Storage { block_bytes, .. } => Some(*block_bytes),
                _ => None,
            })
            .max()
    }
}

fn add(a: &mut Consumed, b: &Consumed) {
    a.instructions += b.instructions;
    a.cpu_time_ns += b.cpu_time_ns;
    a.allocated_bytes += b.allocated_bytes;
    a.freed_bytes += b.freed_bytes;
    a.bytes_read += b.bytes_read;
    a.bytes_written += b.bytes_written;
    a.ops += b.ops;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tuning {
    pub memory_block_bytes: u64,
    pub storage_block_bytes: u64,
    /// Replaces every per-sample efficiency when set.
    pub efficiency_override: Option<f64>,
}

impl Default for Tuning {
    fn default() -> Self {
        Tuning {
            memory_block_bytes: DEFAULT_BLOCK_BYTES,
            storage_block_bytes: DEFAULT_BLOCK_BYTES,
            efficiency_override: None,
        }
    }
}

impl Tuning {
    pub fn with_block_size(mut self, bytes: u64) -> Self {
        self.memory_block_bytes = bytes;
        self.storage_block_bytes = bytes;
        self
    }
}

/// Builds the replay plan for `profile`.
///
/// Only emulatable quantities are carried over: instructions, bytes
/// allocated and freed, bytes read and written. Each compute task uses its
/// sample's efficiency when stall counters were recorded, else the
/// run-level efficiency, else 1.0.
pub fn plan_from_profile(profile: &Profile, tuning: &Tuning) -> Result<EmulationPlan, EmulationError> {
    plan_from_profile_with(ExecMode::default(), profile, tuning)
}

pub fn plan_from_profile_with(mode: ExecMode, profile: &Profile, tuning: &Tuning) -> Result<EmulationPlan, EmulationError> {
    if tuning.memory_block_bytes == 0 || tuning.storage_block_bytes == 0 {
        return Err(EmulationError::InvalidPlan("block size must be positive".into()));
    }
    let by_index = |kind: ResourceKind| -> HashMap<u64, &Sample> {
        profile.series.get(&kind).map(|s| s.iter().map(|x| (x.index, x)).collect()).unwrap_or_default()
    };
    let (cpu, mem, io) = (by_index(ResourceKind::Compute), by_index(ResourceKind::Memory), by_index(ResourceKind::Storage));
    let run_efficiency = match (profile.totals.cycles_stalled_frontend, profile.totals.cycles_stalled_backend) {
        (Some(fe), Some(be)) if profile.totals.cycles_used > 0 => {
            crate::model::derive_cpu_efficiency(profile.totals.cycles_used, fe, be)
        }
        _ => 1.0,
    };
    let indices: Vec<u64> = profile.merged_indices().into_iter().collect();
    let groups = exec::map_with(mode, &indices, |&index| {
        let mut tasks = Vec::with_capacity(3);
        if let Some(c) = cpu.get(&index).and_then(|s| s.cpu()).filter(|c| c.instructions > 0) {
            let eff = tuning.efficiency_override.or(c.efficiency().filter(|_| c.cycles_used > 0)).unwrap_or(run_efficiency);
            tasks.push(AtomTask::Compute { instructions: c.instructions, efficiency_target: eff.clamp(0.01, 1.0) });
        }
        if let Some(m) = mem.get(&index).and_then(|s| s.mem()).filter(|m| m.allocated_bytes > 0 || m.freed_bytes > 0) {
            tasks.push(AtomTask::Memory {
                alloc_bytes: m.allocated_bytes,
                free_bytes: m.freed_bytes,
                block_bytes: tuning.memory_block_bytes,
            });
        }
        if let Some(i) = io.get(&index).and_then(|s| s.io()).filter(|i| i.bytes_read > 0 || i.bytes_written > 0) {
            tasks.push(AtomTask::Storage {
                read_bytes: i.bytes_read,
                write_bytes: i.bytes_written,
                block_bytes: tuning.storage_block_bytes,
            });
        }
        SampleGroup { index, tasks }
    });
    if groups.iter().all(|g| g.tasks.is_empty()) {
        return Err(EmulationError::EmptyPlan);
    }
    EmulationPlan::new(groups)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AtomRecord {
    pub kind: ResourceKind,
    pub start_s: f64,
    pub end_s: f64,
    pub consumed: Consumed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRecord {
    pub index: u64,
    pub start_s: f64,
    pub end_s: f64,
    pub atoms: Vec<AtomRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmulationReport {
    /// Plan execution time, first group start to last group end.
    pub ttc_s: f64,
    pub groups: Vec<GroupRecord>,
    pub planned: Consumed,
    /// Quantities the atoms report having consumed.
    pub self_check: Consumed,
    /// Relative difference of self-check against plan, per planned metric.
    pub deviations: BTreeMap<String, f64>,
    pub calibration: Calibration,
    pub storage_block_bytes: Option<u64>,
}

impl EmulationReport {
    /// Groups are totally ordered and no atom of a group starts before the
    /// previous group has ended.
    pub fn barrier_holds(&self) -> bool {
        let inner = self.groups.iter().all(|g| {
            g.start_s <= g.end_s && g.atoms.iter().all(|a| a.start_s >= g.start_s && a.end_s <= g.end_s && a.start_s <= a.end_s)
        });
        let ordered = self.groups.windows(2).all(|w| w[0].end_s <= w[1].start_s);
        inner && ordered
    }

    /// The emulation run as a profile, one sample per group and kind at the
    /// group's end time, built from the atoms' self-check. Tagged with the
    /// original tags plus [`EMULATED_TAG`]. Memory samples describe the
    /// emulator's own pool, not its whole footprint.
    pub fn to_profile(&self, original: &Profile, system: SystemInfo) -> Profile {
        let mut series = Series::new();
        let (mut held, mut peak) = (0u64, 0u64);
        for g in &self.groups {
            for a in &g.atoms {
                let c = &a.consumed;
                let payload = match a.kind {
                    ResourceKind::Compute => Payload::Cpu(CpuSample {
                        instructions: c.instructions,
                        cycles_used: c.instructions,
                        cpu_time_ns: c.cpu_time_ns,
                        threads: 1,
                        ..Default::default()
                    }),
                    ResourceKind::Memory => {
                        // the atom allocates before it frees
                        peak = peak.max(held + c.allocated_bytes);
                        held = (held + c.allocated_bytes).saturating_sub(c.freed_bytes);
                        Payload::Mem(MemSample {
                            peak_bytes: peak,
                            resident_bytes: held,
                            allocated_bytes: c.allocated_bytes,
                            freed_bytes: c.freed_bytes,
                        })
                    }
                    _ => Payload::Io(IoSample { bytes_read: c.bytes_read, bytes_written: c.bytes_written }),
                };
                let list = series.entry(a.kind).or_default();
                let mut t = g.end_s;
                if let Some(last) = list.last() {
                    if t <= last.timestamp_s {
                        t = last.timestamp_s.next_up();
                    }
                }
                list.push(Sample { index: g.index, timestamp_s: t, payload });
            }
        }
        let totals = integrate_totals(&series, self.ttc_s);
        let mut tags = original.tags.clone();
        tags.insert(EMULATED_TAG.to_string());
        Profile {
            version: SCHEMA_VERSION,
            command: original.command.clone(),
            tags,
            system,
            sample_rate_hz: original.sample_rate_hz,
            spawn_offset_s: 0.0,
            exit_status: 0,
            ttc_s: self.ttc_s,
            hw_counters: false,
            fp_fraction: original.fp_fraction,
            load_avg_1m: 0.0,
            series,
            gaps: BTreeMap::new(),
            totals,
            created_at: chrono::Utc::now(),
        }
    }

    fn finish(&mut self) {
        self.ttc_s = self.groups.last().map_or(0.0, |g| g.end_s);
        let pairs = [
            ("instructions", self.planned.instructions, self.self_check.instructions),
            ("allocated_bytes", self.planned.allocated_bytes, self.self_check.allocated_bytes),
            ("freed_bytes", self.planned.freed_bytes, self.self_check.freed_bytes),
            ("bytes_read", self.planned.bytes_read, self.self_check.bytes_read),
            ("bytes_written", self.planned.bytes_written, self.self_check.bytes_written),
        ];
        self.deviations = pairs
            .into_iter()
            .filter(|(_, p, _)| *p > 0)
            .map(|(k, p, m)| (k.to_string(), (m as f64 - p as f64) / p as f64))
            .collect();
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmulatorConfig {
    pub scratch_dir: PathBuf,
    pub exec_mode: ExecMode,
    pub calibration_time: Duration,
}

impl Default for EmulatorConfig {
    fn default() -> Self {
        EmulatorConfig {
            scratch_dir: std::env::temp_dir(),
            exec_mode: ExecMode::default(),
            calibration_time: DEFAULT_CALIBRATION,
        }
    }
}

pub struct Emulator {
    config: EmulatorConfig,
    calibration: Calibration,
}

impl Emulator {
    /// Calibrates the compute kernel on this host through `telemetry`.
    pub fn new(config: EmulatorConfig, telemetry: &dyn Telemetry) -> Self {
        let calibration = calibrate(telemetry, config.calibration_time);
        Emulator { config, calibration }
    }

    pub fn with_calibration(config: EmulatorConfig, calibration: Calibration) -> Self {
        Emulator { config, calibration }
    }

    pub fn calibration(&self) -> &Calibration {
        &self.calibration
    }

    pub fn emulate(&self, plan: &EmulationPlan) -> Result<EmulationReport, EmulationError> {
        let storage_block_bytes = plan.max_storage_block();
        let mut scratch = match storage_block_bytes {
            Some(b) => Some(StorageScratch::create(&self.config.scratch_dir, b).map_err(EmulationError::Scratch)?),
            None => None,
        };
        let mut pool = MemoryPool::new();
        let mut report = EmulationReport {
            ttc_s: 0.0,
            groups: Vec::with_capacity(plan.groups.len()),
            planned: plan.totals(),
            self_check: Consumed::default(),
            deviations: BTreeMap::new(),
            calibration: self.calibration,
            storage_block_bytes,
        };
        let t0 = Instant::now();
        let since = |t: Instant| t.duration_since(t0).as_secs_f64();

        for group in &plan.groups {
            let results: Mutex<Vec<AtomOutcome>> = Mutex::new(Vec::new());
            let mut pool_slot = Some(&mut pool);
            let mut scratch_slot = scratch.as_mut();
            let start = Instant::now();
            let tasks: Vec<Task> = group
                .tasks
                .iter()
                .map(|&task| {
                    let results = &results;
                    let cal = &self.calibration;
                    let run: Box<dyn FnOnce() -> Result<Consumed, AtomError> + Send> = match task {
                        AtomTask::Compute { instructions, efficiency_target } => {
                            Box::new(move || Ok(compute_atom(instructions, efficiency_target, cal)))
                        }
                        AtomTask::Memory { alloc_bytes, free_bytes, block_bytes } => {
                            let pool = pool_slot.take().expect("one memory task per group");
                            Box::new(move || memory_atom(pool, alloc_bytes, free_bytes, block_bytes))
                        }
                        AtomTask::Storage { read_bytes, write_bytes, block_bytes } => {
                            let scratch = scratch_slot.take().expect("scratch exists for storage tasks");
                            Box::new(move || storage_atom(scratch, read_bytes, write_bytes, block_bytes))
                        }
                    };
                    Box::new(move || {
                        let a = Instant::now();
                        let r = run();
                        let b = Instant::now();
                        results.lock().unwrap().push((task.kind(), since(a), since(b), r));
                    }) as Task
                })
                .collect();
            exec::fork_join(self.config.exec_mode, tasks);
            let end = Instant::now();

            let mut record = GroupRecord { index: group.index, start_s: since(start), end_s: since(end), atoms: Vec::new() };
            let mut failure = None;
            for (kind, start_s, end_s, r) in results.into_inner().unwrap() {
                match r {
                    Ok(consumed) => {
                        add(&mut report.self_check, &consumed);
                        record.atoms.push(AtomRecord { kind, start_s, end_s, consumed });
                    }
                    Err(e) => failure = Some((kind, e)),
                }
            }
            record.atoms.sort_by_key(|a| a.kind);
            report.groups.push(record);
            if let Some((kind, source)) = failure {
                report.finish();
                return Err(EmulationError::AtomFailed { group: group.index, kind, source, partial: Box::new(report) });
            }
        }
        report.finish();
        Ok(report)
    }
}
