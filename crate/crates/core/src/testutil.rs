//! Builders for hand-made and random profiles, shared by unit tests,
//! integration tests and benches.

use std::collections::BTreeSet;

use chrono::{TimeZone, Utc};

use crate::model::*;

pub fn test_system() -> SystemInfo {
    SystemInfo {
        core_count: 4,
        max_freq_hz: 2_000_000_000,
        total_memory_bytes: 8 << 30,
        os_descriptor: "Linux test".into(),
        cpu_model: "test cpu".into(),
    }
}

pub fn cpu(index: u64, t: f64, instructions: u64) -> Sample {
    Sample {
        index,
        timestamp_s: t,
        payload: Payload::Cpu(CpuSample {
            instructions,
            cycles_used: instructions,
            cycles_stalled_frontend: None,
            cycles_stalled_backend: None,
            cpu_time_ns: instructions / 2,
            threads: 1,
        }),
    }
}

pub fn io(index: u64, t: f64, read: u64, written: u64) -> Sample {
    Sample { index, timestamp_s: t, payload: Payload::Io(IoSample { bytes_read: read, bytes_written: written }) }
}

pub fn mem(index: u64, t: f64, peak: u64, resident: u64, alloc: u64, freed: u64) -> Sample {
    Sample {
        index,
        timestamp_s: t,
        payload: Payload::Mem(MemSample {
            peak_bytes: peak,
            resident_bytes: resident,
            allocated_bytes: alloc,
            freed_bytes: freed,
        }),
    }
}

/// Assembles a valid profile around the given series.
pub fn profile_from_series(command: &str, tags: &[&str], series: Series, runtime_s: f64) -> Profile {
    let totals = integrate_totals(&series, runtime_s);
    Profile {
        version: SCHEMA_VERSION,
        command: command.to_string(),
        tags: tags.iter().map(|s| s.to_string()).collect::<BTreeSet<_>>(),
        system: test_system(),
        sample_rate_hz: 1.0,
        spawn_offset_s: 0.005,
        exit_status: 0,
        ttc_s: runtime_s,
        hw_counters: false,
        fp_fraction: 1.0,
        load_avg_1m: 0.0,
        series,
        gaps: Default::default(),
        totals,
        created_at: Utc.timestamp_opt(1_700_000_000, 0).unwrap(),
    }
}

pub fn profile_with_instructions(command: &str, tags: &[&str], instructions: u64) -> Profile {
    let mut series = Series::new();
    series.insert(ResourceKind::Compute, vec![cpu(0, 0.005, instructions)]);
    profile_from_series(command, tags, series, 1.0)
}

/// Small deterministic xorshift generator so the helpers stay dependency free.
pub struct XorShift(u64);

impl XorShift {
    pub fn new(seed: u64) -> Self {
        XorShift(seed.max(1))
    }

    pub fn next_u64(&mut self) -> u64 {
        let mut x = self.0;
        x ^= x << 13;
        x ^= x >> 7;
        x ^= x << 17;
        self.0 = x;
        x
    }

    pub fn below(&mut self, n: u64) -> u64 {
        self.next_u64() % n.max(1)
    }
}

/// A random but valid profile with `samples` entries per watched kind.
pub fn random_profile(command: &str, tags: &[&str], samples: usize, seed: u64) -> Profile {
    let mut rng = XorShift::new(seed);
    let mut series = Series::new();
    let mut cpu_s = Vec::with_capacity(samples);
    let mut mem_s = Vec::with_capacity(samples);
    let mut io_s = Vec::with_capacity(samples);
    let mut peak = 0;
    for i in 0..samples as u64 {
        let t = 0.005 + i as f64;
        cpu_s.push(cpu(i, t, rng.below(5_000_000_000)));
        let resident = rng.below(1 << 32);
        peak = peak.max(resident);
        mem_s.push(mem(i, t + 0.0001, peak, resident, rng.below(1 << 28), rng.below(1 << 28)));
        io_s.push(io(i, t + 0.0002, rng.below(1 << 30), rng.below(1 << 30)));
    }
    series.insert(ResourceKind::Compute, cpu_s);
    series.insert(ResourceKind::Memory, mem_s);
    series.insert(ResourceKind::Storage, io_s);
    profile_from_series(command, tags, series, samples as f64)
}
