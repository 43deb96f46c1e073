//! Artificial background load, held until released.

use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use super::atoms::{sleep_until_or, AtomError, MemoryPool, StorageScratch};
use super::kernel::{thread_user_time_ns, Kernel, DUTY_QUANTUM};
use super::DEFAULT_BLOCK_BYTES;

#[derive(Debug, Clone, PartialEq)]
pub struct LoadSpec {
    /// Cores to keep busy; fractions above 1 spread over several threads.
    pub cpu_fraction: f64,
    /// Sustained write rate in bytes per second.
    pub disk_bytes_per_s: f64,
    pub mem_bytes: u64,
    pub scratch_dir: PathBuf,
}

impl Default for LoadSpec {
    fn default() -> Self {
        LoadSpec { cpu_fraction: 0.0, disk_bytes_per_s: 0.0, mem_bytes: 0, scratch_dir: std::env::temp_dir() }
    }
}

impl LoadSpec {
    pub fn is_zero(&self) -> bool {
        self.cpu_fraction == 0.0 && self.disk_bytes_per_s == 0.0 && self.mem_bytes == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LoadStats {
    pub held_s: f64,
    pub cpu_time_ns: u64,
    pub bytes_written: u64,
    pub mem_bytes: u64,
}

/// Running background load. Dropping the handle stops it too.
pub struct LoadHandle {
    stop: Arc<AtomicBool>,
    workers: Vec<JoinHandle<()>>,
    memory: MemoryPool,
    cpu_ns: Arc<AtomicU64>,
    written: Arc<AtomicU64>,
    started: Instant,
}

impl LoadHandle {
    pub fn is_idle(&self) -> bool {
        self.workers.is_empty() && self.memory.held_bytes() == 0
    }

    pub fn bytes_written(&self) -> u64 {
        self.written.load(Ordering::Relaxed)
    }

    pub fn release(mut self) -> LoadStats {
        self.shutdown();
        LoadStats {
            held_s: self.started.elapsed().as_secs_f64(),
            cpu_time_ns: self.cpu_ns.load(Ordering::Relaxed),
            bytes_written: self.written.load(Ordering::Relaxed),
            mem_bytes: self.memory.held_bytes(),
        }
    }

    fn shutdown(&mut self) {
        self.stop.store(true, Ordering::Release);
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

impl Drop for LoadHandle {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn invalid(what: &str, v: f64) -> AtomError {
    AtomError::Invalid(format!("{what} must be finite and non-negative, got {v}"))
}

/// Starts sustaining `spec`. Memory is allocated and touched before this
/// returns, so an unsatisfiable request fails immediately.
pub fn background_load(spec: &LoadSpec) -> Result<LoadHandle, AtomError> {
    if !(spec.cpu_fraction.is_finite() && spec.cpu_fraction >= 0.0) {
        return Err(invalid("cpu fraction", spec.cpu_fraction));
    }
    if !(spec.disk_bytes_per_s.is_finite() && spec.disk_bytes_per_s >= 0.0) {
        return Err(invalid("disk rate", spec.disk_bytes_per_s));
    }
    let mut memory = MemoryPool::new();
    memory.alloc(spec.mem_bytes, DEFAULT_BLOCK_BYTES)?;
    let scratch = if spec.disk_bytes_per_s > 0.0 {
        Some(StorageScratch::create(&spec.scratch_dir, DEFAULT_BLOCK_BYTES)?)
    } else {
        None
    };

    let stop = Arc::new(AtomicBool::new(false));
    let cpu_ns = Arc::new(AtomicU64::new(0));
    let written = Arc::new(AtomicU64::new(0));
    let mut workers = Vec::new();

    if spec.cpu_fraction > 0.0 {
        let threads = spec.cpu_fraction.ceil() as usize;
        let duty = spec.cpu_fraction / threads as f64;
        for i in 0..threads {
            let (stop, cpu_ns) = (stop.clone(), cpu_ns.clone());
            workers.push(
                std::thread::Builder::new()
                    .name(format!("load-cpu-{i}"))
                    .spawn(move || cpu_load(duty, &stop, &cpu_ns))
                    .expect("spawn load thread"),
            );
        }
    }
    if let Some(mut scratch) = scratch {
        let (stop, written) = (stop.clone(), written.clone());
        let rate = spec.disk_bytes_per_s;
        workers.push(
            std::thread::Builder::new()
                .name("load-disk".into())
                .spawn(move || disk_load(&mut scratch, rate, &stop, &written))
                .expect("spawn load thread"),
        );
    }
    Ok(LoadHandle { stop, workers, memory, cpu_ns, written, started: Instant::now() })
}

fn cpu_load(duty: f64, stop: &AtomicBool, cpu_ns: &AtomicU64) {
    let cpu0 = thread_user_time_ns();
    let mut kernel = Kernel::new();
    let busy = DUTY_QUANTUM.mul_f64(duty.min(1.0));
    while !stop.load(Ordering::Acquire) {
        let slice = Instant::now();
        while slice.elapsed() < busy {
            kernel.run(16);
        }
        if duty < 1.0 {
            std::thread::sleep(DUTY_QUANTUM.saturating_sub(slice.elapsed()));
        }
    }
    cpu_ns.fetch_add(thread_user_time_ns().saturating_sub(cpu0), Ordering::Relaxed);
}

fn disk_load(scratch: &mut StorageScratch, rate: f64, stop: &AtomicBool, written: &AtomicU64) {
    let start = Instant::now();
    let mut done = 0u64;
    while !stop.load(Ordering::Acquire) {
        let due = (rate * start.elapsed().as_secs_f64()) as u64;
        if done < due {
            let n = (due - done).min(DEFAULT_BLOCK_BYTES);
            if super::atoms::storage_atom(scratch, 0, n, DEFAULT_BLOCK_BYTES).is_err() {
                return;
            }
            done += n;
            written.store(done, Ordering::Relaxed);
        } else {
            let next = start + Duration::from_secs_f64((done + DEFAULT_BLOCK_BYTES.min(rate as u64).max(1)) as f64 / rate);
            sleep_until_or(next, || stop.load(Ordering::Acquire));
        }
    }
}
