//! Resource-consuming atoms. Each consumes exactly one resource kind.

use std::fs::{self, File, OpenOptions};
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::kernel::{thread_user_time_ns, Calibration, Kernel, DUTY_QUANTUM};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AtomError {
    #[error("cannot allocate {bytes} bytes: {reason}")]
    Alloc { bytes: u64, reason: String },
    #[error("invalid load: {0}")]
    Invalid(String),
    #[error("scratch I/O on {path}: {reason}")]
    Io { path: PathBuf, reason: String },
}

/// What one atom invocation actually consumed.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Consumed {
    pub instructions: u64,
    pub cpu_time_ns: u64,
    pub allocated_bytes: u64,
    pub freed_bytes: u64,
    pub bytes_read: u64,
    pub bytes_written: u64,
    /// Kernel iterations, allocations/frees or read/write calls.
    pub ops: u64,
}

/// Runs the compute kernel for the calibrated equivalent of `instructions`.
///
/// When the calibration maps instructions to CPU time the kernel runs until
/// the thread has used that much user time; otherwise it runs the
/// calibrated iteration count. Targets below the kernel's natural efficiency
/// are reached by running in [`DUTY_QUANTUM`] slices: compute for
/// `duty * quantum`, sleep for the rest.
pub fn compute_atom(instructions: u64, efficiency_target: f64, cal: &Calibration) -> Consumed {
    let iterations = cal.iterations_for(instructions);
    if iterations == 0 {
        return Consumed::default();
    }
    let cpu0 = thread_user_time_ns();
    let cpu_target = cal.cpu_ns_per_instruction.map(|ns| (instructions as f64 * ns) as u64);
    let mut ran = 0u64;
    let done = |ran: u64| match cpu_target {
        Some(target) => thread_user_time_ns().saturating_sub(cpu0) >= target,
        None => ran >= iterations,
    };
    // roughly 100 us of work between clock checks
    let chunk = ((1e-4 / cal.seconds_per_iteration) as u64).max(1);
    let duty = cal.duty_for(efficiency_target);
    let busy = DUTY_QUANTUM.mul_f64(duty);
    let mut kernel = Kernel::new();
    while !done(ran) {
        let slice = Instant::now();
        while !done(ran) && (duty >= 1.0 || slice.elapsed() < busy) {
            let n = if cpu_target.is_some() { chunk } else { chunk.min(iterations - ran) };
            kernel.run(n);
            ran += n;
        }
        if duty < 1.0 && !done(ran) {
            std::thread::sleep(DUTY_QUANTUM.saturating_sub(slice.elapsed()));
        }
    }
    let cpu_time_ns = thread_user_time_ns().saturating_sub(cpu0);
    let instructions = match cal.cpu_ns_per_instruction {
        Some(ns) => cpu_time_ns as f64 / ns,
        None => ran as f64 * cal.instructions_per_iteration,
    };
    Consumed { instructions: instructions.round() as u64, cpu_time_ns, ops: ran, ..Default::default() }
}

fn page_size() -> usize {
    // SAFETY: sysconf has no preconditions.
    let p = unsafe { libc::sysconf(libc::_SC_PAGESIZE) };
    if p > 0 { p as usize } else { 4096 }
}

fn available_memory() -> Option<u64> {
    let info = fs::read_to_string("/proc/meminfo").ok()?;
    let kb: u64 = info.lines().find_map(|l| l.strip_prefix("MemAvailable:"))?.trim().trim_end_matches("kB").trim().parse().ok()?;
    Some(kb * 1024)
}

/// Anonymous private mapping with every page touched.
struct Block {
    ptr: *mut u8,
    mapped: usize,
    len: usize,
}

// SAFETY: a Block exclusively owns its mapping.
unsafe impl Send for Block {}

impl Block {
    fn new(len: usize) -> Result<Block, AtomError> {
        let page = page_size();
        let mapped = len.div_ceil(page) * page;
        // SAFETY: anonymous private mapping, no aliasing with other memory.
        let ptr = unsafe {
            libc::mmap(
                std::ptr::null_mut(),
                mapped,
                libc::PROT_READ | libc::PROT_WRITE,
                libc::MAP_PRIVATE | libc::MAP_ANONYMOUS,
                -1,
                0,
            )
        };
        if ptr == libc::MAP_FAILED {
            return Err(AtomError::Alloc { bytes: len as u64, reason: std::io::Error::last_os_error().to_string() });
        }
        let ptr = ptr as *mut u8;
        for off in (0..mapped).step_by(page) {
            // SAFETY: off < mapped, inside the mapping just created.
            unsafe { std::ptr::write_volatile(ptr.add(off), 1) };
        }
        Ok(Block { ptr, mapped, len })
    }

    /// Shrinks to `len` bytes, returning whole tail pages to the OS.
    fn shrink(&mut self, len: usize) {
        let page = page_size();
        let keep = len.div_ceil(page) * page;
        if keep < self.mapped {
            // SAFETY: [keep, mapped) lies inside this block's mapping.
            unsafe { libc::munmap(self.ptr.add(keep) as *mut libc::c_void, self.mapped - keep) };
            self.mapped = keep;
        }
        self.len = len;
    }
}

impl Drop for Block {
    fn drop(&mut self) {
        if self.mapped > 0 {
            // SAFETY: ptr/mapped describe a live mapping owned by self.
            unsafe { libc::munmap(self.ptr as *mut libc::c_void, self.mapped) };
        }
    }
}

/// Memory held by the memory atom across sample groups, so the resident
/// size follows the profiled curve. Frees release the most recent blocks
/// first.
#[derive(Default)]
pub struct MemoryPool {
    blocks: Vec<Block>,
    held: u64,
}

impl MemoryPool {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn held_bytes(&self) -> u64 {
        self.held
    }

    /// Bytes of the pool's pages currently resident in RAM.
    pub fn resident_bytes(&self) -> u64 {
        let page = page_size();
        let mut total = 0;
        for b in &self.blocks {
            let mut vec = vec![0u8; b.mapped / page];
            // SAFETY: the range is one live mapping and vec has one byte per page.
            let rc = unsafe { libc::mincore(b.ptr as *mut libc::c_void, b.mapped, vec.as_mut_ptr()) };
            if rc == 0 {
                total += vec.iter().filter(|v| *v & 1 == 1).count() as u64 * page as u64;
            }
        }
        total
    }

    /// Allocates `bytes` in `block_bytes` chunks. Requests larger than the
    /// memory the OS reports available fail up front instead of running
    /// into the OOM killer.
    pub fn alloc(&mut self, bytes: u64, block_bytes: u64) -> Result<u64, AtomError> {
        if let Some(avail) = available_memory() {
            if bytes > avail {
                return Err(AtomError::Alloc { bytes, reason: format!("only {avail} bytes available") });
            }
        }
        let mut left = bytes;
        let mut ops = 0;
        while left > 0 {
            let n = left.min(block_bytes);
            self.blocks.push(Block::new(n as usize)?);
            self.held += n;
            left -= n;
            ops += 1;
        }
        Ok(ops)
    }

    /// Frees up to `bytes`; returns (bytes freed, operations).
    pub fn free(&mut self, bytes: u64) -> (u64, u64) {
        let mut left = bytes;
        let mut ops = 0;
        while left > 0 {
            let Some(last) = self.blocks.last_mut() else { break };
            let len = last.len as u64;
            if len <= left {
                self.blocks.pop();
                left -= len;
            } else {
                last.shrink((len - left) as usize);
                left = 0;
            }
            ops += 1;
        }
        let freed = bytes - left;
        self.held -= freed;
        (freed, ops)
    }
}

/// Allocates `alloc_bytes` in `block_bytes` chunks, touching every page,
/// then frees `free_bytes` from the pool.
pub fn memory_atom(pool: &mut MemoryPool, alloc_bytes: u64, free_bytes: u64, block_bytes: u64) -> Result<Consumed, AtomError> {
    let alloc_ops = pool.alloc(alloc_bytes, block_bytes)?;
    let (freed, free_ops) = pool.free(free_bytes);
    Ok(Consumed { allocated_bytes: alloc_bytes, freed_bytes: freed, ops: alloc_ops + free_ops, ..Default::default() })
}

/// Size of the sparse file storage atoms read from.
pub const READ_SEED_BYTES: u64 = 64 << 20;
/// Writes wrap to the start of the scratch file past this offset.
pub const WRITE_WRAP_BYTES: u64 = 1 << 30;

/// Scratch files owned by one storage atom for a whole emulation: a
/// pre-seeded sparse file to read from and a file to write into. Both are
/// removed on drop.
pub struct StorageScratch {
    read_path: PathBuf,
    write_path: PathBuf,
    read_file: File,
    write_file: File,
    read_len: u64,
    read_pos: u64,
    write_pos: u64,
    buf: Vec<u8>,
}

impl StorageScratch {
    pub fn create(dir: &Path, max_block_bytes: u64) -> Result<Self, AtomError> {
        static SEQ: AtomicU64 = AtomicU64::new(0);
        let stem = format!("emuprof-scratch-{}-{}", std::process::id(), SEQ.fetch_add(1, Ordering::Relaxed));
        let read_path = dir.join(format!("{stem}.r"));
        let write_path = dir.join(format!("{stem}.w"));
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |e: std::io::Error| AtomError::Io { path, reason: e.to_string() }
        };
        fs::create_dir_all(dir).map_err(io(dir))?;
        let read_len = READ_SEED_BYTES.max(max_block_bytes);
        let read_file = OpenOptions::new().read(true).write(true).create_new(true).open(&read_path).map_err(io(&read_path))?;
        // sparse: reserves the size without counting as written data
        read_file.set_len(read_len).map_err(io(&read_path))?;
        let write_file = match OpenOptions::new().write(true).create_new(true).open(&write_path) {
            Ok(f) => f,
            Err(e) => {
                let _ = fs::remove_file(&read_path);
                return Err(io(&write_path)(e));
            }
        };
        Ok(StorageScratch {
            read_path,
            write_path,
            read_file,
            write_file,
            read_len,
            read_pos: 0,
            write_pos: 0,
            buf: vec![0x5a; max_block_bytes as usize],
        })
    }

    pub fn paths(&self) -> (&Path, &Path) {
        (&self.read_path, &self.write_path)
    }

    fn read_block(&mut self, len: usize) -> Result<(), AtomError> {
        if self.read_pos + len as u64 > self.read_len {
            self.read_pos = 0;
        }
        self.read_file
            .read_exact_at(&mut self.buf[..len], self.read_pos)
            .map_err(|e| AtomError::Io { path: self.read_path.clone(), reason: e.to_string() })?;
        self.read_pos += len as u64;
        Ok(())
    }

    fn write_block(&mut self, len: usize) -> Result<(), AtomError> {
        if self.write_pos + len as u64 > WRITE_WRAP_BYTES {
            self.write_pos = 0;
        }
        self.write_file
            .write_all_at(&self.buf[..len], self.write_pos)
            .map_err(|e| AtomError::Io { path: self.write_path.clone(), reason: e.to_string() })?;
        self.write_pos += len as u64;
        Ok(())
    }
}

impl Drop for StorageScratch {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.read_path);
        let _ = fs::remove_file(&self.write_path);
    }
}

/// Number of `block_bytes` operations needed for `bytes`, the last one
/// possibly partial.
pub fn block_ops(bytes: u64, block_bytes: u64) -> u64 {
    bytes.div_ceil(block_bytes)
}

/// Reads then writes the requested byte totals in `block_bytes` chunks.
pub fn storage_atom(scratch: &mut StorageScratch, read_bytes: u64, write_bytes: u64, block_bytes: u64) -> Result<Consumed, AtomError> {
    let block = block_bytes.min(scratch.buf.len() as u64).max(1);
    let mut ops = 0;
    let mut left = read_bytes;
    while left > 0 {
        let n = left.min(block);
        scratch.read_block(n as usize)?;
        left -= n;
        ops += 1;
    }
    let mut left = write_bytes;
    while left > 0 {
        let n = left.min(block);
        scratch.write_block(n as usize)?;
        left -= n;
        ops += 1;
    }
    Ok(Consumed { bytes_read: read_bytes, bytes_written: write_bytes, ops, ..Default::default() })
}

/// Sleeps until `deadline` or until `stop` returns true, checking every
/// few milliseconds.
pub(crate) fn sleep_until_or(deadline: Instant, stop: impl Fn() -> bool) {
    while !stop() {
        let now = Instant::now();
        if now >= deadline {
            return;
        }
        std::thread::sleep((deadline - now).min(Duration::from_millis(5)));
    }
}
