//! Minimal `perf_event_open` counting for one process.

use std::fs::File;
use std::io::{self, Read};
use std::os::fd::FromRawFd;

const PERF_TYPE_HARDWARE: u32 = 0;
const PERF_COUNT_HW_CPU_CYCLES: u64 = 0;
const PERF_COUNT_HW_INSTRUCTIONS: u64 = 1;
const PERF_COUNT_HW_STALLED_CYCLES_FRONTEND: u64 = 7;
const PERF_COUNT_HW_STALLED_CYCLES_BACKEND: u64 = 8;

const FLAG_INHERIT: u64 = 1 << 1;
const FLAG_EXCLUDE_KERNEL: u64 = 1 << 5;
const FLAG_EXCLUDE_HV: u64 = 1 << 6;
const PERF_FLAG_FD_CLOEXEC: libc::c_ulong = 1 << 3;

/// First published layout of `struct perf_event_attr` (PERF_ATTR_SIZE_VER0).
#[repr(C)]
#[derive(Default)]
struct PerfEventAttr {
    type_: u32,
    size: u32,
    config: u64,
    sample_period: u64,
    sample_type: u64,
    read_format: u64,
    flags: u64,
    wakeup_events: u32,
    bp_type: u32,
    config1: u64,
}

fn open_counter(pid: i32, config: u64) -> io::Result<File> {
    let attr = PerfEventAttr {
        type_: PERF_TYPE_HARDWARE,
        size: std::mem::size_of::<PerfEventAttr>() as u32,
        config,
        // user space only, counted across threads created after attach
        flags: FLAG_INHERIT | FLAG_EXCLUDE_KERNEL | FLAG_EXCLUDE_HV,
        ..Default::default()
    };
    // SAFETY: attr is a valid, fully initialised VER0 attribute block that
    // outlives the call; the kernel copies it.
    let fd = unsafe {
        libc::syscall(
            libc::SYS_perf_event_open,
            &attr as *const PerfEventAttr,
            pid as libc::pid_t,
            -1 as libc::c_int,
            -1 as libc::c_int,
            PERF_FLAG_FD_CLOEXEC,
        )
    };
    if fd < 0 {
        return Err(io::Error::last_os_error());
    }
    // SAFETY: fd was just returned by the kernel and is owned by nobody else.
    Ok(unsafe { File::from_raw_fd(fd as i32) })
}

fn read_counter(mut f: &File) -> io::Result<u64> {
    let mut buf = [0u8; 8];
    f.read_exact(&mut buf)?;
    Ok(u64::from_ne_bytes(buf))
}

/// Hardware counters attached to one process. Cycles and instructions are
/// required; the stall counters are optional on many CPUs.
pub(crate) struct HwCounters {
    cycles: File,
    instructions: File,
    stalled_frontend: Option<File>,
    stalled_backend: Option<File>,
}

pub(crate) struct HwReading {
    pub cycles: u64,
    pub instructions: u64,
    pub stalled_frontend: Option<u64>,
    pub stalled_backend: Option<u64>,
}

impl HwCounters {
    pub fn open(pid: i32) -> io::Result<Self> {
        Ok(HwCounters {
            cycles: open_counter(pid, PERF_COUNT_HW_CPU_CYCLES)?,
            instructions: open_counter(pid, PERF_COUNT_HW_INSTRUCTIONS)?,
            stalled_frontend: open_counter(pid, PERF_COUNT_HW_STALLED_CYCLES_FRONTEND).ok(),
            stalled_backend: open_counter(pid, PERF_COUNT_HW_STALLED_CYCLES_BACKEND).ok(),
        })
    }

    pub fn read(&self) -> io::Result<HwReading> {
        let opt = |f: &Option<File>| f.as_ref().and_then(|f| read_counter(f).ok());
        let (stalled_frontend, stalled_backend) = (opt(&self.stalled_frontend), opt(&self.stalled_backend));
        // both or neither, so per-sample efficiency is well defined
        let (stalled_frontend, stalled_backend) = match (stalled_frontend, stalled_backend) {
            (Some(fe), Some(be)) => (Some(fe), Some(be)),
            _ => (None, None),
        };
        Ok(HwReading {
            cycles: read_counter(&self.cycles)?,
            instructions: read_counter(&self.instructions)?,
            stalled_frontend,
            stalled_backend,
        })
    }
}
