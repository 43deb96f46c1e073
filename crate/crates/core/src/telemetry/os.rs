use std::collections::HashMap;
use std::fs;
use std::io;
use std::process::{Command, Stdio};
use std::sync::{Mutex, OnceLock};
use std::time::Instant;

use super::perf::HwCounters;
use super::{Accounting, CounterSnapshot, ExitInfo, ProbeTarget, TargetProcess, Telemetry, TelemetryError};
use crate::model::{CpuSample, IoSample, MemSample, Payload, ResourceKind, SystemInfo};

#[derive(Default)]
struct MemTrack {
    last_resident: u64,
    allocated: u64,
    freed: u64,
}

/// Host backend: `/proc` accounting plus hardware counters when the kernel
/// exposes them. Without hardware counters, cycles and instructions are
/// cycle-equivalents of user CPU time at the nominal maximum frequency.
pub struct OsTelemetry {
    system: OnceLock<Result<SystemInfo, TelemetryError>>,
    hw: Mutex<HashMap<i32, HwCounters>>,
    mem: Mutex<HashMap<i32, MemTrack>>,
    use_hw: bool,
    clk_tck: u64,
}

impl Default for OsTelemetry {
    fn default() -> Self {
        Self::new()
    }
}

impl OsTelemetry {
    pub fn new() -> Self {
        // SAFETY: sysconf has no preconditions.
        let tck = unsafe { libc::sysconf(libc::_SC_CLK_TCK) };
        OsTelemetry {
            system: OnceLock::new(),
            hw: Mutex::new(HashMap::new()),
            mem: Mutex::new(HashMap::new()),
            use_hw: true,
            clk_tck: if tck > 0 { tck as u64 } else { 100 },
        }
    }

    /// Never open hardware counters; always use CPU-time estimates.
    pub fn without_hw_counters() -> Self {
        OsTelemetry { use_hw: false, ..Self::new() }
    }

    fn max_freq_hz(&self) -> Result<u64, TelemetryError> {
        Ok(self.read_system_info()?.max_freq_hz)
    }

    fn cpu_snapshot(&self, target: &ProbeTarget) -> Result<Payload, TelemetryError> {
        let stat = read_proc(target.pid, "stat")?;
        let fields = stat_fields(&stat).ok_or(TelemetryError::TargetGone)?;
        let field = |i: usize| fields.get(i).and_then(|v| v.parse::<u64>().ok());
        // fields after the command name start at `state` (field 3)
        let utime_ticks = field(11).ok_or_else(|| TelemetryError::Unavailable("malformed stat".into()))?;
        let threads = field(17).unwrap_or(1) as u32;
        let cpu_time_ns = if target.pid == std::process::id() as i32 {
            self_user_time_ns()
        } else {
            utime_ticks * 1_000_000_000 / self.clk_tck
        };

        let hw = self.hw.lock().unwrap();
        let sample = match hw.get(&target.pid).map(HwCounters::read) {
            Some(Ok(r)) => CpuSample {
                instructions: r.instructions,
                cycles_used: r.cycles,
                cycles_stalled_frontend: r.stalled_frontend,
                cycles_stalled_backend: r.stalled_backend,
                cpu_time_ns,
                threads,
            },
            Some(Err(e)) => return Err(TelemetryError::Unavailable(format!("hardware counters: {e}"))),
            None => {
                let cycles = (cpu_time_ns as u128 * self.max_freq_hz()? as u128 / 1_000_000_000) as u64;
                CpuSample {
                    instructions: cycles,
                    cycles_used: cycles,
                    cycles_stalled_frontend: None,
                    cycles_stalled_backend: None,
                    cpu_time_ns,
                    threads,
                }
            }
        };
        Ok(Payload::Cpu(sample))
    }

    fn mem_snapshot(&self, target: &ProbeTarget) -> Result<Payload, TelemetryError> {
        let status = read_proc(target.pid, "status")?;
        let kb = |key: &str| -> Option<u64> {
            status
                .lines()
                .find_map(|l| l.strip_prefix(key))
                .and_then(|rest| rest.trim().trim_end_matches("kB").trim().parse::<u64>().ok())
                .map(|v| v * 1024)
        };
        // a zombie has released its address space
        let (peak, resident) = match (kb("VmHWM:"), kb("VmRSS:")) {
            (Some(p), Some(r)) => (p, r),
            _ => return Err(TelemetryError::TargetGone),
        };
        let mut tracks = self.mem.lock().unwrap();
        let track = tracks.entry(target.pid).or_default();
        if resident >= track.last_resident {
            track.allocated += resident - track.last_resident;
        } else {
            track.freed += track.last_resident - resident;
        }
        track.last_resident = resident;
        Ok(Payload::Mem(MemSample {
            peak_bytes: peak.max(resident),
            resident_bytes: resident,
            allocated_bytes: track.allocated,
            freed_bytes: track.freed,
        }))
    }

    fn io_snapshot(&self, target: &ProbeTarget) -> Result<Payload, TelemetryError> {
        let text = read_proc(target.pid, "io")?;
        let get = |key: &str| text.lines().find_map(|l| l.strip_prefix(key)).and_then(|v| v.trim().parse::<u64>().ok());
        match (get("rchar:"), get("wchar:")) {
            (Some(r), Some(w)) => Ok(Payload::Io(IoSample { bytes_read: r, bytes_written: w })),
            _ => Err(TelemetryError::Unavailable("malformed /proc io accounting".into())),
        }
    }
}

impl Telemetry for OsTelemetry {
    fn read_system_info(&self) -> Result<SystemInfo, TelemetryError> {
        self.system.get_or_init(probe_system_info).clone()
    }

    fn attach(&self, target: &ProbeTarget) -> Result<(), TelemetryError> {
        if self.use_hw {
            if let Ok(c) = HwCounters::open(target.pid) {
                self.hw.lock().unwrap().insert(target.pid, c);
            }
        }
        Ok(())
    }

    fn detach(&self, target: &ProbeTarget) {
        self.hw.lock().unwrap().remove(&target.pid);
        self.mem.lock().unwrap().remove(&target.pid);
    }

    fn hw_counters(&self, target: &ProbeTarget) -> bool {
        self.hw.lock().unwrap().contains_key(&target.pid)
    }

    fn snapshot(&self, target: &ProbeTarget, kind: ResourceKind) -> Result<CounterSnapshot, TelemetryError> {
        let counters = match kind {
            ResourceKind::Compute => self.cpu_snapshot(target)?,
            ResourceKind::Memory => self.mem_snapshot(target)?,
            ResourceKind::Storage => self.io_snapshot(target)?,
            ResourceKind::System => return Err(TelemetryError::UnsupportedKind(kind)),
        };
        Ok(CounterSnapshot { taken_at: Instant::now(), counters })
    }

    fn load_average(&self) -> Option<f64> {
        fs::read_to_string("/proc/loadavg").ok()?.split_whitespace().next()?.parse().ok()
    }
}

fn read_proc(pid: i32, file: &str) -> Result<String, TelemetryError> {
    fs::read_to_string(format!("/proc/{pid}/{file}")).map_err(|e| match e.raw_os_error() {
        Some(libc::ENOENT) | Some(libc::ESRCH) => TelemetryError::TargetGone,
        _ => TelemetryError::Unavailable(format!("/proc/{pid}/{file}: {e}")),
    })
}

/// Fields of `/proc/<pid>/stat` following the parenthesised command name.
fn stat_fields(stat: &str) -> Option<Vec<&str>> {
    let close = stat.rfind(')')?;
    Some(stat[close + 1..].split_whitespace().collect())
}

fn self_user_time_ns() -> u64 {
    // SAFETY: rusage is plain data and getrusage only writes into it.
    let mut ru: libc::rusage = unsafe { std::mem::zeroed() };
    unsafe { libc::getrusage(libc::RUSAGE_SELF, &mut ru) };
    timeval_ns(ru.ru_utime)
}

fn timeval_ns(tv: libc::timeval) -> u64 {
    tv.tv_sec as u64 * 1_000_000_000 + tv.tv_usec as u64 * 1_000
}

fn probe_system_info() -> Result<SystemInfo, TelemetryError> {
    // SAFETY: sysconf has no preconditions.
    let cores = unsafe { libc::sysconf(libc::_SC_NPROCESSORS_ONLN) };
    if cores < 1 {
        return Err(TelemetryError::Unavailable("online processor count (sysconf)".into()));
    }
    let cpuinfo = fs::read_to_string("/proc/cpuinfo").unwrap_or_default();
    let max_freq_hz = fs::read_to_string("/sys/devices/system/cpu/cpu0/cpufreq/cpuinfo_max_freq")
        .ok()
        .and_then(|s| s.trim().parse::<u64>().ok())
        .map(|khz| khz * 1000)
        .or_else(|| {
            cpuinfo
                .lines()
                .filter(|l| l.starts_with("cpu MHz"))
                .filter_map(|l| l.split(':').nth(1)?.trim().parse::<f64>().ok())
                .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.max(v))))
                .map(|mhz| (mhz * 1e6).round() as u64)
        })
        .filter(|&hz| hz > 0)
        .ok_or_else(|| TelemetryError::Unavailable("cpu frequency (cpufreq sysfs, /proc/cpuinfo)".into()))?;
    let total_memory_bytes = fs::read_to_string("/proc/meminfo")
        .ok()
        .and_then(|m| {
            m.lines()
                .find_map(|l| l.strip_prefix("MemTotal:"))
                .and_then(|v| v.trim().trim_end_matches("kB").trim().parse::<u64>().ok())
        })
        .map(|kb| kb * 1024)
        .ok_or_else(|| TelemetryError::Unavailable("total memory (/proc/meminfo)".into()))?;
    let cpu_model = cpuinfo
        .lines()
        .find_map(|l| l.strip_prefix("model name"))
        .and_then(|l| l.split(':').nth(1))
        .map(|s| s.trim().to_string())
        .unwrap_or_else(|| "unknown".into());
    Ok(SystemInfo {
        core_count: cores as u32,
        max_freq_hz,
        total_memory_bytes,
        os_descriptor: os_descriptor(),
        cpu_model,
    })
}

fn os_descriptor() -> String {
    // SAFETY: utsname is plain data; uname fills NUL-terminated fields.
    let mut u: libc::utsname = unsafe { std::mem::zeroed() };
    if unsafe { libc::uname(&mut u) } != 0 {
        return "unknown".into();
    }
    let field = |f: &[libc::c_char]| {
        let bytes: Vec<u8> = f.iter().take_while(|&&c| c != 0).map(|&c| c as u8).collect();
        String::from_utf8_lossy(&bytes).into_owned()
    };
    format!("{} {} {}", field(&u.sysname), field(&u.release), field(&u.machine))
}

/// A child process spawned for profiling.
///
/// Exit is observed without reaping so the final counter snapshot can still
/// read the zombie's accounting; [`TargetProcess::reap`] collects rusage.
pub struct OsTarget {
    child: std::process::Child,
    probe: ProbeTarget,
    status: Option<i32>,
}

impl OsTarget {
    pub fn spawn(argv: &[String], quiet: bool) -> io::Result<Self> {
        let (program, args) = argv
            .split_first()
            .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "empty command"))?;
        let mut cmd = Command::new(program);
        cmd.args(args);
        if quiet {
            cmd.stdout(Stdio::null()).stderr(Stdio::null());
        }
        let spawned_at = Instant::now();
        let child = cmd.spawn()?;
        let probe = ProbeTarget::new(child.id() as i32, spawned_at);
        Ok(OsTarget { child, probe, status: None })
    }
}

fn decode_wait_status(status: libc::c_int) -> i32 {
    if libc::WIFEXITED(status) {
        libc::WEXITSTATUS(status)
    } else if libc::WIFSIGNALED(status) {
        128 + libc::WTERMSIG(status)
    } else {
        -1
    }
}

impl TargetProcess for OsTarget {
    fn probe(&self) -> ProbeTarget {
        self.probe
    }

    fn wait_exit(&mut self) -> io::Result<ExitInfo> {
        let pid = self.child.id() as libc::id_t;
        loop {
            // SAFETY: siginfo_t is plain data; waitid writes into it.
            let mut info: libc::siginfo_t = unsafe { std::mem::zeroed() };
            let rc = unsafe { libc::waitid(libc::P_PID, pid, &mut info, libc::WEXITED | libc::WNOWAIT) };
            if rc == 0 {
                let exited_at = Instant::now();
                // SAFETY: waitid succeeded with WEXITED, so the child fields are set.
                let (code, status) = (info.si_code, unsafe { info.si_status() });
                let status = if code == libc::CLD_EXITED { status } else { 128 + status };
                self.status = Some(status);
                return Ok(ExitInfo { exited_at, status });
            }
            let err = io::Error::last_os_error();
            if err.kind() != io::ErrorKind::Interrupted {
                return Err(err);
            }
        }
    }

    fn reap(&mut self) -> io::Result<(i32, Accounting)> {
        let pid = self.child.id() as libc::pid_t;
        loop {
            let mut status: libc::c_int = 0;
            // SAFETY: rusage is plain data; wait4 writes into both out-params.
            let mut ru: libc::rusage = unsafe { std::mem::zeroed() };
            let rc = unsafe { libc::wait4(pid, &mut status, 0, &mut ru) };
            if rc == pid {
                let status = decode_wait_status(status);
                return Ok((
                    status,
                    Accounting {
                        peak_bytes: Some(ru.ru_maxrss as u64 * 1024),
                        cpu_time_ns: Some(timeval_ns(ru.ru_utime)),
                    },
                ));
            }
            let err = io::Error::last_os_error();
            if err.kind() != io::ErrorKind::Interrupted {
                return Err(err);
            }
        }
    }
}
