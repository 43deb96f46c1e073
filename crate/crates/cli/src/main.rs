//! `emuprof`: profile a command once, emulate it anywhere.
//!
//! Exit codes: 0 success, 1 internal or storage error, 2 usage error or
//! target spawn failure, 3 target exited nonzero (profile still saved),
//! 4 no stored profile for the requested key, 5 emulation or load failure.

mod report;
mod units;

use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand, ValueEnum};

use emuprof_core::emulator::{
    background_load, plan_from_profile, EmulationError, Emulator, EmulatorConfig, LoadSpec, Tuning,
    DEFAULT_BLOCK_BYTES,
};
use emuprof_core::model::{Profile, ResourceKind};
use emuprof_core::sampler::{resolve_sample_rate, Profiler, ProfilerConfig, SamplerError};
use emuprof_core::store::{open_store, ProfileKey, ProfileStore, StoreError};
use emuprof_core::telemetry::{OsTelemetry, Telemetry};

const EXIT_INTERNAL: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_TARGET_FAILED: u8 = 3;
const EXIT_NO_PROFILE: u8 = 4;
const EXIT_EMULATION: u8 = 5;

#[derive(Parser)]
#[command(name = "emuprof", version, about = "Profile a command's resource consumption and replay it")]
struct Cli {
    /// Profile store: a directory, or doc:<dir> for the document backend
    #[arg(long, global = true, env = "EMUPROF_STORE", value_name = "LOCATOR")]
    store: Option<String>,

    /// Directory for emulation scratch files [default: system temp dir]
    #[arg(long, global = true, value_name = "DIR")]
    scratch: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a command under the profiler and store its profile
    Profile(ProfileArgs),
    /// Replay the stored profile of a command
    Emulate(EmulateArgs),
    /// Write CSV tables from stored profiles
    Report(ReportArgs),
    /// Hold an artificial CPU, disk and memory load
    Stress(StressArgs),
}

#[derive(Args)]
struct KeyArgs {
    /// Tag distinguishing runs of the same command (repeatable)
    #[arg(long = "tag", value_name = "TAG")]
    tags: Vec<String>,

    /// Target command, after `--`
    #[arg(last = true, required = true, value_name = "COMMAND")]
    command: Vec<String>,
}

impl KeyArgs {
    fn key(&self) -> ProfileKey {
        ProfileKey::new(self.command.join(" "), self.tags.iter().cloned())
    }
}

#[derive(Args)]
struct ProfileArgs {
    #[command(flatten)]
    key: KeyArgs,

    /// Samples per second, at most 10 [default: $SYNAPSE_SAMPLE_RATE or 1]
    #[arg(long, value_name = "HZ")]
    rate: Option<f64>,

    /// Fraction of instructions counted as floating point
    #[arg(long, default_value_t = 1.0, value_name = "FRACTION")]
    fp_fraction: f64,

    /// Discard the target's stdout and stderr
    #[arg(long)]
    quiet: bool,

    /// Only time the command, without sampling (overhead baseline)
    #[arg(long)]
    no_sample: bool,
}

#[derive(Args)]
struct EmulateArgs {
    #[command(flatten)]
    key: KeyArgs,

    /// Memory and storage atom block size, e.g. 4096, 64KiB, 1MiB
    #[arg(long, value_name = "SIZE", value_parser = units::parse_size)]
    block_size: Option<u64>,

    /// Replace every recorded efficiency with this value
    #[arg(long, value_name = "RATIO")]
    efficiency: Option<f64>,

    /// Emulate the repeat created at this RFC 3339 time instead of the latest
    #[arg(long, value_name = "TIME")]
    created_at: Option<String>,

    /// Store the emulation run as a profile tagged `emulated`
    #[arg(long)]
    save: bool,

    /// Print the full emulation report as JSON
    #[arg(long)]
    json: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportKind {
    /// TTC per configuration against a baseline configuration
    Overhead,
    /// Metric mean, stddev and coefficient of variation per configuration
    Consistency,
    /// Original against emulated TTC per configuration
    Fidelity,
    /// One row per stored profile
    Profiles,
}

#[derive(Args)]
struct ReportArgs {
    kind: ReportKind,

    /// Comma-separated tag set selecting one configuration (repeatable)
    #[arg(long = "config", value_name = "TAGS")]
    configs: Vec<String>,

    /// Baseline tag set for the overhead report
    #[arg(long, value_name = "TAGS")]
    baseline: Option<String>,

    /// Write CSV here instead of stdout
    #[arg(long, short, value_name = "FILE")]
    output: Option<PathBuf>,

    /// Profiled command, after `--`
    #[arg(last = true, required = true, value_name = "COMMAND")]
    command: Vec<String>,
}

#[derive(Args)]
struct StressArgs {
    /// Cores to keep busy, e.g. 0.5
    #[arg(long, default_value_t = 0.0, value_name = "FRACTION")]
    cpu: f64,

    /// Sustained write rate in MB/s
    #[arg(long, default_value_t = 0.0, value_name = "MBPS")]
    disk: f64,

    /// Resident memory to hold, e.g. 256MiB
    #[arg(long, default_value = "0", value_name = "SIZE", value_parser = units::parse_size)]
    mem: u64,

    /// Seconds to hold the load [default: until interrupted]
    #[arg(long, value_name = "SECONDS")]
    duration: Option<f64>,
}

struct Failure {
    code: u8,
    message: String,
}

fn fail(code: u8, message: impl Into<String>) -> Failure {
    Failure { code, message: message.into() }
}

impl From<StoreError> for Failure {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::NotFound(_) => fail(EXIT_NO_PROFILE, e.to_string()),
            _ => fail(EXIT_INTERNAL, e.to_string()),
        }
    }
}

fn main() -> ExitCode {
    // SAFETY: restores the default disposition so a closed pipe ends the process quietly.
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Profile(a) => cmd_profile(&cli, a),
        Command::Emulate(a) => cmd_emulate(&cli, a),
        Command::Report(a) => cmd_report(&cli, a),
        Command::Stress(a) => cmd_stress(&cli, a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("emuprof: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn default_store() -> String {
    let base = std::env::var_os("XDG_DATA_HOME")
        .map(PathBuf::from)
        .or_else(|| std::env::var_os("HOME").map(|h| PathBuf::from(h).join(".local/share")))
        .unwrap_or_else(|| PathBuf::from("."));
    base.join("emuprof/profiles").display().to_string()
}

fn store(cli: &Cli) -> Result<Box<dyn ProfileStore>, Failure> {
    Ok(open_store(cli.store.as_deref().unwrap_or(&default_store()))?)
}

fn cmd_profile(cli: &Cli, args: &ProfileArgs) -> Result<u8, Failure> {
    let rate = resolve_sample_rate(args.rate).map_err(|e| fail(EXIT_USAGE, e.to_string()))?;
    let config = ProfilerConfig { fp_fraction: args.fp_fraction, ..ProfilerConfig::default() }
        .with_rate(rate)
        .with_tags(args.key.tags.iter().cloned())
        .quiet(args.quiet);
    let store = store(cli)?;
    let profiler = Profiler::new(Arc::new(OsTelemetry::new()), config).map_err(|e| fail(EXIT_USAGE, e.to_string()))?;
    let profile = if args.no_sample {
        profiler.time_command(&args.key.command)
    } else {
        profiler.profile_command(&args.key.command)
    }
    .map_err(|e| match e {
        SamplerError::Spawn { .. } | SamplerError::InvalidConfig(_) => fail(EXIT_USAGE, e.to_string()),
        _ => fail(EXIT_INTERNAL, e.to_string()),
    })?;
    let id = store.save(&profile)?;
    println!("{}", summary_line(&profile));
    println!("stored {id}");
    if profile.is_flagged() {
        eprintln!("emuprof: target exited with status {}; profile stored and flagged", profile.exit_status);
        return Ok(EXIT_TARGET_FAILED);
    }
    Ok(0)
}

fn summary_line(p: &Profile) -> String {
    let t = &p.totals;
    let count = |k: ResourceKind| p.series.get(&k).map_or(0, Vec::len);
    format!(
        "ttc {:.3} s, runtime {:.3} s, {} instructions, read {} B, written {} B, peak {} B, samples cpu/mem/io {}/{}/{} at {} Hz",
        p.ttc_s,
        t.runtime_s,
        t.instructions,
        t.bytes_read,
        t.bytes_written,
        t.peak_bytes,
        count(ResourceKind::Compute),
        count(ResourceKind::Memory),
        count(ResourceKind::Storage),
        p.sample_rate_hz,
    )
}

fn select_profile(store: &dyn ProfileStore, key: &ProfileKey, created_at: Option<&str>) -> Result<Profile, Failure> {
    let mut profiles = store.load(key)?;
    let no_profile = || fail(EXIT_NO_PROFILE, format!("no profile for key {key}"));
    match created_at {
        None => profiles.pop().ok_or_else(no_profile),
        Some(s) => {
            let at = chrono::DateTime::parse_from_rfc3339(s).map_err(|e| fail(EXIT_USAGE, format!("--created-at: {e}")))?;
            profiles.into_iter().find(|p| p.created_at == at).ok_or_else(no_profile)
        }
    }
}

fn cmd_emulate(cli: &Cli, args: &EmulateArgs) -> Result<u8, Failure> {
    if let Some(e) = args.efficiency {
        if !(e > 0.0 && e <= 1.0) {
            return Err(fail(EXIT_USAGE, format!("--efficiency must be within (0, 1], got {e}")));
        }
    }
    if args.block_size == Some(0) {
        return Err(fail(EXIT_USAGE, "--block-size must be positive"));
    }
    let store = store(cli)?;
    let key = args.key.key();
    let profile = select_profile(store.as_ref(), &key, args.created_at.as_deref())?;
    let tuning = Tuning { efficiency_override: args.efficiency, ..Tuning::default() }
        .with_block_size(args.block_size.unwrap_or(DEFAULT_BLOCK_BYTES));
    let plan = plan_from_profile(&profile, &tuning).map_err(|e| fail(EXIT_EMULATION, e.to_string()))?;

    let telemetry = OsTelemetry::new();
    let config = EmulatorConfig {
        scratch_dir: cli.scratch.clone().unwrap_or_else(std::env::temp_dir),
        ..EmulatorConfig::default()
    };
    let emulator = Emulator::new(config, &telemetry);
    let report = match emulator.emulate(&plan) {
        Ok(r) => r,
        Err(EmulationError::AtomFailed { group, kind, source, partial }) => {
            eprintln!("emuprof: {kind} atom failed in sample group {group}: {source}");
            eprintln!("partial report: {} of {} groups completed", partial.groups.len().saturating_sub(1), plan.groups().len());
            if args.json {
                println!("{}", serde_json::to_string_pretty(&partial).expect("report serializes"));
            }
            return Ok(EXIT_EMULATION);
        }
        Err(e) => return Err(fail(EXIT_EMULATION, e.to_string())),
    };

    if args.json {
        println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    } else {
        let diff = (report.ttc_s - profile.ttc_s) / profile.ttc_s * 100.0;
        println!(
            "emulated {} groups ({} atoms) in {:.3} s; profiled ttc {:.3} s ({:+.1}%)",
            report.groups.len(),
            plan.task_count(),
            report.ttc_s,
            profile.ttc_s,
            diff
        );
        if let Some(b) = report.storage_block_bytes {
            println!("storage block size {b} B");
        }
        for (metric, dev) in &report.deviations {
            println!("self-check {metric}: {:+.2}%", dev * 100.0);
        }
    }
    if args.save {
        let system = telemetry.read_system_info().map_err(|e| fail(EXIT_INTERNAL, e.to_string()))?;
        let id = store.save(&report.to_profile(&profile, system))?;
        if !args.json {
            println!("stored {id}");
        }
    }
    Ok(0)
}

fn cmd_report(cli: &Cli, args: &ReportArgs) -> Result<u8, Failure> {
    let store = store(cli)?;
    let command = args.command.join(" ");
    let configs: Vec<String> = if args.configs.is_empty() { vec![String::new()] } else { args.configs.clone() };
    let mut out: Box<dyn std::io::Write> = match &args.output {
        Some(path) => Box::new(std::fs::File::create(path).map_err(|e| fail(EXIT_INTERNAL, format!("{}: {e}", path.display())))?),
        None => Box::new(std::io::stdout().lock()),
    };
    let table = match args.kind {
        ReportKind::Overhead => {
            let baseline = args.baseline.as_deref().ok_or_else(|| fail(EXIT_USAGE, "overhead report needs --baseline"))?;
            report::overhead(store.as_ref(), &command, baseline, &configs)
        }
        ReportKind::Consistency => report::consistency(store.as_ref(), &command, &configs),
        ReportKind::Fidelity => report::fidelity(store.as_ref(), &command, &configs),
        ReportKind::Profiles => report::profiles(store.as_ref(), &command, &configs),
    }?;
    table.write_csv(&mut out).map_err(|e| fail(EXIT_INTERNAL, e.to_string()))?;
    Ok(0)
}

static INTERRUPTED: AtomicBool = AtomicBool::new(false);

extern "C" fn on_signal(_: libc::c_int) {
    INTERRUPTED.store(true, Ordering::SeqCst);
}

fn cmd_stress(cli: &Cli, args: &StressArgs) -> Result<u8, Failure> {
    let spec = LoadSpec {
        cpu_fraction: args.cpu,
        disk_bytes_per_s: args.disk * 1e6,
        mem_bytes: args.mem,
        scratch_dir: cli.scratch.clone().unwrap_or_else(std::env::temp_dir),
    };
    if spec.is_zero() {
        println!("no load requested");
        return Ok(0);
    }
    if let Some(d) = args.duration {
        if !(d.is_finite() && d >= 0.0) {
            return Err(fail(EXIT_USAGE, format!("--duration must be non-negative, got {d}")));
        }
    }
    // SAFETY: the handler only stores to an atomic.
    unsafe {
        libc::signal(libc::SIGINT, on_signal as extern "C" fn(libc::c_int) as libc::sighandler_t);
        libc::signal(libc::SIGTERM, on_signal as extern "C" fn(libc::c_int) as libc::sighandler_t);
    }
    let handle = background_load(&spec).map_err(|e| fail(EXIT_EMULATION, e.to_string()))?;
    let deadline = args.duration.map(|d| Instant::now() + Duration::from_secs_f64(d));
    while !INTERRUPTED.load(Ordering::SeqCst) && deadline.is_none_or(|d| Instant::now() < d) {
        std::thread::sleep(Duration::from_millis(20));
    }
    let stats = handle.release();
    println!(
        "held load for {:.2} s: cpu {:.3} s, written {} B, memory {} B",
        stats.held_s,
        stats.cpu_time_ns as f64 / 1e9,
        stats.bytes_written,
        stats.mem_bytes
    );
    Ok(0)
}
