//! Small deterministic workloads for profiling and emulation runs.

use std::fs::File;
use std::hint::black_box;
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

const FRAME_BYTES: usize = 64 * 1024;
const BLOCK_BYTES: usize = 1 << 20;
const WRAP_BLOCKS: u64 = 1024;

#[derive(Parser)]
#[command(name = "emuprof-workload", about = "Reference workloads")]
struct Cli {
    #[command(subcommand)]
    command: Workload,
}

#[derive(Subcommand)]
enum Workload {
    /// Floating point loop
    Compute {
        #[arg(long, default_value_t = 100_000_000)]
        iterations: u64,
    },
    /// Sequential 1 MiB writes to a scratch file that wraps at 1 GiB
    Write {
        #[arg(long, default_value_t = 256)]
        mebibytes: u64,
        #[arg(long)]
        dir: Option<PathBuf>,
    },
    /// Reads its own executable, holds 64 MiB, computes in short steps and
    /// writes a 64 KiB frame every 1000 steps
    Mixed {
        #[arg(long, default_value_t = 1_000_000)]
        steps: u64,
        #[arg(long)]
        dir: Option<PathBuf>,
    },
    /// Exits with the given status
    Fail {
        #[arg(long, default_value_t = 1)]
        status: u8,
    },
}

fn compute(iterations: u64) -> f64 {
    let mut x = 1.0f64;
    for i in 0..iterations {
        x = black_box(x * 1.000_000_1 + (i & 7) as f64 * 1e-9);
    }
    x
}

struct Scratch(PathBuf, File);

impl Scratch {
    fn create(dir: Option<PathBuf>, name: &str) -> std::io::Result<Self> {
        let path = dir.unwrap_or_else(std::env::temp_dir).join(format!(".{name}-{}", std::process::id()));
        let file = File::create(&path)?;
        Ok(Scratch(path, file))
    }
}

impl Drop for Scratch {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.0);
    }
}

fn write(mebibytes: u64, dir: Option<PathBuf>) -> std::io::Result<()> {
    let mut s = Scratch::create(dir, "workload-write")?;
    let block = vec![0x5au8; BLOCK_BYTES];
    for i in 0..mebibytes {
        if i > 0 && i % WRAP_BLOCKS == 0 {
            s.1.seek(SeekFrom::Start(0))?;
        }
        s.1.write_all(&block)?;
    }
    Ok(())
}

fn mixed(steps: u64, dir: Option<PathBuf>) -> std::io::Result<()> {
    let mut exe = Vec::new();
    File::open(std::env::current_exe()?)?.read_to_end(&mut exe)?;
    let mut held = vec![0u8; 64 << 20];
    for page in held.chunks_mut(4096) {
        page[0] = 1;
    }
    let mut s = Scratch::create(dir, "workload-mixed")?;
    let frame = vec![0xa5u8; FRAME_BYTES];
    let mut acc = 0.0;
    for step in 0..steps {
        acc += compute(500);
        if step % 1000 == 999 {
            s.1.write_all(&frame)?;
        }
    }
    black_box((acc, exe.len(), &held));
    Ok(())
}

fn main() -> ExitCode {
    let result = match Cli::parse().command {
        Workload::Compute { iterations } => {
            black_box(compute(iterations));
            Ok(())
        }
        Workload::Write { mebibytes, dir } => write(mebibytes, dir),
        Workload::Mixed { steps, dir } => mixed(steps, dir),
        Workload::Fail { status } => return ExitCode::from(status),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("emuprof-workload: {e}");
            ExitCode::FAILURE
        }
    }
}
