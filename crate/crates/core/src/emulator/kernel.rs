//! Cache-resident compute kernel and its per-host calibration.

use std::hint::black_box;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::model::{Payload, ResourceKind};
use crate::telemetry::{CounterSnapshot, ProbeTarget, Telemetry};

pub const KERNEL_DIM: usize = 16;

/// Instructions per kernel iteration assumed when calibration fails.
pub const STATIC_INSTRUCTIONS_PER_ITERATION: f64 = 10_000.0;
const STATIC_SECONDS_PER_ITERATION: f64 = 5e-6;

/// Busy/sleep period used to lower the effective efficiency.
pub const DUTY_QUANTUM: Duration = Duration::from_millis(10);

type Matrix = [[f64; KERNEL_DIM]; KERNEL_DIM];

/// 16x16 double precision matrix multiply. Three matrices (6 KiB) stay in
/// L1 cache.
pub struct Kernel {
    a: Matrix,
    b: Matrix,
    c: Matrix,
}

impl Default for Kernel {
    fn default() -> Self {
        Self::new()
    }
}

impl Kernel {
    pub fn new() -> Self {
        let mut a = [[0.0; KERNEL_DIM]; KERNEL_DIM];
        let mut b = [[0.0; KERNEL_DIM]; KERNEL_DIM];
        for i in 0..KERNEL_DIM {
            for j in 0..KERNEL_DIM {
                a[i][j] = ((i * KERNEL_DIM + j) % 7) as f64 * 0.125;
                b[i][j] = if i == j { 0.5 } else { 1.0 / (1 + i + j) as f64 };
            }
        }
        Kernel { a, b, c: [[0.0; KERNEL_DIM]; KERNEL_DIM] }
    }

    #[inline(never)]
    #[allow(clippy::needless_range_loop)]
    fn step(&mut self) {
        let a = black_box(&mut self.a);
        for i in 0..KERNEL_DIM {
            for j in 0..KERNEL_DIM {
                let mut acc = 0.0;
                for k in 0..KERNEL_DIM {
                    acc += a[i][k] * self.b[k][j];
                }
                self.c[i][j] = acc;
            }
        }
        // feed one result back so successive iterations depend on each other
        a[0][0] = self.c[KERNEL_DIM - 1][KERNEL_DIM - 1] * 1e-9 + 0.125;
    }

    pub fn run(&mut self, iterations: u64) {
        for _ in 0..iterations {
            self.step();
        }
        black_box(&self.c);
    }
}

/// User CPU time of the calling thread.
pub fn thread_user_time_ns() -> u64 {
    let mut ru: libc::rusage = unsafe { std::mem::zeroed() };
    // SAFETY: ru is a valid out-pointer for the duration of the call.
    if unsafe { libc::getrusage(libc::RUSAGE_THREAD, &mut ru) } != 0 {
        return 0;
    }
    ru.ru_utime.tv_sec as u64 * 1_000_000_000 + ru.ru_utime.tv_usec as u64 * 1_000
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CalibrationSource {
    Measured,
    Static,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    /// In the unit the telemetry backend reports instructions in.
    pub instructions_per_iteration: f64,
    pub seconds_per_iteration: f64,
    /// Efficiency of the kernel running flat out; 1.0 without stall counters.
    pub natural_efficiency: f64,
    /// Set when the backend derives instructions from CPU time. Compute
    /// atoms then run until they have used the equivalent CPU time.
    #[serde(default)]
    pub cpu_ns_per_instruction: Option<f64>,
    pub source: CalibrationSource,
}

impl Calibration {
    pub fn fallback() -> Self {
        Calibration {
            instructions_per_iteration: STATIC_INSTRUCTIONS_PER_ITERATION,
            seconds_per_iteration: STATIC_SECONDS_PER_ITERATION,
            natural_efficiency: 1.0,
            cpu_ns_per_instruction: None,
            source: CalibrationSource::Static,
        }
    }

    pub fn iterations_for(&self, instructions: u64) -> u64 {
        (instructions as f64 / self.instructions_per_iteration).round() as u64
    }

    /// Fraction of each quantum spent computing to reach `efficiency_target`.
    pub fn duty_for(&self, efficiency_target: f64) -> f64 {
        (efficiency_target / self.natural_efficiency).clamp(0.01, 1.0)
    }
}

/// Measures the kernel on this host for about `duration`, through
/// `telemetry` on the calling process. Falls back to static constants when
/// the backend cannot measure.
///
/// Without hardware counters the backend's instruction unit is user CPU
/// time times the nominal clock, so the kernel is timed with the calling
/// thread's own user time, which other busy threads cannot disturb.
pub fn calibrate(telemetry: &dyn Telemetry, duration: Duration) -> Calibration {
    let me = ProbeTarget::current();
    if telemetry.attach(&me).is_err() {
        return Calibration::fallback();
    }
    let hw = telemetry.hw_counters(&me);
    let freq = telemetry.read_system_info().map(|s| s.max_freq_hz as f64);
    let mut kernel = Kernel::new();
    kernel.run(200);

    let before = telemetry.snapshot(&me, ResourceKind::Compute);
    let cpu0 = thread_user_time_ns();
    let start = Instant::now();
    let mut iterations = 0u64;
    while start.elapsed() < duration {
        kernel.run(256);
        iterations += 256;
    }
    let wall = start.elapsed().as_secs_f64();
    let cpu_ns = thread_user_time_ns().saturating_sub(cpu0);
    let after = telemetry.snapshot(&me, ResourceKind::Compute);
    telemetry.detach(&me);

    let (Ok(before), Ok(after), Ok(freq)) = (before, after, freq) else {
        return Calibration::fallback();
    };
    let cpu_of = |s: &CounterSnapshot| match s.counters {
        Payload::Cpu(c) => Some(c),
        _ => None,
    };
    let (Some(b), Some(a)) = (cpu_of(&before), cpu_of(&after)) else {
        return Calibration::fallback();
    };
    let instructions = if hw {
        a.instructions.saturating_sub(b.instructions) as f64
    } else {
        cpu_ns as f64 * freq / 1e9
    };
    let natural_efficiency = match (
        a.cycles_stalled_frontend.zip(b.cycles_stalled_frontend),
        a.cycles_stalled_backend.zip(b.cycles_stalled_backend),
    ) {
        (Some((fe1, fe0)), Some((be1, be0))) => crate::model::derive_cpu_efficiency(
            a.cycles_used.saturating_sub(b.cycles_used),
            fe1.saturating_sub(fe0),
            be1.saturating_sub(be0),
        ),
        _ => 1.0,
    };
    let ipi = instructions / iterations as f64;
    if !ipi.is_finite() || ipi <= 0.0 || natural_efficiency <= 0.0 {
        return Calibration::fallback();
    }
    Calibration {
        instructions_per_iteration: ipi,
        seconds_per_iteration: wall / iterations as f64,
        natural_efficiency,
        cpu_ns_per_instruction: (!hw).then(|| 1e9 / freq),
        source: CalibrationSource::Measured,
    }
}
