//! Acceptance suite. Prints one PASS/FAIL line per criterion and a summary.
//!
//! `ACCEPTANCE_ONLY=2,5` runs a subset. `ACCEPTANCE_STRICT=1` makes any
//! failed criterion fail the test process. Criteria run one at a time
//! because several of them time whole-process runs on the host.

use std::cell::Cell;
use std::collections::BTreeSet;
use std::path::Path;
use std::process::{Command, Output, Stdio};
use std::sync::Arc;
use std::time::{Duration, Instant};

use emuprof_core::emulator::{
    AtomTask, Calibration, EmulationPlan, Emulator, EmulatorConfig, SampleGroup,
};
use emuprof_core::exec::ExecMode;
use emuprof_core::model::{aggregate_stats, CpuSample, IoSample, MemSample, Payload, Profile, ResourceKind, Series};
use emuprof_core::sampler::{Profiler, ProfilerConfig};
use emuprof_core::store::{
    DocumentBackend, FileStore, MemoryDocuments, ProfileKey, ProfileStore, StoreError,
};
use emuprof_core::telemetry::{ScriptedTrajectory, SyntheticTarget, SyntheticTelemetry};
use emuprof_core::testutil::{cpu, profile_from_series, random_profile, test_system};
use proptest::prelude::*;
use proptest::test_runner::{Config as RunnerConfig, TestRunner};

const EMUPROF: &str = env!("CARGO_BIN_EXE_emuprof");
const WORKLOAD: &str = env!("CARGO_BIN_EXE_emuprof-workload");

const MIB: u64 = 1 << 20;
/// Fixed memory overhead of the emulator process itself (binary, thread
/// stacks, profile document, calibration buffers) allowed on top of the
/// relative tolerance when comparing peak memory.
const EMULATOR_MEMORY_ALLOWANCE: f64 = 150e6;

type Verdict = Result<String, String>;

struct Criterion {
    id: u32,
    name: &'static str,
    run: fn() -> Verdict,
}

fn main() {
    let only: Option<BTreeSet<u32>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let criteria = [
        Criterion { id: 1, name: "synthetic totals are exact at 0.5/1/5/10 Hz", run: oracle_exactness },
        Criterion { id: 2, name: "profiling overhead within 5% of unprofiled TTC", run: overhead },
        Criterion { id: 3, name: "instruction CV below 5% over 10 repeats", run: consistency },
        Criterion { id: 4, name: "multi-sample peak within 10% of the 10 Hz peak", run: rate_stabilization },
        Criterion { id: 5, name: "same-host emulation TTC within 15% and ordered", run: fidelity },
        Criterion { id: 6, name: "profiled emulation reproduces the profile totals", run: round_trip },
        Criterion { id: 7, name: "group barriers hold for random plans", run: barriers },
        Criterion { id: 8, name: "store size limit, round trip and statistics", run: store_limits },
        Criterion { id: 9, name: "one-sample emulation completes within 2 s", run: startup },
    ];
    let (mut passed, mut failed) = (0, 0);
    for c in criteria.iter().filter(|c| only.as_ref().is_none_or(|o| o.contains(&c.id))) {
        let started = Instant::now();
        let verdict = (c.run)();
        let secs = started.elapsed().as_secs_f64();
        match verdict {
            Ok(detail) => {
                passed += 1;
                println!("PASS criterion {}: {} [{detail}] ({secs:.1} s)", c.id, c.name);
            }
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {}: {} [{detail}] ({secs:.1} s)", c.id, c.name);
            }
        }
    }
    println!("acceptance: {passed} passed, {failed} failed");
    if failed > 0 && std::env::var_os("ACCEPTANCE_STRICT").is_some() {
        std::process::exit(1);
    }
}

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn rel_diff(value: f64, reference: f64) -> f64 {
    (value - reference).abs() / reference
}

/// A private store and scratch directory for CLI runs.
struct Bench {
    store: tempfile::TempDir,
    scratch: tempfile::TempDir,
}

impl Bench {
    fn new() -> Self {
        Bench { store: tempfile::tempdir().unwrap(), scratch: tempfile::tempdir().unwrap() }
    }

    fn store_path(&self) -> &Path {
        self.store.path()
    }

    fn emuprof_argv(&self, args: &[&str]) -> Vec<String> {
        let mut argv = vec![
            EMUPROF.to_string(),
            "--store".into(),
            self.store_path().display().to_string(),
            "--scratch".into(),
            self.scratch.path().display().to_string(),
        ];
        argv.extend(args.iter().map(|s| s.to_string()));
        argv
    }

    fn emuprof(&self, args: &[&str]) -> (Output, f64) {
        let argv = self.emuprof_argv(args);
        let started = Instant::now();
        let out = Command::new(&argv[0]).args(&argv[1..]).stdin(Stdio::null()).output().expect("run emuprof");
        (out, started.elapsed().as_secs_f64())
    }

    fn run_ok(&self, args: &[&str]) -> Result<f64, String> {
        let (out, wall) = self.emuprof(args);
        if out.status.success() {
            Ok(wall)
        } else {
            Err(format!("`emuprof {}` failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr).trim()))
        }
    }

    /// Profiles `target` and returns the stored profile.
    fn profile(&self, tags: &[&str], rate: Option<f64>, target: &[String]) -> Result<Profile, String> {
        let mut args: Vec<String> = vec!["profile".into(), "--quiet".into()];
        let rate_s;
        if let Some(r) = rate {
            rate_s = r.to_string();
            args.extend(["--rate".into(), rate_s]);
        } else {
            args.push("--no-sample".into());
        }
        for t in tags {
            args.extend(["--tag".into(), t.to_string()]);
        }
        args.push("--".into());
        args.extend(target.iter().cloned());
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        self.run_ok(&refs)?;
        self.latest(tags, target)
    }

    fn latest(&self, tags: &[&str], target: &[String]) -> Result<Profile, String> {
        let store = FileStore::open(self.store_path()).map_err(|e| e.to_string())?;
        store.latest(&ProfileKey::new(target.join(" "), tags.iter().copied())).map_err(|e| e.to_string())
    }

    /// Emulates the latest profile of `target`; returns the wall time of the
    /// emulate process.
    fn emulate(&self, tags: &[&str], target: &[String]) -> Result<f64, String> {
        let refs = emulate_args(tags, target);
        let refs: Vec<&str> = refs.iter().map(String::as_str).collect();
        self.run_ok(&refs)
    }
}

fn emulate_args(tags: &[&str], target: &[String]) -> Vec<String> {
    let mut args: Vec<String> = vec!["emulate".into()];
    for t in tags {
        args.extend(["--tag".into(), t.to_string()]);
    }
    args.push("--".into());
    args.extend(target.iter().cloned());
    args
}

fn workload(args: &[&str]) -> Vec<String> {
    std::iter::once(WORKLOAD.to_string()).chain(args.iter().map(|s| s.to_string())).collect()
}

fn wall_of(argv: &[String]) -> f64 {
    let started = Instant::now();
    let status = Command::new(&argv[0]).args(&argv[1..]).stdout(Stdio::null()).status().expect("run workload");
    assert!(status.success(), "{argv:?} failed");
    started.elapsed().as_secs_f64()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Work-unit counts sized from a short pilot run so that each workload
/// takes roughly the requested time on this host.
struct Sizer {
    compute_per_s: f64,
    write_mib_per_s: f64,
    mixed_steps_per_s: f64,
}

impl Sizer {
    fn measure() -> Self {
        let pilot = |args: &[&str], units: f64| {
            let t = median((0..3).map(|_| wall_of(&workload(args))).collect());
            units / t
        };
        Sizer {
            compute_per_s: pilot(&["compute", "--iterations", "50000000"], 5e7),
            write_mib_per_s: pilot(&["write", "--mebibytes", "1024"], 1024.0),
            mixed_steps_per_s: pilot(&["mixed", "--steps", "100000"], 1e5),
        }
    }

    fn compute(&self, secs: f64) -> Vec<String> {
        workload(&["compute", "--iterations", &((self.compute_per_s * secs) as u64).to_string()])
    }

    fn write(&self, secs: f64) -> Vec<String> {
        workload(&["write", "--mebibytes", &((self.write_mib_per_s * secs) as u64).to_string()])
    }

    fn mixed(&self, secs: f64) -> Vec<String> {
        workload(&["mixed", "--steps", &((self.mixed_steps_per_s * secs) as u64).to_string()])
    }
}

fn oracle_exactness() -> Verdict {
    let cpu_at = |t: f64, instructions: u64| {
        (t, Payload::Cpu(CpuSample { instructions, cycles_used: instructions / 2 * 3, cpu_time_ns: instructions / 4, threads: 2, ..Default::default() }))
    };
    let mem_at = |t: f64, peak: u64, resident: u64, alloc: u64, freed: u64| {
        (t, Payload::Mem(MemSample { peak_bytes: peak, resident_bytes: resident, allocated_bytes: alloc, freed_bytes: freed }))
    };
    let io_at = |t: f64, read: u64, written: u64| (t, Payload::Io(IoSample { bytes_read: read, bytes_written: written }));
    let script = ScriptedTrajectory::new(test_system())
        .with_breakpoints(
            ResourceKind::Compute,
            vec![cpu_at(0.0, 0), cpu_at(0.7, 3_000_000_017), cpu_at(1.3, 3_100_000_001), cpu_at(2.1, 7_777_777_777)],
        )
        .and_then(|s| {
            s.with_breakpoints(
                ResourceKind::Memory,
                vec![
                    mem_at(0.0, 0, 0, 0, 0),
                    mem_at(0.9, 300 * MIB + 7, 300 * MIB + 7, 300 * MIB + 7, 0),
                    mem_at(2.1, 300 * MIB + 7, 120 * MIB, 310 * MIB + 11, 190 * MIB + 11),
                ],
            )
        })
        .and_then(|s| {
            s.with_breakpoints(
                ResourceKind::Storage,
                vec![io_at(0.0, 0, 0), io_at(0.4, 123_456_789, 0), io_at(2.1, 123_456_789, 987_654_321)],
            )
        })
        .map_err(|e| e.to_string())?;
    let script = Arc::new(script);
    let fin = |kind| script.final_values(kind).unwrap();
    let (Payload::Cpu(c), Payload::Mem(m), Payload::Io(io)) =
        (fin(ResourceKind::Compute), fin(ResourceKind::Memory), fin(ResourceKind::Storage))
    else {
        return Err("trajectory payload kinds".into());
    };
    let mut details = Vec::new();
    for rate in [0.5, 1.0, 5.0, 10.0] {
        let telemetry = Arc::new(SyntheticTelemetry::new(script.clone()));
        let profiler = Profiler::new(telemetry, ProfilerConfig::default().with_rate(rate)).map_err(|e| e.to_string())?;
        let p = profiler
            .profile_target("synthetic", Box::new(SyntheticTarget::start(script.clone())))
            .map_err(|e| e.to_string())?;
        let t = &p.totals;
        let got = [t.instructions, t.cycles_used, t.cpu_time_ns, t.peak_bytes, t.allocated_bytes, t.freed_bytes, t.bytes_read, t.bytes_written];
        let want = [c.instructions, c.cycles_used, c.cpu_time_ns, m.peak_bytes, m.allocated_bytes, m.freed_bytes, io.bytes_read, io.bytes_written];
        if got != want {
            return Err(format!("{rate} Hz: totals {got:?} != trajectory {want:?}"));
        }
        details.push(format!("{rate} Hz: {} samples", p.sample_count()));
    }
    Ok(details.join(", "))
}

const OVERHEAD_RATES: [Option<f64>; 4] = [None, Some(0.1), Some(1.0), Some(10.0)];

fn rate_tag(rate: Option<f64>) -> String {
    rate.map_or("plain".into(), |r| format!("rate-{r}"))
}

/// Runs every configuration `repeats` times, rotating the order between
/// rounds so slow drift in host speed spreads evenly over configurations.
fn interleaved(bench: &Bench, rates: &[Option<f64>], repeats: usize, target: &[String]) -> Result<Vec<Vec<Profile>>, String> {
    let mut runs = vec![Vec::new(); rates.len()];
    for round in 0..repeats {
        for k in 0..rates.len() {
            let i = (k + round) % rates.len();
            runs[i].push(bench.profile(&[&rate_tag(rates[i])], rates[i], target)?);
        }
    }
    Ok(runs)
}

fn cv(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt() / mean
}

fn overhead() -> Verdict {
    let bench = Bench::new();
    let sizer = Sizer::measure();
    let mut worst: f64 = 0.0;
    let mut details = Vec::new();
    for (secs, repeats) in [(1.0, 5), (10.0, 3), (60.0, 1)] {
        let runs = interleaved(&bench, &OVERHEAD_RATES, repeats, &sizer.compute(secs))?;
        let ttcs: Vec<Vec<f64>> = runs.iter().map(|r| r.iter().map(|p| p.ttc_s).collect()).collect();
        let plain = median(ttcs[0].clone());
        let mut row = format!("~{secs} s x{repeats} plain {plain:.3} s");
        if repeats > 1 {
            row.push_str(&format!(" (cv {:.1}%)", cv(&ttcs[0]) * 100.0));
        }
        for (rate, t) in OVERHEAD_RATES.iter().zip(&ttcs).skip(1) {
            let profiled = median(t.clone());
            worst = worst.max(rel_diff(profiled, plain));
            row.push_str(&format!(", {} Hz {:+.2}%", rate.unwrap(), (profiled - plain) / plain * 100.0));
        }
        details.push(row);
    }
    check(worst <= 0.05, format!("worst {:.2}%; {}", worst * 100.0, details.join("; ")))
}

fn consistency() -> Verdict {
    let bench = Bench::new();
    let target = Sizer::measure().compute(10.0);
    let rates = [Some(0.1), Some(1.0), Some(10.0)];
    let runs = interleaved(&bench, &rates, 10, &target)?;
    let mut worst: f64 = 0.0;
    let mut details = Vec::new();
    for (rate, profiles) in rates.iter().zip(&runs) {
        let stats = aggregate_stats(profiles).map_err(|e| e.to_string())?;
        let s = stats.get("instructions").ok_or("no instruction statistics")?;
        let instr_cv = s.stddev / s.mean;
        worst = worst.max(instr_cv);
        let ttc_cv = cv(&profiles.iter().map(|p| p.ttc_s).collect::<Vec<_>>());
        details.push(format!(
            "{} Hz n={} instructions cv {:.2}% (ttc cv {:.2}%)",
            rate.unwrap(),
            stats.n,
            instr_cv * 100.0,
            ttc_cv * 100.0
        ));
    }
    check(worst < 0.05, details.join(", "))
}

fn rate_stabilization() -> Verdict {
    let bench = Bench::new();
    let target = Sizer::measure().mixed(6.0);
    let reference = bench.profile(&["rate-10"], Some(10.0), &target)?.totals.peak_bytes as f64;
    let mut details = vec![format!("10 Hz peak {:.1} MiB", reference / MIB as f64)];
    let mut ok = true;
    for rate in [0.1, 0.2, 0.5, 1.0, 2.0, 5.0] {
        let p = bench.profile(&[&format!("rate-{rate}")], Some(rate), &target)?;
        let samples = p.series.get(&ResourceKind::Memory).map_or(0, Vec::len);
        let d = rel_diff(p.totals.peak_bytes as f64, reference);
        if samples >= 2 {
            ok &= d <= 0.10;
        }
        details.push(format!("{rate} Hz {samples} samples {:+.1}%", (p.totals.peak_bytes as f64 - reference) / reference * 100.0));
    }
    check(ok, details.join(", "))
}

fn fidelity() -> Verdict {
    let bench = Bench::new();
    let sizer = Sizer::measure();
    let mut ok = true;
    let mut details = Vec::new();
    for (name, target) in [("compute", sizer.compute(13.0)), ("write", sizer.write(13.0)), ("mixed", sizer.mixed(13.0))] {
        let original = bench.profile(&[], Some(1.0), &target)?.ttc_s;
        let emulated = bench.emulate(&[], &target)?;
        let d = rel_diff(emulated, original);
        ok &= original >= 10.0 && d <= 0.15;
        details.push(format!("{name} {original:.2} s -> {emulated:.2} s ({:+.1}%)", (emulated - original) / original * 100.0));
    }
    let mut pairs = Vec::new();
    for secs in [2.0, 4.0, 6.0, 8.0] {
        let target = sizer.mixed(secs);
        let original = bench.profile(&[], Some(1.0), &target)?.ttc_s;
        pairs.push((original, bench.emulate(&[], &target)?));
    }
    let strictly_increasing = |v: &[f64]| v.windows(2).all(|w| w[0] < w[1]);
    let originals: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let emulated: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let mut by_original: Vec<usize> = (0..pairs.len()).collect();
    by_original.sort_by(|&a, &b| originals[a].total_cmp(&originals[b]));
    let reordered: Vec<f64> = by_original.iter().map(|&i| emulated[i]).collect();
    ok &= strictly_increasing(&reordered);
    details.push(format!(
        "mixed ordering {}",
        pairs.iter().map(|(o, e)| format!("{o:.2}->{e:.2}")).collect::<Vec<_>>().join(" ")
    ));
    check(ok, details.join("; "))
}

fn round_trip() -> Verdict {
    let bench = Bench::new();
    let target = Sizer::measure().mixed(6.0);
    let original = bench.profile(&["P"], Some(1.0), &target)?;
    let mut emulate = bench.emuprof_argv(&[]);
    emulate.extend(emulate_args(&["P"], &target));
    let emulated = bench.profile(&["round-trip"], Some(1.0), &emulate)?;
    let (o, e) = (&original.totals, &emulated.totals);
    let mut ok = true;
    let mut details = Vec::new();
    for (name, orig, emu) in [
        ("instructions", o.instructions, e.instructions),
        ("bytes_read", o.bytes_read, e.bytes_read),
        ("bytes_written", o.bytes_written, e.bytes_written),
    ] {
        let d = rel_diff(emu as f64, orig as f64);
        ok &= d <= 0.10;
        details.push(format!("{name} {:+.2}%", (emu as f64 - orig as f64) / orig as f64 * 100.0));
    }
    let (po, pe) = (o.peak_bytes as f64, e.peak_bytes as f64);
    ok &= (pe - po).abs() <= 0.10 * po + EMULATOR_MEMORY_ALLOWANCE;
    details.push(format!("peak {:.1} MiB -> {:.1} MiB", po / MIB as f64, pe / MIB as f64));
    check(ok, details.join(", "))
}

fn group_strategy() -> impl Strategy<Value = Vec<SampleGroup>> {
    let task = (
        proptest::option::of((0u64..3_000_000, 0.05f64..=1.0)),
        proptest::option::of((0u64..(4 * MIB), 0u64..=100, 4096u64..(256 * 1024))),
        proptest::option::of((0u64..(512 * 1024), 0u64..(512 * 1024), 512u64..(128 * 1024))),
    );
    proptest::collection::vec(task, 1..6).prop_map(|specs| {
        let mut held = 0u64;
        specs
            .into_iter()
            .enumerate()
            .map(|(i, (c, m, s))| {
                let mut tasks = Vec::new();
                if let Some((instructions, efficiency_target)) = c {
                    tasks.push(AtomTask::Compute { instructions, efficiency_target });
                }
                if let Some((alloc_bytes, free_pct, block_bytes)) = m {
                    held += alloc_bytes;
                    let free_bytes = held * free_pct / 100;
                    held -= free_bytes;
                    tasks.push(AtomTask::Memory { alloc_bytes, free_bytes, block_bytes });
                }
                if let Some((read_bytes, write_bytes, block_bytes)) = s {
                    tasks.push(AtomTask::Storage { read_bytes, write_bytes, block_bytes });
                }
                if tasks.is_empty() {
                    tasks.push(AtomTask::Compute { instructions: 1_000, efficiency_target: 1.0 });
                }
                SampleGroup { index: i as u64 * 2 + 1, tasks }
            })
            .collect()
    })
}

fn barriers() -> Verdict {
    let scratch = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut runner = TestRunner::new(RunnerConfig { cases: 128, failure_persistence: None, ..RunnerConfig::default() });
    let cases = Cell::new(0u32);
    let result = runner.run(&group_strategy(), |groups| {
        let sequential = cases.get().is_multiple_of(2);
        let config = EmulatorConfig {
            scratch_dir: scratch.path().to_path_buf(),
            exec_mode: if sequential { ExecMode::Sequential } else { ExecMode::Parallel },
            calibration_time: Duration::ZERO,
        };
        let plan = EmulationPlan::new(groups).map_err(|e| TestCaseError::fail(e.to_string()))?;
        let report = Emulator::with_calibration(config, Calibration::fallback())
            .emulate(&plan)
            .map_err(|e| TestCaseError::fail(e.to_string()))?;
        prop_assert_eq!(report.groups.len(), plan.groups().len());
        prop_assert!(report.barrier_holds(), "barrier violated: {:?}", report.groups);
        cases.set(cases.get() + 1);
        Ok(())
    });
    match result {
        Ok(()) => check(cases.get() >= 100, format!("{} random plans", cases.get())),
        Err(e) => Err(e.to_string()),
    }
}

/// Brute-force mean and population standard deviation in exact integer
/// arithmetic, for totals that are whole numbers.
fn exact_mean_stddev(values: &[u64]) -> (f64, f64) {
    let n = values.len() as u128;
    let sum: u128 = values.iter().map(|&v| v as u128).sum();
    let sum_sq: u128 = values.iter().map(|&v| v as u128 * v as u128).sum();
    // n^2 var = n sum_sq - sum^2, exact in u128 for these magnitudes
    let scaled_var = n * sum_sq - sum * sum;
    let mean = sum as f64 / n as f64;
    let var = scaled_var as f64 / (n * n) as f64;
    (mean, var.sqrt())
}

fn close(a: f64, b: f64) -> bool {
    a == b || (a - b).abs() <= 1e-12 * a.abs().max(b.abs())
}

fn store_limits() -> Verdict {
    let mut details = Vec::new();

    let docs = DocumentBackend::new(MemoryDocuments::new());
    let limit = docs.limits().max_document_bytes as f64;
    let compact_len = |p: &Profile| serde_json::to_vec(p).map(|v| v.len()).unwrap_or(0);
    let sized = |target: f64| {
        let mut n = 1000usize;
        let mut p = random_profile("big", &[], n, 1);
        for _ in 0..3 {
            n = (n as f64 * target / compact_len(&p) as f64) as usize;
            p = random_profile("big", &[], n, 1);
        }
        p
    };
    let (under, over) = (sized(limit * 0.98), sized(limit * 1.02));
    let (under_len, over_len) = (compact_len(&under), compact_len(&over));
    if under_len as f64 >= limit || over_len as f64 <= limit {
        return Err(format!("fixture sizes {under_len} / {over_len} do not straddle the limit"));
    }
    docs.save(&under).map_err(|e| format!("{under_len} byte profile rejected: {e}"))?;
    match docs.save(&over) {
        Err(StoreError::StoreLimit { .. }) if docs.documents().document_count() == 1 => details.push(format!(
            "{} samples / {:.2} MiB accepted, {} samples / {:.2} MiB rejected",
            under.sample_count(),
            under_len as f64 / MIB as f64,
            over.sample_count(),
            over_len as f64 / MIB as f64
        )),
        other => return Err(format!("oversize profile of {over_len} bytes: {other:?}")),
    }

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let backends: Vec<(&str, Box<dyn ProfileStore>)> = vec![
        ("file", Box::new(FileStore::open(dir.path().join("files")).map_err(|e| e.to_string())?)),
        ("document", Box::new(DocumentBackend::new(MemoryDocuments::new()))),
    ];
    for (name, store) in &backends {
        let saved: Vec<Profile> = (0..4).map(|i| random_profile("rt", &["x"], 50 + i, 100 + i as u64)).collect();
        for p in &saved {
            store.save(p).map_err(|e| e.to_string())?;
        }
        let loaded = store.load(&ProfileKey::of(&saved[0])).map_err(|e| e.to_string())?;
        let mut want = saved.clone();
        want.sort_by_key(|p| p.created_at);
        if loaded != want {
            return Err(format!("{name} backend: loaded profiles differ from saved"));
        }
    }
    details.push("save/load identity on both backends".into());

    let profiles: Vec<Profile> = (0..25).map(|i| random_profile("stats", &[], 40, 7 + i)).collect();
    let stats = aggregate_stats(&profiles).map_err(|e| e.to_string())?;
    let mut compared = 0;
    for (metric, values) in [
        ("instructions", profiles.iter().map(|p| p.totals.instructions).collect::<Vec<_>>()),
        ("bytes_read", profiles.iter().map(|p| p.totals.bytes_read).collect()),
        ("bytes_written", profiles.iter().map(|p| p.totals.bytes_written).collect()),
        ("peak_bytes", profiles.iter().map(|p| p.totals.peak_bytes).collect()),
        ("allocated_bytes", profiles.iter().map(|p| p.totals.allocated_bytes).collect()),
        ("freed_bytes", profiles.iter().map(|p| p.totals.freed_bytes).collect()),
        ("cpu_time_ns", profiles.iter().map(|p| p.totals.cpu_time_ns).collect()),
    ] {
        let got = stats.get(metric).ok_or_else(|| format!("missing {metric}"))?;
        let (mean, stddev) = exact_mean_stddev(&values);
        if !(close(got.mean, mean) && close(got.stddev, stddev)) {
            return Err(format!("{metric}: {got:?} vs oracle mean {mean} stddev {stddev}"));
        }
        compared += 1;
    }
    details.push(format!("{compared} metrics match the exact oracle"));
    Ok(details.join(", "))
}

fn startup() -> Verdict {
    let bench = Bench::new();
    let mut series = Series::new();
    series.insert(ResourceKind::Compute, vec![cpu(0, 0.005, 1_000_000)]);
    let profile = profile_from_series("minimal", &[], series, 1.0);
    FileStore::open(bench.store_path()).and_then(|s| s.save(&profile)).map_err(|e| e.to_string())?;
    let wall = bench.emulate(&[], &["minimal".to_string()])?;
    check(wall < 2.0, format!("{wall:.3} s"))
}
