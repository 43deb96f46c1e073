use std::path::Path;
use std::process::{Command, Output};

use emuprof_core::model::{ResourceKind, Series};
use emuprof_core::store::{FileStore, ProfileKey, ProfileStore};
use emuprof_core::testutil::{cpu, io, profile_from_series};

const EMUPROF: &str = env!("CARGO_BIN_EXE_emuprof");
const WORKLOAD: &str = env!("CARGO_BIN_EXE_emuprof-workload");
const MIB: u64 = 1 << 20;

fn emuprof(store: &Path, args: &[&str]) -> Output {
    Command::new(EMUPROF)
        .arg("--store")
        .arg(store)
        .arg("--scratch")
        .arg(store)
        .args(args)
        .env_remove("SYNAPSE_SAMPLE_RATE")
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn load(store: &Path, command: &str, tags: &[&str]) -> Vec<emuprof_core::model::Profile> {
    FileStore::open(store).unwrap().load(&ProfileKey::new(command, tags.iter().copied())).unwrap()
}

#[test]
fn rate_above_cap_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = emuprof(dir.path(), &["profile", "--rate", "11", "--", "true"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("10"));
    assert!(load(dir.path(), "true", &[]).is_empty());
}

#[test]
fn unspawnable_target_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = emuprof(dir.path(), &["profile", "--", "/nonexistent/target"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn failing_target_is_stored_and_flagged() {
    let dir = tempfile::tempdir().unwrap();
    let out = emuprof(dir.path(), &["profile", "--quiet", "--", WORKLOAD, "fail", "--status", "7"]);
    assert_eq!(code(&out), 3);
    let stored = load(dir.path(), &format!("{WORKLOAD} fail --status 7"), &[]);
    assert_eq!(stored.len(), 1);
    assert_eq!(stored[0].exit_status, 7);
    assert!(stored[0].is_flagged());
}

#[test]
fn unknown_key_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&emuprof(dir.path(), &["emulate", "--", "never-profiled"])), 4);
    assert_eq!(code(&emuprof(dir.path(), &["report", "profiles", "--", "never-profiled"])), 4);
}

#[test]
fn zero_stress_exits_immediately() {
    let dir = tempfile::tempdir().unwrap();
    let out = emuprof(dir.path(), &["stress"]);
    assert_eq!(code(&out), 0);
}

#[test]
fn unsatisfiable_stress_exits_5() {
    let dir = tempfile::tempdir().unwrap();
    let out = emuprof(dir.path(), &["stress", "--mem", "100000GiB", "--duration", "1"]);
    assert_eq!(code(&out), 5);
}

#[test]
fn tags_separate_profiles() {
    let dir = tempfile::tempdir().unwrap();
    for tag in ["a", "b", "a"] {
        let out = emuprof(dir.path(), &["profile", "--rate", "10", "--tag", tag, "--", "true"]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    }
    assert_eq!(load(dir.path(), "true", &["a"]).len(), 2);
    assert_eq!(load(dir.path(), "true", &["b"]).len(), 1);
    assert!(load(dir.path(), "true", &[]).is_empty());
}

#[test]
fn rate_flag_overrides_environment() {
    let dir = tempfile::tempdir().unwrap();
    let run = |env: Option<&str>, flag: Option<&str>, tag: &str| {
        let mut cmd = Command::new(EMUPROF);
        cmd.arg("--store").arg(dir.path()).args(["profile", "--tag", tag]);
        if let Some(f) = flag {
            cmd.args(["--rate", f]);
        }
        cmd.env_remove("SYNAPSE_SAMPLE_RATE");
        if let Some(e) = env {
            cmd.env("SYNAPSE_SAMPLE_RATE", e);
        }
        let out = cmd.args(["--", "true"]).output().unwrap();
        (code(&out), load(dir.path(), "true", &[tag]).first().map(|p| p.sample_rate_hz))
    };
    assert_eq!(run(None, None, "default"), (0, Some(1.0)));
    assert_eq!(run(Some("4"), None, "env"), (0, Some(4.0)));
    assert_eq!(run(Some("4"), Some("2"), "flag"), (0, Some(2.0)));
    assert_eq!(run(Some("50"), None, "bad-env").0, 2);
}

fn stored_write_profile(dir: &Path) {
    let mut series = Series::new();
    series.insert(ResourceKind::Compute, vec![cpu(0, 0.005, 2_000_000)]);
    series.insert(ResourceKind::Storage, vec![io(0, 0.006, 0, MIB)]);
    FileStore::open(dir).unwrap().save(&profile_from_series("replay", &[], series, 1.0)).unwrap();
}

#[test]
fn block_size_reaches_the_emulator() {
    let dir = tempfile::tempdir().unwrap();
    stored_write_profile(dir.path());
    let out = emuprof(dir.path(), &["emulate", "--block-size", "4096", "--", "replay"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("storage block size 4096 B"), "{}", stdout(&out));

    let out = emuprof(dir.path(), &["emulate", "--block-size", "4KiB", "--json", "--", "replay"]);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["storage_block_bytes"], 4096);
    let storage = report["groups"][0]["atoms"].as_array().unwrap().iter().find(|a| a["kind"] == "storage").unwrap();
    assert_eq!(storage["consumed"]["ops"], MIB / 4096);
}

#[test]
fn saved_emulation_feeds_the_fidelity_report() {
    let dir = tempfile::tempdir().unwrap();
    stored_write_profile(dir.path());
    assert_eq!(code(&emuprof(dir.path(), &["report", "fidelity", "--", "replay"])), 4);
    let out = emuprof(dir.path(), &["emulate", "--save", "--", "replay"]);
    assert_eq!(code(&out), 0);
    let emulated = load(dir.path(), "replay", &["emulated"]);
    assert_eq!(emulated.len(), 1);
    assert_eq!(emulated[0].totals.bytes_written, MIB);

    let out = emuprof(dir.path(), &["report", "fidelity", "--", "replay"]);
    assert_eq!(code(&out), 0);
    let csv = stdout(&out);
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "config,n_original,original_ttc_s,n_emulated,emulated_ttc_s,diff_pct");
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!((row[0], row[1], row[3]), ("", "1", "1"));
}

#[test]
fn profiles_report_sums_match_store_totals() {
    let dir = tempfile::tempdir().unwrap();
    for _ in 0..3 {
        let out = emuprof(dir.path(), &["profile", "--rate", "10", "--tag", "w", "--", WORKLOAD, "write", "--mebibytes", "8"]);
        assert_eq!(code(&out), 0);
    }
    let command = format!("{WORKLOAD} write --mebibytes 8");
    let out = emuprof(dir.path(), &["report", "profiles", "--config", "w", "--", WORKLOAD, "write", "--mebibytes", "8"]);
    assert_eq!(code(&out), 0);
    let csv = stdout(&out);
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = |name: &str| header.iter().position(|h| *h == name).unwrap();
    let rows: Vec<Vec<String>> = lines.map(|l| l.split(',').map(String::from).collect()).collect();
    assert_eq!(rows.len(), 3);
    let sum = |name: &str| rows.iter().map(|r| r[col(name)].parse::<f64>().unwrap()).sum::<f64>();

    let stored = load(dir.path(), &command, &["w"]);
    assert_eq!(sum("bytes_written"), stored.iter().map(|p| p.totals.bytes_written as f64).sum::<f64>());
    assert_eq!(sum("instructions"), stored.iter().map(|p| p.totals.instructions as f64).sum::<f64>());
    assert!(stored.iter().all(|p| p.totals.bytes_written >= 8 * MIB));
}

#[test]
fn overhead_report_needs_both_configs() {
    let dir = tempfile::tempdir().unwrap();
    for args in [&["profile", "--no-sample", "--tag", "plain", "--", "true"][..], &["profile", "--tag", "one", "--", "true"]] {
        assert_eq!(code(&emuprof(dir.path(), args)), 0);
    }
    let out = emuprof(dir.path(), &["report", "overhead", "--baseline", "plain", "--config", "one", "--", "true"]);
    assert_eq!(code(&out), 0);
    let csv = stdout(&out);
    assert!(csv.starts_with("config,n,ttc_mean_s,ttc_stddev_s,baseline_ttc_mean_s,overhead_pct\none,1,"), "{csv}");
    let out = emuprof(dir.path(), &["report", "overhead", "--baseline", "plain", "--config", "two", "--", "true"]);
    assert_eq!(code(&out), 4);
}
