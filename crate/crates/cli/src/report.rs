//! CSV tables over stored profiles.

use std::io::Write;

use emuprof_core::emulator::EMULATED_TAG;
use emuprof_core::model::{aggregate_stats, mean_stddev, MetricStats, Profile};
use emuprof_core::store::{ProfileKey, ProfileStore, StoreError};

pub struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    fn new(header: &[&str]) -> Self {
        Table { header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn write_csv(&self, out: &mut dyn Write) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(&self.header)?;
        for row in &self.rows {
            w.write_record(row)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn tags_of(config: &str) -> Vec<String> {
    config.split(',').map(str::trim).filter(|t| !t.is_empty()).map(String::from).collect()
}

fn load(store: &dyn ProfileStore, key: ProfileKey) -> Result<Vec<Profile>, StoreError> {
    let profiles = store.load(&key)?;
    if profiles.is_empty() {
        return Err(StoreError::NotFound(key));
    }
    Ok(profiles)
}

fn load_config(store: &dyn ProfileStore, command: &str, config: &str) -> Result<Vec<Profile>, StoreError> {
    load(store, ProfileKey::new(command, tags_of(config)))
}

fn ttc_stats(profiles: &[Profile]) -> MetricStats {
    mean_stddev(&profiles.iter().map(|p| p.ttc_s).collect::<Vec<_>>())
}

fn num(v: f64) -> String {
    v.to_string()
}

fn percent_diff(value: f64, reference: f64) -> f64 {
    (value - reference) / reference * 100.0
}

/// Mean TTC of each configuration relative to the baseline configuration.
pub fn overhead(store: &dyn ProfileStore, command: &str, baseline: &str, configs: &[String]) -> Result<Table, StoreError> {
    let base = ttc_stats(&load_config(store, command, baseline)?);
    let mut t = Table::new(&["config", "n", "ttc_mean_s", "ttc_stddev_s", "baseline_ttc_mean_s", "overhead_pct"]);
    for config in configs {
        let profiles = load_config(store, command, config)?;
        let s = ttc_stats(&profiles);
        t.push(vec![
            config.clone(),
            profiles.len().to_string(),
            num(s.mean),
            num(s.stddev),
            num(base.mean),
            num(percent_diff(s.mean, base.mean)),
        ]);
    }
    Ok(t)
}

/// Spread of the main metrics across repeats of each configuration.
pub fn consistency(store: &dyn ProfileStore, command: &str, configs: &[String]) -> Result<Table, StoreError> {
    let mut t = Table::new(&[
        "config",
        "n",
        "sample_rate_hz",
        "ttc_mean_s",
        "ttc_stddev_s",
        "instructions_mean",
        "instructions_stddev",
        "instructions_cv",
        "peak_bytes_mean",
        "peak_bytes_stddev",
        "bytes_written_mean",
        "bytes_written_stddev",
    ]);
    for config in configs {
        let profiles = load_config(store, command, config)?;
        let stats = aggregate_stats(&profiles).map_err(StoreError::Invalid)?;
        let metric = |name: &str| stats.get(name).copied().unwrap_or(MetricStats { mean: f64::NAN, stddev: f64::NAN });
        let (ttc, instr, peak, written) =
            (ttc_stats(&profiles), metric("instructions"), metric("peak_bytes"), metric("bytes_written"));
        let cv = if instr.mean > 0.0 { instr.stddev / instr.mean } else { 0.0 };
        t.push(vec![
            config.clone(),
            stats.n.to_string(),
            num(profiles[0].sample_rate_hz),
            num(ttc.mean),
            num(ttc.stddev),
            num(instr.mean),
            num(instr.stddev),
            num(cv),
            num(peak.mean),
            num(peak.stddev),
            num(written.mean),
            num(written.stddev),
        ]);
    }
    Ok(t)
}

/// Profiled TTC against the TTC of stored emulation runs of the same key.
pub fn fidelity(store: &dyn ProfileStore, command: &str, configs: &[String]) -> Result<Table, StoreError> {
    let mut t =
        Table::new(&["config", "n_original", "original_ttc_s", "n_emulated", "emulated_ttc_s", "diff_pct"]);
    for config in configs {
        let original = load_config(store, command, config)?;
        let mut tags = tags_of(config);
        tags.push(EMULATED_TAG.to_string());
        let emulated = load(store, ProfileKey::new(command, tags))?;
        let (o, e) = (ttc_stats(&original), ttc_stats(&emulated));
        t.push(vec![
            config.clone(),
            original.len().to_string(),
            num(o.mean),
            emulated.len().to_string(),
            num(e.mean),
            num(percent_diff(e.mean, o.mean)),
        ]);
    }
    Ok(t)
}

/// One row per stored profile with its totals.
pub fn profiles(store: &dyn ProfileStore, command: &str, configs: &[String]) -> Result<Table, StoreError> {
    let metric_names: Vec<&str> = emuprof_core::model::Totals::default().metrics().into_iter().map(|(n, _)| n).collect();
    let mut header = vec!["config", "created_at", "exit_status", "samples", "ttc_s"];
    header.extend(&metric_names);
    let mut t = Table::new(&header);
    for config in configs {
        for p in load_config(store, command, config)? {
            let mut row = vec![
                config.clone(),
                p.created_at.to_rfc3339(),
                p.exit_status.to_string(),
                p.sample_count().to_string(),
                num(p.ttc_s),
            ];
            row.extend(p.totals.metrics().into_iter().map(|(_, v)| v.map(num).unwrap_or_default()));
            t.push(row);
        }
    }
    Ok(t)
}
