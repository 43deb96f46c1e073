use proptest::prelude::*;

use emuprof_core::emulator::{plan_from_profile, AtomTask, Tuning};
use emuprof_core::model::{aggregate_stats, integrate_totals};
use emuprof_core::store::{DocumentBackend, MemoryDocuments, ProfileKey, ProfileStore};
use emuprof_core::testutil::random_profile;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn plans_conserve_profile_totals(samples in 1usize..60, seed in any::<u64>(), block in 512u64..(4 << 20)) {
        let p = random_profile("prop", &[], samples, seed);
        let plan = plan_from_profile(&p, &Tuning::default().with_block_size(block)).unwrap();
        let planned = plan.totals();
        prop_assert_eq!(planned.instructions, p.totals.instructions);
        prop_assert_eq!(planned.bytes_read, p.totals.bytes_read);
        prop_assert_eq!(planned.bytes_written, p.totals.bytes_written);
        prop_assert_eq!(planned.allocated_bytes, p.totals.allocated_bytes);
        for g in plan.groups() {
            for t in &g.tasks {
                match *t {
                    AtomTask::Memory { block_bytes, .. } | AtomTask::Storage { block_bytes, .. } => prop_assert_eq!(block_bytes, block),
                    AtomTask::Compute { efficiency_target, .. } => prop_assert!(efficiency_target > 0.0 && efficiency_target <= 1.0),
                }
            }
        }
    }

    #[test]
    fn totals_integrate_the_series(samples in 0usize..60, seed in any::<u64>()) {
        let p = random_profile("prop", &[], samples, seed);
        prop_assert_eq!(integrate_totals(&p.series, p.totals.runtime_s), p.totals.clone());
        prop_assert!(p.validate().is_ok());
    }

    #[test]
    fn document_store_round_trips(samples in 0usize..40, seeds in proptest::collection::vec(any::<u64>(), 1..5)) {
        let store = DocumentBackend::new(MemoryDocuments::new());
        let saved: Vec<_> = seeds.iter().map(|&s| random_profile("prop", &["t"], samples, s)).collect();
        for p in &saved {
            store.save(p).unwrap();
        }
        let mut want = saved.clone();
        want.sort_by_key(|p| p.created_at);
        prop_assert_eq!(store.load(&ProfileKey::of(&saved[0])).unwrap(), want);
    }

    #[test]
    fn stats_lie_within_the_observed_range(seeds in proptest::collection::vec(any::<u64>(), 1..12)) {
        let profiles: Vec<_> = seeds.iter().map(|&s| random_profile("prop", &[], 8, s)).collect();
        let stats = aggregate_stats(&profiles).unwrap();
        prop_assert_eq!(stats.n, profiles.len());
        let values: Vec<f64> = profiles.iter().map(|p| p.totals.bytes_written as f64).collect();
        let s = stats.get("bytes_written").unwrap();
        let (lo, hi) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        prop_assert!(s.mean >= lo * (1.0 - 1e-12) && s.mean <= hi * (1.0 + 1e-12));
        prop_assert!(s.stddev >= 0.0 && s.stddev <= (hi - lo));
    }
}
