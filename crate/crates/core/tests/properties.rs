use proptest::prelude::*;

use cwpp_core::calibration::{discount, shrink, transform, CalibrationParams, TransformMode};
use cwpp_core::case_weights::{compute_all, WeightMatrix, WeightOptions};
use cwpp_core::kde::GaussianKde;
use cwpp_core::stats::normal_quantile;
use cwpp_core::sim::{generate_trial, ScenarioSpec};
use cwpp_core::survival::{build_partition, decompose, event_times, Source, TimePartition};

proptest! {
    #[test]
    fn shrink_is_monotone_and_contracting(a in 0.0f64..=1.0, b in 0.0f64..=1.0, p in 1u32..9) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(shrink(lo, p) <= shrink(hi, p));
        prop_assert!((shrink(a, p) - 0.5).abs() <= (a - 0.5).abs() + 1e-15);
        prop_assert!((shrink(a, p + 1) - 0.5).abs() <= (shrink(a, p) - 0.5).abs() + 1e-15);
        prop_assert!((0.0..=1.0).contains(&shrink(a, p)));
    }

    #[test]
    fn shrink_fixes_anchor_points(p in 1u32..12) {
        prop_assert_eq!(shrink(0.0, p), 0.0);
        prop_assert_eq!(shrink(0.5, p), 0.5);
        prop_assert_eq!(shrink(1.0, p), 1.0);
    }

    #[test]
    fn discount_is_monotone(a in 0.0f64..1.0, d in 0.001f64..0.5, c in 0.0f64..0.49, q in 1.0f64..80.0) {
        let (lo, hi) = (discount(a, c, q), discount(a + d, c, q));
        prop_assert!(hi >= lo);
        if hi < 1.0 - 1e-12 {
            prop_assert!(hi > lo);
        }
        let c2 = (c + d).min(0.4999);
        prop_assert!(discount(a, c2, q) <= discount(a, c, q));
    }

    #[test]
    fn transform_stays_in_unit_interval(rows in prop::collection::vec(prop::collection::vec(0.0f64..=1.0, 1..4), 1..20), p in 1u32..6, c in 0.0f64..0.5) {
        let m = WeightMatrix::new(rows).unwrap();
        let params = CalibrationParams { p, c, ..Default::default() };
        for mode in [TransformMode::Shrunk, TransformMode::Discounted] {
            let t = transform(&m, &params, mode).unwrap();
            prop_assert!(t.entries().all(|x| (0.0..=1.0).contains(&x)));
        }
    }

    #[test]
    fn decomposition_sums_to_time(y in 0.01f64..2000.0, event in any::<bool>(), mut cuts in prop::collection::vec(1.0f64..1500.0, 0..5)) {
        cuts.sort_by(|a, b| a.total_cmp(b));
        cuts.dedup();
        let mut all = vec![0.0];
        all.extend(cuts);
        let part = TimePartition::new(all).unwrap();
        let d = decompose(y, event, &part).unwrap();
        prop_assert!((d.total() - y).abs() <= f64::EPSILON * y);
    }

    #[test]
    fn quantile_partition_balances_events(mut times in prop::collection::vec(1.0f64..1000.0, 10..200), k in 1usize..6) {
        times.sort_by(|a, b| a.total_cmp(b));
        times.dedup();
        prop_assume!(times.len() >= k * 2);
        let part = build_partition(&times, k).unwrap();
        let mut counts = vec![0usize; part.len()];
        for &t in &times {
            counts[part.interval_of(t)] += 1;
        }
        let (mn, mx) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        prop_assert!(mx - mn <= 1, "{:?}", counts);
    }

    #[test]
    fn kde_tail_extremity_lowers_box_p(shift in 0.5f64..3.0, extra in 0.01f64..2.0, left in any::<bool>()) {
        let samples: Vec<f64> = (0..400).map(|i| normal_quantile((i as f64 + 0.5) / 400.0)).collect();
        let kde = GaussianKde::fit(&samples).unwrap();
        let dens: Vec<f64> = samples.iter().map(|&s| kde.density(s)).collect();
        let p = |w: f64| dens.iter().filter(|&&d| d <= kde.density(w)).count() as f64 / dens.len() as f64;
        let dir = if left { -1.0 } else { 1.0 };
        let near = kde.mode() + dir * shift;
        prop_assert!(p(near + dir * extra) <= p(near) + 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(4))]

    #[test]
    fn weights_in_unit_interval_and_invariant_to_relabeling(seed in 0u64..1000, rot in 1usize..99) {
        let subjects = generate_trial(&ScenarioSpec::default(), seed).unwrap();
        let part = build_partition(&event_times(subjects.iter().filter(|s| s.source == Source::Rct)), 2).unwrap();
        let opts = WeightOptions { n_replicates: 1000, n_imputations: 4, seed: 77, censoring_covariates: false };
        let base = compute_all(&subjects, &part, &opts).unwrap();
        prop_assert!(base.matrix.entries().all(|a| (0.0..=1.0).contains(&a)));

        let (rct, mut ext): (Vec<_>, Vec<_>) = subjects.iter().cloned().partition(|s| s.source == Source::Rct);
        let n = ext.len();
        ext.rotate_left(rot % n);
        for (i, s) in ext.iter_mut().enumerate() {
            s.id = format!("relabelled-{i}");
        }
        let mut shuffled = ext.clone();
        shuffled.extend(rct);
        let moved = compute_all(&shuffled, &part, &opts).unwrap();
        for (j, row) in moved.matrix.rows().iter().enumerate() {
            prop_assert_eq!(row, &base.matrix.rows()[(j + rot % n) % n]);
        }
    }
}
