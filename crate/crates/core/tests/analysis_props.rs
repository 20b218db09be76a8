//! Property tests for the selection and interval helpers.

use featlearn::analysis::{small_loss_select, wilson_interval, Z95};
use proptest::prelude::*;

proptest! {
    #[test]
    fn selection_depends_only_on_ranks(
        losses in prop::collection::vec(0.0f64..5.0, 1..40),
        threshold in 0.0f64..5.0,
        split in 0usize..40,
    ) {
        let n = losses.len();
        let split = split.min(n);
        let clean: Vec<usize> = (0..split).collect();
        let noisy: Vec<usize> = (split..n).collect();
        let a = small_loss_select(&losses, &clean, &noisy, threshold);
        let g = |x: f64| (3.0 * x).exp() + 1.0;
        let mapped: Vec<f64> = losses.iter().map(|&x| g(x)).collect();
        let b = small_loss_select(&mapped, &clean, &noisy, g(threshold));
        prop_assert_eq!((a.clean_below, a.clean_above, a.noisy_below, a.noisy_above),
                        (b.clean_below, b.clean_above, b.noisy_below, b.noisy_above));
        prop_assert_eq!(a.clean_below + a.clean_above + a.noisy_below + a.noisy_above, n);
    }

    #[test]
    fn wilson_shrinks_when_count_doubles(errors in 0usize..500, extra in 1usize..500) {
        let count = errors + extra;
        let (lo, hi) = wilson_interval(errors, count, Z95);
        let (lo2, hi2) = wilson_interval(2 * errors, 2 * count, Z95);
        let p = errors as f64 / count as f64;
        prop_assert!(lo <= p && p <= hi);
        prop_assert!(hi2 - lo2 < hi - lo);
        prop_assert!(0.0 <= lo && hi <= 1.0);
    }
}
