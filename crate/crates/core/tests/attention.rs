mod support;

use support::{attention_invariants, attention_oracle_gap};

#[test]
fn attend_matches_scalar_oracle() {
    for seed in 0..6 {
        let gap = attention_oracle_gap(seed, 2, 3, true);
        assert!(gap < 1e-10, "seed {seed}: {gap:e}");
    }
}

#[test]
fn attend_without_coverage_matches_oracle() {
    for seed in 0..3 {
        let gap = attention_oracle_gap(seed, 3, 4, false);
        assert!(gap < 1e-10, "seed {seed}: {gap:e}");
    }
}

#[test]
fn attend_on_single_row_and_column_maps() {
    for (h, w) in [(1, 6), (6, 1), (1, 1)] {
        let gap = attention_oracle_gap(h as u64 * 10 + w as u64, h, w, true);
        assert!(gap < 1e-10, "{h}x{w}: {gap:e}");
    }
}

#[test]
fn alpha_normalized_and_beta_is_running_sum() {
    let r = attention_invariants(200, 17);
    assert_eq!(r.steps, 200);
    assert_eq!(r.maps, 600);
    assert!(r.worst_sum < 1e-9, "{r:?}");
    assert!(r.min_alpha >= 0.0, "{r:?}");
    assert_eq!(r.beta_mismatches, 0, "{r:?}");
    assert_eq!(r.non_convex, 0, "{r:?}");
}
