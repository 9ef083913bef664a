mod common;

use common::masking_stats;

#[test]
fn selection_rate_and_replacement_split() {
    let st = masking_stats(0, 6000);
    assert!(st.maskable >= 100_000, "only {} maskable tokens", st.maskable);
    let rate = st.selected as f64 / st.maskable as f64;
    assert!((rate - 0.15).abs() <= 0.01, "selection rate {rate}");
    let s = st.selected as f64;
    // a random replacement can redraw the original character (1 in 36)
    let (m, r, k) = (st.to_mask as f64 / s, st.to_random as f64 / s, st.kept as f64 / s);
    assert!((m - 0.8).abs() <= 0.02, "mask share {m}");
    assert!((r - 0.1).abs() <= 0.02, "random share {r}");
    assert!((k - 0.1).abs() <= 0.02, "keep share {k}");
    assert_eq!(st.reserved_selected, 0);
}

#[test]
fn different_seeds_select_different_positions() {
    let a = masking_stats(1, 200);
    let b = masking_stats(2, 200);
    assert_ne!((a.selected, a.to_mask), (b.selected, b.to_mask));
}
