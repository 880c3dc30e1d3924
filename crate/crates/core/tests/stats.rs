use avaloop_core::stats::{iqr_bounds, seeded_rng, shapiro_wilk, StatsError};
use proptest::prelude::*;
use rand::{Rng, RngCore};
use serde_json::Value;

fn reference_cases() -> Vec<(String, Vec<f64>, f64, f64)> {
    let text = include_str!("fixtures/shapiro_reference.json");
    let doc: Value = serde_json::from_str(text).unwrap();
    doc["cases"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| {
            let values = c["values"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
            (c["kind"].as_str().unwrap().to_string(), values, c["w"].as_f64().unwrap(), c["p"].as_f64().unwrap())
        })
        .collect()
}

#[test]
fn matches_reference_table() {
    let cases = reference_cases();
    assert!(cases.len() >= 100);
    let mut worst = 0.0f64;
    for (kind, values, w, p) in &cases {
        let r = shapiro_wilk(values).unwrap();
        let dp = (r.p_value - p).abs();
        worst = worst.max(dp);
        assert!(dp <= 1e-3, "{kind} n={}: p {} vs {p}", values.len(), r.p_value);
        assert!((r.w_statistic - w).abs() <= 1e-4, "{kind}: w {} vs {w}", r.w_statistic);
    }
    println!("worst |dp| = {worst:e}");
}

#[test]
fn normal_quantiles_look_normal() {
    let (_, values, _, p) = reference_cases().into_iter().find(|c| c.0 == "normal_quantiles").unwrap();
    let r = shapiro_wilk(&values).unwrap();
    assert!(r.p_value > 0.05);
    assert!((r.p_value - p).abs() < 1e-6);
}

#[test]
fn two_point_mass_is_rejected() {
    let (_, values, _, _) = reference_cases().into_iter().find(|c| c.0 == "two_point").unwrap();
    assert!(shapiro_wilk(&values).unwrap().p_value < 0.05);
}

#[test]
fn constant_sample_is_degenerate() {
    let r = shapiro_wilk(&[17.0; 30]).unwrap();
    assert!(r.degenerate);
    assert_eq!(r.p_value, 0.0);
}

#[test]
fn rejects_bad_input() {
    assert_eq!(shapiro_wilk(&[1.0, 2.0]), Err(StatsError::SampleSize(2)));
    assert_eq!(shapiro_wilk(&vec![0.0; 5001]), Err(StatsError::SampleSize(5001)));
    assert_eq!(shapiro_wilk(&[1.0, f64::NAN, 3.0]), Err(StatsError::NonFinite));
}

#[test]
fn three_point_sample_uses_exact_p() {
    let r = shapiro_wilk(&[1.0, 2.0, 3.0]).unwrap();
    assert!((r.w_statistic - 1.0).abs() < 1e-12);
    assert!((r.p_value - 1.0).abs() < 1e-9);
}

#[test]
fn iqr_band_matches_quartile_rule() {
    assert_eq!(iqr_bounds(30), (7, 23));
    assert_eq!(iqr_bounds(4), (1, 3));
    assert_eq!(iqr_bounds(100), (25, 75));
}

#[test]
fn rng_is_reproducible() {
    let mut a = seeded_rng(42);
    let mut b = seeded_rng(42);
    let mut x = vec![0u8; 10_000];
    let mut y = vec![0u8; 10_000];
    a.fill_bytes(&mut x);
    b.fill_bytes(&mut y);
    assert_eq!(x, y);
}

#[test]
fn rng_streams_for_neighbouring_seeds_differ() {
    let mut x = [0u8; 64];
    let mut y = [0u8; 64];
    seeded_rng(42).fill_bytes(&mut x);
    seeded_rng(42 ^ 1).fill_bytes(&mut y);
    assert_ne!(x, y);
}

#[test]
fn rng_stream_is_pinned() {
    // Frozen so a dependency upgrade that changes the stream is caught.
    let mut buf = [0u8; 8];
    seeded_rng(0).fill_bytes(&mut buf);
    assert_eq!(buf, PINNED_SEED0);
}

const PINNED_SEED0: [u8; 8] = [178, 247, 245, 129, 214, 222, 60, 6];

#[test]
fn rng_bytes_are_uniform() {
    let mut rng = seeded_rng(7);
    let mut counts = [0u64; 256];
    let n = 1_000_000u64;
    for _ in 0..n {
        counts[rng.random::<u8>() as usize] += 1;
    }
    let expected = n as f64 / 256.0;
    let sigma = (n as f64 * (1.0 / 256.0) * (255.0 / 256.0)).sqrt();
    for (v, &c) in counts.iter().enumerate() {
        assert!((c as f64 - expected).abs() < 5.0 * sigma, "byte {v}: {c}");
    }
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    // 255 degrees of freedom; 350 is far in the upper tail.
    assert!(chi2 < 350.0, "chi2 = {chi2}");
}

proptest! {
    #[test]
    fn permutation_invariant(mut v in prop::collection::vec(-100.0f64..100.0, 3..60), seed in any::<u64>()) {
        let a = shapiro_wilk(&v).unwrap();
        let mut rng = seeded_rng(seed);
        for i in (1..v.len()).rev() {
            let j = rng.random_range(0..=i);
            v.swap(i, j);
        }
        let b = shapiro_wilk(&v).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn w_and_p_in_range(v in prop::collection::vec(0u32..64, 3..60)) {
        let v: Vec<f64> = v.into_iter().map(f64::from).collect();
        let r = shapiro_wilk(&v).unwrap();
        prop_assert!((0.0..=1.0).contains(&r.p_value));
        prop_assert!(r.degenerate || (r.w_statistic > 0.0 && r.w_statistic <= 1.0 + 1e-12));
    }
}
