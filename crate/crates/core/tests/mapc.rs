//! MAPC on independent data and under affine maps.

use laspa_core::losses::{mapc, mapc_grad};
use laspa_core::rng::stream;
use proptest::prelude::*;
use rand_distr::{Distribution, StandardNormal};

fn gaussian(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = stream(seed, "mapc-test", 0);
    (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
}

#[test]
fn independent_batches_sit_near_the_chance_floor() {
    let (b, j) = (1000, 4);
    let mut worst: f64 = 0.0;
    for seed in 0..100 {
        let x = gaussian(2 * seed, b * j);
        let y = gaussian(2 * seed + 1, b * j);
        let v = mapc(&x, &y, j).unwrap();
        assert!(v < 0.1, "seed {seed}: {v}");
        worst = worst.max(v);
    }
    // expected value is sqrt(2 / (pi B)) ~ 0.025
    assert!(worst < 0.08, "{worst}");
}

/// Pearson correlation by the two-pass textbook formula.
fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    sxy / (sxx * syy).sqrt()
}

#[test]
fn agrees_with_a_two_pass_reference() {
    let (b, j) = (50, 3);
    let x = gaussian(1, b * j);
    let mut y = gaussian(2, b * j);
    for k in 0..b {
        y[k * j] += 0.8 * x[k * j + 1];
    }
    let col = |m: &[f64], i: usize| (0..b).map(|k| m[k * j + i]).collect::<Vec<_>>();
    let mut reference = 0.0;
    for i in 0..j {
        for l in 0..j {
            reference += pearson(&col(&x, i), &col(&y, l)).abs();
        }
    }
    reference /= (j * j) as f64;
    let v = mapc(&x, &y, j).unwrap();
    assert!((v - reference).abs() <= 1e-10 * reference, "{v} vs {reference}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn affine_invariance_and_symmetry(
        seed in 0u64..10_000,
        scales in prop::collection::vec(prop_oneof![-5.0f64..-0.2, 0.2f64..5.0], 8),
        shifts in prop::collection::vec(-10.0f64..10.0, 8),
    ) {
        let (b, j) = (40, 4);
        let x = gaussian(seed, b * j);
        let mut y = gaussian(seed + 50_000, b * j);
        for k in 0..b {
            y[k * j + 2] += 0.5 * x[k * j];
        }
        let base = mapc(&x, &y, j).unwrap();
        let affine = |m: &[f64], off: usize| -> Vec<f64> {
            m.iter().enumerate().map(|(i, v)| scales[off + i % j] * v + shifts[off + i % j]).collect()
        };
        let moved = mapc(&affine(&x, 0), &affine(&y, 4), j).unwrap();
        prop_assert!((base - moved).abs() < 1e-8, "{} vs {}", base, moved);
        let swapped = mapc(&y, &x, j).unwrap();
        prop_assert!((base - swapped).abs() < 1e-8);
        let (_, da, db) = mapc_grad(&x, &y, b, j, j).unwrap();
        let (_, db2, da2) = mapc_grad(&y, &x, b, j, j).unwrap();
        for (p, q) in da.iter().zip(&da2).chain(db.iter().zip(&db2)) {
            prop_assert!((p - q).abs() < 1e-12);
        }
    }
}
