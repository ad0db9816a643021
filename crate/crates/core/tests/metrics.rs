//! EER and minDCF against an exhaustive threshold-sweep oracle.

mod common;

use common::{oracle_dcf, oracle_eer, random_set};
use laspa_core::eval::{eer, min_dcf, DcfConfig, ScoreSet};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn agrees_with_brute_force_on_a_thousand_random_sets() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let cfgs = [DcfConfig::default(), DcfConfig { p_target: 0.01, c_miss: 1.0, c_fa: 1.0 }, DcfConfig { p_target: 0.5, c_miss: 2.0, c_fa: 1.0 }];
    for i in 0..1000 {
        let s = random_set(&mut rng);
        assert_eq!(eer(&s).unwrap(), oracle_eer(&s), "eer, instance {i}");
        let c = &cfgs[i % cfgs.len()];
        let d = min_dcf(&s, c).unwrap();
        assert!((d - oracle_dcf(&s, c)).abs() <= 1e-12, "min_dcf, instance {i}");
        assert!(d <= 1.0 + 1e-12);
    }
}

#[test]
fn worked_examples() {
    let e = |t: &[f64], n: &[f64]| eer(&ScoreSet::new(t.to_vec(), n.to_vec())).unwrap();
    assert_eq!(e(&[0.9, 0.8], &[0.2, 0.1]), 0.0);
    assert!((e(&[0.9, 0.8, 0.4], &[0.5, 0.3, 0.2]) - 100.0 / 3.0).abs() < 1e-12);
    assert_eq!(e(&[0.1], &[0.9]), 100.0);
}

#[test]
fn min_dcf_is_zero_exactly_when_separable() {
    let c = DcfConfig::default();
    assert_eq!(min_dcf(&ScoreSet::new(vec![0.7, 0.9], vec![0.1, 0.69]), &c).unwrap(), 0.0);
    assert!(min_dcf(&ScoreSet::new(vec![0.5, 0.9], vec![0.1, 0.6]), &c).unwrap() > 0.0);
}

#[test]
fn empty_classes_are_rejected() {
    assert!(eer(&ScoreSet::new(vec![], vec![0.1])).is_err());
    assert!(min_dcf(&ScoreSet::new(vec![0.2], vec![]), &DcfConfig::default()).is_err());
    assert!(eer(&ScoreSet::new(vec![f64::NAN], vec![0.1])).is_err());
}

proptest! {
    #[test]
    fn eer_ignores_strictly_increasing_transforms(
        t in prop::collection::vec(-3.0f64..3.0, 1..60),
        n in prop::collection::vec(-3.0f64..3.0, 1..60),
        a in 0.1f64..5.0,
        b in -2.0f64..2.0,
    ) {
        let base = eer(&ScoreSet::new(t.clone(), n.clone())).unwrap();
        let f = |x: &f64| (a * x + b).tanh() + x.powi(3);
        let mapped = eer(&ScoreSet::new(t.iter().map(f).collect(), n.iter().map(f).collect())).unwrap();
        prop_assert!((base - mapped).abs() < 1e-9, "{} vs {}", base, mapped);
    }

    #[test]
    fn min_dcf_within_unit_range(
        t in prop::collection::vec(-3.0f64..3.0, 1..60),
        n in prop::collection::vec(-3.0f64..3.0, 1..60),
        p in 0.01f64..0.99,
    ) {
        let d = min_dcf(&ScoreSet::new(t, n), &DcfConfig { p_target: p, c_miss: 1.0, c_fa: 1.0 }).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&d));
    }
}
