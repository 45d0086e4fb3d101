mod support;

use codavamp_core::eval::{fad, fit_gaussian, frechet_distance, normalize_fad, CovarianceMode, GaussianStats};
use codavamp_core::rng::{normal, rng_from};
use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::Rng as _;
use support::dd::frechet_oracle;

fn gaussian(mean: Array1<f64>, cov: Array2<f64>) -> GaussianStats {
    GaussianStats { mean, cov, n: 0 }
}

fn random_spd(d: usize, seed: u64) -> Array2<f64> {
    let mut rng = rng_from(seed);
    let x = Array2::from_shape_simple_fn((d, 2 * d), || normal(&mut rng));
    x.dot(&x.t()) / (2 * d) as f64 + Array2::<f64>::eye(d) * 0.05
}

fn rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

#[test]
fn analytic_mean_shift_and_scale() {
    for d in [1, 3, 8, 32] {
        let mu = Array1::from_shape_fn(d, |i| 0.5 * i as f64 - 1.0);
        let eye = Array2::<f64>::eye(d);
        let shift = frechet_distance(&gaussian(Array1::zeros(d), eye.clone()), &gaussian(mu.clone(), eye.clone())).unwrap();
        assert!((shift - mu.dot(&mu)).abs() <= 1e-9, "d={d}: {shift}");
        let scale = frechet_distance(&gaussian(Array1::zeros(d), eye.clone()), &gaussian(Array1::zeros(d), eye * 4.0)).unwrap();
        assert!((scale - d as f64).abs() <= 1e-9, "d={d}: {scale}");
    }
}

#[test]
fn matches_double_double_oracle() {
    for (i, d) in [2usize, 5, 10, 24].into_iter().enumerate() {
        let mut rng = rng_from(100 + i as u64);
        let ma = Array1::from_shape_simple_fn(d, || normal(&mut rng));
        let mb = Array1::from_shape_simple_fn(d, || normal(&mut rng));
        let (ca, cb) = (random_spd(d, 7 * i as u64), random_spd(d, 7 * i as u64 + 3));
        let got = frechet_distance(&gaussian(ma.clone(), ca.clone()), &gaussian(mb.clone(), cb.clone())).unwrap();
        let want = frechet_oracle(ma.as_slice().unwrap(), &rows(&ca), mb.as_slice().unwrap(), &rows(&cb));
        assert!((got - want).abs() <= 1e-6 * want.abs().max(1e-12), "d={d}: {got} vs {want}");
    }
}

#[test]
fn self_distance_is_zero() {
    let mut rng = rng_from(3);
    let x: Vec<Vec<f64>> = (0..200).map(|_| (0..16).map(|_| normal(&mut rng)).collect()).collect();
    assert!(fad(&x, &x, CovarianceMode::Unbiased).unwrap().abs() <= 1e-9);
    let g = fit_gaussian(&x).unwrap();
    assert!(frechet_distance(&g, &g).unwrap().abs() <= 1e-9);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn normalization_keeps_order(seed in any::<u64>(), n in 1usize..20) {
        let mut rng = rng_from(seed);
        let raw: std::collections::BTreeMap<usize, f64> = (0..n).map(|i| (i, rng.random_range(0.0..50.0))).collect();
        let (norm, degenerate) = normalize_fad(&raw).unwrap();
        prop_assert!(!degenerate);
        let max = norm.values().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert_eq!(max, 1.0);
        for a in 0..n {
            for b in 0..n {
                prop_assert_eq!(raw[&a] < raw[&b], norm[&a] < norm[&b]);
            }
        }
    }
}
