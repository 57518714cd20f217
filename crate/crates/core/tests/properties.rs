//! Property tests over the numeric kernels, banks and metrics.

use ltds::banks::{CovarianceBank, SemanticTable};
use ltds::data::longtail_counts;
use ltds::eval::{frechet_distance, harmonic, predict_open};
use ltds::losses::{aug_bound, aug_loss, dc_loss, softmax_nll, AugDenominator, DomainClassCounts};
use ltds::mathcore::{log_softmax, symmetric_eigen, Matrix, Rng};
use proptest::prelude::*;

fn psd(rng: &mut Rng, d: usize) -> Matrix {
    let a = Matrix::from_vec(d, d, rng.normal_vec(d * d)).unwrap();
    a.matmul_t(&a).unwrap()
}

fn lse(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn log_softmax_normalizes(z in prop::collection::vec(-50.0f64..50.0, 1..12)) {
        let l = log_softmax(&z, None).unwrap();
        let total: f64 = l.iter().map(|v| v.exp()).sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn nll_gradient_sums_to_zero(seed in any::<u64>(), c in 2usize..9) {
        let mut rng = Rng::new(seed);
        let z = rng.normal_vec(c);
        let y = rng.below(c);
        let (loss, g) = softmax_nll(&z, y, None).unwrap();
        prop_assert!(loss >= 0.0);
        prop_assert!(g.iter().sum::<f64>().abs() < 1e-12);
        prop_assert!((loss - (lse(&z) - z[y])).abs() < 1e-12);
    }

    #[test]
    fn dc_loss_is_shift_invariant(seed in any::<u64>(), c in 2usize..9, shift in -20.0f64..20.0) {
        let mut rng = Rng::new(seed);
        let z = rng.normal_vec(c);
        let y = rng.below(c);
        let mut row: Vec<u64> = (0..c).map(|_| rng.below(40) as u64).collect();
        row[y] += 1;
        let counts = DomainClassCounts::new(vec![row]).unwrap();
        let shifted: Vec<f64> = z.iter().map(|v| v + shift).collect();
        let a = dc_loss(&z, y, 0, &counts).unwrap();
        let b = dc_loss(&shifted, y, 0, &counts).unwrap();
        prop_assert!((a - b).abs() < 1e-10);
    }

    #[test]
    fn augmentation_never_lowers_the_loss(seed in any::<u64>(), c in 2usize..7, d in 1usize..6, lambda in 0.0f64..3.0) {
        let mut rng = Rng::new(seed);
        let w = Matrix::from_vec(c, d, rng.normal_vec(c * d)).unwrap();
        let b = rng.normal_vec(c);
        let f = rng.normal_vec(d);
        let y = rng.below(c);
        let s = psd(&mut rng, d);
        let plain = aug_loss(&f, y, &w, &b, &s, 0.0, AugDenominator::Derivation).unwrap();
        let aug = aug_loss(&f, y, &w, &b, &s, lambda, AugDenominator::Derivation).unwrap();
        prop_assert!(aug >= plain - 1e-12);
        // the bound at the feature itself is the augmented loss
        let bound = aug_bound(&f, &s, &w, &b, y, lambda).unwrap();
        prop_assert!((bound - aug).abs() < 1e-10);
    }

    #[test]
    fn covariance_merge_is_order_free(seed in any::<u64>(), c in 1usize..4, d in 1usize..4, n in 2usize..20) {
        let mut rng = Rng::new(seed);
        let x = Matrix::from_vec(n, d, rng.normal_vec(n * d)).unwrap();
        let y: Vec<usize> = (0..n).map(|_| rng.below(c)).collect();
        let cut = 1 + rng.below(n - 1);
        let mut once = CovarianceBank::new(c, d);
        once.update_covariance(&x, &y).unwrap();
        let head: Vec<usize> = (0..cut).collect();
        let tail: Vec<usize> = (cut..n).collect();
        let mut split = CovarianceBank::new(c, d);
        split.update_covariance(&x.select_rows(&tail), &tail.iter().map(|&i| y[i]).collect::<Vec<_>>()).unwrap();
        split.update_covariance(&x.select_rows(&head), &head.iter().map(|&i| y[i]).collect::<Vec<_>>()).unwrap();
        prop_assert_eq!(&once.n, &split.n);
        prop_assert!(once.mu.max_abs_diff(&split.mu) < 1e-12);
        for (a, b) in once.sigma.iter().zip(&split.sigma) {
            prop_assert!(a.max_abs_diff(b) < 1e-12);
        }
    }

    #[test]
    fn blended_covariances_stay_psd(seed in any::<u64>(), c in 2usize..6, d in 1usize..5) {
        let mut rng = Rng::new(seed);
        let raw = Matrix::from_vec(c, 3, rng.normal_vec(c * 3)).unwrap();
        let table = SemanticTable::from_raw(&raw).unwrap();
        let k = 1 + rng.below(c);
        let mut bank = CovarianceBank::new(c, d);
        bank.sigma = (0..c).map(|_| psd(&mut rng, d)).collect();
        bank.n = (0..c).map(|_| rng.below(30) as u64).collect();
        let (blend, _) = bank.blend_covariance(&table, k, true).unwrap();
        for s in &blend {
            let (ev, _) = symmetric_eigen(s).unwrap();
            prop_assert!(ev.iter().all(|&e| e >= -1e-10));
        }
        bank.n = vec![7; c];
        let (w, _) = bank.blend_covariance(&table, k, true).unwrap();
        let (u, _) = bank.blend_covariance(&table, k, false).unwrap();
        for (a, b) in w.iter().zip(&u) {
            prop_assert!(a.max_abs_diff(b) < 1e-12);
        }
    }

    #[test]
    fn rejection_is_monotone_in_the_threshold(z in prop::collection::vec(-5.0f64..5.0, 1..10), t in 0.0f64..1.0, dt in 0.0f64..0.5) {
        let lo = predict_open(&z, t);
        let hi = predict_open(&z, t + dt);
        if lo.class.is_none() {
            prop_assert!(hi.class.is_none());
        }
        prop_assert!(predict_open(&z, 0.0).class.is_some());
    }

    #[test]
    fn harmonic_mean_lies_between_min_and_mean(a in 0.0f64..100.0, b in 0.0f64..100.0) {
        let h = harmonic(a, b);
        prop_assert!(h <= (a + b) / 2.0 + 1e-12);
        prop_assert!(h >= a.min(b) - 1e-12);
    }

    #[test]
    fn frechet_is_symmetric_and_nonnegative(seed in any::<u64>(), d in 1usize..5) {
        let mut rng = Rng::new(seed);
        let (m1, m2) = (rng.normal_vec(d), rng.normal_vec(d));
        let (s1, s2) = (psd(&mut rng, d), psd(&mut rng, d));
        let a = frechet_distance(&m1, &s1, &m2, &s2).unwrap();
        let b = frechet_distance(&m2, &s2, &m1, &s1).unwrap();
        prop_assert!(a >= -1e-9);
        prop_assert!((a - b).abs() < 1e-8 * (1.0 + a.abs()));
    }

    #[test]
    fn count_curve_is_monotone(n_min in 1u64..50, extra in 0u64..2000, classes in 2usize..60, stretch in 1.0f64..4.0) {
        let n_max = n_min + extra;
        // the last class reaches n_min exactly when the scale is √(classes − 1)
        let scale = ((classes - 1) as f64).sqrt() * stretch;
        let counts: Vec<u64> = (1..=classes).map(|c| longtail_counts(c, n_max, n_min, classes, scale)).collect();
        prop_assert_eq!(counts[0], n_max);
        prop_assert!(counts.windows(2).all(|w| w[0] >= w[1]));
        prop_assert!(counts.iter().all(|&n| n >= n_min));
    }

    #[test]
    fn rng_state_round_trips(seed in any::<u64>(), skip in 0usize..50) {
        let mut a = Rng::new(seed);
        for _ in 0..skip {
            a.next_u64();
        }
        let mut b = Rng::from_state(&a.state()).unwrap();
        prop_assert_eq!(a.next_u64(), b.next_u64());
        prop_assert_eq!(a.normal().to_bits(), b.normal().to_bits());
    }
}
