mod common;

use common::*;
use lag_core::linalg::{align, reconstruction_error, row_gram_deviation, svd_rank_r};
use lag_core::{LayerId, LibraryTag, Matrix, RawAdapter, RoutingConfig};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn aligned_basis(a_star: &Matrix) -> Vec<Vec<f64>> {
    dense(a_star)
}

fn check_against_jacobi(m: usize, n: usize, r: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw = random_raw("x", "l", LibraryTag::Task, m, n, r, &mut rng);
    let cfg = RoutingConfig::default();
    let aligned = align(&raw, &cfg).unwrap();
    let oracle = jacobi_svd(&product(&raw));
    let expected_rank = r.min(m).min(n);
    assert_eq!(aligned.r_eff(), expected_rank);

    for (i, s) in aligned.singular_values.iter().enumerate() {
        let want = oracle.s[i];
        assert!(
            (f64::from(*s) - want).abs() <= 1e-5 * oracle.s[0],
            "σ{i}: {s} vs {want}"
        );
    }
    let ours = aligned_basis(&aligned.a_star);
    let theirs = row_basis(&oracle, 1e-7);
    assert_eq!(theirs.len(), expected_rank);
    let angle = max_principal_angle_sin(&ours, &theirs, n);
    assert!(angle < 1e-4, "principal angle sin {angle}");
    // well-separated top singular value: arrows agree up to sign
    let d: f64 = ours[0].iter().zip(&theirs[0]).map(|(a, b)| a * b).sum();
    assert!((d.abs() - 1.0).abs() < 1e-4);

    let recon = matmul(&dense(&aligned.b_star), &dense(&aligned.a_star));
    let target = product(&raw);
    assert!(frobenius(&sub(&recon, &target)) <= 1e-5 * frobenius(&target));
}

#[test]
fn tall_and_wide_adapters_match_dense_svd() {
    for seed in 0..5 {
        check_against_jacobi(8, 8, 3, seed);
        check_against_jacobi(3, 8, 3, seed + 100);
        check_against_jacobi(8, 3, 3, seed + 200);
        check_against_jacobi(20, 12, 5, seed + 300);
    }
}

#[test]
fn rank_deficient_pair_truncates_to_true_rank() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let base = random_raw("x", "l", LibraryTag::Task, 10, 12, 2, &mut rng);
    // duplicate the two rank-1 terms so r = 4 but rank(BA) = 2
    let b = Matrix::from_fn(10, 4, |i, j| base.b.get(i, j % 2));
    let a = Matrix::from_fn(4, 12, |i, j| base.a.get(i % 2, j));
    let raw = RawAdapter::new("y", LayerId::from("l"), LibraryTag::Task, b, a).unwrap();
    let aligned = align(&raw, &RoutingConfig::default()).unwrap();
    assert_eq!(aligned.r_eff(), 2);
    let oracle = jacobi_svd(&product(&raw));
    assert!(oracle.s[2] < 1e-6 * oracle.s[0]);
    assert!(reconstruction_error(&raw, &aligned).unwrap() < 1e-5);
}

#[test]
fn svd_singular_values_descend() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let raw = random_raw("x", "l", LibraryTag::Task, 32, 32, 8, &mut rng);
    let svd = svd_rank_r(&raw.b, &raw.a, 1e-7).unwrap();
    assert!(svd.s.windows(2).all(|w| w[0] >= w[1]));
    assert!(svd.s.iter().all(|&s| s > 0.0));
}

fn pair(m: usize, n: usize, r: usize, seed: u64) -> RawAdapter {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    random_raw("p", "l", LibraryTag::Knowledge, m, n, r, &mut rng)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn alignment_preserves_the_adapter_function(
        seed in any::<u64>(),
        m in 2usize..24,
        n in 2usize..24,
        r in 1usize..6,
    ) {
        let raw = pair(m, n, r.min(m).min(n), seed);
        let aligned = align(&raw, &RoutingConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let x = random_unit(n, &mut rng);
        let want = matvec(&product(&raw), &x);
        let got = matvec(&dense(&aligned.b_star), &matvec(&dense(&aligned.a_star), &x));
        let err = norm(&want.iter().zip(&got).map(|(a, b)| a - b).collect::<Vec<_>>());
        let scale = frobenius(&product(&raw));
        prop_assert!(err <= 1e-5 * scale.max(1e-30), "{} vs {}", err, scale);
        prop_assert!(row_gram_deviation(&aligned.a_star) < 1e-5);
    }

    #[test]
    fn aligned_factors_ignore_sign_flips_and_rescaling(
        seed in any::<u64>(),
        exp in -3i32..4,
    ) {
        let raw = pair(12, 10, 4, seed);
        let cfg = RoutingConfig::default();
        let base = align(&raw, &cfg).unwrap();

        let c = 2f32.powi(exp);
        let neg_b = Matrix::from_fn(12, 4, |i, j| -raw.b.get(i, j));
        let neg_a = Matrix::from_fn(4, 10, |i, j| -raw.a.get(i, j));
        let scaled_b = Matrix::from_fn(12, 4, |i, j| raw.b.get(i, j) * c);
        let scaled_a = Matrix::from_fn(4, 10, |i, j| raw.a.get(i, j) / c);
        for (b, a) in [(neg_b, neg_a), (scaled_b, scaled_a)] {
            let other = RawAdapter::new("p", raw.layer.clone(), raw.tag, b, a).unwrap();
            let got = align(&other, &cfg).unwrap();
            prop_assert_eq!(got.r_eff(), base.r_eff());
            let da = frobenius(&sub(&dense(&got.a_star), &dense(&base.a_star)));
            let db = frobenius(&sub(&dense(&got.b_star), &dense(&base.b_star)));
            prop_assert!(da < 1e-4, "A* moved by {}", da);
            prop_assert!(db < 1e-4 * frobenius(&dense(&base.b_star)), "B* moved by {}", db);
        }
    }
}
