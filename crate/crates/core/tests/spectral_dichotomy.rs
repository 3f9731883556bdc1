mod common;

use std::f64::consts::PI;

use common::{gaussian_matrix, matrix_sign, reference, rng, SIGMA, TAU};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use stabilab::dichotomy::*;
use stabilab::ladder::{level_segment, spectral_distance, tail_contraction, GRID_POINTS};
use stabilab::model::OseenModel;

/// `A = V diag(λ) V⁻¹` with a well-conditioned random `V`, together with
/// the exact spectral projector onto the eigenvalues below `sigma`.
fn diagonalizable(seed: u64, lambdas: &[f64], sigma: f64) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let n = lambdas.len();
    let mut r = rng(seed);
    let v = DMatrix::identity(n, n) + gaussian_matrix(&mut r, n, n) * (0.3 / (n as f64).sqrt());
    let w = v.clone().try_inverse().unwrap();
    let a = &v * DMatrix::from_diagonal(&DVector::from_row_slice(lambdas)) * &w;
    let mut p = DMatrix::zeros(n, n);
    for (j, &l) in lambdas.iter().enumerate() {
        if l < sigma {
            p += v.column(j) * w.row(j);
        }
    }
    (a, p, v, w)
}

fn spread_spectrum(n: usize, below: &[f64]) -> Vec<f64> {
    let mut l = below.to_vec();
    l.extend((0..n - below.len()).map(|j| 1.0 + 0.5 * j as f64));
    l
}

#[test]
fn nonnormal_pair_by_hand() {
    let model = OseenModel::from_matrix(DMatrix::from_row_slice(2, 2, &[-1.0, 5.0, 0.0, 2.0]));
    let dich = eig_split(&model, 0.5).unwrap();
    assert_eq!(dich.m, 1);
    let d = dich.d.column(0);
    // Eigenvector of Aᵀ for −1 is proportional to (3, −5).
    assert!((d[0] * -5.0 - d[1] * 3.0).abs() < 1e-12 * d.norm());
    let x = dich.xs.column(0);
    let expect = DVector::from_vec(vec![5.0, 3.0]) / 34f64.sqrt();
    assert!((x.dot(&expect).abs() - 1.0).abs() < 1e-12);
}

#[test]
fn riesz_projector_matches_exact_projector_on_random_matrices() {
    for seed in 0..4 {
        let lambdas = spread_spectrum(20, &[-1.0, -0.3, 0.1]);
        let (a, exact, _, _) = diagonalizable(seed, &lambdas, SIGMA);
        let model = OseenModel::from_matrix(a.clone());
        let p = riesz_projector(&model, SIGMA, 256).unwrap();
        assert!((&p - &exact).norm() < 1e-8, "seed {seed}: {}", (&p - &exact).norm());
        // The sign function gives the same projector without any eigensolve.
        let sign = matrix_sign(&(&a - DMatrix::identity(20, 20) * SIGMA));
        let via_sign = (DMatrix::identity(20, 20) - sign) * 0.5;
        assert!((&p - via_sign).norm() < 1e-8);
    }
}

#[test]
fn reference_split_satisfies_projector_identities() {
    let r = reference();
    let d = &r.dich;
    let n = 20;
    let p = &d.p_sigma;
    assert!((p - p.transpose()).norm() < 1e-12);
    assert!((p * p - p).norm() < 1e-10);
    let rank = p.clone().singular_values().iter().filter(|&&s| s > 0.5).count();
    assert_eq!(rank, n - d.m);
    assert!((d.d.transpose() * p).norm() < 1e-10);
    let pr = &d.p_riesz;
    assert!((pr * pr - pr).norm() < 1e-8);
    assert!((pr.trace() - d.m as f64).abs() < 1e-6);
    let s = semigroup(&r.model, TAU, SemigroupMethod::ScalingSquaring).unwrap();
    assert!((d.d.transpose() * s * p).norm() < 1e-8);
}

#[test]
fn contour_semigroup_agrees_with_scaling_and_squaring() {
    let lambdas: Vec<f64> = (0..10).map(|j| 0.8 + 0.7 * j as f64).collect();
    let (a, _, v, w) = diagonalizable(21, &lambdas, 0.0);
    let model = OseenModel::from_matrix(a);
    let tau = 0.7;
    let ss = semigroup(&model, tau, SemigroupMethod::ScalingSquaring).unwrap();
    let ct = semigroup(
        &model,
        tau,
        SemigroupMethod::Contour {
            sigma: 0.5,
            n_nodes: 256,
        },
    )
    .unwrap();
    let exact = &v * DMatrix::from_diagonal(&DVector::from_iterator(10, lambdas.iter().map(|l| (-l * tau).exp()))) * &w;
    assert!((&ss - &ct).norm() < 1e-8);
    assert!((&ss - &exact).norm() < 1e-12);
}

#[test]
fn semigroup_trivial_values() {
    let model = OseenModel::diagonal(&[1.0, 2.0]);
    let s = semigroup(&model, 2f64.ln(), SemigroupMethod::ScalingSquaring).unwrap();
    assert!((s - DMatrix::from_diagonal(&DVector::from_vec(vec![0.5, 0.25]))).norm() < 1e-15);
    let s0 = semigroup(&model, 0.0, SemigroupMethod::ScalingSquaring).unwrap();
    assert_eq!(s0, DMatrix::identity(2, 2));
}

#[test]
fn transient_growth_defeats_the_certificate() {
    let model = OseenModel::from_matrix(DMatrix::from_row_slice(2, 2, &[1.0, 100.0, 0.0, 1.0]));
    let dich = eig_split(&model, 0.5).unwrap();
    assert_eq!(dich.m, 0);
    let tau = 0.01;
    let (g, ok) = contraction_certificate(&dich, &model, tau);
    // exp(−Aτ) = e^{−τ} [[1, −100τ], [0, 1]].
    let closed = DMatrix::from_row_slice(2, 2, &[1.0, -100.0 * tau, 0.0, 1.0]) * (-tau).exp();
    let oracle = closed.singular_values().max();
    assert!((g - oracle).abs() < 1e-12);
    assert!(g > 1.0 && !ok);
}

#[test]
fn reference_contraction_decreases_with_tau() {
    let r = reference();
    let g: Vec<f64> = [1.0, 2.0, 4.0, 8.0]
        .iter()
        .map(|&t| contraction_certificate(&r.dich, &r.model, t).0)
        .collect();
    assert!(g.windows(2).all(|w| w[1] < w[0]), "{g:?}");
    assert!(g[1] < 1.0);
    // Within X_σ the slowest mode sits near Re λ ≈ 2.4.
    assert!((g[1] - 8.18e-3).abs() < 1e-4, "{}", g[1]);
}

#[test]
fn contour_bound_integrals_decay_in_tau() {
    let r = reference();
    let vals: Vec<f64> = [1.0, 2.0, 4.0]
        .iter()
        .map(|&t| {
            let (i1, i2) = contour_bound_integrals(&r.model, SIGMA, t, 0.5, 2.0 * PI / 3.0).unwrap();
            assert!(i1.is_finite() && i2.is_finite());
            i1 + i2
        })
        .collect();
    assert!(vals.windows(2).all(|w| w[1] < w[0]), "{vals:?}");
    assert!(matches!(
        contour_bound_integrals(&r.model, SIGMA, 1.0, 0.5, PI / 2.0),
        Err(stabilab::Error::InvalidContour(_))
    ));
}

#[test]
fn ladder_levels_are_grid_optimal_and_nested() {
    let r = reference();
    let l = &r.ladder;
    assert_eq!(l.levels.len(), 3);
    let mut floor = SIGMA;
    for (i, &s) in l.levels.iter().enumerate() {
        let (lo, hi) = level_segment(i + 1, 2);
        assert!(s >= lo && s <= hi && s > floor);
        // Exhaustive grid oracle.
        let h = (hi - lo) / (GRID_POINTS - 1) as f64;
        let best = (0..GRID_POINTS)
            .map(|g| lo + h * g as f64)
            .filter(|&x| x > floor)
            .map(|x| spectral_distance(&r.model, x))
            .fold(0.0, f64::max);
        assert!(spectral_distance(&r.model, s) >= best - h);
        floor = s;
    }
    assert!(l.dims.windows(2).all(|w| w[0] <= w[1]));
    assert_eq!(l.dims, vec![1, 4, 10, 20]);
    // Each tail is A-invariant and the blocks reconstruct any vector.
    for k in 0..l.dims.len() {
        let perp = l.perp_basis(k);
        let tail = l.tail_basis(k);
        if tail.ncols() > 0 && perp.ncols() > 0 {
            assert!((perp.transpose() * &r.model.a * &tail).norm() < 1e-8);
        }
    }
    let v = common::gaussian_vector(&mut rng(5), 20);
    let mut rebuilt = l.q(0) * &v;
    for k in 1..l.dims.len() {
        rebuilt += (l.q(k) - l.q(k - 1)) * &v;
    }
    let last = l.dims.len() - 1;
    rebuilt += (DMatrix::identity(20, 20) - l.q(last)) * &v;
    assert!((rebuilt - v).norm() < 1e-10);
}

#[test]
fn tail_contraction_decreases_along_the_ladder() {
    let r = reference();
    let g0 = contraction_certificate(&r.dich, &r.model, TAU).0;
    let g = tail_contraction(&r.ladder, &r.model, TAU);
    assert!(g0 > g[0] && g.windows(2).all(|w| w[1] < w[0]), "{g0} {g:?}");
    assert!(*g.last().unwrap() < 0.5 * g0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn riesz_projector_is_idempotent_with_rank_trace(seed in 0u64..10_000, below in 1usize..4) {
        let lows: Vec<f64> = (0..below).map(|j| -0.8 + 0.4 * j as f64).collect();
        let (a, exact, _, _) = diagonalizable(seed, &spread_spectrum(12, &lows), SIGMA);
        let model = OseenModel::from_matrix(a);
        let p = riesz_projector(&model, SIGMA, 256).unwrap();
        prop_assert!((&p * &p - &p).norm() < 1e-8);
        prop_assert!((p.trace() - below as f64).abs() < 1e-6);
        prop_assert!((&p - exact).norm() < 1e-8);
    }
}
