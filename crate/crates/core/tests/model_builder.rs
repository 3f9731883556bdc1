mod common;

use common::{count_left_of, gaussian_matrix, power_norm, reference_spectrum, rng};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use stabilab::model::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn synthesized_spectrum_respects_envelope(
        n in 1usize..40,
        d in prop_oneof![Just(2u32), Just(3u32)],
        beta0 in 0.1f64..5.0,
        remainder_scale in 0.0f64..3.0,
        seed in any::<u64>(),
    ) {
        let spec = synth_stokes_spectrum(n, d, beta0, remainder_scale, seed).unwrap();
        prop_assert_eq!(spec.mu.len(), n);
        prop_assert!(spec.mu.iter().all(|&m| m > 0.0));
        prop_assert!(spec.mu.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(spec.validate().is_ok());
    }

    #[test]
    fn relative_bound_matches_power_iteration(seed in 0u64..1000, n in 2usize..12) {
        let mut r = rng(seed);
        let mu: Vec<f64> = (1..=n).map(|j| j as f64).collect();
        let a0 = DMatrix::from_diagonal(&DVector::from_vec(mu.clone()));
        let a1 = gaussian_matrix(&mut r, n, n);
        let spec = StokesSpectrum::from_values(2, 1.0, f64::INFINITY, mu.clone()).unwrap();
        let model = OseenModel::from_parts(spec, &a0 + &a1, vec![], 0).unwrap();
        let scaled = DMatrix::from_fn(n, n, |i, j| a1[(i, j)] / mu[j].sqrt());
        let oracle = power_norm(&scaled, 5000);
        let b = verify_relative_bound(&model).unwrap();
        prop_assert!((b - oracle).abs() < 1e-8 * oracle.max(1.0), "{} vs {}", b, oracle);
    }
}

#[test]
fn leading_term_examples() {
    let s = synth_stokes_spectrum(4, 2, 1.0, 0.0, 9).unwrap();
    assert_eq!(s.mu, vec![1.0, 2.0, 3.0, 4.0]);
    let s = synth_stokes_spectrum(3, 3, 2.0, 0.0, 9).unwrap();
    let expect = [2.0, 2.0 * 2f64.powf(2.0 / 3.0), 2.0 * 3f64.powf(2.0 / 3.0)];
    for (a, b) in s.mu.iter().zip(expect) {
        assert!((a - b).abs() < 1e-14);
    }
}

#[test]
fn one_unstable_mode_by_sign_function_count() {
    let spec = synth_stokes_spectrum(6, 2, 1.2, 1.25, 4).unwrap();
    let model = build_oseen(&spec, 1.0, 1, 0.5, &[3, 4, 5], 11).unwrap();
    assert_eq!(count_left_of(&model.a, 0.5), 1);
    assert_eq!(model.count_below(0.5), 1);
}

#[test]
fn reference_operator_is_split_exactly_and_bound_matches_svd() {
    let model = build_oseen(&reference_spectrum(), 0.5, 1, 0.5, &(10..20).collect::<Vec<_>>(), 7).unwrap();
    let recombined = &model.a0 + &model.a1;
    assert!((recombined - &model.a).amax() <= 4.0 * f64::EPSILON * model.a.amax());
    assert_eq!(
        model.a0,
        DMatrix::from_diagonal(&DVector::from_vec(model.spectrum_spec.mu.clone()))
    );

    let mu = &model.spectrum_spec.mu;
    let scaled = DMatrix::from_fn(20, 20, |i, j| model.a1[(i, j)] / mu[j].sqrt());
    let svd_max = scaled.singular_values().max();
    assert!((model.relative_bound_b - svd_max).abs() < 1e-10);
    assert!((model.relative_bound_b - 0.5).abs() < 1e-10);
    assert_eq!(count_left_of(&model.a, 0.5), 1);
}

#[test]
fn spectrum_cache_matches_dense_eigensolve() {
    let model = build_oseen(&reference_spectrum(), 0.5, 1, 0.5, &(10..20).collect::<Vec<_>>(), 7).unwrap();
    let mut dense: Vec<(f64, f64)> = model
        .a
        .clone()
        .complex_eigenvalues()
        .iter()
        .map(|z| (z.re, z.im))
        .collect();
    dense.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.partial_cmp(&b.1).unwrap()));
    let mut cached: Vec<(f64, f64)> = model
        .spectrum_cache
        .iter()
        .flat_map(|r| std::iter::repeat((r.re, r.im)).take(r.multiplicity))
        .collect();
    cached.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.partial_cmp(&b.1).unwrap()));
    assert_eq!(dense.len(), cached.len());
    for (d, c) in dense.iter().zip(&cached) {
        assert!((d.0 - c.0).abs() < 1e-8 && (d.1 - c.1).abs() < 1e-8, "{d:?} vs {c:?}");
    }
}

#[test]
fn relative_bound_trivial_cases() {
    let mu = vec![1.0, 4.0, 9.0];
    let spec = StokesSpectrum::from_values(2, 1.0, f64::INFINITY, mu.clone()).unwrap();
    let a0 = DMatrix::from_diagonal(&DVector::from_vec(mu.clone()));
    let zero = OseenModel::from_parts(spec.clone(), a0.clone(), vec![], 0).unwrap();
    assert_eq!(verify_relative_bound(&zero).unwrap(), 0.0);
    let sqrt = DMatrix::from_diagonal(&DVector::from_vec(mu.iter().map(|m| m.sqrt()).collect()));
    let unit = OseenModel::from_parts(spec, &a0 + sqrt, vec![], 0).unwrap();
    assert!((verify_relative_bound(&unit).unwrap() - 1.0).abs() < 1e-14);
}

#[test]
fn document_roundtrip_preserves_the_operator() {
    let model = build_oseen(&reference_spectrum(), 0.5, 1, 0.5, &[12, 10, 11], 7).unwrap();
    assert_eq!(model.obs_idx, vec![10, 11, 12]);
    let text = serde_json::to_string(&model.to_document()).unwrap();
    let doc: ModelDocument = serde_json::from_str(&text).unwrap();
    let back = OseenModel::from_document(&doc).unwrap();
    assert_eq!(back.a, model.a);
    assert_eq!(back.obs_idx, model.obs_idx);
    assert_eq!(back.spectrum_cache, model.spectrum_cache);
}
