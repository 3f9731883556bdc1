mod common;

use common::{gaussian_matrix, gaussian_vector, reference, rng};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use stabilab::dichotomy::eig_split;
use stabilab::feedback::*;
use stabilab::model::OseenModel;

#[test]
fn control_directions_vanish_on_observables() {
    let r = reference();
    for &i in &r.geo.obs_idx {
        assert!(r.geo.g.row(i).iter().all(|&x| x == 0.0));
    }
    assert_eq!(r.geo.gram.shape(), (r.dich.m, r.dich.m));
    assert!(r.geo.cond.is_finite());
}

#[test]
fn projector_is_the_oblique_projection_along_the_controls() {
    // Range X_σ and kernel span(G) determine the projector uniquely.
    let r = reference();
    let p = &r.pi.matrix;
    assert!((p * &r.geo.g).norm() < 1e-10);
    assert!((p * &r.dich.xs - &r.dich.xs).norm() < 1e-10);
    assert!((r.dich.d.transpose() * p).norm() < 1e-10);
    assert!((p * p - p).norm() < 1e-10);
}

#[test]
fn projector_norm_matches_randomized_estimate() {
    let r = reference();
    let mut g = rng(99);
    let best = (0..10_000)
        .map(|_| r.pi.apply(&gaussian_vector(&mut g, 20).normalize()).norm())
        .fold(0.0, f64::max);
    assert!(best <= r.pi.norm * (1.0 + 1e-12));
    assert!(best >= 0.99 * r.pi.norm, "{best} vs {}", r.pi.norm);
}

#[test]
fn extension_lies_in_the_stable_space() {
    let r = reference();
    let zero = DVector::zeros(r.geo.obs_idx.len());
    assert_eq!(build_extension(&r.dich, &r.geo, &zero).unwrap(), DVector::zeros(20));
    let mut g = rng(8);
    for _ in 0..20 {
        let v0 = gaussian_vector(&mut g, r.geo.obs_idx.len());
        let e = build_extension(&r.dich, &r.geo, &v0).unwrap();
        assert!((r.dich.d.transpose() * &e).amax() < 1e-10);
        for (k, &i) in r.geo.obs_idx.iter().enumerate() {
            assert_eq!(e[i], v0[k]);
        }
        // The extension of lifted data is the projection of the lift.
        let lv = lift(20, &r.geo.obs_idx, &v0).unwrap();
        assert!((r.pi.apply(&lv) - e).norm() < 1e-10);
    }
}

#[test]
fn hand_solved_two_dimensional_instance() {
    // A with adjoint unstable eigenvector (1,1)/√2.
    let a = DMatrix::from_row_slice(2, 2, &[0.5, -1.5, -1.5, 0.5]);
    let dich = eig_split(&OseenModel::from_matrix(a), 0.5).unwrap();
    let geo = ControlGeometry::new(&dich, &[0], DMatrix::from_column_slice(2, 1, &[0.0, 1.0])).unwrap();
    let pi = build_pi(&dich, &geo).unwrap();
    let out = apply_pi(&pi, &DVector::from_vec(vec![1.0, 0.0]));
    assert!((out - DVector::from_vec(vec![1.0, -1.0])).norm() < 1e-12);
    let e = build_extension(&dich, &geo, &DVector::from_vec(vec![1.0])).unwrap();
    assert!((e - DVector::from_vec(vec![1.0, -1.0])).norm() < 1e-12);
    // g orthogonal to d leaves the Gram system singular.
    assert!(matches!(
        ControlGeometry::new(&dich, &[], DMatrix::from_column_slice(2, 1, &[1.0, -1.0])),
        Err(stabilab::Error::SingularGram { .. })
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn projection_is_idempotent_and_keeps_observables(seed in any::<u64>()) {
        let r = reference();
        let phi = gaussian_vector(&mut rng(seed), 20) * 3.0;
        let once = apply_pi(&r.pi, &phi);
        let twice = apply_pi(&r.pi, &once);
        prop_assert!((&twice - &once).norm() < 1e-12 * (1.0 + once.norm()));
        for &i in &r.pi.obs_idx {
            prop_assert_eq!(once[i], phi[i]);
        }
        prop_assert!((r.dich.d.transpose() * &once).amax() < 1e-10 * (1.0 + phi.norm()));
    }

    #[test]
    fn random_directions_give_a_projector(seed in 0u64..500) {
        let r = reference();
        let mut g = gaussian_matrix(&mut rng(seed), 20, 1);
        for &i in &r.geo.obs_idx {
            g[(i, 0)] = 0.0;
        }
        if let Ok(geo) = ControlGeometry::new(&r.dich, &r.geo.obs_idx, g) {
            let pi = build_pi(&r.dich, &geo).unwrap();
            prop_assert!((&pi.matrix * &pi.matrix - &pi.matrix).norm() < 1e-8 * pi.norm * pi.norm);
            prop_assert!((&pi.matrix * &r.dich.xs - &r.dich.xs).norm() < 1e-8 * pi.norm);
        }
    }
}
