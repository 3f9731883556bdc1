mod common;

use common::{reference, reference_with_eps, rng, TAU};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use stabilab::dichotomy::eig_split;
use stabilab::feedback::{build_extension, build_pi, ControlGeometry};
use stabilab::kick::{KickLaw, KickSampler};
use stabilab::model::OseenModel;
use stabilab::rds::*;

fn unit_initial_state(r: &common::Reference) -> DVector<f64> {
    let data = DVector::from_element(r.geo.obs_idx.len(), 1.0);
    build_extension(&r.dich, &r.geo, &data).unwrap().normalize()
}

fn chain(w0: &DVector<f64>, n_steps: usize, seed: u64, stream: u64) -> ChainConfig {
    ChainConfig {
        n_steps,
        w0: w0.as_slice().to_vec(),
        seed,
        stream,
        record_kicks: true,
    }
}

#[test]
fn steps_stay_in_the_stable_subspace() {
    let r = reference();
    let sys = r.system(TAU);
    let mut sampler = KickSampler::new(&sys.law, 5, 0);
    let mut w = unit_initial_state(r);
    for _ in 0..500 {
        w = step(&sys.s, &sys.pi, &mut sampler, &w).unwrap();
        assert!((r.dich.d.transpose() * &w).amax() < 1e-8);
    }
}

#[test]
fn recorded_kicks_reproduce_the_trajectory() {
    // Oracle: S w + Π φ, the update before the drift-free rearrangement.
    let r = reference();
    let sys = r.system(TAU);
    let w0 = unit_initial_state(r);
    let t = run_chain(&sys, &chain(&w0, 40, 9, 3)).unwrap();
    let kicks = t.kicks.as_ref().unwrap();
    let mut w = w0.clone();
    for (k, phi) in kicks.iter().enumerate() {
        w = &sys.s * &w + sys.pi.apply(phi);
        assert!((&w - &t.states[k + 1]).norm() < 1e-12 * (1.0 + w.norm()));
    }
}

#[test]
fn degenerate_kicks_give_pure_contraction() {
    let r = reference_with_eps(0.0);
    let sys = r.system(TAU);
    let w0 = unit_initial_state(&r);
    let t = run_chain(&sys, &chain(&w0, 30, 1, 0)).unwrap();
    let mut bound = w0.norm();
    for (k, &x) in t.norms.iter().enumerate() {
        assert!(x <= bound * (1.0 + 1e-12) + 1e-300, "step {k}: {x} > {bound}");
        bound *= sys.gamma0;
    }
    let mut sampler = KickSampler::new(&sys.law, 1, 0);
    let next = step(&sys.s, &sys.pi, &mut sampler, &w0).unwrap();
    assert!((next - &sys.s * &w0).norm() < 1e-14);
}

#[test]
fn threshold_arithmetic() {
    assert!((stage_threshold(2.0, 0.01, 0.5) - 0.04).abs() < 1e-15);
    assert_eq!(stage_threshold(2.0, 0.01, 1.0), f64::INFINITY);
}

#[test]
fn ensemble_respects_the_envelope() {
    let r = reference();
    let sys = r.system(TAU);
    let w0 = unit_initial_state(r);
    let runs = run_ensemble(&sys, w0.as_slice(), 200, 200, 11).unwrap();
    for t in &runs {
        let rep = envelope_check(&t.norms, sys.gamma0, sys.pi.norm, sys.law.eps_hat);
        assert!(rep.certificate_valid);
        assert_eq!(rep.violations, 0, "max residual {}", rep.max_residual);
        assert!(t.max_invariance_residual < 1e-8);
    }
    let zero = DVector::zeros(20);
    let t = run_chain(&sys, &chain(&zero, 200, 2, 0)).unwrap();
    assert!(t.norms.iter().all(|&x| x <= sys.stage_threshold()));
    assert_eq!(t.first_entry, Some(0));
}

#[test]
fn invalid_certificate_is_flagged() {
    let rep = envelope_check(&[1.0, 1.0], 1.2, 1.0, 0.1);
    assert!(!rep.certificate_valid);
}

#[test]
fn uncontrolled_growth_follows_the_unstable_eigenvalue() {
    let r = reference();
    let lambda_min = r
        .model
        .spectrum_cache
        .iter()
        .map(|e| e.re)
        .fold(f64::INFINITY, f64::min);
    assert!(lambda_min < 0.0);
    let w0 = unit_initial_state(r);
    let run = uncontrolled_demo(&r.model, &r.law, &w0, TAU, 200, 11, 0).unwrap();
    let expect = TAU * lambda_min.abs();
    assert!(
        (run.growth_rate - expect).abs() < 0.1 * expect,
        "{} vs {expect}",
        run.growth_rate
    );
}

#[test]
fn single_unstable_diagonal_mode_grows_exactly() {
    let model = OseenModel::diagonal(&[-1.0, 2.0]);
    let law = KickLaw::new(DMatrix::identity(2, 2), 0.0, 1).unwrap();
    let w0 = DVector::from_vec(vec![1.0, 0.0]);
    let tau = 0.3;
    let run = uncontrolled_demo(&model, &law, &w0, tau, 20, 0, 0).unwrap();
    for (k, &x) in run.norms.iter().enumerate() {
        assert!((x / (tau * k as f64).exp() - 1.0).abs() < 1e-12);
    }
    assert!((run.growth_rate - tau).abs() < 1e-10);
}

#[test]
fn stable_model_does_not_grow() {
    let model = OseenModel::diagonal(&[0.5, 1.0, 2.0]);
    assert!(matches!(
        uncontrolled_demo(
            &model,
            &KickLaw::new(DMatrix::identity(3, 3), 0.0, 1).unwrap(),
            &DVector::zeros(3),
            1.0,
            5,
            0,
            0
        ),
        Err(stabilab::Error::NotUnstable)
    ));
    let law = KickLaw::new(DMatrix::identity(3, 3), 0.0, 1).unwrap();
    let run = uncontrolled_run(&model, &law, &DVector::from_element(3, 1.0), 1.0, 40, 0, 0).unwrap();
    assert!(run.growth_rate <= 0.0);
}

#[test]
fn controlled_two_mode_system_contracts() {
    // Small system where every piece can be written down by hand.
    let model = OseenModel::diagonal(&[-1.0, 2.0]);
    let dich = eig_split(&model, 0.5).unwrap();
    let geo = ControlGeometry::new(&dich, &[1], DMatrix::from_column_slice(2, 1, &[1.0, 0.0])).unwrap();
    let pi = build_pi(&dich, &geo).unwrap();
    let law = KickLaw::new(DMatrix::identity(2, 2) * 0.01, 0.1, 2).unwrap();
    let sys = ControlledSystem::new(&model, &dich, pi, law, 0.5).unwrap();
    assert!((sys.gamma0 - (-1.0f64).exp()).abs() < 1e-12);
    let t = run_chain(&sys, &chain(&DVector::from_vec(vec![0.0, 1.0]), 50, 3, 0)).unwrap();
    assert!(t.states.iter().all(|w| w[0] == 0.0));
    assert!(t.norms.last().unwrap() <= &sys.stage_threshold());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn same_seed_gives_bitwise_identical_chains(seed in any::<u64>(), stream in 0u64..100) {
        let r = reference();
        let sys = r.system(TAU);
        let w0 = common::gaussian_vector(&mut rng(seed), 20);
        let w0 = r.pi.apply(&w0);
        let a = run_chain(&sys, &chain(&w0, 25, seed, stream)).unwrap();
        let b = run_chain(&sys, &chain(&w0, 25, seed, stream)).unwrap();
        prop_assert_eq!(a, b);
    }
}
