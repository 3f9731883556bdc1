#![allow(dead_code)]

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use stabilab::dichotomy::{eig_split, Dichotomy};
use stabilab::feedback::{build_pi, ControlGeometry, FeedbackProjector};
use stabilab::kick::KickLaw;
use stabilab::ladder::{sigma_ladder, SigmaLadder};
use stabilab::model::{build_oseen, OseenModel, StokesSpectrum};
use stabilab::rds::ControlledSystem;

pub const SIGMA: f64 = 0.5;
pub const TAU: f64 = 2.0;

/// Twenty modes, one unstable, observed on the upper half of the coordinates.
pub struct Reference {
    pub model: OseenModel,
    pub dich: Dichotomy,
    pub ladder: SigmaLadder,
    pub geo: ControlGeometry,
    pub pi: FeedbackProjector,
    pub law: KickLaw,
}

pub fn reference_spectrum() -> StokesSpectrum {
    let mut mu: Vec<f64> = (1..=20).map(|j| 1.2 * j as f64).collect();
    mu[0] = 0.1;
    StokesSpectrum::from_values(2, 1.2, 1.25, mu).unwrap()
}

pub fn reference_with_eps(eps_hat: f64) -> Reference {
    let obs: Vec<usize> = (10..20).collect();
    let model = build_oseen(&reference_spectrum(), 0.5, 1, SIGMA, &obs, 7).unwrap();
    let dich = eig_split(&model, SIGMA).unwrap();
    let ladder = sigma_ladder(&model, &dich, 3).unwrap();
    let geo = ControlGeometry::with_fallback(&dich, &obs, 1, 16).unwrap();
    let pi = build_pi(&dich, &geo).unwrap();
    let law = KickLaw::new(KickLaw::default_correlation(20), eps_hat, 3).unwrap();
    Reference {
        model,
        dich,
        ladder,
        geo,
        pi,
        law,
    }
}

/// Shared instance with ε̂ = 0.01, built once per test binary.
pub fn reference() -> &'static Reference {
    static REF: OnceLock<Reference> = OnceLock::new();
    REF.get_or_init(|| reference_with_eps(0.01))
}

impl Reference {
    pub fn system(&self, tau: f64) -> ControlledSystem {
        ControlledSystem::new(&self.model, &self.dich, self.pi.clone(), self.law.clone(), tau).unwrap()
    }
}

pub fn gaussian_vector(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
}

pub fn gaussian_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Largest singular value by power iteration on `MᵀM`.
pub fn power_norm(m: &DMatrix<f64>, iters: usize) -> f64 {
    let mut v = DVector::from_element(m.ncols(), 1.0).normalize();
    let mtm = m.transpose() * m;
    let mut est = 0.0;
    for _ in 0..iters {
        let next = &mtm * &v;
        est = next.norm();
        if est == 0.0 {
            return 0.0;
        }
        v = next / est;
    }
    est.sqrt()
}

/// Matrix sign function by Newton iteration `X ← (X + X⁻¹)/2`. Its trace
/// counts eigenvalues right of the origin minus those left of it.
pub fn matrix_sign(b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut x = b.clone();
    for _ in 0..100 {
        let inv = x.clone().try_inverse().unwrap();
        let next = (&x + inv) * 0.5;
        let done = (&next - &x).norm() <= 1e-14 * next.norm();
        x = next;
        if done {
            break;
        }
    }
    x
}

pub fn count_left_of(a: &DMatrix<f64>, sigma: f64) -> usize {
    let n = a.nrows();
    let s = matrix_sign(&(a - DMatrix::identity(n, n) * sigma));
    ((n as f64 - s.trace()) / 2.0).round() as usize
}
