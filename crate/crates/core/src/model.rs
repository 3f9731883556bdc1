//! Finite Galerkin models of Oseen-type operators `A = A0 + A1`.
//!
//! `A0` is diagonal in the Stokes eigenbasis (identified with the standard
//! basis of R^n) with a Babenko-law spectrum; `A1` is a dense real
//! perturbation whose size relative to `A0^{1/2}` is prescribed exactly.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// Eigenvalues `mu_j` of the truncated Stokes operator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StokesSpectrum {
    pub n: usize,
    pub d: u32,
    pub beta0: f64,
    pub remainder_scale: f64,
    pub mu: Vec<f64>,
}

impl StokesSpectrum {
    /// Wrap explicit eigenvalues after checking the Babenko-law envelope.
    pub fn from_values(d: u32, beta0: f64, remainder_scale: f64, mu: Vec<f64>) -> Result<Self> {
        let spec = Self {
            n: mu.len(),
            d,
            beta0,
            remainder_scale,
            mu,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Leading term `beta0 * j^{2/d}` for 1-based `j`.
    pub fn leading(&self, j: usize) -> f64 {
        self.beta0 * (j as f64).powf(2.0 / self.d as f64)
    }

    /// Admissible deviation from the leading term for 1-based `j`.
    pub fn envelope(&self, j: usize) -> f64 {
        let jf = j as f64;
        self.remainder_scale * jf.powf(2.0 / self.d as f64) / (jf + 2.0).ln()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.d == 2 || self.d == 3) {
            return Err(Error::InvalidArgument(format!("d must be 2 or 3, got {}", self.d)));
        }
        if self.n == 0 || self.mu.len() != self.n {
            return Err(Error::InvalidArgument("spectrum must be non-empty".into()));
        }
        if !(self.beta0 > 0.0) || !(self.remainder_scale >= 0.0) {
            return Err(Error::InvalidArgument(
                "beta0 > 0 and remainder_scale >= 0 required".into(),
            ));
        }
        for (i, &m) in self.mu.iter().enumerate() {
            if !(m > 0.0) {
                return Err(Error::SingularA0 { index: i, value: m });
            }
            if i > 0 && m < self.mu[i - 1] {
                return Err(Error::InvalidArgument(format!("mu is not nondecreasing at {i}")));
            }
            let j = i + 1;
            let dev = (m - self.leading(j)).abs();
            if dev > self.envelope(j) * (1.0 + 1e-12) + 1e-14 {
                return Err(Error::InvalidArgument(format!(
                    "mu[{i}] = {m} deviates {dev} from the leading term (envelope {})",
                    self.envelope(j)
                )));
            }
        }
        Ok(())
    }
}

/// Sample a Babenko-law spectrum `mu_j = beta0 j^{2/d} + r_j`, with
/// `r_j` uniform in `[-1, 1] * remainder_scale * j^{2/d} / ln(j + 2)`,
/// redrawn while non-positive, then sorted.
pub fn synth_stokes_spectrum(n: usize, d: u32, beta0: f64, remainder_scale: f64, seed: u64) -> Result<StokesSpectrum> {
    if n == 0 {
        return Err(Error::InvalidArgument("n must be positive".into()));
    }
    if !(beta0 > 0.0) || !(remainder_scale >= 0.0) {
        return Err(Error::InvalidArgument(
            "beta0 > 0 and remainder_scale >= 0 required".into(),
        ));
    }
    if !(d == 2 || d == 3) {
        return Err(Error::InvalidArgument(format!("d must be 2 or 3, got {d}")));
    }
    let mut spec = StokesSpectrum {
        n,
        d,
        beta0,
        remainder_scale,
        mu: Vec::with_capacity(n),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for j in 1..=n {
        let lead = spec.leading(j);
        let env = spec.envelope(j);
        let mut value = lead;
        if env > 0.0 {
            loop {
                let u: f64 = rng.random_range(-1.0..=1.0);
                value = lead + u * env;
                if value > 0.0 {
                    break;
                }
            }
        }
        spec.mu.push(value);
    }
    spec.mu.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(spec)
}

/// One distinct eigenvalue of `A` with its algebraic multiplicity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EigenRecord {
    pub re: f64,
    pub im: f64,
    pub multiplicity: usize,
}

/// Group a sorted spectrum into distinct eigenvalues.
pub fn cluster_spectrum(ev: &[Complex64], tol: f64) -> Vec<EigenRecord> {
    let mut out: Vec<EigenRecord> = Vec::new();
    let mut used = vec![false; ev.len()];
    for i in 0..ev.len() {
        if used[i] {
            continue;
        }
        let mut members = vec![i];
        used[i] = true;
        for j in (i + 1)..ev.len() {
            if !used[j] && (ev[j] - ev[i]).norm() <= tol * (1.0 + ev[i].norm()) {
                used[j] = true;
                members.push(j);
            }
        }
        let k = members.len() as f64;
        let re = members.iter().map(|&m| ev[m].re).sum::<f64>() / k;
        let im = members.iter().map(|&m| ev[m].im).sum::<f64>() / k;
        out.push(EigenRecord {
            re,
            im,
            multiplicity: members.len(),
        });
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct OseenModel {
    pub n: usize,
    pub spectrum_spec: StokesSpectrum,
    pub a: DMatrix<f64>,
    pub a0: DMatrix<f64>,
    pub a1: DMatrix<f64>,
    pub relative_bound_b: f64,
    /// Observable coordinates (0-based).
    pub obs_idx: Vec<usize>,
    pub spectrum_cache: Vec<EigenRecord>,
    pub seed: u64,
}

/// Flat document used in experiment manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDocument {
    pub n: usize,
    pub d: u32,
    pub beta0: f64,
    #[serde(default)]
    pub remainder_scale: f64,
    pub mu: Vec<f64>,
    /// Row-major entries of `A`.
    pub a: Vec<f64>,
    pub obs_idx: Vec<usize>,
    pub seed: u64,
}

impl OseenModel {
    /// Assemble a model from an explicit operator. `A1` is taken as `A - diag(mu)`.
    pub fn from_parts(spectrum_spec: StokesSpectrum, a: DMatrix<f64>, obs_idx: Vec<usize>, seed: u64) -> Result<Self> {
        let n = spectrum_spec.n;
        if a.nrows() != n || a.ncols() != n {
            return Err(Error::DimensionMismatch(format!(
                "operator is {}x{}, spectrum has n = {n}",
                a.nrows(),
                a.ncols()
            )));
        }
        if obs_idx.iter().any(|&i| i >= n) {
            return Err(Error::InvalidArgument("observable index out of range".into()));
        }
        let a0 = DMatrix::from_diagonal(&DVector::from_vec(spectrum_spec.mu.clone()));
        let a1 = &a - &a0;
        let b = relative_norm(&a1, &spectrum_spec.mu)?;
        let spectrum_cache = cluster_spectrum(&linalg::eigenvalues(&a), 1e-9);
        let mut obs = obs_idx;
        obs.sort_unstable();
        obs.dedup();
        Ok(Self {
            n,
            spectrum_spec,
            a,
            a0,
            a1,
            relative_bound_b: b,
            obs_idx: obs,
            spectrum_cache,
            seed,
        })
    }

    /// Diagonal model `A = diag(values)` (no Babenko envelope check).
    pub fn diagonal(values: &[f64]) -> Self {
        let a = DMatrix::from_diagonal(&DVector::from_vec(values.to_vec()));
        Self::from_matrix(a)
    }

    /// Model for an arbitrary square matrix; `A0` is set to the identity
    /// so that the relative bound is the plain operator norm of `A - I`.
    pub fn from_matrix(a: DMatrix<f64>) -> Self {
        let n = a.nrows();
        let spectrum_spec = StokesSpectrum {
            n,
            d: 2,
            beta0: 1.0,
            remainder_scale: f64::INFINITY,
            mu: vec![1.0; n],
        };
        let a0 = DMatrix::identity(n, n);
        let a1 = &a - &a0;
        let b = linalg::op_norm(&a1);
        let spectrum_cache = cluster_spectrum(&linalg::eigenvalues(&a), 1e-9);
        Self {
            n,
            spectrum_spec,
            a,
            a0,
            a1,
            relative_bound_b: b,
            obs_idx: Vec::new(),
            spectrum_cache,
            seed: 0,
        }
    }

    pub fn eigenvalues(&self) -> Vec<Complex64> {
        linalg::eigenvalues(&self.a)
    }

    /// Number of eigenvalues (with multiplicity) with real part below `sigma`.
    pub fn count_below(&self, sigma: f64) -> usize {
        self.spectrum_cache
            .iter()
            .filter(|r| r.re < sigma)
            .map(|r| r.multiplicity)
            .sum()
    }

    /// Distance from the line `Re = sigma` to the spectrum.
    pub fn gap_at(&self, sigma: f64) -> f64 {
        self.spectrum_cache
            .iter()
            .map(|r| (r.re - sigma).abs())
            .fold(f64::INFINITY, f64::min)
    }

    pub fn to_document(&self) -> ModelDocument {
        let n = self.n;
        let mut a = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                a.push(self.a[(i, j)]);
            }
        }
        ModelDocument {
            n,
            d: self.spectrum_spec.d,
            beta0: self.spectrum_spec.beta0,
            remainder_scale: self.spectrum_spec.remainder_scale,
            mu: self.spectrum_spec.mu.clone(),
            a,
            obs_idx: self.obs_idx.clone(),
            seed: self.seed,
        }
    }

    pub fn from_document(doc: &ModelDocument) -> Result<Self> {
        if doc.a.len() != doc.n * doc.n || doc.mu.len() != doc.n {
            return Err(Error::DimensionMismatch("model document sizes disagree".into()));
        }
        let spec = StokesSpectrum {
            n: doc.n,
            d: doc.d,
            beta0: doc.beta0,
            remainder_scale: doc.remainder_scale,
            mu: doc.mu.clone(),
        };
        let a = DMatrix::from_row_slice(doc.n, doc.n, &doc.a);
        Self::from_parts(spec, a, doc.obs_idx.clone(), doc.seed)
    }
}

fn relative_norm(a1: &DMatrix<f64>, mu: &[f64]) -> Result<f64> {
    for (i, &m) in mu.iter().enumerate() {
        if !(m > 0.0) {
            return Err(Error::SingularA0 { index: i, value: m });
        }
    }
    let mut scaled = a1.clone();
    for (j, &m) in mu.iter().enumerate() {
        let s = 1.0 / m.sqrt();
        scaled.column_mut(j).scale_mut(s);
    }
    Ok(linalg::op_norm(&scaled))
}

/// `‖A1 A0^{-1/2}‖₂`.
pub fn verify_relative_bound(model: &OseenModel) -> Result<f64> {
    relative_norm(&model.a1, &model.spectrum_spec.mu)
}

/// Margin kept between `sigma` and every eigenvalue real part.
const BUILD_GAP_MARGIN: f64 = 1e-3;
const SHIFT_WEIGHTS: [f64; 8] = [16.0, 8.0, 4.0, 2.0, 1.0, 0.5, 0.25, 0.0];
const RESEEDS: u64 = 8;

/// Build `A = A0 + A1` with `‖A1 A0^{-1/2}‖₂ = b` and exactly `n_unstable`
/// eigenvalues with real part below `sigma`.
///
/// `A1 A0^{-1/2} = b (R + κ S) / ‖R + κ S‖` with `R` a dense Gaussian
/// matrix of unit norm and `S` a diagonal sign pattern on the low-index
/// block (−1 on the modes meant to go unstable, +1 on the stable modes that
/// could be dragged below `sigma`). The weight κ is scanned from strong to
/// weak, and `R` is redrawn, until the unstable count matches.
pub fn build_oseen(
    spec: &StokesSpectrum,
    b: f64,
    n_unstable: usize,
    sigma: f64,
    obs_idx: &[usize],
    seed: u64,
) -> Result<OseenModel> {
    spec.validate()?;
    let n = spec.n;
    if n_unstable >= n {
        return Err(Error::InvalidArgument(format!(
            "n_unstable = {n_unstable} must be below n = {n}"
        )));
    }
    if !(b >= 0.0) || !(sigma > 0.0) {
        return Err(Error::InvalidArgument("b >= 0 and sigma > 0 required".into()));
    }
    if b == 0.0 {
        let a = DMatrix::from_diagonal(&DVector::from_vec(spec.mu.clone()));
        let model = OseenModel::from_parts(spec.clone(), a, obs_idx.to_vec(), seed)?;
        if model.count_below(sigma) == n_unstable && model.gap_at(sigma) > BUILD_GAP_MARGIN {
            return Ok(model);
        }
        return Err(Error::ConstructionFailed {
            attempts: 1,
            reason: format!(
                "unperturbed spectrum has {} eigenvalues below sigma",
                model.count_below(sigma)
            ),
        });
    }

    let sqrt_mu: Vec<f64> = spec.mu.iter().map(|m| m.sqrt()).collect();
    let pattern: Vec<f64> = (0..n)
        .map(|j| {
            if j < n_unstable {
                -1.0
            } else if spec.mu[j] - b * sqrt_mu[j] <= sigma + BUILD_GAP_MARGIN {
                1.0
            } else {
                0.0
            }
        })
        .collect();

    let mut attempts = 0;
    let mut last_count = 0;
    for reseed in 0..RESEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(reseed.wrapping_mul(0x9E37_79B9)));
        let mut r = DMatrix::<f64>::from_fn(n, n, |_, _| rng.sample(StandardNormal));
        let rn = linalg::op_norm(&r);
        r /= rn;
        for &kappa in &SHIFT_WEIGHTS {
            attempts += 1;
            let mut w = r.clone();
            for j in 0..n {
                w[(j, j)] += kappa * pattern[j];
            }
            let wn = linalg::op_norm(&w);
            if wn == 0.0 {
                continue;
            }
            w *= b / wn;
            let mut a1 = w;
            for j in 0..n {
                a1.column_mut(j).scale_mut(sqrt_mu[j]);
            }
            let a = DMatrix::from_diagonal(&DVector::from_vec(spec.mu.clone())) + &a1;
            let model = OseenModel::from_parts(spec.clone(), a, obs_idx.to_vec(), seed)?;
            last_count = model.count_below(sigma);
            if last_count == n_unstable && model.gap_at(sigma) > BUILD_GAP_MARGIN {
                return Ok(model);
            }
        }
    }
    Err(Error::ConstructionFailed {
        attempts,
        reason: format!("could not realise {n_unstable} eigenvalues below sigma = {sigma} (last count {last_count})"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_remainder_d2_is_linear() {
        let s = synth_stokes_spectrum(4, 2, 1.0, 0.0, 7).unwrap();
        assert_eq!(s.mu, vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn zero_remainder_d3() {
        let s = synth_stokes_spectrum(3, 3, 2.0, 0.0, 0).unwrap();
        let expect = [2.0, 2.0 * 2f64.powf(2.0 / 3.0), 2.0 * 3f64.powf(2.0 / 3.0)];
        for (a, b) in s.mu.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    proptest! {
        #[test]
        fn synthesized_spectrum_is_valid(n in 1usize..40, d in 2u32..4, beta0 in 0.05f64..5.0,
                                         scale in 0.0f64..3.0, seed in any::<u64>()) {
            let s = synth_stokes_spectrum(n, d, beta0, scale, seed).unwrap();
            prop_assert!(s.mu.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!(s.validate().is_ok());
            let again = synth_stokes_spectrum(n, d, beta0, scale, seed).unwrap();
            prop_assert_eq!(s, again);
        }
    }

    #[test]
    fn b_zero_gives_a0() {
        let s = synth_stokes_spectrum(5, 2, 1.0, 0.0, 0).unwrap();
        let m = build_oseen(&s, 0.0, 0, 0.5, &[], 1).unwrap();
        assert_eq!(m.a, m.a0);
        assert_eq!(m.count_below(0.5), 0);
        let ev = m.eigenvalues();
        for (e, mu) in ev.iter().zip(s.mu.iter()) {
            assert!((e.re - mu).abs() < 1e-10 && e.im.abs() < 1e-10);
        }
    }

    #[test]
    fn relative_bound_examples() {
        let s = synth_stokes_spectrum(3, 2, 1.0, 0.0, 0).unwrap();
        let a0 = DMatrix::from_diagonal(&DVector::from_vec(s.mu.clone()));
        let m = OseenModel::from_parts(s.clone(), a0.clone(), vec![], 0).unwrap();
        assert_eq!(verify_relative_bound(&m).unwrap(), 0.0);
        let half = DMatrix::from_diagonal(&DVector::from_vec(s.mu.iter().map(|x| x.sqrt()).collect()));
        let m = OseenModel::from_parts(s, a0 + half, vec![], 0).unwrap();
        assert!((verify_relative_bound(&m).unwrap() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn singular_a0_is_reported() {
        let spec = StokesSpectrum {
            n: 2,
            d: 2,
            beta0: 1.0,
            remainder_scale: 10.0,
            mu: vec![0.0, 1.0],
        };
        assert!(matches!(
            relative_norm(&DMatrix::zeros(2, 2), &spec.mu),
            Err(Error::SingularA0 { index: 0, .. })
        ));
    }

    #[test]
    fn seeded_build_is_bitwise_reproducible() {
        let s = synth_stokes_spectrum(6, 2, 0.3, 0.0, 3).unwrap();
        let a = build_oseen(&s, 0.5, 1, 0.5, &[4, 5], 11).unwrap();
        let b = build_oseen(&s, 0.5, 1, 0.5, &[4, 5], 11).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn impossible_request_fails() {
        // Relative bound 0.1 cannot drag mu_1 = 1 below 0.5.
        let s = synth_stokes_spectrum(4, 2, 1.0, 0.0, 0).unwrap();
        let err = build_oseen(&s, 0.1, 1, 0.5, &[], 0).unwrap_err();
        assert!(matches!(err, Error::ConstructionFailed { .. }));
    }
}
