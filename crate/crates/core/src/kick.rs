//! Truncated Gaussian kick law: a centred Gaussian with correlation `K`
//! conditioned on the ball of radius `eps_hat`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::quadrature::{ln_unit_ball_volume, sphere_rule, GaussLegendre};

/// Draws per acceptance window and the minimum acceptance rate over one.
pub const REJECTION_WINDOW: u64 = 1_000_000;
pub const MIN_ACCEPTANCE: f64 = 1e-4;
/// Monte Carlo budget for the normalisation constant when `n > 3`.
pub const NORM_MC_SAMPLES: usize = 200_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Proposal {
    /// Draw from `N(0, K)` and keep draws inside the ball.
    Gaussian,
    /// Draw uniformly in the ball and keep with probability
    /// `exp(-φᵀK⁻¹φ/2)`.
    UniformBall,
    /// Whichever of the two has the higher acceptance probability.
    Auto,
}

/// Mass `G(B)` of the ball under `N(0, K)`, kept in log form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BallMass {
    pub ln_mass: f64,
    /// Relative standard error of the mass (zero for quadrature).
    pub rel_stderr: f64,
}

impl BallMass {
    /// `ĉ = 1 / G(B)`.
    pub fn c_hat(&self) -> f64 {
        (-self.ln_mass).exp()
    }
}

#[derive(Debug, Clone)]
pub struct KickLaw {
    pub k: DMatrix<f64>,
    pub eps_hat: f64,
    pub chol: Cholesky<f64, Dyn>,
    /// Lower Cholesky factor of `K`.
    pub l: DMatrix<f64>,
    pub ln_det_k: f64,
    /// Resolved proposal (never `Auto`).
    pub proposal: Proposal,
    pub mass: BallMass,
    pub seed: u64,
}

impl KickLaw {
    pub fn new(k: DMatrix<f64>, eps_hat: f64, seed: u64) -> Result<Self> {
        Self::with_proposal(k, eps_hat, seed, Proposal::Auto)
    }

    /// Diagonal correlation `K = diag(j^{-2})`, `j = 1..n`.
    pub fn default_correlation(n: usize) -> DMatrix<f64> {
        DMatrix::from_fn(n, n, |i, j| if i == j { 1.0 / ((i + 1) as f64).powi(2) } else { 0.0 })
    }

    pub fn with_proposal(k: DMatrix<f64>, eps_hat: f64, seed: u64, proposal: Proposal) -> Result<Self> {
        let n = k.nrows();
        if n == 0 || k.ncols() != n {
            return Err(Error::DimensionMismatch("correlation matrix must be square".into()));
        }
        let asym = (&k - k.transpose()).abs().max();
        if asym > 1e-12 * (1.0 + k.abs().max()) {
            return Err(Error::InvalidArgument("correlation matrix is not symmetric".into()));
        }
        if !(eps_hat >= 0.0) || !eps_hat.is_finite() {
            return Err(Error::InvalidArgument("eps_hat must be a nonnegative number".into()));
        }
        let (vals, _) = linalg::sym_eigen_desc(&k);
        let min_eig = *vals.last().unwrap();
        if !(min_eig > 0.0) {
            return Err(Error::DegenerateCovariance { min_eig });
        }
        let chol = Cholesky::new(k.clone()).ok_or(Error::DegenerateCovariance { min_eig })?;
        let ln_det_k = 2.0 * chol.l().diagonal().iter().map(|x| x.ln()).sum::<f64>();
        let mut law = Self {
            k,
            eps_hat,
            l: chol.l(),
            chol,
            ln_det_k,
            proposal,
            mass: BallMass {
                ln_mass: 0.0,
                rel_stderr: 0.0,
            },
            seed,
        };
        if proposal == Proposal::Auto {
            law.proposal = if law.ln_ball_volume() + law.ln_gauss_density_at_zero() < 0.0 {
                Proposal::UniformBall
            } else {
                Proposal::Gaussian
            };
        }
        law.mass = law.estimate_mass();
        Ok(law)
    }

    pub fn n(&self) -> usize {
        self.k.nrows()
    }

    pub fn is_degenerate(&self) -> bool {
        self.eps_hat == 0.0
    }

    fn ln_ball_volume(&self) -> f64 {
        if self.eps_hat == 0.0 {
            return f64::NEG_INFINITY;
        }
        ln_unit_ball_volume(self.n()) + self.n() as f64 * self.eps_hat.ln()
    }

    fn ln_gauss_density_at_zero(&self) -> f64 {
        -0.5 * self.n() as f64 * (2.0 * std::f64::consts::PI).ln() - 0.5 * self.ln_det_k
    }

    /// `φᵀ K⁻¹ φ`.
    pub fn quad_form(&self, phi: &DVector<f64>) -> f64 {
        let z = self
            .chol
            .l_dirty()
            .solve_lower_triangular(phi)
            .expect("Cholesky factor is nonsingular");
        z.norm_squared()
    }

    /// Untruncated Gaussian density `g(φ)`.
    pub fn gauss_density(&self, phi: &DVector<f64>) -> f64 {
        (self.ln_gauss_density_at_zero() - 0.5 * self.quad_form(phi)).exp()
    }

    /// Density of the truncated law, `ĉ χ_B(φ) g(φ)`.
    pub fn density(&self, phi: &DVector<f64>) -> f64 {
        if phi.norm() > self.eps_hat {
            0.0
        } else {
            self.mass.c_hat() * self.gauss_density(phi)
        }
    }

    fn estimate_mass(&self) -> BallMass {
        let n = self.n();
        if self.eps_hat == 0.0 {
            return BallMass {
                ln_mass: f64::NEG_INFINITY,
                rel_stderr: 0.0,
            };
        }
        if n <= 3 {
            let angular = if n == 3 { 64 } else { 256 };
            let sphere = sphere_rule(n, angular);
            let gl = GaussLegendre::new(64);
            let mut total = 0.0;
            for (r, wr) in gl.on(0.0, self.eps_hat) {
                let mut shell = 0.0;
                for (dir, wd) in &sphere {
                    let phi = DVector::from_iterator(n, dir.iter().map(|c| c * r));
                    shell += wd * self.gauss_density(&phi);
                }
                total += wr * r.powi(n as i32 - 1) * shell;
            }
            return BallMass {
                ln_mass: total.ln(),
                rel_stderr: 0.0,
            };
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x6b69_636b_6d61_7373);
        let (mean, se) = match self.proposal {
            Proposal::Gaussian => {
                let hits = (0..NORM_MC_SAMPLES)
                    .filter(|_| self.gaussian_draw(&mut rng).norm() <= self.eps_hat)
                    .count();
                let p = hits as f64 / NORM_MC_SAMPLES as f64;
                (p, (p * (1.0 - p) / NORM_MC_SAMPLES as f64).sqrt())
            }
            _ => {
                let vals: Vec<f64> = (0..NORM_MC_SAMPLES)
                    .map(|_| (-0.5 * self.quad_form(&self.ball_draw(&mut rng))).exp())
                    .collect();
                mean_and_stderr(&vals)
            }
        };
        let ln_mass = match self.proposal {
            Proposal::Gaussian => mean.ln(),
            _ => self.ln_ball_volume() + self.ln_gauss_density_at_zero() + mean.ln(),
        };
        BallMass {
            ln_mass,
            rel_stderr: if mean > 0.0 { se / mean } else { f64::INFINITY },
        }
    }

    fn gaussian_draw(&self, rng: &mut ChaCha8Rng) -> DVector<f64> {
        let z = DVector::from_fn(self.n(), |_, _| rng.sample(StandardNormal));
        &self.l * z
    }

    fn ball_draw(&self, rng: &mut ChaCha8Rng) -> DVector<f64> {
        let n = self.n();
        let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let u: f64 = rng.random();
        z.normalize() * (self.eps_hat * u.powf(1.0 / n as f64))
    }

    /// Probability that one proposal draw is accepted.
    pub fn acceptance_probability(&self) -> f64 {
        match self.proposal {
            Proposal::Gaussian => self.mass.ln_mass.exp(),
            _ => (self.mass.ln_mass - self.ln_ball_volume() - self.ln_gauss_density_at_zero()).exp(),
        }
    }
}

fn mean_and_stderr(vals: &[f64]) -> (f64, f64) {
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Stateful sampler over one RNG stream, tracking the acceptance rate.
#[derive(Debug, Clone)]
pub struct KickSampler<'a> {
    law: &'a KickLaw,
    rng: ChaCha8Rng,
    window_draws: u64,
    window_accepts: u64,
}

impl<'a> KickSampler<'a> {
    /// Stream `stream` of the generator seeded with `seed`.
    pub fn new(law: &'a KickLaw, seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self {
            law,
            rng,
            window_draws: 0,
            window_accepts: 0,
        }
    }

    pub fn sample(&mut self) -> Result<DVector<f64>> {
        let law = self.law;
        if law.is_degenerate() {
            return Ok(DVector::zeros(law.n()));
        }
        loop {
            let (phi, ok) = match law.proposal {
                Proposal::Gaussian => {
                    let phi = law.gaussian_draw(&mut self.rng);
                    let ok = phi.norm() <= law.eps_hat;
                    (phi, ok)
                }
                _ => {
                    let phi = law.ball_draw(&mut self.rng);
                    let u: f64 = self.rng.random();
                    let ok = u < (-0.5 * law.quad_form(&phi)).exp();
                    (phi, ok)
                }
            };
            self.window_draws += 1;
            if ok {
                self.window_accepts += 1;
            }
            if self.window_draws == REJECTION_WINDOW {
                let rate = self.window_accepts as f64 / REJECTION_WINDOW as f64;
                self.window_draws = 0;
                self.window_accepts = 0;
                if rate < MIN_ACCEPTANCE {
                    return Err(Error::RejectionCap {
                        rate,
                        window: REJECTION_WINDOW,
                    });
                }
            }
            if ok {
                return Ok(phi);
            }
        }
    }
}

pub fn sample_kick(sampler: &mut KickSampler<'_>) -> Result<DVector<f64>> {
    sampler.sample()
}

/// Membership of `x` in the image of the ball under `(u, v) ↦ α u + v`.
pub fn support_ellipsoid_membership(alpha: &DMatrix<f64>, eps_hat: f64, x: &DVector<f64>) -> bool {
    ellipsoid_form(alpha, x) <= eps_hat * eps_hat * (1.0 + 1e-12)
}

/// `‖x − α ŷ‖² + ‖ŷ‖²` at the minimiser `ŷ = (αᵀα + I)⁻¹ αᵀ x`.
pub fn ellipsoid_form(alpha: &DMatrix<f64>, x: &DVector<f64>) -> f64 {
    let m = alpha.ncols();
    let gram = alpha.transpose() * alpha + DMatrix::identity(m, m);
    let y = gram
        .cholesky()
        .expect("αᵀα + I is positive definite")
        .solve(&(alpha.transpose() * x));
    (x - alpha * &y).norm_squared() + y.norm_squared()
}

/// Kick law pushed to an `r`-dimensional subspace: `N(0, K̂)` with
/// `K̂ = Bᵀ K B` on the ball, for an orthonormal basis `B`.
#[derive(Debug, Clone)]
pub struct ProjectedLaw {
    pub basis: DMatrix<f64>,
    pub law: KickLaw,
}

impl ProjectedLaw {
    pub fn from_basis(law: &KickLaw, basis: DMatrix<f64>) -> Result<Self> {
        let khat = basis.transpose() * &law.k * &basis;
        let khat = (&khat + khat.transpose()) * 0.5;
        let (vals, _) = linalg::sym_eigen_desc(&khat);
        let min_eig = vals.last().copied().unwrap_or(0.0);
        if !(min_eig >= 1e-14) {
            return Err(Error::DegenerateCovariance { min_eig });
        }
        let projected = KickLaw::with_proposal(khat, law.eps_hat, law.seed, Proposal::Auto)?;
        Ok(Self { basis, law: projected })
    }

    /// The subspace basis is taken from the eigenvectors of `q` with
    /// eigenvalue one, in descending-eigenvalue order.
    pub fn from_projector(law: &KickLaw, q: &DMatrix<f64>) -> Result<Self> {
        let (vals, vecs) = linalg::sym_eigen_desc(q);
        let r = vals.iter().filter(|&&v| v > 0.5).count();
        Self::from_basis(law, vecs.columns(0, r).into_owned())
    }

    pub fn r(&self) -> usize {
        self.basis.ncols()
    }

    /// Untruncated Gaussian density on the subspace.
    pub fn gauss_density(&self, y: &DVector<f64>) -> f64 {
        self.law.gauss_density(y)
    }
}

/// `ĉ χ(y) g(y)` for the projected law at subspace coordinates `y`.
pub fn qnu_density(proj: &ProjectedLaw, y: &DVector<f64>) -> f64 {
    proj.law.density(y)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn samples_stay_in_ball() {
        let law = KickLaw::new(KickLaw::default_correlation(5), 0.3, 1).unwrap();
        let mut s = KickSampler::new(&law, 7, 0);
        for _ in 0..2000 {
            assert!(s.sample().unwrap().norm() <= 0.3);
        }
    }

    #[test]
    fn tiny_ball_hits_rejection_cap() {
        let law = KickLaw::with_proposal(DMatrix::identity(50, 50), 1e-6, 1, Proposal::Gaussian).unwrap();
        let mut s = KickSampler::new(&law, 3, 0);
        assert!(matches!(s.sample(), Err(Error::RejectionCap { .. })));
    }

    #[test]
    fn auto_picks_ball_for_tight_truncation() {
        let law = KickLaw::new(KickLaw::default_correlation(20), 0.01, 1).unwrap();
        assert_eq!(law.proposal, Proposal::UniformBall);
        assert!(law.acceptance_probability() > 0.9);
    }

    #[test]
    fn degenerate_law_returns_zero() {
        let law = KickLaw::new(DMatrix::identity(3, 3), 0.0, 1).unwrap();
        let mut s = KickSampler::new(&law, 1, 0);
        assert_eq!(s.sample().unwrap(), DVector::zeros(3));
    }

    #[test]
    fn streams_are_deterministic() {
        let law = KickLaw::new(DMatrix::identity(4, 4), 1.0, 1).unwrap();
        let a: Vec<_> = {
            let mut s = KickSampler::new(&law, 11, 2);
            (0..5).map(|_| s.sample().unwrap()).collect()
        };
        let mut s = KickSampler::new(&law, 11, 2);
        for v in a {
            assert_eq!(v, s.sample().unwrap());
        }
        let mut other = KickSampler::new(&law, 11, 3);
        assert_ne!(other.sample().unwrap(), KickSampler::new(&law, 11, 2).sample().unwrap());
    }

    #[test]
    fn ellipsoid_examples() {
        let zero = DMatrix::zeros(2, 1);
        assert!(support_ellipsoid_membership(
            &zero,
            1.0,
            &DVector::from_vec(vec![0.6, 0.8])
        ));
        assert!(!support_ellipsoid_membership(
            &zero,
            1.0,
            &DVector::from_vec(vec![0.6, 0.81])
        ));
        let a = DMatrix::from_element(1, 1, 3.0);
        let edge = 0.5 * 10f64.sqrt();
        assert!(support_ellipsoid_membership(&a, 0.5, &DVector::from_element(1, edge)));
        assert!(!support_ellipsoid_membership(
            &a,
            0.5,
            &DVector::from_element(1, edge * 1.001)
        ));
        let q = ellipsoid_form(&a, &DVector::from_element(1, 2.0));
        assert!((q - 4.0 / 10.0).abs() < 1e-14);
    }

    #[test]
    fn standard_normal_at_origin() {
        let law = KickLaw::new(DMatrix::identity(2, 2), 100.0, 1).unwrap();
        let proj = ProjectedLaw::from_basis(&law, DMatrix::identity(2, 2)).unwrap();
        let g = proj.gauss_density(&DVector::zeros(2));
        assert!((g - 1.0 / (2.0 * std::f64::consts::PI)).abs() < 1e-15);
    }

    #[test]
    fn degenerate_projection_rejected() {
        let mut k = DMatrix::identity(3, 3);
        k[(2, 2)] = 1e-20;
        let law = KickLaw::new(DMatrix::identity(3, 3), 1.0, 1).unwrap();
        let basis = DMatrix::from_column_slice(3, 1, &[0.0, 0.0, 1.0]);
        assert!(ProjectedLaw::from_basis(&law, basis.clone()).is_ok());
        let thin = KickLaw {
            k: k.clone(),
            ..law.clone()
        };
        assert!(matches!(
            ProjectedLaw::from_basis(&thin, basis),
            Err(Error::DegenerateCovariance { .. })
        ));
    }
}
