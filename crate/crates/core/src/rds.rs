//! The controlled kicked process `w ← S w + Π φ`, its uncontrolled
//! counterpart and the envelope certificate.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dichotomy::{contraction_certificate, Dichotomy};
use crate::error::{Error, Result};
use crate::feedback::FeedbackProjector;
use crate::kick::{KickLaw, KickSampler};
use crate::linalg;
use crate::model::OseenModel;

/// Tolerance for `w ∈ X_sigma`, measured as `‖Dᵀ w‖`.
pub const INVARIANCE_TOL: f64 = 1e-8;

/// Everything needed to advance the controlled process.
#[derive(Debug, Clone)]
pub struct ControlledSystem {
    pub tau: f64,
    pub s: DMatrix<f64>,
    pub pi: FeedbackProjector,
    pub law: KickLaw,
    /// Adjoint unstable basis; `Dᵀ w = 0` characterises `X_sigma`.
    pub d: DMatrix<f64>,
    pub gamma0: f64,
}

impl ControlledSystem {
    pub fn new(model: &OseenModel, dich: &Dichotomy, pi: FeedbackProjector, law: KickLaw, tau: f64) -> Result<Self> {
        if law.n() != model.n {
            return Err(Error::DimensionMismatch(format!(
                "kick law has dimension {}, model {}",
                law.n(),
                model.n
            )));
        }
        let (gamma0, _) = contraction_certificate(dich, model, tau);
        Ok(Self {
            tau,
            s: linalg::expm(&(-&model.a * tau)),
            pi,
            law,
            d: dich.d.clone(),
            gamma0,
        })
    }

    pub fn n(&self) -> usize {
        self.s.nrows()
    }

    pub fn invariance_residual(&self, w: &DVector<f64>) -> f64 {
        if self.d.ncols() == 0 {
            0.0
        } else {
            (self.d.transpose() * w).norm()
        }
    }

    /// `Π(S w + φ)`. Equal to `S w + Π φ` in exact arithmetic because `Π`
    /// fixes `X_sigma`; applying `Π` to the whole update also removes the
    /// rounding drift into the unstable modes, which `S` would amplify.
    pub fn advance(&self, w: &DVector<f64>, phi: &DVector<f64>) -> DVector<f64> {
        self.pi.apply(&(&self.s * w + phi))
    }

    /// `r0 = ‖Π‖ ε̂ / (1 − γ0)`.
    pub fn stage_threshold(&self) -> f64 {
        stage_threshold(self.pi.norm, self.law.eps_hat, self.gamma0)
    }
}

pub fn stage_threshold(norm_pi: f64, eps_hat: f64, gamma0: f64) -> f64 {
    if gamma0 < 1.0 {
        norm_pi * eps_hat / (1.0 - gamma0)
    } else {
        f64::INFINITY
    }
}

/// One step `Π(S w + φ) = S w + Π φ` with a fresh kick.
pub fn step(
    s: &DMatrix<f64>,
    pi: &FeedbackProjector,
    sampler: &mut KickSampler<'_>,
    w: &DVector<f64>,
) -> Result<DVector<f64>> {
    let phi = sampler.sample()?;
    Ok(pi.apply(&(s * w + phi)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainConfig {
    pub n_steps: usize,
    pub w0: Vec<f64>,
    pub seed: u64,
    pub stream: u64,
    pub record_kicks: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<DVector<f64>>,
    pub norms: Vec<f64>,
    pub kicks: Option<Vec<DVector<f64>>>,
    pub stage_threshold: f64,
    /// First step with `‖w^k‖ ≤ r0`.
    pub first_entry: Option<usize>,
    pub max_invariance_residual: f64,
}

pub fn run_chain(sys: &ControlledSystem, cfg: &ChainConfig) -> Result<Trajectory> {
    let n = sys.n();
    if cfg.w0.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "w0 has {} entries, expected {n}",
            cfg.w0.len()
        )));
    }
    let w0 = DVector::from_column_slice(&cfg.w0);
    let res0 = sys.invariance_residual(&w0);
    if res0 > 1e-10 * (1.0 + w0.norm()) {
        return Err(Error::InvalidArgument(format!(
            "initial state is not in the stable subspace (residual {res0:e})"
        )));
    }
    let mut sampler = KickSampler::new(&sys.law, cfg.seed, cfg.stream);
    let r0 = sys.stage_threshold();
    let mut states = Vec::with_capacity(cfg.n_steps + 1);
    let mut kicks = cfg.record_kicks.then(|| Vec::with_capacity(cfg.n_steps));
    let mut w = w0;
    let mut max_res = res0;
    states.push(w.clone());
    for _ in 0..cfg.n_steps {
        let phi = sampler.sample()?;
        let next = sys.advance(&w, &phi);
        max_res = max_res.max(sys.invariance_residual(&next));
        if let Some(k) = kicks.as_mut() {
            k.push(phi);
        }
        states.push(next.clone());
        w = next;
    }
    let norms: Vec<f64> = states.iter().map(|s| s.norm()).collect();
    let first_entry = norms.iter().position(|&x| x <= r0);
    Ok(Trajectory {
        states,
        norms,
        kicks,
        stage_threshold: r0,
        first_entry,
        max_invariance_residual: max_res,
    })
}

/// Independent chains from a common initial state, chain `i` on stream `i`.
pub fn run_ensemble(
    sys: &ControlledSystem,
    w0: &[f64],
    n_chains: usize,
    n_steps: usize,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    (0..n_chains)
        .into_par_iter()
        .map(|i| {
            run_chain(
                sys,
                &ChainConfig {
                    n_steps,
                    w0: w0.to_vec(),
                    seed,
                    stream: i as u64,
                    record_kicks: false,
                },
            )
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeReport {
    pub certificate_valid: bool,
    pub steps: usize,
    /// Steps where the norm exceeds the envelope by more than 1e-9.
    pub violations: usize,
    /// `max_k (‖w^k‖ − envelope_k)`.
    pub max_residual: f64,
}

/// Check `‖w^k‖ ≤ γ0^k ‖w0‖ + ‖Π‖ ε̂ / (1 − γ0)` along a norm series.
pub fn envelope_check(norms: &[f64], gamma0: f64, norm_pi: f64, eps_hat: f64) -> EnvelopeReport {
    let valid = gamma0 < 1.0;
    let bound_const = stage_threshold(norm_pi, eps_hat, gamma0);
    let w0 = norms.first().copied().unwrap_or(0.0);
    let mut violations = 0;
    let mut max_residual = f64::NEG_INFINITY;
    let mut g = 1.0;
    for &x in norms {
        let residual = x - (g * w0 + bound_const);
        if residual > 1e-9 {
            violations += 1;
        }
        max_residual = max_residual.max(residual);
        g *= gamma0;
    }
    EnvelopeReport {
        certificate_valid: valid,
        steps: norms.len(),
        violations,
        max_residual,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UncontrolledRun {
    pub norms: Vec<f64>,
    /// Least-squares slope of `ln ‖w̃^k‖` per step over the second half.
    pub growth_rate: f64,
}

/// `w̃ ← S w̃ + φ` on the full space, without feedback.
pub fn uncontrolled_demo(
    model: &OseenModel,
    law: &KickLaw,
    w0: &DVector<f64>,
    tau: f64,
    n_steps: usize,
    seed: u64,
    stream: u64,
) -> Result<UncontrolledRun> {
    if !model.spectrum_cache.iter().any(|r| r.re < 0.0) {
        return Err(Error::NotUnstable);
    }
    uncontrolled_run(model, law, w0, tau, n_steps, seed, stream)
}

/// Same recursion as [`uncontrolled_demo`] without the instability check.
pub fn uncontrolled_run(
    model: &OseenModel,
    law: &KickLaw,
    w0: &DVector<f64>,
    tau: f64,
    n_steps: usize,
    seed: u64,
    stream: u64,
) -> Result<UncontrolledRun> {
    let s = linalg::expm(&(-&model.a * tau));
    let mut sampler = KickSampler::new(law, seed, stream);
    let mut w = w0.clone();
    let mut norms = Vec::with_capacity(n_steps + 1);
    norms.push(w.norm());
    for _ in 0..n_steps {
        let phi = sampler.sample()?;
        w = &s * &w + phi;
        norms.push(w.norm());
    }
    let start = norms.len() / 2;
    let pts: Vec<(f64, f64)> = norms[start..]
        .iter()
        .enumerate()
        .filter(|(_, &x)| x > 0.0)
        .map(|(i, &x)| ((start + i) as f64, x.ln()))
        .collect();
    let growth_rate = linear_fit(&pts).map(|f| f.slope).unwrap_or(0.0);
    Ok(UncontrolledRun { norms, growth_rate })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Ordinary least squares `y = intercept + slope x`.
pub fn linear_fit(pts: &[(f64, f64)]) -> Option<LinearFit> {
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    let r_squared = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Some(LinearFit {
        slope,
        intercept: my - slope * mx,
        r_squared,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dichotomy::eig_split;
    use crate::feedback::{build_pi, ControlGeometry};

    fn small_system(eps: f64) -> (OseenModel, ControlledSystem) {
        let model = OseenModel::diagonal(&[-0.5, 1.0, 2.0, 3.0]);
        let dich = eig_split(&model, 0.5).unwrap();
        let geo = ControlGeometry::from_adjoint(&dich, &[1, 2, 3]).unwrap_or_else(|_| {
            let g = DMatrix::from_column_slice(4, 1, &[1.0, 0.0, 0.0, 0.0]);
            ControlGeometry::new(&dich, &[1, 2, 3], g).unwrap()
        });
        let pi = build_pi(&dich, &geo).unwrap();
        let law = KickLaw::new(DMatrix::identity(4, 4), eps, 3).unwrap();
        let sys = ControlledSystem::new(&model, &dich, pi, law, 1.0).unwrap();
        (model, sys)
    }

    #[test]
    fn threshold_formula() {
        assert!((stage_threshold(2.0, 0.01, 0.5) - 0.04).abs() < 1e-15);
    }

    #[test]
    fn degenerate_kicks_contract() {
        let (_, sys) = small_system(0.0);
        let cfg = ChainConfig {
            n_steps: 30,
            w0: vec![0.0, 1.0, -1.0, 0.5],
            seed: 1,
            stream: 0,
            record_kicks: false,
        };
        let t = run_chain(&sys, &cfg).unwrap();
        for (k, x) in t.norms.iter().enumerate() {
            assert!(*x <= sys.gamma0.powi(k as i32) * t.norms[0] * (1.0 + 1e-12));
        }
        let mut sampler = KickSampler::new(&sys.law, 1, 0);
        let w = DVector::from_column_slice(&cfg.w0);
        assert!((step(&sys.s, &sys.pi, &mut sampler, &w).unwrap() - &sys.s * &w).norm() < 1e-14);
    }

    #[test]
    fn same_stream_same_trajectory() {
        let (_, sys) = small_system(0.2);
        let cfg = ChainConfig {
            n_steps: 50,
            w0: vec![0.0; 4],
            seed: 9,
            stream: 4,
            record_kicks: true,
        };
        let a = run_chain(&sys, &cfg).unwrap();
        let b = run_chain(&sys, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.max_invariance_residual < INVARIANCE_TOL);
    }

    #[test]
    fn envelope_flags_invalid_certificate() {
        let r = envelope_check(&[1.0, 0.5], 1.2, 1.0, 0.1);
        assert!(!r.certificate_valid);
        let r = envelope_check(&[0.0, 0.1, 0.2], 0.5, 1.0, 0.1);
        assert_eq!(r.violations, 0);
        let r = envelope_check(&[0.0, 0.3], 0.5, 1.0, 0.1);
        assert_eq!(r.violations, 1);
    }

    #[test]
    fn exact_growth_without_kicks() {
        let model = OseenModel::diagonal(&[-1.0, 2.0]);
        let law = KickLaw::new(DMatrix::identity(2, 2), 0.0, 1).unwrap();
        let w0 = DVector::from_vec(vec![1.0, 0.0]);
        let run = uncontrolled_demo(&model, &law, &w0, 0.5, 20, 1, 0).unwrap();
        for (k, x) in run.norms.iter().enumerate() {
            assert!((x / (0.5 * k as f64).exp() - 1.0).abs() < 1e-12);
        }
        assert!((run.growth_rate - 0.5).abs() < 1e-10);
    }

    #[test]
    fn stable_model_is_not_unstable() {
        let model = OseenModel::diagonal(&[1.0, 2.0]);
        let law = KickLaw::new(DMatrix::identity(2, 2), 0.1, 1).unwrap();
        let r = uncontrolled_demo(&model, &law, &DVector::zeros(2), 1.0, 10, 1, 0);
        assert_eq!(r.unwrap_err(), Error::NotUnstable);
        let bounded = uncontrolled_run(&model, &law, &DVector::zeros(2), 1.0, 200, 1, 0).unwrap();
        assert!(bounded.growth_rate.abs() < 0.02);
    }
}
