//! The ladder of levels `sigma < sigma_1 < ... < sigma_K` with nested
//! orthogonal decompositions, and tail contraction constants.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dichotomy::{restricted_norm, Dichotomy, DEFAULT_GAP_TOL};
use crate::error::{Error, Result};
use crate::linalg;
use crate::model::OseenModel;

pub const GRID_POINTS: usize = 1024;

/// Segment `[e^{2k/d}, e^{2(k+1)/d}]` that hosts level `k`.
pub fn level_segment(k: usize, d: u32) -> (f64, f64) {
    let d = d as f64;
    ((2.0 * k as f64 / d).exp(), (2.0 * (k + 1) as f64 / d).exp())
}

/// Distance from the vertical line `Re λ = s` to the spectrum.
pub fn spectral_distance(model: &OseenModel, s: f64) -> f64 {
    model
        .spectrum_cache
        .iter()
        .map(|r| (r.re - s).abs())
        .fold(f64::INFINITY, f64::min)
}

/// Grid point of `[lo, hi]` farthest from the spectrum and above `floor`;
/// ties go to the smaller point.
pub fn best_level(model: &OseenModel, lo: f64, hi: f64, floor: f64, gap_tol: f64) -> Result<f64> {
    let mut best: Option<(f64, f64)> = None;
    for i in 0..GRID_POINTS {
        let s = lo + (hi - lo) * i as f64 / (GRID_POINTS - 1) as f64;
        if s <= floor {
            continue;
        }
        let dist = spectral_distance(model, s);
        if dist < gap_tol {
            continue;
        }
        if best.map_or(true, |(_, bd)| dist > bd) {
            best = Some((s, dist));
        }
    }
    best.map(|(s, _)| s).ok_or(Error::EmptyGap { lo, hi })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SigmaLadder {
    pub sigma: f64,
    /// `sigma_1 .. sigma_K`.
    pub levels: Vec<f64>,
    /// `n_0 = m, n_1, .., n_K`: dimension of `X_{sigma_k}^⊥`.
    pub dims: Vec<usize>,
    /// Orthonormal basis of `R^n` whose first `dims[k]` columns span
    /// `X_{sigma_k}^⊥`.
    pub basis: DMatrix<f64>,
}

/// Build a `k_levels`-level ladder above the dichotomy level.
pub fn sigma_ladder(model: &OseenModel, dich: &Dichotomy, k_levels: usize) -> Result<SigmaLadder> {
    let n = model.n;
    let d = model.spectrum_spec.d;
    let mut levels = Vec::with_capacity(k_levels);
    let mut floor = dich.sigma;
    for k in 1..=k_levels {
        let (lo, hi) = level_segment(k, d);
        let s = best_level(model, lo, hi, floor, DEFAULT_GAP_TOL)?;
        levels.push(s);
        floor = s;
    }
    let ordered: Vec<DVector<f64>> = dich.modes.iter().map(|md| md.vector.clone()).collect();
    let e = linalg::gram_schmidt(&ordered, 1e-10);
    if e.len() != n {
        return Err(Error::ConstructionFailed {
            attempts: 1,
            reason: format!("adjoint eigen-system has rank {} < {n}", e.len()),
        });
    }
    let count = |s: f64| dich.modes.iter().filter(|md| md.re < s).count();
    let mut dims = vec![count(dich.sigma)];
    dims.extend(levels.iter().map(|&s| count(s)));
    Ok(SigmaLadder {
        sigma: dich.sigma,
        levels,
        dims,
        basis: linalg::columns_to_matrix(n, &e),
    })
}

impl SigmaLadder {
    pub fn n(&self) -> usize {
        self.basis.nrows()
    }

    /// Orthonormal basis of `X_{sigma_k}^⊥` (`k = 0` is the base level).
    pub fn perp_basis(&self, k: usize) -> DMatrix<f64> {
        self.basis.columns(0, self.dims[k]).into_owned()
    }

    /// Orthonormal basis of `X_{sigma_k}`.
    pub fn tail_basis(&self, k: usize) -> DMatrix<f64> {
        let nk = self.dims[k];
        self.basis.columns(nk, self.n() - nk).into_owned()
    }

    /// Orthonormal basis of `X_sigma ⊖ X_{sigma_k}`, the modes between the
    /// base level and level `k`.
    pub fn between_basis(&self, k: usize) -> DMatrix<f64> {
        let m = self.dims[0];
        self.basis.columns(m, self.dims[k] - m).into_owned()
    }

    /// Orthogonal projector onto `X_{sigma_k}^⊥`.
    pub fn q(&self, k: usize) -> DMatrix<f64> {
        let b = self.perp_basis(k);
        &b * b.transpose()
    }

    pub fn export(&self, gammas: &[f64]) -> LadderExport {
        LadderExport {
            sigma: self.sigma,
            levels: self.levels.clone(),
            dims: self.dims.clone(),
            gammas: gammas.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LadderExport {
    pub sigma: f64,
    pub levels: Vec<f64>,
    pub dims: Vec<usize>,
    pub gammas: Vec<f64>,
}

/// `gamma_k = ‖S(τ)|_{X_{sigma_k}}‖` for `k = 1..K`; zero on empty levels.
pub fn tail_contraction(ladder: &SigmaLadder, model: &OseenModel, tau: f64) -> Vec<f64> {
    let s = linalg::expm(&(-&model.a * tau));
    (1..=ladder.levels.len())
        .map(|k| restricted_norm(&s, &ladder.tail_basis(k)))
        .collect()
}
