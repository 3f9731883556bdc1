//! Spectral dichotomy at a level `sigma`: the adjoint unstable basis, the
//! stable subspace `X_sigma`, Riesz projectors by contour quadrature, the
//! semigroup `S(tau) = exp(-A tau)` and contraction certificates.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, CMatrix};
use crate::model::{cluster_spectrum, OseenModel};
use crate::quadrature::{adaptive_gk, GaussLegendre};

pub const DEFAULT_GAP_TOL: f64 = 1e-6;
pub const DEFAULT_NODES: usize = 256;

/// A real vector of the adjoint eigen-system together with the eigenvalue
/// it belongs to. Complex pairs contribute their real and imaginary parts.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjointMode {
    pub re: f64,
    pub im: f64,
    pub vector: DVector<f64>,
}

/// Real-ified eigenvectors and associated vectors of `A^T`, ordered by
/// ascending real part, then |imaginary part|.
pub fn adjoint_modes(a: &DMatrix<f64>) -> Vec<AdjointMode> {
    let n = a.nrows();
    let at = a.transpose();
    let clusters = cluster_spectrum(&linalg::eigenvalues(a), 1e-9);
    let mut out = Vec::with_capacity(n);
    for c in clusters {
        let k = c.multiplicity;
        let scale = 1.0 + c.re.abs() + c.im.abs();
        if c.im.abs() <= 1e-10 * scale {
            let shifted = &at - DMatrix::identity(n, n) * c.re;
            let mut pow = shifted.clone();
            for _ in 1..k {
                pow = &pow * &shifted;
            }
            let ns = linalg::null_space_real(&pow, k);
            for j in 0..k {
                let v = ns.column(j).into_owned();
                out.push(AdjointMode {
                    re: c.re,
                    im: 0.0,
                    vector: normalize_sign(v),
                });
            }
        } else if c.im > 0.0 {
            let lambda = Complex64::new(c.re, c.im);
            let shifted = linalg::complexify(&at) - CMatrix::identity(n, n) * lambda;
            let mut pow = shifted.clone();
            for _ in 1..k {
                pow = &pow * &shifted;
            }
            let ns = linalg::null_space_complex(&pow, k);
            for j in 0..k {
                let v = ns.column(j).into_owned();
                let (re_part, im_part) = realify(&v);
                out.push(AdjointMode {
                    re: c.re,
                    im: c.im,
                    vector: re_part,
                });
                out.push(AdjointMode {
                    re: c.re,
                    im: c.im,
                    vector: im_part,
                });
            }
        }
    }
    out
}

/// Fix the sign so that the largest-magnitude entry is positive.
fn normalize_sign(v: DVector<f64>) -> DVector<f64> {
    let imax = v.iamax();
    let v = v.normalize();
    if v[imax] < 0.0 {
        -v
    } else {
        v
    }
}

/// Rotate the complex phase so the real part carries the larger norm, then
/// split into normalised real and imaginary parts.
fn realify(v: &DVector<Complex64>) -> (DVector<f64>, DVector<f64>) {
    // Maximise ‖Re(e^{iφ} v)‖: φ = -arg(Σ v_i^2)/2.
    let s: Complex64 = v.iter().map(|z| z * z).sum();
    let phase = Complex64::from_polar(1.0, -0.5 * s.arg());
    let w = v.map(|z| z * phase);
    let re = w.map(|z| z.re);
    let im = w.map(|z| z.im);
    (normalize_sign(re), normalize_sign(im))
}

/// Stable/unstable splitting of `R^n` at level `sigma`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dichotomy {
    pub sigma: f64,
    pub m: usize,
    /// Adjoint unstable basis `d_1..d_m` (columns).
    pub d: DMatrix<f64>,
    /// Orthonormalised `e_1..e_m` spanning `X_sigma^⊥`.
    pub eb: DMatrix<f64>,
    /// Orthonormal basis of `X_sigma` (columns).
    pub xs: DMatrix<f64>,
    /// Orthogonal projector onto `X_sigma`.
    pub p_sigma: DMatrix<f64>,
    /// Riesz projector onto the invariant subspace for `Re λ < sigma`.
    pub p_riesz: DMatrix<f64>,
    pub gap: f64,
    pub modes: Vec<AdjointMode>,
}

fn check_gap(model: &OseenModel, sigma: f64, tol: f64) -> Result<f64> {
    let mut gap = f64::INFINITY;
    for r in &model.spectrum_cache {
        let dist = (r.re - sigma).abs();
        if dist < tol {
            return Err(Error::GapViolation {
                sigma,
                re: r.re,
                im: r.im,
                tol,
            });
        }
        gap = gap.min(dist);
    }
    Ok(gap)
}

/// Split at `sigma` with the default gap tolerance.
pub fn eig_split(model: &OseenModel, sigma: f64) -> Result<Dichotomy> {
    eig_split_with(model, sigma, DEFAULT_GAP_TOL, DEFAULT_NODES)
}

pub fn eig_split_with(model: &OseenModel, sigma: f64, gap_tol: f64, n_nodes: usize) -> Result<Dichotomy> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument("sigma must be positive".into()));
    }
    let n = model.n;
    let gap = check_gap(model, sigma, gap_tol)?;
    let modes = adjoint_modes(&model.a);
    let unstable: Vec<DVector<f64>> = modes
        .iter()
        .filter(|md| md.re < sigma)
        .map(|md| md.vector.clone())
        .collect();
    let m = unstable.len();
    let e = linalg::gram_schmidt(&unstable, 1e-10);
    if e.len() != m {
        return Err(Error::ConstructionFailed {
            attempts: 1,
            reason: format!("adjoint unstable vectors have rank {} < {m}", e.len()),
        });
    }
    let xs_cols = linalg::orthogonal_complement(n, &e);
    let d = linalg::columns_to_matrix(n, &unstable);
    let eb = linalg::columns_to_matrix(n, &e);
    let xs = linalg::columns_to_matrix(n, &xs_cols);
    let p_sigma = &xs * xs.transpose();
    let p_riesz = riesz_projector_inner(model, sigma, n_nodes, gap)?;
    Ok(Dichotomy {
        sigma,
        m,
        d,
        eb,
        xs,
        p_sigma,
        p_riesz,
        gap,
        modes,
    })
}

/// Axis-aligned rectangle in the complex plane, traversed counter-clockwise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub re_min: f64,
    pub re_max: f64,
    pub im_half: f64,
}

impl Rect {
    /// Quadrature nodes `(λ, dλ-weight)`; Gauss–Legendre on each edge.
    pub fn nodes(&self, n_nodes: usize) -> Vec<(Complex64, Complex64)> {
        let per_edge = (n_nodes / 4).max(4);
        let gl = GaussLegendre::new(per_edge);
        let (a, b, h) = (self.re_min, self.re_max, self.im_half);
        let mut out = Vec::with_capacity(4 * per_edge);
        // Bottom edge, left to right.
        for (x, w) in gl.on(a, b) {
            out.push((Complex64::new(x, -h), Complex64::new(w, 0.0)));
        }
        // Right edge, upwards.
        for (y, w) in gl.on(-h, h) {
            out.push((Complex64::new(b, y), Complex64::new(0.0, w)));
        }
        // Top edge, right to left.
        for (x, w) in gl.on(a, b) {
            out.push((Complex64::new(x, h), Complex64::new(-w, 0.0)));
        }
        // Left edge, downwards.
        for (y, w) in gl.on(-h, h) {
            out.push((Complex64::new(a, y), Complex64::new(0.0, -w)));
        }
        out
    }
}

/// `(2πi)^{-1} ∮ f(λ) (λI − A)^{-1} dλ` over `rect`; the imaginary residue
/// of the real result is checked and discarded.
pub fn contour_integral<F>(a: &DMatrix<f64>, rect: Rect, n_nodes: usize, f: F) -> Result<DMatrix<f64>>
where
    F: Fn(Complex64) -> Complex64,
{
    let n = a.nrows();
    let ev = linalg::eigenvalues(a);
    let ac = linalg::complexify(a);
    let mut acc = CMatrix::zeros(n, n);
    let mut min_dist = f64::INFINITY;
    for (lambda, w) in rect.nodes(n_nodes) {
        let dist = ev.iter().map(|e| (e - lambda).norm()).fold(f64::INFINITY, f64::min);
        min_dist = min_dist.min(dist);
        let shifted = CMatrix::identity(n, n) * lambda - &ac;
        let inv = shifted
            .lu()
            .try_inverse()
            .ok_or(Error::ContourTouchesSpectrum { distance: 0.0 })?;
        acc += inv * (f(lambda) * w);
    }
    if min_dist < 1e-8 {
        return Err(Error::ContourTouchesSpectrum { distance: min_dist });
    }
    let scale = Complex64::new(0.0, 2.0 * std::f64::consts::PI);
    let res = acc / scale;
    let imag = res.map(|z| z.im.abs()).max();
    let real = res.map(|z| z.re);
    if imag > 1e-10 * (1.0 + real.norm()) {
        return Err(Error::InvalidContour(format!("imaginary residue {imag:e}")));
    }
    Ok(real)
}

fn unstable_rect(model: &OseenModel, sigma: f64, gap: f64) -> Option<Rect> {
    let below: Vec<_> = model.spectrum_cache.iter().filter(|r| r.re < sigma).collect();
    if below.is_empty() {
        return None;
    }
    let min_re = below.iter().map(|r| r.re).fold(f64::INFINITY, f64::min);
    let max_im = below.iter().map(|r| r.im.abs()).fold(0.0, f64::max);
    let margin = gap.max(0.5 * (sigma - min_re)).max(0.5 * max_im).max(1e-3);
    Some(Rect {
        re_min: min_re - margin,
        re_max: sigma,
        im_half: max_im + margin,
    })
}

fn riesz_projector_inner(model: &OseenModel, sigma: f64, n_nodes: usize, gap: f64) -> Result<DMatrix<f64>> {
    match unstable_rect(model, sigma, gap) {
        Some(rect) => contour_integral(&model.a, rect, n_nodes, |_| Complex64::new(1.0, 0.0)),
        None => Ok(DMatrix::zeros(model.n, model.n)),
    }
}

/// Riesz projector onto the invariant subspace of `A` for `Re λ < sigma`.
/// Spectral projector onto the modes with `Re λ < sigma` from right and
/// left generalized eigenvectors, `P = X (Yᴴ X)⁻¹ Yᴴ`. Independent of the
/// contour quadrature and used to cross-check it.
pub fn eigen_projector(model: &OseenModel, sigma: f64) -> Result<DMatrix<f64>> {
    let n = model.n;
    let a = linalg::complexify(&model.a);
    let mut xs: Vec<CMatrix> = Vec::new();
    let mut ys: Vec<CMatrix> = Vec::new();
    for r in model.spectrum_cache.iter().filter(|r| r.re < sigma) {
        let lam = Complex64::new(r.re, r.im);
        let shifted = &a - CMatrix::identity(n, n) * lam;
        let mut power = CMatrix::identity(n, n);
        for _ in 0..r.multiplicity {
            power = &power * &shifted;
        }
        xs.push(linalg::null_space_complex(&power, r.multiplicity));
        ys.push(linalg::null_space_complex(&power.adjoint(), r.multiplicity));
    }
    let k: usize = xs.iter().map(|x| x.ncols()).sum();
    if k == 0 {
        return Ok(DMatrix::zeros(n, n));
    }
    let mut x = CMatrix::zeros(n, k);
    let mut y = CMatrix::zeros(n, k);
    let mut c = 0;
    for (xb, yb) in xs.iter().zip(&ys) {
        x.columns_mut(c, xb.ncols()).copy_from(xb);
        y.columns_mut(c, yb.ncols()).copy_from(yb);
        c += xb.ncols();
    }
    let yh = y.adjoint();
    let inner = (&yh * &x).try_inverse().ok_or_else(|| Error::ConstructionFailed {
        attempts: 1,
        reason: "left and right eigenvectors are not biorthogonalisable".into(),
    })?;
    Ok((x * inner * yh).map(|z| z.re))
}

pub fn riesz_projector(model: &OseenModel, sigma: f64, n_nodes: usize) -> Result<DMatrix<f64>> {
    if n_nodes < 16 {
        return Err(Error::InvalidArgument("at least 16 quadrature nodes required".into()));
    }
    let gap = check_gap(model, sigma, DEFAULT_GAP_TOL)?;
    riesz_projector_inner(model, sigma, n_nodes, gap)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SemigroupMethod {
    ScalingSquaring,
    /// Contour around the part of the spectrum with `Re λ > sigma`; the
    /// result is `S(τ)` composed with the spectral projector onto `X_sigma`.
    Contour {
        sigma: f64,
        n_nodes: usize,
    },
}

/// `S(τ) = exp(-A τ)`.
pub fn semigroup(model: &OseenModel, tau: f64, method: SemigroupMethod) -> Result<DMatrix<f64>> {
    if !(tau >= 0.0) {
        return Err(Error::InvalidArgument("tau must be nonnegative".into()));
    }
    match method {
        SemigroupMethod::ScalingSquaring => Ok(linalg::expm(&(-&model.a * tau))),
        SemigroupMethod::Contour { sigma, n_nodes } => {
            let gap = check_gap(model, sigma, DEFAULT_GAP_TOL)?;
            let above: Vec<_> = model.spectrum_cache.iter().filter(|r| r.re > sigma).collect();
            if above.is_empty() {
                return Ok(DMatrix::zeros(model.n, model.n));
            }
            let max_re = above.iter().map(|r| r.re).fold(f64::NEG_INFINITY, f64::max);
            let max_im = above.iter().map(|r| r.im.abs()).fold(0.0, f64::max);
            let margin = gap.max(0.1 * (max_re - sigma)).max(0.5 * max_im).max(1e-3);
            let rect = Rect {
                re_min: sigma,
                re_max: max_re + margin,
                im_half: max_im + margin,
            };
            contour_integral(&model.a, rect, n_nodes, |l| (-l * tau).exp())
        }
    }
}

/// `γ0 = ‖S(τ)|_{X_sigma}‖₂` and whether it certifies a contraction.
pub fn contraction_certificate(dich: &Dichotomy, model: &OseenModel, tau: f64) -> (f64, bool) {
    let s = linalg::expm(&(-&model.a * tau));
    let gamma0 = restricted_norm(&s, &dich.xs);
    (gamma0, gamma0 < 1.0)
}

/// Largest singular value of `E^T S E` for an orthonormal basis `E` of an
/// `S`-invariant subspace.
pub fn restricted_norm(s: &DMatrix<f64>, basis: &DMatrix<f64>) -> f64 {
    if basis.ncols() == 0 {
        return 0.0;
    }
    linalg::op_norm(&(basis.transpose() * s * basis))
}

/// Resolvent norm `‖(λI + A)^{-1}‖₂`.
pub fn resolvent_norm(a: &DMatrix<f64>, lambda: Complex64) -> f64 {
    let n = a.nrows();
    let m = linalg::complexify(a) + CMatrix::identity(n, n) * lambda;
    1.0 / linalg::min_singular_complex(&m)
}

/// Integrals `I1` (vertical segment at `Re λ = -sigma`) and `I2` (the two
/// rays `λ = γ e^{±iψ} + θ`) of `‖(λI + A)^{-1}‖ |e^{λτ}|` along the sector
/// contour.
pub fn contour_bound_integrals(model: &OseenModel, sigma: f64, tau: f64, theta: f64, psi: f64) -> Result<(f64, f64)> {
    use std::f64::consts::PI;
    if !(psi > PI / 2.0 && psi < PI) {
        return Err(Error::InvalidContour(format!("psi = {psi} outside (π/2, π)")));
    }
    if !(theta > 0.0) || !(tau > 0.0) || !(sigma > 0.0) {
        return Err(Error::InvalidContour("theta, tau and sigma must be positive".into()));
    }
    let a = &model.a;
    let half = (sigma + theta) * (PI - psi).tan();
    let decay = (-sigma * tau).exp();
    let (i1, _) = adaptive_gk(
        |y| resolvent_norm(a, Complex64::new(-sigma, y)) * decay,
        -half,
        half,
        1e-14,
        1e-9,
        400,
    );

    let (c, s) = (psi.cos(), psi.sin());
    let g0 = (sigma + theta) / c.abs();
    let ray = |g: f64| {
        let lambda = Complex64::new(g * c + theta, g * s);
        resolvent_norm(a, lambda) * (lambda.re * tau).exp()
    };
    let mut i2_half = 0.0;
    let mut lo = g0;
    let mut width = (1.0 / (tau * c.abs())).max(1e-3);
    for _ in 0..200 {
        let hi = lo + width;
        let (v, _) = adaptive_gk(ray, lo, hi, 1e-18, 1e-10, 200);
        i2_half += v;
        if ray(hi) < 1e-16 {
            break;
        }
        lo = hi;
        width *= 2.0;
    }
    // Conjugate symmetry: the lower ray contributes the same amount.
    Ok((i1, 2.0 * i2_half))
}

/// Export of a dichotomy for reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DichotomyExport {
    pub sigma: f64,
    pub m: usize,
    pub gap: f64,
    /// Row-major `n × m` adjoint basis.
    pub d: Vec<f64>,
    /// Row-major `n × m` orthonormal basis of the unstable adjoint space.
    pub e: Vec<f64>,
}

pub fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let mut v = Vec::with_capacity(m.len());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            v.push(m[(i, j)]);
        }
    }
    v
}

impl Dichotomy {
    pub fn export(&self) -> DichotomyExport {
        DichotomyExport {
            sigma: self.sigma,
            m: self.m,
            gap: self.gap,
            d: row_major(&self.d),
            e: row_major(&self.eb),
        }
    }

    pub fn n(&self) -> usize {
        self.p_sigma.nrows()
    }
}
