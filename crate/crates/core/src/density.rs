//! Density of the pushforward of the kick law under `π(u, v) = α u + v`:
//! the adapted bases, slice geometry, slice quadrature, the boundary
//! extremal problem, first variations and the TV-Lipschitz ratio.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feedback::FeedbackProjector;
use crate::kick::{KickLaw, KickSampler};
use crate::ladder::SigmaLadder;
use crate::linalg;
use crate::quadrature::{sphere_rule, unit_ball_volume, GaussLegendre};
use crate::rds::linear_fit;

/// Eigenvalues of `E + αᵀα` above `1 + MU_TOL` count towards `s`.
pub const MU_TOL: f64 = 1e-10;
/// Points with `|ε² − ‖û‖² − ‖v̂‖²| ≤ BOUNDARY_TOL·ε²` are on the boundary.
pub const BOUNDARY_TOL: f64 = 1e-12;

/// Decomposition of `π = (α, E)` with the adapted bases.
#[derive(Debug, Clone, PartialEq)]
pub struct PiDecomposition {
    pub m: usize,
    pub nm: usize,
    pub alpha: DMatrix<f64>,
    /// Eigenvalues of `E + αᵀα`, descending.
    pub mu: Vec<f64>,
    pub s: usize,
    /// `b_1..b_m` in the `u`-space (columns).
    pub b_u: DMatrix<f64>,
    /// `b_{m+1}..b_n` in the `v`-space: `αb_j/‖αb_j‖` for `j ≤ s`, then a
    /// basis of `ker αᵀ`.
    pub b_v: DMatrix<f64>,
    /// `‖α b_j‖`, `j = 1..m`.
    pub alpha_b_norms: Vec<f64>,
    /// `θ_1..θ_m` in `(u, v)` coordinates: an orthonormal basis of `ker π`.
    pub theta: DMatrix<f64>,
    /// Matrix taking the `b` basis to the `θ` basis, `θ_i = Σ_j R_ij b_j`.
    pub r: DMatrix<f64>,
    pub jacobian: f64,
    /// `(E + αᵀα)⁻¹`.
    pub gram_u_inv: DMatrix<f64>,
    /// `N = (E + ααᵀ)⁻¹`; the support of the pushforward is `xᵀNx ≤ ε²`.
    pub n_mat: DMatrix<f64>,
}

pub fn build_pi_decomposition(alpha: &DMatrix<f64>) -> PiDecomposition {
    let nm = alpha.nrows();
    let m = alpha.ncols();
    let n = m + nm;
    let gram_u = DMatrix::identity(m, m) + alpha.transpose() * alpha;
    let (mu, b_u) = linalg::sym_eigen_desc(&gram_u);
    let s = mu.iter().filter(|&&v| v > 1.0 + MU_TOL).count();

    let alpha_b: Vec<DVector<f64>> = (0..m).map(|j| alpha * b_u.column(j)).collect();
    let alpha_b_norms: Vec<f64> = alpha_b.iter().map(|v| v.norm()).collect();
    let image: Vec<DVector<f64>> = alpha_b[..s].iter().map(|v| v.normalize()).collect();
    let kernel = linalg::orthogonal_complement(nm, &image);
    let mut cols = image;
    cols.extend(kernel);
    let b_v = linalg::columns_to_matrix(nm, &cols);

    let mut theta = DMatrix::zeros(n, m);
    for j in 0..m {
        theta.view_mut((0, j), (m, 1)).copy_from(&b_u.column(j));
        if j < s {
            // (b_j, −αb_j)/√μ_j; below s the image part vanishes.
            let scale = (1.0 + alpha_b_norms[j].powi(2)).sqrt();
            theta.view_mut((m, j), (nm, 1)).copy_from(&(-&alpha_b[j]));
            theta.column_mut(j).scale_mut(1.0 / scale);
        }
    }

    let mut r = DMatrix::identity(n, n);
    let mut jacobian = 1.0;
    for i in 0..s {
        let a = alpha_b_norms[i];
        let scale = (1.0 + a * a).sqrt();
        r[(i, i)] = 1.0 / scale;
        r[(i, m + i)] = -a / scale;
        jacobian /= scale;
    }

    let gram_u_inv = gram_u.clone().try_inverse().expect("E + αᵀα is positive definite");
    let n_mat = (DMatrix::identity(nm, nm) + alpha * alpha.transpose())
        .try_inverse()
        .expect("E + ααᵀ is positive definite");

    PiDecomposition {
        m,
        nm,
        alpha: alpha.clone(),
        mu,
        s,
        b_u,
        b_v,
        alpha_b_norms,
        theta,
        r,
        jacobian,
        gram_u_inv,
        n_mat,
    }
}

impl PiDecomposition {
    pub fn n(&self) -> usize {
        self.m + self.nm
    }

    /// `π(u ⊕ v) = α u + v`.
    pub fn project(&self, y: &DVector<f64>) -> DVector<f64> {
        let u = y.rows(0, self.m);
        let v = y.rows(self.m, self.nm);
        &self.alpha * u + v
    }

    /// The `b` basis of `R^n` as columns.
    pub fn b_full(&self) -> DMatrix<f64> {
        let (m, nm) = (self.m, self.nm);
        let mut b = DMatrix::zeros(self.n(), self.n());
        b.view_mut((0, 0), (m, m)).copy_from(&self.b_u);
        b.view_mut((m, m), (nm, nm)).copy_from(&self.b_v);
        b
    }

    /// The `θ` basis of `R^n` as columns: `θ = b Rᵀ`.
    pub fn theta_full(&self) -> DMatrix<f64> {
        self.b_full() * self.r.transpose()
    }

    /// `û(x) = (E + αᵀα)⁻¹ αᵀ x`.
    pub fn u_hat(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.gram_u_inv * (self.alpha.transpose() * x)
    }

    /// `xᵀ N x`, the squared norm of the smallest preimage of `x`.
    pub fn support_form(&self, x: &DVector<f64>) -> f64 {
        x.dot(&(&self.n_mat * x))
    }

    /// A point of the support boundary in direction `dir`.
    pub fn boundary_point(&self, eps: f64, dir: &DVector<f64>) -> DVector<f64> {
        dir * (eps / self.support_form(dir).sqrt())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SliceClass {
    Outside,
    Boundary,
    Interior,
}

/// Intersection of the ball `‖y‖ ≤ ε` with the fibre `π⁻¹ x`.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceGeometry {
    pub x: DVector<f64>,
    pub class: SliceClass,
    pub u_hat: DVector<f64>,
    pub v_hat: DVector<f64>,
    /// Centre in `θ` coordinates of the fibre.
    pub w_center: DVector<f64>,
    /// `ε² − ‖û‖² − ‖v̂‖²`.
    pub radicand: f64,
    /// `√radicand` when nonnegative, zero otherwise.
    pub radius: f64,
}

pub fn slice_geometry(dec: &PiDecomposition, eps: f64, x: &DVector<f64>) -> SliceGeometry {
    let u_hat = dec.u_hat(x);
    let au = &dec.alpha * &u_hat;
    let v_hat = x - &au;
    let radicand = eps * eps - u_hat.norm_squared() - v_hat.norm_squared();
    let class = if radicand.abs() <= BOUNDARY_TOL * eps * eps {
        SliceClass::Boundary
    } else if radicand > 0.0 {
        SliceClass::Interior
    } else {
        SliceClass::Outside
    };
    let mut offset = DVector::zeros(dec.n());
    offset.rows_mut(0, dec.m).copy_from(&u_hat);
    offset.rows_mut(dec.m, dec.nm).copy_from(&(-au));
    let w_center = dec.theta.transpose() * offset;
    SliceGeometry {
        x: x.clone(),
        class,
        u_hat,
        v_hat,
        w_center,
        radicand,
        radius: if class == SliceClass::Interior {
            radicand.sqrt()
        } else {
            0.0
        },
    }
}

/// Point of the fibre over `x` with `θ` coordinates `w`.
pub fn fibre_point(dec: &PiDecomposition, w: &DVector<f64>, x: &DVector<f64>) -> DVector<f64> {
    let mut y = &dec.theta * w;
    let mut tail = y.rows_mut(dec.m, dec.nm);
    tail += x;
    y
}

/// `Γ(w, x) = J g(y)` with `y` the fibre point; `g` is the untruncated
/// Gaussian density of the law, so `P(x) = ĉ ∫ Γ(w, x) dw` over the slice.
pub fn gamma_integrand(dec: &PiDecomposition, law: &KickLaw, w: &DVector<f64>, x: &DVector<f64>) -> f64 {
    dec.jacobian * law.gauss_density(&fibre_point(dec, w, x))
}

/// Quadrature orders for slice integrals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadSpec {
    pub radial: usize,
    /// Trapezoid nodes on the circle (`m = 2`).
    pub angular2: usize,
    /// Azimuthal nodes on the sphere (`m = 3`); half as many polar nodes.
    pub angular3: usize,
    /// Monte Carlo samples for `m > 3`; `None` rejects such slices.
    pub mc_samples: Option<usize>,
    pub mc_seed: u64,
}

impl Default for QuadSpec {
    fn default() -> Self {
        Self {
            radial: 64,
            angular2: 256,
            angular3: 32,
            mc_samples: None,
            mc_seed: 0,
        }
    }
}

/// Precomputed pieces shared by many slice evaluations.
struct SliceKernel {
    kinv: DMatrix<f64>,
    ln_g0: f64,
    radial: GaussLegendre,
    /// Unit directions mapped into `(u, v)` coordinates with their weights.
    dirs: Vec<(DVector<f64>, f64)>,
    dirs_w: Vec<DVector<f64>>,
}

impl SliceKernel {
    fn new(dec: &PiDecomposition, law: &KickLaw, quad: &QuadSpec) -> Result<Self> {
        let m = dec.m;
        if m > 3 {
            return Err(Error::QuadratureUnsupported { m });
        }
        if law.n() != dec.n() {
            return Err(Error::DimensionMismatch(format!(
                "law has dimension {}, decomposition {}",
                law.n(),
                dec.n()
            )));
        }
        let angular = if m == 3 { quad.angular3 } else { quad.angular2 };
        let rule = if m == 0 { Vec::new() } else { sphere_rule(m, angular) };
        let dirs_w: Vec<DVector<f64>> = rule.iter().map(|(d, _)| DVector::from_column_slice(d)).collect();
        let dirs = rule
            .iter()
            .zip(&dirs_w)
            .map(|((_, wt), d)| (&dec.theta * d, *wt))
            .collect();
        let kinv = law.k.clone().try_inverse().expect("correlation is invertible");
        let ln_g0 = -0.5 * law.n() as f64 * (2.0 * std::f64::consts::PI).ln() - 0.5 * law.ln_det_k;
        Ok(Self {
            kinv,
            ln_g0,
            radial: GaussLegendre::new(quad.radial),
            dirs,
            dirs_w,
        })
    }

    /// `∫_{‖w‖ ≤ r} g(y0 + Θw) dw` in polar coordinates.
    fn integrate(&self, m: usize, y0: &DVector<f64>, r: f64) -> f64 {
        let a = y0.dot(&(&self.kinv * y0));
        let mut total = 0.0;
        for (dy, wt) in &self.dirs {
            let kd = &self.kinv * dy;
            let b = y0.dot(&kd);
            let c = dy.dot(&kd);
            let mut line = 0.0;
            for (t, wr) in self.radial.on(0.0, 1.0) {
                let rho = r * t;
                let q = a + 2.0 * rho * b + rho * rho * c;
                line += wr * t.powi(m as i32 - 1) * (self.ln_g0 - 0.5 * q).exp();
            }
            total += wt * line;
        }
        total * r.powi(m as i32)
    }
}

fn slice_center_point(dec: &PiDecomposition, sg: &SliceGeometry) -> DVector<f64> {
    let mut y0 = DVector::zeros(dec.n());
    y0.rows_mut(0, dec.m).copy_from(&sg.u_hat);
    y0.rows_mut(dec.m, dec.nm).copy_from(&sg.v_hat);
    y0
}

/// `P(x) = ĉ ∫_{π_x ∩ B} Γ(w, x) dw`.
pub fn density_p(dec: &PiDecomposition, law: &KickLaw, x: &DVector<f64>, quad: &QuadSpec) -> Result<f64> {
    let kernel = match SliceKernel::new(dec, law, quad) {
        Ok(k) => k,
        Err(Error::QuadratureUnsupported { m }) => {
            return match quad.mc_samples {
                Some(n) => Ok(density_p_mc(dec, law, x, n, quad.mc_seed)),
                None => Err(Error::QuadratureUnsupported { m }),
            }
        }
        Err(e) => return Err(e),
    };
    Ok(density_with(&kernel, dec, law, x))
}

fn density_with(kernel: &SliceKernel, dec: &PiDecomposition, law: &KickLaw, x: &DVector<f64>) -> f64 {
    let sg = slice_geometry(dec, law.eps_hat, x);
    if sg.class != SliceClass::Interior {
        return 0.0;
    }
    let y0 = slice_center_point(dec, &sg);
    if dec.m == 0 {
        return law.mass.c_hat() * (kernel.ln_g0 - 0.5 * y0.dot(&(&kernel.kinv * &y0))).exp();
    }
    law.mass.c_hat() * dec.jacobian * kernel.integrate(dec.m, &y0, sg.radius)
}

/// Batch evaluation of `P` sharing the quadrature set-up.
pub fn density_p_many(dec: &PiDecomposition, law: &KickLaw, xs: &[DVector<f64>], quad: &QuadSpec) -> Result<Vec<f64>> {
    match SliceKernel::new(dec, law, quad) {
        Ok(kernel) => Ok(xs.par_iter().map(|x| density_with(&kernel, dec, law, x)).collect()),
        Err(Error::QuadratureUnsupported { m }) if quad.mc_samples.is_none() => Err(Error::QuadratureUnsupported { m }),
        Err(Error::QuadratureUnsupported { .. }) => {
            let n = quad.mc_samples.unwrap();
            Ok(xs.iter().map(|x| density_p_mc(dec, law, x, n, quad.mc_seed)).collect())
        }
        Err(e) => Err(e),
    }
}

/// Monte Carlo slice integral for high-dimensional fibres.
fn density_p_mc(dec: &PiDecomposition, law: &KickLaw, x: &DVector<f64>, n: usize, seed: u64) -> f64 {
    let sg = slice_geometry(dec, law.eps_hat, x);
    if sg.class != SliceClass::Interior {
        return 0.0;
    }
    let m = dec.m;
    let y0 = slice_center_point(dec, &sg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = 0.0;
    for _ in 0..n {
        let z = DVector::from_fn(m, |_, _| rng.sample::<f64, _>(StandardNormal));
        let t: f64 = rng.random();
        let w = z.normalize() * (sg.radius * t.powf(1.0 / m as f64));
        acc += law.gauss_density(&(&y0 + &dec.theta * w));
    }
    let vol = unit_ball_volume(m) * sg.radius.powi(m as i32);
    law.mass.c_hat() * dec.jacobian * vol * acc / n as f64
}

/// `∫ P(x) dx` over the support ellipse, for `nm ≤ 2`.
pub fn integrate_density(
    dec: &PiDecomposition,
    law: &KickLaw,
    quad: &QuadSpec,
    outer_radial: usize,
    outer_angular: usize,
) -> Result<f64> {
    let nm = dec.nm;
    if nm == 0 || nm > 2 {
        return Err(Error::QuadratureUnsupported { m: nm });
    }
    let kernel = SliceKernel::new(dec, law, quad)?;
    let eps = law.eps_hat;
    // x = ε N^{-1/2} z maps the unit ball onto the support.
    let (vals, vecs) = linalg::sym_eigen_desc(&dec.n_mat);
    let sqrt_inv = &vecs
        * DMatrix::from_diagonal(&DVector::from_iterator(nm, vals.iter().map(|v| 1.0 / v.sqrt())))
        * vecs.transpose();
    let jac = eps.powi(nm as i32) * vals.iter().map(|v| 1.0 / v.sqrt()).product::<f64>();
    // Radial profile ~ (1 − ρ²)^{m/2}; ρ = sin t removes the endpoint root.
    let gl = GaussLegendre::new(outer_radial);
    let dirs = sphere_rule(nm, outer_angular);
    let pts: Vec<(DVector<f64>, f64)> = gl
        .on(0.0, std::f64::consts::FRAC_PI_2)
        .flat_map(|(t, wt)| {
            let rho = t.sin();
            let w = wt * t.cos() * rho.powi(nm as i32 - 1);
            dirs.iter()
                .map(move |(d, wd)| (DVector::from_iterator(d.len(), d.iter().map(|c| c * rho)), w * wd))
                .collect::<Vec<_>>()
        })
        .collect();
    let total: f64 = pts
        .par_iter()
        .map(|(z, w)| w * density_with(&kernel, dec, law, &(&sqrt_inv * z * eps)))
        .collect::<Vec<f64>>()
        .iter()
        .sum();
    Ok(total * jac)
}

/// Kernel density estimate of `P` from pushed-forward kicks.
#[derive(Debug, Clone, PartialEq)]
pub struct KdeEstimate {
    pub estimate: f64,
    pub std_error: f64,
}

/// Kernel density estimates at several points from one sample of
/// `n_samples` kicks (product Epanechnikov kernel; Silverman bandwidth per
/// coordinate unless `bandwidth` is given).
pub fn mc_density_oracle_many(
    dec: &PiDecomposition,
    law: &KickLaw,
    xs: &[DVector<f64>],
    n_samples: usize,
    bandwidth: Option<f64>,
    seed: u64,
) -> Result<Vec<KdeEstimate>> {
    if n_samples < 10_000 {
        return Err(Error::InvalidArgument("at least 10^4 samples required".into()));
    }
    let nm = dec.nm;
    let mut sampler = KickSampler::new(law, seed, 0);
    let mut pts = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        pts.push(dec.project(&sampler.sample()?));
    }
    let h: Vec<f64> = match bandwidth {
        Some(h) => vec![h; nm],
        None => (0..nm)
            .map(|i| {
                let mean = pts.iter().map(|p| p[i]).sum::<f64>() / n_samples as f64;
                let var = pts.iter().map(|p| (p[i] - mean).powi(2)).sum::<f64>() / (n_samples - 1) as f64;
                // Gaussian-reference rule rescaled to the Epanechnikov kernel.
                let silverman = (4.0 / ((nm as f64 + 2.0) * n_samples as f64)).powf(1.0 / (nm as f64 + 4.0));
                2.214 * var.sqrt() * silverman
            })
            .collect(),
    };
    let norm: f64 = h.iter().product();
    Ok(xs
        .par_iter()
        .map(|x| {
            let mut sum = 0.0;
            let mut sum_sq = 0.0;
            for p in &pts {
                let mut k = 1.0;
                for i in 0..nm {
                    let z = (p[i] - x[i]) / h[i];
                    if z.abs() >= 1.0 {
                        k = 0.0;
                        break;
                    }
                    k *= 0.75 * (1.0 - z * z);
                }
                let k = k / norm;
                sum += k;
                sum_sq += k * k;
            }
            let n = n_samples as f64;
            let mean = sum / n;
            let var = (sum_sq / n - mean * mean).max(0.0) * n / (n - 1.0);
            KdeEstimate {
                estimate: mean,
                std_error: (var / n).sqrt(),
            }
        })
        .collect())
}

pub fn mc_density_oracle(
    dec: &PiDecomposition,
    law: &KickLaw,
    x: &DVector<f64>,
    n_samples: usize,
    bandwidth: Option<f64>,
    seed: u64,
) -> Result<KdeEstimate> {
    let mut v = mc_density_oracle_many(dec, law, std::slice::from_ref(x), n_samples, bandwidth, seed)?;
    Ok(v.remove(0))
}

/// Solution of the boundary extremal problem.
#[derive(Debug, Clone, PartialEq)]
pub struct LagrangeStep {
    pub h: DVector<f64>,
    pub lambda: f64,
    /// `|r(λ) − γ0²| / γ0²`.
    pub residual: f64,
}

/// Minimise `F(h) = (x+h)ᵀ N (x+h)` over `‖h‖ = γ0` through the scalar
/// multiplier equation.
pub fn lagrange_boundary_step(dec: &PiDecomposition, eps: f64, x: &DVector<f64>, gamma0: f64) -> Result<LagrangeStep> {
    let sg = slice_geometry(dec, eps, x);
    if sg.class != SliceClass::Boundary {
        return Err(Error::ProbeOffBoundary { radicand: sg.radicand });
    }
    lagrange_step_unchecked(dec, x, gamma0)
}

/// Same as [`lagrange_boundary_step`] without the boundary check.
pub fn lagrange_step_unchecked(dec: &PiDecomposition, x: &DVector<f64>, gamma0: f64) -> Result<LagrangeStep> {
    if !(gamma0 > 0.0) || gamma0 * gamma0 >= x.norm_squared() {
        return Err(Error::InvalidArgument("need 0 < γ0 < ‖x‖".into()));
    }
    let s = dec.s;
    let ab: Vec<DVector<f64>> = (0..s).map(|j| &dec.alpha * dec.b_u.column(j)).collect();
    let coef: Vec<f64> = ab.iter().map(|v| x.dot(v) / v.norm_squared()).collect();
    let mut x0 = x.clone();
    for (c, v) in coef.iter().zip(&ab) {
        x0.axpy(-c, v, 1.0);
    }
    let x0_sq = x0.norm_squared();
    let terms: Vec<(f64, f64)> = (0..s)
        .map(|j| (coef[j] * coef[j] * ab[j].norm_squared(), dec.mu[j]))
        .collect();
    let target = gamma0 * gamma0;
    let r =
        |lam: f64| x0_sq / (1.0 + lam).powi(2) + terms.iter().map(|(a, mu)| a / (1.0 + lam * mu).powi(2)).sum::<f64>();
    let lambda = if s == 0 {
        x0_sq.sqrt() / gamma0 - 1.0
    } else {
        let mut hi = 1.0;
        let mut doublings = 0;
        while r(hi) > target {
            hi *= 2.0;
            doublings += 1;
            if doublings > 60 {
                return Err(Error::BracketFailure { doublings });
            }
        }
        let mut lo = 0.0;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if r(mid) > target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        if (r(lo) - target).abs() < (r(hi) - target).abs() {
            lo
        } else {
            hi
        }
    };
    let mut h = -&x0 / (1.0 + lambda);
    for j in 0..s {
        h.axpy(-coef[j] / (1.0 + lambda * dec.mu[j]), &ab[j], 1.0);
    }
    Ok(LagrangeStep {
        h,
        lambda,
        residual: (r(lambda) - target).abs() / target,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExponentFit {
    pub steps: Vec<f64>,
    pub densities: Vec<f64>,
    pub slope: f64,
    pub r_squared: f64,
}

/// Fit `log P(x + ĥ(γ0))` against `log γ0` for `γ0 = steps[i]`.
pub fn boundary_exponent_probe(
    dec: &PiDecomposition,
    law: &KickLaw,
    x_boundary: &DVector<f64>,
    steps: &[f64],
    quad: &QuadSpec,
) -> Result<ExponentFit> {
    let eps = law.eps_hat;
    let sg = slice_geometry(dec, eps, x_boundary);
    if sg.class != SliceClass::Boundary {
        return Err(Error::ProbeOffBoundary { radicand: sg.radicand });
    }
    let mut densities = Vec::with_capacity(steps.len());
    let mut pts = Vec::with_capacity(steps.len());
    for &g in steps {
        let step = lagrange_step_unchecked(dec, x_boundary, g)?;
        let p = density_p(dec, law, &(x_boundary + &step.h), quad)?;
        densities.push(p);
        if p > 0.0 {
            pts.push((g.ln(), p.ln()));
        }
    }
    let fit = linear_fit(&pts).ok_or_else(|| Error::InvalidArgument("too few positive densities to fit".into()))?;
    Ok(ExponentFit {
        steps: steps.to_vec(),
        densities,
        slope: fit.slope,
        r_squared: fit.r_squared,
    })
}

/// Geometric sequence of `count` steps in `[lo, hi]`.
pub fn geometric_steps(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    let (a, b) = (lo.ln(), hi.ln());
    (0..count)
        .map(|i| (a + (b - a) * i as f64 / (count - 1) as f64).exp())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariationMode {
    Numeric,
    Analytic,
}

/// Derivative of `P` at interior `x` in direction `h`.
pub fn first_variation(
    dec: &PiDecomposition,
    law: &KickLaw,
    x: &DVector<f64>,
    h: &DVector<f64>,
    mode: VariationMode,
    quad: &QuadSpec,
) -> Result<f64> {
    let eps = law.eps_hat;
    let sg = slice_geometry(dec, eps, x);
    if sg.class != SliceClass::Interior {
        return Err(Error::NotInterior);
    }
    match mode {
        VariationMode::Numeric => {
            let kernel = SliceKernel::new(dec, law, quad)?;
            let p = |z: DVector<f64>| density_with(&kernel, dec, law, &z);
            let diff = |lam: f64| (p(x + h * lam) - p(x - h * lam)) / (2.0 * lam);
            let (l1, l2) = (1e-3 * eps, 5e-4 * eps);
            Ok((4.0 * diff(l2) - diff(l1)) / 3.0)
        }
        VariationMode::Analytic => {
            if dec.m > 2 || dec.m == 0 {
                return Err(Error::QuadratureUnsupported { m: dec.m });
            }
            let kernel = SliceKernel::new(dec, law, quad)?;
            let m = dec.m;
            let r = sg.radius;
            let y0 = slice_center_point(dec, &sg);
            let mut h_full = DVector::zeros(dec.n());
            h_full.rows_mut(dec.m, dec.nm).copy_from(h);
            // Velocity of the slice centre and radius along h.
            let du = dec.u_hat(h);
            let mut dy = DVector::zeros(dec.n());
            dy.rows_mut(0, m).copy_from(&du);
            dy.rows_mut(m, dec.nm).copy_from(&(-(&dec.alpha * &du)));
            let dc = dec.theta.transpose() * dy;
            let dr = -(dec.n_mat.clone() * x).dot(h) / r;

            let kinv = &kernel.kinv;
            let a = y0.dot(&(kinv * &y0));
            let k0 = (kinv * &y0).dot(&h_full);
            let mut boundary = 0.0;
            let mut interior = 0.0;
            for ((dyn_, wt), dw) in kernel.dirs.iter().zip(&kernel.dirs_w) {
                let kd = kinv * dyn_;
                let b = y0.dot(&kd);
                let c = dyn_.dot(&kd);
                let kn = kd.dot(&h_full);
                let g_at = |rho: f64| (kernel.ln_g0 - 0.5 * (a + 2.0 * rho * b + rho * rho * c)).exp();
                let normal_speed = dc.dot(dw) + dr;
                boundary += wt * g_at(r) * normal_speed;
                let mut line = 0.0;
                for (t, wr) in kernel.radial.on(0.0, 1.0) {
                    let rho = r * t;
                    line += wr * t.powi(m as i32 - 1) * g_at(rho) * -(k0 + rho * kn);
                }
                interior += wt * line * r.powi(m as i32);
            }
            boundary *= r.powi(m as i32 - 1);
            Ok(law.mass.c_hat() * dec.jacobian * (boundary + interior))
        }
    }
}

/// Quadrature orders for the TV integral.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TvQuad {
    /// Gauss–Legendre nodes per sub-interval along a line.
    pub line_nodes: usize,
    /// Transverse nodes (`nm = 2`).
    pub transverse_nodes: usize,
    /// Samples for the Monte Carlo fallback (`nm > 2`).
    pub mc_samples: usize,
    pub seed: u64,
}

impl Default for TvQuad {
    fn default() -> Self {
        Self {
            line_nodes: 48,
            transverse_nodes: 64,
            mc_samples: 20_000,
            seed: 0,
        }
    }
}

/// `∫ |P(x − v1) − P(x − v2)| dx / ‖v1 − v2‖`.
pub fn tv_lipschitz_ratio(
    dec: &PiDecomposition,
    law: &KickLaw,
    v1: &DVector<f64>,
    v2: &DVector<f64>,
    quad: &QuadSpec,
    tv: &TvQuad,
) -> Result<f64> {
    let delta = v2 - v1;
    let dist = delta.norm();
    if dist == 0.0 {
        return Ok(0.0);
    }
    // After x → x + v1 the integral only involves δ = v2 − v1.
    let nm = dec.nm;
    let kernel = SliceKernel::new(dec, law, quad);
    if nm > 2 || kernel.is_err() {
        return tv_mc(dec, law, &delta, quad, tv).map(|v| v / dist);
    }
    let kernel = kernel?;
    let p = |z: &DVector<f64>| density_with(&kernel, dec, law, z);
    let eps = law.eps_hat;
    let dir = &delta / dist;
    let line_integral = |base: &DVector<f64>| -> f64 {
        // Chord of the support along base + s·dir, and its shift by δ.
        let q = dir.dot(&(&dec.n_mat * &dir));
        let lin = dir.dot(&(&dec.n_mat * base));
        let c0 = base.dot(&(&dec.n_mat * base)) - eps * eps;
        let disc = lin * lin - q * c0;
        if disc <= 0.0 {
            return 0.0;
        }
        let (a, b) = ((-lin - disc.sqrt()) / q, (-lin + disc.sqrt()) / q);
        let mut cuts = vec![a, b, a + dist, b + dist];
        cuts.sort_by(|x, y| x.partial_cmp(y).unwrap());
        let gl = GaussLegendre::new(tv.line_nodes);
        let mut total = 0.0;
        for w in cuts.windows(2) {
            let (lo, hi) = (w[0], w[1]);
            if hi <= lo {
                continue;
            }
            // s = lo + (hi − lo)(1 − cos θ)/2 clusters nodes at both ends.
            for (th, wt) in gl.on(0.0, std::f64::consts::PI) {
                let s = lo + 0.5 * (hi - lo) * (1.0 - th.cos());
                let ds = 0.5 * (hi - lo) * th.sin();
                let x = base + &dir * s;
                let x_shift = &x - &delta;
                total += wt * ds * (p(&x) - p(&x_shift)).abs();
            }
        }
        total
    };
    if nm == 1 {
        return Ok(line_integral(&DVector::zeros(1)) / dist);
    }
    // nm = 2: lines parallel to δ, offset along the unit normal.
    let normal = DVector::from_vec(vec![-dir[1], dir[0]]);
    // Half-width of the support ellipse in the normal direction.
    let n_inv = dec.n_mat.clone().try_inverse().expect("N is invertible");
    let half = eps * normal.dot(&(&n_inv * &normal)).sqrt();
    let gl = GaussLegendre::new(tv.transverse_nodes);
    let nodes: Vec<(f64, f64)> = gl
        .on(-std::f64::consts::FRAC_PI_2, std::f64::consts::FRAC_PI_2)
        .collect();
    let total: f64 = nodes
        .par_iter()
        .map(|&(phi, wt)| {
            let t = half * phi.sin();
            wt * half * phi.cos() * line_integral(&(&normal * t))
        })
        .collect::<Vec<f64>>()
        .iter()
        .sum();
    Ok(total / dist)
}

/// `E_{x~P} |1 − P(x − δ)/P(x)| + Pr_{x~P}(P(x + δ) = 0)`.
fn tv_mc(dec: &PiDecomposition, law: &KickLaw, delta: &DVector<f64>, quad: &QuadSpec, tv: &TvQuad) -> Result<f64> {
    let mut sampler = KickSampler::new(law, tv.seed, 0);
    let mut xs = Vec::with_capacity(tv.mc_samples);
    for _ in 0..tv.mc_samples {
        xs.push(dec.project(&sampler.sample()?));
    }
    let mut quad = *quad;
    quad.mc_samples.get_or_insert(2000);
    let mut shifted_back: Vec<DVector<f64>> = xs.iter().map(|x| x - delta).collect();
    shifted_back.extend(xs.iter().map(|x| x + delta));
    let mut all = xs.clone();
    all.extend(shifted_back);
    let vals = density_p_many(dec, law, &all, &quad)?;
    let n = xs.len();
    let mut acc = 0.0;
    for i in 0..n {
        let (p, p_back, p_fwd) = (vals[i], vals[n + i], vals[2 * n + i]);
        if p > 0.0 {
            acc += (1.0 - p_back / p).abs();
        }
        if p_fwd == 0.0 {
            acc += 1.0;
        }
    }
    Ok(acc / n as f64)
}

/// The map `α: X_sigma^⊥ → X_sigma ⊖ X_{sigma_k}` induced by `Π`, in the
/// ladder bases, together with the basis `[e_1..e_m | between]` of the
/// `(u, v)` coordinates. At most `max_between` of the between-level modes
/// are kept, lowest first.
pub fn extract_alpha(
    ladder: &SigmaLadder,
    pi: &FeedbackProjector,
    k: usize,
    max_between: usize,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let eb = ladder.perp_basis(0);
    let all = ladder.between_basis(k);
    let between = all.columns(0, all.ncols().min(max_between)).into_owned();
    let alpha = between.transpose() * &pi.matrix * &eb;
    let mut cols: Vec<DVector<f64>> = eb.column_iter().map(|c| c.into_owned()).collect();
    cols.extend(between.column_iter().map(|c| c.into_owned()));
    (alpha, linalg::columns_to_matrix(ladder.n(), &cols))
}
