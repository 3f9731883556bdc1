//! Feedback projection onto `X_sigma` that leaves observable coordinates
//! untouched, and the extension operator built from the same Gram system.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::dichotomy::Dichotomy;
use crate::error::{Error, Result};
use crate::linalg;

pub const GRAM_COND_CUTOFF: f64 = 1e12;

/// Control directions `g_1..g_m` supported off the observable coordinates,
/// and their Gram matrix `M[k][j] = ⟨d_k, g_j⟩` against the adjoint basis.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlGeometry {
    pub obs_idx: Vec<usize>,
    pub g: DMatrix<f64>,
    pub gram: DMatrix<f64>,
    pub cond: f64,
}

impl ControlGeometry {
    /// Explicit control directions. Entries on `obs_idx` must be zero.
    pub fn new(dich: &Dichotomy, obs_idx: &[usize], g: DMatrix<f64>) -> Result<Self> {
        let n = dich.n();
        if g.nrows() != n || g.ncols() != dich.m {
            return Err(Error::DimensionMismatch(format!(
                "control directions are {}×{}, expected {n}×{}",
                g.nrows(),
                g.ncols(),
                dich.m
            )));
        }
        if let Some(&i) = obs_idx.iter().find(|&&i| i >= n) {
            return Err(Error::InvalidArgument(format!("observable index {i} out of range")));
        }
        for &i in obs_idx {
            if g.row(i).iter().any(|&x| x != 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "control directions must vanish on observable coordinate {i}"
                )));
            }
        }
        let gram = dich.d.transpose() * &g;
        let cond = if dich.m == 0 {
            1.0
        } else {
            scaled_cond(&dich.d, &g, &gram)
        };
        if !(cond < GRAM_COND_CUTOFF) {
            return Err(Error::SingularGram { cond });
        }
        Ok(Self {
            obs_idx: obs_idx.to_vec(),
            g,
            gram,
            cond,
        })
    }

    /// Default directions: each `d_j` with its observable entries zeroed.
    pub fn from_adjoint(dich: &Dichotomy, obs_idx: &[usize]) -> Result<Self> {
        let mut g = dich.d.clone();
        for &i in obs_idx {
            if i < g.nrows() {
                g.row_mut(i).fill(0.0);
            }
        }
        Self::new(dich, obs_idx, g)
    }

    /// Default directions, falling back to seeded random directions (zero on
    /// `obs_idx`) when the default Gram system is singular.
    pub fn with_fallback(dich: &Dichotomy, obs_idx: &[usize], seed: u64, attempts: usize) -> Result<Self> {
        match Self::from_adjoint(dich, obs_idx) {
            Err(Error::SingularGram { .. }) => {}
            other => return other,
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut last = Error::SingularGram { cond: f64::INFINITY };
        for _ in 0..attempts {
            let mut g = DMatrix::from_fn(dich.n(), dich.m, |_, _| StandardNormal.sample(&mut rng));
            for &i in obs_idx {
                g.row_mut(i).fill(0.0);
            }
            match Self::new(dich, obs_idx, g) {
                Ok(geo) => return Ok(geo),
                Err(e) => last = e,
            }
        }
        Err(last)
    }
}

/// `‖D‖ ‖G‖ / σ_min(M)`: the condition of the Gram system measured against
/// the scale of its factors, so a tiny 1×1 Gram matrix still counts as
/// singular.
fn scaled_cond(d: &DMatrix<f64>, g: &DMatrix<f64>, gram: &DMatrix<f64>) -> f64 {
    let min = gram
        .clone()
        .svd(false, false)
        .singular_values
        .iter()
        .fold(f64::INFINITY, |m, &s| m.min(s));
    let scale = linalg::op_norm(d) * linalg::op_norm(g);
    if min == 0.0 {
        f64::INFINITY
    } else {
        scale / min
    }
}

/// `Π φ = φ + G c` with `M c = −Dᵀ φ`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackProjector {
    pub matrix: DMatrix<f64>,
    pub norm: f64,
    pub obs_idx: Vec<usize>,
}

pub fn build_pi(dich: &Dichotomy, geo: &ControlGeometry) -> Result<FeedbackProjector> {
    let n = dich.n();
    let mut matrix = DMatrix::identity(n, n);
    if dich.m > 0 {
        // C = −M⁻¹ Dᵀ, one column per unit input.
        let c = geo
            .gram
            .clone()
            .lu()
            .solve(&(-dich.d.transpose()))
            .ok_or(Error::SingularGram { cond: geo.cond })?;
        matrix += &geo.g * c;
    }
    // Observable rows of G vanish, so these rows are exactly the identity;
    // enforce it bitwise against rounding in the product.
    for &i in &geo.obs_idx {
        matrix.row_mut(i).fill(0.0);
        matrix[(i, i)] = 1.0;
    }
    let norm = linalg::op_norm(&matrix);
    Ok(FeedbackProjector {
        matrix,
        norm,
        obs_idx: geo.obs_idx.clone(),
    })
}

impl FeedbackProjector {
    pub fn apply(&self, phi: &DVector<f64>) -> DVector<f64> {
        &self.matrix * phi
    }
}

pub fn apply_pi(pi: &FeedbackProjector, phi: &DVector<f64>) -> DVector<f64> {
    pi.apply(phi)
}

/// Coordinate lift: `v0` on `obs_idx`, zero elsewhere.
pub fn lift(n: usize, obs_idx: &[usize], v0_obs: &DVector<f64>) -> Result<DVector<f64>> {
    if v0_obs.len() != obs_idx.len() {
        return Err(Error::DimensionMismatch(format!(
            "observable data has {} entries for {} coordinates",
            v0_obs.len(),
            obs_idx.len()
        )));
    }
    let mut v = DVector::zeros(n);
    for (k, &i) in obs_idx.iter().enumerate() {
        v[i] = v0_obs[k];
    }
    Ok(v)
}

/// Extension `E v0 = L v0 + G c`, `M c = −Dᵀ L v0`: agrees with `v0` on the
/// observable coordinates and lies in `X_sigma`.
pub fn build_extension(dich: &Dichotomy, geo: &ControlGeometry, v0_obs: &DVector<f64>) -> Result<DVector<f64>> {
    let lv = lift(dich.n(), &geo.obs_idx, v0_obs)?;
    if dich.m == 0 {
        return Ok(lv);
    }
    let c = geo
        .gram
        .clone()
        .lu()
        .solve(&(-(dich.d.transpose() * &lv)))
        .ok_or(Error::SingularGram { cond: geo.cond })?;
    let mut out = lv + &geo.g * c;
    for (k, &i) in geo.obs_idx.iter().enumerate() {
        out[i] = v0_obs[k];
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dichotomy::eig_split;
    use crate::model::OseenModel;

    /// Two-dimensional instance with `d_1 = (1,1)/√2`.
    fn tiny() -> (Dichotomy, ControlGeometry) {
        // A symmetric, eigenvalues -1 (along (1,1)) and 3 (along (1,-1)).
        let a = DMatrix::from_row_slice(2, 2, &[1.0, -2.0, -2.0, 1.0]);
        let model = OseenModel::from_matrix(a);
        let dich = eig_split(&model, 0.5).unwrap();
        let g = DMatrix::from_column_slice(2, 1, &[0.0, 1.0]);
        let geo = ControlGeometry::new(&dich, &[0], g).unwrap();
        (dich, geo)
    }

    #[test]
    fn hand_solved_instance() {
        let (dich, geo) = tiny();
        let pi = build_pi(&dich, &geo).unwrap();
        let out = pi.apply(&DVector::from_vec(vec![1.0, 0.0]));
        assert!((out - DVector::from_vec(vec![1.0, -1.0])).norm() < 1e-14);
        let ext = build_extension(&dich, &geo, &DVector::from_vec(vec![1.0])).unwrap();
        assert!((ext - DVector::from_vec(vec![1.0, -1.0])).norm() < 1e-14);
    }

    #[test]
    fn identity_on_stable_subspace() {
        let (dich, geo) = tiny();
        let pi = build_pi(&dich, &geo).unwrap();
        let v = dich.xs.column(0).into_owned();
        assert!((pi.apply(&v) - &v).norm() < 1e-14);
        assert_eq!(pi.apply(&DVector::zeros(2)), DVector::zeros(2));
    }

    #[test]
    fn orthogonal_direction_is_singular() {
        let (dich, _) = tiny();
        // g ⟂ d_1 but g must vanish on coordinate 0; use an empty observable
        // set to allow the orthogonal direction.
        let g = DMatrix::from_column_slice(2, 1, &[1.0, -1.0]);
        assert!(matches!(
            ControlGeometry::new(&dich, &[], g),
            Err(Error::SingularGram { .. })
        ));
    }

    #[test]
    fn direction_on_observable_rejected() {
        let (dich, _) = tiny();
        let g = DMatrix::from_column_slice(2, 1, &[1.0, 1.0]);
        assert!(ControlGeometry::new(&dich, &[0], g).is_err());
    }
}
