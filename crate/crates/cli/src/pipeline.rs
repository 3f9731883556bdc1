//! Assembly of the numerical components from a configuration.

use nalgebra::{DMatrix, DVector};
use sha2::{Digest, Sha256};

use stabilab::dichotomy::{eig_split, Dichotomy};
use stabilab::feedback::{build_extension, build_pi, ControlGeometry, FeedbackProjector};
use stabilab::kick::KickLaw;
use stabilab::ladder::{sigma_ladder, SigmaLadder};
use stabilab::model::OseenModel;
use stabilab::rds::ControlledSystem;
use stabilab::Result;

use crate::config::{Correlation, ExperimentConfig};

const SLOW_ITERATIONS: usize = 200;

pub struct Components {
    pub model: OseenModel,
    pub dich: Dichotomy,
    pub ladder: SigmaLadder,
    pub geo: ControlGeometry,
    pub pi: FeedbackProjector,
    pub law: KickLaw,
}

pub fn kick_correlation(cfg: &ExperimentConfig) -> DMatrix<f64> {
    let n = cfg.model.n;
    match &cfg.kick.correlation {
        Correlation::InverseSquare { scale } => KickLaw::default_correlation(n) * *scale,
        Correlation::Diagonal { values } => DMatrix::from_diagonal(&DVector::from_column_slice(values)),
    }
}

impl Components {
    pub fn from_model(cfg: &ExperimentConfig, model: OseenModel) -> Result<Self> {
        let dich = eig_split(&model, cfg.model.sigma)?;
        let ladder = sigma_ladder(&model, &dich, cfg.ladder.levels)?;
        let geo = ControlGeometry::with_fallback(
            &dich,
            &cfg.model.obs_idx,
            cfg.control.fallback_seed,
            cfg.control.attempts,
        )?;
        let pi = build_pi(&dich, &geo)?;
        let law = KickLaw::new(kick_correlation(cfg), cfg.eps_hat(), cfg.kick.seed)?;
        Ok(Self {
            model,
            dich,
            ladder,
            geo,
            pi,
            law,
        })
    }

    pub fn build(cfg: &ExperimentConfig) -> Result<Self> {
        Self::from_model(cfg, cfg.build_model()?)
    }

    pub fn system(&self, tau: f64) -> Result<ControlledSystem> {
        ControlledSystem::new(&self.model, &self.dich, self.pi.clone(), self.law.clone(), tau)
    }

    /// Initial state in `X_sigma`: the extension of constant observable
    /// data, scaled to norm `w0_norm`.
    pub fn initial_state(&self, w0_norm: f64) -> Result<DVector<f64>> {
        let data = DVector::from_element(self.geo.obs_idx.len(), 1.0);
        let w = build_extension(&self.dich, &self.geo, &data)?;
        let norm = w.norm();
        Ok(if norm > 0.0 { w * (w0_norm / norm) } else { w })
    }

    /// State along the slowest decaying direction of the unkicked controlled
    /// map, found by power iteration from [`Self::initial_state`].
    pub fn slow_state(&self, sys: &ControlledSystem, w0_norm: f64) -> Result<DVector<f64>> {
        let zero = DVector::zeros(sys.n());
        let mut w = self.initial_state(1.0)?;
        for _ in 0..SLOW_ITERATIONS {
            let next = sys.advance(&w, &zero);
            let norm = next.norm();
            if norm == 0.0 {
                break;
            }
            w = next / norm;
        }
        Ok(w * w0_norm)
    }

    pub fn component_hashes(&self) -> Vec<(String, String)> {
        let h = |bytes: &[u8]| hex::encode(Sha256::digest(bytes));
        let mat = |m: &DMatrix<f64>| {
            let mut v = Vec::with_capacity(m.len() * 8);
            for x in m.iter() {
                v.extend_from_slice(&x.to_le_bytes());
            }
            v
        };
        vec![
            ("model".into(), h(&mat(&self.model.a))),
            ("dichotomy".into(), h(&mat(&self.dich.p_sigma))),
            ("feedback".into(), h(&mat(&self.pi.matrix))),
            ("kick".into(), {
                let mut bytes = mat(&self.law.k);
                bytes.extend_from_slice(&self.law.eps_hat.to_le_bytes());
                h(&bytes)
            }),
        ]
    }
}
