//! Experiment configuration: one JSON file with a section per component.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use stabilab::model::{build_oseen, synth_stokes_spectrum, OseenModel, StokesSpectrum};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid {field}: {reason}")]
    Validation { field: String, reason: String },
}

impl ConfigError {
    fn invalid(field: &str, reason: impl Into<String>) -> Self {
        ConfigError::Validation {
            field: field.to_string(),
            reason: reason.into(),
        }
    }

    /// Field named by a validation error.
    pub fn field(&self) -> Option<&str> {
        match self {
            ConfigError::Validation { field, .. } => Some(field),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub control: ControlSection,
    #[serde(default)]
    pub kick: KickSection,
    #[serde(default)]
    pub run: RunSection,
    #[serde(default)]
    pub ladder: LadderSection,
    #[serde(default)]
    pub density: DensitySection,
    #[serde(default)]
    pub mixing: MixingSection,
    #[serde(default = "default_output")]
    pub output: PathBuf,
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

/// How the Stokes eigenvalues are produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SpectrumSource {
    /// `beta0 j^{2/d}`, optionally with the first value replaced.
    Leading {
        first: Option<f64>,
    },
    /// Leading law plus a seeded remainder.
    Sampled,
    Explicit {
        mu: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub n: usize,
    pub d: u32,
    pub beta0: f64,
    pub remainder_scale: f64,
    pub spectrum: SpectrumSource,
    pub b: f64,
    pub n_unstable: usize,
    pub sigma: f64,
    pub obs_idx: Vec<usize>,
    pub seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            n: 20,
            d: 2,
            beta0: 1.2,
            remainder_scale: 1.25,
            spectrum: SpectrumSource::Leading { first: Some(0.1) },
            b: 0.5,
            n_unstable: 1,
            sigma: 0.5,
            obs_idx: (10..20).collect(),
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControlSection {
    /// Seed for random control directions, used only when the default
    /// directions give a singular Gram system.
    pub fallback_seed: u64,
    pub attempts: usize,
}

impl Default for ControlSection {
    fn default() -> Self {
        Self {
            fallback_seed: 1,
            attempts: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Correlation {
    /// `scale · diag(j^{-2})`.
    InverseSquare {
        scale: f64,
    },
    Diagonal {
        values: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KickSection {
    pub correlation: Correlation,
    pub eps_hat: Option<f64>,
    pub seed: u64,
}

impl Default for KickSection {
    fn default() -> Self {
        Self {
            correlation: Correlation::InverseSquare { scale: 1.0 },
            eps_hat: None,
            seed: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub tau: f64,
    pub n_steps: usize,
    pub n_chains: usize,
    /// `None` selects the smallest admissible burn-in.
    pub burn_in: Option<usize>,
    pub seed: u64,
    pub w0_norm: f64,
    pub uncontrolled_steps: usize,
    /// Step sizes scanned by the contraction certificate.
    pub tau_scan: Vec<f64>,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            tau: 2.0,
            n_steps: 200,
            n_chains: 1000,
            burn_in: None,
            seed: 11,
            w0_norm: 1.0,
            uncontrolled_steps: 100,
            tau_scan: vec![1.0, 2.0, 4.0, 8.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LadderSection {
    pub levels: usize,
}

impl Default for LadderSection {
    fn default() -> Self {
        Self { levels: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AlphaSource {
    /// From the feedback projector and ladder level `density.level`.
    Extracted,
    /// Rows of an explicit `nm × m` matrix.
    Explicit { rows: Vec<Vec<f64>> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DensitySection {
    pub alpha: AlphaSource,
    pub level: usize,
    pub max_between: usize,
    pub radial: usize,
    pub angular2: usize,
    pub angular3: usize,
    pub outer_radial: usize,
    pub outer_angular: usize,
    pub kde_samples: usize,
    pub grid_points: usize,
    pub probe_steps: usize,
    pub tv_pairs: usize,
    pub seed: u64,
}

impl Default for DensitySection {
    fn default() -> Self {
        Self {
            alpha: AlphaSource::Extracted,
            level: 1,
            max_between: 2,
            radial: 64,
            angular2: 256,
            angular3: 32,
            outer_radial: 64,
            outer_angular: 128,
            kde_samples: 1_000_000,
            grid_points: 10,
            probe_steps: 10,
            tv_pairs: 10,
            seed: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MixingSection {
    /// Step size of the mixing experiment; shorter than `run.tau` so that
    /// the decay is resolved over several steps.
    pub tau: f64,
    /// Norm of the two mixing initial states `±w0`.
    pub w0_norm: f64,
    pub n_chains: usize,
    pub n_steps: usize,
    pub slln_steps: usize,
    pub stationary_steps: usize,
    pub energy_lag: usize,
    pub permutations: usize,
    pub seed: u64,
    pub observables_seed: u64,
}

impl Default for MixingSection {
    fn default() -> Self {
        Self {
            tau: 0.15,
            w0_norm: 0.5,
            n_chains: 500,
            n_steps: 100,
            slln_steps: 200_000,
            stationary_steps: 100_000,
            energy_lag: 10,
            permutations: 500,
            seed: 13,
            observables_seed: 17,
        }
    }
}

impl ExperimentConfig {
    /// Parse without validating.
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        serde_json::from_str(text).map_err(|e| ConfigError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<(), ConfigError> {
        std::fs::write(path, self.to_json()).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    /// SHA-256 of the canonical serialization.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }

    pub fn eps_hat(&self) -> f64 {
        self.kick.eps_hat.expect("validated config has eps_hat")
    }

    pub fn spectrum(&self) -> stabilab::Result<StokesSpectrum> {
        let m = &self.model;
        match &m.spectrum {
            SpectrumSource::Leading { first } => {
                let mut mu: Vec<f64> = (1..=m.n).map(|j| m.beta0 * (j as f64).powf(2.0 / m.d as f64)).collect();
                if let (Some(f), Some(slot)) = (first, mu.first_mut()) {
                    *slot = *f;
                }
                StokesSpectrum::from_values(m.d, m.beta0, m.remainder_scale, mu)
            }
            SpectrumSource::Sampled => synth_stokes_spectrum(m.n, m.d, m.beta0, m.remainder_scale, m.seed),
            SpectrumSource::Explicit { mu } => StokesSpectrum::from_values(m.d, m.beta0, m.remainder_scale, mu.clone()),
        }
    }

    pub fn build_model(&self) -> stabilab::Result<OseenModel> {
        let m = &self.model;
        build_oseen(&self.spectrum()?, m.b, m.n_unstable, m.sigma, &m.obs_idx, m.seed)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let m = &self.model;
        match self.kick.eps_hat {
            None => return Err(ConfigError::invalid("kick.eps_hat", "missing")),
            Some(e) if !(e > 0.0 && e.is_finite()) => {
                return Err(ConfigError::invalid("kick.eps_hat", "must be positive"))
            }
            _ => {}
        }
        if m.n == 0 {
            return Err(ConfigError::invalid("model.n", "must be positive"));
        }
        if m.n_unstable >= m.n {
            return Err(ConfigError::invalid("model.n_unstable", "must be below model.n"));
        }
        if !(m.sigma > 0.0) {
            return Err(ConfigError::invalid("model.sigma", "must be positive"));
        }
        if let SpectrumSource::Explicit { mu } = &m.spectrum {
            if mu.len() != m.n {
                return Err(ConfigError::invalid("model.spectrum.mu", "length must equal model.n"));
            }
        }
        let unique: BTreeSet<usize> = m.obs_idx.iter().copied().collect();
        if unique.len() != m.obs_idx.len() || m.obs_idx.iter().any(|&i| i >= m.n) {
            return Err(ConfigError::invalid(
                "model.obs_idx",
                "indices must be distinct and below model.n",
            ));
        }
        match &self.kick.correlation {
            Correlation::InverseSquare { scale } if !(*scale > 0.0) => {
                return Err(ConfigError::invalid("kick.correlation.scale", "must be positive"))
            }
            Correlation::Diagonal { values } if values.len() != m.n || values.iter().any(|v| !(*v > 0.0)) => {
                return Err(ConfigError::invalid(
                    "kick.correlation.values",
                    "need model.n positive entries",
                ))
            }
            _ => {}
        }
        if !(self.run.tau > 0.0) {
            return Err(ConfigError::invalid("run.tau", "must be positive"));
        }
        if !(self.mixing.tau > 0.0) {
            return Err(ConfigError::invalid("mixing.tau", "must be positive"));
        }
        if self.run.n_chains == 0 || self.run.n_steps == 0 {
            return Err(ConfigError::invalid("run", "n_chains and n_steps must be positive"));
        }
        if self.mixing.n_chains < stabilab::ergodicity::MIN_CHAINS {
            return Err(ConfigError::invalid("mixing.n_chains", "at least 500 chains required"));
        }
        if self.ladder.levels == 0 {
            return Err(ConfigError::invalid("ladder.levels", "must be positive"));
        }
        if self.density.level == 0 || self.density.level > self.ladder.levels {
            return Err(ConfigError::invalid("density.level", "must be a ladder level"));
        }
        if let AlphaSource::Explicit { rows } = &self.density.alpha {
            let cols = rows.first().map_or(0, |r| r.len());
            if rows.is_empty() || cols == 0 || rows.iter().any(|r| r.len() != cols) {
                return Err(ConfigError::invalid(
                    "density.alpha.rows",
                    "must be a nonempty rectangular matrix",
                ));
            }
            if rows.len() + cols > m.n {
                return Err(ConfigError::invalid("density.alpha.rows", "dimension exceeds model.n"));
            }
        }
        // The sigma gap is a property of the built operator.
        let model = self
            .build_model()
            .map_err(|e| ConfigError::invalid("model.sigma", e.to_string()))?;
        if model.gap_at(m.sigma) < stabilab::dichotomy::DEFAULT_GAP_TOL {
            return Err(ConfigError::invalid(
                "model.sigma",
                "spectrum touches the dichotomy level",
            ));
        }
        Ok(())
    }
}

/// Read, default-fill and validate a configuration file.
pub fn load_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let cfg = ExperimentConfig::from_json(&text)?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> ExperimentConfig {
        ExperimentConfig::from_json(r#"{"kick": {"eps_hat": 0.01}}"#).unwrap()
    }

    #[test]
    fn leading_spectrum_overrides_first_value() {
        let mu = minimal().spectrum().unwrap().mu;
        assert_eq!(mu.len(), 20);
        assert_eq!(mu[0], 0.1);
        assert!((mu[1] - 1.2 * 2.0).abs() < 1e-12);
        assert!((mu[19] - 1.2 * 20.0).abs() < 1e-12);
    }

    #[test]
    fn explicit_spectrum_is_taken_verbatim() {
        let mut cfg = minimal();
        cfg.model.n = 3;
        cfg.model.n_unstable = 1;
        cfg.model.obs_idx = vec![2];
        cfg.model.spectrum = SpectrumSource::Explicit {
            mu: vec![0.5, 2.0, 3.0],
        };
        assert_eq!(cfg.spectrum().unwrap().mu, vec![0.5, 2.0, 3.0]);
        assert_eq!(cfg.build_model().unwrap().a.nrows(), 3);
    }

    #[test]
    fn hash_tracks_content() {
        let a = minimal();
        let mut b = minimal();
        assert_eq!(a.hash(), b.hash());
        b.run.tau += 1e-12;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn default_config_validates() {
        assert!(minimal().validate().is_ok());
        assert_eq!(
            ExperimentConfig::from_json("{}")
                .unwrap()
                .validate()
                .unwrap_err()
                .field(),
            Some("kick.eps_hat")
        );
    }

    #[test]
    fn parse_errors_carry_positions() {
        match ExperimentConfig::from_json("{\n \"run\": 3\n}") {
            Err(ConfigError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }
}
