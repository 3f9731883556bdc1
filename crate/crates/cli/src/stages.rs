//! The stage pipeline. Each stage reads the artifacts of its prerequisite,
//! writes its own artifacts and records checksums in the manifest.

use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use stabilab::density::{
    boundary_exponent_probe, build_pi_decomposition, density_p_many, extract_alpha, geometric_steps, integrate_density,
    mc_density_oracle_many, PiDecomposition, QuadSpec, TvQuad,
};
use stabilab::dichotomy::{contraction_certificate, eigen_projector, row_major};
use stabilab::ergodicity::{
    condition_check, energy_distance_test, min_burn_in, mixing_decay, slln_average, stationary_stats, tv_stability,
    ConditionReport, MixingReport, ObservableSet, SllnReport, StationaryStats, TvCheck, TvStability,
};
use stabilab::kick::{KickLaw, ProjectedLaw};
use stabilab::ladder::tail_contraction;
use stabilab::model::{ModelDocument, OseenModel};
use stabilab::rds::{envelope_check, run_chain, run_ensemble, uncontrolled_run, ChainConfig};

use crate::artifacts::{emit_series, read_json, sha256_file, write_json, ArtifactError, RunManifest};
use crate::config::{AlphaSource, ConfigError, ExperimentConfig};
use crate::pipeline::{kick_correlation, Components};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Synth,
    Dichotomy,
    Certify,
    Simulate,
    Density,
    Mixing,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Synth,
        Stage::Dichotomy,
        Stage::Certify,
        Stage::Simulate,
        Stage::Density,
        Stage::Mixing,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Dichotomy => "dichotomy",
            Stage::Certify => "certify",
            Stage::Simulate => "simulate",
            Stage::Density => "density",
            Stage::Mixing => "mixing",
            Stage::Report => "report",
        }
    }

    /// Artifact files that must exist before the stage can run.
    pub fn prerequisites(self) -> &'static [&'static str] {
        match self {
            Stage::Synth => &[],
            Stage::Dichotomy => &["model.json"],
            Stage::Certify => &["model.json", "dichotomy.json"],
            Stage::Simulate | Stage::Density | Stage::Mixing => &["model.json", "certificate.json"],
            Stage::Report => &["certificate.json", "simulation.json", "density.json", "mixing.json"],
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("stage {stage} needs {artifact}; run the earlier stages first")]
    MissingPrerequisite { stage: &'static str, artifact: String },
    #[error("stage {stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: stabilab::Error,
    },
    #[error(transparent)]
    Artifact(#[from] ArtifactError),
}

/// A verification criterion evaluated by a stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    /// Undefined values are written as `null` and read back as NaN.
    #[serde(deserialize_with = "nan_from_null")]
    pub value: f64,
    pub pass: bool,
}

fn nan_from_null<'de, D: serde::Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
}

impl Check {
    fn new(name: &str, value: f64, pass: bool) -> Self {
        Self {
            name: name.to_string(),
            value,
            pass,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageOutcome {
    pub stage: Stage,
    pub artifacts: Vec<PathBuf>,
    pub checks: Vec<Check>,
}

impl StageOutcome {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

struct Ctx<'a> {
    cfg: &'a ExperimentConfig,
    out: &'a Path,
    stage: Stage,
}

impl Ctx<'_> {
    fn lift<T>(&self, r: stabilab::Result<T>) -> Result<T, CliError> {
        r.map_err(|source| CliError::Stage {
            stage: self.stage.name(),
            source,
        })
    }

    fn components(&self) -> Result<Components, CliError> {
        let doc: ModelDocument = read_json(&self.out.join("model.json"))?;
        let model = self.lift(OseenModel::from_document(&doc))?;
        self.lift(Components::from_model(self.cfg, model))
    }
}

/// Run one stage with `cfg`, writing into `out`.
pub fn run_command(stage: Stage, cfg: &ExperimentConfig, out: &Path) -> Result<StageOutcome, CliError> {
    std::fs::create_dir_all(out).map_err(|source| ArtifactError::Io {
        path: out.to_path_buf(),
        source,
    })?;
    // Prerequisites must come from a run with this configuration.
    let recorded = RunManifest::load_or_new(out, &cfg.hash())?;
    for artifact in stage.prerequisites() {
        let path = out.join(artifact);
        let current = match recorded.artifacts.get(*artifact) {
            Some(entry) => path.exists() && sha256_file(&path)? == entry.sha256,
            None => false,
        };
        if !current {
            return Err(CliError::MissingPrerequisite {
                stage: stage.name(),
                artifact: artifact.to_string(),
            });
        }
    }
    let ctx = Ctx { cfg, out, stage };
    let start = Instant::now();
    let (artifacts, checks) = match stage {
        Stage::Synth => synth(&ctx)?,
        Stage::Dichotomy => dichotomy(&ctx)?,
        Stage::Certify => certify(&ctx)?,
        Stage::Simulate => simulate(&ctx)?,
        Stage::Density => density(&ctx)?,
        Stage::Mixing => mixing(&ctx)?,
        Stage::Report => report(&ctx)?,
    };
    let mut manifest = RunManifest::load_or_new(out, &cfg.hash())?;
    if stage == Stage::Synth {
        let comps = ctx.components()?;
        manifest.component_hashes = comps.component_hashes().into_iter().collect();
    }
    for a in &artifacts {
        manifest.record(stage.name(), a)?;
    }
    manifest
        .timings
        .insert(stage.name().to_string(), start.elapsed().as_secs_f64());
    manifest.save(out)?;
    Ok(StageOutcome {
        stage,
        artifacts,
        checks,
    })
}

/// All stages in order.
pub fn run_all(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<StageOutcome>, CliError> {
    Stage::ALL.iter().map(|&s| run_command(s, cfg, out)).collect()
}

type StageResult = Result<(Vec<PathBuf>, Vec<Check>), CliError>;

fn synth(ctx: &Ctx) -> StageResult {
    let model = ctx.lift(ctx.cfg.build_model())?;
    let doc = model.to_document();
    let rows: Vec<Vec<f64>> = model
        .spectrum_cache
        .iter()
        .map(|r| vec![r.re, r.im, r.multiplicity as f64])
        .collect();
    let unstable = model.count_below(ctx.cfg.model.sigma);
    let checks = vec![Check::new(
        "unstable_count",
        unstable as f64,
        unstable == ctx.cfg.model.n_unstable,
    )];
    Ok((
        vec![
            write_json(ctx.out, "model", &doc)?,
            emit_series(ctx.out, "spectrum", &["re", "im", "multiplicity"], &rows)?,
        ],
        checks,
    ))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DichotomyArtifact {
    pub sigma: f64,
    pub m: usize,
    pub gap: f64,
    /// Row-major `n × m` adjoint basis.
    pub d: Vec<f64>,
    pub riesz_vs_eigen_error: f64,
    pub levels: Vec<f64>,
    pub dims: Vec<usize>,
    pub checks: Vec<Check>,
}

fn dichotomy(ctx: &Ctx) -> StageResult {
    let c = ctx.components()?;
    let eig = ctx.lift(eigen_projector(&c.model, ctx.cfg.model.sigma))?;
    let err = (&c.dich.p_riesz - eig).norm();
    let checks = vec![Check::new("riesz_projector_error", err, err < 1e-8)];
    let art = DichotomyArtifact {
        sigma: c.dich.sigma,
        m: c.dich.m,
        gap: c.dich.gap,
        d: row_major(&c.dich.d),
        riesz_vs_eigen_error: err,
        levels: c.ladder.levels.clone(),
        dims: c.ladder.dims.clone(),
        checks: checks.clone(),
    };
    Ok((vec![write_json(ctx.out, "dichotomy", &art)?], checks))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScanPoint {
    pub tau: f64,
    pub gamma0: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProjectorChecks {
    pub samples: usize,
    /// `max ‖Πφ − φ‖` over `φ ∈ X_sigma`.
    pub fixed_residual: f64,
    /// `max ‖Π²φ − Πφ‖`.
    pub idempotence_residual: f64,
    /// Observable coordinates of `Πφ` equal those of `φ` bitwise.
    pub observables_exact: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CertificateArtifact {
    pub tau: f64,
    pub gamma0: f64,
    pub certified: bool,
    pub scan: Vec<ScanPoint>,
    pub scan_decreasing: bool,
    pub gammas: Vec<f64>,
    pub pi_norm: f64,
    pub gram_cond: f64,
    pub projector: ProjectorChecks,
    pub conditions: ConditionReport,
    pub checks: Vec<Check>,
}

pub fn projector_checks(c: &Components, samples: usize, seed: u64) -> ProjectorChecks {
    let n = c.model.n;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fixed: f64 = 0.0;
    let mut idem: f64 = 0.0;
    let mut exact = true;
    for _ in 0..samples {
        let phi = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
        let pphi = c.pi.apply(&phi);
        idem = idem.max((c.pi.apply(&pphi) - &pphi).norm());
        exact &= c.pi.obs_idx.iter().all(|&i| pphi[i] == phi[i]);
        let coeffs = DVector::from_fn(c.dich.xs.ncols(), |_, _| StandardNormal.sample(&mut rng));
        let stable = &c.dich.xs * coeffs;
        fixed = fixed.max((c.pi.apply(&stable) - &stable).norm());
    }
    ProjectorChecks {
        samples,
        fixed_residual: fixed,
        idempotence_residual: idem,
        observables_exact: exact,
    }
}

fn certify(ctx: &Ctx) -> StageResult {
    let c = ctx.components()?;
    let tau = ctx.cfg.run.tau;
    let (gamma0, certified) = contraction_certificate(&c.dich, &c.model, tau);
    let scan: Vec<ScanPoint> = ctx
        .cfg
        .run
        .tau_scan
        .iter()
        .map(|&t| ScanPoint {
            tau: t,
            gamma0: contraction_certificate(&c.dich, &c.model, t).0,
        })
        .collect();
    let scan_decreasing = scan.windows(2).all(|w| w[1].gamma0 < w[0].gamma0);
    let gammas = tail_contraction(&c.ladder, &c.model, tau);
    let projector = projector_checks(&c, 1000, ctx.cfg.kick.seed);
    let tv_check = TvCheck {
        level: ctx.cfg.density.level,
        max_between: ctx.cfg.density.max_between,
        n_pairs: ctx.cfg.density.tv_pairs,
        seed: ctx.cfg.density.seed,
        ..TvCheck::default()
    };
    let conditions = ctx.lift(condition_check(
        &c.model, &c.dich, &c.ladder, &c.pi, &c.law, tau, &tv_check,
    ))?;
    let checks = vec![
        Check::new("contraction_gamma0", gamma0, certified),
        Check::new(
            "contraction_scan_decreasing",
            scan.last().map_or(f64::NAN, |p| p.gamma0),
            scan_decreasing,
        ),
        Check::new(
            "tail_contraction",
            gammas.last().copied().unwrap_or(f64::NAN),
            conditions.tail_pass,
        ),
        Check::new(
            "tv_lipschitz",
            conditions.tv.as_ref().map_or(f64::NAN, |t| t.worst_spread),
            conditions.tv_pass.unwrap_or(true),
        ),
        Check::new(
            "projector_fixes_stable",
            projector.fixed_residual,
            projector.fixed_residual < 1e-10,
        ),
        Check::new(
            "projector_idempotent",
            projector.idempotence_residual,
            projector.idempotence_residual < 1e-10,
        ),
        Check::new(
            "projector_keeps_observables",
            if projector.observables_exact { 1.0 } else { 0.0 },
            projector.observables_exact,
        ),
    ];
    let art = CertificateArtifact {
        tau,
        gamma0,
        certified,
        scan,
        scan_decreasing,
        gammas,
        pi_norm: c.pi.norm,
        gram_cond: c.geo.cond,
        projector,
        conditions,
        checks: checks.clone(),
    };
    Ok((vec![write_json(ctx.out, "certificate", &art)?], checks))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulationArtifact {
    pub tau: f64,
    pub gamma0: f64,
    pub n_chains: usize,
    pub n_steps: usize,
    pub w0_norm: f64,
    pub envelope_violations: usize,
    pub envelope_max_residual: f64,
    pub stage_threshold: f64,
    pub first_entry_max: Option<usize>,
    pub max_invariance_residual: f64,
    pub uncontrolled_steps: usize,
    pub uncontrolled_norm: f64,
    pub controlled_norm: f64,
    pub blow_up_ratio: f64,
    pub uncontrolled_growth_rate: f64,
    pub checks: Vec<Check>,
}

fn simulate(ctx: &Ctx) -> StageResult {
    let c = ctx.components()?;
    let run = &ctx.cfg.run;
    let sys = ctx.lift(c.system(run.tau))?;
    let w0 = ctx.lift(c.initial_state(run.w0_norm))?;
    let chains = ctx.lift(run_ensemble(&sys, w0.as_slice(), run.n_chains, run.n_steps, run.seed))?;
    let mut violations = 0;
    let mut max_residual = f64::NEG_INFINITY;
    let mut max_inv: f64 = 0.0;
    let mut first_entry_max = Some(0);
    for t in &chains {
        let rep = envelope_check(&t.norms, sys.gamma0, sys.pi.norm, sys.law.eps_hat);
        violations += rep.violations;
        max_residual = max_residual.max(rep.max_residual);
        max_inv = max_inv.max(t.max_invariance_residual);
        first_entry_max = match (first_entry_max, t.first_entry) {
            (Some(a), Some(b)) => Some(a.max(b)),
            _ => None,
        };
    }
    let steps = run.n_steps + 1;
    let mut rows = Vec::with_capacity(steps);
    let r0 = sys.stage_threshold();
    for k in 0..steps {
        let mean = chains.iter().map(|t| t.norms[k]).sum::<f64>() / chains.len() as f64;
        let max = chains.iter().map(|t| t.norms[k]).fold(0.0, f64::max);
        let envelope = sys.gamma0.powi(k as i32) * w0.norm() + r0;
        rows.push(vec![k as f64, mean, max, envelope]);
    }

    // Shared kick stream for the controlled and uncontrolled recursions.
    let n_unc = run.uncontrolled_steps;
    let controlled = ctx.lift(run_chain(
        &sys,
        &ChainConfig {
            n_steps: n_unc,
            w0: w0.as_slice().to_vec(),
            seed: run.seed,
            stream: 0,
            record_kicks: false,
        },
    ))?;
    let unc = ctx.lift(uncontrolled_run(&c.model, &c.law, &w0, run.tau, n_unc, run.seed, 0))?;
    let controlled_norm = *controlled.norms.last().unwrap();
    let uncontrolled_norm = *unc.norms.last().unwrap();
    let ratio = uncontrolled_norm / controlled_norm;
    let unc_rows: Vec<Vec<f64>> = (0..=n_unc)
        .map(|k| vec![k as f64, controlled.norms[k], unc.norms[k]])
        .collect();

    let checks = vec![
        Check::new(
            "envelope_violations",
            violations as f64,
            sys.gamma0 < 1.0 && violations == 0,
        ),
        Check::new(
            "stable_subspace_invariance",
            max_inv,
            max_inv < stabilab::rds::INVARIANCE_TOL,
        ),
        Check::new("controlled_vs_uncontrolled", ratio, ratio > 1e3),
    ];
    let art = SimulationArtifact {
        tau: run.tau,
        gamma0: sys.gamma0,
        n_chains: run.n_chains,
        n_steps: run.n_steps,
        w0_norm: w0.norm(),
        envelope_violations: violations,
        envelope_max_residual: max_residual,
        stage_threshold: r0,
        first_entry_max,
        max_invariance_residual: max_inv,
        uncontrolled_steps: n_unc,
        uncontrolled_norm,
        controlled_norm,
        blow_up_ratio: ratio,
        uncontrolled_growth_rate: unc.growth_rate,
        checks: checks.clone(),
    };
    Ok((
        vec![
            write_json(ctx.out, "simulation", &art)?,
            emit_series(ctx.out, "norms", &["step", "mean_norm", "max_norm", "envelope"], &rows)?,
            emit_series(
                ctx.out,
                "uncontrolled",
                &["step", "controlled", "uncontrolled"],
                &unc_rows,
            )?,
        ],
        checks,
    ))
}

/// The pushforward setting used by the density stage: `α`, and the kick
/// law on the `(u, v)` coordinates.
pub fn density_setting(cfg: &ExperimentConfig, c: &Components) -> stabilab::Result<(DMatrix<f64>, KickLaw)> {
    match &cfg.density.alpha {
        AlphaSource::Extracted => {
            let (alpha, basis) = extract_alpha(&c.ladder, &c.pi, cfg.density.level, cfg.density.max_between);
            Ok((alpha, ProjectedLaw::from_basis(&c.law, basis)?.law))
        }
        AlphaSource::Explicit { rows } => {
            let (nm, m) = (rows.len(), rows[0].len());
            let alpha = DMatrix::from_fn(nm, m, |i, j| rows[i][j]);
            let k = kick_correlation(cfg).view((0, 0), (m + nm, m + nm)).into_owned();
            Ok((alpha, KickLaw::new(k, cfg.eps_hat(), cfg.kick.seed)?))
        }
    }
}

/// Deterministic interior points with `xᵀNx ≤ (0.8 ε)²`.
pub fn interior_grid(dec: &PiDecomposition, eps: f64, count: usize, seed: u64) -> Vec<DVector<f64>> {
    let nm = dec.nm;
    let (vals, vecs) = stabilab::linalg::sym_eigen_desc(&dec.n_mat);
    let sqrt_inv = &vecs
        * DMatrix::from_diagonal(&DVector::from_iterator(nm, vals.iter().map(|v| 1.0 / v.sqrt())))
        * vecs.transpose();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..count)
        .map(|i| {
            let rho = 0.8 * ((i as f64 + 0.5) / count as f64).sqrt();
            let z = match nm {
                1 => DVector::from_element(1, if i % 2 == 0 { rho } else { -rho }),
                2 => {
                    let t = golden * i as f64;
                    DVector::from_vec(vec![rho * t.cos(), rho * t.sin()])
                }
                _ => DVector::from_fn(nm, |_, _| StandardNormal.sample(&mut rng)).normalize() * rho,
            };
            &sqrt_inv * z * eps
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundaryProbe {
    pub expected_slope: f64,
    pub slope: f64,
    pub r_squared: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DensityArtifact {
    pub m: usize,
    pub nm: usize,
    pub alpha: Vec<f64>,
    pub jacobian: f64,
    pub mass: Option<f64>,
    pub kde_samples: usize,
    pub max_relative_error: f64,
    pub boundary: Option<BoundaryProbe>,
    pub tv: TvStability,
    pub checks: Vec<Check>,
}

fn density(ctx: &Ctx) -> StageResult {
    let c = ctx.components()?;
    let dc = &ctx.cfg.density;
    let (alpha, law) = ctx.lift(density_setting(ctx.cfg, &c))?;
    let dec = build_pi_decomposition(&alpha);
    let eps = law.eps_hat;
    let quad = QuadSpec {
        radial: dc.radial,
        angular2: dc.angular2,
        angular3: dc.angular3,
        mc_samples: None,
        mc_seed: dc.seed,
    };
    let grid = interior_grid(&dec, eps, dc.grid_points, dc.seed);
    let p = ctx.lift(density_p_many(&dec, &law, &grid, &quad))?;
    let kde = ctx.lift(mc_density_oracle_many(&dec, &law, &grid, dc.kde_samples, None, dc.seed))?;
    let mut rows = Vec::with_capacity(grid.len());
    let mut max_rel: f64 = 0.0;
    for ((x, p), k) in grid.iter().zip(&p).zip(&kde) {
        let rel = (p - k.estimate).abs() / p;
        max_rel = max_rel.max(rel);
        let mut row: Vec<f64> = x.iter().copied().collect();
        row.extend([*p, k.estimate, k.std_error, rel]);
        rows.push(row);
    }
    let mut columns: Vec<String> = (0..dec.nm).map(|i| format!("x{i}")).collect();
    columns.extend(["density", "kde", "kde_std_error", "relative_error"].map(String::from));
    let columns: Vec<&str> = columns.iter().map(String::as_str).collect();

    let mass = if dec.nm <= 2 {
        Some(ctx.lift(integrate_density(&dec, &law, &quad, dc.outer_radial, dc.outer_angular))?)
    } else {
        None
    };
    let boundary = if dec.m <= 3 {
        let dir = DVector::from_fn(dec.nm, |i, _| 1.0 / (1.0 + i as f64));
        let xb = dec.boundary_point(eps, &dir);
        let steps = geometric_steps(1e-4 * eps, 1e-1 * eps, dc.probe_steps);
        let fit = ctx.lift(boundary_exponent_probe(&dec, &law, &xb, &steps, &quad))?;
        Some(BoundaryProbe {
            expected_slope: dec.m as f64 / 2.0,
            slope: fit.slope,
            r_squared: fit.r_squared,
        })
    } else {
        None
    };
    let tv_quad = QuadSpec {
        mc_samples: Some(4000),
        ..quad
    };
    let scales: Vec<f64> = [1e-1, 1e-2, 1e-3].iter().map(|s| s * eps).collect();
    let tv = ctx.lift(tv_stability(
        &alpha,
        &law,
        dc.tv_pairs,
        &scales,
        dc.seed,
        &tv_quad,
        &TvQuad::default(),
    ))?;

    let mut checks = vec![Check::new("density_vs_kde", max_rel, max_rel < 0.05)];
    if let Some(m) = mass {
        checks.push(Check::new("density_mass", (m - 1.0).abs(), (m - 1.0).abs() < 1e-4));
    }
    if let Some(b) = &boundary {
        let dev = (b.slope - b.expected_slope).abs();
        checks.push(Check::new("boundary_exponent", b.slope, dev <= 0.1));
    }
    checks.push(Check::new("tv_lipschitz_spread", tv.worst_spread, tv.bounded));
    let art = DensityArtifact {
        m: dec.m,
        nm: dec.nm,
        alpha: row_major(&alpha),
        jacobian: dec.jacobian,
        mass,
        kde_samples: dc.kde_samples,
        max_relative_error: max_rel,
        boundary,
        tv,
        checks: checks.clone(),
    };
    Ok((
        vec![
            write_json(ctx.out, "density", &art)?,
            emit_series(ctx.out, "density_grid", &columns, &rows)?,
        ],
        checks,
    ))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StationarityTest {
    pub step: usize,
    pub lag: usize,
    pub statistic: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MixingArtifact {
    pub tau: f64,
    pub gamma0: f64,
    pub burn_in: usize,
    pub mixing: MixingReport,
    pub slln: [SllnReport; 2],
    pub stationary: StationaryStats,
    pub stationarity: StationarityTest,
    pub checks: Vec<Check>,
}

/// Burn-in after which the initial offset is below `1e-3 ε̂`.
pub fn deep_burn_in(eps_hat: f64, w0_norm: f64, gamma0: f64) -> usize {
    min_burn_in(1e-3 * eps_hat, w0_norm, gamma0)
}

fn mixing(ctx: &Ctx) -> StageResult {
    let c = ctx.components()?;
    let mc = &ctx.cfg.mixing;
    let sys = ctx.lift(c.system(mc.tau))?;
    let w0 = ctx.lift(c.slow_state(&sys, mc.w0_norm))?;
    let w0_b = -&w0;
    let obs = ObservableSet::standard(&c.dich.xs, sys.stage_threshold(), mc.observables_seed);
    let report = ctx.lift(mixing_decay(
        &sys,
        w0.as_slice(),
        w0_b.as_slice(),
        mc.n_chains,
        mc.n_steps,
        &obs,
        mc.seed,
    ))?;

    let slln = [
        ctx.lift(slln_average(
            &sys,
            w0.as_slice(),
            mc.slln_steps,
            &obs,
            mc.seed.wrapping_add(1),
        ))?,
        ctx.lift(slln_average(
            &sys,
            w0.as_slice(),
            mc.slln_steps,
            &obs,
            mc.seed.wrapping_add(2),
        ))?,
    ];
    let burn_in = ctx
        .cfg
        .run
        .burn_in
        .unwrap_or_else(|| deep_burn_in(sys.law.eps_hat, w0.norm(), sys.gamma0));
    let stationary = ctx.lift(stationary_stats(
        &sys,
        w0.as_slice(),
        mc.stationary_steps,
        burn_in,
        mc.seed.wrapping_add(3),
    ))?;

    // Independent halves of one ensemble at steps k and k + lag.
    let k = burn_in;
    let runs = ctx.lift(run_ensemble(
        &sys,
        w0.as_slice(),
        mc.n_chains,
        k + mc.energy_lag,
        mc.seed.wrapping_add(4),
    ))?;
    let half = runs.len() / 2;
    let xs: Vec<DVector<f64>> = runs[..half].iter().map(|t| t.states[k].clone()).collect();
    let ys: Vec<DVector<f64>> = runs[half..]
        .iter()
        .map(|t| t.states[k + mc.energy_lag].clone())
        .collect();
    let et = energy_distance_test(&xs, &ys, mc.permutations, mc.seed.wrapping_add(5));

    let cauchy: Vec<f64> = [1_000usize, 10_000, 100_000]
        .iter()
        .filter_map(|&n| slln[0].cauchy_gap(n))
        .collect();
    let cauchy_ok = cauchy.len() >= 2 && cauchy.windows(2).all(|w| w[1] < w[0]);
    let overlap = slln[0]
        .state_ci
        .iter()
        .zip(&slln[1].state_ci)
        .all(|(a, b)| a.overlaps(b));
    let gamma = report.gamma.unwrap_or(f64::NAN);
    let checks = vec![
        Check::new(
            "mixing_rate",
            gamma,
            !report.inconclusive && gamma < 1.0 && report.r_squared.unwrap_or(0.0) > 0.9,
        ),
        Check::new("mixing_below_contraction", gamma, gamma <= sys.gamma0 + 0.05),
        Check::new("slln_cauchy", cauchy.last().copied().unwrap_or(f64::NAN), cauchy_ok),
        Check::new("slln_two_seed_overlap", if overlap { 1.0 } else { 0.0 }, overlap),
        Check::new(
            "stationary_psd",
            stationary.min_eigenvalue,
            stationary.min_eigenvalue >= -1e-10,
        ),
        Check::new(
            "stationary_envelope",
            stationary.envelope_violations as f64,
            stationary.envelope_violations == 0,
        ),
        Check::new("stationarity_energy_test", et.p_value, et.p_value > 0.01),
    ];
    let mixing_rows: Vec<Vec<f64>> = report
        .distances
        .iter()
        .zip(&report.noise)
        .enumerate()
        .map(|(k, (d, n))| vec![k as f64, *d, *n])
        .collect();
    let art = MixingArtifact {
        tau: mc.tau,
        gamma0: sys.gamma0,
        burn_in,
        mixing: report,
        slln,
        stationary,
        stationarity: StationarityTest {
            step: k,
            lag: mc.energy_lag,
            statistic: et.statistic,
            p_value: et.p_value,
        },
        checks: checks.clone(),
    };
    Ok((
        vec![
            write_json(ctx.out, "mixing", &art)?,
            emit_series(
                ctx.out,
                "mixing_distances",
                &["step", "distance", "noise"],
                &mixing_rows,
            )?,
        ],
        checks,
    ))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportEntry {
    pub artifact: String,
    pub check: Check,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    pub config_hash: String,
    pub gamma0: f64,
    pub gammas: Vec<f64>,
    pub tv_spread: Option<f64>,
    pub mixing_gamma: Option<f64>,
    pub mixing_r_squared: Option<f64>,
    pub envelope_violations: usize,
    pub boundary_slope: Option<f64>,
    pub entries: Vec<ReportEntry>,
    pub all_pass: bool,
}

#[derive(Deserialize)]
struct WithChecks {
    checks: Vec<Check>,
}

fn report(ctx: &Ctx) -> StageResult {
    let cert: CertificateArtifact = read_json(&ctx.out.join("certificate.json"))?;
    let sim: SimulationArtifact = read_json(&ctx.out.join("simulation.json"))?;
    let dens: DensityArtifact = read_json(&ctx.out.join("density.json"))?;
    let mix: MixingArtifact = read_json(&ctx.out.join("mixing.json"))?;
    let mut entries = Vec::new();
    for name in [
        "dichotomy.json",
        "certificate.json",
        "simulation.json",
        "density.json",
        "mixing.json",
    ] {
        let path = ctx.out.join(name);
        if !path.exists() {
            continue;
        }
        let w: WithChecks = read_json(&path)?;
        entries.extend(w.checks.into_iter().map(|check| ReportEntry {
            artifact: name.to_string(),
            check,
        }));
    }
    let all_pass = entries.iter().all(|e| e.check.pass);
    let checks: Vec<Check> = entries.iter().map(|e| e.check.clone()).collect();
    let rep = Report {
        config_hash: ctx.cfg.hash(),
        gamma0: cert.gamma0,
        gammas: cert.gammas,
        tv_spread: cert.conditions.tv.map(|t| t.worst_spread),
        mixing_gamma: mix.mixing.gamma,
        mixing_r_squared: mix.mixing.r_squared,
        envelope_violations: sim.envelope_violations,
        boundary_slope: dens.boundary.map(|b| b.slope),
        entries,
        all_pass,
    };
    Ok((vec![write_json(ctx.out, "report", &rep)?], checks))
}

#[cfg(test)]
mod tests {
    use super::*;
    use stabilab::density::build_pi_decomposition;

    #[test]
    fn prerequisites_come_from_earlier_stages() {
        let produced = |s: Stage| -> &'static [&'static str] {
            match s {
                Stage::Synth => &["model.json"],
                Stage::Dichotomy => &["dichotomy.json"],
                Stage::Certify => &["certificate.json"],
                Stage::Simulate => &["simulation.json"],
                Stage::Density => &["density.json"],
                Stage::Mixing => &["mixing.json"],
                Stage::Report => &[],
            }
        };
        for (i, stage) in Stage::ALL.iter().enumerate() {
            for need in stage.prerequisites() {
                assert!(Stage::ALL[..i].iter().any(|s| produced(*s).contains(need)), "{need}");
            }
        }
    }

    #[test]
    fn undefined_check_values_roundtrip_as_nan() {
        let check = Check::new("fit", f64::NAN, false);
        let text = serde_json::to_string(&check).unwrap();
        assert!(text.contains("null"));
        let back: Check = serde_json::from_str(&text).unwrap();
        assert!(back.value.is_nan());
        let fine: Check = serde_json::from_str(r#"{"name":"x","value":1.5,"pass":true}"#).unwrap();
        assert_eq!(fine, Check::new("x", 1.5, true));
    }

    #[test]
    fn outcome_passes_only_when_all_checks_pass() {
        let mut o = StageOutcome {
            stage: Stage::Synth,
            artifacts: vec![],
            checks: vec![Check::new("a", 0.0, true)],
        };
        assert!(o.passed());
        o.checks.push(Check::new("b", 1.0, false));
        assert!(!o.passed());
    }

    #[test]
    fn deep_burn_in_reaches_the_floor() {
        let (eps, w0, g) = (0.01, 0.5, 0.7);
        let k = deep_burn_in(eps, w0, g);
        assert!(w0 * g.powi(k as i32) <= 1e-3 * eps * (1.0 + 1e-12));
        assert!(w0 * g.powi(k as i32 - 1) > 1e-3 * eps);
    }

    #[test]
    fn interior_grid_stays_inside() {
        let cfg = ExperimentConfig::from_json(r#"{"kick": {"eps_hat": 0.01}}"#).unwrap();
        let c = Components::build(&cfg).unwrap();
        let (alpha, _) = density_setting(&cfg, &c).unwrap();
        let dec = build_pi_decomposition(&alpha);
        let eps = 0.3;
        let grid = interior_grid(&dec, eps, 10, 1);
        assert_eq!(grid.len(), 10);
        for x in grid {
            let q = (x.transpose() * &dec.n_mat * &x)[(0, 0)];
            assert!(q <= (0.8 * eps).powi(2) * (1.0 + 1e-12));
        }
    }
}
