//! Empirical checks of the ergodic behaviour of the controlled process:
//! hypotheses (contraction, tail constants, TV-Lipschitz density) and
//! conclusions (exponential mixing, law of large numbers, stationary
//! moments).

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::density::{build_pi_decomposition, extract_alpha, tv_lipschitz_ratio, QuadSpec, TvQuad};
use crate::dichotomy::{contraction_certificate, Dichotomy};
use crate::error::{Error, Result};
use crate::feedback::FeedbackProjector;
use crate::kick::{KickLaw, KickSampler, ProjectedLaw};
use crate::ladder::{tail_contraction, SigmaLadder};
use crate::linalg;
use crate::model::OseenModel;
use crate::rds::{linear_fit, run_ensemble, ControlledSystem};

pub const N_LINEAR: usize = 20;
pub const N_RADIAL: usize = 10;
pub const N_BATCHES: usize = 30;
/// 97.5% quantile of Student's t with 29 degrees of freedom.
pub const T_975_29: f64 = 2.045_229_642_132_703;

/// A 1-Lipschitz test function with values in `[−1, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Observable {
    /// `clip(⟨u, w⟩)` with `‖u‖ = 1`.
    Linear { u: Vec<f64> },
    /// `clip(a − ‖w − c‖)`.
    Radial { a: f64, c: Vec<f64> },
}

impl Observable {
    pub fn eval(&self, w: &DVector<f64>) -> f64 {
        let raw = match self {
            Observable::Linear { u } => u.iter().zip(w.iter()).map(|(a, b)| a * b).sum::<f64>(),
            Observable::Radial { a, c } => a - c.iter().zip(w.iter()).map(|(c, w)| (w - c).powi(2)).sum::<f64>().sqrt(),
        };
        raw.clamp(-1.0, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservableSet {
    pub observables: Vec<Observable>,
    pub seed: u64,
    /// Length scale used for the radial centres and radii.
    pub scale: f64,
}

impl ObservableSet {
    /// Linear directions and radial centres drawn inside the span of
    /// `basis` (orthonormal columns), radial centres and radii at `scale`.
    pub fn standard(basis: &DMatrix<f64>, scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = basis.ncols();
        let gauss = |rng: &mut ChaCha8Rng| basis * DVector::from_fn(r, |_, _| rng.sample::<f64, _>(StandardNormal));
        let mut observables = Vec::with_capacity(N_LINEAR + N_RADIAL);
        for _ in 0..N_LINEAR {
            let u = gauss(&mut rng).normalize();
            observables.push(Observable::Linear {
                u: u.as_slice().to_vec(),
            });
        }
        for _ in 0..N_RADIAL {
            let c = gauss(&mut rng).normalize() * (scale * rng.random::<f64>());
            let a = scale * (0.5 + rng.random::<f64>());
            observables.push(Observable::Radial {
                a,
                c: c.as_slice().to_vec(),
            });
        }
        Self {
            observables,
            seed,
            scale,
        }
    }

    pub fn len(&self) -> usize {
        self.observables.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observables.is_empty()
    }

    pub fn eval_all(&self, w: &DVector<f64>) -> Vec<f64> {
        self.observables.iter().map(|f| f.eval(w)).collect()
    }
}

/// TV-Lipschitz ratios of the projected density over random pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TvStability {
    pub scales: Vec<f64>,
    /// `ratios[p][s]` for pair `p` at separation `scales[s]`.
    pub ratios: Vec<Vec<f64>>,
    pub max_ratio: f64,
    /// Largest max/min ratio across scales for a single pair.
    pub worst_spread: f64,
    pub bounded: bool,
}

/// Ratios for `n_pairs` random directions at each separation in `scales`.
/// Bounded means every pair varies by less than a factor 2 across scales.
pub fn tv_stability(
    alpha: &DMatrix<f64>,
    law: &KickLaw,
    n_pairs: usize,
    scales: &[f64],
    seed: u64,
    quad: &QuadSpec,
    tv: &TvQuad,
) -> Result<TvStability> {
    let dec = build_pi_decomposition(alpha);
    let nm = dec.nm;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pairs: Vec<(DVector<f64>, DVector<f64>)> = (0..n_pairs)
        .map(|_| {
            let v1 = DVector::from_fn(nm, |_, _| rng.sample::<f64, _>(StandardNormal)) * (0.1 * law.eps_hat);
            let dir = DVector::from_fn(nm, |_, _| rng.sample::<f64, _>(StandardNormal)).normalize();
            (v1, dir)
        })
        .collect();
    let mut ratios = Vec::with_capacity(n_pairs);
    for (v1, dir) in &pairs {
        let row = scales
            .iter()
            .map(|&s| tv_lipschitz_ratio(&dec, law, v1, &(v1 + dir * s), quad, tv))
            .collect::<Result<Vec<f64>>>()?;
        ratios.push(row);
    }
    let max_ratio = ratios.iter().flatten().fold(0.0f64, |a, &b| a.max(b));
    let worst_spread = ratios
        .iter()
        .map(|row| {
            let hi = row.iter().fold(0.0f64, |a, &b| a.max(b));
            let lo = row.iter().fold(f64::INFINITY, |a, &b| a.min(b));
            hi / lo
        })
        .fold(1.0f64, f64::max);
    Ok(TvStability {
        scales: scales.to_vec(),
        ratios,
        max_ratio,
        worst_spread,
        bounded: max_ratio.is_finite() && worst_spread < 2.0,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub gamma0: f64,
    pub contraction_pass: bool,
    pub gammas: Vec<f64>,
    pub tail_pass: bool,
    pub degenerate_kick: bool,
    /// `None` when the kick law is degenerate.
    pub tv: Option<TvStability>,
    pub tv_pass: Option<bool>,
    pub all_pass: bool,
}

/// Settings for the TV part of [`condition_check`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TvCheck {
    /// Ladder level whose projection is tested.
    pub level: usize,
    /// Cap on the between-level modes kept in the projection.
    pub max_between: usize,
    pub n_pairs: usize,
    /// Separations as multiples of `ε̂`.
    pub rel_scales: Vec<f64>,
    pub seed: u64,
    pub quad: QuadSpec,
    pub tv: TvQuad,
}

impl Default for TvCheck {
    fn default() -> Self {
        Self {
            level: 1,
            max_between: usize::MAX,
            n_pairs: 10,
            rel_scales: vec![1e-1, 1e-2, 1e-3],
            seed: 0,
            quad: QuadSpec {
                mc_samples: Some(4000),
                ..QuadSpec::default()
            },
            tv: TvQuad {
                mc_samples: 4000,
                ..TvQuad::default()
            },
        }
    }
}

/// Contraction, tail constants and TV-Lipschitz density in one report.
pub fn condition_check(
    model: &OseenModel,
    dich: &Dichotomy,
    ladder: &SigmaLadder,
    pi: &FeedbackProjector,
    law: &KickLaw,
    tau: f64,
    tv_check: &TvCheck,
) -> Result<ConditionReport> {
    let (gamma0, contraction_pass) = contraction_certificate(dich, model, tau);
    let gammas = tail_contraction(ladder, model, tau);
    let decreasing = gammas.windows(2).all(|w| w[1] < w[0]);
    let tail_pass = !gammas.is_empty() && decreasing && *gammas.last().unwrap() < 0.5 * gamma0;
    let degenerate_kick = law.is_degenerate();
    let (tv, tv_pass) = if degenerate_kick {
        (None, None)
    } else {
        let (alpha, basis) = extract_alpha(ladder, pi, tv_check.level, tv_check.max_between);
        let proj_law = ProjectedLaw::from_basis(law, basis)?.law;
        let scales: Vec<f64> = tv_check.rel_scales.iter().map(|s| s * law.eps_hat).collect();
        let st = tv_stability(
            &alpha,
            &proj_law,
            tv_check.n_pairs,
            &scales,
            tv_check.seed,
            &tv_check.quad,
            &tv_check.tv,
        )?;
        let pass = st.bounded;
        (Some(st), Some(pass))
    };
    let all_pass = contraction_pass && tail_pass && tv_pass.unwrap_or(true);
    Ok(ConditionReport {
        gamma0,
        contraction_pass,
        gammas,
        tail_pass,
        degenerate_kick,
        tv,
        tv_pass,
        all_pass,
    })
}

/// Ensemble means of every observable at every step, reduced in chain
/// order: `means[k][j]`.
pub fn ensemble_means(
    sys: &ControlledSystem,
    w0: &[f64],
    n_chains: usize,
    n_steps: usize,
    seed: u64,
    obs: &ObservableSet,
) -> Result<Vec<Vec<f64>>> {
    let runs = run_ensemble(sys, w0, n_chains, n_steps, seed)?;
    let values: Vec<Vec<Vec<f64>>> = runs
        .par_iter()
        .map(|t| t.states.iter().map(|w| obs.eval_all(w)).collect())
        .collect();
    let mut means = vec![vec![0.0; obs.len()]; n_steps + 1];
    for chain in &values {
        for (k, row) in chain.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                means[k][j] += v;
            }
        }
    }
    for row in &mut means {
        for v in row.iter_mut() {
            *v /= n_chains as f64;
        }
    }
    Ok(means)
}

fn max_abs_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<f64> {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixingReport {
    /// `d_k`, `k = 0..n_steps`.
    pub distances: Vec<f64>,
    /// Same statistic for two independent ensembles from `w0_A`.
    pub noise: Vec<f64>,
    pub noise_floor: f64,
    /// Inclusive step range used for the fit.
    pub window: Option<(usize, usize)>,
    pub c: Option<f64>,
    pub gamma: Option<f64>,
    pub r_squared: Option<f64>,
    pub inconclusive: bool,
}

pub const MIN_CHAINS: usize = 500;
const MIN_WINDOW: usize = 5;
const FIT_START: usize = 2;

/// Distances between the laws started from `w0_a` and `w0_b` and an
/// exponential fit `d_k ≈ c γ^k`.
pub fn mixing_decay(
    sys: &ControlledSystem,
    w0_a: &[f64],
    w0_b: &[f64],
    n_chains: usize,
    n_steps: usize,
    obs: &ObservableSet,
    seed: u64,
) -> Result<MixingReport> {
    if n_chains < MIN_CHAINS {
        return Err(Error::InvalidArgument(format!("at least {MIN_CHAINS} chains required")));
    }
    // Three independent seeds derived from `seed`: A, B and a second A run
    // for the noise floor.
    let seeds: Vec<u64> = {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..3).map(|_| rng.random()).collect()
    };
    let a = ensemble_means(sys, w0_a, n_chains, n_steps, seeds[0], obs)?;
    let b = ensemble_means(sys, w0_b, n_chains, n_steps, seeds[1], obs)?;
    let a2 = ensemble_means(sys, w0_a, n_chains, n_steps, seeds[2], obs)?;
    let distances = max_abs_diff(&a, &b);
    let noise = max_abs_diff(&a, &a2);
    Ok(fit_mixing(distances, noise))
}

/// Fit over `k = 2 ..` the last step with `d_k` above three noise floors.
pub fn fit_mixing(distances: Vec<f64>, noise: Vec<f64>) -> MixingReport {
    let noise_floor = noise.iter().sum::<f64>() / noise.len().max(1) as f64;
    let last = distances.iter().rposition(|&d| d > 3.0 * noise_floor);
    let window = last
        .filter(|&l| l >= FIT_START && l - FIT_START + 1 >= MIN_WINDOW)
        .map(|l| (FIT_START, l));
    let fit = window.and_then(|(lo, hi)| {
        let pts: Vec<(f64, f64)> = (lo..=hi)
            .filter(|&k| distances[k] > 0.0)
            .map(|k| (k as f64, distances[k].ln()))
            .collect();
        linear_fit(&pts)
    });
    let (c, gamma, r_squared) = match &fit {
        Some(f) if f.r_squared > 0.9 => (Some(f.intercept.exp()), Some(f.slope.exp()), Some(f.r_squared)),
        Some(f) => (None, None, Some(f.r_squared)),
        None => (None, None, None),
    };
    MixingReport {
        distances,
        noise,
        noise_floor,
        window,
        c,
        gamma,
        r_squared,
        inconclusive: gamma.is_none(),
    }
}

/// Batch-means estimate of a mean with a 95% confidence half-width.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanCi {
    pub mean: f64,
    pub half_width: f64,
}

impl MeanCi {
    pub fn overlaps(&self, other: &MeanCi) -> bool {
        (self.mean - other.mean).abs() <= self.half_width + other.half_width
    }

    pub fn contains(&self, x: f64) -> bool {
        (self.mean - x).abs() <= self.half_width
    }
}

/// 30-batch means of a series (trailing remainder dropped).
pub fn batch_means_ci(series: &[f64]) -> MeanCi {
    let b = series.len() / N_BATCHES;
    if b == 0 {
        let mean = series.iter().sum::<f64>() / series.len().max(1) as f64;
        return MeanCi {
            mean,
            half_width: f64::INFINITY,
        };
    }
    let batches: Vec<f64> = (0..N_BATCHES)
        .map(|i| series[i * b..(i + 1) * b].iter().sum::<f64>() / b as f64)
        .collect();
    let mean = batches.iter().sum::<f64>() / N_BATCHES as f64;
    let var = batches.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (N_BATCHES - 1) as f64;
    MeanCi {
        mean,
        half_width: T_975_29 * (var / N_BATCHES as f64).sqrt(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub n: usize,
    pub observable_means: Vec<f64>,
    pub state_mean: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SllnReport {
    /// Running averages at `N = 10^j` and `2·10^j`.
    pub checkpoints: Vec<Checkpoint>,
    pub observable_ci: Vec<MeanCi>,
    pub state_ci: Vec<MeanCi>,
}

impl SllnReport {
    pub fn checkpoint(&self, n: usize) -> Option<&Checkpoint> {
        self.checkpoints.iter().find(|c| c.n == n)
    }

    /// `max_j |avg_N − avg_{2N}|` over observables.
    pub fn cauchy_gap(&self, n: usize) -> Option<f64> {
        let a = self.checkpoint(n)?;
        let b = self.checkpoint(2 * n)?;
        Some(
            a.observable_means
                .iter()
                .zip(&b.observable_means)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max),
        )
    }
}

fn is_checkpoint(n: usize) -> bool {
    let mut p = 1usize;
    while p <= n {
        if n == p || n == 2 * p {
            return true;
        }
        p *= 10;
    }
    false
}

/// Time averages along one chain of `n_steps` steps from `w0`.
pub fn slln_average(
    sys: &ControlledSystem,
    w0: &[f64],
    n_steps: usize,
    obs: &ObservableSet,
    seed: u64,
) -> Result<SllnReport> {
    let n = sys.n();
    if w0.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "w0 has {} entries, expected {n}",
            w0.len()
        )));
    }
    let mut sampler = KickSampler::new(&sys.law, seed, 0);
    let mut w = DVector::from_column_slice(w0);
    let mut obs_series = vec![Vec::with_capacity(n_steps); obs.len()];
    let mut state_series = vec![Vec::with_capacity(n_steps); n];
    let mut obs_sum = vec![0.0; obs.len()];
    let mut state_sum = DVector::zeros(n);
    let mut checkpoints = Vec::new();
    for k in 1..=n_steps {
        let phi = sampler.sample()?;
        w = sys.advance(&w, &phi);
        for (j, f) in obs.observables.iter().enumerate() {
            let v = f.eval(&w);
            obs_sum[j] += v;
            obs_series[j].push(v);
        }
        state_sum += &w;
        for i in 0..n {
            state_series[i].push(w[i]);
        }
        if is_checkpoint(k) {
            checkpoints.push(Checkpoint {
                n: k,
                observable_means: obs_sum.iter().map(|s| s / k as f64).collect(),
                state_mean: (&state_sum / k as f64).as_slice().to_vec(),
            });
        }
    }
    Ok(SllnReport {
        checkpoints,
        observable_ci: obs_series.iter().map(|s| batch_means_ci(s)).collect(),
        state_ci: state_series.iter().map(|s| batch_means_ci(s)).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationaryStats {
    pub burn_in: usize,
    pub n_samples: usize,
    pub mean: Vec<f64>,
    /// Row-major covariance.
    pub covariance: Vec<f64>,
    pub min_eigenvalue: f64,
    pub max_norm: f64,
    /// Number of post-burn-in states above the stage threshold.
    pub envelope_violations: usize,
    pub norm_histogram: Histogram,
    /// Post-burn-in states, kept for downstream statistics.
    #[serde(skip)]
    pub states: Vec<DVector<f64>>,
}

impl StationaryStats {
    pub fn covariance_matrix(&self) -> DMatrix<f64> {
        let n = self.mean.len();
        DMatrix::from_row_slice(n, n, &self.covariance)
    }

    /// Batch-means interval for the mean of `q(w)` over post-burn-in states.
    pub fn functional_ci<F: Fn(&DVector<f64>) -> f64>(&self, q: F) -> MeanCi {
        let series: Vec<f64> = self.states.iter().map(q).collect();
        batch_means_ci(&series)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

fn histogram(values: &[f64], bins: usize) -> Histogram {
    let hi = values.iter().fold(0.0f64, |a, &b| a.max(b));
    let width = if hi > 0.0 { hi / bins as f64 } else { 1.0 };
    let edges = (0..=bins).map(|i| i as f64 * width).collect();
    let mut counts = vec![0u64; bins];
    for &v in values {
        let i = ((v / width) as usize).min(bins - 1);
        counts[i] += 1;
    }
    Histogram { edges, counts }
}

/// Smallest admissible burn-in, `⌈log(ε̂/‖w0‖)/log γ0⌉` (zero once the
/// start is already inside the kick scale).
pub fn min_burn_in(eps_hat: f64, w0_norm: f64, gamma0: f64) -> usize {
    if w0_norm <= eps_hat || eps_hat == 0.0 {
        return 0;
    }
    ((eps_hat / w0_norm).ln() / gamma0.ln()).ceil().max(0.0) as usize
}

/// Post-burn-in moments along one chain started at `w0`.
pub fn stationary_stats(
    sys: &ControlledSystem,
    w0: &[f64],
    n_steps: usize,
    burn_in: usize,
    seed: u64,
) -> Result<StationaryStats> {
    let n = sys.n();
    if w0.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "w0 has {} entries, expected {n}",
            w0.len()
        )));
    }
    let mut w = DVector::from_column_slice(w0);
    let need = min_burn_in(sys.law.eps_hat, w.norm(), sys.gamma0);
    if sys.gamma0 >= 1.0 || burn_in < need {
        return Err(Error::InvalidArgument(format!(
            "burn-in {burn_in} below the required {need}"
        )));
    }
    let mut sampler = KickSampler::new(&sys.law, seed, 0);
    let r0 = sys.stage_threshold();
    let mut states = Vec::with_capacity(n_steps);
    for k in 1..=burn_in + n_steps {
        let phi = sampler.sample()?;
        w = sys.advance(&w, &phi);
        if k > burn_in {
            states.push(w.clone());
        }
    }
    let count = states.len().max(1) as f64;
    let mean = states.iter().fold(DVector::zeros(n), |acc, s| acc + s) / count;
    let mut cov = DMatrix::zeros(n, n);
    for s in &states {
        let d = s - &mean;
        cov += &d * d.transpose();
    }
    cov /= (count - 1.0).max(1.0);
    let (vals, _) = linalg::sym_eigen_desc(&cov);
    let norms: Vec<f64> = states.iter().map(|s| s.norm()).collect();
    Ok(StationaryStats {
        burn_in,
        n_samples: states.len(),
        mean: mean.as_slice().to_vec(),
        covariance: crate::dichotomy::row_major(&cov),
        min_eigenvalue: vals.last().copied().unwrap_or(0.0),
        max_norm: norms.iter().fold(0.0, |a: f64, &b| a.max(b)),
        envelope_violations: norms.iter().filter(|&&x| x > r0 + 1e-9).count(),
        norm_histogram: histogram(&norms, 32),
        states,
    })
}

/// Two-sample energy-distance test with a permutation p-value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyTest {
    pub statistic: f64,
    pub p_value: f64,
}

pub fn energy_distance_test(xs: &[DVector<f64>], ys: &[DVector<f64>], n_perm: usize, seed: u64) -> EnergyTest {
    let pooled: Vec<&DVector<f64>> = xs.iter().chain(ys).collect();
    let total = pooled.len();
    let mut dist = vec![0.0; total * total];
    for i in 0..total {
        for j in i + 1..total {
            let d = (pooled[i] - pooled[j]).norm();
            dist[i * total + j] = d;
            dist[j * total + i] = d;
        }
    }
    let nx = xs.len();
    let stat = |labels: &[usize]| {
        let (a, b) = labels.split_at(nx);
        let mean = |p: &[usize], q: &[usize]| {
            let mut s = 0.0;
            for &i in p {
                for &j in q {
                    s += dist[i * total + j];
                }
            }
            s / (p.len() * q.len()) as f64
        };
        2.0 * mean(a, b) - mean(a, a) - mean(b, b)
    };
    let mut labels: Vec<usize> = (0..total).collect();
    let observed = stat(&labels);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut exceed = 0usize;
    for _ in 0..n_perm {
        for i in (1..total).rev() {
            let j = rng.random_range(0..=i);
            labels.swap(i, j);
        }
        if stat(&labels) >= observed {
            exceed += 1;
        }
    }
    EnergyTest {
        statistic: observed,
        p_value: (exceed + 1) as f64 / (n_perm + 1) as f64,
    }
}
