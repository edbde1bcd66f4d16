//! Monte Carlo study harness: data generation, error metrics, and
//! multi-run reports.
//!
//! Curves follow a 50-term Fourier expansion around `μ(u) = sin(πu)` with
//! Gaussian scores, an optional covariate channel defined by an integral
//! kernel over the first two basis functions (evaluated exactly through the
//! basis coefficients), i.i.d. measurement noise on an equispaced grid, and
//! test curves observed only on `[0, D]` with a random cutoff `D`.
//!
//! Randomness is fully reproducible: run `b` derives its seed as
//! `config.seed + b`, and every variate comes from its own ChaCha20 stream
//! keyed by `(kind, curve, index)` through a Box-Muller transform, so a
//! value never depends on how many draws happened before it. Test-curve
//! streams are keyed by test ordinal rather than dataset row, which makes
//! the test curves (and their cutoffs) identical across different training
//! sizes; comparisons over `T_C` or the grid size then run on common
//! random numbers.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2};
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bands::{fit_band_model, BandError, BandOptions, PredictionBand};
use crate::dataset::{DatasetError, FunctionalDataset, Grid};
use crate::recon::{ReconError, Reconstructor};
use crate::selection::{cv_rank, empirical_weights, SelectionError};

/// Number of Karhunen-Loève components in the generated target.
pub const N_COMPONENTS: usize = 50;

/// Coefficients of the covariate kernel on the first two basis functions,
/// row-major: `(b_11, b_12, b_21, b_22)`.
pub const KERNEL_B: [f64; 4] = [1.1, 0.7, 0.5, 0.3];

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error("truth is {t_rows}x{t_cols} but reconstruction is {r_rows}x{r_cols}")]
    Shape { t_rows: usize, t_cols: usize, r_rows: usize, r_cols: usize },
    #[error("run {run} failed: {source}")]
    Run { run: usize, source: Box<SimError> },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Recon(#[from] ReconError),
    #[error(transparent)]
    Selection(#[from] SelectionError),
    #[error(transparent)]
    Bands(#[from] BandError),
}

/// Eigenvalue decay of the score variances `λ_k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EigenDecay {
    /// `λ_k = e^{-k}`.
    Exponential,
    /// `λ_k = k^{-3}/2`.
    Polynomial,
}

impl EigenDecay {
    /// Score variance of component `k` (1-based).
    pub fn lambda(&self, k: usize) -> f64 {
        match self {
            EigenDecay::Exponential => (-(k as f64)).exp(),
            EigenDecay::Polynomial => (k as f64).powi(-3) / 2.0,
        }
    }
}

/// Distribution of the observation cutoff `D` of test curves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Setting {
    /// `D ~ U(1/2, 3/4)`: longer observed stretches.
    A,
    /// `D ~ U(1/4, 3/4)`: shorter observed stretches.
    B,
}

impl Setting {
    pub fn cutoff_bounds(&self) -> (f64, f64) {
        match self {
            Setting::A => (0.5, 0.75),
            Setting::B => (0.25, 0.75),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub eigen_decay: EigenDecay,
    /// Measurement noise standard deviation (both channels).
    pub sigma_e: f64,
    /// Number of fully observed training curves.
    pub t_complete: usize,
    /// Number of partially observed test curves.
    pub n_test: usize,
    pub n_grid: usize,
    pub setting: Setting,
    pub n_runs: usize,
    pub seed: u64,
    /// Generate and stack the covariate channel.
    pub use_covariate: bool,
    /// Band level; when set, studies also report coverage.
    pub alpha: Option<f64>,
}

impl SimulationConfig {
    /// Benchmark defaults; callers override the axes under study.
    pub fn new(eigen_decay: EigenDecay, sigma_e: f64, t_complete: usize, setting: Setting) -> Self {
        SimulationConfig {
            eigen_decay,
            sigma_e,
            t_complete,
            n_test: 50,
            n_grid: 51,
            setting,
            n_runs: 100,
            seed: 0,
            use_covariate: true,
            alpha: None,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !self.sigma_e.is_finite() || self.sigma_e < 0.0 {
            return Err(SimError::InvalidConfig(format!(
                "sigma_e must be finite and non-negative, got {}",
                self.sigma_e
            )));
        }
        if self.t_complete < 10 {
            return Err(SimError::InvalidConfig(format!(
                "t_complete must be at least 10, got {}",
                self.t_complete
            )));
        }
        if self.n_grid < 3 {
            return Err(SimError::InvalidConfig(format!(
                "n_grid must be at least 3, got {}",
                self.n_grid
            )));
        }
        if self.n_test == 0 {
            return Err(SimError::InvalidConfig("n_test must be positive".into()));
        }
        if self.n_runs == 0 {
            return Err(SimError::InvalidConfig("n_runs must be positive".into()));
        }
        if let Some(a) = self.alpha {
            if !(a > 0.0 && a < 1.0) {
                return Err(SimError::InvalidConfig(format!(
                    "alpha must lie in (0, 1), got {a}"
                )));
            }
        }
        Ok(())
    }
}

/// Noiseless test-curve values, `n_test × n_grid`.
///
/// A separate type so truth cannot be handed to dataset construction or any
/// fitting routine by accident; it exists only to score reconstructions.
#[derive(Debug, Clone)]
pub struct TruthMatrix(Array2<f64>);

impl TruthMatrix {
    pub fn nrows(&self) -> usize {
        self.0.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.0.ncols()
    }

    /// Read-only view for metrics and plots. Keep it out of anything that
    /// feeds an estimator.
    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    /// Per-curve supremum of the absolute grid error.
    pub fn sup_errors(&self, recon: &ArrayView2<f64>) -> Result<Vec<f64>, SimError> {
        if recon.dim() != self.0.dim() {
            return Err(SimError::Shape {
                t_rows: self.0.nrows(),
                t_cols: self.0.ncols(),
                r_rows: recon.nrows(),
                r_cols: recon.ncols(),
            });
        }
        Ok((0..self.0.nrows())
            .map(|l| {
                (0..self.0.ncols())
                    .map(|i| (self.0[(l, i)] - recon[(l, i)]).abs())
                    .fold(0.0f64, f64::max)
            })
            .collect())
    }

    /// Whether the band covers this curve's truth at every missing point.
    pub fn band_covered(&self, curve: usize, band: &PredictionBand) -> bool {
        band.missing.iter().enumerate().all(|(j, &i)| {
            let x = self.0[(curve, i)];
            band.lower[j] <= x && x <= band.upper[j]
        })
    }
}

/// Mean over test curves of the per-curve sup grid error.
pub fn mae(truth: &TruthMatrix, recon: &ArrayView2<f64>) -> Result<f64, SimError> {
    let sups = truth.sup_errors(recon)?;
    Ok(sups.iter().sum::<f64>() / sups.len() as f64)
}

/// One generated sample: a dataset holding the complete training curves
/// followed by the masked test curves, plus tainted truth for scoring.
pub struct GeneratedSample {
    /// Rows `0..t_complete` are complete; rows `t_complete..` are test
    /// curves with the target masked beyond their cutoff.
    pub data: FunctionalDataset,
    pub test_truth: TruthMatrix,
    /// Dataset row indices of the test curves, ascending.
    pub test_rows: Vec<usize>,
    /// Observation cutoffs `D` of the test curves.
    pub cutoffs: Vec<f64>,
}

// Stream kinds. Test curves use ordinal-keyed kinds so their draws do not
// depend on `t_complete`.
const S_TRAIN_SCORE: u64 = 0;
const S_TRAIN_NOISE_TARGET: u64 = 1;
const S_TRAIN_NOISE_COV: u64 = 2;
const S_CUTOFF: u64 = 3;
const S_TEST_SCORE: u64 = 4;
const S_TEST_NOISE_TARGET: u64 = 5;
const S_TEST_NOISE_COV: u64 = 6;

fn stream_id(kind: u64, curve: u64, index: u64) -> u64 {
    debug_assert!(kind < 1 << 8 && curve < 1 << 40 && index < 1 << 16);
    (kind << 56) | (curve << 16) | index
}

/// Uniform in the open interval (0, 1) from 53 high bits.
fn unit_open(bits: u64) -> f64 {
    ((bits >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

/// One standard normal from a dedicated stream (Box-Muller, cosine branch).
fn standard_normal(seed: u64, stream: u64) -> f64 {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let u1 = unit_open(rng.next_u64());
    let u2 = unit_open(rng.next_u64());
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// One uniform on `[lo, hi)` from a dedicated stream.
fn uniform_on(seed: u64, stream: u64, lo: f64, hi: f64) -> f64 {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    lo + (hi - lo) * unit_open(rng.next_u64())
}

/// Basis function `φ_k` (1-based): `φ_{2ℓ-1} = √2 sin(2ℓπu)`,
/// `φ_{2ℓ} = √2 cos(2ℓπu)`.
pub fn basis_value(k: usize, u: f64) -> f64 {
    let l = k.div_ceil(2) as f64;
    let arg = 2.0 * l * std::f64::consts::PI * u;
    if k % 2 == 1 {
        std::f64::consts::SQRT_2 * arg.sin()
    } else {
        std::f64::consts::SQRT_2 * arg.cos()
    }
}

/// Mean function `μ(u) = sin(πu)`.
pub fn mean_function(u: f64) -> f64 {
    (std::f64::consts::PI * u).sin()
}

/// Basis coefficients of `μ`: `⟨μ, φ_1⟩ = 0` and
/// `⟨μ, φ_2⟩ = -2√2/(3π)` (the sine mean is not orthogonal to the first
/// cosine), needed for the exact covariate map.
pub const MU_COEFFS: [f64; 2] = [0.0, -2.0 * std::f64::consts::SQRT_2 / (3.0 * std::f64::consts::PI)];

/// Covariate basis coefficients `(a_1, a_2)` of a target whose first two
/// basis coefficients (including the mean's share) are `c_1, c_2`: the
/// integral kernel reduces to a 2×2 map by orthonormality.
fn covariate_coefficients(c1: f64, c2: f64) -> (f64, f64) {
    (KERNEL_B[0] * c1 + KERNEL_B[1] * c2, KERNEL_B[2] * c1 + KERNEL_B[3] * c2)
}

/// Generate the sample of run `run_index`: `t_complete` complete curves,
/// `n_test` test curves masked beyond their cutoff (the boundary point
/// `u = D` counts as observed), both channels measured with noise.
pub fn generate_sample(
    config: &SimulationConfig,
    run_index: usize,
) -> Result<GeneratedSample, SimError> {
    config.validate()?;
    let seed = config.seed.wrapping_add(run_index as u64);
    let n = config.n_grid;
    let grid = Grid::equispaced(n)?;
    let points: Vec<f64> = grid.points().to_vec();
    let n_curves = config.t_complete + config.n_test;

    let phi = Array2::from_shape_fn((N_COMPONENTS, n), |(k, i)| basis_value(k + 1, points[i]));
    let sqrt_lambda: Vec<f64> =
        (1..=N_COMPONENTS).map(|k| config.eigen_decay.lambda(k).sqrt()).collect();
    let (lo, hi) = config.setting.cutoff_bounds();

    let mut target = Array2::zeros((n_curves, n));
    let mut covariate = Array2::zeros((n_curves, n));
    let mut mask = Array2::from_elem((n_curves, n), true);
    let mut truth = Array2::zeros((config.n_test, n));
    let mut cutoffs = Vec::with_capacity(config.n_test);

    for t in 0..n_curves {
        let test_ordinal = t.checked_sub(config.t_complete);
        let (score_kind, tn_kind, cn_kind, id) = match test_ordinal {
            Some(l) => (S_TEST_SCORE, S_TEST_NOISE_TARGET, S_TEST_NOISE_COV, l as u64),
            None => (S_TRAIN_SCORE, S_TRAIN_NOISE_TARGET, S_TRAIN_NOISE_COV, t as u64),
        };
        let xi: Vec<f64> = (0..N_COMPONENTS)
            .map(|k| sqrt_lambda[k] * standard_normal(seed, stream_id(score_kind, id, k as u64)))
            .collect();
        let (a1, a2) = covariate_coefficients(MU_COEFFS[0] + xi[0], MU_COEFFS[1] + xi[1]);
        for i in 0..n {
            let mut x0 = mean_function(points[i]);
            for k in 0..N_COMPONENTS {
                x0 += xi[k] * phi[(k, i)];
            }
            let x1 = a1 * phi[(0, i)] + a2 * phi[(1, i)];
            target[(t, i)] = x0
                + config.sigma_e * standard_normal(seed, stream_id(tn_kind, id, i as u64));
            covariate[(t, i)] = x1
                + config.sigma_e * standard_normal(seed, stream_id(cn_kind, id, i as u64));
            if let Some(l) = test_ordinal {
                truth[(l, i)] = x0;
            }
        }
        if let Some(l) = test_ordinal {
            let d = uniform_on(seed, stream_id(S_CUTOFF, l as u64, 0), lo, hi);
            cutoffs.push(d);
            for i in 0..n {
                if points[i] > d {
                    mask[(t, i)] = false;
                }
            }
        }
    }

    let channels = if config.use_covariate { vec![covariate] } else { vec![] };
    let data = FunctionalDataset::new(grid, target, mask, channels)?;
    Ok(GeneratedSample {
        data,
        test_truth: TruthMatrix(truth),
        test_rows: (config.t_complete..n_curves).collect(),
        cutoffs,
    })
}

/// Coverage numbers of one band level across runs.
#[derive(Debug, Clone, Serialize)]
pub struct CoverageSummary {
    pub alpha: f64,
    /// Per-run fraction of test curves fully covered on their missing set.
    pub per_run: Vec<f64>,
    pub mean: f64,
    pub sd: f64,
}

/// Aggregated study results.
#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub config: SimulationConfig,
    pub mae_per_run: Vec<f64>,
    pub mae_mean: f64,
    /// Population-style standard deviation (1/B) of the per-run errors.
    pub mae_sd: f64,
    /// One entry per requested band level; empty when no bands were built.
    pub coverage: Vec<CoverageSummary>,
    /// Range of cross-validated ranks chosen across runs and patterns.
    pub rank_low: usize,
    pub rank_high: usize,
    /// Range of the rank-search caps actually used (they depend on each
    /// pattern's observed column count).
    pub r_max_low: usize,
    pub r_max_high: usize,
}

struct RunOutcome {
    mae: f64,
    covered: Vec<f64>,
    rank_low: usize,
    rank_high: usize,
    r_max_low: usize,
    r_max_high: usize,
}

/// Run the full study of `config`: per run, generate a sample, pick a rank
/// by 5-fold cross-validation per distinct observation pattern, reconstruct
/// every test curve, and score the mean sup error; with `config.alpha` set,
/// also calibrate bands and record coverage.
pub fn run_study(config: &SimulationConfig) -> Result<RunReport, SimError> {
    let levels: Vec<f64> = config.alpha.into_iter().collect();
    run_study_levels(config, &levels)
}

/// Like [`run_study`] but with any number of band levels sharing one
/// calibration per pattern (the standardized residual sample does not
/// depend on the level).
pub fn run_study_levels(config: &SimulationConfig, levels: &[f64]) -> Result<RunReport, SimError> {
    config.validate()?;
    for &a in levels {
        if !(a > 0.0 && a < 1.0) {
            return Err(SimError::InvalidConfig(format!("alpha must lie in (0, 1), got {a}")));
        }
    }
    let outcomes: Vec<RunOutcome> = (0..config.n_runs)
        .into_par_iter()
        .map(|b| {
            run_one(config, b, levels)
                .map_err(|e| SimError::Run { run: b, source: Box::new(e) })
        })
        .collect::<Result<_, _>>()?;

    // Ordered reduction: run index order, independent of thread schedule.
    let b = config.n_runs as f64;
    let mae_per_run: Vec<f64> = outcomes.iter().map(|o| o.mae).collect();
    let mae_mean = mae_per_run.iter().sum::<f64>() / b;
    let mae_sd =
        (mae_per_run.iter().map(|m| (m - mae_mean) * (m - mae_mean)).sum::<f64>() / b).sqrt();
    let coverage = levels
        .iter()
        .enumerate()
        .map(|(j, &alpha)| {
            let per_run: Vec<f64> = outcomes.iter().map(|o| o.covered[j]).collect();
            let mean = per_run.iter().sum::<f64>() / b;
            let sd =
                (per_run.iter().map(|c| (c - mean) * (c - mean)).sum::<f64>() / b).sqrt();
            CoverageSummary { alpha, per_run, mean, sd }
        })
        .collect();
    Ok(RunReport {
        config: config.clone(),
        mae_per_run,
        mae_mean,
        mae_sd,
        coverage,
        rank_low: outcomes.iter().map(|o| o.rank_low).min().unwrap(),
        rank_high: outcomes.iter().map(|o| o.rank_high).max().unwrap(),
        r_max_low: outcomes.iter().map(|o| o.r_max_low).min().unwrap(),
        r_max_high: outcomes.iter().map(|o| o.r_max_high).max().unwrap(),
    })
}

fn run_one(config: &SimulationConfig, b: usize, levels: &[f64]) -> Result<RunOutcome, SimError> {
    let sample = generate_sample(config, b)?;
    let weights = empirical_weights(&sample.data)?;
    let recon = Reconstructor::new(&sample.data, weights.as_slice().to_vec())?;
    let cv_seed = config.seed.wrapping_add(b as u64);

    // Group test curves by observation pattern; cutoffs quantize to the
    // grid, so collisions are common and share one rank choice and fit.
    let mut groups: BTreeMap<Vec<bool>, Vec<usize>> = BTreeMap::new();
    for &row in &sample.test_rows {
        let pattern = sample.data.pattern_of(row)?;
        groups.entry(pattern.observed().to_vec()).or_default().push(row);
    }

    let n = config.n_grid;
    let mut recon_matrix = Array2::zeros((config.n_test, n));
    let mut covered_counts = vec![0usize; levels.len()];
    let mut rank_low = usize::MAX;
    let mut rank_high = 0usize;
    let mut r_max_low = usize::MAX;
    let mut r_max_high = 0usize;

    for (observed, rows) in &groups {
        let pattern = crate::dataset::ObservationPattern::new(observed.clone());
        let report = cv_rank(&sample.data, &pattern, &weights, None, 5, cv_seed)?;
        let rank = report.chosen_rank;
        rank_low = rank_low.min(rank);
        rank_high = rank_high.max(rank);
        r_max_low = r_max_low.min(report.r_max);
        r_max_high = r_max_high.max(report.r_max);

        for &row in rows {
            let rec = recon.reconstruct(row, rank)?;
            let l = row - config.t_complete;
            for i in 0..n {
                recon_matrix[(l, i)] = rec.grid_values[i];
            }
        }

        if !levels.is_empty() {
            let base = fit_band_model(
                &sample.data,
                &pattern,
                rank,
                &weights,
                levels[0],
                &BandOptions::default(),
            )?;
            for (j, &alpha) in levels.iter().enumerate() {
                let model = if j == 0 { base.clone() } else { base.with_alpha(alpha)? };
                for &row in rows {
                    let l = row - config.t_complete;
                    let center: Vec<f64> =
                        model.missing.iter().map(|&i| recon_matrix[(l, i)]).collect();
                    let band = model.band(&center)?;
                    if sample.test_truth.band_covered(l, &band) {
                        covered_counts[j] += 1;
                    }
                }
            }
        }
    }

    let mae = mae(&sample.test_truth, &recon_matrix.view())?;
    let covered = covered_counts
        .iter()
        .map(|&c| c as f64 / config.n_test as f64)
        .collect();
    Ok(RunOutcome { mae, covered, rank_low, rank_high, r_max_low, r_max_high })
}
