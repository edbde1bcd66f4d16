//! Simultaneous prediction bands around reconstructed missing fragments.
//!
//! Each complete curve is smoothed by a natural cubic smoothing spline,
//! masked to the query pattern, and reconstructed; the differences between
//! smoothed and reconstructed values on the missing grid points yield a
//! pointwise scale `ω̂(u)` and standardized suprema `ζ̂_t`. The empirical
//! `(1-α)`-quantile `q̂_α` of the suprema then turns any reconstruction into
//! a band `center ± q̂_α·ω̂(u)` that covers the whole missing fragment with
//! probability about `1-α`.
//!
//! By default the curve being residualized is excluded from its own factor
//! fit (leave-one-out), so the residuals mimic out-of-sample reconstruction
//! error; [`BandOptions::leave_in`] switches to the cheaper in-sample
//! variant.

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{ChannelMeans, DatasetError, FunctionalDataset, Grid, ObservationPattern};
use crate::engine::{take_columns, GramEigen, GramPair};
use crate::linalg::LinalgError;
use crate::recon::{ReconError, Reconstructor};
use crate::selection::WeightVector;

/// Lower bound on the pointwise residual scale.
pub const OMEGA_FLOOR: f64 = 1e-8;

/// Number of rungs of the fixed smoothing-penalty ladder.
const LADDER_LEN: usize = 25;

#[derive(Debug, Error)]
pub enum BandError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Recon(#[from] ReconError),
    #[error("smoothing system lost positive definiteness at row {row} (pivot {pivot:.3e})")]
    Numerical { row: usize, pivot: f64 },
    #[error("input length {got} does not match the grid length {expected}")]
    InputLength { expected: usize, got: usize },
    #[error("residual scales need at least {need} curves, found {found}")]
    TooFewCurves { need: usize, found: usize },
    #[error("alpha must lie strictly inside (0, 1), got {0}")]
    AlphaRange(f64),
    #[error("quantile of an empty sample")]
    EmptySamples,
    #[error("pattern has no missing grid points; nothing to band")]
    NoMissing,
    #[error("band center has {got} values, expected {expected} missing points")]
    CenterLength { expected: usize, got: usize },
}

/// Residual-based band calibration for one observation pattern.
///
/// Reusable across curves sharing the pattern and, via [`with_alpha`], across
/// levels: the `ζ̂` sample is level-independent.
///
/// [`with_alpha`]: BandModel::with_alpha
#[derive(Debug, Clone, Serialize)]
pub struct BandModel {
    /// Grid indices of the missing points the band lives on.
    pub missing: Vec<usize>,
    missing_u: Vec<f64>,
    /// Pointwise residual scale on the missing points, floored at
    /// [`OMEGA_FLOOR`].
    pub omega_hat: Vec<f64>,
    /// Mean residual curve on the missing points.
    pub z_bar: Vec<f64>,
    /// Standardized residual suprema, one per complete curve.
    pub zeta_samples: Vec<f64>,
    /// Empirical `(1-α)`-quantile of `zeta_samples`.
    pub q_alpha_hat: f64,
    pub alpha: f64,
}

/// A calibrated band around one reconstruction, on the missing grid points.
#[derive(Debug, Clone, Serialize)]
pub struct PredictionBand {
    pub missing: Vec<usize>,
    pub lower: Vec<f64>,
    pub center: Vec<f64>,
    pub upper: Vec<f64>,
}

/// Band construction switches.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct BandOptions {
    /// Keep each curve inside its own factor fit when residualizing.
    #[serde(default)]
    pub leave_in: bool,
}

impl BandModel {
    /// Same calibration at a different level.
    pub fn with_alpha(&self, alpha: f64) -> Result<BandModel, BandError> {
        let q_alpha_hat = empirical_quantile(&self.zeta_samples, alpha)?;
        Ok(BandModel { q_alpha_hat, alpha, ..self.clone() })
    }

    /// Band around a reconstruction given by its values on the missing
    /// points, in pattern order.
    pub fn band(&self, center: &[f64]) -> Result<PredictionBand, BandError> {
        if center.len() != self.missing.len() {
            return Err(BandError::CenterLength {
                expected: self.missing.len(),
                got: center.len(),
            });
        }
        let half: Vec<f64> = self.omega_hat.iter().map(|&w| self.q_alpha_hat * w).collect();
        Ok(PredictionBand {
            missing: self.missing.clone(),
            lower: center.iter().zip(&half).map(|(c, h)| c - h).collect(),
            center: center.to_vec(),
            upper: center.iter().zip(&half).map(|(c, h)| c + h).collect(),
        })
    }

    /// Residual scale at an arbitrary point, linearly interpolated between
    /// missing grid points and clamped to the end values outside their span.
    pub fn omega_at(&self, u: f64) -> f64 {
        let us = &self.missing_u;
        if u <= us[0] {
            return self.omega_hat[0];
        }
        if u >= us[us.len() - 1] {
            return self.omega_hat[us.len() - 1];
        }
        let j = us.partition_point(|&x| x <= u) - 1;
        let frac = (u - us[j]) / (us[j + 1] - us[j]);
        self.omega_hat[j] + frac * (self.omega_hat[j + 1] - self.omega_hat[j])
    }
}

/// Calibrate a band model for a pattern at rank `rank`.
///
/// Needs at least 3 complete curves; each is smoothed, masked to the
/// pattern, reconstructed (without itself unless `options.leave_in`), and
/// residualized on the missing points.
pub fn fit_band_model(
    ds: &FunctionalDataset,
    pattern: &ObservationPattern,
    rank: usize,
    weights: &WeightVector,
    alpha: f64,
    options: &BandOptions,
) -> Result<BandModel, BandError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(BandError::AlphaRange(alpha));
    }
    let missing = pattern.missing_indices();
    if missing.is_empty() {
        return Err(BandError::NoMissing);
    }
    let complete = ds.complete_indices()?;
    if complete.len() < 3 {
        return Err(BandError::TooFewCurves { need: 3, found: complete.len() });
    }
    let mut stacked = ds.assemble(pattern, weights.as_slice())?;
    let means = ChannelMeans::from_complete(ds)?;
    stacked.center_at(&means);
    let t_c = stacked.rows.len();
    let m = missing.len();
    let grid = ds.grid();
    let w0_sqrt = weights.as_slice()[0].sqrt();
    // Target mean on the missing points; predictions below live in
    // centered space and get this added back before residualizing against
    // the smoothed raw curves.
    let mean_m: Vec<f64> = missing.iter().map(|&i| means.target()[i]).collect();

    let mut smoothed = Array2::zeros((t_c, m));
    for (r, &t) in stacked.rows.iter().enumerate() {
        let raw: Vec<f64> = (0..ds.n_grid()).map(|i| ds.target()[(t, i)]).collect();
        let fit = smooth_complete(&raw, grid)?;
        for (j, &i) in missing.iter().enumerate() {
            smoothed[(r, j)] = fit[i];
        }
    }

    let target = stacked.y_complete.slice(ndarray::s![.., 0..ds.n_grid()]);
    let y_eval = take_columns(&target, &missing);
    let full = GramPair::compute(&stacked.y_observed.view(), &y_eval.view());

    let mut z = Array2::zeros((t_c, m));
    if options.leave_in {
        let eig = GramEigen::new(&full.gram.view(), rank)?;
        let loadings = eig.project_columns(&full.cross.view());
        for r in 0..t_c {
            let coef = eig.coefficients(&stacked.y_observed.row(r));
            let pred = eig.predict(&coef.view(), &loadings.view(), rank);
            for j in 0..m {
                z[(r, j)] = smoothed[(r, j)] - pred[j] / w0_sqrt - mean_m[j];
            }
        }
    } else {
        let rows: Vec<Vec<f64>> = (0..t_c)
            .into_par_iter()
            .map(|r| -> Result<Vec<f64>, BandError> {
                let down =
                    full.minus_row(&stacked.y_observed.row(r), &y_eval.row(r));
                let eig = GramEigen::new(&down.gram.view(), rank)?;
                let loadings = eig.project_columns(&down.cross.view());
                let coef = eig.coefficients(&stacked.y_observed.row(r));
                let pred = eig.predict(&coef.view(), &loadings.view(), rank);
                Ok((0..m)
                    .map(|j| smoothed[(r, j)] - pred[j] / w0_sqrt - mean_m[j])
                    .collect())
            })
            .collect::<Result<_, _>>()?;
        for (r, row) in rows.iter().enumerate() {
            for j in 0..m {
                z[(r, j)] = row[j];
            }
        }
    }

    let (omega_hat, z_bar) = residual_scale(&z)?;
    let zeta_samples: Vec<f64> = (0..t_c)
        .map(|r| {
            (0..m).map(|j| z[(r, j)].abs() / omega_hat[j]).fold(0.0, f64::max)
        })
        .collect();
    let q_alpha_hat = empirical_quantile(&zeta_samples, alpha)?;
    let missing_u: Vec<f64> = missing.iter().map(|&i| grid.points()[i]).collect();
    Ok(BandModel { missing, missing_u, omega_hat, z_bar, zeta_samples, q_alpha_hat, alpha })
}

/// Calibrate and band the reconstruction of one partially observed curve.
pub fn build_band(
    ds: &FunctionalDataset,
    curve: usize,
    rank: usize,
    weights: &WeightVector,
    alpha: f64,
    options: &BandOptions,
) -> Result<(PredictionBand, BandModel), BandError> {
    let pattern = ds.pattern_of(curve)?;
    let model = fit_band_model(ds, &pattern, rank, weights, alpha, options)?;
    let rec = Reconstructor::new(ds, weights.as_slice().to_vec())?;
    let values = rec.reconstruct_on(curve, &pattern, rank)?.grid_values;
    let center: Vec<f64> = model.missing.iter().map(|&i| values[i]).collect();
    let band = model.band(&center)?;
    Ok((band, model))
}

/// Pointwise scale and mean of a residual matrix (curves × points).
///
/// The scale is the population-form standard deviation
/// `√((1/T) Σ_t (z_t - z̄)²)`, floored at [`OMEGA_FLOOR`] so downstream
/// standardization never divides by zero.
pub fn residual_scale(residuals: &Array2<f64>) -> Result<(Vec<f64>, Vec<f64>), BandError> {
    let t = residuals.nrows();
    if t < 2 {
        return Err(BandError::TooFewCurves { need: 2, found: t });
    }
    let m = residuals.ncols();
    let mut z_bar = vec![0.0; m];
    let mut omega = vec![0.0; m];
    for j in 0..m {
        let col = residuals.column(j);
        let mean = col.sum() / t as f64;
        let ss: f64 = col.iter().map(|&z| (z - mean) * (z - mean)).sum();
        z_bar[j] = mean;
        omega[j] = (ss / t as f64).sqrt().max(OMEGA_FLOOR);
    }
    Ok((omega, z_bar))
}

/// Empirical `(1-α)`-quantile: the ascending order statistic at the 1-based
/// index `ceil((1-α)·n)`.
///
/// The index computation backs off by a relative epsilon before taking the
/// ceiling so that products like `0.95·100` land on 95 rather than being
/// pushed to 96 by floating-point excess.
pub fn empirical_quantile(samples: &[f64], alpha: f64) -> Result<f64, BandError> {
    if samples.is_empty() {
        return Err(BandError::EmptySamples);
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(BandError::AlphaRange(alpha));
    }
    let n = samples.len();
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let raw = (1.0 - alpha) * n as f64;
    let k = (raw - raw.abs() * 1e-12 - 1e-12).ceil().max(1.0) as usize;
    Ok(sorted[k.min(n) - 1])
}

/// Natural cubic smoothing spline fit with the penalty chosen by
/// generalized cross-validation over a fixed 25-rung logarithmic ladder
/// (1e-8 through 1e2).
///
/// Returns the fitted values at the grid points. Inputs shorter than 3
/// points are returned unchanged (no curvature to penalize).
pub fn smooth_complete(values: &[f64], grid: &Grid) -> Result<Vec<f64>, BandError> {
    let n = values.len();
    if n != grid.points().len() {
        return Err(BandError::InputLength { expected: grid.points().len(), got: n });
    }
    if n < 3 {
        return Ok(values.to_vec());
    }
    let h = grid.spacing();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for step in 0..LADDER_LEN {
        let lambda = 10f64.powf(-8.0 + 10.0 * step as f64 / (LADDER_LEN - 1) as f64);
        let pass = spline_pass(values, h, lambda)?;
        let denom = (n as f64 - pass.trace_s).max(f64::EPSILON);
        let score = n as f64 * pass.rss / (denom * denom);
        if best.as_ref().is_none_or(|(s, _)| score < *s) {
            best = Some((score, pass.fitted));
        }
    }
    Ok(best.unwrap().1)
}

/// Natural cubic smoothing spline at a fixed penalty `lambda ≥ 0`.
pub fn smooth_with_penalty(
    values: &[f64],
    grid: &Grid,
    lambda: f64,
) -> Result<Vec<f64>, BandError> {
    let n = values.len();
    if n != grid.points().len() {
        return Err(BandError::InputLength { expected: grid.points().len(), got: n });
    }
    if n < 3 {
        return Ok(values.to_vec());
    }
    Ok(spline_pass(values, grid.spacing(), lambda)?.fitted)
}

struct SplinePass {
    fitted: Vec<f64>,
    rss: f64,
    /// Trace of the smoother matrix mapping data to fitted values.
    trace_s: f64,
}

/// One penalized fit: minimize `Σ(y_i - f_i)² + λ∫f''²` over natural cubic
/// splines with knots at every grid point.
///
/// Second-derivative coefficients `γ` solve the pentadiagonal system
/// `(R + λQᵀQ)γ = Qᵀy`, then `f = y - λQγ`; the smoother trace follows from
/// `tr S = n - (n-2) + tr((R + λQᵀQ)⁻¹R)` using the central bands of the
/// factored system's inverse.
fn spline_pass(y: &[f64], h: f64, lambda: f64) -> Result<SplinePass, BandError> {
    let n = y.len();
    let m = n - 2;
    // Bands of A = R + λQᵀQ on an equispaced grid: R is tridiagonal with
    // diagonal 2h/3 and off-diagonal h/6; QᵀQ is the pentadiagonal
    // second-difference Gram [1, -4, 6, -4, 1]/h².
    let a0 = 2.0 * h / 3.0 + 6.0 * lambda / (h * h);
    let a1 = h / 6.0 - 4.0 * lambda / (h * h);
    let a2 = lambda / (h * h);
    let chol = PentaCholesky::factor(m, a0, a1, a2)?;

    // Right-hand side: second differences scaled by 1/h.
    let mut gamma: Vec<f64> = (0..m).map(|j| (y[j] - 2.0 * y[j + 1] + y[j + 2]) / h).collect();
    chol.solve(&mut gamma);

    let mut fitted = y.to_vec();
    let mut rss = 0.0;
    for i in 0..n {
        let mut qg = 0.0;
        if i < m {
            qg += gamma[i];
        }
        if i >= 1 && i - 1 < m {
            qg -= 2.0 * gamma[i - 1];
        }
        if i >= 2 && i - 2 < m {
            qg += gamma[i - 2];
        }
        let adj = lambda * qg / h;
        fitted[i] -= adj;
        rss += adj * adj;
    }

    let (b0, b1) = chol.inverse_central_bands();
    let mut trace_ar = 0.0;
    for i in 0..m {
        trace_ar += b0[i] * (2.0 * h / 3.0);
        if i + 1 < m {
            trace_ar += 2.0 * b1[i] * (h / 6.0);
        }
    }
    let trace_s = 2.0 + trace_ar;
    Ok(SplinePass { fitted, rss, trace_s })
}

/// `LDLᵀ` factorization of a symmetric positive definite pentadiagonal
/// Toeplitz-banded matrix, plus banded solves and the central bands of the
/// inverse.
struct PentaCholesky {
    d: Vec<f64>,
    /// `L[i][i-1]`, stored at index `i` (index 0 unused).
    l1: Vec<f64>,
    /// `L[i][i-2]`, stored at index `i` (indices 0, 1 unused).
    l2: Vec<f64>,
}

impl PentaCholesky {
    fn factor(m: usize, a0: f64, a1: f64, a2: f64) -> Result<Self, BandError> {
        let mut d = vec![0.0; m];
        let mut l1 = vec![0.0; m];
        let mut l2 = vec![0.0; m];
        for i in 0..m {
            if i >= 2 {
                l2[i] = a2 / d[i - 2];
            }
            if i >= 1 {
                let mut v = a1;
                if i >= 2 {
                    v -= l2[i] * d[i - 2] * l1[i - 1];
                }
                l1[i] = v / d[i - 1];
            }
            let mut di = a0;
            if i >= 1 {
                di -= l1[i] * l1[i] * d[i - 1];
            }
            if i >= 2 {
                di -= l2[i] * l2[i] * d[i - 2];
            }
            if !(di.is_finite() && di > 0.0) {
                return Err(BandError::Numerical { row: i, pivot: di });
            }
            d[i] = di;
        }
        Ok(PentaCholesky { d, l1, l2 })
    }

    fn solve(&self, b: &mut [f64]) {
        let m = b.len();
        for i in 0..m {
            if i >= 1 {
                b[i] -= self.l1[i] * b[i - 1];
            }
            if i >= 2 {
                b[i] -= self.l2[i] * b[i - 2];
            }
        }
        for i in 0..m {
            b[i] /= self.d[i];
        }
        for i in (0..m).rev() {
            if i + 1 < m {
                b[i] -= self.l1[i + 1] * b[i + 1];
            }
            if i + 2 < m {
                b[i] -= self.l2[i + 2] * b[i + 2];
            }
        }
    }

    /// Diagonal and first superdiagonal of the inverse.
    ///
    /// Backward recurrence on `A⁻¹ = D⁻¹L⁻¹ + (I - Lᵀ)A⁻¹`: entries of the
    /// inverse within the band depend only on already-computed entries
    /// below and to the right, so the three central bands come out in one
    /// `O(m)` sweep.
    fn inverse_central_bands(&self) -> (Vec<f64>, Vec<f64>) {
        let m = self.d.len();
        let mut b0 = vec![0.0; m];
        let mut b1 = vec![0.0; m];
        let mut b2 = vec![0.0; m];
        for i in (0..m).rev() {
            let l1n = if i + 1 < m { self.l1[i + 1] } else { 0.0 };
            let l2n = if i + 2 < m { self.l2[i + 2] } else { 0.0 };
            if i + 2 < m {
                b2[i] = -l1n * b1[i + 1] - l2n * b0[i + 2];
            }
            if i + 1 < m {
                b1[i] = -l1n * b0[i + 1] - l2n * b1[i + 1];
            }
            b0[i] = 1.0 / self.d[i] - l1n * b1[i] - l2n * b2[i];
        }
        (b0, b1)
    }
}
