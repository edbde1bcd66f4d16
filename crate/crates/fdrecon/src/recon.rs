//! Factor-model reconstruction of partially observed curves.
//!
//! The estimator fits a truncated singular value decomposition to the
//! stacked complete curves, restricted to the columns a partially observed
//! curve actually has, then transfers that curve's factor scores to the full
//! grid through a cross-sectional regression on the estimated factors. With
//! the normalization used here (`F̂ = √T_C · U`, so `F̂ᵀF̂/T_C = I`), the
//! regression collapses to `f̂ · F̂ᵀ y_c / T_C`.
//!
//! All scalings are fixed conventions: the stacked matrix is divided by
//! `√(N·T_C)` before the decomposition and scores carry a `1/√N` factor.
//! Both cancel in the composite reconstruction formula, so reconstructions
//! are invariant to them; they only pin the scale of the reported factors.
//!
//! The low-level operations ([`fit_factors`], [`project_curve`],
//! [`reconstruct_grid`]) are strictly linear in the data they are handed.
//! [`Reconstructor`] centers every channel at its complete-sample mean
//! curve before fitting and restores the target mean afterwards, which is
//! what a covariance-based expansion needs when curves share a common
//! level.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use ndarray::{Array1, Array2, ArrayView1};
use thiserror::Error;

use crate::dataset::{
    ChannelMeans, ColumnMap, DatasetError, FunctionalDataset, Grid, ObservationPattern,
    StackedMatrices,
};
use crate::linalg::{self, LinalgError, TruncatedSvd};

#[derive(Debug, Error)]
pub enum ReconError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("singular value {index} vanished at rank {rank}; rank is too high for this pattern")]
    Singular { index: usize, rank: usize },
    #[error("evaluation point {u} outside the domain [0, 1]")]
    Domain { u: f64 },
    #[error("score vector has length {got}, fit has rank {expected}")]
    ScoreLength { expected: usize, got: usize },
    #[error("partial row has length {got}, fit expects {expected} observed columns")]
    RowLength { expected: usize, got: usize },
}

/// Fitted factor model for one observation pattern.
#[derive(Debug, Clone)]
pub struct FactorFit {
    svd: TruncatedSvd,
    /// Estimated factors `√T_C · U`, one row per stacked curve.
    f_hat: Array2<f64>,
    /// Regression of the weighted target columns on the factors,
    /// `F̂ᵀ Y_target / T_C`; row `k` holds factor `k` loadings on the grid.
    beta: Array2<f64>,
    rank: usize,
    t_c: usize,
    n_grid: usize,
    pattern: ObservationPattern,
    weights: Vec<f64>,
}

impl FactorFit {
    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn n_curves(&self) -> usize {
        self.t_c
    }

    pub fn n_grid(&self) -> usize {
        self.n_grid
    }

    pub fn pattern(&self) -> &ObservationPattern {
        &self.pattern
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Estimated factor matrix, `T_C × r`.
    pub fn f_hat(&self) -> &Array2<f64> {
        &self.f_hat
    }

    pub fn singular_values(&self) -> &[f64] {
        &self.svd.d
    }
}

/// Fits a rank-`r` factor model to stacked complete curves.
///
/// The decomposition is taken of `y_observed / √(N·T_C)` with `N` the grid
/// size, matching the convention that curves, not channels, index rows.
pub fn fit_factors(stacked: &StackedMatrices, rank: usize) -> Result<FactorFit, ReconError> {
    let t_c = stacked.y_observed.nrows();
    let n_grid = stacked.column_map.n_grid();
    let scale = 1.0 / ((n_grid as f64) * (t_c as f64)).sqrt();
    let scaled = &stacked.y_observed * scale;
    let svd = linalg::truncated_svd(&scaled.view(), rank)?;
    let sqrt_tc = (t_c as f64).sqrt();
    let f_hat = &svd.u * sqrt_tc;
    // Weighted target block: complete columns 0..N.
    let target = stacked.y_complete.slice(ndarray::s![.., 0..n_grid]);
    let beta = f_hat.t().dot(&target) / t_c as f64;
    Ok(FactorFit {
        svd,
        f_hat,
        beta,
        rank,
        t_c,
        n_grid,
        pattern: stacked.pattern.clone(),
        weights: stacked.weights.clone(),
    })
}

/// Factor scores of one curve from its observed columns:
/// `f̂ = yᵀV D⁻¹ / √N` on the weighted observed layout.
///
/// Fails when any retained singular value was clamped to zero: the
/// requested rank exceeds what this pattern identifies.
pub fn project_curve(fit: &FactorFit, y_partial: &ArrayView1<f64>) -> Result<Array1<f64>, ReconError> {
    let n_obs = fit.svd.v.nrows();
    if y_partial.len() != n_obs {
        return Err(ReconError::RowLength { expected: n_obs, got: y_partial.len() });
    }
    for (k, &d) in fit.svd.d.iter().enumerate() {
        if d <= 0.0 {
            return Err(ReconError::Singular { index: k, rank: fit.rank });
        }
    }
    let ytv = fit.svd.v.t().dot(y_partial);
    let inv_sqrt_n = 1.0 / (fit.n_grid as f64).sqrt();
    Ok(Array1::from_iter(
        ytv.iter().zip(fit.svd.d.iter()).map(|(&c, &d)| c * inv_sqrt_n / d),
    ))
}

/// Reconstruction of the target channel on the full grid from factor
/// scores, returned in original (unweighted) units.
pub fn reconstruct_grid(fit: &FactorFit, scores: &ArrayView1<f64>) -> Result<Array1<f64>, ReconError> {
    if scores.len() != fit.rank {
        return Err(ReconError::ScoreLength { expected: fit.rank, got: scores.len() });
    }
    let weighted = scores.dot(&fit.beta);
    Ok(weighted / fit.weights[0].sqrt())
}

/// Piecewise-linear evaluation of grid values at `u ∈ [0, 1]`.
///
/// Cells are half-open `[u_i, u_{i+1})`; `u = 1` closes the last cell, so
/// grid points themselves reproduce their values exactly.
pub fn interpolate(grid: &Grid, values: &ArrayView1<f64>, u: f64) -> Result<f64, ReconError> {
    assert_eq!(grid.len(), values.len(), "values must match grid");
    if !u.is_finite() || !(0.0..=1.0).contains(&u) {
        return Err(ReconError::Domain { u });
    }
    let n = grid.len();
    let cell = ((u * (n - 1) as f64).floor() as usize).min(n - 2);
    let h = grid.spacing();
    let theta = (u - grid.points()[cell]) / h;
    Ok((1.0 - theta) * values[cell] + theta * values[cell + 1])
}

/// Result of reconstructing one curve.
#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub curve: usize,
    pub rank: usize,
    /// Estimated factor scores of the curve.
    pub scores: Array1<f64>,
    /// Fitted target values on the full grid (denoised everywhere).
    pub grid_values: Array1<f64>,
}

impl Reconstruction {
    /// Grid values with the curve's actually observed cells copied back
    /// verbatim (missing cells keep the fitted values).
    pub fn merged_with_observed(&self, dataset: &FunctionalDataset) -> Array1<f64> {
        let mut out = self.grid_values.clone();
        for i in 0..dataset.n_grid() {
            if dataset.mask()[(self.curve, i)] {
                out[i] = dataset.target()[(self.curve, i)];
            }
        }
        out
    }
}

/// Key for the per-pattern fit cache: the observed bitmap plus the rank.
/// Weights are fixed per `Reconstructor`, so they are not part of the key.
#[derive(PartialEq, Eq, Hash)]
struct FitKey {
    observed: Vec<bool>,
    rank: usize,
}

/// Reconstruction front end that reuses fits across curves sharing an
/// observation pattern. The cache is insert-or-get under a mutex, safe for
/// concurrent use; fits are deterministic so racing duplicates are
/// identical and the first insert wins.
///
/// Channels are centered at their complete-sample mean curves before the
/// factor fit and the target mean is added back to every reconstruction,
/// so factors explain fluctuations around the mean rather than spending a
/// direction on the level itself. The low-level operations stay mean-free;
/// centering lives here in the orchestration.
pub struct Reconstructor<'a> {
    dataset: &'a FunctionalDataset,
    weights: Vec<f64>,
    means: ChannelMeans,
    cache: Mutex<HashMap<FitKey, Arc<FactorFit>>>,
}

impl<'a> Reconstructor<'a> {
    pub fn new(dataset: &'a FunctionalDataset, weights: Vec<f64>) -> Result<Self, ReconError> {
        if weights.len() != dataset.n_channels() {
            return Err(DatasetError::WeightCount {
                expected: dataset.n_channels(),
                got: weights.len(),
            }
            .into());
        }
        let means = ChannelMeans::from_complete(dataset)?;
        Ok(Reconstructor { dataset, weights, means, cache: Mutex::new(HashMap::new()) })
    }

    pub fn dataset(&self) -> &FunctionalDataset {
        self.dataset
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Complete-sample mean curves the fits are centered at.
    pub fn means(&self) -> &ChannelMeans {
        &self.means
    }

    /// Cached fit for a pattern at a rank, on centered data.
    pub fn fit_for(
        &self,
        pattern: &ObservationPattern,
        rank: usize,
    ) -> Result<Arc<FactorFit>, ReconError> {
        let key = FitKey { observed: pattern.observed().to_vec(), rank };
        if let Some(hit) = self.cache.lock().unwrap().get(&key) {
            return Ok(Arc::clone(hit));
        }
        let mut stacked = self.dataset.assemble(pattern, &self.weights)?;
        stacked.center_at(&self.means);
        let fit = Arc::new(fit_factors(&stacked, rank)?);
        let mut cache = self.cache.lock().unwrap();
        Ok(Arc::clone(cache.entry(key).or_insert(fit)))
    }

    /// Number of distinct fits currently cached.
    pub fn cached_fits(&self) -> usize {
        self.cache.lock().unwrap().len()
    }

    /// Reconstructs `curve` on the full grid at the given rank using the
    /// curve's own observation pattern.
    pub fn reconstruct(&self, curve: usize, rank: usize) -> Result<Reconstruction, ReconError> {
        let pattern = self.dataset.pattern_of(curve)?;
        self.reconstruct_on(curve, &pattern, rank)
    }

    /// Reconstructs `curve` pretending its target is observed only where
    /// `pattern` says so (the pseudo-missing device used by validation and
    /// band residuals).
    pub fn reconstruct_on(
        &self,
        curve: usize,
        pattern: &ObservationPattern,
        rank: usize,
    ) -> Result<Reconstruction, ReconError> {
        let fit = self.fit_for(pattern, rank)?;
        let map = ColumnMap::new(pattern, self.dataset.n_channels());
        let mut y_partial = self.dataset.partial_row(curve, pattern, &self.weights)?;
        y_partial -= &self.means.observed_row(&map, &self.weights);
        let scores = project_curve(&fit, &y_partial.view())?;
        let mut grid_values = reconstruct_grid(&fit, &scores.view())?;
        grid_values += &self.means.target();
        Ok(Reconstruction { curve, rank, scores, grid_values })
    }
}
