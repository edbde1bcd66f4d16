//! Core data model: grids, partially observed curve panels, observation
//! patterns, and the stacked matrices consumed by the factor estimator.
//!
//! A dataset holds one target channel that may have missing cells plus any
//! number of fully observed covariate channels, all sampled on a shared
//! equispaced grid over `[0, 1]`. Stacking concatenates the channels of each
//! complete curve into one long row, multiplying channel `d` by `√w_d`, so a
//! single singular value decomposition can borrow strength across channels.

use ndarray::{Array1, Array2};
use thiserror::Error;

/// Tolerance for validating that grid points are equispaced.
pub const GRID_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("grid needs at least 2 points, got {0}")]
    GridTooSmall(usize),
    #[error("grid points must be equispaced on [0,1] with endpoints 0 and 1 (tolerance {GRID_TOL:e}); offending index {0}")]
    GridNotEquispaced(usize),
    #[error("shape mismatch: {what}")]
    Shape { what: String },
    #[error("target value at curve {curve}, grid index {index} is observed but not finite")]
    TargetNotFinite { curve: usize, index: usize },
    #[error("covariate {channel} at curve {curve}, grid index {index} is not finite; covariates must be fully observed")]
    CovariateNotFinite { channel: usize, curve: usize, index: usize },
    #[error("need at least 2 complete curves, found {found}")]
    NotEnoughComplete { found: usize },
    #[error("curve {0} is not fully observed and cannot be stacked")]
    IncompleteRow(usize),
    #[error("weight {index} is {value}; weights must be finite and positive")]
    WeightInvalid { index: usize, value: f64 },
    #[error("expected {expected} channel weights, got {got}")]
    WeightCount { expected: usize, got: usize },
    #[error("pattern length {got} does not match grid size {expected}")]
    PatternLength { expected: usize, got: usize },
    #[error("pattern observes no target points and there are no covariates; nothing to project on")]
    EmptyObservedBlock,
    #[error("curve {curve} is missing grid index {index} required by the pattern")]
    MissingRequiredCell { curve: usize, index: usize },
    #[error("curve index {0} out of range")]
    CurveOutOfRange(usize),
}

/// Equispaced evaluation grid `0 = u_1 < … < u_N = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    points: Vec<f64>,
}

impl Grid {
    /// Equispaced grid of `n ≥ 2` points with `u_i = (i-1)/(n-1)`.
    pub fn equispaced(n: usize) -> Result<Self, DatasetError> {
        if n < 2 {
            return Err(DatasetError::GridTooSmall(n));
        }
        let h = 1.0 / (n - 1) as f64;
        Ok(Grid { points: (0..n).map(|i| i as f64 * h).collect() })
    }

    /// Validates externally supplied points: ascending, equispaced to
    /// `GRID_TOL`, endpoints exactly at 0 and 1 (within tolerance).
    pub fn from_points(points: Vec<f64>) -> Result<Self, DatasetError> {
        let n = points.len();
        if n < 2 {
            return Err(DatasetError::GridTooSmall(n));
        }
        let h = 1.0 / (n - 1) as f64;
        for (i, &p) in points.iter().enumerate() {
            let expect = i as f64 * h;
            if !p.is_finite() || (p - expect).abs() > GRID_TOL {
                return Err(DatasetError::GridNotEquispaced(i));
            }
        }
        Ok(Grid { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    /// Grid spacing `1/(N-1)`.
    pub fn spacing(&self) -> f64 {
        1.0 / (self.points.len() - 1) as f64
    }
}

/// Which grid points of the target channel are observed for one curve.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ObservationPattern {
    observed: Vec<bool>,
}

impl ObservationPattern {
    pub fn new(observed: Vec<bool>) -> Self {
        ObservationPattern { observed }
    }

    pub fn len(&self) -> usize {
        self.observed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observed.is_empty()
    }

    pub fn observed(&self) -> &[bool] {
        &self.observed
    }

    pub fn is_observed(&self, i: usize) -> bool {
        self.observed[i]
    }

    pub fn n_observed(&self) -> usize {
        self.observed.iter().filter(|&&b| b).count()
    }

    pub fn observed_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.observed[i]).collect()
    }

    pub fn missing_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.observed[i]).collect()
    }

    pub fn is_all_observed(&self) -> bool {
        self.observed.iter().all(|&b| b)
    }
}

/// Maps stacked column indices back to `(channel, grid index)` pairs.
///
/// Complete columns enumerate every channel in full grid order; observed
/// columns drop the unobserved target cells. Both directions are bijective
/// onto their declared ranges.
#[derive(Debug, Clone)]
pub struct ColumnMap {
    n_grid: usize,
    n_channels: usize,
    observed_cols: Vec<(usize, usize)>,
}

impl ColumnMap {
    pub fn new(pattern: &ObservationPattern, n_channels: usize) -> Self {
        let n_grid = pattern.len();
        let mut observed_cols = Vec::with_capacity(n_channels * n_grid);
        for i in 0..n_grid {
            if pattern.is_observed(i) {
                observed_cols.push((0, i));
            }
        }
        for d in 1..n_channels {
            for i in 0..n_grid {
                observed_cols.push((d, i));
            }
        }
        ColumnMap { n_grid, n_channels, observed_cols }
    }

    pub fn n_grid(&self) -> usize {
        self.n_grid
    }

    pub fn n_channels(&self) -> usize {
        self.n_channels
    }

    pub fn n_complete_cols(&self) -> usize {
        self.n_channels * self.n_grid
    }

    pub fn n_observed_cols(&self) -> usize {
        self.observed_cols.len()
    }

    /// Source `(channel, grid index)` of observed column `j`.
    pub fn observed_source(&self, j: usize) -> (usize, usize) {
        self.observed_cols[j]
    }

    /// Source `(channel, grid index)` of complete column `c`.
    pub fn complete_source(&self, c: usize) -> (usize, usize) {
        (c / self.n_grid, c % self.n_grid)
    }

    /// Complete column index of `(channel, grid index)`.
    pub fn complete_col(&self, channel: usize, grid: usize) -> usize {
        channel * self.n_grid + grid
    }
}

/// Per-channel pointwise mean curves over a set of complete curves.
///
/// The factor decomposition is a covariance-style expansion, so stacked
/// rows are centered at these means before the singular value
/// decomposition and the target mean is added back to reconstructions.
/// Keeping the means as a value of their own lets reconstruction,
/// validation, and band calibration all center identically.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelMeans {
    /// `(D+1) × N`; row `d` is the mean curve of channel `d`.
    values: Array2<f64>,
}

impl ChannelMeans {
    /// Pointwise means of every channel over the fully observed curves.
    pub fn from_complete(ds: &FunctionalDataset) -> Result<Self, DatasetError> {
        let rows = ds.complete_indices()?;
        Self::from_rows(ds, &rows)
    }

    /// Pointwise means over an explicit set of complete curves.
    pub fn from_rows(ds: &FunctionalDataset, rows: &[usize]) -> Result<Self, DatasetError> {
        if rows.is_empty() {
            return Err(DatasetError::NotEnoughComplete { found: 0 });
        }
        for &t in rows {
            if t >= ds.n_curves() {
                return Err(DatasetError::CurveOutOfRange(t));
            }
            if !ds.is_complete(t) {
                return Err(DatasetError::IncompleteRow(t));
            }
        }
        let values = Array2::from_shape_fn((ds.n_channels(), ds.n_grid()), |(d, i)| {
            rows.iter().map(|&t| ds.channel_value(d, t, i)).sum::<f64>() / rows.len() as f64
        });
        Ok(ChannelMeans { values })
    }

    pub fn n_channels(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_grid(&self) -> usize {
        self.values.ncols()
    }

    /// Mean curve of the target channel.
    pub fn target(&self) -> ndarray::ArrayView1<'_, f64> {
        self.values.row(0)
    }

    /// Mean curve of channel `d` (0 = target).
    pub fn channel(&self, d: usize) -> ndarray::ArrayView1<'_, f64> {
        self.values.row(d)
    }

    /// The means laid out and weighted like one row of `y_observed`.
    pub fn observed_row(&self, map: &ColumnMap, weights: &[f64]) -> Array1<f64> {
        let sqrt_w: Vec<f64> = weights.iter().map(|w| w.sqrt()).collect();
        Array1::from_shape_fn(map.n_observed_cols(), |j| {
            let (d, i) = map.observed_source(j);
            sqrt_w[d] * self.values[(d, i)]
        })
    }

    /// The means laid out and weighted like one row of `y_complete`.
    pub fn complete_row(&self, map: &ColumnMap, weights: &[f64]) -> Array1<f64> {
        let sqrt_w: Vec<f64> = weights.iter().map(|w| w.sqrt()).collect();
        Array1::from_shape_fn(map.n_complete_cols(), |c| {
            let (d, i) = map.complete_source(c);
            sqrt_w[d] * self.values[(d, i)]
        })
    }
}

/// Panel of curves on a shared grid: one target channel with per-cell
/// observation mask plus fully observed covariate channels.
///
/// Masked target cells are normalized to zero at construction; they are
/// never read by any estimator, the normalization just keeps stray payloads
/// (e.g. NaN markers from parsing) out of downstream arithmetic.
#[derive(Debug, Clone)]
pub struct FunctionalDataset {
    grid: Grid,
    target: Array2<f64>,
    mask: Array2<bool>,
    covariates: Vec<Array2<f64>>,
}

impl FunctionalDataset {
    pub fn new(
        grid: Grid,
        mut target: Array2<f64>,
        mask: Array2<bool>,
        covariates: Vec<Array2<f64>>,
    ) -> Result<Self, DatasetError> {
        let (t, n) = target.dim();
        if n != grid.len() {
            return Err(DatasetError::Shape {
                what: format!("target has {n} columns but grid has {} points", grid.len()),
            });
        }
        if mask.dim() != (t, n) {
            return Err(DatasetError::Shape {
                what: format!("mask {:?} does not match target {:?}", mask.dim(), (t, n)),
            });
        }
        for (d, cov) in covariates.iter().enumerate() {
            if cov.dim() != (t, n) {
                return Err(DatasetError::Shape {
                    what: format!("covariate {} is {:?}, expected {:?}", d + 1, cov.dim(), (t, n)),
                });
            }
            for ((i, j), &x) in cov.indexed_iter() {
                if !x.is_finite() {
                    return Err(DatasetError::CovariateNotFinite {
                        channel: d + 1,
                        curve: i,
                        index: j,
                    });
                }
            }
        }
        for ((i, j), x) in target.indexed_iter_mut() {
            if mask[(i, j)] {
                if !x.is_finite() {
                    return Err(DatasetError::TargetNotFinite { curve: i, index: j });
                }
            } else {
                *x = 0.0;
            }
        }
        Ok(FunctionalDataset { grid, target, mask, covariates })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn n_curves(&self) -> usize {
        self.target.nrows()
    }

    pub fn n_grid(&self) -> usize {
        self.grid.len()
    }

    /// Channels including the target: `1 + n_covariates`.
    pub fn n_channels(&self) -> usize {
        1 + self.covariates.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.covariates.len()
    }

    pub fn target(&self) -> &Array2<f64> {
        &self.target
    }

    pub fn mask(&self) -> &Array2<bool> {
        &self.mask
    }

    pub fn covariate(&self, d: usize) -> &Array2<f64> {
        &self.covariates[d - 1]
    }

    /// Raw value of channel `d` (0 = target) at `(curve, grid index)`.
    pub fn channel_value(&self, d: usize, curve: usize, i: usize) -> f64 {
        if d == 0 {
            self.target[(curve, i)]
        } else {
            self.covariates[d - 1][(curve, i)]
        }
    }

    pub fn is_complete(&self, curve: usize) -> bool {
        self.mask.row(curve).iter().all(|&b| b)
    }

    /// Indices of fully observed curves, ascending. At least two are
    /// required for any downstream fit.
    pub fn complete_indices(&self) -> Result<Vec<usize>, DatasetError> {
        let idx: Vec<usize> = (0..self.n_curves()).filter(|&t| self.is_complete(t)).collect();
        if idx.len() < 2 {
            return Err(DatasetError::NotEnoughComplete { found: idx.len() });
        }
        Ok(idx)
    }

    /// Indices of curves with at least one missing target cell.
    pub fn incomplete_indices(&self) -> Vec<usize> {
        (0..self.n_curves()).filter(|&t| !self.is_complete(t)).collect()
    }

    pub fn pattern_of(&self, curve: usize) -> Result<ObservationPattern, DatasetError> {
        if curve >= self.n_curves() {
            return Err(DatasetError::CurveOutOfRange(curve));
        }
        Ok(ObservationPattern::new(self.mask.row(curve).to_vec()))
    }

    fn validate_assembly(
        &self,
        pattern: &ObservationPattern,
        weights: &[f64],
    ) -> Result<(), DatasetError> {
        if pattern.len() != self.n_grid() {
            return Err(DatasetError::PatternLength {
                expected: self.n_grid(),
                got: pattern.len(),
            });
        }
        if weights.len() != self.n_channels() {
            return Err(DatasetError::WeightCount {
                expected: self.n_channels(),
                got: weights.len(),
            });
        }
        for (i, &w) in weights.iter().enumerate() {
            if !w.is_finite() || w <= 0.0 {
                return Err(DatasetError::WeightInvalid { index: i, value: w });
            }
        }
        if pattern.n_observed() == 0 && self.n_covariates() == 0 {
            return Err(DatasetError::EmptyObservedBlock);
        }
        Ok(())
    }

    /// Stacks all complete curves; see [`FunctionalDataset::assemble_rows`].
    pub fn assemble(
        &self,
        pattern: &ObservationPattern,
        weights: &[f64],
    ) -> Result<StackedMatrices, DatasetError> {
        let rows = self.complete_indices()?;
        self.assemble_rows(pattern, weights, &rows)
    }

    /// Stacks the given complete curves into the matrices used by the
    /// factor estimator.
    ///
    /// `y_complete` is `T_C × (D+1)·N` with channel blocks in order (target
    /// first); `y_observed` drops the target columns the pattern marks as
    /// missing. Channel `d` is multiplied by `√w_d`, so reading a stacked
    /// cell back through the column map and dividing by `√w_d` reproduces
    /// the original value.
    pub fn assemble_rows(
        &self,
        pattern: &ObservationPattern,
        weights: &[f64],
        rows: &[usize],
    ) -> Result<StackedMatrices, DatasetError> {
        self.validate_assembly(pattern, weights)?;
        if rows.len() < 2 {
            return Err(DatasetError::NotEnoughComplete { found: rows.len() });
        }
        for &t in rows {
            if t >= self.n_curves() {
                return Err(DatasetError::CurveOutOfRange(t));
            }
            if !self.is_complete(t) {
                return Err(DatasetError::IncompleteRow(t));
            }
        }
        let n = self.n_grid();
        let n_channels = self.n_channels();
        let column_map = ColumnMap::new(pattern, n_channels);
        let sqrt_w: Vec<f64> = weights.iter().map(|w| w.sqrt()).collect();
        let pattern = pattern.clone();

        let mut y_complete = Array2::zeros((rows.len(), n_channels * n));
        let mut y_observed = Array2::zeros((rows.len(), column_map.n_observed_cols()));
        for (r, &t) in rows.iter().enumerate() {
            for d in 0..n_channels {
                for i in 0..n {
                    y_complete[(r, d * n + i)] = sqrt_w[d] * self.channel_value(d, t, i);
                }
            }
            for j in 0..column_map.n_observed_cols() {
                let (d, i) = column_map.observed_source(j);
                y_observed[(r, j)] = sqrt_w[d] * self.channel_value(d, t, i);
            }
        }
        Ok(StackedMatrices {
            rows: rows.to_vec(),
            y_complete,
            y_observed,
            pattern,
            column_map,
            weights: weights.to_vec(),
        })
    }

    /// Observed-layout row for one curve: the curve's target values at the
    /// pattern's observed indices plus all covariate values, weighted like
    /// the stacked matrices. The curve must actually be observed wherever
    /// the pattern requires it.
    pub fn partial_row(
        &self,
        curve: usize,
        pattern: &ObservationPattern,
        weights: &[f64],
    ) -> Result<Array1<f64>, DatasetError> {
        self.validate_assembly(pattern, weights)?;
        if curve >= self.n_curves() {
            return Err(DatasetError::CurveOutOfRange(curve));
        }
        for i in 0..self.n_grid() {
            if pattern.is_observed(i) && !self.mask[(curve, i)] {
                return Err(DatasetError::MissingRequiredCell { curve, index: i });
            }
        }
        let column_map = ColumnMap::new(pattern, self.n_channels());
        let sqrt_w: Vec<f64> = weights.iter().map(|w| w.sqrt()).collect();
        let mut row = Array1::zeros(column_map.n_observed_cols());
        for j in 0..column_map.n_observed_cols() {
            let (d, i) = column_map.observed_source(j);
            row[j] = sqrt_w[d] * self.channel_value(d, curve, i);
        }
        Ok(row)
    }
}

/// Weighted stacked matrices over a set of complete curves.
#[derive(Debug, Clone)]
pub struct StackedMatrices {
    /// Dataset curve indices of the stacked rows, in row order.
    pub rows: Vec<usize>,
    /// `T_C × (D+1)·N`: every channel over the full grid.
    pub y_complete: Array2<f64>,
    /// `T_C × N_O`: target restricted to observed columns, then covariates.
    pub y_observed: Array2<f64>,
    /// Target observation pattern the assembly was built for.
    pub pattern: ObservationPattern,
    pub column_map: ColumnMap,
    /// Channel weights the rows were scaled with (`√w_d` per channel).
    pub weights: Vec<f64>,
}

impl StackedMatrices {
    /// Centers both layouts at the given channel means, weighted
    /// consistently with the assembly.
    pub fn center_at(&mut self, means: &ChannelMeans) {
        let obs = means.observed_row(&self.column_map, &self.weights);
        for mut row in self.y_observed.rows_mut() {
            row -= &obs;
        }
        let full = means.complete_row(&self.column_map, &self.weights);
        for mut row in self.y_complete.rows_mut() {
            row -= &full;
        }
    }
}
