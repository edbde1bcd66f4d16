//! Channel weights and cross-validated rank selection.
//!
//! Weights equalize channel scales before stacking: `w_d` is the reciprocal
//! of the trapezoid-integrated pointwise sample variance of channel `d`
//! over the complete curves. They are estimated once on the full complete
//! subsample, not re-estimated inside folds.
//!
//! The rank is chosen by K-fold cross-validation on the complete curves:
//! held-out curves get their target values masked to the query pattern
//! (pseudo-missing), are reconstructed from the training folds at each
//! candidate rank, and scored by squared error against their raw held-out
//! measurements at the masked points. Data are centered at the
//! complete-sample channel means exactly as in reconstruction (the common
//! mean cancels from the held-out differences, so scores are unchanged by
//! where the level is carried). Ties, including the plateau of exact zeros
//! that exact-rank noiseless data produces, resolve to the smallest rank.

use ndarray::ArrayView2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::Serialize;
use thiserror::Error;

use crate::dataset::{ChannelMeans, DatasetError, FunctionalDataset, ObservationPattern};
use crate::engine::{take_columns, GramEigen, GramPair};
use crate::linalg::LinalgError;

/// Hard cap of the default rank search.
pub const R_MAX_CAP: usize = 20;

#[derive(Debug, Error)]
pub enum SelectionError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("need between 2 and {t_c} folds, got {n_folds}")]
    FoldCount { n_folds: usize, t_c: usize },
    #[error("fold {0} is empty")]
    EmptyFold(usize),
    #[error("folds do not partition the complete curves")]
    BadPartition,
    #[error("r_max {r_max} exceeds the identifiable limit {limit} (min training rows and observed columns)")]
    RankTooLarge { r_max: usize, limit: usize },
    #[error("pattern has no missing grid points; nothing to cross-validate")]
    NoMissing,
    #[error("channel {channel} has integrated variance {integral:.3e}, too small to weight")]
    DegenerateVariance { channel: usize, integral: f64 },
}

/// Positive per-channel weights, target first.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeightVector {
    values: Vec<f64>,
}

impl WeightVector {
    pub fn new(values: Vec<f64>) -> Result<Self, DatasetError> {
        for (i, &w) in values.iter().enumerate() {
            if !w.is_finite() || w <= 0.0 {
                return Err(DatasetError::WeightInvalid { index: i, value: w });
            }
        }
        Ok(WeightVector { values })
    }

    /// Unit weights for `n_channels` channels.
    pub fn unit(n_channels: usize) -> Self {
        WeightVector { values: vec![1.0; n_channels] }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Reciprocal integrated-variance weights from the complete curves.
///
/// Pointwise variances use the unbiased `1/(T_C - 1)` normalization and are
/// integrated by the trapezoid rule on the grid. A channel whose integrated
/// variance falls below `1e-12` cannot be meaningfully scaled and is
/// rejected.
pub fn empirical_weights(ds: &FunctionalDataset) -> Result<WeightVector, SelectionError> {
    let curves = ds.complete_indices()?;
    let t_c = curves.len() as f64;
    let n = ds.n_grid();
    let h = ds.grid().spacing();
    let mut weights = Vec::with_capacity(ds.n_channels());
    for d in 0..ds.n_channels() {
        let mut integral = 0.0;
        for i in 0..n {
            let mean: f64 =
                curves.iter().map(|&t| ds.channel_value(d, t, i)).sum::<f64>() / t_c;
            let ss: f64 = curves
                .iter()
                .map(|&t| {
                    let dev = ds.channel_value(d, t, i) - mean;
                    dev * dev
                })
                .sum();
            let var = ss / (t_c - 1.0);
            let trap = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
            integral += trap * var * h;
        }
        if integral <= 1e-12 {
            return Err(SelectionError::DegenerateVariance { channel: d, integral });
        }
        weights.push(1.0 / integral);
    }
    Ok(WeightVector { values: weights })
}

/// Default rank cap: `min(20, T_C - ceil(T_C/K) - 1, N_O - 1)`.
///
/// The middle term keeps the rank estimable from the smallest training
/// fold; the last keeps it below the observed column count.
pub fn default_r_max(t_c: usize, n_folds: usize, n_observed_cols: usize) -> usize {
    let max_fold = t_c.div_ceil(n_folds);
    let by_rows = t_c.saturating_sub(max_fold).saturating_sub(1);
    let by_cols = n_observed_cols.saturating_sub(1);
    R_MAX_CAP.min(by_rows).min(by_cols)
}

/// Cross-validation summary.
#[derive(Debug, Clone, Serialize)]
pub struct CvReport {
    pub chosen_rank: usize,
    /// Out-of-fold squared error per candidate rank (index 0 ↔ rank 1), in
    /// original target units.
    pub sse_per_rank: Vec<f64>,
    /// `(curve index, fold label)` pairs, ascending by curve.
    pub fold_assignment: Vec<(usize, usize)>,
    pub r_max: usize,
    pub n_folds: usize,
    /// Shuffle seed; absent when folds were supplied explicitly.
    pub seed: Option<u64>,
}

/// K-fold cross-validated rank choice with seeded fold shuffling.
///
/// The complete curves are shuffled by a ChaCha20 generator seeded with
/// `seed` and split into `n_folds` contiguous blocks (the first
/// `T_C mod K` blocks take the extra curve), so the partition is fully
/// reproducible from the seed.
pub fn cv_rank(
    ds: &FunctionalDataset,
    pattern: &ObservationPattern,
    weights: &WeightVector,
    r_max: Option<usize>,
    n_folds: usize,
    seed: u64,
) -> Result<CvReport, SelectionError> {
    let curves = ds.complete_indices()?;
    let t_c = curves.len();
    if n_folds < 2 || n_folds > t_c {
        return Err(SelectionError::FoldCount { n_folds, t_c });
    }
    let mut shuffled = curves;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    shuffled.shuffle(&mut rng);
    let base = t_c / n_folds;
    let extra = t_c % n_folds;
    let mut folds = Vec::with_capacity(n_folds);
    let mut at = 0usize;
    for k in 0..n_folds {
        let size = base + usize::from(k < extra);
        folds.push(shuffled[at..at + size].to_vec());
        at += size;
    }
    let mut report = cv_rank_with_folds(ds, pattern, weights, r_max, &folds)?;
    report.seed = Some(seed);
    Ok(report)
}

/// Cross-validated rank choice over an explicit fold partition of the
/// complete curves.
pub fn cv_rank_with_folds(
    ds: &FunctionalDataset,
    pattern: &ObservationPattern,
    weights: &WeightVector,
    r_max: Option<usize>,
    folds: &[Vec<usize>],
) -> Result<CvReport, SelectionError> {
    let missing = pattern.missing_indices();
    if missing.is_empty() {
        return Err(SelectionError::NoMissing);
    }
    let curves = ds.complete_indices()?;
    let t_c = curves.len();
    let n_folds = folds.len();
    if n_folds < 2 || n_folds > t_c {
        return Err(SelectionError::FoldCount { n_folds, t_c });
    }
    for (k, fold) in folds.iter().enumerate() {
        if fold.is_empty() {
            return Err(SelectionError::EmptyFold(k));
        }
    }
    let mut all: Vec<usize> = folds.iter().flatten().copied().collect();
    all.sort_unstable();
    if all != curves {
        return Err(SelectionError::BadPartition);
    }

    let mut stacked = ds.assemble(pattern, weights.as_slice())?;
    stacked.center_at(&ChannelMeans::from_complete(ds)?);
    let n_obs = stacked.y_observed.ncols();
    let max_fold = folds.iter().map(Vec::len).max().unwrap();
    let limit = (t_c - max_fold).min(n_obs);
    let r_max = r_max.unwrap_or_else(|| default_r_max(t_c, n_folds, n_obs));
    if r_max < 1 || r_max > limit {
        return Err(SelectionError::RankTooLarge { r_max, limit });
    }

    // Row positions of each curve inside the stacked matrices.
    let position: std::collections::HashMap<usize, usize> =
        stacked.rows.iter().enumerate().map(|(r, &t)| (t, r)).collect();

    let target = stacked.y_complete.slice(ndarray::s![.., 0..ds.n_grid()]);
    let y_eval = take_columns(&target, &missing);
    let full = GramPair::compute(&stacked.y_observed.view(), &y_eval.view());

    let mut sse_folds: Vec<Vec<f64>> = Vec::with_capacity(n_folds);
    for fold in folds {
        let rows: Vec<usize> = fold.iter().map(|t| position[t]).collect();
        let part = GramPair::compute_rows(&stacked.y_observed.view(), &y_eval.view(), &rows);
        let train = full.minus(&part);
        let eig = GramEigen::new(&train.gram.view(), r_max)?;
        let loadings = eig.project_columns(&train.cross.view());
        let mut sse = vec![0.0f64; r_max];
        for &row in &rows {
            let y_row = stacked.y_observed.row(row);
            let truth = y_eval.row(row);
            let coef = eig.coefficients(&y_row);
            eig.nested_sse(&coef.view(), &loadings.view(), &truth.view(), r_max, &mut sse);
        }
        sse_folds.push(sse);
    }
    // Fixed reduction order: fold index, then rank.
    let w0 = weights.as_slice()[0];
    let mut sse_per_rank = vec![0.0f64; r_max];
    for sse in &sse_folds {
        for r in 0..r_max {
            sse_per_rank[r] += sse[r] / w0;
        }
    }

    let chosen_rank = argmin_rank(&sse_per_rank, &y_eval.view(), w0, t_c);

    let mut fold_assignment: Vec<(usize, usize)> = folds
        .iter()
        .enumerate()
        .flat_map(|(k, fold)| fold.iter().map(move |&t| (t, k)))
        .collect();
    fold_assignment.sort_unstable();

    Ok(CvReport { chosen_rank, sse_per_rank, fold_assignment, r_max, n_folds, seed: None })
}

/// Smallest rank within numerical noise of the minimum.
///
/// Exact-rank noiseless data plateaus at zero error for every sufficient
/// rank, up to floating point residue; the tolerance (relative `1e-9` plus
/// an absolute rounding floor scaled to the data) makes the documented
/// smaller-rank tie-break effective in floating point.
fn argmin_rank(sse: &[f64], y_eval: &ArrayView2<f64>, w0: f64, t_c: usize) -> usize {
    let min = sse.iter().copied().fold(f64::INFINITY, f64::min);
    let y_scale = y_eval.iter().fold(0.0f64, |m, &x| m.max(x.abs())) / w0.sqrt();
    let terms = (t_c * y_eval.ncols()) as f64;
    let floor = terms * (1e-10 * y_scale.max(1.0)).powi(2);
    let tol = (min * 1e-9).max(floor);
    sse.iter().position(|&s| s <= min + tol).unwrap() + 1
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Grid;
    use crate::recon::{fit_factors, project_curve, reconstruct_grid};
    use crate::testutil::{factor_dataset, fixture_matrix, loading};
    use ndarray::Array2;

    fn tail_pattern(n: usize, observed: usize) -> ObservationPattern {
        ObservationPattern::new((0..n).map(|i| i < observed).collect())
    }

    #[test]
    fn weights_are_reciprocal_integrated_variance() {
        // Three curves c, c+delta, c-delta give pointwise sample variance
        // exactly delta² with the 1/(T_C-1) normalization.
        let grid = Grid::equispaced(6).unwrap();
        let n = 6;
        let base = |i: usize| (i as f64) * 0.3 + 1.0;
        let mk = |delta: f64| {
            Array2::from_shape_fn((3, n), |(s, i)| match s {
                0 => base(i),
                1 => base(i) + delta,
                _ => base(i) - delta,
            })
        };
        let target = mk(1.0); // variance 1 -> weight 1
        let cov = mk(2.0); // variance 4 -> weight 0.25
        let mask = Array2::from_elem((3, n), true);
        let ds = FunctionalDataset::new(grid, target, mask, vec![cov]).unwrap();
        let w = empirical_weights(&ds).unwrap();
        assert!((w.as_slice()[0] - 1.0).abs() < 1e-12);
        assert!((w.as_slice()[1] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn constant_channel_is_degenerate() {
        let grid = Grid::equispaced(4).unwrap();
        let target = Array2::from_elem((3, 4), 2.0);
        let mask = Array2::from_elem((3, 4), true);
        let ds = FunctionalDataset::new(grid, target, mask, vec![]).unwrap();
        assert!(matches!(
            empirical_weights(&ds),
            Err(SelectionError::DegenerateVariance { channel: 0, .. })
        ));
    }

    #[test]
    fn default_r_max_formula() {
        // T_C=100, K=5: 100 - 20 - 1 = 79, capped at 20.
        assert_eq!(default_r_max(100, 5, 200), 20);
        // Column-bound: N_O = 10 -> 9.
        assert_eq!(default_r_max(100, 5, 10), 9);
        // Row-bound: T_C=10, K=5 -> 10 - 2 - 1 = 7.
        assert_eq!(default_r_max(10, 5, 100), 7);
    }

    #[test]
    fn noiseless_exact_rank_ties_to_smallest() {
        let ds = factor_dataset(30, 20, 3, 0.0, 5, &[]);
        let pattern = tail_pattern(20, 13);
        let w = WeightVector::unit(1);
        let report = cv_rank(&ds, &pattern, &w, Some(6), 5, 42).unwrap();
        assert_eq!(report.chosen_rank, 3, "sse: {:?}", report.sse_per_rank);
        // Plateau: every rank >= 3 is numerically zero.
        for r in 3..=6 {
            assert!(report.sse_per_rank[r - 1] < 1e-18);
        }
        assert!(report.sse_per_rank[0] > 1e-6);
    }

    #[test]
    fn noisy_rank3_recovered() {
        let ds = factor_dataset(80, 30, 3, 0.01, 9, &[]);
        let pattern = tail_pattern(30, 20);
        let w = WeightVector::unit(1);
        let report = cv_rank(&ds, &pattern, &w, Some(8), 5, 7).unwrap();
        assert_eq!(report.chosen_rank, 3, "sse: {:?}", report.sse_per_rank);
    }

    #[test]
    fn matches_straight_line_reimplementation() {
        // Same folds, naive loop through the public fitting API.
        let ds = factor_dataset(24, 16, 3, 0.05, 13, &[]);
        let pattern = tail_pattern(16, 11);
        let w = WeightVector::unit(1);
        let curves = ds.complete_indices().unwrap();
        let folds: Vec<Vec<usize>> = (0..4)
            .map(|k| curves.iter().copied().filter(|t| t % 4 == k).collect())
            .collect();
        let r_max = 5usize;
        let report = cv_rank_with_folds(&ds, &pattern, &w, Some(r_max), &folds).unwrap();

        let missing = pattern.missing_indices();
        let means = ChannelMeans::from_complete(&ds).unwrap();
        let map = crate::dataset::ColumnMap::new(&pattern, 1);
        let mean_obs = means.observed_row(&map, w.as_slice());
        let mut oracle = vec![0.0f64; r_max];
        for fold in &folds {
            let train: Vec<usize> =
                curves.iter().copied().filter(|t| !fold.contains(t)).collect();
            let mut sub = ds.assemble_rows(&pattern, w.as_slice(), &train).unwrap();
            sub.center_at(&means);
            for r in 1..=r_max {
                let fit = fit_factors(&sub, r).unwrap();
                for &s in fold {
                    let mut y = ds.partial_row(s, &pattern, w.as_slice()).unwrap();
                    y -= &mean_obs;
                    let scores = project_curve(&fit, &y.view()).unwrap();
                    let pred = reconstruct_grid(&fit, &scores.view()).unwrap();
                    for &i in &missing {
                        let d = pred[i] + means.target()[i] - ds.target()[(s, i)];
                        oracle[r - 1] += d * d;
                    }
                }
            }
        }
        for r in 0..r_max {
            let rel = (report.sse_per_rank[r] - oracle[r]).abs() / oracle[r].max(1e-30);
            assert!(
                rel < 1e-9,
                "rank {}: {} vs oracle {}",
                r + 1,
                report.sse_per_rank[r],
                oracle[r]
            );
        }
        let best = oracle
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0
            + 1;
        assert_eq!(report.chosen_rank, best);
    }

    #[test]
    fn same_seed_reproduces_everything() {
        let ds = factor_dataset(40, 18, 2, 0.05, 17, &[]);
        let pattern = tail_pattern(18, 12);
        let w = WeightVector::unit(1);
        let a = cv_rank(&ds, &pattern, &w, None, 5, 99).unwrap();
        let b = cv_rank(&ds, &pattern, &w, None, 5, 99).unwrap();
        assert_eq!(a.chosen_rank, b.chosen_rank);
        assert_eq!(a.fold_assignment, b.fold_assignment);
        assert!(a
            .sse_per_rank
            .iter()
            .zip(b.sse_per_rank.iter())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
        let c = cv_rank(&ds, &pattern, &w, None, 5, 100).unwrap();
        assert_ne!(a.fold_assignment, c.fold_assignment, "different seed, different shuffle");
    }

    #[test]
    fn fold_label_permutation_leaves_sse_unchanged() {
        let ds = factor_dataset(20, 14, 2, 0.1, 23, &[]);
        let pattern = tail_pattern(14, 9);
        let w = WeightVector::unit(1);
        let curves = ds.complete_indices().unwrap();
        let folds: Vec<Vec<usize>> =
            curves.chunks(5).map(|c| c.to_vec()).collect();
        let mut permuted = folds.clone();
        permuted.rotate_left(2);
        let a = cv_rank_with_folds(&ds, &pattern, &w, Some(4), &folds).unwrap();
        let b = cv_rank_with_folds(&ds, &pattern, &w, Some(4), &permuted).unwrap();
        for r in 0..4 {
            let rel = (a.sse_per_rank[r] - b.sse_per_rank[r]).abs()
                / a.sse_per_rank[r].max(1e-30);
            assert!(rel < 1e-12);
        }
        assert_eq!(a.chosen_rank, b.chosen_rank);
    }

    #[test]
    fn validation_errors() {
        let ds = factor_dataset(10, 8, 2, 0.1, 29, &[]);
        let pattern = tail_pattern(8, 5);
        let w = WeightVector::unit(1);
        assert!(matches!(
            cv_rank(&ds, &pattern, &w, None, 1, 0),
            Err(SelectionError::FoldCount { .. })
        ));
        assert!(matches!(
            cv_rank(&ds, &pattern, &w, None, 11, 0),
            Err(SelectionError::FoldCount { .. })
        ));
        assert!(matches!(
            cv_rank(&ds, &pattern, &w, Some(50), 5, 0),
            Err(SelectionError::RankTooLarge { .. })
        ));
        let complete = tail_pattern(8, 8);
        assert!(matches!(
            cv_rank(&ds, &complete, &w, None, 5, 0),
            Err(SelectionError::NoMissing)
        ));
        let folds = vec![vec![0, 1, 2], vec![3, 4]];
        assert!(matches!(
            cv_rank_with_folds(&ds, &pattern, &w, Some(3), &folds),
            Err(SelectionError::BadPartition)
        ));
    }

    #[test]
    fn weights_scale_out_of_chosen_rank() {
        // Rank choice is invariant to rescaling the target channel because
        // weighting cancels in original-unit errors.
        let grid = Grid::equispaced(12).unwrap();
        let scores = fixture_matrix(30, 2, 31);
        let target = Array2::from_shape_fn((30, 12), |(s, i)| {
            let u = grid.points()[i];
            scores[(s, 0)] * loading(0, u) + scores[(s, 1)] * loading(1, u)
        });
        let noise = fixture_matrix(30, 12, 37);
        let target = &target + &(&noise * 0.05);
        let mask = Array2::from_elem((30, 12), true);
        let ds = FunctionalDataset::new(grid, target, mask, vec![]).unwrap();
        let pattern = tail_pattern(12, 8);
        let a = cv_rank(&ds, &pattern, &WeightVector::new(vec![1.0]).unwrap(), Some(4), 5, 3)
            .unwrap();
        let b = cv_rank(&ds, &pattern, &WeightVector::new(vec![7.3]).unwrap(), Some(4), 5, 3)
            .unwrap();
        assert_eq!(a.chosen_rank, b.chosen_rank);
        for r in 0..4 {
            let rel = (a.sse_per_rank[r] - b.sse_per_rank[r]).abs()
                / a.sse_per_rank[r].max(1e-30);
            assert!(rel < 1e-9, "rank {}: weighted sse must match in original units", r + 1);
        }
    }
}
