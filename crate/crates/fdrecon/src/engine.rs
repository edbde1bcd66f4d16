//! Gram-matrix evaluation engine for fit-heavy loops.
//!
//! Cross-validation and leave-one-out residuals refit the factor model on
//! many row subsets of the same stacked matrix. Refitting from scratch costs
//! a fresh Gram product per subset; this engine instead decomposes downdated
//! Gram matrices (`S - Σ rows`) and evaluates reconstructions directly in
//! Gram coordinates:
//!
//! `L̂(u_i) = y_O · V_r · Γ_r⁻¹ · V_rᵀ · c_i`
//!
//! where `Γ, V` are eigenpairs of the observed-block Gram `S = Y_OᵀY_O` and
//! `c_i = Y_Oᵀ y_{target,i}` the cross-Gram column. This is algebraically
//! identical to the scaled-SVD composite used by the public API (every fixed
//! scaling cancels), which the tests assert numerically.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::linalg::{self, LinalgError, SINGULAR_REL_TOL};

/// Eigendecomposition of an observed-block Gram matrix truncated to the
/// ranks a caller will evaluate.
pub(crate) struct GramEigen {
    /// Eigenvalues, descending, clamped at zero.
    pub evals: Vec<f64>,
    /// `N_O × keep` eigenvectors.
    pub evecs: Array2<f64>,
    /// Number of leading eigenvalues above the numerical-rank cutoff;
    /// evaluation never uses factors past this.
    pub eff_rank: usize,
}

impl GramEigen {
    pub fn new(gram: &ArrayView2<f64>, keep: usize) -> Result<Self, LinalgError> {
        let dim = gram.nrows();
        let keep = keep.min(dim);
        let (evals_full, evecs_full) = linalg::sym_eigen_desc(gram)?;
        let evals: Vec<f64> = evals_full[..keep].iter().map(|&g| g.max(0.0)).collect();
        // Mirror the singular-value clamp: γ below (rel·d₁)² is null.
        let rel = SINGULAR_REL_TOL.max((dim as f64 * f64::EPSILON).sqrt());
        let cutoff = evals.first().copied().unwrap_or(0.0) * rel * rel;
        let eff_rank = evals.iter().take_while(|&&g| g > cutoff && g > 0.0).count();
        let evecs = evecs_full.slice(ndarray::s![.., 0..keep]).to_owned();
        Ok(GramEigen { evals, evecs, eff_rank })
    }

    /// Factor loadings of evaluation columns: `P = Vᵀ·C` where `C` is the
    /// `N_O × m` cross-Gram of the columns to predict.
    pub fn project_columns(&self, cross: &ArrayView2<f64>) -> Array2<f64> {
        self.evecs.t().dot(cross)
    }

    /// Per-factor coefficients of one curve: `coef_k = (Vᵀy)_k / γ_k`,
    /// zeroed past the effective rank.
    pub fn coefficients(&self, y_row: &ArrayView1<f64>) -> Array1<f64> {
        let w = self.evecs.t().dot(y_row);
        Array1::from_iter(w.iter().zip(self.evals.iter()).enumerate().map(|(k, (&wk, &gk))| {
            if k < self.eff_rank {
                wk / gk
            } else {
                0.0
            }
        }))
    }

    /// Prediction at a single rank: `Σ_{k<r} coef_k · p_k`.
    pub fn predict(
        &self,
        coef: &ArrayView1<f64>,
        loadings: &ArrayView2<f64>,
        rank: usize,
    ) -> Array1<f64> {
        let r = rank.min(self.eff_rank);
        let mut out = Array1::zeros(loadings.ncols());
        for k in 0..r {
            out.scaled_add(coef[k], &loadings.row(k));
        }
        out
    }

    /// Sum of squared errors of the nested predictions against `truth`, one
    /// entry per rank `1..=r_max`. Ranks past the effective rank repeat the
    /// effective-rank prediction, so exact-rank data plateaus instead of
    /// blowing up.
    pub fn nested_sse(
        &self,
        coef: &ArrayView1<f64>,
        loadings: &ArrayView2<f64>,
        truth: &ArrayView1<f64>,
        r_max: usize,
        sse: &mut [f64],
    ) {
        debug_assert_eq!(sse.len(), r_max);
        let m = truth.len();
        let mut pred = Array1::<f64>::zeros(m);
        for r in 1..=r_max {
            let k = r - 1;
            if k < self.eff_rank {
                pred.scaled_add(coef[k], &loadings.row(k));
            }
            let mut acc = 0.0;
            for i in 0..m {
                let d = pred[i] - truth[i];
                acc += d * d;
            }
            sse[r - 1] += acc;
        }
    }
}

/// Dense copy of the selected columns, in the given order.
pub(crate) fn take_columns(src: &ArrayView2<f64>, cols: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((src.nrows(), cols.len()));
    for (j, &c) in cols.iter().enumerate() {
        out.column_mut(j).assign(&src.column(c));
    }
    out
}

/// Gram and cross-Gram accumulated over a set of rows.
///
/// `gram = Y_OᵀY_O` over the rows; `cross = Y_Oᵀ·Y_eval` for the evaluation
/// columns (typically the weighted target block restricted to missing grid
/// points). Subtraction gives training-subset Grams without touching the
/// row data again.
#[derive(Clone)]
pub(crate) struct GramPair {
    pub gram: Array2<f64>,
    pub cross: Array2<f64>,
}

impl GramPair {
    pub fn compute(y_obs: &ArrayView2<f64>, y_eval: &ArrayView2<f64>) -> Self {
        GramPair { gram: y_obs.t().dot(y_obs), cross: y_obs.t().dot(y_eval) }
    }

    /// Gram over a subset of rows only.
    pub fn compute_rows(y_obs: &ArrayView2<f64>, y_eval: &ArrayView2<f64>, rows: &[usize]) -> Self {
        let n_o = y_obs.ncols();
        let m = y_eval.ncols();
        let mut gram = Array2::zeros((n_o, n_o));
        let mut cross = Array2::zeros((n_o, m));
        for &t in rows {
            let yo = y_obs.row(t);
            let ye = y_eval.row(t);
            for a in 0..n_o {
                let ya = yo[a];
                if ya == 0.0 {
                    continue;
                }
                for b in 0..n_o {
                    gram[(a, b)] += ya * yo[b];
                }
                for b in 0..m {
                    cross[(a, b)] += ya * ye[b];
                }
            }
        }
        GramPair { gram, cross }
    }

    /// `self - other`, entrywise.
    pub fn minus(&self, other: &GramPair) -> GramPair {
        GramPair { gram: &self.gram - &other.gram, cross: &self.cross - &other.cross }
    }

    /// Downdate by a single row pair.
    pub fn minus_row(&self, y_obs_row: &ArrayView1<f64>, y_eval_row: &ArrayView1<f64>) -> GramPair {
        let n_o = self.gram.nrows();
        let m = self.cross.ncols();
        let mut gram = self.gram.clone();
        let mut cross = self.cross.clone();
        for a in 0..n_o {
            let ya = y_obs_row[a];
            for b in 0..n_o {
                gram[(a, b)] -= ya * y_obs_row[b];
            }
            for b in 0..m {
                cross[(a, b)] -= ya * y_eval_row[b];
            }
        }
        GramPair { gram, cross }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::recon::{fit_factors, project_curve, reconstruct_grid};
    use crate::testutil::factor_dataset;

    #[test]
    fn gram_route_matches_public_reconstruction() {
        // Noisy data, subset fit: the downdated-Gram evaluation must agree
        // with assembling the subset and running the public pipeline.
        let masked: Vec<(usize, usize)> = (12..20).map(|i| (11, i)).collect();
        let ds = factor_dataset(12, 20, 4, 0.05, 7, &masked);
        let pattern = ds.pattern_of(11).unwrap();
        let stacked = ds.assemble(&pattern, &[1.0]).unwrap();
        let missing = pattern.missing_indices();

        // Evaluation columns: weighted target at the missing grid points.
        let n_grid = ds.n_grid();
        let y_eval = {
            let target = stacked.y_complete.slice(ndarray::s![.., 0..n_grid]);
            let cols: Vec<_> = missing.iter().map(|&i| target.column(i).to_owned()).collect();
            let views: Vec<_> = cols.iter().map(|c| c.view()).collect();
            ndarray::stack(ndarray::Axis(1), &views).unwrap()
        };

        let full = GramPair::compute(&stacked.y_observed.view(), &y_eval.view());
        // Leave out stacked row 3.
        let held_out = 3usize;
        let down = full.minus_row(
            &stacked.y_observed.row(held_out),
            &y_eval.row(held_out),
        );
        let rank = 4;
        let eig = GramEigen::new(&down.gram.view(), rank).unwrap();
        let loadings = eig.project_columns(&down.cross.view());
        let coef = eig.coefficients(&stacked.y_observed.row(held_out));
        let fast = eig.predict(&coef.view(), &loadings.view(), rank);

        // Reference: public path on the explicit row subset.
        let rows: Vec<usize> = stacked
            .rows
            .iter()
            .enumerate()
            .filter(|&(r, _)| r != held_out)
            .map(|(_, &t)| t)
            .collect();
        let sub = ds.assemble_rows(&pattern, &[1.0], &rows).unwrap();
        let fit = fit_factors(&sub, rank).unwrap();
        let y_partial = ds
            .partial_row(stacked.rows[held_out], &pattern, &[1.0])
            .unwrap();
        let scores = project_curve(&fit, &y_partial.view()).unwrap();
        let reference = reconstruct_grid(&fit, &scores.view()).unwrap();

        for (j, &i) in missing.iter().enumerate() {
            assert!(
                (fast[j] - reference[i]).abs() < 1e-9,
                "missing col {i}: fast {} vs reference {}",
                fast[j],
                reference[i]
            );
        }
    }

    #[test]
    fn nested_sse_matches_per_rank_predictions() {
        let ds = factor_dataset(10, 15, 3, 0.02, 3, &[]);
        let pattern = crate::dataset::ObservationPattern::new(
            (0..15).map(|i| i < 10).collect(),
        );
        let stacked = ds.assemble(&pattern, &[1.0]).unwrap();
        let missing = pattern.missing_indices();
        let y_eval = {
            let target = stacked.y_complete.slice(ndarray::s![.., 0..15]);
            let cols: Vec<_> = missing.iter().map(|&i| target.column(i).to_owned()).collect();
            let views: Vec<_> = cols.iter().map(|c| c.view()).collect();
            ndarray::stack(ndarray::Axis(1), &views).unwrap()
        };
        let full = GramPair::compute(&stacked.y_observed.view(), &y_eval.view());
        let r_max = 5;
        let eig = GramEigen::new(&full.gram.view(), r_max).unwrap();
        let loadings = eig.project_columns(&full.cross.view());
        let row = stacked.y_observed.row(2);
        let truth = y_eval.row(2);
        let coef = eig.coefficients(&row);
        let mut sse = vec![0.0; r_max];
        eig.nested_sse(&coef.view(), &loadings.view(), &truth.view(), r_max, &mut sse);
        for r in 1..=r_max {
            let pred = eig.predict(&coef.view(), &loadings.view(), r);
            let direct: f64 = pred
                .iter()
                .zip(truth.iter())
                .map(|(p, t)| (p - t) * (p - t))
                .sum();
            assert!((sse[r - 1] - direct).abs() < 1e-12 * (1.0 + direct));
        }
    }

    #[test]
    fn fold_gram_subtraction_is_exact() {
        let ds = factor_dataset(9, 12, 3, 0.1, 11, &[]);
        let pattern = crate::dataset::ObservationPattern::new((0..12).map(|i| i < 8).collect());
        let stacked = ds.assemble(&pattern, &[1.0]).unwrap();
        let y_eval = stacked.y_complete.slice(ndarray::s![.., 8..12]).to_owned();
        let full = GramPair::compute(&stacked.y_observed.view(), &y_eval.view());
        let fold = vec![1usize, 4, 7];
        let part = GramPair::compute_rows(&stacked.y_observed.view(), &y_eval.view(), &fold);
        let train = full.minus(&part);
        let train_rows: Vec<usize> = (0..9).filter(|r| !fold.contains(r)).collect();
        let direct = GramPair::compute_rows(&stacked.y_observed.view(), &y_eval.view(), &train_rows);
        let max_g = train
            .gram
            .iter()
            .zip(direct.gram.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        let max_c = train
            .cross
            .iter()
            .zip(direct.cross.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_g < 1e-10 && max_c < 1e-10, "gram {max_g}, cross {max_c}");
    }
}
