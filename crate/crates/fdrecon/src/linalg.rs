//! Deterministic dense linear algebra kernels.
//!
//! Everything here is written for reproducibility first: fixed iteration
//! order, no randomness, no threading, and a pinned sign convention, so
//! repeated calls on identical input return bit-identical results.
//!
//! The singular value decomposition is computed through a symmetric
//! eigendecomposition of the smaller Gram matrix (`aᵀa` or `aaᵀ`), which is
//! both faster and easier to make deterministic than bidiagonalization for
//! the short-and-wide / tall-and-thin matrices produced by stacked
//! functional data.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use thiserror::Error;

/// Relative threshold below which a singular value is treated as zero.
pub const SINGULAR_REL_TOL: f64 = 1e-12;

/// Reciprocal condition number below which a least squares system is
/// rejected as rank deficient.
pub const RCOND_MIN: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("rank {rank} out of range for a {rows}x{cols} matrix")]
    Rank { rank: usize, rows: usize, cols: usize },
    #[error("eigen iteration failed to converge after {iterations} iterations")]
    Numerical { iterations: usize },
    #[error("rank deficient system: reciprocal condition {rcond:.3e} below {min:.0e}")]
    Singular { rcond: f64, min: f64 },
}

/// Rank-`r` singular value decomposition `a ≈ u · diag(d) · vᵀ`.
///
/// `u` is `m×r` and `v` is `n×r`, both with orthonormal columns; `d` holds
/// the `r` largest singular values in non-increasing order. Singular values
/// below `SINGULAR_REL_TOL · d[0]` are clamped to exactly zero and their
/// vectors completed by Gram-Schmidt so the orthonormality invariants hold
/// even past the numerical rank.
#[derive(Debug, Clone)]
pub struct TruncatedSvd {
    pub u: Array2<f64>,
    pub d: Vec<f64>,
    pub v: Array2<f64>,
}

/// Full symmetric eigendecomposition with eigenvalues sorted descending.
///
/// Returns `(values, vectors)` where `vectors.column(k)` is the unit
/// eigenvector for `values[k]`. Input must be symmetric; only the lower
/// triangle is read. Deterministic: Householder tridiagonalization followed
/// by implicit-shift QL with a fixed sweep order.
pub(crate) fn sym_eigen_desc(g: &ArrayView2<f64>) -> Result<(Vec<f64>, Array2<f64>), LinalgError> {
    let n = g.nrows();
    assert_eq!(n, g.ncols(), "eigen input must be square");
    if n == 0 {
        return Ok((Vec::new(), Array2::zeros((0, 0))));
    }
    // zt holds eigenvector candidates as rows so QL rotations touch
    // contiguous memory.
    let mut zt = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..=i {
            zt[i * n + j] = g[(i, j)];
            zt[j * n + i] = g[(i, j)];
        }
    }
    let mut d = vec![0.0f64; n];
    let mut e = vec![0.0f64; n];
    tred2(&mut zt, n, &mut d, &mut e);
    tql2(&mut zt, n, &mut d, &mut e)?;

    // Stable descending sort; ties keep QL output order.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| d[b].partial_cmp(&d[a]).unwrap().then(a.cmp(&b)));
    let values: Vec<f64> = order.iter().map(|&k| d[k]).collect();
    let mut vectors = Array2::zeros((n, n));
    for (col, &k) in order.iter().enumerate() {
        for i in 0..n {
            vectors[(i, col)] = zt[k * n + i];
        }
    }
    Ok((values, vectors))
}

/// Householder reduction to tridiagonal form with accumulated transforms.
///
/// On exit `d` holds the diagonal, `e[1..]` the subdiagonal, and the rows of
/// `zt` the accumulated orthogonal transform (identity-seeded). Classic
/// EISPACK `tred2` adapted to a row-per-vector layout.
fn tred2(zt: &mut [f64], n: usize, d: &mut [f64], e: &mut [f64]) {
    // Work on the conventional column layout via transposed indexing:
    // a[i][j] == zt[j*n + i] keeps the final accumulation row-contiguous.
    macro_rules! a {
        ($i:expr, $j:expr) => {
            zt[$j * n + $i]
        };
    }
    for i in (1..n).rev() {
        let l = i - 1;
        let mut h = 0.0;
        if l > 0 {
            let mut scale = 0.0;
            for k in 0..=l {
                scale += a!(i, k).abs();
            }
            if scale == 0.0 {
                e[i] = a!(i, l);
            } else {
                for k in 0..=l {
                    a!(i, k) /= scale;
                    h += a!(i, k) * a!(i, k);
                }
                let f = a!(i, l);
                let g = if f >= 0.0 { -h.sqrt() } else { h.sqrt() };
                e[i] = scale * g;
                h -= f * g;
                a!(i, l) = f - g;
                let mut f_acc = 0.0;
                for j in 0..=l {
                    a!(j, i) = a!(i, j) / h;
                    let mut g_acc = 0.0;
                    for k in 0..=j {
                        g_acc += a!(j, k) * a!(i, k);
                    }
                    for k in (j + 1)..=l {
                        g_acc += a!(k, j) * a!(i, k);
                    }
                    e[j] = g_acc / h;
                    f_acc += e[j] * a!(i, j);
                }
                let hh = f_acc / (h + h);
                for j in 0..=l {
                    let f = a!(i, j);
                    let g = e[j] - hh * f;
                    e[j] = g;
                    for k in 0..=j {
                        a!(j, k) -= f * e[k] + g * a!(i, k);
                    }
                }
            }
        } else {
            e[i] = a!(i, l);
        }
        d[i] = h;
    }
    d[0] = 0.0;
    e[0] = 0.0;
    for i in 0..n {
        if d[i] != 0.0 {
            for j in 0..i {
                let mut g = 0.0;
                for k in 0..i {
                    g += a!(i, k) * a!(k, j);
                }
                for k in 0..i {
                    a!(k, j) -= g * a!(k, i);
                }
            }
        }
        d[i] = a!(i, i);
        a!(i, i) = 1.0;
        for j in 0..i {
            a!(j, i) = 0.0;
            a!(i, j) = 0.0;
        }
    }
}

/// Implicit-shift QL iteration on a tridiagonal matrix, rotating the rows of
/// `zt` in step. Converges quadratically; the per-eigenvalue iteration cap
/// makes non-convergence an explicit error instead of a silent spin.
fn tql2(zt: &mut [f64], n: usize, d: &mut [f64], e: &mut [f64]) -> Result<(), LinalgError> {
    const MAX_ITER: usize = 50;
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = 0.0;
    for l in 0..n {
        let mut iter = 0;
        loop {
            let mut m = l;
            while m + 1 < n {
                let dd = d[m].abs() + d[m + 1].abs();
                if e[m].abs() <= f64::EPSILON * dd {
                    break;
                }
                m += 1;
            }
            if m == l {
                break;
            }
            iter += 1;
            if iter > MAX_ITER {
                return Err(LinalgError::Numerical { iterations: MAX_ITER });
            }
            let mut g = (d[l + 1] - d[l]) / (2.0 * e[l]);
            let mut r = g.hypot(1.0);
            let sign_r = if g >= 0.0 { r.abs() } else { -r.abs() };
            g = d[m] - d[l] + e[l] / (g + sign_r);
            let (mut s, mut c) = (1.0f64, 1.0f64);
            let mut p = 0.0f64;
            for i in (l..m).rev() {
                let mut f = s * e[i];
                let b = c * e[i];
                r = f.hypot(g);
                e[i + 1] = r;
                if r == 0.0 {
                    d[i + 1] -= p;
                    e[m] = 0.0;
                    break;
                }
                s = f / r;
                c = g / r;
                g = d[i + 1] - p;
                r = (d[i] - g) * s + 2.0 * c * b;
                p = s * r;
                d[i + 1] = g + p;
                g = c * r - b;
                let (zi, zi1) = row_pair(zt, n, i, i + 1);
                for k in 0..n {
                    f = zi1[k];
                    zi1[k] = s * zi[k] + c * f;
                    zi[k] = c * zi[k] - s * f;
                }
            }
            if r == 0.0 && m > l + 1 {
                continue;
            }
            d[l] -= p;
            e[l] = g;
            e[m] = 0.0;
        }
    }
    Ok(())
}

/// Mutable views of rows `i` and `j` (`i < j`) of the `n×n` row-major `zt`.
fn row_pair(zt: &mut [f64], n: usize, i: usize, j: usize) -> (&mut [f64], &mut [f64]) {
    debug_assert!(i < j);
    let (head, tail) = zt.split_at_mut(j * n);
    (&mut head[i * n..i * n + n], &mut tail[..n])
}

/// Truncated singular value decomposition of `a` with `1 ≤ r ≤ min(m, n)`.
///
/// The decomposition is obtained from the symmetric eigendecomposition of
/// the smaller Gram matrix; the other side's vectors are recovered as
/// `a·v/d` (or `aᵀ·u/d`) and re-orthonormalized, with clamped zero singular
/// values getting their vectors completed from the standard basis. Column
/// signs are pinned by requiring the largest-magnitude entry of each `v`
/// column to be positive (ties: lowest index wins), flipping `u` in step, so
/// the factorization is unique and reproducible.
pub fn truncated_svd(a: &ArrayView2<f64>, r: usize) -> Result<TruncatedSvd, LinalgError> {
    let (m, n) = a.dim();
    let kmax = m.min(n);
    if r < 1 || r > kmax {
        return Err(LinalgError::Rank { rank: r, rows: m, cols: n });
    }
    debug_assert!(a.iter().all(|x| x.is_finite()), "svd input must be finite");

    if n <= m {
        let gram = a.t().dot(a);
        let (evals, evecs) = sym_eigen_desc(&gram.view())?;
        let mut d = Vec::with_capacity(r);
        let mut v = Array2::zeros((n, r));
        for k in 0..r {
            d.push(evals[k].max(0.0).sqrt());
            v.column_mut(k).assign(&evecs.column(k));
        }
        clamp_small(&mut d, n);
        // Recover u = a·v/d for positive singular values.
        let mut u = Array2::zeros((m, r));
        for k in 0..r {
            if d[k] > 0.0 {
                let av = a.dot(&v.column(k));
                u.column_mut(k).assign(&(&av / d[k]));
            }
        }
        orthonormalize_columns(&mut u, &d);
        apply_sign_convention(&mut u, &d, &mut v);
        Ok(TruncatedSvd { u, d, v })
    } else {
        let gram = a.dot(&a.t());
        let (evals, evecs) = sym_eigen_desc(&gram.view())?;
        let mut d = Vec::with_capacity(r);
        let mut u = Array2::zeros((m, r));
        for k in 0..r {
            d.push(evals[k].max(0.0).sqrt());
            u.column_mut(k).assign(&evecs.column(k));
        }
        clamp_small(&mut d, m);
        let mut v = Array2::zeros((n, r));
        for k in 0..r {
            if d[k] > 0.0 {
                let atu = a.t().dot(&u.column(k));
                v.column_mut(k).assign(&(&atu / d[k]));
            }
        }
        orthonormalize_columns(&mut v, &d);
        apply_sign_convention(&mut u, &d, &mut v);
        Ok(TruncatedSvd { u, d, v })
    }
}

/// Clamp numerically null singular values to exactly zero.
///
/// The Gram route computes small singular values only to about `√ε`
/// relative accuracy (eigenvalues of `aᵀa` carry an `ε·γ_max` noise floor),
/// so exact rank deficiency surfaces near `√ε·d[0] ≈ 1e-8·d[0]`, never at
/// `1e-12·d[0]`. The effective threshold is therefore the larger of the
/// nominal `SINGULAR_REL_TOL` and the standard numerical-rank cutoff
/// `√(k·ε)·d[0]`, with `k` the Gram dimension.
fn clamp_small(d: &mut [f64], gram_dim: usize) {
    if d.is_empty() {
        return;
    }
    let noise_floor = (gram_dim as f64 * f64::EPSILON).sqrt();
    let cutoff = SINGULAR_REL_TOL.max(noise_floor) * d[0];
    for x in d.iter_mut() {
        if *x <= cutoff {
            *x = 0.0;
        }
    }
}

/// Repair the cross-computed factor so its columns are exactly orthonormal.
///
/// A column recovered as `a·v/d[k]` inherits norm and orthogonality errors
/// of order `ε·(d[0]/d[k])²` (the Gram eigenvalue `d[k]²` carries an
/// absolute `ε·d[0]²` error), which becomes visible once the spectrum spans
/// about four orders of magnitude. Each positive-`d` column is therefore
/// orthogonalized against the leading columns and renormalized; columns with
/// a clamped zero singular value, or whose cross-computed direction collapses
/// into the span of earlier columns, are filled with standard basis vectors
/// taken in index order. Everything is fixed-order, so the result is
/// deterministic.
fn orthonormalize_columns(q: &mut Array2<f64>, d: &[f64]) {
    let (m, r) = q.dim();
    let mut next_candidate = 0usize;
    for k in 0..r {
        if d[k] > 0.0 {
            let mut col = q.column(k).to_owned();
            let norm = orthogonalize_against_leading(q, k, &mut col);
            if norm > 1e-6 {
                q.column_mut(k).assign(&(&col / norm));
                continue;
            }
        }
        while next_candidate < m {
            let j = next_candidate;
            next_candidate += 1;
            let mut e = Array1::zeros(m);
            e[j] = 1.0;
            let norm = orthogonalize_against_leading(q, k, &mut e);
            if norm > 1e-6 {
                q.column_mut(k).assign(&(&e / norm));
                break;
            }
        }
    }
}

/// Orthogonalize `v` against the first `k` columns of `q` with two
/// Gram-Schmidt passes ("twice is enough") and return its remaining norm.
fn orthogonalize_against_leading(q: &Array2<f64>, k: usize, v: &mut Array1<f64>) -> f64 {
    for _pass in 0..2 {
        for c in 0..k {
            let proj = q.column(c).dot(&*v);
            v.scaled_add(-proj, &q.column(c));
        }
    }
    v.dot(v).sqrt()
}

/// Pin signs: each `v` column's largest-magnitude entry is made positive and
/// the paired `u` column flips with it. Columns with zero singular value are
/// pinned independently since `a` no longer links the pair.
fn apply_sign_convention(u: &mut Array2<f64>, d: &[f64], v: &mut Array2<f64>) {
    for k in 0..d.len() {
        if dominant_entry(&v.column(k)) < 0.0 {
            v.column_mut(k).mapv_inplace(|x| -x);
            if d[k] > 0.0 {
                u.column_mut(k).mapv_inplace(|x| -x);
            }
        }
        if d[k] == 0.0 && dominant_entry(&u.column(k)) < 0.0 {
            u.column_mut(k).mapv_inplace(|x| -x);
        }
    }
}

/// Value of the largest-magnitude entry; ties resolved to the lowest index.
fn dominant_entry(col: &ArrayView1<f64>) -> f64 {
    let mut best = 0.0f64;
    let mut best_abs = -1.0f64;
    for &x in col.iter() {
        if x.abs() > best_abs {
            best_abs = x.abs();
            best = x;
        }
    }
    best
}

/// Minimum-norm least squares solution of `x·β ≈ y` through the normal
/// equations, for thin well-conditioned systems (`p ≤ m`).
///
/// Fails with `Singular` when the reciprocal condition number of `xᵀx`
/// (smallest over largest eigenvalue) drops below `RCOND_MIN`.
pub fn least_squares(x: &ArrayView2<f64>, y: &ArrayView1<f64>) -> Result<Array1<f64>, LinalgError> {
    let (m, p) = x.dim();
    if p == 0 || p > m {
        return Err(LinalgError::Rank { rank: p, rows: m, cols: p });
    }
    assert_eq!(m, y.len(), "rhs length must match rows");
    let gram = x.t().dot(x);
    let (evals, evecs) = sym_eigen_desc(&gram.view())?;
    let lmax = evals[0];
    let lmin = evals[p - 1];
    let rcond = if lmax > 0.0 { (lmin / lmax).max(0.0) } else { 0.0 };
    if rcond < RCOND_MIN {
        return Err(LinalgError::Singular { rcond, min: RCOND_MIN });
    }
    let xty = x.t().dot(y);
    let proj = evecs.t().dot(&xty);
    let scaled = Array1::from_iter(proj.iter().zip(evals.iter()).map(|(&c, &l)| c / l));
    Ok(evecs.dot(&scaled))
}
