//! Deterministic fixtures shared across module tests.

use ndarray::Array2;

use crate::dataset::{FunctionalDataset, Grid};

/// Deterministic pseudo-random matrix in [-1, 1] (splitmix64 based).
pub(crate) fn fixture_matrix(m: usize, n: usize, seed: u64) -> Array2<f64> {
    let mut state = seed;
    let mut next = move || {
        state = state.wrapping_add(0x9E3779B97F4A7C15);
        let mut z = state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
        z = z ^ (z >> 31);
        (z >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
    };
    Array2::from_shape_fn((m, n), |_| next())
}

/// Smooth loading function for synthetic factor panels.
pub(crate) fn loading(k: usize, u: f64) -> f64 {
    use std::f64::consts::PI;
    match k % 4 {
        0 => (PI * u).sin() + 0.5,
        1 => (2.0 * PI * u).cos(),
        2 => (3.0 * PI * u).sin() - 0.2,
        _ => 1.0 - 2.0 * u,
    }
}

/// Exact rank-`r` panel `X = F·Λ` with optional noise and masked cells.
///
/// Factor scores scale as `0.8^k` so the spectrum is well separated. Noise
/// is added to the target only; a deterministic seed ladder keeps repeated
/// builds identical.
pub(crate) fn factor_dataset(
    t: usize,
    n: usize,
    rank: usize,
    noise: f64,
    seed: u64,
    masked: &[(usize, usize)],
) -> FunctionalDataset {
    let grid = Grid::equispaced(n).unwrap();
    let scores = fixture_matrix(t, rank, seed);
    let mut target = Array2::zeros((t, n));
    for s in 0..t {
        for i in 0..n {
            let u = grid.points()[i];
            let mut acc = 0.0;
            for k in 0..rank {
                acc += scores[(s, k)] * 0.8f64.powi(k as i32) * loading(k, u);
            }
            target[(s, i)] = acc;
        }
    }
    if noise > 0.0 {
        let e = fixture_matrix(t, n, seed ^ 0xDEAD_BEEF);
        target = &target + &(&e * noise);
    }
    let mut mask = Array2::from_elem((t, n), true);
    for &(s, i) in masked {
        mask[(s, i)] = false;
    }
    FunctionalDataset::new(grid, target, mask, vec![]).unwrap()
}
