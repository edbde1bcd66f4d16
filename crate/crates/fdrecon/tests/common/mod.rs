//! Helpers shared by the integration suites: an explicit normal sampler and
//! a curve generator mirroring the study population, kept outside the crate
//! so tests draw their randomness through an independent route.

#![allow(dead_code)]

use fdrecon::sim::{basis_value, mean_function, EigenDecay, KERNEL_B, MU_COEFFS, N_COMPONENTS};
use rand::RngCore;
use rand_chacha::ChaCha20Rng;

/// Standard normal via Box-Muller on the raw bit stream.
pub fn normal(rng: &mut ChaCha20Rng) -> f64 {
    let unit = |bits: u64| ((bits >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64);
    let u1 = unit(rng.next_u64());
    let u2 = unit(rng.next_u64());
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Draws one curve of the study's two-channel population: basis scores with
/// the requested eigenvalue decay, the induced covariate, and measurement
/// noise on both channels. Returns (noisy target, noisy covariate, signal).
pub fn draw_curve(
    rng: &mut ChaCha20Rng,
    points: &[f64],
    decay: EigenDecay,
    sigma: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let xi: Vec<f64> =
        (1..=N_COMPONENTS).map(|k| decay.lambda(k).sqrt() * normal(rng)).collect();
    let c1 = MU_COEFFS[0] + xi[0];
    let c2 = MU_COEFFS[1] + xi[1];
    let (a1, a2) = (
        KERNEL_B[0] * c1 + KERNEL_B[1] * c2,
        KERNEL_B[2] * c1 + KERNEL_B[3] * c2,
    );
    let mut target = Vec::with_capacity(points.len());
    let mut covariate = Vec::with_capacity(points.len());
    let mut signal = Vec::with_capacity(points.len());
    for &u in points {
        let mut x0 = mean_function(u);
        for (k, &s) in xi.iter().enumerate() {
            x0 += s * basis_value(k + 1, u);
        }
        let x1 = a1 * basis_value(1, u) + a2 * basis_value(2, u);
        signal.push(x0);
        target.push(x0 + sigma * normal(rng));
        covariate.push(x1 + sigma * normal(rng));
    }
    (target, covariate, signal)
}
