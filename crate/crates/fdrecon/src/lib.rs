//! Reconstruction of partially observed functional data.
//!
//! Curves sampled on a common grid are split into a complete subsample and
//! curves with missing stretches. A low-rank factor model fitted to the
//! complete subsample (optionally stacked with weighted covariate channels)
//! projects each incomplete curve onto the estimated factor space and fills
//! in its missing values. On top of that sit cross-validated rank selection
//! ([`selection`]), simultaneous prediction bands ([`bands`]), and a
//! simulation study harness ([`sim`]).

pub mod bands;
pub mod dataset;
pub(crate) mod engine;
pub mod io;
pub mod linalg;
pub mod recon;
pub mod selection;
pub mod sim;

#[cfg(test)]
pub(crate) mod testutil;
