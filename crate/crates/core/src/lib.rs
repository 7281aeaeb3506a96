//! Error-rate-controlled classification for multiclass mixture models.
//!
//! Given posterior probabilities from a finite mixture (exact, or estimated
//! by EM), this crate builds restricted classification rules that abstain on
//! ambiguous points: the plain MAP rule, the `1 - alpha` thresholded rule,
//! and the optimal rule that minimizes the false-negative rate subject to a
//! multiclass FDR (MFDR) or Neyman-Pearson (MNPR) constraint. A simulation
//! harness reproduces replicated benchmark grids on Gaussian and Student
//! mixtures.
//!
//! The `parallel` feature (on by default) runs simulation grids on a rayon
//! thread pool; without it every entry point falls back to sequential
//! execution with identical results.

pub mod control;
pub mod error;
pub mod eval;
pub mod io;
pub mod mixture;
pub mod rules;
pub mod sim;

mod seed;

pub use error::{Error, Result};
