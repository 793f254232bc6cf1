//! Affinity-weighted embedding models.
//!
//! A bilinear embedding scorer `f(x, y) = x^T U^T V y` trained with the WARP
//! ranking loss, plus an affinity function `G` built from the learned
//! embedding via kernel-weighted nearest neighbors. The iterative pipeline
//! trains a base model, materializes `G` over the training set, and retrains
//! a reweighted model `f(x, y) = G(x, y) * x^T U^T V y` in the same
//! embedding-space framework.

// Validators use negated comparisons (`!(x > 0.0)`) on purpose: the negation
// is true for NaN, so out-of-range and NaN inputs fail the same check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod affinity;
pub mod data;
pub mod eval;
pub mod linear;
pub mod pipeline;
pub mod util;
