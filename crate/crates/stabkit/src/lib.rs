//! Local loss-landscape stabilization under one-sample growth.
//!
//! This crate measures how an empirical risk `L_k` deforms when one training
//! example is added, through a family of criteria that differ in how the
//! increment field `L_{k+1}(w) - L_k(w)` is probed near a minimizer:
//!
//! - `delta1`: the pointwise absolute increment at the minimizer.
//! - `delta_p_mc`: the p-th absolute moment under an isotropic Gaussian probe.
//! - `direct_mc`: the mean-squared increment under a Gaussian probe restricted
//!   to the top-D eigenspace of the empirical Hessian.
//! - `quad_mc` / `gm_closed_form`: the same subspace criterion evaluated on a
//!   local quadratic surrogate, by sampling or in closed form.
//!
//! Modules:
//!
//! - [`numerics`]: vectors, symmetric matrices, dense eigendecomposition,
//!   SPD solves, and seeded random streams.
//! - [`loss_family`]: growable per-sample loss families (an exactly solvable
//!   quadratic ensemble and a small smooth MLP) with gradients, Hessian-vector
//!   products, minimizers, and the exact one-sample increment identity.
//! - [`curvature`]: matrix-free construction of the principal curvature
//!   subspace by deflated power iteration on Hessian-vector products.
//! - [`criteria`]: the stabilization criteria, their estimators, surrogate
//!   coefficients, closed forms, and the mean-squared rate bound.
//! - [`experiments`]: sweep runners that reproduce the decay, subspace-ratio,
//!   proxy-validity, and estimator-cost experiments, emitting CSV records.
//! - [`checks`]: the self-contained verification suite behind `stabkit --check`.

pub mod checks;
pub mod criteria;
pub mod curvature;
pub mod error;
pub mod experiments;
pub mod loss_family;
pub mod numerics;

pub use error::{Error, Result};
