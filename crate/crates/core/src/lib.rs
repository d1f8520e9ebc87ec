//! Desk-scale laboratory for score-based diffusion models as density estimators.
//!
//! The pipeline: a ground-truth density built from tensor-product B-splines
//! ([`bspline`]), its exact diffused score ([`oracle`]), denoising score matching
//! on small ReLU networks ([`training`]), backward-SDE sampling with exact
//! Gaussian cell transitions ([`sampler`]) and distribution distances
//! ([`metrics`]). [`relu_net`] holds the explicit sparse network algebra with
//! size ledgers and grid-scan error certificates; [`manifold`] covers data on a
//! linear subspace; [`experiments`] wires everything into config-driven runs.

pub mod bspline;
pub mod error;
pub mod experiments;
pub mod manifold;
pub mod metrics;
pub mod oracle;
pub mod quadrature;
pub mod relu_net;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod score;
pub mod training;

pub use error::{Error, Result};
