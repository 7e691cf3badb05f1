//! Nonparametric estimation of the coefficient prior `G` in a mixture of
//! linear regressions `y_i = x_iᵀβ_i + σ z_i`, `β_i ~ G`.
//!
//! Two EM schemes are provided: [`npmle`] iterates a density on a tensor grid,
//! [`npkmle`] moves the particles of a Gaussian kernel density estimate.
//! [`postprocess`] turns continuous estimates into modes or ridges, and
//! [`metrics`] scores estimates against known truth.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod cv;
pub mod error;
pub mod estep;
pub mod experiment;
pub mod kernels;
pub mod metrics;
pub mod model;
pub mod npkmle;
pub mod npmle;
pub mod postprocess;
pub mod quadrature;
pub mod rng;
pub mod sims;
pub mod transport;

pub use error::{Error, Result};
pub use kernels::{oversmooth_bandwidth, scale_estimate_u, KernelProfile};
pub use model::{
    gaussian_density, incomplete_loglik, posterior_cluster_assign, Dataset, DiscreteMeasure, FitReport, GridDensity, ParticleKde,
};
pub use quadrature::{IntegrationPolicy, QuadratureGrid};
