//! Estimation in Wicksell's problem.
//!
//! Spheres with squared radius `X ~ F` are cut by a random plane; the observed
//! squared circle radii `Z` have density `g`. This crate simulates that
//! mechanism, inverts it with the naive plug-in and the isotonic inverse
//! estimator (IIE), simulates the Gaussian-process limit in the locally flat
//! regime, and evaluates the local asymptotic normality path used for the
//! efficiency bound.

pub mod error;
pub mod gp_limit;
pub mod harness;
pub mod isotonic;
pub mod lan;
pub mod models;
pub mod quadrature;
pub mod rng;
pub mod sampler;
pub mod series;
pub mod svg;

pub use error::{Error, Result};
pub use gp_limit::{GpSpec, LxSample, NormalFit};
pub use isotonic::ConcaveMajorant;
pub use sampler::{SampleSet, Sampler};
pub use lan::{LanReport, PerturbationSpec};
pub use models::{CdfKind, CdfModel, ObservationModel, SmoothnessSpec};
pub use rng::RngStream;
