//! Ensemble Gaussian mixture filtering with physicality discriminators.
//!
//! The crate provides the EnKF, EnGMF, and discriminator-informed EnGMF
//! analysis updates, the Ikeda and Lorenz '63 test systems, a rational
//! quadratic spline normalizing flow that can be trained on attractor data
//! and used as a density-threshold discriminator, and an experiment harness
//! that compares the filters over ensemble sizes and Monte Carlo seeds.

pub mod autodiff;
pub mod discriminator;
pub mod dynamics;
pub mod error;
pub mod filters;
pub mod flow;
pub mod harness;
pub mod linalg;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
