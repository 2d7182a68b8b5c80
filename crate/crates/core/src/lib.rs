//! Spatial guidance of a synthetic diffusion backbone through cross-attention
//! statistics.
//!
//! The crate is generic over the scalar type ([`Scalar`], implemented for
//! `f32` and `f64`); the aliases below fix it to `f64`, which every tolerance
//! in the test suites assumes.

pub mod backbone;
pub mod evaluator;
pub mod experiment;
pub mod error;
pub mod grid;
pub mod guidance;
pub mod losses;
pub mod prompt;
pub mod scalar;
pub mod stats;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Grid = grid::ScalarGrid<f64>;
pub type Grid32 = grid::ScalarGrid<f32>;
pub type Latent = grid::Latent<f64>;
pub type Latent32 = grid::Latent<f32>;
pub type Backbone = backbone::Backbone<f64>;
pub type Backbone32 = backbone::Backbone<f32>;
pub type Schedule = backbone::Schedule<f64>;
pub type AttentionStack = backbone::AttentionStack<f64>;
pub type DenoiserOutput = backbone::DenoiserOutput<f64>;
pub type Centroid = stats::Centroid<f64>;
pub type TokenStats = stats::TokenStats<f64>;
pub type LossBreakdown = losses::LossBreakdown<f64>;
pub type StepTrace = guidance::StepTrace<f64>;
pub type SampleOutput = guidance::SampleOutput<f64>;
