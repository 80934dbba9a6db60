//! Spatial prediction for areal-unit data with missing target values.
//!
//! The crate fits and compares five models on datasets of areal units
//! (id, centroid, feature vector, optionally missing target):
//!
//! * `lm` — normal linear model,
//! * `car` — Gaussian Leroux conditional autoregressive model on a
//!   D-nearest-neighbour graph, with exact latent-field integration,
//! * `rf` — regression random forest with out-of-bag prediction intervals,
//! * `grf` — geographically weighted random forest,
//! * `carforest` — the iterative fusion of the forest and the CAR model.
//!
//! Everything numeric is generic over [`scalar::Real`] (f32 or f64); the
//! aliases at the crate root fix f64, which is what the CLI uses.

pub mod error;
pub mod scalar;

pub mod linalg;

pub mod data;
pub mod graph;

pub mod car;
pub mod forest;
pub mod fusion;
pub mod grf;
pub mod lm;

pub mod benchmark;
pub mod metrics;
pub mod models;
pub mod prediction;
pub mod tune;

pub use error::{Error, Result};
pub use scalar::Real;

/// Default-precision aliases for the main public types.
pub type Dataset = data::ArealDataset<f64>;
pub type Scenario = data::SimulationScenario<f64>;
pub type Predictions = prediction::PredictionSet<f64>;
pub type CarModel = car::CarFit<f64>;
pub type ForestModel = forest::Forest<f64>;
pub type Report = benchmark::BenchmarkReport<f64>;


