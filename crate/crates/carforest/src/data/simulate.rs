//! Synthetic areal datasets with known feature effects and spatial structure,
//! for controlled verification of the models.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{ArealDataset, ArealUnit, TargetScale};
use crate::error::{Error, Result};
use crate::graph::{knn_adjacency, leroux_structure};
use crate::linalg::{reverse_cuthill_mckee, CholeskySymbolic};
use crate::scalar::{real, Real};

/// Centroid layout of the synthetic region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Layout {
    Grid,
    UniformRandom,
}

/// Mean function of the generator.
///
/// `Nonlinear` uses the fixed form
/// `f(x) = 2·sin(π x₁) + x₂² − |x₃| + x₁·x₂`
/// (smooth univariate nonlinearities plus one pairwise interaction); any
/// features beyond the first three are inert noise columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MeanFunction<T> {
    Linear { intercept: T, coefficients: Vec<T> },
    Nonlinear { n_features: usize },
}

impl<T: Real> MeanFunction<T> {
    pub fn n_features(&self) -> usize {
        match self {
            MeanFunction::Linear { coefficients, .. } => coefficients.len(),
            MeanFunction::Nonlinear { n_features } => *n_features,
        }
    }

    pub fn evaluate(&self, x: &[T]) -> T {
        match self {
            MeanFunction::Linear { intercept, coefficients } => {
                let mut acc = *intercept;
                for (c, v) in coefficients.iter().zip(x) {
                    acc += *c * *v;
                }
                acc
            }
            MeanFunction::Nonlinear { .. } => {
                let two = real::<T>(2.0);
                let pi = real::<T>(std::f64::consts::PI);
                two * (pi * x[0]).sin() + x[1] * x[1] - x[2].abs() + x[0] * x[1]
            }
        }
    }
}

/// Generator settings. The target is drawn as
/// `Y = f(x) + φ* + ε`, with `φ* ~ N(0, [τ Q(ρ, W)]⁻¹)` on the scenario's
/// D-nearest-neighbour graph and `ε ~ N(0, σ²)`; features are i.i.d.
/// standard normal. Output is bit-reproducible for a fixed seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationScenario<T> {
    pub n_units: usize,
    pub layout: Layout,
    pub rho_true: T,
    pub tau_true: T,
    pub sigma2_true: T,
    pub mean_function: MeanFunction<T>,
    /// Neighbour count of the generator's graph.
    pub d_param: usize,
    pub seed: u64,
}

impl<T: Real> SimulationScenario<T> {
    pub fn validate(&self) -> Result<()> {
        if self.n_units < 10 {
            return Err(Error::Validation(format!(
                "scenario needs at least 10 units, got {}",
                self.n_units
            )));
        }
        if !(self.rho_true >= T::zero() && self.rho_true < T::one()) {
            return Err(Error::Validation(format!(
                "rho must lie in [0, 1); got {} (rho = 1 makes the joint prior improper)",
                self.rho_true
            )));
        }
        if !(self.tau_true > T::zero()) {
            return Err(Error::Validation(format!("tau must be positive, got {}", self.tau_true)));
        }
        if !(self.sigma2_true > T::zero()) {
            return Err(Error::Validation(format!(
                "sigma2 must be positive, got {}",
                self.sigma2_true
            )));
        }
        if self.mean_function.n_features() == 0 {
            return Err(Error::Validation("mean function needs at least one feature".into()));
        }
        if let MeanFunction::Nonlinear { n_features } = self.mean_function {
            if n_features < 3 {
                return Err(Error::Validation(
                    "the nonlinear mean uses features x1..x3; n_features must be >= 3".into(),
                ));
            }
        }
        if self.d_param == 0 || self.d_param >= self.n_units {
            return Err(Error::Validation(format!(
                "graph neighbour count D={} must satisfy 1 <= D < n_units",
                self.d_param
            )));
        }
        Ok(())
    }
}

/// Per-unit ground truth emitted next to a simulated dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulationTruth<T> {
    pub scenario: SimulationScenario<T>,
    /// Spatial random effect φ* per unit.
    pub phi: Vec<T>,
    /// Feature effect f(x) per unit.
    pub mean: Vec<T>,
}

pub fn simulate<T: Real>(scenario: &SimulationScenario<T>) -> Result<ArealDataset<T>> {
    simulate_with_truth(scenario).map(|(ds, _)| ds)
}

/// Draw order is fixed (centroids, then features, then the spatial field,
/// then noise) so outputs are reproducible for a fixed seed.
pub fn simulate_with_truth<T: Real>(
    scenario: &SimulationScenario<T>,
) -> Result<(ArealDataset<T>, SimulationTruth<T>)> {
    scenario.validate()?;
    let n = scenario.n_units;
    let p = scenario.mean_function.n_features();
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);

    let centroids: Vec<(T, T)> = match scenario.layout {
        Layout::Grid => {
            let side = (n as f64).sqrt().ceil() as usize;
            let spacing = 100.0;
            (0..n)
                .map(|i| {
                    let row = i / side;
                    let col = i % side;
                    (real(col as f64 * spacing), real(row as f64 * spacing))
                })
                .collect()
        }
        Layout::UniformRandom => {
            let extent = 100.0 * (n as f64).sqrt();
            (0..n)
                .map(|_| {
                    let x: f64 = rng.gen_range(0.0..extent);
                    let y: f64 = rng.gen_range(0.0..extent);
                    (real(x), real(y))
                })
                .collect()
        }
    };

    let features: Vec<Vec<T>> = (0..n)
        .map(|_| {
            (0..p)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    real(z)
                })
                .collect()
        })
        .collect();

    // φ* ~ N(0, [τ Q]⁻¹) by solving Lᵀ φ = z for the factor of τQ
    let w = knn_adjacency(&centroids, scenario.d_param)?;
    let mut q = leroux_structure(&w, scenario.rho_true, T::one() - scenario.rho_true);
    for v in q.values_mut() {
        *v = *v * scenario.tau_true;
    }
    let perm = reverse_cuthill_mckee(w.adjacency());
    let factor = CholeskySymbolic::analyze(&q, perm).factorize(&q)?;
    let z: Vec<T> = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            real(z)
        })
        .collect();
    let phi = factor.sample_zero_mean(&z);

    let sigma = scenario.sigma2_true.sqrt();
    let mean: Vec<T> = features.iter().map(|x| scenario.mean_function.evaluate(x)).collect();
    let id_width = (n as f64).log10().ceil() as usize + 1;
    let units: Vec<ArealUnit<T>> = (0..n)
        .map(|i| {
            let eps: f64 = StandardNormal.sample(&mut rng);
            let y = mean[i] + phi[i] + sigma * real(eps);
            ArealUnit {
                id: format!("U{i:0id_width$}"),
                centroid: centroids[i],
                features: features[i].clone(),
                target: Some(y),
                group: None,
            }
        })
        .collect();

    let names: Vec<String> = (1..=p).map(|j| format!("x{j}")).collect();
    // Targets are on the modelling scale by construction (they may be
    // negative), so the dataset is tagged Log rather than Original.
    let ds = ArealDataset::new(units, names, TargetScale::Log)?;
    let truth = SimulationTruth { scenario: scenario.clone(), phi, mean };
    Ok((ds, truth))
}
