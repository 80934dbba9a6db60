//! Shared fit/predict dispatch over the five model kinds, used by the
//! cross-validation harness, the benchmark protocol, and the CLI.
//!
//! The linear and forest-based models receive the unit centroids as two
//! extra features (they have no other way of seeing location); the CAR-based
//! models rely on their spatial random effects instead.

use serde::{Deserialize, Serialize};

use crate::car::{fit_car, predict_car, CarOptions, CarPriors, IntervalMode};
use crate::data::ArealDataset;
use crate::error::{Error, Result};
use crate::forest::{
    fit_forest, interval_oob, oob_variance, predict_forest, ForestConfig, DEFAULT_N_TREES,
};
use crate::fusion::{run_carforest, CarForestConfig, CarForestFit};
use crate::graph::knn_adjacency;
use crate::grf::{fit_predict_grf, GrfConfig, DEFAULT_LOCAL_N_TREES};
use crate::lm::{fit_lm, predict_lm};
use crate::prediction::{Prediction, PredictionSet};
use crate::scalar::{derive_seed, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Lm,
    Car,
    Rf,
    Grf,
    CarForest,
    /// Test support: echoes the observed test targets with zero-width
    /// intervals. Not reachable from the CLI.
    Oracle,
}

impl ModelKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "lm" => Ok(ModelKind::Lm),
            "car" => Ok(ModelKind::Car),
            "rf" => Ok(ModelKind::Rf),
            "grf" => Ok(ModelKind::Grf),
            "carforest" => Ok(ModelKind::CarForest),
            other => Err(Error::Validation(format!(
                "unknown model {other:?}; expected one of lm, car, rf, grf, carforest"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ModelKind::Lm => "lm",
            ModelKind::Car => "car",
            ModelKind::Rf => "rf",
            ModelKind::Grf => "grf",
            ModelKind::CarForest => "carforest",
            ModelKind::Oracle => "oracle",
        }
    }

    /// True when the model sees the centroids as extra feature columns.
    pub fn uses_coordinate_features(&self) -> bool {
        matches!(self, ModelKind::Lm | ModelKind::Rf | ModelKind::Grf)
    }
}

/// One tuning-parameter combination; only the fields the model kind uses are
/// set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamSet<T> {
    pub d: Option<usize>,
    pub m_try: Option<usize>,
    pub min_node: Option<usize>,
    pub r: Option<usize>,
    pub bw: Option<usize>,
    pub alpha: Option<T>,
}

impl<T> Default for ParamSet<T> {
    fn default() -> Self {
        ParamSet { d: None, m_try: None, min_node: None, r: None, bw: None, alpha: None }
    }
}

impl<T: Real> std::fmt::Display for ParamSet<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let mut parts = Vec::new();
        if let Some(d) = self.d {
            parts.push(format!("D={d}"));
        }
        if let Some(m) = self.m_try {
            parts.push(format!("m_try={m}"));
        }
        if let Some(m) = self.min_node {
            parts.push(format!("min_node={m}"));
        }
        if let Some(r) = self.r {
            parts.push(format!("R={r}"));
        }
        if let Some(b) = self.bw {
            parts.push(format!("bw={b}"));
        }
        if let Some(a) = self.alpha {
            parts.push(format!("alpha={a}"));
        }
        if parts.is_empty() {
            parts.push("default".into());
        }
        write!(f, "{}", parts.join(", "))
    }
}

/// Non-tuned model configuration shared across fits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSettings<T> {
    pub n_trees: usize,
    pub local_n_trees: usize,
    pub priors: CarPriors<T>,
    pub interval_mode: IntervalMode,
}

impl<T: Real> Default for ModelSettings<T> {
    fn default() -> Self {
        ModelSettings {
            n_trees: DEFAULT_N_TREES,
            local_n_trees: DEFAULT_LOCAL_N_TREES,
            priors: CarPriors::default(),
            interval_mode: IntervalMode::PlugIn,
        }
    }
}

pub struct ModelOutput<T> {
    /// Predictions on the modelling scale.
    pub predictions: PredictionSet<T>,
    /// σ² estimate for log-normal back-transformation: residual variance for
    /// lm/car/carforest, OOB-error variance for rf/grf.
    pub sigma2: T,
}

fn require_param<T>(p: Option<T>, name: &str, kind: ModelKind) -> Result<T> {
    p.ok_or_else(|| {
        Error::Validation(format!("model {:?} requires parameter {name}", kind.name()))
    })
}

fn forest_config<T: Real>(
    params: &ParamSet<T>,
    settings: &ModelSettings<T>,
    p: usize,
    seed: u64,
    kind: ModelKind,
) -> Result<ForestConfig> {
    let m_try = require_param(params.m_try, "m_try", kind)?.min(p);
    let min_node = require_param(params.min_node, "min_node", kind)?;
    Ok(ForestConfig { n_trees: settings.n_trees, m_try, min_node, seed })
}

/// Fit `kind` on `train` and predict `test`, on the modelling scale.
pub fn fit_predict<T: Real>(
    kind: ModelKind,
    params: &ParamSet<T>,
    train: &ArealDataset<T>,
    test: &ArealDataset<T>,
    settings: &ModelSettings<T>,
    seed: u64,
) -> Result<ModelOutput<T>> {
    match kind {
        ModelKind::Lm => {
            let train_c = train.with_coordinate_features();
            let test_c = test.with_coordinate_features();
            let fit = fit_lm(&train_c)?;
            let predictions = predict_lm(&fit, &test_c)?;
            Ok(ModelOutput { predictions, sigma2: fit.sigma2 })
        }
        ModelKind::Car => {
            let d = require_param(params.d, "D", kind)?;
            let mut centroids = train.centroids();
            centroids.extend(test.centroids());
            let w = knn_adjacency(&centroids, d)?;
            let offset = vec![T::zero(); centroids.len()];
            let options =
                CarOptions { interval_mode: settings.interval_mode, ..Default::default() };
            let fit = fit_car(train, test, &offset, &w, &settings.priors, true, &options)?;
            let predictions = predict_car(&fit, &fit.test_indices())?;
            Ok(ModelOutput { predictions, sigma2: fit.hyper.sigma2 })
        }
        ModelKind::Rf => {
            let train_c = train.with_coordinate_features();
            let test_c = test.with_coordinate_features();
            let cfg = forest_config(params, settings, train_c.n_features(), seed, kind)?;
            let forest = fit_forest(&train_c.feature_matrix(), &train_c.targets()?, &cfg)?;
            let points = predict_forest(&forest, &test_c.feature_matrix())?;
            let entries: Result<Vec<Prediction<T>>> = test_c
                .units()
                .iter()
                .zip(&points)
                .map(|(u, &point)| {
                    let (lower95, upper95) = interval_oob(&forest, point)?;
                    Ok(Prediction { id: u.id.clone(), point, lower95, upper95 })
                })
                .collect();
            let predictions = PredictionSet::new(entries?, test.target_scale())?;
            Ok(ModelOutput { predictions, sigma2: oob_variance(&forest)? })
        }
        ModelKind::Grf => {
            let train_c = train.with_coordinate_features();
            let test_c = test.with_coordinate_features();
            let global = forest_config(params, settings, train_c.n_features(), seed, kind)?;
            let cfg = GrfConfig {
                global,
                local_n_trees: settings.local_n_trees,
                bw: require_param(params.bw, "bw", kind)?,
                alpha: require_param(params.alpha, "alpha", kind)?,
                local_seed: None,
            };
            let out = fit_predict_grf(&train_c, &test_c, &cfg)?;
            let sigma2 = oob_variance(&out.global)?;
            Ok(ModelOutput { predictions: out.predictions, sigma2 })
        }
        ModelKind::CarForest => {
            let r = require_param(params.r, "R", kind)?;
            let mut outputs =
                fit_predict_carforest_multi(params, &[r], train, test, settings, seed)?;
            let (_, output) = outputs.pop().ok_or_else(|| {
                Error::Validation("carforest run produced no output".into())
            })?;
            Ok(output)
        }
        ModelKind::Oracle => {
            let y = test.targets()?;
            let entries = test
                .units()
                .iter()
                .zip(&y)
                .map(|(u, &t)| Prediction { id: u.id.clone(), point: t, lower95: t, upper95: t })
                .collect();
            let predictions = PredictionSet::new(entries, test.target_scale())?;
            Ok(ModelOutput { predictions, sigma2: T::zero() })
        }
    }
}

/// One CAR-Forest run at R = max(r_values), scored at every requested R from
/// the per-iteration history (iterations are sequential and deterministic,
/// so the r-th iteration of the long run equals a run with R = r).
pub fn fit_predict_carforest_multi<T: Real>(
    params: &ParamSet<T>,
    r_values: &[usize],
    train: &ArealDataset<T>,
    test: &ArealDataset<T>,
    settings: &ModelSettings<T>,
    seed: u64,
) -> Result<Vec<(usize, ModelOutput<T>)>> {
    let kind = ModelKind::CarForest;
    let r_max = *r_values
        .iter()
        .max()
        .ok_or_else(|| Error::Validation("R candidate list is empty".into()))?;
    let forest = forest_config(params, settings, train.n_features(), derive_seed(seed, 0), kind)?;
    let cfg = CarForestConfig {
        r_iterations: r_max,
        d_param: require_param(params.d, "D", kind)?,
        forest,
        interval_mode: settings.interval_mode,
    };
    let (fit, _) = run_carforest(train, test, &cfg, &settings.priors)?;
    Ok(r_values
        .iter()
        .map(|&r| {
            let rec = &fit.history[r - 1];
            (
                r,
                ModelOutput {
                    predictions: rec.test_predictions.clone(),
                    sigma2: rec.hyper.sigma2,
                },
            )
        })
        .collect())
}

/// Full CAR-Forest fit for serialization-oriented callers.
pub fn fit_carforest_full<T: Real>(
    params: &ParamSet<T>,
    train: &ArealDataset<T>,
    test: &ArealDataset<T>,
    settings: &ModelSettings<T>,
    seed: u64,
) -> Result<(CarForestFit<T>, PredictionSet<T>)> {
    let kind = ModelKind::CarForest;
    let forest = forest_config(params, settings, train.n_features(), derive_seed(seed, 0), kind)?;
    let cfg = CarForestConfig {
        r_iterations: require_param(params.r, "R", kind)?,
        d_param: require_param(params.d, "D", kind)?,
        forest,
        interval_mode: settings.interval_mode,
    };
    run_carforest(train, test, &cfg, &settings.priors)
}
