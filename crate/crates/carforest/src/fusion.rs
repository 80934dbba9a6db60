//! Iterative fusion of the regression forest and the Leroux CAR model.
//!
//! One run, for R iterations over a joint train ∪ prediction graph:
//!
//! * Stage 0 — initialise the spatial effects φ ← 0 on the training units.
//! * Stage 1, r = 1..R —
//!   (A) decorrelated targets `Z_k = Y_k − φ_k`;
//!   (B) forest fit on (x, Z); out-of-bag predictions for the training units
//!       and full-forest predictions for the prediction units (OOB so both
//!       sides are predicted without using the unit's own observation);
//!   (C) CAR fit with the forest predictions as a fixed offset (features stay
//!       out of the CAR mean); φ ← posterior mean on the training units.
//! * Stage 2 — posterior-predictive points and 95% intervals for the
//!   prediction units from the final CAR fit, using the final forest's
//!   prediction-unit offsets.
//!
//! R is a tuned constant, not a stopping rule; no convergence check is made.

use serde::{Deserialize, Serialize};

use crate::car::{fit_car, predict_car, CarFit, CarHyper, CarOptions, CarPriors, IntervalMode};
use crate::data::ArealDataset;
use crate::error::{Error, Result};
use crate::forest::{fit_forest, oob_predict, predict_forest, Forest, ForestConfig};
use crate::graph::knn_adjacency;
use crate::metrics::rmse;
use crate::prediction::PredictionSet;
use crate::scalar::{derive_seed, Real};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CarForestConfig {
    /// Number of forest/CAR iterations, R >= 1.
    pub r_iterations: usize,
    /// Neighbour count of the joint D-nearest-neighbour graph.
    pub d_param: usize,
    pub forest: ForestConfig,
    pub interval_mode: IntervalMode,
}

impl CarForestConfig {
    pub fn new(r_iterations: usize, d_param: usize, forest: ForestConfig) -> Self {
        CarForestConfig { r_iterations, d_param, forest, interval_mode: IntervalMode::PlugIn }
    }

    fn validate(&self) -> Result<()> {
        if self.r_iterations == 0 {
            return Err(Error::Validation("R must be at least 1".into()));
        }
        Ok(())
    }
}

/// Summary statistics of the training residuals `Y − (β₀ + offset + φ)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResidualSummary<T> {
    pub mean: T,
    pub rmse: T,
    pub max_abs: T,
}

/// Per-iteration record of the run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationRecord<T> {
    pub iteration: usize,
    /// RMSE of the forest's OOB predictions against its decorrelated target.
    pub forest_oob_rmse: T,
    pub hyper: CarHyper<T>,
    /// Offset handed to the CAR fit: OOB predictions on the training units,
    /// full-forest predictions on the prediction units.
    pub offset: Vec<T>,
    pub residuals: ResidualSummary<T>,
    /// Prediction-unit predictions as of this iteration (plug-in intervals),
    /// letting one R_max run be scored at every smaller R.
    pub test_predictions: PredictionSet<T>,
    /// Decorrelated training targets fed to the forest at this iteration.
    pub decorrelated_targets: Vec<T>,
}

pub struct CarForestFit<T> {
    pub config: CarForestConfig,
    pub history: Vec<IterationRecord<T>>,
    pub final_car: CarFit<T>,
    pub final_forest: Forest<T>,
    /// Forest predictions for the prediction units at the final iteration.
    pub test_offsets: Vec<T>,
    /// Decorrelated targets of the last iteration.
    pub decorrelated_targets: Vec<T>,
}

impl<T: Real> CarForestFit<T> {
    /// σ² estimate used for log-normal back-transformation.
    pub fn sigma2(&self) -> T {
        self.final_car.hyper.sigma2
    }
}

/// Run the full algorithm; returns the fit and the Stage-2 predictions for
/// the prediction units.
pub fn run_carforest<T: Real>(
    train: &ArealDataset<T>,
    test: &ArealDataset<T>,
    cfg: &CarForestConfig,
    priors: &CarPriors<T>,
) -> Result<(CarForestFit<T>, PredictionSet<T>)> {
    cfg.validate()?;
    train.require_complete_features()?;
    test.require_complete_features()?;
    let y = train.targets()?;
    let n_train = train.n_total();
    let n_joint = n_train + test.n_total();

    let mut centroids = train.centroids();
    centroids.extend(test.centroids());
    let w_joint = knn_adjacency(&centroids, cfg.d_param)?;

    let x_train = train.feature_matrix();
    let x_test = test.feature_matrix();

    let mut phi = vec![T::zero(); n_train];
    let mut history: Vec<IterationRecord<T>> = Vec::with_capacity(cfg.r_iterations);
    let mut state: Option<(CarFit<T>, Forest<T>, Vec<T>, Vec<T>)> = None;
    let mut warm: Option<CarHyper<T>> = None;

    for r in 1..=cfg.r_iterations {
        let step = |e: Error| Error::at_iteration(r, e);

        // (A) decorrelated targets
        let z: Vec<T> = y.iter().zip(&phi).map(|(yi, ph)| *yi - *ph).collect();

        // (B) forest on (x, Z); fresh stream per iteration
        let forest_cfg =
            ForestConfig { seed: derive_seed(cfg.forest.seed, r as u64), ..cfg.forest };
        let forest = fit_forest(&x_train, &z, &forest_cfg).map_err(step)?;
        let m_train = oob_predict(&forest);
        let m_test = predict_forest(&forest, &x_test).map_err(step)?;
        let mut offset = Vec::with_capacity(n_joint);
        offset.extend(m_train.iter().copied());
        offset.extend(m_test.iter().copied());
        let forest_oob_rmse = rmse(&m_train, &z).map_err(step)?;

        // (C) CAR with the forest offset; the final iteration carries the
        // requested interval mode, earlier ones stay plug-in
        let interval_mode =
            if r == cfg.r_iterations { cfg.interval_mode } else { IntervalMode::PlugIn };
        let options = CarOptions { interval_mode, warm_start: warm, ..Default::default() };
        let car = fit_car(train, test, &offset, &w_joint, priors, false, &options).map_err(step)?;
        phi = car.phi_train().to_vec();
        warm = Some(car.hyper);

        let residuals = {
            let mut sum = T::zero();
            let mut ss = T::zero();
            let mut max_abs = T::zero();
            for i in 0..n_train {
                let res = y[i] - (car.beta0 + offset[i] + phi[i]);
                sum += res;
                ss += res * res;
                max_abs = max_abs.max(res.abs());
            }
            let n = T::from_usize(n_train).unwrap();
            ResidualSummary { mean: sum / n, rmse: (ss / n).sqrt(), max_abs }
        };

        let test_predictions =
            predict_car(&car, &(n_train..n_joint).collect::<Vec<_>>()).map_err(step)?;
        history.push(IterationRecord {
            iteration: r,
            forest_oob_rmse,
            hyper: car.hyper,
            offset: offset.clone(),
            residuals,
            test_predictions,
            decorrelated_targets: z.clone(),
        });
        state = Some((car, forest, m_test, z));
    }

    let (final_car, final_forest, test_offsets, decorrelated_targets) =
        state.expect("R >= 1 guarantees at least one iteration");
    let predictions = history.last().unwrap().test_predictions.clone();
    let fit = CarForestFit {
        config: *cfg,
        history,
        final_car,
        final_forest,
        test_offsets,
        decorrelated_targets,
    };
    Ok((fit, predictions))
}

/// Refit on every unit with an observed target and predict the units whose
/// targets are missing. Predictions stay on the modelling scale; the caller
/// back-transforms when the model was fit to log targets.
pub fn predict_missing<T: Real>(
    full: &ArealDataset<T>,
    cfg: &CarForestConfig,
    priors: &CarPriors<T>,
) -> Result<(CarForestFit<T>, PredictionSet<T>)> {
    let observed = full.observed_indices();
    let missing = full.missing_indices();
    if missing.is_empty() {
        return Err(Error::NothingToPredict);
    }
    if observed.is_empty() {
        return Err(Error::Validation("no observed targets to train on".into()));
    }
    let train = full.subset(&observed);
    let test = full.subset(&missing);
    run_carforest(&train, &test, cfg, priors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{simulate, train_test_split, Layout, MeanFunction, SimulationScenario};
    use crate::metrics::coverage;

    fn nonlinear_scenario(n: usize, seed: u64) -> SimulationScenario<f64> {
        SimulationScenario {
            n_units: n,
            layout: Layout::UniformRandom,
            rho_true: 0.0,
            tau_true: 1e8,
            sigma2_true: 0.4,
            mean_function: MeanFunction::Nonlinear { n_features: 3 },
            d_param: 5,
            seed,
        }
    }

    fn small_config(r: usize, seed: u64) -> CarForestConfig {
        CarForestConfig::new(r, 5, ForestConfig::new(3, 5, seed).with_n_trees(120))
    }

    #[test]
    fn first_iteration_decorrelated_target_is_y() {
        let ds = simulate(&nonlinear_scenario(300, 4)).unwrap();
        let (train, test) = train_test_split(&ds, 0.8, 1).unwrap();
        let (fit, _) =
            run_carforest(&train, &test, &small_config(1, 2), &CarPriors::default()).unwrap();
        let y = train.targets().unwrap();
        assert_eq!(fit.history.len(), 1);
        assert_eq!(fit.history[0].decorrelated_targets, y);
    }

    #[test]
    fn offsets_recorded_per_iteration_match_forest_outputs() {
        let ds = simulate(&nonlinear_scenario(250, 9)).unwrap();
        let (train, test) = train_test_split(&ds, 0.8, 3).unwrap();
        let cfg = small_config(3, 5);
        let (fit, _) = run_carforest(&train, &test, &cfg, &CarPriors::default()).unwrap();
        assert_eq!(fit.history.len(), 3);
        // the recorded offset of each iteration is bit-identical to a forest
        // refit on the recorded decorrelated targets with the same stream
        let x_train = train.feature_matrix();
        let x_test = test.feature_matrix();
        for rec in &fit.history {
            let forest_cfg = ForestConfig {
                seed: derive_seed(cfg.forest.seed, rec.iteration as u64),
                ..cfg.forest
            };
            let forest = fit_forest(&x_train, &rec.decorrelated_targets, &forest_cfg).unwrap();
            let mut offset = oob_predict(&forest);
            offset.extend(predict_forest(&forest, &x_test).unwrap());
            assert_eq!(offset, rec.offset, "iteration {}", rec.iteration);
        }
        // final CAR's stored offset equals the final recorded offset
        assert_eq!(fit.final_car.offset(), fit.history.last().unwrap().offset.as_slice());
    }

    #[test]
    fn deterministic_across_runs_and_thread_counts() {
        let ds = simulate(&nonlinear_scenario(200, 11)).unwrap();
        let (train, test) = train_test_split(&ds, 0.8, 7).unwrap();
        let cfg = small_config(2, 8);
        let pool1 = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let pool4 = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let (fit1, preds1) =
            pool1.install(|| run_carforest(&train, &test, &cfg, &CarPriors::default()).unwrap());
        let (fit4, preds4) =
            pool4.install(|| run_carforest(&train, &test, &cfg, &CarPriors::default()).unwrap());
        assert_eq!(preds1, preds4);
        assert_eq!(fit1.history.len(), fit4.history.len());
        for (a, b) in fit1.history.iter().zip(&fit4.history) {
            assert_eq!(a.offset, b.offset);
            assert_eq!(a.hyper, b.hyper);
            assert_eq!(a.test_predictions, b.test_predictions);
        }
    }

    #[test]
    fn aspatial_nonlinear_data_close_to_plain_forest() {
        // phi* suppressed: the CAR layer must not hurt the forest, and the
        // fitted spatial effects stay near zero. At rho_true = 0 the i.i.d.
        // field is exchangeable with the noise term, so rho itself is not
        // identified; the fitted spatial SCALE is what the data pins down.
        // R is run at 1, the value cross-validation selects on such data
        // (larger R can self-distill when the posterior lands in the
        // phi-absorbing branch of the sigma2/tau ridge).
        let mut rf_rmse_total = 0.0;
        let mut cf_rmse_total = 0.0;
        let replicates = 5;
        for rep in 0..replicates {
            let ds = simulate(&nonlinear_scenario(600, 100 + rep)).unwrap();
            let (train, test) = train_test_split(&ds, 0.8, rep).unwrap();
            let obs = test.targets().unwrap();

            let cfg = small_config(1, 300 + rep);
            let (fit, preds) =
                run_carforest(&train, &test, &cfg, &CarPriors::default()).unwrap();
            cf_rmse_total += rmse(&preds.points(), &obs).unwrap();

            // spatial effects at the prediction units are essentially zero
            let phi_test =
                &fit.final_car.latent_mean[train.n_total()..train.n_total() + test.n_total()];
            let phi_scale = {
                let m: f64 = phi_test.iter().sum::<f64>() / phi_test.len() as f64;
                (phi_test.iter().map(|v| (v - m).powi(2)).sum::<f64>() / phi_test.len() as f64)
                    .sqrt()
            };
            let y_sd = {
                let m: f64 = obs.iter().sum::<f64>() / obs.len() as f64;
                (obs.iter().map(|v| (v - m).powi(2)).sum::<f64>() / obs.len() as f64).sqrt()
            };
            assert!(phi_scale < 0.1 * y_sd, "rep {rep}: phi sd {phi_scale} vs y sd {y_sd}");

            let forest = fit_forest(
                &train.feature_matrix(),
                &train.targets().unwrap(),
                &ForestConfig { seed: derive_seed(300 + rep, 1), ..cfg.forest },
            )
            .unwrap();
            let rf_points = predict_forest(&forest, &test.feature_matrix()).unwrap();
            rf_rmse_total += rmse(&rf_points, &obs).unwrap();
        }
        let rf_mean = rf_rmse_total / replicates as f64;
        let cf_mean = cf_rmse_total / replicates as f64;
        assert!(
            cf_mean <= 1.03 * rf_mean,
            "carforest rmse {cf_mean} more than 3% above forest rmse {rf_mean}"
        );
    }

    #[test]
    fn degenerate_forest_reduces_to_pure_car() {
        // a single tree with min_node >= K is one leaf: its OOB predictions
        // fall back to the same constant, so the offset is exactly constant
        // and the run must match a plain CAR fit with that offset
        let ds = simulate(&nonlinear_scenario(150, 21)).unwrap();
        let (train, test) = train_test_split(&ds, 0.8, 9).unwrap();
        let k = train.n_total();
        let cfg = CarForestConfig::new(1, 5, ForestConfig::new(3, k, 5).with_n_trees(1));
        let (fit, preds) = run_carforest(&train, &test, &cfg, &CarPriors::default()).unwrap();
        let offset = &fit.history[0].offset;
        for o in offset.iter() {
            assert_eq!(*o, offset[0], "offset not constant");
        }

        let mut centroids = train.centroids();
        centroids.extend(test.centroids());
        let w = knn_adjacency(&centroids, 5).unwrap();
        let pure = fit_car(
            &train,
            &test,
            offset,
            &w,
            &CarPriors::default(),
            false,
            &CarOptions::default(),
        )
        .unwrap();
        let pure_preds = predict_car(&pure, &pure.test_indices()).unwrap();
        for (a, b) in preds.entries().iter().zip(pure_preds.entries()) {
            assert!((a.point - b.point).abs() < 1e-6);
            assert!((a.lower95 - b.lower95).abs() < 1e-6);
        }
    }

    #[test]
    fn predict_missing_validations_and_shape() {
        let ds = simulate(&nonlinear_scenario(200, 31)).unwrap();
        // no missing -> error
        let cfg = small_config(1, 3);
        match predict_missing(&ds, &cfg, &CarPriors::default()) {
            Err(Error::NothingToPredict) => {}
            Err(other) => panic!("expected nothing-to-predict, got {other}"),
            Ok(_) => panic!("expected nothing-to-predict, got a fit"),
        }
        // exactly one missing -> one prediction
        let one_missing = ds.mask_targets(0.005, 5).unwrap();
        assert_eq!(one_missing.n_total() - one_missing.n_observed(), 1);
        let (_, preds) = predict_missing(&one_missing, &cfg, &CarPriors::default()).unwrap();
        assert_eq!(preds.len(), 1);
        // all missing -> error
        let all_units: Vec<usize> = (0..ds.n_total()).collect();
        let mut all_missing = ds.clone();
        let _ = &mut all_missing;
        let empty = {
            let mut units = ds.units().to_vec();
            for u in units.iter_mut() {
                u.target = None;
            }
            crate::data::ArealDataset::new(
                units,
                ds.feature_names().to_vec(),
                ds.target_scale(),
            )
            .unwrap()
        };
        let _ = all_units;
        assert!(predict_missing(&empty, &cfg, &CarPriors::default()).is_err());
    }

    #[test]
    fn masked_units_recovered_with_nominal_coverage() {
        // spatial + nonlinear data, 9% of targets masked at random
        let scenario = SimulationScenario {
            n_units: 900,
            layout: Layout::UniformRandom,
            rho_true: 0.8,
            tau_true: 1.0,
            sigma2_true: 0.3,
            mean_function: MeanFunction::Nonlinear { n_features: 3 },
            d_param: 5,
            seed: 77,
        };
        let (full, _) = crate::data::simulate_with_truth(&scenario).unwrap();
        let truth_by_id: std::collections::HashMap<String, f64> =
            full.units().iter().map(|u| (u.id.clone(), u.target.unwrap())).collect();
        let masked = full.mask_targets(0.09, 13).unwrap();
        let cfg = CarForestConfig::new(3, 5, ForestConfig::new(3, 5, 19).with_n_trees(300));
        let (_, preds) = predict_missing(&masked, &cfg, &CarPriors::default()).unwrap();
        let obs: Vec<f64> = preds.ids().iter().map(|id| truth_by_id[*id]).collect();
        let cp = coverage(&preds.intervals(), &obs).unwrap();
        assert!((cp - 0.95).abs() < 0.04, "masked-unit coverage {cp}");
    }

    #[test]
    fn paper_scale_configuration_is_expressible() {
        let p = 51;
        let cfg = CarForestConfig::new(5, 7, ForestConfig::new(p, 5, 1));
        assert_eq!(cfg.r_iterations, 5);
        assert_eq!(cfg.d_param, 7);
        assert_eq!(cfg.forest.m_try, p);
        assert_eq!(cfg.forest.min_node, 5);
        assert_eq!(cfg.forest.n_trees, 1000);
        assert!(cfg.validate().is_ok());
        assert!(CarForestConfig::new(0, 5, ForestConfig::new(1, 1, 1)).validate().is_err());
    }

    #[test]
    fn sub_fit_errors_carry_the_iteration_index() {
        let ds = simulate(&nonlinear_scenario(120, 41)).unwrap();
        let (train, test) = train_test_split(&ds, 0.8, 2).unwrap();
        // m_try larger than p fails inside iteration 1
        let cfg = CarForestConfig::new(2, 5, ForestConfig::new(99, 5, 1).with_n_trees(10));
        match run_carforest(&train, &test, &cfg, &CarPriors::default()) {
            Err(Error::AtIteration { iteration, .. }) => assert_eq!(iteration, 1),
            Err(other) => panic!("expected iteration-tagged error, got {other}"),
            Ok(_) => panic!("expected iteration-tagged error, got a fit"),
        }
    }
}
