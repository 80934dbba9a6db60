//! Geographically weighted random forest: per-test-unit local forests
//! blended with a global forest, `α·local + (1−α)·global`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::ArealDataset;
use crate::error::{Error, Result};
use crate::forest::{fit_forest, interval_oob, predict_forest, Forest, ForestConfig};
use crate::prediction::{Prediction, PredictionSet};
use crate::scalar::{derive_seed, Real};

pub const DEFAULT_LOCAL_N_TREES: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrfConfig<T> {
    pub global: ForestConfig,
    pub local_n_trees: usize,
    /// Local forests train on the `bw` nearest training units.
    pub bw: usize,
    /// Blend weight of the local prediction, in [0, 1].
    pub alpha: T,
    /// Seed for every local forest; `None` derives one per test unit.
    pub local_seed: Option<u64>,
}

impl<T: Real> GrfConfig<T> {
    pub fn new(global: ForestConfig, bw: usize, alpha: T) -> Self {
        GrfConfig { global, local_n_trees: DEFAULT_LOCAL_N_TREES, bw, alpha, local_seed: None }
    }
}

pub struct GrfOutput<T> {
    pub predictions: PredictionSet<T>,
    pub global: Forest<T>,
    /// Per-test-unit local and global components of the blend.
    pub local_points: Vec<T>,
    pub global_points: Vec<T>,
}

/// Fit the global forest once, then one local forest per test unit on its
/// `bw` nearest training units (Euclidean centroid distance, ties broken by
/// lower index; the selected rows keep their original order). Intervals come
/// from the global forest's OOB errors around the blended point.
pub fn fit_predict_grf<T: Real>(
    train: &ArealDataset<T>,
    test: &ArealDataset<T>,
    cfg: &GrfConfig<T>,
) -> Result<GrfOutput<T>> {
    let k = train.n_total();
    if cfg.bw == 0 || cfg.bw > k {
        return Err(Error::Validation(format!("bandwidth bw={} must lie in [1, K={k}]", cfg.bw)));
    }
    if !(cfg.alpha >= T::zero() && cfg.alpha <= T::one()) {
        return Err(Error::Validation(format!("alpha={} must lie in [0, 1]", cfg.alpha)));
    }
    if cfg.local_n_trees == 0 {
        return Err(Error::Validation("local_n_trees must be at least 1".into()));
    }
    train.require_complete_features()?;
    test.require_complete_features()?;

    let x_train = train.feature_matrix();
    let z = train.targets()?;
    let global = fit_forest(&x_train, &z, &cfg.global)?;
    let x_test = test.feature_matrix();
    let global_points = predict_forest(&global, &x_test)?;

    let train_centroids = train.centroids();
    let local_points: Vec<T> = if cfg.alpha == T::zero() {
        // pure global blend; skip the local fits entirely
        global_points.clone()
    } else {
        (0..test.n_total())
            .into_par_iter()
            .map(|r| -> Result<T> {
                let (cx, cy) = test.unit(r).centroid;
                let mut dist: Vec<(T, usize)> = train_centroids
                    .iter()
                    .enumerate()
                    .map(|(i, (x, y))| {
                        let dx = *x - cx;
                        let dy = *y - cy;
                        (dx * dx + dy * dy, i)
                    })
                    .collect();
                dist.sort_by(|a, b| {
                    a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal).then(a.1.cmp(&b.1))
                });
                let mut rows: Vec<usize> = dist[..cfg.bw].iter().map(|&(_, i)| i).collect();
                rows.sort_unstable();
                let local_x_rows: Vec<Vec<T>> =
                    rows.iter().map(|&i| x_train.row(i).to_vec()).collect();
                let local_x = crate::linalg::Mat::from_rows(&local_x_rows);
                let local_z: Vec<T> = rows.iter().map(|&i| z[i]).collect();
                let local_cfg = ForestConfig {
                    n_trees: cfg.local_n_trees,
                    m_try: cfg.global.m_try.min(local_x.cols()),
                    min_node: cfg.global.min_node,
                    seed: cfg
                        .local_seed
                        .unwrap_or_else(|| derive_seed(cfg.global.seed, 0x10c0 + r as u64)),
                };
                let local = fit_forest(&local_x, &local_z, &local_cfg)?;
                let probe_rows = vec![test.unit(r).features.clone()];
                let probe = crate::linalg::Mat::from_rows(&probe_rows);
                Ok(predict_forest(&local, &probe)?[0])
            })
            .collect::<Result<Vec<T>>>()?
    };

    let one = T::one();
    let entries: Result<Vec<Prediction<T>>> = (0..test.n_total())
        .map(|r| {
            let point = cfg.alpha * local_points[r] + (one - cfg.alpha) * global_points[r];
            let (lower95, upper95) = interval_oob(&global, point)?;
            Ok(Prediction { id: test.unit(r).id.clone(), point, lower95, upper95 })
        })
        .collect();
    let predictions = PredictionSet::new(entries?, test.target_scale())?;
    Ok(GrfOutput { predictions, global, local_points, global_points })
}
