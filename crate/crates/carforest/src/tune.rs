//! 10-fold cross-validation tuning over per-model parameter grids.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ArealDataset, TargetScale};
use crate::error::{Error, Result};
use crate::metrics::rmse;
use crate::models::{
    fit_predict, fit_predict_carforest_multi, ModelKind, ModelOutput, ModelSettings, ParamSet,
};
use crate::scalar::{derive_seed, real, Real};

/// Candidate values per tuning parameter. Only the lists a model kind uses
/// are consulted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningGrid<T> {
    pub d: Vec<usize>,
    pub m_try: Vec<usize>,
    pub min_node: Vec<usize>,
    pub r: Vec<usize>,
    pub bw: Vec<usize>,
    pub alpha: Vec<T>,
}

impl<T: Real> TuningGrid<T> {
    /// The default grids: D ∈ {3,5,7,9}, m_try ∈ {10,20,30,40,p},
    /// min_node ∈ {1,5,10}, R ∈ {1..5}, bw ∈ {100,500,1000},
    /// α ∈ {0.25,0.5,0.75,1}; m_try clamped into [1, p] with p always
    /// included.
    pub fn paper_default(p: usize) -> Self {
        TuningGrid {
            d: vec![3, 5, 7, 9],
            m_try: vec![10, 20, 30, 40, p],
            min_node: vec![1, 5, 10],
            r: vec![1, 2, 3, 4, 5],
            bw: vec![100, 500, 1000],
            alpha: vec![real(0.25), real(0.5), real(0.75), real(1.0)],
        }
        .normalized(p)
    }

    /// Clamp m_try candidates into [1, p], deduplicate preserving order, and
    /// make sure p itself is present.
    pub fn normalized(mut self, p: usize) -> Self {
        let mut m_try: Vec<usize> = Vec::new();
        for m in self.m_try.iter().map(|&m| m.clamp(1, p)) {
            if !m_try.contains(&m) {
                m_try.push(m);
            }
        }
        if !m_try.contains(&p) {
            m_try.push(p);
        }
        self.m_try = m_try;
        self
    }

    fn validate_for(&self, kind: ModelKind) -> Result<()> {
        let need = |name: &str, empty: bool| -> Result<()> {
            if empty {
                Err(Error::Validation(format!(
                    "tuning grid for {:?} has no {name} candidates",
                    kind.name()
                )))
            } else {
                Ok(())
            }
        };
        match kind {
            ModelKind::Lm | ModelKind::Oracle => Ok(()),
            ModelKind::Car => need("D", self.d.is_empty()),
            ModelKind::Rf => {
                need("m_try", self.m_try.is_empty())?;
                need("min_node", self.min_node.is_empty())
            }
            ModelKind::Grf => {
                need("m_try", self.m_try.is_empty())?;
                need("min_node", self.min_node.is_empty())?;
                need("bw", self.bw.is_empty())?;
                need("alpha", self.alpha.is_empty())
            }
            ModelKind::CarForest => {
                need("D", self.d.is_empty())?;
                need("m_try", self.m_try.is_empty())?;
                need("min_node", self.min_node.is_empty())?;
                need("R", self.r.is_empty())
            }
        }
    }

    /// Cartesian product in field order D → m_try → min_node → bw → α → R;
    /// ties in tuning scores resolve to the first combination in this order.
    pub fn combinations(&self, kind: ModelKind) -> Vec<ParamSet<T>> {
        let base = ParamSet::default();
        match kind {
            ModelKind::Lm | ModelKind::Oracle => vec![base],
            ModelKind::Car => self.d.iter().map(|&d| ParamSet { d: Some(d), ..base }).collect(),
            ModelKind::Rf => {
                let mut out = Vec::new();
                for &m in &self.m_try {
                    for &mn in &self.min_node {
                        out.push(ParamSet { m_try: Some(m), min_node: Some(mn), ..base });
                    }
                }
                out
            }
            ModelKind::Grf => {
                let mut out = Vec::new();
                for &m in &self.m_try {
                    for &mn in &self.min_node {
                        for &bw in &self.bw {
                            for &a in &self.alpha {
                                out.push(ParamSet {
                                    m_try: Some(m),
                                    min_node: Some(mn),
                                    bw: Some(bw),
                                    alpha: Some(a),
                                    ..base
                                });
                            }
                        }
                    }
                }
                out
            }
            ModelKind::CarForest => {
                let mut out = Vec::new();
                for &d in &self.d {
                    for &m in &self.m_try {
                        for &mn in &self.min_node {
                            for &r in &self.r {
                                out.push(ParamSet {
                                    d: Some(d),
                                    m_try: Some(m),
                                    min_node: Some(mn),
                                    r: Some(r),
                                    ..base
                                });
                            }
                        }
                    }
                }
                out
            }
        }
    }
}

/// Scale on which pooled fold predictions are scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CvScoreScale {
    /// The scale the models are fit on (default).
    Modelling,
    /// Back-transformed to the original scale before scoring.
    Original,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComboScore<T> {
    pub params: ParamSet<T>,
    pub mean_cv_rmse: Option<T>,
    /// Reason the combination was disqualified (a fold failed), if any.
    pub disqualified: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TuningResult<T> {
    pub kind: ModelKind,
    pub combinations: Vec<ComboScore<T>>,
    pub chosen: ParamSet<T>,
    /// Fold index per training unit.
    pub fold_assignments: Vec<usize>,
    pub folds: usize,
    pub seed: u64,
}

/// Deterministic fold assignment: shuffled round-robin, so fold sizes differ
/// by at most one.
pub fn assign_folds(n: usize, folds: usize, seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
    let mut assignment = vec![0usize; n];
    for (pos, &unit) in order.iter().enumerate() {
        assignment[unit] = pos % folds;
    }
    assignment
}

/// 10-fold (by default) cross-validation over the grid: every combination is
/// fit on each set of folds-minus-one, the held-out fold predicted, the
/// pooled predictions scored by RMSE, and the argmin chosen (ties going to
/// the first combination in grid order). CAR-Forest combinations share one
/// run at R = max(grid R) per (D, m_try, min_node) and are scored at every R.
pub fn cv_tune<T: Real>(
    train: &ArealDataset<T>,
    kind: ModelKind,
    grid: &TuningGrid<T>,
    folds: usize,
    seed: u64,
    settings: &ModelSettings<T>,
    score_scale: CvScoreScale,
) -> Result<TuningResult<T>> {
    let n = train.n_total();
    if folds < 2 || folds > n {
        return Err(Error::Validation(format!("folds={folds} must lie in [2, n={n}]")));
    }
    if train.n_observed() != n {
        return Err(Error::Validation("tuning data must have observed targets everywhere".into()));
    }
    if score_scale == CvScoreScale::Original && train.target_scale() != TargetScale::Log {
        return Err(Error::Validation(
            "original-scale CV scoring requires log-scale modelling targets".into(),
        ));
    }
    grid.validate_for(kind)?;

    let fold_assignments = assign_folds(n, folds, seed);
    let y = train.targets()?;

    // CV fits stay on plug-in intervals regardless of the final-fit mode
    let cv_settings = ModelSettings {
        interval_mode: crate::car::IntervalMode::PlugIn,
        ..*settings
    };

    // task layer: for carforest, one task covers all R values of a combo stem
    let combos = grid.combinations(kind);
    struct Task<T> {
        stem_idx: usize,
        params: ParamSet<T>,
        r_values: Vec<usize>,
    }
    let tasks: Vec<Task<T>> = match kind {
        ModelKind::CarForest => {
            let mut stems: Vec<ParamSet<T>> = Vec::new();
            for c in &combos {
                let stem = ParamSet { r: None, ..*c };
                if !stems.contains(&stem) {
                    stems.push(stem);
                }
            }
            stems
                .into_iter()
                .enumerate()
                .map(|(i, s)| Task { stem_idx: i, params: s, r_values: grid.r.clone() })
                .collect()
        }
        _ => combos
            .iter()
            .enumerate()
            .map(|(i, c)| Task { stem_idx: i, params: *c, r_values: vec![] })
            .collect(),
    };

    type FoldOutcome<T> = Result<Vec<(Option<usize>, Vec<(usize, T)>)>>;
    let jobs: Vec<(usize, usize)> = (0..tasks.len())
        .flat_map(|t| (0..folds).map(move |f| (t, f)))
        .collect();
    let outcomes: Vec<((usize, usize), FoldOutcome<T>)> = jobs
        .par_iter()
        .map(|&(t, f)| {
            let task = &tasks[t];
            let val_idx: Vec<usize> =
                (0..n).filter(|&i| fold_assignments[i] == f).collect();
            let fit_idx: Vec<usize> =
                (0..n).filter(|&i| fold_assignments[i] != f).collect();
            let fold_train = train.subset(&fit_idx);
            let fold_val = train.subset(&val_idx);
            let job_seed = derive_seed(seed, (t * folds + f) as u64 + 1);
            let run = || -> FoldOutcome<T> {
                let collect = |out: &ModelOutput<T>| -> Vec<(usize, T)> {
                    val_idx
                        .iter()
                        .zip(out.predictions.entries())
                        .map(|(&unit, e)| {
                            let point = match score_scale {
                                CvScoreScale::Modelling => e.point,
                                CvScoreScale::Original => {
                                    (e.point + out.sigma2 * real::<T>(0.5)).exp()
                                }
                            };
                            (unit, point)
                        })
                        .collect()
                };
                if task.r_values.is_empty() {
                    let out = fit_predict(
                        kind,
                        &task.params,
                        &fold_train,
                        &fold_val,
                        &cv_settings,
                        job_seed,
                    )?;
                    Ok(vec![(None, collect(&out))])
                } else {
                    let per_r = fit_predict_carforest_multi(
                        &task.params,
                        &task.r_values,
                        &fold_train,
                        &fold_val,
                        &cv_settings,
                        job_seed,
                    )?;
                    Ok(per_r.iter().map(|(r, out)| (Some(*r), collect(out))).collect())
                }
            };
            ((t, f), run())
        })
        .collect();

    // pool fold predictions per (stem, r)
    use std::collections::BTreeMap;
    let mut pooled: BTreeMap<(usize, Option<usize>), Vec<(usize, T)>> = BTreeMap::new();
    let mut failures: BTreeMap<usize, String> = BTreeMap::new();
    for ((t, _f), outcome) in outcomes {
        match outcome {
            Ok(per_r) => {
                for (r, preds) in per_r {
                    pooled.entry((t, r)).or_default().extend(preds);
                }
            }
            Err(e) => {
                failures.entry(t).or_insert_with(|| e.to_string());
            }
        }
    }

    let score_of = |stem_idx: usize, r: Option<usize>| -> Option<T> {
        let mut preds = pooled.get(&(stem_idx, r))?.clone();
        if preds.len() != n {
            return None;
        }
        preds.sort_by_key(|&(unit, _)| unit);
        let pred_vec: Vec<T> = preds.iter().map(|&(_, p)| p).collect();
        let obs: Vec<T> = match score_scale {
            CvScoreScale::Modelling => y.clone(),
            CvScoreScale::Original => y.iter().map(|v| v.exp()).collect(),
        };
        rmse(&pred_vec, &obs).ok()
    };

    let mut combinations: Vec<ComboScore<T>> = Vec::with_capacity(combos.len());
    for combo in &combos {
        let (stem_idx, r) = match kind {
            ModelKind::CarForest => {
                let stem = ParamSet { r: None, ..*combo };
                let idx = tasks
                    .iter()
                    .position(|t| t.params == stem)
                    .expect("stem exists for every combination");
                (idx, combo.r)
            }
            _ => (
                tasks.iter().position(|t| t.params == *combo).expect("task per combination"),
                None,
            ),
        };
        if let Some(reason) = failures.get(&stem_idx) {
            combinations.push(ComboScore {
                params: *combo,
                mean_cv_rmse: None,
                disqualified: Some(reason.clone()),
            });
            continue;
        }
        match score_of(stem_idx, r) {
            Some(score) => combinations.push(ComboScore {
                params: *combo,
                mean_cv_rmse: Some(score),
                disqualified: None,
            }),
            None => combinations.push(ComboScore {
                params: *combo,
                mean_cv_rmse: None,
                disqualified: Some("incomplete fold predictions".into()),
            }),
        }
    }

    let chosen = combinations
        .iter()
        .filter(|c| c.mean_cv_rmse.is_some())
        .min_by(|a, b| {
            a.mean_cv_rmse
                .unwrap()
                .partial_cmp(&b.mean_cv_rmse.unwrap())
                .unwrap_or(std::cmp::Ordering::Equal)
        })
        .map(|c| c.params)
        .ok_or_else(|| {
            Error::Validation("every tuning combination was disqualified".into())
        })?;

    Ok(TuningResult { kind, combinations, chosen, fold_assignments, folds, seed })
}
