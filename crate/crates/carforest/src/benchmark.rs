//! Repeated-split benchmark protocol: tune on the training side of each
//! split, refit at the chosen parameters, predict the test side,
//! back-transform, and score RMSE / MAE / CP / AIW per split and on average.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::car::IntervalMode;
use crate::data::{log_target, train_test_split, ArealDataset, TargetScale};
use crate::error::{Error, Result};
use crate::metrics::{backtransform, coverage, interval_width, mae, rmse};
use crate::models::{fit_predict, ModelKind, ModelSettings, ParamSet};
use crate::prediction::PredictionSet;
use crate::scalar::{derive_seed, Real};
use crate::tune::{cv_tune, CvScoreScale, TuningGrid, TuningResult};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSpec<T> {
    pub kind: ModelKind,
    pub grid: TuningGrid<T>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkSettings<T> {
    pub model: ModelSettings<T>,
    pub n_splits: usize,
    pub train_fraction: f64,
    pub folds: usize,
    /// Model the natural log of the target and back-transform predictions
    /// before scoring (the metrics then live on the original scale).
    pub log_transform: bool,
    pub cv_score_scale: CvScoreScale,
    /// Interval mode for the final per-split fits (tuning always plugs in).
    pub final_interval_mode: IntervalMode,
    /// Per-group metric breakdown for datasets carrying group labels.
    pub group_breakdown: bool,
}

impl<T: Real> Default for BenchmarkSettings<T> {
    fn default() -> Self {
        BenchmarkSettings {
            model: ModelSettings::default(),
            n_splits: 5,
            train_fraction: 0.8,
            folds: 10,
            log_transform: true,
            cv_score_scale: CvScoreScale::Modelling,
            final_interval_mode: IntervalMode::PlugIn,
            group_breakdown: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricRow<T> {
    pub per_split: Vec<T>,
    pub mean: T,
}

impl<T: Real> MetricRow<T> {
    fn new(per_split: Vec<T>) -> Self {
        let mean =
            per_split.iter().copied().sum::<T>() / T::from_usize(per_split.len()).unwrap();
        MetricRow { per_split, mean }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupMetrics<T> {
    pub group: String,
    /// Mean over the splits in which the group appeared in the test set.
    pub rmse: T,
    pub mae: T,
    pub n_units: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelReport<T> {
    pub kind: ModelKind,
    pub chosen_params: Vec<ParamSet<T>>,
    /// Per-parameter mode of the chosen values across splits (ties resolve
    /// to the smaller value); the recommended deployment configuration.
    pub deployment_params: ParamSet<T>,
    pub tuning: Vec<TuningResult<T>>,
    pub rmse: MetricRow<T>,
    pub mae: MetricRow<T>,
    pub cp: MetricRow<T>,
    pub aiw: MetricRow<T>,
    pub group_metrics: Option<Vec<GroupMetrics<T>>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkReport<T> {
    pub version: String,
    pub seed: u64,
    pub n_splits: usize,
    pub train_fraction: f64,
    pub folds: usize,
    pub log_transform: bool,
    pub models: Vec<ModelReport<T>>,
}

fn mode_of<V: Copy + Ord>(values: impl Iterator<Item = V>) -> Option<V> {
    let mut counts: std::collections::BTreeMap<V, usize> = std::collections::BTreeMap::new();
    for v in values {
        *counts.entry(v).or_insert(0) += 1;
    }
    // BTreeMap iterates keys in ascending order, so on tied counts the
    // smaller value wins
    counts.into_iter().max_by_key(|&(_, c)| c).map(|(v, _)| v)
}

fn deployment_params<T: Real>(chosen: &[ParamSet<T>]) -> ParamSet<T> {
    ParamSet {
        d: mode_of(chosen.iter().filter_map(|p| p.d)),
        m_try: mode_of(chosen.iter().filter_map(|p| p.m_try)),
        min_node: mode_of(chosen.iter().filter_map(|p| p.min_node)),
        r: mode_of(chosen.iter().filter_map(|p| p.r)),
        bw: mode_of(chosen.iter().filter_map(|p| p.bw)),
        // alpha values come from a finite candidate grid; order on bits
        alpha: mode_of(chosen.iter().filter_map(|p| p.alpha.map(|a| {
            ordered_bits(a)
        })))
        .map(from_ordered_bits),
    }
}

fn ordered_bits<T: Real>(v: T) -> u64 {
    let f = v.to_f64().unwrap_or(f64::NAN);
    let b = f.to_bits();
    // order-preserving map for non-negative floats
    b ^ (((b as i64) >> 63) as u64 | 0x8000_0000_0000_0000)
}

fn from_ordered_bits<T: Real>(b: u64) -> T {
    let bits = if b & 0x8000_0000_0000_0000 != 0 {
        b ^ 0x8000_0000_0000_0000
    } else {
        !b
    };
    T::from_f64(f64::from_bits(bits)).unwrap()
}

struct SplitOutcome<T> {
    chosen: ParamSet<T>,
    tuning: TuningResult<T>,
    rmse: T,
    mae: T,
    cp: T,
    aiw: T,
    /// (group label, prediction, observation) per test unit, original scale.
    scored: Vec<(Option<String>, T, T)>,
}

/// Run the full protocol. `ds` holds the raw-scale targets (or modelling
/// scale with `log_transform` off); units with missing targets are excluded
/// from the splits.
pub fn benchmark<T: Real>(
    ds: &ArealDataset<T>,
    specs: &[ModelSpec<T>],
    settings: &BenchmarkSettings<T>,
    seed: u64,
) -> Result<BenchmarkReport<T>> {
    if specs.is_empty() {
        return Err(Error::Validation("no models to benchmark".into()));
    }
    if settings.n_splits == 0 {
        return Err(Error::Validation("need at least one split".into()));
    }
    let ds_model = if settings.log_transform {
        if ds.target_scale() == TargetScale::Log {
            return Err(Error::Validation(
                "log transform requested but the targets are already on the log scale".into(),
            ));
        }
        log_target(ds)?
    } else {
        ds.clone()
    };

    // (split, model) tasks, seeds keyed by position, executed in parallel
    let jobs: Vec<(usize, usize)> = (0..settings.n_splits)
        .flat_map(|s| (0..specs.len()).map(move |m| (s, m)))
        .collect();
    let outcomes: Vec<((usize, usize), Result<SplitOutcome<T>>)> = jobs
        .par_iter()
        .map(|&(s, m)| {
            let run = || -> Result<SplitOutcome<T>> {
                let spec = &specs[m];
                let split_seed = derive_seed(seed, s as u64);
                let (train, test) =
                    train_test_split(&ds_model, settings.train_fraction, split_seed)?;
                let tune_seed = derive_seed(seed, (s * 1000 + m) as u64 + 17);
                let tuning = cv_tune(
                    &train,
                    spec.kind,
                    &spec.grid,
                    settings.folds,
                    tune_seed,
                    &settings.model,
                    settings.cv_score_scale,
                )?;
                let chosen = tuning.chosen;
                let final_settings = ModelSettings {
                    interval_mode: settings.final_interval_mode,
                    ..settings.model
                };
                let fit_seed = derive_seed(seed, (s * 1000 + m) as u64 + 7919);
                let out =
                    fit_predict(spec.kind, &chosen, &train, &test, &final_settings, fit_seed)?;

                let (preds, obs): (PredictionSet<T>, Vec<T>) = if settings.log_transform {
                    let back = backtransform(&out.predictions, out.sigma2)?;
                    let obs = test.targets()?.iter().map(|v| v.exp()).collect();
                    (back, obs)
                } else {
                    (out.predictions, test.targets()?)
                };
                let points = preds.points();
                let intervals = preds.intervals();
                let scored = test
                    .units()
                    .iter()
                    .zip(&points)
                    .zip(&obs)
                    .map(|((u, &p), &o)| (u.group.clone(), p, o))
                    .collect();
                Ok(SplitOutcome {
                    chosen,
                    tuning,
                    rmse: rmse(&points, &obs)?,
                    mae: mae(&points, &obs)?,
                    cp: coverage(&intervals, &obs)?,
                    aiw: interval_width(&intervals)?,
                    scored,
                })
            };
            ((s, m), run())
        })
        .collect();

    let mut by_model: Vec<Vec<Option<SplitOutcome<T>>>> = (0..specs.len())
        .map(|_| (0..settings.n_splits).map(|_| None).collect())
        .collect();
    for ((s, m), outcome) in outcomes {
        let outcome = outcome.map_err(|e| {
            Error::Validation(format!(
                "model {:?}, split {}: {e}",
                specs[m].kind.name(),
                s + 1
            ))
        })?;
        by_model[m][s] = Some(outcome);
    }

    let mut models = Vec::with_capacity(specs.len());
    for (m, spec) in specs.iter().enumerate() {
        let splits: Vec<SplitOutcome<T>> =
            by_model[m].drain(..).map(|o| o.expect("all outcomes collected")).collect();
        let chosen_params: Vec<ParamSet<T>> = splits.iter().map(|s| s.chosen).collect();
        let group_metrics = if settings.group_breakdown {
            Some(group_breakdown(&splits))
        } else {
            None
        };
        models.push(ModelReport {
            kind: spec.kind,
            deployment_params: deployment_params(&chosen_params),
            chosen_params,
            tuning: splits.iter().map(|s| s.tuning.clone()).collect(),
            rmse: MetricRow::new(splits.iter().map(|s| s.rmse).collect()),
            mae: MetricRow::new(splits.iter().map(|s| s.mae).collect()),
            cp: MetricRow::new(splits.iter().map(|s| s.cp).collect()),
            aiw: MetricRow::new(splits.iter().map(|s| s.aiw).collect()),
            group_metrics,
        });
    }

    Ok(BenchmarkReport {
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed,
        n_splits: settings.n_splits,
        train_fraction: settings.train_fraction,
        folds: settings.folds,
        log_transform: settings.log_transform,
        models,
    })
}

fn group_breakdown<T: Real>(splits: &[SplitOutcome<T>]) -> Vec<GroupMetrics<T>> {
    use std::collections::BTreeMap;
    // per group: per-split metric values, then mean over appearing splits
    let mut groups: BTreeMap<String, (Vec<T>, Vec<T>, usize)> = BTreeMap::new();
    for split in splits {
        let mut per_group: BTreeMap<String, (Vec<T>, Vec<T>)> = BTreeMap::new();
        for (g, p, o) in &split.scored {
            let label = g.clone().unwrap_or_else(|| "(none)".to_string());
            let entry = per_group.entry(label).or_default();
            entry.0.push(*p);
            entry.1.push(*o);
        }
        for (label, (preds, obs)) in per_group {
            if let (Ok(r), Ok(m)) = (rmse(&preds, &obs), mae(&preds, &obs)) {
                let slot = groups.entry(label).or_insert_with(|| (vec![], vec![], 0));
                slot.0.push(r);
                slot.1.push(m);
                slot.2 += preds.len();
            }
        }
    }
    groups
        .into_iter()
        .map(|(group, (rmses, maes, n_units))| {
            let k = T::from_usize(rmses.len()).unwrap();
            GroupMetrics {
                group,
                rmse: rmses.iter().copied().sum::<T>() / k,
                mae: maes.iter().copied().sum::<T>() / k,
                n_units,
            }
        })
        .collect()
}

/// Aligned text table with one block per metric: models as rows, splits as
/// columns plus the mean.
pub fn render_table<T: Real>(report: &BenchmarkReport<T>) -> String {
    let mut out = String::new();
    let name_width = report
        .models
        .iter()
        .map(|m| m.kind.name().len())
        .max()
        .unwrap_or(5)
        .max("Model".len());
    let blocks: [(&str, fn(&ModelReport<T>) -> &MetricRow<T>, usize); 4] = [
        ("RMSE", |m| &m.rmse, 2),
        ("MAE", |m| &m.mae, 2),
        ("CP", |m| &m.cp, 3),
        ("AIW", |m| &m.aiw, 2),
    ];
    for (label, row_of, decimals) in blocks {
        out.push_str(label);
        out.push('\n');
        out.push_str(&format!("{:<name_width$}", "Model"));
        for s in 1..=report.n_splits {
            out.push_str(&format!("  {:>12}", format!("Split {s}")));
        }
        out.push_str(&format!("  {:>12}\n", "Mean"));
        for model in &report.models {
            out.push_str(&format!("{:<name_width$}", model.kind.name()));
            let row = row_of(model);
            for v in &row.per_split {
                out.push_str(&format!("  {:>12}", format_value(*v, decimals)));
            }
            out.push_str(&format!("  {:>12}\n", format_value(row.mean, decimals)));
        }
        out.push('\n');
    }
    out
}

fn format_value<T: Real>(v: T, decimals: usize) -> String {
    format!("{:.*}", decimals, v.to_f64().unwrap_or(f64::NAN))
}
