//! Prediction quality metrics and the log-normal back-transformation.

use crate::data::TargetScale;
use crate::error::{Error, Result};
use crate::prediction::{Prediction, PredictionSet};
use crate::scalar::{real, Real};

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b || a == 0 {
        return Err(Error::Shape(format!("metric inputs have lengths {a} and {b}")));
    }
    Ok(())
}

/// Root mean square error.
pub fn rmse<T: Real>(pred: &[T], obs: &[T]) -> Result<T> {
    check_lengths(pred.len(), obs.len())?;
    let mut acc = T::zero();
    for (p, o) in pred.iter().zip(obs) {
        let d = *p - *o;
        acc += d * d;
    }
    Ok((acc / real::<T>(pred.len() as f64)).sqrt())
}

/// Median absolute error; for an even count, the mean of the two central
/// order statistics.
pub fn mae<T: Real>(pred: &[T], obs: &[T]) -> Result<T> {
    check_lengths(pred.len(), obs.len())?;
    let mut abs_err: Vec<T> = pred.iter().zip(obs).map(|(p, o)| (*p - *o).abs()).collect();
    abs_err.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    Ok(median_sorted(&abs_err))
}

fn median_sorted<T: Real>(sorted: &[T]) -> T {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / real::<T>(2.0)
    }
}

/// Fraction of closed intervals containing the observation.
pub fn coverage<T: Real>(intervals: &[(T, T)], obs: &[T]) -> Result<T> {
    check_lengths(intervals.len(), obs.len())?;
    let mut hits = 0usize;
    for ((lo, hi), o) in intervals.iter().zip(obs) {
        if !(lo <= hi) {
            return Err(Error::Validation(format!("inverted interval [{lo}, {hi}]")));
        }
        if *lo <= *o && *o <= *hi {
            hits += 1;
        }
    }
    Ok(real::<T>(hits as f64) / real::<T>(obs.len() as f64))
}

/// Arithmetic mean interval width.
pub fn interval_width<T: Real>(intervals: &[(T, T)]) -> Result<T> {
    if intervals.is_empty() {
        return Err(Error::Shape("no intervals".into()));
    }
    let mut acc = T::zero();
    for (lo, hi) in intervals {
        if !(lo <= hi) {
            return Err(Error::Validation(format!("inverted interval [{lo}, {hi}]")));
        }
        acc += *hi - *lo;
    }
    Ok(acc / real::<T>(intervals.len() as f64))
}

/// Log-normal back-transformation of log-scale predictions:
/// `point' = exp(point + σ²/2)` and interval endpoints exponentiated
/// directly (a monotone map, so interval coverage is preserved exactly).
pub fn backtransform<T: Real>(pred_log: &PredictionSet<T>, sigma2: T) -> Result<PredictionSet<T>> {
    if pred_log.scale() != TargetScale::Log {
        return Err(Error::Validation("predictions are already on the original scale".into()));
    }
    let half = real::<T>(0.5);
    let entries = pred_log
        .entries()
        .iter()
        .map(|e| Prediction {
            id: e.id.clone(),
            point: (e.point + half * sigma2).exp(),
            lower95: e.lower95.exp(),
            upper95: e.upper95.exp(),
        })
        .collect();
    PredictionSet::new(entries, TargetScale::Original)
}

/// Empirical quantile, type 7 (linear interpolation of order statistics),
/// over an ascending-sorted slice.
pub fn quantile_type7<T: Real>(sorted: &[T], prob: T) -> T {
    assert!(!sorted.is_empty());
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = prob * real::<T>((n - 1) as f64);
    let lo = h.floor();
    let idx = lo.to_usize().unwrap_or(0).min(n - 1);
    let frac = h - lo;
    if idx + 1 >= n {
        sorted[n - 1]
    } else {
        sorted[idx] + frac * (sorted[idx + 1] - sorted[idx])
    }
}
