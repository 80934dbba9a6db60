//! Normal linear model baseline: maximum-likelihood fit and Gaussian
//! prediction intervals.

use serde::{Deserialize, Serialize};

use crate::data::ArealDataset;
use crate::error::{Error, Result};
use crate::linalg::{dot, Mat};
use crate::prediction::{Prediction, PredictionSet};
use crate::scalar::{normal_q975, real, Real};

/// Maximum-likelihood linear fit. `sigma2` follows the ML convention
/// RSS / K (not RSS / (K − p − 1)).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LmFit<T> {
    pub beta0: T,
    pub beta: Vec<T>,
    pub sigma2: T,
    /// Covariance of (β₀, β): σ̂² (X̃ᵀX̃)⁻¹ with X̃ the intercept-augmented design.
    pub coefficient_covariance: Mat<T>,
}

pub fn fit_lm<T: Real>(train: &ArealDataset<T>) -> Result<LmFit<T>> {
    train.require_complete_features()?;
    let y = train.targets()?;
    let k = y.len();
    let p = train.n_features();
    if k <= p + 1 {
        return Err(Error::Validation(format!(
            "need more observations than coefficients: K={k}, p+1={}",
            p + 1
        )));
    }

    // intercept-augmented design
    let mut design = Mat::zeros(k, p + 1);
    for (i, u) in train.units().iter().enumerate() {
        design[(i, 0)] = T::one();
        for (j, v) in u.features.iter().enumerate() {
            design[(i, j + 1)] = *v;
        }
    }
    let gram = design.gram();
    let l = gram.cholesky().map_err(|e| match e {
        Error::NotPositiveDefinite { index, .. } => Error::RankDeficient {
            column: if index == 0 {
                "intercept".to_string()
            } else {
                train.feature_names()[index - 1].clone()
            },
        },
        other => other,
    })?;
    let xty = design.tr_matvec(&y);
    let coef = Mat::cholesky_solve(&l, &xty);

    let fitted = design.matvec(&coef);
    let mut rss = T::zero();
    for (f, o) in fitted.iter().zip(&y) {
        let r = *o - *f;
        rss += r * r;
    }
    let sigma2 = rss / real::<T>(k as f64);

    let mut cov = gram.cholesky_inverse()?;
    for i in 0..(p + 1) {
        for j in 0..(p + 1) {
            cov[(i, j)] = cov[(i, j)] * sigma2;
        }
    }

    Ok(LmFit { beta0: coef[0], beta: coef[1..].to_vec(), sigma2, coefficient_covariance: cov })
}

/// Point prediction `β₀ + xᵀβ` with the 95% interval
/// `point ± z₀.₉₇₅ √(σ² + x̃ᵀ Σ x̃)` on the modelling scale.
pub fn predict_lm<T: Real>(fit: &LmFit<T>, test: &ArealDataset<T>) -> Result<PredictionSet<T>> {
    if test.n_features() != fit.beta.len() {
        return Err(Error::Shape(format!(
            "test data has {} features, fit expects {}",
            test.n_features(),
            fit.beta.len()
        )));
    }
    test.require_complete_features()?;
    let z = normal_q975::<T>();
    let entries = test
        .units()
        .iter()
        .map(|u| {
            let point = fit.beta0 + dot(&fit.beta, &u.features);
            let mut x_aug = Vec::with_capacity(fit.beta.len() + 1);
            x_aug.push(T::one());
            x_aug.extend(u.features.iter().copied());
            let var = fit.sigma2 + fit.coefficient_covariance.quad_form(&x_aug);
            let half = z * var.max(T::zero()).sqrt();
            Prediction { id: u.id.clone(), point, lower95: point - half, upper95: point + half }
        })
        .collect();
    PredictionSet::new(entries, test.target_scale())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ArealUnit, TargetScale};

    fn dataset(xs: Vec<Vec<f64>>, ys: Vec<Option<f64>>) -> ArealDataset<f64> {
        let p = xs[0].len();
        let units: Vec<ArealUnit<f64>> = xs
            .into_iter()
            .zip(ys)
            .enumerate()
            .map(|(i, (f, t))| ArealUnit {
                id: format!("u{i}"),
                centroid: (i as f64, 0.0),
                features: f,
                target: t,
                group: None,
            })
            .collect();
        let names = (0..p).map(|j| format!("x{j}")).collect();
        ArealDataset::new(units, names, TargetScale::Log).unwrap()
    }

    #[test]
    fn exact_fit_recovers_slope_with_zero_variance() {
        let xs: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64]).collect();
        let ys: Vec<Option<f64>> = (0..10).map(|i| Some(2.0 * i as f64)).collect();
        let fit = fit_lm(&dataset(xs, ys)).unwrap();
        assert!((fit.beta[0] - 2.0).abs() < 1e-10);
        assert!(fit.beta0.abs() < 1e-10);
        assert!(fit.sigma2.abs() < 1e-10);
    }

    #[test]
    fn intercept_only_is_sample_mean() {
        // a zero-variance feature would be collinear with the intercept, so
        // use a feature orthogonal to y and read off the intercept
        let xs: Vec<Vec<f64>> = vec![vec![-1.0], vec![1.0], vec![-1.0], vec![1.0]];
        let ys = vec![Some(1.0), Some(1.0), Some(5.0), Some(5.0)];
        let fit = fit_lm(&dataset(xs, ys)).unwrap();
        assert!((fit.beta0 - 3.0).abs() < 1e-10);
        assert!(fit.beta[0].abs() < 1e-10);
    }

    #[test]
    fn matches_normal_equations_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let k = 50;
        let p = 3;
        let xs: Vec<Vec<f64>> =
            (0..k).map(|_| (0..p).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
        let ys: Vec<Option<f64>> = xs
            .iter()
            .map(|x| Some(1.5 + x[0] - 0.5 * x[1] + 2.0 * x[2] + rng.gen_range(-0.1..0.1)))
            .collect();
        let ds = dataset(xs.clone(), ys.clone());
        let fit = fit_lm(&ds).unwrap();

        // oracle: Gauss-Jordan elimination on the normal equations
        let m = p + 1;
        let mut a = vec![vec![0.0f64; m + 1]; m];
        for (x, y) in xs.iter().zip(&ys) {
            let mut aug = vec![1.0];
            aug.extend(x);
            for r in 0..m {
                for c in 0..m {
                    a[r][c] += aug[r] * aug[c];
                }
                a[r][m] += aug[r] * y.unwrap();
            }
        }
        for col in 0..m {
            let pivot = (col..m).max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap()).unwrap();
            a.swap(col, pivot);
            let pv = a[col][col];
            for c in col..=m {
                a[col][c] /= pv;
            }
            for r in 0..m {
                if r != col {
                    let factor = a[r][col];
                    for c in col..=m {
                        a[r][c] -= factor * a[col][c];
                    }
                }
            }
        }
        assert!((fit.beta0 - a[0][m]).abs() < 1e-8);
        for j in 0..p {
            assert!((fit.beta[j] - a[j + 1][m]).abs() < 1e-8);
        }
    }

    #[test]
    fn rank_deficiency_names_column() {
        let xs: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, 2.0 * i as f64]).collect();
        let ys: Vec<Option<f64>> = (0..10).map(|i| Some(i as f64)).collect();
        match fit_lm(&dataset(xs, ys)) {
            Err(Error::RankDeficient { column }) => assert_eq!(column, "x1"),
            other => panic!("expected rank-deficiency, got {other:?}"),
        }
    }

    #[test]
    fn zero_noise_interval_width_is_zero() {
        let xs: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64]).collect();
        let ys: Vec<Option<f64>> = (0..10).map(|i| Some(2.0 * i as f64)).collect();
        let ds = dataset(xs, ys);
        let fit = fit_lm(&ds).unwrap();
        let preds = predict_lm(&fit, &ds).unwrap();
        for e in preds.entries() {
            assert!((e.upper95 - e.lower95).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_features_predict_intercept() {
        let xs: Vec<Vec<f64>> = vec![vec![-1.0], vec![1.0], vec![-1.0], vec![1.0]];
        let ys = vec![Some(1.0), Some(2.0), Some(3.0), Some(2.0)];
        let fit = fit_lm(&dataset(xs, ys)).unwrap();
        let test = dataset(vec![vec![0.0]], vec![Some(0.0)]);
        let preds = predict_lm(&fit, &test).unwrap();
        assert!((preds.entries()[0].point - fit.beta0).abs() < 1e-12);
    }

    #[test]
    fn coverage_near_nominal_on_simulated_data() {
        use rand::{Rng, SeedableRng};
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        let gen_row = |rng: &mut rand_chacha::ChaCha8Rng| -> (Vec<f64>, f64) {
            let x: Vec<f64> = (0..2).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let eps: f64 = StandardNormal.sample(rng);
            let y = 0.5 + 1.2 * x[0] - 0.7 * x[1] + 0.8 * eps;
            (x, y)
        };
        let train: Vec<(Vec<f64>, f64)> = (0..1000).map(|_| gen_row(&mut rng)).collect();
        let test: Vec<(Vec<f64>, f64)> = (0..2000).map(|_| gen_row(&mut rng)).collect();
        let train_ds = dataset(
            train.iter().map(|r| r.0.clone()).collect(),
            train.iter().map(|r| Some(r.1)).collect(),
        );
        let test_ds = dataset(
            test.iter().map(|r| r.0.clone()).collect(),
            test.iter().map(|r| Some(r.1)).collect(),
        );
        let fit = fit_lm(&train_ds).unwrap();
        let preds = predict_lm(&fit, &test_ds).unwrap();
        let obs: Vec<f64> = test.iter().map(|r| r.1).collect();
        let cp = crate::metrics::coverage(&preds.intervals(), &obs).unwrap();
        assert!((cp - 0.95).abs() < 0.03, "coverage {cp}");
    }
}
