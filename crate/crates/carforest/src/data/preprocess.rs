//! Preprocessing: KNN imputation, standardization, blockwise PCA, and the
//! log transform of the target.

use serde::{Deserialize, Serialize};

use crate::data::{ArealDataset, TargetScale};
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::scalar::{real, Real};

/// Neighbour count used for imputation unless overridden.
pub const DEFAULT_IMPUTE_K: usize = 5;

/// Fitted parameters of the preprocessing steps, applicable to new data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PreprocessModel<T> {
    pub impute_k: Option<usize>,
    /// Per-feature (name, mean, sd) of the standardization.
    pub standardize_params: Vec<(String, T, T)>,
    pub pca_blocks: Vec<PcaBlock<T>>,
    pub log_target: bool,
}

impl<T> Default for PreprocessModel<T> {
    fn default() -> Self {
        PreprocessModel {
            impute_k: None,
            standardize_params: Vec::new(),
            pca_blocks: Vec::new(),
            log_target: false,
        }
    }
}

/// One PCA-reduced feature block.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PcaBlock<T> {
    pub feature_names: Vec<String>,
    pub component_prefix: String,
    /// Loadings: `n_components` rows of length `feature_names.len()`.
    pub loadings: Vec<Vec<T>>,
    pub n_components: usize,
    /// Fraction of total block variance explained by each retained component.
    pub variance_fractions: Vec<T>,
}

/// Replace missing feature cells by the mean of the `k` nearest units,
/// with distance measured over the standardized complete feature columns.
/// Ties are broken by lower unit index; targets are untouched.
pub fn knn_impute<T: Real>(ds: &ArealDataset<T>, k: usize) -> Result<ArealDataset<T>> {
    let n = ds.n_total();
    let p = ds.n_features();
    if k == 0 || k >= n {
        return Err(Error::Validation(format!(
            "impute neighbour count k={k} must satisfy 1 <= k < n_total={n}"
        )));
    }
    if !ds.has_missing_features() {
        return Ok(ds.clone());
    }

    // Columns with no missing entries define the distance space.
    let mut complete_cols = Vec::new();
    for j in 0..p {
        let missing = ds.units().iter().filter(|u| u.features[j].is_nan()).count();
        if missing == n {
            return Err(Error::Validation(format!(
                "feature column {:?} is entirely missing",
                ds.feature_names()[j]
            )));
        }
        if n - missing < k {
            return Err(Error::Validation(format!(
                "feature column {:?} has fewer than k={k} observed entries",
                ds.feature_names()[j]
            )));
        }
        if missing == 0 {
            complete_cols.push(j);
        }
    }

    // Standardize the complete columns for the distance computation only.
    let mut coords: Vec<Vec<T>> = vec![Vec::with_capacity(complete_cols.len()); n];
    for &j in &complete_cols {
        let values: Vec<T> = ds.units().iter().map(|u| u.features[j]).collect();
        let (mean, sd) = mean_sd(&values);
        let sd = if sd > T::zero() { sd } else { T::one() };
        for (i, v) in values.iter().enumerate() {
            coords[i].push((*v - mean) / sd);
        }
    }

    let dist2 = |a: usize, b: usize| -> T {
        let mut acc = T::zero();
        for (x, y) in coords[a].iter().zip(&coords[b]) {
            let d = *x - *y;
            acc += d * d;
        }
        acc
    };

    let mut out = ds.clone();
    for i in 0..n {
        let missing_cols: Vec<usize> =
            (0..p).filter(|&j| ds.unit(i).features[j].is_nan()).collect();
        if missing_cols.is_empty() {
            continue;
        }
        for j in missing_cols {
            // nearest k units that observe feature j
            let mut candidates: Vec<(T, usize)> = (0..n)
                .filter(|&b| b != i && !ds.unit(b).features[j].is_nan())
                .map(|b| (dist2(i, b), b))
                .collect();
            candidates.sort_by(|x, y| {
                x.0.partial_cmp(&y.0).unwrap_or(std::cmp::Ordering::Equal).then(x.1.cmp(&y.1))
            });
            let take = k.min(candidates.len());
            let mut acc = T::zero();
            for (_, b) in candidates.iter().take(take) {
                acc += ds.unit(*b).features[j];
            }
            out.units_mut()[i].features[j] = acc / real::<T>(take as f64);
        }
    }
    debug_assert!(!out.has_missing_features());
    Ok(out)
}

fn mean_sd<T: Real>(values: &[T]) -> (T, T) {
    let n = real::<T>(values.len() as f64);
    let mut mean = T::zero();
    for v in values {
        mean += *v;
    }
    mean /= n;
    let mut ss = T::zero();
    for v in values {
        let d = *v - mean;
        ss += d * d;
    }
    let var = if values.len() > 1 { ss / (n - T::one()) } else { T::zero() };
    (mean, var.sqrt())
}

/// Transform every feature column to sample mean 0 and sample sd 1,
/// returning the fitted parameters alongside.
pub fn standardize<T: Real>(ds: &ArealDataset<T>) -> Result<(ArealDataset<T>, PreprocessModel<T>)> {
    ds.require_complete_features()?;
    let p = ds.n_features();
    let mut out = ds.clone();
    let mut params = Vec::with_capacity(p);
    for j in 0..p {
        let values: Vec<T> = ds.units().iter().map(|u| u.features[j]).collect();
        let (mean, sd) = mean_sd(&values);
        if !(sd > T::zero()) {
            return Err(Error::ZeroVariance { column: ds.feature_names()[j].clone() });
        }
        for u in out.units_mut() {
            u.features[j] = (u.features[j] - mean) / sd;
        }
        params.push((ds.feature_names()[j].clone(), mean, sd));
    }
    let model = PreprocessModel { standardize_params: params, ..Default::default() };
    Ok((out, model))
}

/// Replace a block of (standardized) features by its minimal set of leading
/// principal components whose cumulative variance fraction reaches
/// `threshold`. Components are ordered by decreasing eigenvalue; each loading
/// vector's largest-magnitude element is made positive so the decomposition
/// is reproducible. Zero-eigenvalue components are dropped.
pub fn pca_reduce<T: Real>(
    ds: &ArealDataset<T>,
    block: &[usize],
    threshold: T,
    component_prefix: &str,
) -> Result<(ArealDataset<T>, PreprocessModel<T>)> {
    ds.require_complete_features()?;
    if block.len() < 2 {
        return Err(Error::Validation("PCA block needs at least 2 features".into()));
    }
    if !(threshold > T::zero() && threshold <= T::one()) {
        return Err(Error::Validation(format!("PCA threshold must lie in (0, 1], got {threshold}")));
    }
    let p = ds.n_features();
    for &j in block {
        if j >= p {
            return Err(Error::Shape(format!("block feature index {j} out of range (p={p})")));
        }
    }

    let n = ds.n_total();
    let b = block.len();
    // covariance of the block (centered; the block is expected standardized)
    let mut centered = Mat::zeros(n, b);
    for (col, &j) in block.iter().enumerate() {
        let values: Vec<T> = ds.units().iter().map(|u| u.features[j]).collect();
        let (mean, _) = mean_sd(&values);
        for i in 0..n {
            centered[(i, col)] = values[i] - mean;
        }
    }
    let mut cov = centered.gram();
    let denom = real::<T>((n.max(2) - 1) as f64);
    for a in 0..b {
        for c in 0..b {
            cov[(a, c)] = cov[(a, c)] / denom;
        }
    }

    let (eigenvalues, eigenvectors) = cov.jacobi_eigh();
    let total: T = eigenvalues.iter().copied().fold(T::zero(), |acc, v| acc + v.max(T::zero()));
    if !(total > T::zero()) {
        return Err(Error::ZeroVariance { column: format!("PCA block {component_prefix:?}") });
    }
    let eig_floor = real::<T>(1e-12) * eigenvalues[0].max(T::one());

    let mut n_components = 0usize;
    let mut cumulative = T::zero();
    let mut fractions = Vec::new();
    for &ev in &eigenvalues {
        if ev <= eig_floor {
            break; // degenerate directions carry no variance
        }
        n_components += 1;
        cumulative += ev;
        fractions.push(ev / total);
        if cumulative / total >= threshold {
            break;
        }
    }
    if n_components == 0 {
        return Err(Error::ZeroVariance { column: format!("PCA block {component_prefix:?}") });
    }

    // sign convention: largest-|loading| element positive
    let mut loadings: Vec<Vec<T>> = Vec::with_capacity(n_components);
    for c in 0..n_components {
        let mut v: Vec<T> = (0..b).map(|r| eigenvectors[(r, c)]).collect();
        let mut max_idx = 0;
        for (idx, x) in v.iter().enumerate() {
            if x.abs() > v[max_idx].abs() {
                max_idx = idx;
            }
        }
        if v[max_idx] < T::zero() {
            for x in v.iter_mut() {
                *x = -*x;
            }
        }
        loadings.push(v);
    }

    // scores = centered block × loadingᵀ
    let mut scores = vec![vec![T::zero(); n_components]; n];
    for i in 0..n {
        for (c, load) in loadings.iter().enumerate() {
            let mut acc = T::zero();
            for (col, l) in load.iter().enumerate() {
                acc += centered[(i, col)] * *l;
            }
            scores[i][c] = acc;
        }
    }

    // assemble: non-block features keep their order, components appended
    let block_set: std::collections::HashSet<usize> = block.iter().copied().collect();
    let mut names: Vec<String> = Vec::new();
    let keep: Vec<usize> = (0..p).filter(|j| !block_set.contains(j)).collect();
    for &j in &keep {
        names.push(ds.feature_names()[j].clone());
    }
    for c in 0..n_components {
        names.push(format!("{component_prefix}_pc{}", c + 1));
    }
    let per_unit: Vec<Vec<T>> = (0..n)
        .map(|i| {
            let mut f: Vec<T> = keep.iter().map(|&j| ds.unit(i).features[j]).collect();
            f.extend(scores[i].iter().copied());
            f
        })
        .collect();
    let mut out = ds.clone();
    out.replace_features(names, per_unit);

    let model = PreprocessModel {
        pca_blocks: vec![PcaBlock {
            feature_names: block.iter().map(|&j| ds.feature_names()[j].clone()).collect(),
            component_prefix: component_prefix.to_string(),
            loadings,
            n_components,
            variance_fractions: fractions,
        }],
        ..Default::default()
    };
    Ok((out, model))
}

/// Replace targets by their natural logarithm.
pub fn log_target<T: Real>(ds: &ArealDataset<T>) -> Result<ArealDataset<T>> {
    if ds.target_scale() == TargetScale::Log {
        return Err(Error::Validation("target is already on the log scale".into()));
    }
    let mut out = ds.clone();
    for u in out.units_mut() {
        if let Some(t) = u.target {
            if !(t > T::zero()) {
                return Err(Error::NonPositiveTarget {
                    id: u.id.clone(),
                    value: t.to_f64().unwrap_or(f64::NAN),
                });
            }
            u.target = Some(t.ln());
        }
    }
    out.set_target_scale(TargetScale::Log);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ArealUnit;
    use proptest::prelude::*;

    fn dataset(features: Vec<Vec<f64>>, names: Vec<&str>) -> ArealDataset<f64> {
        let units: Vec<ArealUnit<f64>> = features
            .into_iter()
            .enumerate()
            .map(|(i, f)| ArealUnit {
                id: format!("u{i}"),
                centroid: (i as f64, 0.0),
                features: f,
                target: Some(1.0),
                group: None,
            })
            .collect();
        ArealDataset::new(units, names.into_iter().map(String::from).collect(), TargetScale::Original)
            .unwrap()
    }

    #[test]
    fn impute_identity_when_complete() {
        let ds = dataset(vec![vec![1.0], vec![2.0], vec![3.0]], vec!["f"]);
        let out = knn_impute(&ds, 2).unwrap();
        assert_eq!(ds, out);
    }

    #[test]
    fn impute_hand_enumerated_neighbours() {
        // complete column c places the missing unit nearest to the units
        // holding {2, 4}; k=2 mean = 3
        let ds = dataset(
            vec![
                vec![0.0, 1.0],
                vec![1.0, 2.0],
                vec![1.05, f64::NAN],
                vec![2.0, 4.0],
            ],
            vec!["c", "f"],
        );
        let out = knn_impute(&ds, 2).unwrap();
        assert!((out.unit(2).features[1] - 3.0).abs() < 1e-12);
        // non-missing cells untouched
        for (a, b) in ds.units().iter().zip(out.units()) {
            assert_eq!(a.features[0], b.features[0]);
        }
    }

    #[test]
    fn impute_default_k_is_five() {
        assert_eq!(DEFAULT_IMPUTE_K, 5);
    }

    #[test]
    fn impute_rejects_entirely_missing_column() {
        let ds = dataset(vec![vec![f64::NAN], vec![f64::NAN], vec![f64::NAN]], vec!["f"]);
        assert!(knn_impute(&ds, 1).is_err());
    }

    #[test]
    fn impute_rejects_k_too_large() {
        let ds = dataset(vec![vec![1.0], vec![2.0]], vec!["f"]);
        assert!(knn_impute(&ds, 2).is_err());
    }

    #[test]
    fn standardize_hand_example() {
        let ds = dataset(vec![vec![1.0], vec![2.0], vec![3.0]], vec!["f"]);
        let (out, model) = standardize(&ds).unwrap();
        let values: Vec<f64> = out.units().iter().map(|u| u.features[0]).collect();
        assert!((values[0] + 1.0).abs() < 1e-12);
        assert!(values[1].abs() < 1e-12);
        assert!((values[2] - 1.0).abs() < 1e-12);
        assert_eq!(model.standardize_params[0].0, "f");
        assert!((model.standardize_params[0].1 - 2.0).abs() < 1e-12);
        assert!((model.standardize_params[0].2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn standardize_zero_variance_names_column() {
        let ds = dataset(vec![vec![5.0, 1.0], vec![5.0, 2.0], vec![5.0, 3.0]], vec!["const", "ok"]);
        match standardize(&ds) {
            Err(Error::ZeroVariance { column }) => assert_eq!(column, "const"),
            other => panic!("expected zero-variance error, got {other:?}"),
        }
    }

    #[test]
    fn pca_perfectly_correlated_keeps_one_component() {
        let raw = dataset(
            (0..40).map(|i| vec![i as f64, 2.0 * i as f64]).collect(),
            vec!["a", "b"],
        );
        let (std_ds, _) = standardize(&raw).unwrap();
        let (out, model) = pca_reduce(&std_ds, &[0, 1], 0.95, "blk").unwrap();
        assert_eq!(model.pca_blocks[0].n_components, 1);
        assert_eq!(out.feature_names(), &["blk_pc1"]);
    }

    #[test]
    fn pca_identity_covariance_keeps_all() {
        // four orthogonal indicator-style columns: equal eigenvalues
        let mut rows = Vec::new();
        for i in 0..40 {
            let mut r = vec![0.0; 4];
            r[i % 4] = 1.0;
            rows.push(r);
        }
        let ds = dataset(rows, vec!["a", "b", "c", "d"]);
        let (std_ds, _) = standardize(&ds).unwrap();
        let (_, model) = pca_reduce(&std_ds, &[0, 1, 2, 3], 0.95, "blk").unwrap();
        // eigenvalues are not exactly equal here (indicators are correlated),
        // but an identity covariance block genuinely needs all components:
        let iid = dataset(
            (0..200)
                .map(|i| {
                    let x = i as f64;
                    vec![(x * 0.7).sin(), (x * 1.3).cos(), ((x + 2.0) * 0.9).sin(), ((x + 5.0) * 1.7).cos()]
                })
                .collect(),
            vec!["a", "b", "c", "d"],
        );
        let (iid_std, _) = standardize(&iid).unwrap();
        let (_, m2) = pca_reduce(&iid_std, &[0, 1, 2, 3], 0.95, "blk").unwrap();
        assert!(m2.pca_blocks[0].n_components >= 3);
        assert!(model.pca_blocks[0].n_components >= 1);
    }

    #[test]
    fn pca_components_uncorrelated() {
        let raw = dataset(
            (0..60)
                .map(|i| {
                    let x = i as f64 * 0.31;
                    vec![x.sin(), x.sin() * 0.5 + x.cos(), x.cos() * 0.2 + (2.0 * x).sin()]
                })
                .collect(),
            vec!["a", "b", "c"],
        );
        let (std_ds, _) = standardize(&raw).unwrap();
        let (out, model) = pca_reduce(&std_ds, &[0, 1, 2], 1.0, "blk").unwrap();
        let m = model.pca_blocks[0].n_components;
        assert!(m >= 2);
        for a in 0..m {
            for b in (a + 1)..m {
                let xa: Vec<f64> = out.units().iter().map(|u| u.features[a]).collect();
                let xb: Vec<f64> = out.units().iter().map(|u| u.features[b]).collect();
                let n = xa.len() as f64;
                let ma = xa.iter().sum::<f64>() / n;
                let mb = xb.iter().sum::<f64>() / n;
                let mut cov = 0.0;
                let mut va = 0.0;
                let mut vb = 0.0;
                for i in 0..xa.len() {
                    cov += (xa[i] - ma) * (xb[i] - mb);
                    va += (xa[i] - ma).powi(2);
                    vb += (xb[i] - mb).powi(2);
                }
                let corr = cov / (va.sqrt() * vb.sqrt());
                assert!(corr.abs() <= 1e-8, "components {a},{b} correlate: {corr}");
            }
        }
    }

    #[test]
    fn pca_rejects_small_block() {
        let ds = dataset(vec![vec![1.0], vec![2.0]], vec!["f"]);
        assert!(pca_reduce(&ds, &[0], 0.95, "blk").is_err());
    }

    #[test]
    fn log_target_examples() {
        let mut ds = dataset(vec![vec![0.0], vec![0.0]], vec!["f"]);
        ds.units_mut()[0].target = Some(1.0);
        ds.units_mut()[1].target = Some(139_282.0);
        let out = log_target(&ds).unwrap();
        assert_eq!(out.unit(0).target, Some(0.0));
        assert!((out.unit(1).target.unwrap() - 11.8445).abs() < 1e-3);
        assert_eq!(out.target_scale(), TargetScale::Log);
    }

    #[test]
    fn log_target_rejects_zero() {
        let mut ds = dataset(vec![vec![0.0]], vec!["f"]);
        ds.units_mut()[0].target = Some(0.0);
        match log_target(&ds) {
            Err(Error::NonPositiveTarget { id, .. }) => assert_eq!(id, "u0"),
            other => panic!("expected non-positive-target error, got {other:?}"),
        }
    }

    proptest! {
        // standardize ∘ standardize = standardize, within 1e-12
        #[test]
        fn standardize_idempotent(seed in 0u64..200) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let rows: Vec<Vec<f64>> = (0..12)
                .map(|_| vec![rng.gen_range(-5.0..5.0), rng.gen_range(0.0..100.0)])
                .collect();
            let ds = dataset(rows, vec!["a", "b"]);
            let (once, _) = standardize(&ds).unwrap();
            let (twice, _) = standardize(&once).unwrap();
            for (u, v) in once.units().iter().zip(twice.units()) {
                for (x, y) in u.features.iter().zip(&v.features) {
                    prop_assert!((x - y).abs() <= 1e-12);
                }
            }
        }
    }
}
