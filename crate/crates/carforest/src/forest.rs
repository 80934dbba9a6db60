//! Regression random forest built from scratch: CART trees on bootstrap
//! samples with per-split feature subsampling, out-of-bag predictions, and
//! OOB-error prediction intervals.
//!
//! Determinism: every tree owns an RNG stream derived from (seed, tree
//! index), trees are collected in index order, and all row reductions run in
//! a fixed canonical order, so a fit is bit-identical across thread counts.
//! The keyed fitting path canonicalizes rows by caller-supplied stable keys,
//! making the fit invariant to row permutations as well.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::metrics::quantile_type7;
use crate::scalar::{derive_seed, real, Real};

pub const DEFAULT_N_TREES: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForestConfig {
    pub n_trees: usize,
    pub m_try: usize,
    pub min_node: usize,
    pub seed: u64,
}

impl ForestConfig {
    pub fn new(m_try: usize, min_node: usize, seed: u64) -> Self {
        ForestConfig { n_trees: DEFAULT_N_TREES, m_try, min_node, seed }
    }

    pub fn with_n_trees(mut self, n_trees: usize) -> Self {
        self.n_trees = n_trees;
        self
    }

    fn validate(&self, p: usize, n: usize) -> Result<()> {
        if self.n_trees == 0 {
            return Err(Error::Validation("n_trees must be at least 1".into()));
        }
        if self.m_try == 0 || self.m_try > p {
            return Err(Error::Validation(format!("m_try={} must lie in [1, p={p}]", self.m_try)));
        }
        if self.min_node == 0 {
            return Err(Error::Validation("min_node must be at least 1".into()));
        }
        if n < 2 {
            return Err(Error::Validation(format!("need at least 2 training rows, got {n}")));
        }
        Ok(())
    }
}

/// Flattened tree node; `feature = -1` marks a leaf.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeNode<T> {
    pub feature: i32,
    pub threshold: T,
    pub left: u32,
    pub right: u32,
    pub value: T,
    pub count: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree<T> {
    pub nodes: Vec<TreeNode<T>>,
}

impl<T: Real> RegressionTree<T> {
    /// Traversal convention: `x[feature] <= threshold` goes left.
    pub fn predict(&self, x: &[T]) -> T {
        let mut idx = 0usize;
        loop {
            let node = &self.nodes[idx];
            if node.feature < 0 {
                return node.value;
            }
            idx = if x[node.feature as usize] <= node.threshold {
                node.left as usize
            } else {
                node.right as usize
            };
        }
    }
}

/// One realized split, reported by the traced fitting path.
#[derive(Debug, Clone)]
pub struct SplitRecord<T> {
    /// Bootstrap rows in the node (canonical indices, with multiplicity).
    pub rows: Vec<u32>,
    /// Feature indices sampled as candidates at this split.
    pub candidates: Vec<usize>,
    pub feature: usize,
    pub threshold: T,
    /// Sum of child SSEs attained by the chosen split.
    pub children_sse: T,
    /// Targets as seen by the tree (centered), indexed by canonical row.
    pub targets: Vec<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forest<T> {
    pub config: ForestConfig,
    pub trees: Vec<RegressionTree<T>>,
    /// Per-tree bootstrap membership over canonical rows (bit per row).
    /// Not serialized; reconstructible from the seed.
    #[serde(skip)]
    inbag: Vec<Vec<u64>>,
    /// OOB (or fallback) prediction per training row, original order.
    oob_predictions: Vec<T>,
    /// y − OOB prediction per training row.
    oob_errors: Vec<T>,
    /// Rows that appeared in every bootstrap sample and fell back to the
    /// full-forest prediction.
    oob_fallback_units: Vec<usize>,
    oob_sorted: Vec<T>,
    n_features: usize,
}

impl<T: Real> Forest<T> {
    pub fn n_rows(&self) -> usize {
        self.oob_errors.len()
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn oob_errors(&self) -> &[T] {
        &self.oob_errors
    }

    pub fn oob_fallback_units(&self) -> &[usize] {
        &self.oob_fallback_units
    }

    /// True if tree `t` saw canonical row `c` in its bootstrap sample.
    pub fn in_bag(&self, t: usize, c: usize) -> bool {
        (self.inbag[t][c / 64] >> (c % 64)) & 1 == 1
    }
}

fn bitmap_set(bits: &mut [u64], i: usize) {
    bits[i / 64] |= 1 << (i % 64);
}

struct TreeProblem<'a, T> {
    xs: &'a Mat<T>,
    zs: &'a [T],
    m_try: usize,
    min_node: usize,
}

fn grow_node<T: Real>(
    problem: &TreeProblem<'_, T>,
    rows: Vec<u32>,
    z_bar: T,
    rng: &mut ChaCha8Rng,
    nodes: &mut Vec<TreeNode<T>>,
    observer: &mut Option<&mut dyn FnMut(&SplitRecord<T>)>,
) -> u32 {
    let n_node = rows.len();
    let mut sum = T::zero();
    let mut sumsq = T::zero();
    for &r in &rows {
        let z = problem.zs[r as usize];
        sum += z;
        sumsq += z * z;
    }
    let n_t = real::<T>(n_node as f64);
    let node_sse = sumsq - sum * sum / n_t;
    let mean = sum / n_t;

    let make_leaf = |nodes: &mut Vec<TreeNode<T>>| -> u32 {
        let idx = nodes.len() as u32;
        nodes.push(TreeNode {
            feature: -1,
            threshold: T::zero(),
            left: 0,
            right: 0,
            value: mean + z_bar,
            count: n_node as u32,
        });
        idx
    };

    if n_node < 2 * problem.min_node {
        return make_leaf(nodes);
    }

    // fresh uniform sample of m_try candidate features (partial Fisher-Yates)
    let p = problem.xs.cols();
    let mut pool: Vec<usize> = (0..p).collect();
    for i in 0..problem.m_try {
        let j = rng.gen_range(i..p);
        pool.swap(i, j);
    }
    let mut candidates: Vec<usize> = pool[..problem.m_try].to_vec();
    candidates.sort_unstable();

    let mut best: Option<(usize, T, T)> = None; // (feature, threshold, children sse)
    let mut scratch: Vec<(T, u32)> = Vec::with_capacity(n_node);
    for &f in &candidates {
        scratch.clear();
        for &r in &rows {
            scratch.push((problem.xs[(r as usize, f)], r));
        }
        scratch.sort_by(|a, b| {
            a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal).then(a.1.cmp(&b.1))
        });
        let mut cum_sum = T::zero();
        let mut cum_sq = T::zero();
        for i in 0..(n_node - 1) {
            let z = problem.zs[scratch[i].1 as usize];
            cum_sum += z;
            cum_sq += z * z;
            let (a, b) = (scratch[i].0, scratch[i + 1].0);
            if !(a < b) {
                continue;
            }
            let n_l = i + 1;
            let n_r = n_node - n_l;
            if n_l < problem.min_node || n_r < problem.min_node {
                continue;
            }
            // midpoint between consecutive distinct values; skip the
            // candidate if rounding makes it unable to separate them
            let threshold = a + (b - a) / real::<T>(2.0);
            if !(threshold < b) {
                continue;
            }
            let nl_t = real::<T>(n_l as f64);
            let nr_t = real::<T>(n_r as f64);
            let sum_r = sum - cum_sum;
            let sse =
                (cum_sq - cum_sum * cum_sum / nl_t) + ((sumsq - cum_sq) - sum_r * sum_r / nr_t);
            let improves = match &best {
                Some((_, _, best_sse)) => sse < *best_sse,
                None => true,
            };
            if improves {
                best = Some((f, threshold, sse));
            }
        }
    }

    let (feature, threshold, children_sse) = match best {
        Some(b) if b.2 < node_sse => b,
        _ => return make_leaf(nodes),
    };

    if let Some(obs) = observer.as_mut() {
        obs(&SplitRecord {
            rows: rows.clone(),
            candidates,
            feature,
            threshold,
            children_sse,
            targets: problem.zs.to_vec(),
        });
    }

    let mut left_rows = Vec::with_capacity(rows.len());
    let mut right_rows = Vec::with_capacity(rows.len());
    for &r in &rows {
        if problem.xs[(r as usize, feature)] <= threshold {
            left_rows.push(r);
        } else {
            right_rows.push(r);
        }
    }

    let idx = nodes.len() as u32;
    nodes.push(TreeNode {
        feature: feature as i32,
        threshold,
        left: 0,
        right: 0,
        value: T::zero(),
        count: n_node as u32,
    });
    let left = grow_node(problem, left_rows, z_bar, rng, nodes, observer);
    let right = grow_node(problem, right_rows, z_bar, rng, nodes, observer);
    nodes[idx as usize].left = left;
    nodes[idx as usize].right = right;
    idx
}

fn fit_tree<T: Real>(
    problem: &TreeProblem<'_, T>,
    z_bar: T,
    n: usize,
    seed: u64,
    observer: &mut Option<&mut dyn FnMut(&SplitRecord<T>)>,
) -> (RegressionTree<T>, Vec<u64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows: Vec<u32> = (0..n).map(|_| rng.gen_range(0..n) as u32).collect();
    rows.sort_unstable();
    let mut bitmap = vec![0u64; n.div_ceil(64)];
    for &r in &rows {
        bitmap_set(&mut bitmap, r as usize);
    }
    let mut nodes = Vec::new();
    grow_node(problem, rows, z_bar, &mut rng, &mut nodes, observer);
    (RegressionTree { nodes }, bitmap)
}

fn fit_forest_impl<T: Real>(
    x: &Mat<T>,
    z: &[T],
    cfg: &ForestConfig,
    order: Vec<usize>,
    observer: Option<&mut dyn FnMut(&SplitRecord<T>)>,
) -> Result<Forest<T>> {
    let n = x.rows();
    let p = x.cols();
    if z.len() != n {
        return Err(Error::Shape(format!("{n} rows but {} targets", z.len())));
    }
    cfg.validate(p, n)?;

    // canonical-order copies; all row arithmetic runs in this order
    let xs_rows: Vec<Vec<T>> = order.iter().map(|&i| x.row(i).to_vec()).collect();
    let xs = Mat::from_rows(&xs_rows);
    let z_canonical: Vec<T> = order.iter().map(|&i| z[i]).collect();
    let z_bar: T = z_canonical.iter().copied().sum::<T>() / real::<T>(n as f64);
    let zs: Vec<T> = z_canonical.iter().map(|v| *v - z_bar).collect();

    let problem = TreeProblem { xs: &xs, zs: &zs, m_try: cfg.m_try, min_node: cfg.min_node };

    let fitted: Vec<(RegressionTree<T>, Vec<u64>)> = match observer {
        Some(obs) => {
            // traced path runs single-threaded so records arrive in order
            let mut obs = Some(obs);
            (0..cfg.n_trees)
                .map(|t| fit_tree(&problem, z_bar, n, derive_seed(cfg.seed, t as u64), &mut obs))
                .collect()
        }
        None => (0..cfg.n_trees)
            .into_par_iter()
            .map(|t| {
                let mut no_obs: Option<&mut dyn FnMut(&SplitRecord<T>)> = None;
                fit_tree(&problem, z_bar, n, derive_seed(cfg.seed, t as u64), &mut no_obs)
            })
            .collect(),
    };
    let (trees, inbag): (Vec<_>, Vec<_>) = fitted.into_iter().unzip();

    // canonical position of each original row
    let mut canonical_of = vec![0usize; n];
    for (c, &orig) in order.iter().enumerate() {
        canonical_of[orig] = c;
    }

    let mut oob_predictions = vec![T::zero(); n];
    let mut oob_errors = vec![T::zero(); n];
    let mut oob_fallback_units = Vec::new();
    for i in 0..n {
        let c = canonical_of[i];
        let mut acc = T::zero();
        let mut count = 0usize;
        for (t, tree) in trees.iter().enumerate() {
            if (inbag[t][c / 64] >> (c % 64)) & 1 == 0 {
                acc += tree.predict(x.row(i));
                count += 1;
            }
        }
        let pred = if count > 0 {
            acc / real::<T>(count as f64)
        } else {
            oob_fallback_units.push(i);
            let mut full = T::zero();
            for tree in &trees {
                full += tree.predict(x.row(i));
            }
            full / real::<T>(trees.len() as f64)
        };
        oob_predictions[i] = pred;
        oob_errors[i] = z[i] - pred;
    }
    let mut oob_sorted = oob_errors.clone();
    oob_sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));

    Ok(Forest {
        config: *cfg,
        trees,
        inbag,
        oob_predictions,
        oob_errors,
        oob_fallback_units,
        oob_sorted,
        n_features: p,
    })
}

/// Fit a forest; rows are taken in their given order.
pub fn fit_forest<T: Real>(x: &Mat<T>, z: &[T], cfg: &ForestConfig) -> Result<Forest<T>> {
    fit_forest_impl(x, z, cfg, (0..x.rows()).collect(), None)
}

/// Fit with rows canonicalized by stable keys (e.g. hashed unit ids):
/// permuting rows together with their targets and keys leaves the fitted
/// predictor bit-identical. Keys should be distinct.
pub fn fit_forest_keyed<T: Real>(
    x: &Mat<T>,
    z: &[T],
    keys: &[u64],
    cfg: &ForestConfig,
) -> Result<Forest<T>> {
    if keys.len() != x.rows() {
        return Err(Error::Shape(format!("{} rows but {} keys", x.rows(), keys.len())));
    }
    let mut order: Vec<usize> = (0..x.rows()).collect();
    order.sort_by_key(|&i| (keys[i], i));
    fit_forest_impl(x, z, cfg, order, None)
}

/// Single-threaded fitting path that reports every realized split; used to
/// verify split optimality against an exhaustive oracle.
pub fn fit_forest_traced<T: Real>(
    x: &Mat<T>,
    z: &[T],
    cfg: &ForestConfig,
    observer: &mut dyn FnMut(&SplitRecord<T>),
) -> Result<Forest<T>> {
    fit_forest_impl(x, z, cfg, (0..x.rows()).collect(), Some(observer))
}

/// Arithmetic mean of the tree predictions, per row.
pub fn predict_forest<T: Real>(forest: &Forest<T>, x_new: &Mat<T>) -> Result<Vec<T>> {
    if x_new.cols() != forest.n_features {
        return Err(Error::Shape(format!(
            "{} feature columns, forest expects {}",
            x_new.cols(),
            forest.n_features
        )));
    }
    let inv = T::one() / real::<T>(forest.trees.len() as f64);
    Ok((0..x_new.rows())
        .into_par_iter()
        .map(|i| {
            let row = x_new.row(i);
            let mut acc = T::zero();
            for tree in &forest.trees {
                acc += tree.predict(row);
            }
            acc * inv
        })
        .collect())
}

/// Out-of-bag prediction per training row (fallback rows get the full-forest
/// prediction; they are listed in `oob_fallback_units`).
pub fn oob_predict<T: Real>(forest: &Forest<T>) -> Vec<T> {
    forest.oob_predictions.clone()
}

/// 95% interval around a point prediction from the empirical OOB error
/// distribution: `[point + q_0.025, point + q_0.975]` (type-7 quantiles).
pub fn interval_oob<T: Real>(forest: &Forest<T>, point: T) -> Result<(T, T)> {
    if forest.oob_sorted.len() < 40 {
        return Err(Error::Validation(format!(
            "need at least 40 OOB errors for intervals, have {}",
            forest.oob_sorted.len()
        )));
    }
    let lo = quantile_type7(&forest.oob_sorted, real(0.025));
    let hi = quantile_type7(&forest.oob_sorted, real(0.975));
    Ok((point + lo, point + hi))
}

/// Unbiased sample variance of the OOB errors.
pub fn oob_variance<T: Real>(forest: &Forest<T>) -> Result<T> {
    let errs = &forest.oob_errors;
    if errs.len() < 2 {
        return Err(Error::Validation("need at least 2 OOB errors for a variance".into()));
    }
    let n = real::<T>(errs.len() as f64);
    let mean = errs.iter().copied().sum::<T>() / n;
    let mut ss = T::zero();
    for e in errs {
        let d = *e - mean;
        ss += d * d;
    }
    Ok(ss / (n - T::one()))
}
