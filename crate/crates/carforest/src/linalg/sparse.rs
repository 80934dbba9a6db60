//! Sparse symmetric positive-definite solver.
//!
//! Up-looking Cholesky with an elimination tree over a caller-supplied
//! fill-reducing permutation (reverse Cuthill–McKee works well for the
//! D-nearest-neighbour graphs this crate builds). The factor supports solves,
//! log-determinants, zero-mean Gaussian sampling, and the Takahashi/
//! Erisman–Tinney selected inverse, which yields marginal variances and the
//! traces needed for marginal-likelihood gradients without ever forming a
//! dense inverse.

use crate::error::{Error, Result};
use crate::linalg::dense::Mat;
use crate::scalar::Real;

const NONE: usize = usize::MAX;

/// Symmetric sparse matrix in upper-triangle CSC storage: column `j` holds
/// entries with row `i <= j`, rows ascending, diagonal (when present) last.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseSymmetric<T> {
    n: usize,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    values: Vec<T>,
}

impl<T: Real> SparseSymmetric<T> {
    /// Build from `(i, j, value)` entries. Either triangle may be given;
    /// entries are normalized to the upper triangle and duplicates summed.
    pub fn from_entries(n: usize, entries: impl IntoIterator<Item = (usize, usize, T)>) -> Self {
        let mut tri: Vec<(usize, usize, T)> = entries
            .into_iter()
            .map(|(i, j, v)| if i <= j { (j, i, v) } else { (i, j, v) })
            .collect();
        tri.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));

        let mut cols: Vec<usize> = Vec::with_capacity(tri.len());
        let mut row_idx: Vec<usize> = Vec::with_capacity(tri.len());
        let mut values: Vec<T> = Vec::with_capacity(tri.len());
        for (col, row, v) in tri {
            assert!(col < n, "entry out of bounds");
            if cols.last() == Some(&col) && row_idx.last() == Some(&row) {
                *values.last_mut().unwrap() += v;
            } else {
                cols.push(col);
                row_idx.push(row);
                values.push(v);
            }
        }
        let mut col_ptr = vec![0usize; n + 1];
        for &c in &cols {
            col_ptr[c + 1] += 1;
        }
        for c in 0..n {
            col_ptr[c + 1] += col_ptr[c];
        }
        SparseSymmetric { n, col_ptr, row_idx, values }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.row_idx.len()
    }

    pub fn col_range(&self, j: usize) -> std::ops::Range<usize> {
        self.col_ptr[j]..self.col_ptr[j + 1]
    }

    pub fn row_indices(&self) -> &[usize] {
        &self.row_idx
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    /// Storage position of entry `(i, j)` (either triangle), if present.
    pub fn position(&self, i: usize, j: usize) -> Option<usize> {
        let (col, row) = if i <= j { (j, i) } else { (i, j) };
        let range = self.col_range(col);
        let slice = &self.row_idx[range.clone()];
        slice.binary_search(&row).ok().map(|k| range.start + k)
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.position(i, j).map_or(T::zero(), |p| self.values[p])
    }

    /// Iterate `(row, col, value)` over stored (upper) entries.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, T)> + '_ {
        (0..self.n).flat_map(move |j| {
            self.col_range(j).map(move |p| (self.row_idx[p], j, self.values[p]))
        })
    }

    /// Dense symmetric expansion, for oracles and small problems.
    pub fn to_dense(&self) -> Mat<T> {
        let mut m = Mat::zeros(self.n, self.n);
        for (i, j, v) in self.iter() {
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
        m
    }

    pub fn matvec(&self, x: &[T]) -> Vec<T> {
        assert_eq!(x.len(), self.n);
        let mut out = vec![T::zero(); self.n];
        for (i, j, v) in self.iter() {
            out[i] += v * x[j];
            if i != j {
                out[j] += v * x[i];
            }
        }
        out
    }

    pub fn quad_form(&self, x: &[T]) -> T {
        let ax = self.matvec(x);
        let mut acc = T::zero();
        for (a, b) in ax.iter().zip(x) {
            acc += *a * *b;
        }
        acc
    }
}

/// Reverse Cuthill–McKee ordering over an adjacency structure.
/// Returns `perm` with `perm[new] = old`.
pub fn reverse_cuthill_mckee(adjacency: &[Vec<usize>]) -> Vec<usize> {
    let n = adjacency.len();
    let degree: Vec<usize> = adjacency.iter().map(Vec::len).collect();
    let mut visited = vec![false; n];
    let mut order: Vec<usize> = Vec::with_capacity(n);
    let mut queue: std::collections::VecDeque<usize> = std::collections::VecDeque::new();
    let mut starts: Vec<usize> = (0..n).collect();
    starts.sort_by_key(|&v| (degree[v], v));
    for &start in &starts {
        if visited[start] {
            continue;
        }
        visited[start] = true;
        queue.push_back(start);
        while let Some(v) = queue.pop_front() {
            order.push(v);
            let mut nbrs: Vec<usize> = adjacency[v].iter().copied().filter(|&u| !visited[u]).collect();
            nbrs.sort_by_key(|&u| (degree[u], u));
            for u in nbrs {
                visited[u] = true;
                queue.push_back(u);
            }
        }
    }
    order.reverse();
    order
}

/// Symbolic analysis of a sparse Cholesky factorization under a fixed
/// permutation; reused across numeric refactorizations with new values.
#[derive(Debug, Clone)]
pub struct CholeskySymbolic {
    n: usize,
    perm: Vec<usize>,
    iperm: Vec<usize>,
    parent: Vec<usize>,
    /// Permuted pattern (upper CSC).
    b_col_ptr: Vec<usize>,
    b_row_idx: Vec<usize>,
    /// b_values[k] = a_values[a_source[k]]
    a_source: Vec<usize>,
    /// Column pointers of L.
    l_col_ptr: Vec<usize>,
}

impl CholeskySymbolic {
    /// Analyze the pattern of `a` under permutation `perm` (`perm[new] = old`).
    pub fn analyze<T: Real>(a: &SparseSymmetric<T>, perm: Vec<usize>) -> Self {
        let n = a.n();
        assert_eq!(perm.len(), n);
        let mut iperm = vec![0usize; n];
        for (new, &old) in perm.iter().enumerate() {
            iperm[old] = new;
        }

        // Permuted upper pattern with source positions.
        let mut tri: Vec<(usize, usize, usize)> = Vec::with_capacity(a.nnz());
        for j in 0..n {
            for p in a.col_range(j) {
                let i = a.row_indices()[p];
                let (pi, pj) = (iperm[i], iperm[j]);
                let (row, col) = if pi <= pj { (pi, pj) } else { (pj, pi) };
                tri.push((col, row, p));
            }
        }
        tri.sort_by(|x, y| (x.0, x.1).cmp(&(y.0, y.1)));
        let mut b_col_ptr = vec![0usize; n + 1];
        let mut b_row_idx = Vec::with_capacity(tri.len());
        let mut a_source = Vec::with_capacity(tri.len());
        for (col, row, src) in tri {
            b_col_ptr[col + 1] += 1;
            b_row_idx.push(row);
            a_source.push(src);
        }
        for c in 0..n {
            b_col_ptr[c + 1] += b_col_ptr[c];
        }

        // Elimination tree (Liu's algorithm).
        let mut parent = vec![NONE; n];
        let mut ancestor = vec![NONE; n];
        for k in 0..n {
            for p in b_col_ptr[k]..b_col_ptr[k + 1] {
                let mut i = b_row_idx[p];
                while i != NONE && i < k {
                    let next = ancestor[i];
                    ancestor[i] = k;
                    if next == NONE {
                        parent[i] = k;
                    }
                    i = next;
                }
            }
        }

        // Column counts of L via a symbolic ereach pass.
        let mut counts = vec![1usize; n]; // diagonal
        let mut work = vec![NONE; n];
        let mut stack = vec![0usize; n];
        for k in 0..n {
            let top = ereach(n, &b_col_ptr, &b_row_idx, k, &parent, &mut stack, &mut work);
            for &j in &stack[top..n] {
                counts[j] += 1;
            }
        }
        let mut l_col_ptr = vec![0usize; n + 1];
        for j in 0..n {
            l_col_ptr[j + 1] = l_col_ptr[j] + counts[j];
        }

        CholeskySymbolic { n, perm, iperm, parent, b_col_ptr, b_row_idx, a_source, l_col_ptr }
    }

    pub fn l_nnz(&self) -> usize {
        self.l_col_ptr[self.n]
    }

    /// Numeric factorization of `a` (same pattern as analyzed).
    pub fn factorize<T: Real>(&self, a: &SparseSymmetric<T>) -> Result<CholeskyFactor<T>> {
        let n = self.n;
        debug_assert_eq!(a.nnz(), self.a_source.len());
        let b_values: Vec<T> = self.a_source.iter().map(|&src| a.values()[src]).collect();

        let nnz = self.l_nnz();
        let mut li = vec![0usize; nnz];
        let mut lx = vec![T::zero(); nnz];
        let mut next = self.l_col_ptr[..n].to_vec(); // insertion cursor per column
        let mut x = vec![T::zero(); n];
        let mut work = vec![NONE; n];
        let mut stack = vec![0usize; n];

        for k in 0..n {
            let top = ereach(n, &self.b_col_ptr, &self.b_row_idx, k, &self.parent, &mut stack, &mut work);
            // scatter column k of the (permuted) matrix: rows <= k
            let mut d = T::zero();
            for p in self.b_col_ptr[k]..self.b_col_ptr[k + 1] {
                let i = self.b_row_idx[p];
                if i == k {
                    d = b_values[p];
                } else {
                    x[i] = b_values[p];
                }
            }
            for &j in &stack[top..n] {
                let lkj = x[j] / lx[self.l_col_ptr[j]];
                x[j] = T::zero();
                for p in (self.l_col_ptr[j] + 1)..next[j] {
                    x[li[p]] -= lx[p] * lkj;
                }
                d -= lkj * lkj;
                let p = next[j];
                next[j] += 1;
                li[p] = k;
                lx[p] = lkj;
            }
            if d <= T::zero() || !d.is_finite() {
                return Err(Error::NotPositiveDefinite {
                    index: k,
                    pivot: d.to_f64().unwrap_or(f64::NAN),
                });
            }
            let p = next[k];
            next[k] += 1;
            li[p] = k;
            lx[p] = d.sqrt();
            // diagonal must come first in the column
            debug_assert_eq!(p, self.l_col_ptr[k]);
        }

        Ok(CholeskyFactor {
            n,
            perm: self.perm.clone(),
            iperm: self.iperm.clone(),
            l_col_ptr: self.l_col_ptr.clone(),
            l_row_idx: li,
            l_values: lx,
        })
    }
}

/// Nonzero pattern of row `k` of L, as columns `j < k`, topologically ordered.
/// Returns `top`; the pattern is `stack[top..n]`.
fn ereach(
    n: usize,
    col_ptr: &[usize],
    row_idx: &[usize],
    k: usize,
    parent: &[usize],
    stack: &mut [usize],
    work: &mut [usize],
) -> usize {
    let mut top = n;
    work[k] = k;
    for p in col_ptr[k]..col_ptr[k + 1] {
        let mut i = row_idx[p];
        if i >= k {
            continue;
        }
        let mut len = 0usize;
        while work[i] != k {
            stack[len] = i;
            len += 1;
            work[i] = k;
            i = parent[i];
            if i == NONE {
                break;
            }
        }
        while len > 0 {
            len -= 1;
            top -= 1;
            stack[top] = stack[len];
        }
    }
    top
}

/// Cholesky factor `P A Pᵀ = L Lᵀ` in lower CSC storage (diagonal first per
/// column, rows ascending).
#[derive(Debug, Clone)]
pub struct CholeskyFactor<T> {
    n: usize,
    perm: Vec<usize>,
    iperm: Vec<usize>,
    l_col_ptr: Vec<usize>,
    l_row_idx: Vec<usize>,
    l_values: Vec<T>,
}

impl<T: Real> CholeskyFactor<T> {
    pub fn n(&self) -> usize {
        self.n
    }

    /// log det of the factorized matrix.
    pub fn log_det(&self) -> T {
        let mut acc = T::zero();
        for j in 0..self.n {
            acc += self.l_values[self.l_col_ptr[j]].ln();
        }
        acc + acc
    }

    /// Solve `A x = b`.
    pub fn solve(&self, b: &[T]) -> Vec<T> {
        assert_eq!(b.len(), self.n);
        let mut y: Vec<T> = self.perm.iter().map(|&old| b[old]).collect();
        self.forward(&mut y);
        self.backward(&mut y);
        let mut x = vec![T::zero(); self.n];
        for (new, &old) in self.perm.iter().enumerate() {
            x[old] = y[new];
        }
        x
    }

    /// Quadratic form `vᵀ A⁻¹ v`.
    pub fn quad_form_inverse(&self, v: &[T]) -> T {
        // Only the forward solve is needed: vᵀA⁻¹v = ||L⁻¹ P v||².
        let mut y: Vec<T> = self.perm.iter().map(|&old| v[old]).collect();
        self.forward(&mut y);
        let mut acc = T::zero();
        for t in &y {
            acc += *t * *t;
        }
        acc
    }

    /// Sample from N(0, A⁻¹): solve `Lᵀ w = z`, un-permute.
    pub fn sample_zero_mean(&self, z: &[T]) -> Vec<T> {
        assert_eq!(z.len(), self.n);
        let mut w = z.to_vec();
        self.backward(&mut w);
        let mut x = vec![T::zero(); self.n];
        for (new, &old) in self.perm.iter().enumerate() {
            x[old] = w[new];
        }
        x
    }

    fn forward(&self, y: &mut [T]) {
        for j in 0..self.n {
            let start = self.l_col_ptr[j];
            let end = self.l_col_ptr[j + 1];
            let yj = y[j] / self.l_values[start];
            y[j] = yj;
            for p in (start + 1)..end {
                y[self.l_row_idx[p]] -= self.l_values[p] * yj;
            }
        }
    }

    fn backward(&self, y: &mut [T]) {
        for j in (0..self.n).rev() {
            let start = self.l_col_ptr[j];
            let end = self.l_col_ptr[j + 1];
            let mut acc = y[j];
            for p in (start + 1)..end {
                acc -= self.l_values[p] * y[self.l_row_idx[p]];
            }
            y[j] = acc / self.l_values[start];
        }
    }

    /// Takahashi selected inverse: entries of `A⁻¹` on the pattern of `L`.
    pub fn selected_inverse(&self) -> SelectedInverse<T> {
        let n = self.n;
        let lp = &self.l_col_ptr;
        let li = &self.l_row_idx;
        let lx = &self.l_values;
        let mut zx = vec![T::zero(); lx.len()];

        let lookup = |zx: &[T], col: usize, row: usize| -> T {
            let range = lp[col]..lp[col + 1];
            match li[range.clone()].binary_search(&row) {
                Ok(k) => zx[range.start + k],
                Err(_) => T::zero(),
            }
        };

        for j in (0..n).rev() {
            let start = lp[j];
            let end = lp[j + 1];
            let dj = lx[start];
            // off-diagonal entries; every lookup lands in an already-finished
            // column (> j) because the Cholesky pattern is closed under fill
            for q in (start + 1..end).rev() {
                let i = li[q];
                let mut s = T::zero();
                for p in (start + 1)..end {
                    let k = li[p];
                    let z_ik = if k <= i { lookup(&zx, k, i) } else { lookup(&zx, i, k) };
                    s += lx[p] * z_ik;
                }
                zx[q] = -s / dj;
            }
            // diagonal
            let mut s = T::zero();
            for p in (start + 1)..end {
                s += lx[p] * zx[p];
            }
            zx[start] = T::one() / (dj * dj) - s / dj;
        }

        SelectedInverse {
            n,
            perm: self.perm.clone(),
            iperm: self.iperm.clone(),
            col_ptr: self.l_col_ptr.clone(),
            row_idx: self.l_row_idx.clone(),
            values: zx,
        }
    }
}

/// Entries of an SPD matrix inverse on the Cholesky pattern.
#[derive(Debug, Clone)]
pub struct SelectedInverse<T> {
    n: usize,
    perm: Vec<usize>,
    iperm: Vec<usize>,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    values: Vec<T>,
}

impl<T: Real> SelectedInverse<T> {
    /// Diagonal of the inverse in original (unpermuted) index order.
    pub fn diagonal(&self) -> Vec<T> {
        (0..self.n)
            .map(|i| {
                let j = self.iperm[i];
                self.values[self.col_ptr[j]]
            })
            .collect()
    }

    fn lookup_permuted(&self, row: usize, col: usize) -> T {
        let (col, row) = if row >= col { (col, row) } else { (row, col) };
        let range = self.col_ptr[col]..self.col_ptr[col + 1];
        match self.row_idx[range.clone()].binary_search(&row) {
            Ok(k) => self.values[range.start + k],
            Err(_) => T::zero(),
        }
    }

    /// Entry `(i, j)` of the inverse in original index order. Exact when the
    /// permuted position lies in the factor's pattern, which holds for every
    /// position in the pattern of the factorized matrix.
    pub fn get(&self, i: usize, j: usize) -> T {
        self.lookup_permuted(self.iperm[i], self.iperm[j])
    }

    /// `tr(A⁻¹ S)` for a symmetric `S` whose pattern is contained in the
    /// pattern of the factorized matrix.
    pub fn trace_product(&self, s: &SparseSymmetric<T>) -> T {
        let mut acc = T::zero();
        let two = T::one() + T::one();
        for (i, j, v) in s.iter() {
            let z = self.get(i, j);
            if i == j {
                acc += v * z;
            } else {
                acc += two * v * z;
            }
        }
        acc
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    /// Random sparse SPD matrix: Leroux-like structure over a random graph.
    fn random_spd(n: usize, seed: u64) -> SparseSymmetric<f64> {
        let mut rng = StdRng::seed_from_u64(seed);
        let mut entries: Vec<(usize, usize, f64)> = Vec::new();
        let mut degree = vec![0usize; n];
        for i in 0..n {
            for j in (i + 1)..n {
                if rng.gen_bool(0.25) {
                    entries.push((i, j, -0.6));
                    degree[i] += 1;
                    degree[j] += 1;
                }
            }
        }
        for i in 0..n {
            entries.push((i, i, 0.7 * degree[i] as f64 + 1.0 + rng.gen_range(0.0..0.5)));
        }
        SparseSymmetric::from_entries(n, entries)
    }

    fn adjacency_of(a: &SparseSymmetric<f64>) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); a.n()];
        for (i, j, _) in a.iter() {
            if i != j {
                adj[i].push(j);
                adj[j].push(i);
            }
        }
        adj
    }

    #[test]
    fn from_entries_normalizes_and_sums() {
        let a = SparseSymmetric::from_entries(3, vec![(1, 0, 2.0), (0, 1, 3.0), (2, 2, 1.0), (0, 0, 4.0)]);
        assert_eq!(a.get(0, 1), 5.0);
        assert_eq!(a.get(1, 0), 5.0);
        assert_eq!(a.get(0, 0), 4.0);
        assert_eq!(a.get(2, 2), 1.0);
        assert_eq!(a.get(1, 2), 0.0);
    }

    #[test]
    fn solve_matches_dense() {
        for seed in 0..5u64 {
            let n = 25;
            let a = random_spd(n, seed);
            let perm = reverse_cuthill_mckee(&adjacency_of(&a));
            let sym = CholeskySymbolic::analyze(&a, perm);
            let f = sym.factorize(&a).unwrap();

            let b: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin()).collect();
            let x = f.solve(&b);
            let dense = a.to_dense();
            let l = dense.cholesky().unwrap();
            let xd = Mat::cholesky_solve(&l, &b);
            for (u, v) in x.iter().zip(&xd) {
                assert!((u - v).abs() < 1e-10, "{u} vs {v}");
            }

            // log det against dense factor
            let mut logdet_dense = 0.0;
            for i in 0..n {
                logdet_dense += 2.0 * l[(i, i)].ln();
            }
            assert!((f.log_det() - logdet_dense).abs() < 1e-9);
        }
    }

    #[test]
    fn quad_form_inverse_matches_solve() {
        let a = random_spd(18, 11);
        let perm = reverse_cuthill_mckee(&adjacency_of(&a));
        let f = CholeskySymbolic::analyze(&a, perm).factorize(&a).unwrap();
        let v: Vec<f64> = (0..18).map(|i| 1.0 / (i as f64 + 1.0)).collect();
        let direct = f.quad_form_inverse(&v);
        let x = f.solve(&v);
        let via_solve: f64 = v.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((direct - via_solve).abs() < 1e-11);
    }

    #[test]
    fn selected_inverse_matches_dense_inverse() {
        for seed in [3u64, 9, 21] {
            let n = 20;
            let a = random_spd(n, seed);
            let perm = reverse_cuthill_mckee(&adjacency_of(&a));
            let f = CholeskySymbolic::analyze(&a, perm).factorize(&a).unwrap();
            let z = f.selected_inverse();
            let inv = a.to_dense().cholesky_inverse().unwrap();
            // diagonal everywhere
            let diag = z.diagonal();
            for i in 0..n {
                assert!((diag[i] - inv[(i, i)]).abs() < 1e-10);
            }
            // every stored entry of A has its inverse entry available
            for (i, j, _) in a.iter() {
                assert!((z.get(i, j) - inv[(i, j)]).abs() < 1e-10, "entry ({i},{j})");
            }
            // trace products
            let tr = z.trace_product(&a);
            let mut tr_dense = 0.0;
            let ad = a.to_dense();
            for i in 0..n {
                for j in 0..n {
                    tr_dense += inv[(i, j)] * ad[(j, i)];
                }
            }
            assert!((tr - tr_dense).abs() < 1e-8, "{tr} vs {tr_dense}");
        }
    }

    #[test]
    fn sampling_has_requested_covariance_shape() {
        // Lᵀw = z with z ~ N(0, I) gives Cov(w) = A⁻¹; check one off-diagonal
        // against the dense inverse with a large, seeded sample.
        let a = random_spd(6, 5);
        let perm = (0..6).collect::<Vec<_>>();
        let f = CholeskySymbolic::analyze(&a, perm).factorize(&a).unwrap();
        let inv = a.to_dense().cholesky_inverse().unwrap();
        let mut rng = StdRng::seed_from_u64(42);
        let m = 200_000;
        let (mut c01, mut v0) = (0.0, 0.0);
        for _ in 0..m {
            let z: Vec<f64> = (0..6).map(|_| rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng)).collect();
            let x = f.sample_zero_mean(&z);
            c01 += x[0] * x[1];
            v0 += x[0] * x[0];
        }
        c01 /= m as f64;
        v0 /= m as f64;
        assert!((v0 - inv[(0, 0)]).abs() < 0.02 * inv[(0, 0)].abs().max(1.0));
        assert!((c01 - inv[(0, 1)]).abs() < 0.02 * inv[(0, 0)].abs().max(1.0));
    }

    #[test]
    fn rcm_is_a_permutation() {
        let a = random_spd(30, 2);
        let perm = reverse_cuthill_mckee(&adjacency_of(&a));
        let mut seen = vec![false; 30];
        for &p in &perm {
            assert!(!seen[p]);
            seen[p] = true;
        }
    }

    #[test]
    fn not_positive_definite_reported() {
        let a = SparseSymmetric::from_entries(2, vec![(0, 0, 1.0), (1, 1, 1.0), (0, 1, 2.0)]);
        let sym = CholeskySymbolic::analyze(&a, vec![0, 1]);
        assert!(matches!(sym.factorize(&a), Err(Error::NotPositiveDefinite { .. })));
    }
}
