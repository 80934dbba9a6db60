//! D-nearest-neighbour adjacency and the Leroux precision matrix.

use std::io::Write;

use crate::error::{Error, Result};
use crate::linalg::SparseSymmetric;
use crate::scalar::{real, Real};

/// Binary symmetric neighbourhood structure built by the D-nearest-neighbours
/// rule: unit j is a neighbour of unit k if j is among the D nearest units to
/// k by inter-centroidal Euclidean distance; the directed relation is then
/// symmetrized. The diagonal is empty and every unit keeps at least its D
/// nearest neighbours.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighbourhoodMatrix {
    n: usize,
    d_param: usize,
    /// Sorted neighbour list per unit; both directions stored.
    neighbours: Vec<Vec<usize>>,
}

impl NeighbourhoodMatrix {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d_param(&self) -> usize {
        self.d_param
    }

    pub fn degree(&self, k: usize) -> usize {
        self.neighbours[k].len()
    }

    pub fn neighbours(&self, k: usize) -> &[usize] {
        &self.neighbours[k]
    }

    pub fn adjacency(&self) -> &[Vec<usize>] {
        &self.neighbours
    }

    pub fn is_edge(&self, i: usize, j: usize) -> bool {
        self.neighbours[i].binary_search(&j).is_ok()
    }

    /// Edges as `(i, j)` pairs with `i < j`, sorted.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (i, nbrs) in self.neighbours.iter().enumerate() {
            for &j in nbrs {
                if i < j {
                    out.push((i, j));
                }
            }
        }
        out
    }

    /// Edge-list export: one `i j` line per edge, 0-based, `i < j`, sorted.
    pub fn write_edge_list(&self, mut w: impl Write) -> Result<()> {
        for (i, j) in self.edges() {
            writeln!(w, "{i} {j}")?;
        }
        Ok(())
    }

    pub(crate) fn from_neighbour_sets(d_param: usize, mut neighbours: Vec<Vec<usize>>) -> Self {
        for list in neighbours.iter_mut() {
            list.sort_unstable();
            list.dedup();
        }
        NeighbourhoodMatrix { n: neighbours.len(), d_param, neighbours }
    }
}

/// Build the symmetrized D-nearest-neighbour matrix from centroids.
/// Distance ties are broken by lower unit index, so duplicate centroids are
/// legal and the result is deterministic.
pub fn knn_adjacency<T: Real>(centroids: &[(T, T)], d: usize) -> Result<NeighbourhoodMatrix> {
    let n = centroids.len();
    if d == 0 {
        return Err(Error::Validation("neighbour count D must be at least 1".into()));
    }
    if d >= n {
        return Err(Error::Validation(format!(
            "neighbour count D={d} must be smaller than the unit count n={n}"
        )));
    }
    let mut neighbours: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut dist_buf: Vec<(T, usize)> = Vec::with_capacity(n - 1);
    for k in 0..n {
        dist_buf.clear();
        let (xk, yk) = centroids[k];
        for j in 0..n {
            if j == k {
                continue;
            }
            let dx = centroids[j].0 - xk;
            let dy = centroids[j].1 - yk;
            dist_buf.push((dx * dx + dy * dy, j));
        }
        dist_buf.sort_by(|a, b| {
            a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal).then(a.1.cmp(&b.1))
        });
        for &(_, j) in dist_buf.iter().take(d) {
            // directed edge k -> j, stored symmetric
            neighbours[k].push(j);
            neighbours[j].push(k);
        }
    }
    Ok(NeighbourhoodMatrix::from_neighbour_sets(d, neighbours))
}

/// Joint precision of the Leroux prior (without the τ scaling):
/// `Q = ρ (diag(W·1) − W) + (1 − ρ) I`, positive definite for ρ ∈ [0, 1).
#[derive(Debug, Clone)]
pub struct LerouxPrecision<T> {
    pub matrix: SparseSymmetric<T>,
    pub rho: T,
}

pub fn leroux_precision<T: Real>(w: &NeighbourhoodMatrix, rho: T) -> Result<LerouxPrecision<T>> {
    if !(rho >= T::zero() && rho < T::one()) {
        return Err(Error::Validation(format!(
            "rho must lie in [0, 1); got {rho} (rho = 1 gives a singular intrinsic precision)"
        )));
    }
    Ok(LerouxPrecision { matrix: leroux_structure(w, rho, T::one() - rho), rho })
}

/// `rho · (diag(W·1) − W) + shift · I` on the graph's pattern. With
/// `shift = 1 − rho` this is the Leroux precision; with `rho = 1, shift = −1`
/// it is the derivative of the precision with respect to rho.
pub fn leroux_structure<T: Real>(w: &NeighbourhoodMatrix, rho: T, shift: T) -> SparseSymmetric<T> {
    let n = w.n();
    let mut entries: Vec<(usize, usize, T)> = Vec::new();
    for i in 0..n {
        let deg = real::<T>(w.degree(i) as f64);
        entries.push((i, i, rho * deg + shift));
        for &j in w.neighbours(i) {
            if i < j {
                entries.push((i, j, -rho));
            }
        }
    }
    SparseSymmetric::from_entries(n, entries)
}
