//! Derivative-free minimization (Nelder–Mead simplex).

use crate::scalar::{real, Real};

#[derive(Debug, Clone)]
pub struct NelderMeadOptions<T> {
    pub max_iter: usize,
    pub x_tol: T,
    pub f_tol: T,
    /// Relative size of the initial simplex around the starting point.
    pub init_step: T,
}

impl<T: Real> Default for NelderMeadOptions<T> {
    fn default() -> Self {
        NelderMeadOptions {
            max_iter: 400,
            x_tol: real(1e-7),
            f_tol: real(1e-9),
            init_step: real(0.5),
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimResult<T> {
    pub x: Vec<T>,
    pub value: T,
    pub evals: usize,
    pub iterations: usize,
    pub converged: bool,
}

/// Minimize `f` starting from `x0`. Standard coefficients
/// (reflection 1, expansion 2, contraction 0.5, shrink 0.5).
pub fn nelder_mead<T: Real>(
    mut f: impl FnMut(&[T]) -> T,
    x0: &[T],
    opts: &NelderMeadOptions<T>,
) -> OptimResult<T> {
    let dim = x0.len();
    let mut evals = 0usize;
    let mut eval = |x: &[T], evals: &mut usize| -> T {
        *evals += 1;
        let v = f(x);
        if v.is_nan() {
            T::infinity()
        } else {
            v
        }
    };

    let mut simplex: Vec<Vec<T>> = Vec::with_capacity(dim + 1);
    simplex.push(x0.to_vec());
    for i in 0..dim {
        let mut p = x0.to_vec();
        let step = if p[i].abs() > real(1e-8) {
            p[i].abs() * opts.init_step
        } else {
            opts.init_step
        };
        p[i] += step;
        simplex.push(p);
    }
    let mut values: Vec<T> = simplex.iter().map(|p| eval(p, &mut evals)).collect();

    let mut iterations = 0usize;
    let mut converged = false;
    while iterations < opts.max_iter {
        iterations += 1;
        let mut order: Vec<usize> = (0..=dim).collect();
        order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap_or(std::cmp::Ordering::Equal));
        let reordered: Vec<Vec<T>> = order.iter().map(|&i| simplex[i].clone()).collect();
        let revalues: Vec<T> = order.iter().map(|&i| values[i]).collect();
        simplex = reordered;
        values = revalues;

        // Convergence: simplex diameter and value spread both small.
        let mut x_spread = T::zero();
        for p in &simplex[1..] {
            for (a, b) in p.iter().zip(&simplex[0]) {
                x_spread = x_spread.max((*a - *b).abs());
            }
        }
        let f_spread = (values[dim] - values[0]).abs();
        if x_spread <= opts.x_tol && f_spread <= opts.f_tol * (T::one() + values[0].abs()) {
            converged = true;
            break;
        }

        let mut centroid = vec![T::zero(); dim];
        for p in &simplex[..dim] {
            for (c, a) in centroid.iter_mut().zip(p) {
                *c += *a;
            }
        }
        let inv = T::one() / real::<T>(dim as f64);
        for c in centroid.iter_mut() {
            *c *= inv;
        }

        let worst = values[dim];
        let best = values[0];
        let second_worst = values[dim - 1];

        let reflect: Vec<T> = centroid
            .iter()
            .zip(&simplex[dim])
            .map(|(c, w)| *c + (*c - *w))
            .collect();
        let f_reflect = eval(&reflect, &mut evals);

        if f_reflect < best {
            let expand: Vec<T> = centroid
                .iter()
                .zip(&simplex[dim])
                .map(|(c, w)| *c + real::<T>(2.0) * (*c - *w))
                .collect();
            let f_expand = eval(&expand, &mut evals);
            if f_expand < f_reflect {
                simplex[dim] = expand;
                values[dim] = f_expand;
            } else {
                simplex[dim] = reflect;
                values[dim] = f_reflect;
            }
        } else if f_reflect < second_worst {
            simplex[dim] = reflect;
            values[dim] = f_reflect;
        } else {
            let half = real::<T>(0.5);
            let contract: Vec<T> = if f_reflect < worst {
                centroid.iter().zip(&reflect).map(|(c, r)| *c + half * (*r - *c)).collect()
            } else {
                centroid.iter().zip(&simplex[dim]).map(|(c, w)| *c + half * (*w - *c)).collect()
            };
            let f_contract = eval(&contract, &mut evals);
            if f_contract < worst.min(f_reflect) {
                simplex[dim] = contract;
                values[dim] = f_contract;
            } else {
                let best_point = simplex[0].clone();
                for i in 1..=dim {
                    for (p, b) in simplex[i].iter_mut().zip(&best_point) {
                        *p = *b + half * (*p - *b);
                    }
                    values[i] = eval(&simplex[i].clone(), &mut evals);
                }
            }
        }
    }

    let mut best_idx = 0;
    for i in 1..=dim {
        if values[i] < values[best_idx] {
            best_idx = i;
        }
    }
    OptimResult {
        x: simplex[best_idx].clone(),
        value: values[best_idx],
        evals,
        iterations,
        converged,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_quadratic() {
        let f = |x: &[f64]| (x[0] - 2.0).powi(2) + 3.0 * (x[1] + 1.0).powi(2) + 5.0;
        let r = nelder_mead(f, &[0.0, 0.0], &NelderMeadOptions::default());
        assert!(r.converged);
        assert!((r.x[0] - 2.0).abs() < 1e-5, "{:?}", r.x);
        assert!((r.x[1] + 1.0).abs() < 1e-5, "{:?}", r.x);
        assert!((r.value - 5.0).abs() < 1e-9);
    }

    #[test]
    fn minimizes_rosenbrock_3d() {
        let f = |x: &[f64]| {
            (0..2)
                .map(|i| 100.0 * (x[i + 1] - x[i] * x[i]).powi(2) + (1.0 - x[i]).powi(2))
                .sum::<f64>()
        };
        let opts = NelderMeadOptions { max_iter: 5000, ..Default::default() };
        let r = nelder_mead(f, &[-1.2, 1.0, 0.8], &opts);
        assert!(r.value < 1e-8, "value {}", r.value);
    }

    #[test]
    fn nan_objective_treated_as_infinite() {
        let f = |x: &[f64]| if x[0] < 0.0 { f64::NAN } else { (x[0] - 1.0).powi(2) };
        let r = nelder_mead(f, &[2.0], &NelderMeadOptions::default());
        assert!((r.x[0] - 1.0).abs() < 1e-5);
    }
}
