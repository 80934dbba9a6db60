//! Gaussian Leroux CAR model with exact latent-field integration.
//!
//! The model for a training set of size K inside a joint graph of n units
//! (training units followed by prediction units, which carry no likelihood
//! term) is
//!
//! ```text
//! y_k | η       ~ N(β₀ [+ x_kᵀβ] + offset_k + φ_k, σ²)      k = 1..K
//! φ             ~ N(0, [τ Q(ρ, W)]⁻¹)        Q = ρ(diag(W·1) − W) + (1−ρ)I
//! β₀, β_j       ~ N(0, 100000)
//! logit(ρ)      ~ N(0, 100)
//! ln σ⁻², ln τ  ~ log-gamma(1, 0.01)
//! ```
//!
//! Because the likelihood is Gaussian, the latent field η = (φ, β₀[, β]) can
//! be integrated out exactly: one sparse Cholesky factorization per
//! hyperparameter value yields the log marginal posterior, which is maximized
//! over (logit ρ, ln τ, ln σ⁻²) by Nelder–Mead from four spread starting
//! points. Predictions come from the Gaussian conditional at the plug-in mode
//! or from a weighted hyperparameter grid around it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{ArealDataset, TargetScale};
use crate::error::{Error, Result};
use crate::graph::{leroux_structure, NeighbourhoodMatrix};
use crate::linalg::{
    dot, nelder_mead, reverse_cuthill_mckee, CholeskyFactor, CholeskySymbolic, Mat,
    NelderMeadOptions, SparseSymmetric,
};
use crate::metrics::quantile_type7;
use crate::prediction::{Prediction, PredictionSet};
use crate::scalar::{normal_q975, real, Real};

/// Hyperprior constants of the CAR model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CarPriors<T> {
    /// Variance of the N(0, ·) prior on β₀ and each β_j.
    pub beta_variance: T,
    /// Variance of the N(0, ·) prior on logit(ρ).
    pub logit_rho_variance: T,
    /// Shape of the log-gamma prior on ln σ⁻² and ln τ.
    pub log_gamma_shape: T,
    /// Rate of the log-gamma prior on ln σ⁻² and ln τ.
    pub log_gamma_rate: T,
}

impl<T: Real> Default for CarPriors<T> {
    fn default() -> Self {
        CarPriors {
            beta_variance: real(100_000.0),
            logit_rho_variance: real(100.0),
            log_gamma_shape: T::one(),
            log_gamma_rate: real(0.01),
        }
    }
}

/// Hyperparameter triple of the CAR model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CarHyper<T> {
    pub rho: T,
    pub tau: T,
    pub sigma2: T,
}

/// How 95% prediction intervals are produced.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IntervalMode {
    /// Gaussian quantiles at the hyperparameter mode.
    PlugIn,
    /// Posterior-predictive draws from an 8×8×8 hyperparameter grid around
    /// the mode.
    GridMixture { draws: usize, seed: u64 },
}

impl IntervalMode {
    pub fn grid_mixture(seed: u64) -> Self {
        IntervalMode::GridMixture { draws: 1000, seed }
    }
}

/// Fitting options. `fixed_*` pins a hyperparameter instead of optimizing it;
/// `warm_start` replaces the four spread starting points with the given one
/// (plus one default start).
#[derive(Debug, Clone)]
pub struct CarOptions<T> {
    pub interval_mode: IntervalMode,
    pub fixed_rho: Option<T>,
    pub fixed_tau: Option<T>,
    pub fixed_sigma2: Option<T>,
    pub warm_start: Option<CarHyper<T>>,
    pub max_iter: usize,
}

impl<T: Real> Default for CarOptions<T> {
    fn default() -> Self {
        CarOptions {
            interval_mode: IntervalMode::PlugIn,
            fixed_rho: None,
            fixed_tau: None,
            fixed_sigma2: None,
            warm_start: None,
            max_iter: 300,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerDiagnostics {
    pub starts: usize,
    pub evaluations: usize,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CarGridPoint<T> {
    pub hyper: CarHyper<T>,
    pub weight: T,
}

/// A fitted CAR model over a joint training ∪ prediction graph.
pub struct CarFit<T> {
    pub hyper: CarHyper<T>,
    pub log_marginal_posterior: T,
    pub optimizer: OptimizerDiagnostics,
    /// Posterior mean of (φ over the joint graph, β₀[, β]).
    pub latent_mean: Vec<T>,
    /// Posterior marginal sd per latent coordinate.
    pub latent_sd: Vec<T>,
    pub beta0: T,
    pub beta: Vec<T>,
    /// Hyperparameter grid with posterior weights (grid-mixture mode only).
    pub grid: Option<Vec<CarGridPoint<T>>>,
    pub interval_mode: IntervalMode,
    offset: Vec<T>,
    unit_ids: Vec<String>,
    target_scale: TargetScale,
    problem: Problem<T>,
    factor: CholeskyFactor<T>,
}

impl<T: Real> CarFit<T> {
    pub fn n_train(&self) -> usize {
        self.problem.n_train
    }

    pub fn n_joint(&self) -> usize {
        self.problem.n_joint
    }

    /// Joint indices of the prediction (non-training) units.
    pub fn test_indices(&self) -> Vec<usize> {
        (self.problem.n_train..self.problem.n_joint).collect()
    }

    /// Posterior mean of φ restricted to the training units.
    pub fn phi_train(&self) -> &[T] {
        &self.latent_mean[..self.problem.n_train]
    }

    pub fn offset(&self) -> &[T] {
        &self.offset
    }

    pub fn summary(&self) -> CarFitSummary<T> {
        CarFitSummary {
            hyper: self.hyper,
            log_marginal_posterior: self.log_marginal_posterior,
            optimizer: self.optimizer.clone(),
            beta0: self.beta0,
            beta: self.beta.clone(),
            phi_mean: self.latent_mean[..self.problem.n_joint].to_vec(),
            phi_sd: self.latent_sd[..self.problem.n_joint].to_vec(),
            grid: self.grid.clone(),
        }
    }
}

/// JSON-facing view of a [`CarFit`]: hyperparameters, posterior means, and
/// optimizer diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CarFitSummary<T> {
    pub hyper: CarHyper<T>,
    pub log_marginal_posterior: T,
    pub optimizer: OptimizerDiagnostics,
    pub beta0: T,
    pub beta: Vec<T>,
    pub phi_mean: Vec<T>,
    pub phi_sd: Vec<T>,
    pub grid: Option<Vec<CarGridPoint<T>>>,
}

/// Precomputed fitting problem: patterns, symbolic factorizations, and the
/// index maps that let each objective evaluation run as two numeric
/// refactorizations.
struct Problem<T> {
    n_train: usize,
    n_joint: usize,
    /// Fixed-effect count: intercept, plus p coefficients when features are
    /// in the mean.
    q: usize,
    dim: usize,
    ytilde: Vec<T>,
    /// K × q training design (intercept column first).
    design: Mat<T>,
    /// n_joint × q design over the joint units.
    joint_design: Mat<T>,
    q_pattern: SparseSymmetric<T>,
    q_diag_pos: Vec<(usize, T)>,
    q_off_pos: Vec<usize>,
    q_symbolic: CholeskySymbolic,
    /// dQ/dρ = (diag(W·1) − W) − I on the pattern of Q.
    dq_drho: SparseSymmetric<T>,
    p_pattern: SparseSymmetric<T>,
    p_symbolic: CholeskySymbolic,
    /// Q entry position → P entry position.
    q_to_p: Vec<usize>,
    /// Likelihood contribution AᵀA: P positions and coefficients.
    like_pos: Vec<usize>,
    like_coeff: Vec<T>,
    /// AᵀA as a matrix in latent-index space, for gradient traces.
    ata: SparseSymmetric<T>,
    /// Fixed-effect prior diagonal positions in P.
    fixed_diag_pos: Vec<usize>,
    /// Aᵀ(y − offset), unscaled by 1/σ².
    rhs_base: Vec<T>,
    priors: CarPriors<T>,
}

struct Evaluation<T> {
    /// log p(y | θ) with the latent field integrated out.
    log_marginal_likelihood: T,
    /// log marginal likelihood + log hyperprior (the optimized quantity).
    log_posterior: T,
    mu: Vec<T>,
    rss: T,
    factor_p: CholeskyFactor<T>,
    factor_q: CholeskyFactor<T>,
}

impl<T: Real> Problem<T> {
    fn new(
        train: &ArealDataset<T>,
        test: &ArealDataset<T>,
        offset: &[T],
        w_joint: &NeighbourhoodMatrix,
        priors: &CarPriors<T>,
        features_in_mean: bool,
    ) -> Result<Self> {
        let n_train = train.n_total();
        let n_joint = n_train + test.n_total();
        if w_joint.n() != n_joint {
            return Err(Error::Shape(format!(
                "joint graph has {} units, expected {} (train) + {} (test)",
                w_joint.n(),
                n_train,
                test.n_total()
            )));
        }
        if offset.len() != n_joint {
            return Err(Error::Shape(format!(
                "offset length {} does not match joint unit count {}",
                offset.len(),
                n_joint
            )));
        }
        if train.target_scale() != test.target_scale() {
            return Err(Error::Shape("train and test target scales differ".into()));
        }
        if features_in_mean && train.n_features() != test.n_features() {
            return Err(Error::Shape("train and test feature counts differ".into()));
        }
        train.require_complete_features()?;
        if features_in_mean {
            test.require_complete_features()?;
        }
        let y = train.targets()?;
        let ytilde: Vec<T> = y.iter().zip(offset).map(|(yi, o)| *yi - *o).collect();

        let p = if features_in_mean { train.n_features() } else { 0 };
        let q = 1 + p;
        let dim = n_joint + q;

        let mut design = Mat::zeros(n_train, q);
        for i in 0..n_train {
            design[(i, 0)] = T::one();
            for j in 0..p {
                design[(i, j + 1)] = train.unit(i).features[j];
            }
        }
        let mut joint_design = Mat::zeros(n_joint, q);
        for r in 0..n_joint {
            joint_design[(r, 0)] = T::one();
            for j in 0..p {
                let feat = if r < n_train {
                    train.unit(r).features[j]
                } else {
                    test.unit(r - n_train).features[j]
                };
                joint_design[(r, j + 1)] = feat;
            }
        }

        let q_pattern = leroux_structure(w_joint, T::zero(), T::one());
        let dq_drho = leroux_structure(w_joint, T::one(), -T::one());
        let degrees: Vec<T> = (0..n_joint).map(|i| real(w_joint.degree(i) as f64)).collect();

        let mut q_diag_pos = Vec::with_capacity(n_joint);
        let mut q_off_pos = Vec::new();
        for (i, j, _) in q_pattern.iter() {
            let pos = q_pattern.position(i, j).unwrap();
            if i == j {
                q_diag_pos.push((pos, degrees[i]));
            } else {
                q_off_pos.push(pos);
            }
        }

        let rcm = reverse_cuthill_mckee(w_joint.adjacency());
        let q_symbolic = CholeskySymbolic::analyze(&q_pattern, rcm.clone());

        // posterior precision pattern: Q block, likelihood couplings, fixed
        // effects ordered last (they are dense against the training units)
        let mut entries: Vec<(usize, usize, T)> = q_pattern.iter().collect();
        for i in 0..n_train {
            for j in 0..q {
                entries.push((i, n_joint + j, T::zero()));
            }
        }
        for a in 0..q {
            for b in a..q {
                entries.push((n_joint + a, n_joint + b, T::zero()));
            }
        }
        let p_pattern = SparseSymmetric::from_entries(dim, entries);
        let mut perm_p = rcm;
        perm_p.extend(n_joint..dim);
        let p_symbolic = CholeskySymbolic::analyze(&p_pattern, perm_p);

        let q_to_p: Vec<usize> = q_pattern
            .iter()
            .map(|(i, j, _)| p_pattern.position(i, j).expect("Q pattern inside P"))
            .collect();

        let gram = design.gram();
        let mut like_pos = Vec::new();
        let mut like_coeff = Vec::new();
        let mut ata_entries: Vec<(usize, usize, T)> = Vec::new();
        for i in 0..n_train {
            like_pos.push(p_pattern.position(i, i).unwrap());
            like_coeff.push(T::one());
            ata_entries.push((i, i, T::one()));
            for j in 0..q {
                like_pos.push(p_pattern.position(i, n_joint + j).unwrap());
                like_coeff.push(design[(i, j)]);
                ata_entries.push((i, n_joint + j, design[(i, j)]));
            }
        }
        for a in 0..q {
            for b in a..q {
                like_pos.push(p_pattern.position(n_joint + a, n_joint + b).unwrap());
                like_coeff.push(gram[(a, b)]);
                ata_entries.push((n_joint + a, n_joint + b, gram[(a, b)]));
            }
        }
        let ata = SparseSymmetric::from_entries(dim, ata_entries);

        let fixed_diag_pos: Vec<usize> =
            (0..q).map(|j| p_pattern.position(n_joint + j, n_joint + j).unwrap()).collect();

        let mut rhs_base = vec![T::zero(); dim];
        for i in 0..n_train {
            rhs_base[i] = ytilde[i];
        }
        let xty = design.tr_matvec(&ytilde);
        for j in 0..q {
            rhs_base[n_joint + j] = xty[j];
        }

        Ok(Problem {
            n_train,
            n_joint,
            q,
            dim,
            ytilde,
            design,
            joint_design,
            q_pattern,
            q_diag_pos,
            q_off_pos,
            q_symbolic,
            dq_drho,
            p_pattern,
            p_symbolic,
            q_to_p,
            like_pos,
            like_coeff,
            ata,
            fixed_diag_pos,
            rhs_base,
            priors: *priors,
        })
    }

    fn check_hyper(&self, hyper: &CarHyper<T>) -> Result<()> {
        if !(hyper.rho > T::zero() && hyper.rho < T::one())
            || !(hyper.tau > T::zero() && hyper.tau.is_finite())
            || !(hyper.sigma2 > T::zero() && hyper.sigma2.is_finite())
        {
            return Err(Error::Validation(format!(
                "hyperparameters out of range: rho={}, tau={}, sigma2={}",
                hyper.rho, hyper.tau, hyper.sigma2
            )));
        }
        Ok(())
    }

    fn fill_q_values(&self, q: &mut SparseSymmetric<T>, rho: T) {
        let one_minus = T::one() - rho;
        for &(pos, deg) in &self.q_diag_pos {
            q.values_mut()[pos] = rho * deg + one_minus;
        }
        for &pos in &self.q_off_pos {
            q.values_mut()[pos] = -rho;
        }
    }

    fn fill_p_values(
        &self,
        p: &mut SparseSymmetric<T>,
        q: &SparseSymmetric<T>,
        hyper: &CarHyper<T>,
    ) {
        for v in p.values_mut() {
            *v = T::zero();
        }
        let tau = hyper.tau;
        for (q_pos, &p_pos) in self.q_to_p.iter().enumerate() {
            p.values_mut()[p_pos] += tau * q.values()[q_pos];
        }
        let prec = T::one() / hyper.sigma2;
        for (&pos, &c) in self.like_pos.iter().zip(&self.like_coeff) {
            p.values_mut()[pos] += prec * c;
        }
        let beta_prec = T::one() / self.priors.beta_variance;
        for &pos in &self.fixed_diag_pos {
            p.values_mut()[pos] += beta_prec;
        }
    }

    /// Log hyperprior density in the transformed space
    /// (logit ρ, ln τ, ln σ⁻²), where the priors are specified.
    fn log_hyper_prior(&self, hyper: &CarHyper<T>) -> T {
        let u_rho = (hyper.rho / (T::one() - hyper.rho)).ln();
        let u_tau = hyper.tau.ln();
        let u_prec = -(hyper.sigma2.ln());
        let two_pi = real::<T>(2.0 * std::f64::consts::PI);
        let v = self.priors.logit_rho_variance;
        let half = real::<T>(0.5);
        let lp_rho = -half * (two_pi * v).ln() - u_rho * u_rho / (v + v);
        let a = self.priors.log_gamma_shape;
        let b = self.priors.log_gamma_rate;
        // log-gamma density at u: a·ln b − ln Γ(a) + a·u − b·eᵘ (Γ(1) = 1)
        let lg = |u: T| a * b.ln() + a * u - b * u.exp();
        lp_rho + lg(u_tau) + lg(u_prec)
    }

    fn evaluate(&self, hyper: &CarHyper<T>) -> Result<Evaluation<T>> {
        self.check_hyper(hyper)?;
        let n = real::<T>(self.n_joint as f64);
        let k = real::<T>(self.n_train as f64);
        let half = real::<T>(0.5);
        let two_pi = real::<T>(2.0 * std::f64::consts::PI);

        let mut q = self.q_pattern.clone();
        self.fill_q_values(&mut q, hyper.rho);
        let factor_q = self.q_symbolic.factorize(&q)?;

        let mut p = self.p_pattern.clone();
        self.fill_p_values(&mut p, &q, hyper);
        let factor_p = self.p_symbolic.factorize(&p)?;

        let prec = T::one() / hyper.sigma2;
        let rhs: Vec<T> = self.rhs_base.iter().map(|v| *v * prec).collect();
        let mu = factor_p.solve(&rhs);

        let mut rss = T::zero();
        for i in 0..self.n_train {
            let mut lin = mu[i];
            for j in 0..self.q {
                lin += self.design[(i, j)] * mu[self.n_joint + j];
            }
            let r = self.ytilde[i] - lin;
            rss += r * r;
        }

        let mu_phi = &mu[..self.n_joint];
        let quad_phi = q.quad_form(mu_phi);
        let mut quad_fixed = T::zero();
        for j in 0..self.q {
            let b = mu[self.n_joint + j];
            quad_fixed += b * b;
        }
        quad_fixed /= self.priors.beta_variance;

        let logdet_prior = n * hyper.tau.ln() + factor_q.log_det()
            - real::<T>(self.q as f64) * self.priors.beta_variance.ln();
        let log_marginal_likelihood = -half * k * (two_pi * hyper.sigma2).ln()
            - half * rss / hyper.sigma2
            + half * logdet_prior
            - half * (hyper.tau * quad_phi + quad_fixed)
            - half * factor_p.log_det();

        let log_posterior = log_marginal_likelihood + self.log_hyper_prior(hyper);
        Ok(Evaluation { log_marginal_likelihood, log_posterior, mu, rss, factor_p, factor_q })
    }

    /// Analytic gradient of the log marginal posterior with respect to
    /// (logit ρ, ln τ, ln σ⁻²), using Takahashi selected inverses for the
    /// trace terms. The optimizer itself is derivative-free; this exists for
    /// verification and diagnostics.
    fn gradient(&self, hyper: &CarHyper<T>) -> Result<Vec<T>> {
        let eval = self.evaluate(hyper)?;
        let half = real::<T>(0.5);
        let n = real::<T>(self.n_joint as f64);
        let k = real::<T>(self.n_train as f64);

        let z_p = eval.factor_p.selected_inverse();
        let z_q = eval.factor_q.selected_inverse();

        let mu_phi = &eval.mu[..self.n_joint];
        let mut q = self.q_pattern.clone();
        self.fill_q_values(&mut q, hyper.rho);

        // d/dρ, chained through the logit
        let tr_qinv_m = z_q.trace_product(&self.dq_drho);
        let quad_m = self.dq_drho.quad_form(mu_phi);
        let tr_pinv_m = z_p.trace_product(&self.dq_drho);
        let d_rho = half * tr_qinv_m - half * hyper.tau * quad_m - half * hyper.tau * tr_pinv_m;
        let u_rho = (hyper.rho / (T::one() - hyper.rho)).ln();
        let g_rho =
            d_rho * hyper.rho * (T::one() - hyper.rho) - u_rho / self.priors.logit_rho_variance;

        // d/dτ, chained through ln τ
        let quad_q = q.quad_form(mu_phi);
        let tr_pinv_q = z_p.trace_product(&q);
        let d_tau = half * n / hyper.tau - half * quad_q - half * tr_pinv_q;
        let a = self.priors.log_gamma_shape;
        let b = self.priors.log_gamma_rate;
        let g_tau = d_tau * hyper.tau + (a - b * hyper.tau);

        // d/d(ln σ⁻²) via the precision e = 1/σ²
        let tr_pinv_ata = z_p.trace_product(&self.ata);
        let d_prec = half * k * hyper.sigma2 - half * eval.rss - half * tr_pinv_ata;
        let prec = T::one() / hyper.sigma2;
        let g_prec = d_prec * prec + (a - b * prec);

        Ok(vec![g_rho, g_tau, g_prec])
    }
}

fn pack<T: Real>(hyper: &CarHyper<T>) -> [T; 3] {
    [(hyper.rho / (T::one() - hyper.rho)).ln(), hyper.tau.ln(), -(hyper.sigma2.ln())]
}

fn unpack<T: Real>(u: &[T; 3]) -> CarHyper<T> {
    let rho = T::one() / (T::one() + (-u[0]).exp());
    CarHyper { rho, tau: u[1].exp(), sigma2: (-u[2]).exp() }
}

/// Handle over the marginal-posterior surface, for diagnostics and tests.
pub struct CarMarginal<T>(Problem<T>);

impl<T: Real> CarMarginal<T> {
    pub fn new(
        train: &ArealDataset<T>,
        test: &ArealDataset<T>,
        offset: &[T],
        w_joint: &NeighbourhoodMatrix,
        priors: &CarPriors<T>,
        features_in_mean: bool,
    ) -> Result<Self> {
        Problem::new(train, test, offset, w_joint, priors, features_in_mean).map(CarMarginal)
    }

    /// (log marginal likelihood, log marginal posterior) at `hyper`.
    pub fn value(&self, hyper: &CarHyper<T>) -> Result<(T, T)> {
        let e = self.0.evaluate(hyper)?;
        Ok((e.log_marginal_likelihood, e.log_posterior))
    }

    /// Gradient of the log marginal posterior in (logit ρ, ln τ, ln σ⁻²).
    pub fn gradient(&self, hyper: &CarHyper<T>) -> Result<Vec<T>> {
        self.0.gradient(hyper)
    }
}

/// Fit the CAR model on the training units of a joint graph. `test` units are
/// part of the latent field but carry no likelihood term. `offset` has one
/// entry per joint unit (zero where unused). With `features_in_mean` the mean
/// is β₀ + xᵀβ + offset + φ (the standalone CAR benchmark); without it the
/// offset carries the feature effect (the CAR-Forest configuration).
pub fn fit_car<T: Real>(
    train: &ArealDataset<T>,
    test: &ArealDataset<T>,
    offset: &[T],
    w_joint: &NeighbourhoodMatrix,
    priors: &CarPriors<T>,
    features_in_mean: bool,
    options: &CarOptions<T>,
) -> Result<CarFit<T>> {
    let problem = Problem::new(train, test, offset, w_joint, priors, features_in_mean)?;

    // data-scaled spread starts
    let k = problem.n_train;
    let mean_yt: T = problem.ytilde.iter().copied().sum::<T>() / real::<T>(k as f64);
    let mut v = T::zero();
    for yt in &problem.ytilde {
        let d = *yt - mean_yt;
        v += d * d;
    }
    v = (v / real::<T>(k.max(2) as f64 - 1.0)).max(real(1e-8));

    let spread: Vec<CarHyper<T>> = vec![
        CarHyper { rho: real(0.5), tau: real::<T>(2.0) / v, sigma2: v * real(0.5) },
        CarHyper { rho: real(0.9), tau: real::<T>(0.5) / v, sigma2: v * real(0.25) },
        CarHyper { rho: real(0.1), tau: real::<T>(4.0) / v, sigma2: v * real(0.75) },
        CarHyper { rho: real(0.7), tau: T::one() / v, sigma2: v * real(0.1) },
    ];
    let starts: Vec<CarHyper<T>> = match &options.warm_start {
        Some(w) => vec![*w, spread[0]],
        None => spread,
    };

    let fixed = [options.fixed_rho, options.fixed_tau, options.fixed_sigma2];
    let free_dims: Vec<usize> = (0..3).filter(|&d| fixed[d].is_none()).collect();

    let assemble = |free: &[T], base: &CarHyper<T>| -> CarHyper<T> {
        let mut u = pack(base);
        if let Some(r) = options.fixed_rho {
            u[0] = (r / (T::one() - r)).ln();
        }
        if let Some(t) = options.fixed_tau {
            u[1] = t.ln();
        }
        if let Some(s) = options.fixed_sigma2 {
            u[2] = -(s.ln());
        }
        for (slot, &d) in free_dims.iter().enumerate() {
            u[d] = free[slot];
        }
        unpack(&u)
    };

    let mut total_evals = 0usize;
    let mut total_iters = 0usize;
    let mut best: Option<(CarHyper<T>, T, bool)> = None;

    if free_dims.is_empty() {
        let hyper = assemble(&[], &starts[0]);
        let e = problem.evaluate(&hyper)?;
        best = Some((hyper, -e.log_posterior, true));
    } else {
        for start in &starts {
            let u_full = pack(start);
            let x0: Vec<T> = free_dims.iter().map(|&d| u_full[d]).collect();
            let objective = |x: &[T]| -> T {
                let hyper = assemble(x, start);
                match problem.evaluate(&hyper) {
                    Ok(e) => -e.log_posterior,
                    Err(_) => T::infinity(),
                }
            };
            let nm_opts = NelderMeadOptions {
                max_iter: options.max_iter,
                x_tol: real(1e-6),
                f_tol: real(1e-10),
                init_step: real(0.35),
            };
            let r = nelder_mead(objective, &x0, &nm_opts);
            total_evals += r.evals;
            total_iters += r.iterations;
            let hyper = assemble(&r.x, start);
            let better = match &best {
                Some((_, val, _)) => r.value < *val,
                None => true,
            };
            if better && r.value.is_finite() {
                best = Some((hyper, r.value, r.converged));
            }
        }
    }

    let (hyper, value, converged) = best.ok_or_else(|| Error::OptimizerFailed {
        trace: format!("no finite log posterior found from {} starting points", starts.len()),
    })?;
    if !value.is_finite() {
        return Err(Error::OptimizerFailed { trace: format!("objective {value} at mode") });
    }

    let eval = problem.evaluate(&hyper)?;
    let latent_sd: Vec<T> = eval
        .factor_p
        .selected_inverse()
        .diagonal()
        .into_iter()
        .map(|v| v.max(T::zero()).sqrt())
        .collect();

    let grid = match options.interval_mode {
        IntervalMode::PlugIn => None,
        IntervalMode::GridMixture { .. } => Some(build_grid(&problem, &hyper, &free_dims)?),
    };

    let beta0 = eval.mu[problem.n_joint];
    let beta: Vec<T> = eval.mu[problem.n_joint + 1..].to_vec();

    let mut unit_ids = train.ids();
    unit_ids.extend(test.ids());

    Ok(CarFit {
        hyper,
        log_marginal_posterior: eval.log_posterior,
        optimizer: OptimizerDiagnostics {
            starts: starts.len(),
            evaluations: total_evals,
            iterations: total_iters,
            converged,
        },
        latent_mean: eval.mu.clone(),
        latent_sd,
        beta0,
        beta,
        grid,
        interval_mode: options.interval_mode,
        offset: offset.to_vec(),
        unit_ids,
        target_scale: train.target_scale(),
        factor: eval.factor_p,
        problem,
    })
}

const GRID_PER_DIM: usize = 8;
const GRID_HALF_WIDTH_SD: f64 = 2.45;
const GRID_WEIGHT_FLOOR: f64 = 1e-7;

/// 8-per-dimension posterior grid around the mode, spaced by the local
/// curvature (finite-difference Hessian in the transformed space).
fn build_grid<T: Real>(
    problem: &Problem<T>,
    mode: &CarHyper<T>,
    free_dims: &[usize],
) -> Result<Vec<CarGridPoint<T>>> {
    let u_mode = pack(mode);
    let nf = free_dims.len();
    if nf == 0 {
        return Ok(vec![CarGridPoint { hyper: *mode, weight: T::one() }]);
    }
    let value_at = |moves: &[(usize, T)]| -> T {
        let mut u = u_mode;
        for &(slot, delta) in moves {
            u[free_dims[slot]] += delta;
        }
        match problem.evaluate(&unpack(&u)) {
            Ok(e) => e.log_posterior,
            Err(_) => T::neg_infinity(),
        }
    };
    let f0 = value_at(&[]);
    let h = real::<T>(1e-3);

    // negative Hessian of the log posterior (positive definite at the mode)
    let mut hess = Mat::zeros(nf, nf);
    for a in 0..nf {
        let fp = value_at(&[(a, h)]);
        let fm = value_at(&[(a, -h)]);
        hess[(a, a)] = -(fp - (f0 + f0) + fm) / (h * h);
        for b in (a + 1)..nf {
            let fpp = value_at(&[(a, h), (b, h)]);
            let fpm = value_at(&[(a, h), (b, -h)]);
            let fmp = value_at(&[(a, -h), (b, h)]);
            let fmm = value_at(&[(a, -h), (b, -h)]);
            let v = -(fpp - fpm - fmp + fmm) / (real::<T>(4.0) * h * h);
            hess[(a, b)] = v;
            hess[(b, a)] = v;
        }
    }
    // Σ^(1/2) via Cholesky of the inverse Hessian; fall back to a diagonal
    // scaling if the surface is flat in some direction
    let sqrt_cov: Mat<T> = match hess.cholesky_inverse().and_then(|cov| cov.cholesky()) {
        Ok(l) => l,
        Err(_) => {
            let mut l = Mat::zeros(nf, nf);
            for a in 0..nf {
                let haa = hess[(a, a)].max(real(1e-4));
                l[(a, a)] = (T::one() / haa).sqrt();
            }
            l
        }
    };

    let per_dim = GRID_PER_DIM;
    let step = real::<T>(2.0 * GRID_HALF_WIDTH_SD / (per_dim as f64 - 1.0));
    let offsets: Vec<T> = (0..per_dim)
        .map(|idx| (real::<T>(idx as f64) - real::<T>((per_dim - 1) as f64 / 2.0)) * step)
        .collect();

    let mut points: Vec<(CarHyper<T>, T)> = Vec::new();
    let mut index = vec![0usize; nf];
    loop {
        let std_coords: Vec<T> = index.iter().map(|&idx| offsets[idx]).collect();
        let mut u = u_mode;
        for a in 0..nf {
            let mut shift = T::zero();
            for b in 0..=a {
                shift += sqrt_cov[(a, b)] * std_coords[b];
            }
            u[free_dims[a]] += shift;
        }
        let hyper = unpack(&u);
        let lp = match problem.evaluate(&hyper) {
            Ok(e) => e.log_posterior,
            Err(_) => T::neg_infinity(),
        };
        points.push((hyper, lp));

        let mut d = 0;
        loop {
            index[d] += 1;
            if index[d] < per_dim {
                break;
            }
            index[d] = 0;
            d += 1;
            if d == nf {
                break;
            }
        }
        if d == nf {
            break;
        }
    }

    let max_lp =
        points.iter().map(|(_, lp)| *lp).fold(T::neg_infinity(), |a, b| a.max(b));
    let mut weights: Vec<T> = points.iter().map(|(_, lp)| (*lp - max_lp).exp()).collect();
    let floor = real::<T>(GRID_WEIGHT_FLOOR);
    for w in weights.iter_mut() {
        if *w < floor {
            *w = T::zero();
        }
    }
    let total: T = weights.iter().copied().sum();
    Ok(points
        .into_iter()
        .zip(weights)
        .filter(|(_, w)| *w > T::zero())
        .map(|((hyper, _), w)| CarGridPoint { hyper, weight: w / total })
        .collect())
}

/// Posterior-predictive point predictions and 95% intervals for units of the
/// joint graph (typically the non-training units).
pub fn predict_car<T: Real>(fit: &CarFit<T>, indices: &[usize]) -> Result<PredictionSet<T>> {
    let problem = &fit.problem;
    for &r in indices {
        if r >= problem.n_joint {
            return Err(Error::Validation(format!(
                "unit index {r} is not part of the joint graph (n = {})",
                problem.n_joint
            )));
        }
    }

    let indicator = |r: usize| -> Vec<T> {
        let mut v = vec![T::zero(); problem.dim];
        v[r] = T::one();
        for j in 0..problem.q {
            v[problem.n_joint + j] = problem.joint_design[(r, j)];
        }
        v
    };

    match (&fit.grid, fit.interval_mode) {
        (Some(grid), IntervalMode::GridMixture { draws, seed }) => {
            predict_grid(fit, indices, grid, draws, seed, indicator)
        }
        _ => {
            let z = normal_q975::<T>();
            let entries = indices
                .iter()
                .map(|&r| {
                    let v = indicator(r);
                    let mean = dot(&v, &fit.latent_mean) + fit.offset()[r];
                    let var = fit.factor.quad_form_inverse(&v) + fit.hyper.sigma2;
                    let half = z * var.max(T::zero()).sqrt();
                    Prediction {
                        id: fit.unit_ids[r].clone(),
                        point: mean,
                        lower95: mean - half,
                        upper95: mean + half,
                    }
                })
                .collect();
            PredictionSet::new(entries, fit.target_scale)
        }
    }
}

fn predict_grid<T: Real>(
    fit: &CarFit<T>,
    indices: &[usize],
    grid: &[CarGridPoint<T>],
    draws: usize,
    seed: u64,
    indicator: impl Fn(usize) -> Vec<T>,
) -> Result<PredictionSet<T>> {
    let problem = &fit.problem;
    let vs: Vec<Vec<T>> = indices.iter().map(|&r| indicator(r)).collect();

    // largest-remainder apportionment of the draw budget across grid points
    let mut alloc: Vec<usize> = grid
        .iter()
        .map(|g| (g.weight * real::<T>(draws as f64)).floor().to_usize().unwrap_or(0))
        .collect();
    let assigned: usize = alloc.iter().sum();
    let mut remainders: Vec<(usize, T)> = grid
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let exact = g.weight * real::<T>(draws as f64);
            (i, exact - exact.floor())
        })
        .collect();
    remainders.sort_by(|a, b| {
        b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal).then(a.0.cmp(&b.0))
    });
    for k in 0..draws.saturating_sub(assigned) {
        alloc[remainders[k % remainders.len()].0] += 1;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mixture_point = vec![T::zero(); indices.len()];
    let mut draws_per_unit: Vec<Vec<T>> = vec![Vec::with_capacity(draws); indices.len()];

    for (g, &n_draws) in grid.iter().zip(&alloc) {
        let mut q = problem.q_pattern.clone();
        problem.fill_q_values(&mut q, g.hyper.rho);
        let mut p = problem.p_pattern.clone();
        problem.fill_p_values(&mut p, &q, &g.hyper);
        let factor = problem.p_symbolic.factorize(&p)?;
        let prec = T::one() / g.hyper.sigma2;
        let rhs: Vec<T> = problem.rhs_base.iter().map(|v| *v * prec).collect();
        let mu = factor.solve(&rhs);

        for (slot, v) in vs.iter().enumerate() {
            mixture_point[slot] += g.weight * (dot(v, &mu) + fit.offset()[indices[slot]]);
        }
        let sigma = g.hyper.sigma2.sqrt();
        for _ in 0..n_draws {
            let zvec: Vec<T> = (0..problem.dim)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    real(z)
                })
                .collect();
            let sample = factor.sample_zero_mean(&zvec);
            for (slot, v) in vs.iter().enumerate() {
                let mut lin = fit.offset()[indices[slot]];
                for (idx, vi) in v.iter().enumerate() {
                    if *vi != T::zero() {
                        lin += *vi * (mu[idx] + sample[idx]);
                    }
                }
                let noise: f64 = StandardNormal.sample(&mut rng);
                draws_per_unit[slot].push(lin + sigma * real(noise));
            }
        }
    }

    let lo_p = real::<T>(0.025);
    let hi_p = real::<T>(0.975);
    let entries = indices
        .iter()
        .enumerate()
        .map(|(slot, &r)| {
            let mut d = draws_per_unit[slot].clone();
            d.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
            let lower = quantile_type7(&d, lo_p);
            let upper = quantile_type7(&d, hi_p);
            let point = mixture_point[slot];
            Prediction {
                id: fit.unit_ids[r].clone(),
                point,
                lower95: lower.min(point),
                upper95: upper.max(point),
            }
        })
        .collect();
    PredictionSet::new(entries, fit.target_scale)
}
