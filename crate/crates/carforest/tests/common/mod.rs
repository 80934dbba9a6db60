//! Shared test support: a dense Gaussian-conditioning oracle for the CAR
//! model and random instance builders.
//!
//! The oracle works on the covariance side (Schur complements of the joint
//! covariance of latent field and data), a different algebraic route from the
//! sparse precision-side implementation it is used to check.

#![allow(dead_code)]

use carforest::car::CarHyper;
use carforest::data::{ArealDataset, ArealUnit, TargetScale};
use carforest::graph::NeighbourhoodMatrix;
use carforest::linalg::Mat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Dense-route posterior for the Leroux CAR model at fixed hyperparameters.
pub struct DenseCarOracle {
    pub latent_mean: Vec<f64>,
    pub latent_cov: Mat<f64>,
    pub log_marginal_likelihood: f64,
    pub n_joint: usize,
    pub q: usize,
    joint_design: Mat<f64>,
    offset: Vec<f64>,
    sigma2: f64,
}

impl DenseCarOracle {
    /// `train` and `test` are concatenated into the joint field (train first).
    pub fn fit(
        train: &ArealDataset<f64>,
        test: &ArealDataset<f64>,
        offset: &[f64],
        w: &NeighbourhoodMatrix,
        hyper: &CarHyper<f64>,
        features_in_mean: bool,
        beta_variance: f64,
    ) -> Self {
        let n_train = train.n_total();
        let n = n_train + test.n_total();
        assert_eq!(w.n(), n);
        assert_eq!(offset.len(), n);
        let p = if features_in_mean { train.n_features() } else { 0 };
        let q = 1 + p;
        let m = n + q;

        // dense Leroux precision, then its inverse as the prior covariance
        let mut prec = Mat::zeros(n, n);
        for i in 0..n {
            prec[(i, i)] = hyper.rho * w.degree(i) as f64 + (1.0 - hyper.rho);
            for &j in w.neighbours(i) {
                prec[(i, j)] = -hyper.rho;
            }
        }
        for i in 0..n {
            for j in 0..n {
                prec[(i, j)] *= hyper.tau;
            }
        }
        let sigma_phi = prec.cholesky_inverse().expect("Leroux precision is PD");

        let mut sigma_prior = Mat::zeros(m, m);
        for i in 0..n {
            for j in 0..n {
                sigma_prior[(i, j)] = sigma_phi[(i, j)];
            }
        }
        for j in 0..q {
            sigma_prior[(n + j, n + j)] = beta_variance;
        }

        // observation matrix A: row i selects phi_i and the design row
        let mut a = Mat::zeros(n_train, m);
        for i in 0..n_train {
            a[(i, i)] = 1.0;
            a[(i, n)] = 1.0;
            for jj in 0..p {
                a[(i, n + 1 + jj)] = train.unit(i).features[jj];
            }
        }

        let ytilde: Vec<f64> = (0..n_train)
            .map(|i| train.unit(i).target.unwrap() - offset[i])
            .collect();

        // Σ_yy = A Σ Aᵀ + σ² I,  Σ_ηy = Σ Aᵀ
        let sigma_eta_y = sigma_prior.matmul(&a.transpose());
        let mut sigma_yy = a.matmul(&sigma_eta_y);
        for i in 0..n_train {
            sigma_yy[(i, i)] += hyper.sigma2;
        }
        let l_yy = sigma_yy.cholesky().expect("data covariance is PD");

        // posterior mean and covariance by conditioning on y
        let alpha = Mat::cholesky_solve(&l_yy, &ytilde);
        let latent_mean: Vec<f64> = (0..m)
            .map(|r| {
                let mut acc = 0.0;
                for i in 0..n_train {
                    acc += sigma_eta_y[(r, i)] * alpha[i];
                }
                acc
            })
            .collect();

        let mut latent_cov = sigma_prior.clone();
        // Σ_post = Σ − Σ_ηy Σ_yy⁻¹ Σ_yη, column by column
        for r in 0..m {
            let col: Vec<f64> = (0..n_train).map(|i| sigma_eta_y[(r, i)]).collect();
            let solved = Mat::cholesky_solve(&l_yy, &col);
            for s in 0..m {
                let mut acc = 0.0;
                for i in 0..n_train {
                    acc += sigma_eta_y[(s, i)] * solved[i];
                }
                latent_cov[(s, r)] -= acc;
            }
        }

        // marginal log likelihood: N(ỹ; 0, Σ_yy)
        let mut logdet = 0.0;
        for i in 0..n_train {
            logdet += 2.0 * l_yy[(i, i)].ln();
        }
        let quad: f64 = ytilde.iter().zip(&alpha).map(|(a, b)| a * b).sum();
        let log_marginal_likelihood = -0.5
            * (n_train as f64 * (2.0 * std::f64::consts::PI).ln() + logdet + quad);

        let mut joint_design = Mat::zeros(n, q);
        for r in 0..n {
            joint_design[(r, 0)] = 1.0;
            for jj in 0..p {
                let v = if r < n_train {
                    train.unit(r).features[jj]
                } else {
                    test.unit(r - n_train).features[jj]
                };
                joint_design[(r, jj + 1)] = v;
            }
        }

        DenseCarOracle {
            latent_mean,
            latent_cov,
            log_marginal_likelihood,
            n_joint: n,
            q,
            joint_design,
            offset: offset.to_vec(),
            sigma2: hyper.sigma2,
        }
    }

    pub fn latent_variances(&self) -> Vec<f64> {
        (0..self.latent_cov.rows()).map(|i| self.latent_cov[(i, i)]).collect()
    }

    /// Posterior-predictive mean and variance for a joint unit.
    pub fn predictive(&self, r: usize) -> (f64, f64) {
        let m = self.latent_mean.len();
        let mut v = vec![0.0; m];
        v[r] = 1.0;
        for j in 0..self.q {
            v[self.n_joint + j] = self.joint_design[(r, j)];
        }
        let mean: f64 =
            v.iter().zip(&self.latent_mean).map(|(a, b)| a * b).sum::<f64>() + self.offset[r];
        let var = self.latent_cov.quad_form(&v) + self.sigma2;
        (mean, var)
    }
}

/// Random small CAR instance: train/test datasets, offsets, and a graph.
pub struct RandomInstance {
    pub train: ArealDataset<f64>,
    pub test: ArealDataset<f64>,
    pub offset: Vec<f64>,
    pub w: NeighbourhoodMatrix,
}

pub fn random_instance(
    n_train: usize,
    n_test: usize,
    p: usize,
    d: usize,
    seed: u64,
) -> RandomInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = n_train + n_test;
    let centroids: Vec<(f64, f64)> =
        (0..n).map(|_| (rng.gen_range(0.0..100.0), rng.gen_range(0.0..100.0))).collect();
    let make_units = |range: std::ops::Range<usize>, rng: &mut ChaCha8Rng, observed: bool| {
        range
            .map(|i| ArealUnit {
                id: format!("u{i}"),
                centroid: centroids[i],
                features: (0..p).map(|_| rng.gen_range(-2.0..2.0)).collect(),
                target: if observed { Some(rng.gen_range(-3.0..3.0)) } else { None },
                group: None,
            })
            .collect::<Vec<_>>()
    };
    let names: Vec<String> = (0..p).map(|j| format!("x{j}")).collect();
    let train_units = make_units(0..n_train, &mut rng, true);
    let test_units = make_units(n_train..n, &mut rng, false);
    let train = ArealDataset::new(train_units, names.clone(), TargetScale::Log).unwrap();
    let test = ArealDataset::new(test_units, names, TargetScale::Log).unwrap();
    let offset: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let w = carforest::graph::knn_adjacency(&centroids, d).unwrap();
    RandomInstance { train, test, offset, w }
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1f64.max(a.abs()).max(b.abs())
}
