//! Exact single-layer GP regression: marginal likelihood, predictive
//! distribution, and marginal-likelihood hyperparameter optimization.
//!
//! Consistent with the deep-GP modules, the training Gram always carries the
//! jitter, so `S = K + jitter I + noise I` throughout.

use nalgebra::{DMatrix, DVector};

use crate::adam::Adam;
use crate::error::{Error, Result};
use crate::kernels::{self, KernelSpec, DEFAULT_JITTER};
use crate::linalg::{self, LOG_2PI};

/// A fitted exact GP: kernel, noise, cached factorizations and the training
/// log marginal likelihood.
#[derive(Debug, Clone)]
pub struct GpFit {
    kernel: KernelSpec,
    noise: f64,
    jitter: f64,
    x_rows: Vec<Vec<f64>>,
    y: DVector<f64>,
    /// The raw (unjittered) training Gram.
    k: DMatrix<f64>,
    /// Cholesky of `K + jitter I + noise I`.
    chol_s: DMatrix<f64>,
    alpha: DVector<f64>,
    lml: f64,
}

impl GpFit {
    pub fn kernel(&self) -> &KernelSpec {
        &self.kernel
    }

    pub fn noise(&self) -> f64 {
        self.noise
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// The raw (unjittered) training Gram matrix.
    pub fn gram_matrix(&self) -> &DMatrix<f64> {
        &self.k
    }

    /// Training log marginal likelihood (nats), cached at fit time.
    pub fn lml(&self) -> f64 {
        self.lml
    }

    /// Recompute the log marginal likelihood from the cached factorization.
    pub fn lml_recomputed(&self) -> f64 {
        let n = self.y.len() as f64;
        -0.5 * self.y.dot(&self.alpha) - linalg::chol_log_diag_sum(&self.chol_s)
            - 0.5 * n * LOG_2PI
    }

    /// Latent predictive mean and variance at a test point.
    pub fn predictive(&self, x_star: &[f64]) -> Result<crate::deepgp::Predictive> {
        let n = self.x_rows.len();
        let mut k_star = DVector::zeros(n);
        for i in 0..n {
            k_star[i] = self.kernel.evaluate(x_star, &self.x_rows[i])?;
        }
        let mean = k_star.dot(&self.alpha);
        let w = linalg::chol_solve_vec(&self.chol_s, &k_star);
        let k_ss = self.kernel.evaluate(x_star, x_star)? + self.jitter;
        let var = (k_ss - k_star.dot(&w)).max(0.0);
        Ok(crate::deepgp::Predictive {
            mean,
            latent_variance: var,
        })
    }

    /// Mean test log likelihood (nats per point) in observation space.
    pub fn test_log_likelihood(&self, x_test: &DMatrix<f64>, y_test: &DVector<f64>) -> Result<Vec<f64>> {
        let rows = kernels::matrix_rows(x_test);
        let mut out = Vec::with_capacity(rows.len());
        for (row, &y) in rows.iter().zip(y_test.iter()) {
            let p = self.predictive(row)?;
            let var = p.observed_variance(self.noise);
            let resid = y - p.mean;
            out.push(-0.5 * (LOG_2PI + var.ln() + resid * resid / var));
        }
        Ok(out)
    }
}

/// Fit an exact GP (factorize once, cache `alpha` and the lml).
pub fn fit(
    kernel: &KernelSpec,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    noise: f64,
    jitter: f64,
) -> Result<GpFit> {
    if !(noise > 0.0) || !noise.is_finite() {
        return Err(Error::domain("gp: noise must be positive"));
    }
    if x.nrows() != y.len() {
        return Err(Error::shape("gp: x and y row counts differ"));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::domain("gp: y must be finite"));
    }
    let x_rows = kernels::matrix_rows(x);
    let k = kernels::gram_dense(kernel, &x_rows)?;
    let chol_s = linalg::cholesky_lower(&k, jitter + noise)?;
    let alpha = linalg::chol_solve_vec(&chol_s, y);
    let n = y.len() as f64;
    let lml = -0.5 * y.dot(&alpha) - linalg::chol_log_diag_sum(&chol_s) - 0.5 * n * LOG_2PI;
    Ok(GpFit {
        kernel: kernel.clone(),
        noise,
        jitter,
        x_rows,
        y: y.clone(),
        k,
        chol_s,
        alpha,
        lml,
    })
}

/// Gaussian log marginal likelihood
/// `-1/2 y^T S^{-1} y - 1/2 log det S - N/2 log 2pi`, `S = K + jitter I + noise I`.
pub fn log_marginal_likelihood(
    kernel: &KernelSpec,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    noise: f64,
    jitter: f64,
) -> Result<f64> {
    Ok(fit(kernel, x, y, noise, jitter)?.lml)
}

/// lml together with its gradient with respect to the kernel hyperparameters
/// (natural domain, kernel order) followed by the noise.
pub fn lml_with_grad(
    kernel: &KernelSpec,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    noise: f64,
    jitter: f64,
) -> Result<(f64, Vec<f64>)> {
    let x_rows = kernels::matrix_rows(x);
    let n = x_rows.len();
    let k = kernels::gram_dense(kernel, &x_rows)?;
    let chol_s = linalg::cholesky_lower(&k, jitter + noise)?;
    let alpha = linalg::chol_solve_vec(&chol_s, y);
    let nf = n as f64;
    let lml = -0.5 * y.dot(&alpha) - linalg::chol_log_diag_sum(&chol_s) - 0.5 * nf * LOG_2PI;

    let s_inv = linalg::chol_solve_mat(&chol_s, &DMatrix::identity(n, n));
    let n_h = kernel.hypers().len();
    let mut grads = vec![0.0; n_h + 1];
    let mut pair_grad = vec![0.0; n_h];
    // dlml/dtheta = 1/2 alpha^T dK alpha - 1/2 tr(S^{-1} dK), assembled per
    // unordered pair (dK is symmetric).
    for i in 0..n {
        for j in 0..=i {
            kernel.grad_hypers(&x_rows[i], &x_rows[j], &mut pair_grad)?;
            let w_alpha = alpha[i] * alpha[j];
            let w_trace = s_inv[(i, j)];
            let scale = if i == j { 0.5 } else { 1.0 };
            for (h, &g) in pair_grad.iter().enumerate() {
                grads[h] += scale * (w_alpha - w_trace) * g;
            }
        }
    }
    // Noise enters as dK = I.
    let tr_sinv: f64 = (0..n).map(|i| s_inv[(i, i)]).sum();
    grads[n_h] = 0.5 * (alpha.dot(&alpha) - tr_sinv);
    Ok((lml, grads))
}

/// Result of [`optimize_hypers`].
#[derive(Debug, Clone)]
pub struct HyperOptResult {
    pub kernel: KernelSpec,
    pub noise: f64,
    /// lml after each step; `trace[0]` is the initial value.
    pub trace: Vec<f64>,
}

const HYPER_FLOOR: f64 = 1e-6;

/// Adaptive-moment gradient ascent on the lml over log-domain hyperparameters
/// (kernel scales and the observation noise), with a positivity floor of 1e-6.
///
/// Returns the best iterate encountered, so the reported lml never falls below
/// the initial one.
pub fn optimize_hypers(
    template: &KernelSpec,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    steps: usize,
    lr: f64,
    init_noise: f64,
    jitter: f64,
) -> Result<HyperOptResult> {
    if steps == 0 {
        return Err(Error::domain("optimize_hypers: steps must be >= 1"));
    }
    let n_h = template.hypers().len();
    let mut log_theta: Vec<f64> = template
        .hypers()
        .iter()
        .map(|v| v.max(HYPER_FLOOR).ln())
        .chain(std::iter::once(init_noise.max(HYPER_FLOOR).ln()))
        .collect();
    let mut opt = Adam::new(n_h + 1, lr);
    let mut trace = Vec::with_capacity(steps + 1);
    let mut best: Option<(f64, Vec<f64>)>;

    let eval = |log_theta: &[f64]| -> Result<(f64, Vec<f64>)> {
        let theta: Vec<f64> = log_theta[..n_h].iter().map(|v| v.exp()).collect();
        let noise = log_theta[n_h].exp();
        let kernel = template.with_hypers(&theta)?;
        let (lml, g_nat) = lml_with_grad(&kernel, x, y, noise, jitter)?;
        // Chain rule to the log domain.
        let g_log: Vec<f64> = g_nat
            .iter()
            .zip(theta.iter().chain(std::iter::once(&noise)))
            .map(|(g, t)| g * t)
            .collect();
        Ok((lml, g_log))
    };

    let (lml0, mut grad) = eval(&log_theta)?;
    trace.push(lml0);
    best = Some((lml0, log_theta.clone()));
    for step in 0..steps {
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::numerical(format!(
                "optimize_hypers: non-finite gradient at step {step} \
                 (log hypers {log_theta:?})"
            )));
        }
        opt.step(&mut log_theta, &grad);
        for v in log_theta.iter_mut() {
            *v = v.max(HYPER_FLOOR.ln());
        }
        let (lml, g) = eval(&log_theta)?;
        grad = g;
        trace.push(lml);
        if lml > best.as_ref().unwrap().0 {
            best = Some((lml, log_theta.clone()));
        }
    }
    let (_, best_log) = best.unwrap();
    let theta: Vec<f64> = best_log[..n_h].iter().map(|v| v.exp()).collect();
    Ok(HyperOptResult {
        kernel: template.with_hypers(&theta)?,
        noise: best_log[n_h].exp(),
        trace,
    })
}

/// Paper-default optimization: all covariance hyperparameters start at 1,
/// noise starts at 0.2, 100 Adam steps at learning rate 0.1.
pub fn optimize_hypers_default(
    template: &KernelSpec,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
) -> Result<HyperOptResult> {
    let ones = vec![1.0; template.hypers().len()];
    let init = template.with_hypers(&ones)?;
    optimize_hypers(&init, x, y, 100, 0.1, 0.2, DEFAULT_JITTER)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deepgp::{self, DeepGpArchitecture, LayerSpec, WhitenedState};
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn inputs(values: &[f64]) -> DMatrix<f64> {
        DMatrix::from_column_slice(values.len(), 1, values)
    }

    #[test]
    fn lml_scalar_examples() {
        // Zero kernel (linear with beta=0 at the origin), sigma^2 = 1, y = 0.
        let kernel = KernelSpec::LinearBias { beta: 0.0 };
        let x = inputs(&[0.0]);
        let y = DVector::from_element(1, 0.0);
        let lml = log_marginal_likelihood(&kernel, &x, &y, 1.0, 0.0).unwrap();
        assert_relative_eq!(lml, -0.5 * LOG_2PI, epsilon = 1e-12);

        // K = [[1]], sigma^2 = 1, y = [2]: scalar Gaussian with variance 2.
        let kernel = KernelSpec::unit_rbf();
        let x = inputs(&[0.3]);
        let y = DVector::from_element(1, 2.0);
        let lml = log_marginal_likelihood(&kernel, &x, &y, 1.0, 0.0).unwrap();
        let expect = -0.5 * (4.0 / 2.0) - 0.5 * 2.0f64.ln() - 0.5 * LOG_2PI;
        assert_relative_eq!(lml, expect, epsilon = 1e-12);
    }

    #[test]
    fn lml_matches_dense_log_density_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..10 {
            let n = 5;
            let x = DMatrix::from_fn(n, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
            let y = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
            let kernel = KernelSpec::Rbf {
                outputscale: 1.2,
                lengthscale: 0.8,
            };
            let noise = 0.3;
            let jitter = 1e-4;
            let lml = log_marginal_likelihood(&kernel, &x, &y, noise, jitter).unwrap();
            // Dense route: explicit inverse and determinant.
            let rows = kernels::matrix_rows(&x);
            let mut s = DMatrix::<f64>::zeros(n, n);
            for i in 0..n {
                for j in 0..n {
                    s[(i, j)] = kernel.evaluate(&rows[i], &rows[j]).unwrap();
                }
                s[(i, i)] += jitter + noise;
            }
            let det = s.determinant();
            let s_inv = s.try_inverse().unwrap();
            let quad = (y.transpose() * &s_inv * &y)[(0, 0)];
            let oracle = -0.5 * quad - 0.5 * det.ln() - 0.5 * n as f64 * LOG_2PI;
            assert_relative_eq!(lml, oracle, epsilon = 1e-10);
        }
    }

    #[test]
    fn stored_lml_matches_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let x = DMatrix::from_fn(8, 1, |_, _| rng.sample::<f64, _>(StandardNormal));
        let y = DVector::from_fn(8, |_, _| rng.sample::<f64, _>(StandardNormal));
        let f = fit(&KernelSpec::unit_rbf(), &x, &y, 0.1, 1e-4).unwrap();
        assert_relative_eq!(f.lml(), f.lml_recomputed(), epsilon = 1e-10);
    }

    #[test]
    fn predictive_reverts_to_prior_far_from_data() {
        let x = inputs(&[-0.5, 0.0, 0.5]);
        let y = DVector::from_column_slice(&[0.3, -0.2, 0.8]);
        let f = fit(&KernelSpec::unit_rbf(), &x, &y, 0.1, 1e-4).unwrap();
        let p = f.predictive(&[50.0]).unwrap();
        assert!(p.mean.abs() < 1e-10);
        assert_relative_eq!(p.latent_variance, 1.0 + 1e-4, epsilon = 1e-10);
    }

    #[test]
    fn predictive_interpolates_with_vanishing_noise() {
        let x = inputs(&[-0.5, 0.0, 0.5]);
        let y = DVector::from_column_slice(&[0.3, -0.2, 0.8]);
        let f = fit(&KernelSpec::unit_rbf(), &x, &y, 1e-10, 1e-12).unwrap();
        let p = f.predictive(&[0.0]).unwrap();
        assert_relative_eq!(p.mean, -0.2, epsilon = 1e-6);
        assert!(p.latent_variance < 1e-6);
    }

    #[test]
    fn predictive_variance_is_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let x = DMatrix::from_fn(20, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
        let y = DVector::from_fn(20, |_, _| rng.sample::<f64, _>(StandardNormal));
        let f = fit(
            &KernelSpec::Rbf {
                outputscale: 1.5,
                lengthscale: 0.3,
            },
            &x,
            &y,
            0.01,
            1e-4,
        )
        .unwrap();
        for _ in 0..100 {
            let p = f
                .predictive(&[rng.sample::<f64, _>(StandardNormal), rng.sample(StandardNormal)])
                .unwrap();
            assert!(p.latent_variance >= 0.0);
        }
    }

    #[test]
    fn agrees_with_deep_gp_predictive_for_single_layer() {
        // Feeding the exact conjugate posterior-mean state into the deep-GP
        // predictive path reproduces the GP predictive mean.
        let kernel = KernelSpec::unit_rbf();
        let x = inputs(&[-0.6, -0.1, 0.4, 0.9]);
        let y = DVector::from_column_slice(&[0.2, -0.4, 0.5, 0.1]);
        let noise = 0.2;
        let jitter = crate::kernels::DEFAULT_JITTER;
        let f = fit(&kernel, &x, &y, noise, jitter).unwrap();

        let arch = DeepGpArchitecture::new(
            1,
            noise,
            vec![LayerSpec {
                width: 1,
                kernel: kernel.clone(),
            }],
        )
        .unwrap();
        // Posterior mean of f under the conjugate model, whitened.
        let rows = kernels::matrix_rows(&x);
        let gram = kernels::gram(&kernel, &rows, jitter).unwrap();
        let mut s = gram.matrix().clone();
        for i in 0..4 {
            s[(i, i)] += jitter + noise;
        }
        let f_mean = gram.matrix() * s.clone().try_inverse().unwrap() * &y
            + DMatrix::from_diagonal_element(4, 4, jitter) * s.try_inverse().unwrap() * &y;
        let z = crate::linalg::solve_lower(gram.chol(), &DMatrix::from_column_slice(4, 1, f_mean.as_slice()));
        let state = WhitenedState { layers: vec![z] };
        for x_star in [[-0.3], [0.2], [1.5]] {
            let p_gp = f.predictive(&x_star).unwrap();
            let p_dgp = deepgp::predictive_sample(&arch, &x, &state, &x_star, 0).unwrap();
            assert_relative_eq!(p_gp.mean, p_dgp.mean, epsilon = 1e-8);
        }
    }

    #[test]
    fn lml_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let kernels_to_test = vec![
            KernelSpec::Rbf {
                outputscale: 1.2,
                lengthscale: 0.7,
            },
            KernelSpec::LimitAddRbf {
                o1: 1.0,
                ell1: 0.9,
                o2: 1.1,
                ell2: 1.3,
            },
            KernelSpec::LimitRbfRbf {
                o1: 1.0,
                ell1: 1.0,
                o2: 1.0,
                ell2: 1.0,
                width: None,
            },
            KernelSpec::ArcCosine { beta: 0.4 },
            KernelSpec::Quadrature3Layer {
                o1: 1.0,
                ell1: 1.0,
                o2: 1.0,
                ell2: 1.0,
                o3: 1.0,
                ell3: 1.0,
                width: 2,
                nodes: 7,
            },
        ];
        let mut checked = 0usize;
        for trial in 0..50 {
            let kernel = &kernels_to_test[trial % kernels_to_test.len()];
            let n = 4 + trial % 3;
            let x = DMatrix::from_fn(n, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
            let y = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
            let noise = 0.25;
            let jitter = 1e-4;
            let (_, grad) = lml_with_grad(kernel, &x, &y, noise, jitter).unwrap();
            let theta = kernel.hypers();
            let h = 1e-6;
            for i in 0..=theta.len() {
                let f = |delta: f64| -> f64 {
                    if i < theta.len() {
                        let mut t = theta.clone();
                        t[i] += delta;
                        log_marginal_likelihood(&kernel.with_hypers(&t).unwrap(), &x, &y, noise, jitter)
                            .unwrap()
                    } else {
                        log_marginal_likelihood(kernel, &x, &y, noise + delta, jitter).unwrap()
                    }
                };
                let fd = (f(h) - f(-h)) / (2.0 * h);
                let rel = (grad[i] - fd).abs() / (1.0 + fd.abs());
                assert!(
                    rel < 1e-5,
                    "{} hyper {i}: grad {} vs fd {fd} (rel {rel})",
                    kernel.variant_name(),
                    grad[i]
                );
                checked += 1;
            }
        }
        assert!(checked > 150);
    }

    #[test]
    fn recovers_lengthscale_of_generating_rbf() {
        // Data drawn from a known RBF GP; the optimized lengthscale lands
        // within 20% of the truth.
        let mut rng = ChaCha8Rng::seed_from_u64(59);
        let n = 200;
        let d = 2;
        let true_ell = 0.6;
        let true_noise: f64 = 0.05;
        let x = DMatrix::from_fn(n, d, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        let kernel = KernelSpec::Rbf {
            outputscale: 1.0,
            lengthscale: true_ell,
        };
        let rows = kernels::matrix_rows(&x);
        let gram = kernels::gram(&kernel, &rows, 1e-8).unwrap();
        let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let mut y = gram.chol() * z;
        for v in y.iter_mut() {
            *v += true_noise.sqrt() * rng.sample::<f64, _>(StandardNormal);
        }
        let result = optimize_hypers_default(&KernelSpec::unit_rbf(), &x, &y).unwrap();
        let ell = result.kernel.hypers()[1];
        assert!(
            (ell - true_ell).abs() / true_ell < 0.2,
            "recovered lengthscale {ell}, truth {true_ell}"
        );
        let first = result.trace.first().unwrap();
        let last = result.trace.last().unwrap();
        assert!(last >= first, "lml decreased: {first} -> {last}");
    }

    #[test]
    fn zero_variance_targets_drive_noise_to_floor() {
        let x = inputs(&[-0.5, 0.0, 0.5, 1.0]);
        let y = DVector::zeros(4);
        let result = optimize_hypers(&KernelSpec::unit_rbf(), &x, &y, 200, 0.1, 0.2, 1e-4).unwrap();
        assert!(result.noise < 0.01, "noise stayed at {}", result.noise);
        // Monotone trajectory on this degenerate problem.
        for w in result.trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-9, "trace not monotone: {:?}", w);
        }
    }

    #[test]
    fn lml_equals_marginalized_log_joint() {
        // Gaussian-integral identity: for quadratic g(z) = log_joint(z),
        // log ∫ e^g dz = g(z*) + dim/2 log 2pi - 1/2 log det(-Hess g).
        let kernel = KernelSpec::unit_rbf();
        let noise = 0.3;
        let jitter = crate::kernels::DEFAULT_JITTER;
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        for n in [1usize, 2, 4] {
            let x = DMatrix::from_fn(n, 1, |_, _| rng.sample::<f64, _>(StandardNormal));
            let y = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
            let lml = log_marginal_likelihood(&kernel, &x, &y, noise, jitter).unwrap();

            let arch = DeepGpArchitecture::new(
                1,
                noise,
                vec![LayerSpec {
                    width: 1,
                    kernel: kernel.clone(),
                }],
            )
            .unwrap();
            let rows = kernels::matrix_rows(&x);
            let gram = kernels::gram(&kernel, &rows, jitter).unwrap();
            let l = gram.chol();
            // MAP state z* = (I + L^T L / noise)^{-1} L^T y / noise.
            let a = DMatrix::identity(n, n) + l.transpose() * l / noise;
            let a_inv = a.clone().try_inverse().unwrap();
            let z_star = &a_inv * l.transpose() * &y / noise;
            let state = WhitenedState {
                layers: vec![DMatrix::from_column_slice(n, 1, z_star.as_slice())],
            };
            let g_star = deepgp::log_joint(&arch, &x, &y, &state).unwrap();
            let laplace = g_star + 0.5 * n as f64 * LOG_2PI - 0.5 * a.determinant().ln();
            assert_relative_eq!(lml, laplace, epsilon = 1e-8);
        }
    }
}
