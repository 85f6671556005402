//! Deep GP architectures, prior sampling, the whitened latent
//! parameterization, the joint log density with its gradient, and posterior
//! predictive sampling.
//!
//! Layer outputs follow `F_l = chol(K_l + jitter I) Z_l`, where `K_l` is the
//! Gram of layer `l`'s kernel evaluated at the previous layer's outputs and
//! `Z_l` holds standard-normal coordinates. Inference operates on the `Z_l`.

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{self, GramMatrix, KernelSpec, DEFAULT_JITTER};
use crate::linalg::{self, LOG_2PI};

/// One GP layer: `width` i.i.d. output dimensions sharing `kernel`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub width: usize,
    pub kernel: KernelSpec,
}

/// Ordered layer list with input dimension and observation noise.
/// The final layer always has width 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ArchWire", into = "ArchWire")]
pub struct DeepGpArchitecture {
    input_dim: usize,
    noise: f64,
    jitter: f64,
    layers: Vec<LayerSpec>,
}

#[derive(Serialize, Deserialize, Clone)]
struct ArchWire {
    input_dim: usize,
    noise: f64,
    #[serde(default = "default_jitter")]
    jitter: f64,
    layers: Vec<LayerSpec>,
}

fn default_jitter() -> f64 {
    DEFAULT_JITTER
}

impl From<DeepGpArchitecture> for ArchWire {
    fn from(a: DeepGpArchitecture) -> Self {
        ArchWire {
            input_dim: a.input_dim,
            noise: a.noise,
            jitter: a.jitter,
            layers: a.layers,
        }
    }
}

impl TryFrom<ArchWire> for DeepGpArchitecture {
    type Error = Error;
    fn try_from(w: ArchWire) -> Result<Self> {
        DeepGpArchitecture::with_jitter(w.input_dim, w.noise, w.layers, w.jitter)
    }
}

impl DeepGpArchitecture {
    pub fn new(input_dim: usize, noise: f64, layers: Vec<LayerSpec>) -> Result<Self> {
        Self::with_jitter(input_dim, noise, layers, DEFAULT_JITTER)
    }

    pub fn with_jitter(
        input_dim: usize,
        noise: f64,
        layers: Vec<LayerSpec>,
        jitter: f64,
    ) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::domain("architecture: input_dim must be >= 1"));
        }
        if !(noise > 0.0) || !noise.is_finite() {
            return Err(Error::domain("architecture: noise must be positive and finite"));
        }
        if !(jitter >= 0.0) || !jitter.is_finite() {
            return Err(Error::domain("architecture: jitter must be >= 0"));
        }
        if layers.is_empty() {
            return Err(Error::domain("architecture: at least one layer required"));
        }
        if layers.last().unwrap().width != 1 {
            return Err(Error::domain("architecture: final layer width must be 1"));
        }
        for (i, layer) in layers.iter().enumerate() {
            if layer.width == 0 {
                return Err(Error::domain(format!("architecture: layer {i} has width 0")));
            }
            layer.kernel.validate()?;
        }
        Ok(DeepGpArchitecture {
            input_dim,
            noise,
            jitter,
            layers,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn noise(&self) -> f64 {
        self.noise
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn set_noise(&mut self, noise: f64) -> Result<()> {
        if !(noise > 0.0) || !noise.is_finite() {
            return Err(Error::domain("architecture: noise must be positive and finite"));
        }
        self.noise = noise;
        Ok(())
    }

    /// Total latent dimension for `n` data points.
    pub fn state_dim(&self, n: usize) -> usize {
        self.layers.iter().map(|l| l.width * n).sum()
    }

    fn check_inputs(&self, x: &DMatrix<f64>) -> Result<()> {
        if x.ncols() != self.input_dim {
            return Err(Error::shape(format!(
                "inputs have {} columns, architecture expects {}",
                x.ncols(),
                self.input_dim
            )));
        }
        if x.nrows() == 0 {
            return Err(Error::shape("inputs must contain at least one point"));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("inputs must be finite"));
        }
        Ok(())
    }
}

/// Per-layer standard-normal latents `Z_l` (`N x H_l`).
#[derive(Debug, Clone, PartialEq)]
pub struct WhitenedState {
    pub layers: Vec<DMatrix<f64>>,
}

impl WhitenedState {
    pub fn zeros(arch: &DeepGpArchitecture, n: usize) -> Self {
        WhitenedState {
            layers: arch
                .layers()
                .iter()
                .map(|l| DMatrix::zeros(n, l.width))
                .collect(),
        }
    }

    pub fn standard_normal(arch: &DeepGpArchitecture, n: usize, rng: &mut ChaCha8Rng) -> Self {
        WhitenedState {
            layers: arch
                .layers()
                .iter()
                .map(|l| DMatrix::from_fn(n, l.width, |_, _| rng.sample(StandardNormal)))
                .collect(),
        }
    }

    pub fn validate_shapes(&self, arch: &DeepGpArchitecture, n: usize) -> Result<()> {
        if self.layers.len() != arch.depth() {
            return Err(Error::shape(format!(
                "state has {} layers, architecture has {}",
                self.layers.len(),
                arch.depth()
            )));
        }
        for (i, (z, l)) in self.layers.iter().zip(arch.layers()).enumerate() {
            if z.nrows() != n || z.ncols() != l.width {
                return Err(Error::shape(format!(
                    "layer {i} latent is {}x{}, expected {}x{}",
                    z.nrows(),
                    z.ncols(),
                    n,
                    l.width
                )));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.layers.iter().map(|z| z.len()).sum()
    }

    /// Concatenate all latents into one vector (layer by layer, column-major
    /// within a layer).
    pub fn flatten(&self) -> DVector<f64> {
        let mut out = DVector::zeros(self.dim());
        let mut at = 0;
        for z in &self.layers {
            out.rows_mut(at, z.len()).copy_from_slice(z.as_slice());
            at += z.len();
        }
        out
    }

    pub fn unflatten_like(&self, v: &[f64]) -> WhitenedState {
        let mut layers = Vec::with_capacity(self.layers.len());
        let mut at = 0;
        for z in &self.layers {
            let mut m = z.clone();
            m.as_mut_slice().copy_from_slice(&v[at..at + z.len()]);
            at += z.len();
            layers.push(m);
        }
        WhitenedState { layers }
    }

    /// Squared Frobenius norm over all layers.
    pub fn sq_norm(&self) -> f64 {
        self.layers.iter().map(|z| z.iter().map(|v| v * v).sum::<f64>()).sum()
    }
}

/// Realized layer values `F_l` with their cached Grams.
#[derive(Debug, Clone)]
pub struct LayerOutputs {
    pub values: Vec<DMatrix<f64>>,
    pub grams: Vec<GramMatrix>,
}

impl LayerOutputs {
    /// Final-layer function values (width 1) as a vector.
    pub fn final_values(&self) -> DVector<f64> {
        let f = self.values.last().expect("at least one layer");
        f.column(0).into_owned()
    }
}

/// Deterministic prior draw of all layer outputs at the inputs `x`.
pub fn sample_prior(arch: &DeepGpArchitecture, x: &DMatrix<f64>, seed: u64) -> Result<LayerOutputs> {
    arch.check_inputs(x)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = x.nrows();
    let mut values = Vec::with_capacity(arch.depth());
    let mut grams = Vec::with_capacity(arch.depth());
    let mut prev_rows = kernels::matrix_rows(x);
    for layer in arch.layers() {
        let gram = kernels::gram(&layer.kernel, &prev_rows, arch.jitter())?;
        let g = DMatrix::from_fn(n, layer.width, |_, _| rng.sample::<f64, _>(StandardNormal));
        let f = gram.chol() * g;
        prev_rows = kernels::matrix_rows(&f);
        values.push(f);
        grams.push(gram);
    }
    Ok(LayerOutputs { values, grams })
}

/// Map whitened latents to layer outputs: `F_l = chol(K_l + jitter I) Z_l`.
pub fn unwhiten(
    arch: &DeepGpArchitecture,
    x: &DMatrix<f64>,
    state: &WhitenedState,
) -> Result<LayerOutputs> {
    arch.check_inputs(x)?;
    state.validate_shapes(arch, x.nrows())?;
    let mut values = Vec::with_capacity(arch.depth());
    let mut grams = Vec::with_capacity(arch.depth());
    let mut prev_rows = kernels::matrix_rows(x);
    for (layer, z) in arch.layers().iter().zip(&state.layers) {
        let gram = kernels::gram(&layer.kernel, &prev_rows, arch.jitter())?;
        let f = gram.chol() * z;
        prev_rows = kernels::matrix_rows(&f);
        values.push(f);
        grams.push(gram);
    }
    Ok(LayerOutputs { values, grams })
}

/// Inverse of [`unwhiten`]: recover `Z_l = L_l^{-1} F_l` given realized outputs.
pub fn whiten(
    arch: &DeepGpArchitecture,
    x: &DMatrix<f64>,
    outputs: &LayerOutputs,
) -> Result<WhitenedState> {
    arch.check_inputs(x)?;
    let mut layers = Vec::with_capacity(arch.depth());
    let mut prev_rows = kernels::matrix_rows(x);
    for (layer, f) in arch.layers().iter().zip(&outputs.values) {
        let gram = kernels::gram(&layer.kernel, &prev_rows, arch.jitter())?;
        let z = linalg::solve_lower(gram.chol(), f);
        prev_rows = kernels::matrix_rows(f);
        layers.push(z);
    }
    Ok(WhitenedState { layers })
}

/// The whitened posterior target for fixed `(arch, x, y)`. The first layer's
/// Gram depends only on `x`, so it is factorized once and reused across the
/// many density/gradient evaluations an optimizer or sampler makes.
pub struct JointDensity<'a> {
    arch: &'a DeepGpArchitecture,
    x: &'a DMatrix<f64>,
    y: &'a DVector<f64>,
    gram1: GramMatrix,
}

impl<'a> JointDensity<'a> {
    pub fn new(
        arch: &'a DeepGpArchitecture,
        x: &'a DMatrix<f64>,
        y: &'a DVector<f64>,
    ) -> Result<Self> {
        arch.check_inputs(x)?;
        if y.len() != x.nrows() {
            return Err(Error::shape("y length does not match inputs"));
        }
        let rows = kernels::matrix_rows(x);
        let gram1 = kernels::gram(&arch.layers()[0].kernel, &rows, arch.jitter())?;
        Ok(JointDensity { arch, x, y, gram1 })
    }

    fn unwhiten_cached(&self, state: &WhitenedState) -> Result<LayerOutputs> {
        let arch = self.arch;
        state.validate_shapes(arch, self.x.nrows())?;
        let mut values = Vec::with_capacity(arch.depth());
        let mut grams = Vec::with_capacity(arch.depth());
        for (l, (layer, z)) in arch.layers().iter().zip(&state.layers).enumerate() {
            let gram = if l == 0 {
                self.gram1.clone()
            } else {
                let rows = kernels::matrix_rows(&values[l - 1]);
                kernels::gram(&layer.kernel, &rows, arch.jitter())?
            };
            let f = gram.chol() * z;
            values.push(f);
            grams.push(gram);
        }
        Ok(LayerOutputs { values, grams })
    }

    pub fn value(&self, state: &WhitenedState) -> Result<f64> {
        let outputs = self.unwhiten_cached(state)?;
        log_joint_from_outputs(self.arch, self.y, state, &outputs)
    }

    pub fn value_and_grad(&self, state: &WhitenedState) -> Result<(f64, WhitenedState)> {
        let outputs = self.unwhiten_cached(state)?;
        let value = log_joint_from_outputs(self.arch, self.y, state, &outputs)?;
        let grad = backprop(self.arch, self.y, state, &outputs)?;
        Ok((value, grad))
    }
}

/// Joint log density of latents and observations (nats):
/// `sum_l log N(vec Z_l; 0, I) + log N(y; f_L, noise I)`.
pub fn log_joint(
    arch: &DeepGpArchitecture,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    state: &WhitenedState,
) -> Result<f64> {
    let outputs = unwhiten(arch, x, state)?;
    log_joint_from_outputs(arch, y, state, &outputs)
}

fn log_joint_from_outputs(
    arch: &DeepGpArchitecture,
    y: &DVector<f64>,
    state: &WhitenedState,
    outputs: &LayerOutputs,
) -> Result<f64> {
    let n = y.len();
    if outputs.values[0].nrows() != n {
        return Err(Error::shape("y length does not match inputs"));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::domain("y must be finite"));
    }
    let total_latents = state.dim();
    let prior = -0.5 * state.sq_norm() - 0.5 * total_latents as f64 * LOG_2PI;
    let f = outputs.final_values();
    let noise = arch.noise();
    let resid_sq = (y - &f).norm_squared();
    let lik = -0.5 * resid_sq / noise - 0.5 * n as f64 * (LOG_2PI + noise.ln());
    Ok(prior + lik)
}

/// [`log_joint`] together with its gradient with respect to the whitened
/// latents, propagated through every Gram's Cholesky factor.
pub fn log_joint_with_grad(
    arch: &DeepGpArchitecture,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    state: &WhitenedState,
) -> Result<(f64, WhitenedState)> {
    let outputs = unwhiten(arch, x, state)?;
    let value = log_joint_from_outputs(arch, y, state, &outputs)?;
    let grad = backprop(arch, y, state, &outputs)?;
    Ok((value, grad))
}

fn backprop(
    arch: &DeepGpArchitecture,
    y: &DVector<f64>,
    state: &WhitenedState,
    outputs: &LayerOutputs,
) -> Result<WhitenedState> {
    let depth = arch.depth();
    let n = y.len();
    let mut grads: Vec<DMatrix<f64>> = Vec::with_capacity(depth);
    // d(log lik)/d f_L.
    let f = outputs.final_values();
    let mut f_bar = DMatrix::zeros(n, 1);
    for i in 0..n {
        f_bar[(i, 0)] = (y[i] - f[i]) / arch.noise();
    }

    for l in (0..depth).rev() {
        let chol = outputs.grams[l].chol();
        let z = &state.layers[l];
        // F_l = L_l Z_l: adjoints of Z and L.
        let z_bar = chol.transpose() * &f_bar - z;
        grads.push(z_bar);
        if l > 0 {
            let l_bar = &f_bar * z.transpose();
            let k_bar = linalg::cholesky_rev(chol, &l_bar);
            f_bar = kernel_input_adjoint(
                &arch.layers()[l].kernel,
                &outputs.values[l - 1],
                &k_bar,
            )?;
        }
    }
    grads.reverse();
    Ok(WhitenedState { layers: grads })
}

/// Accumulate `d loss / d P` where `K[i][j] = k(p_i, p_j)` and `k_bar` is the
/// (symmetric) adjoint of K: `P_bar[m] = 2 sum_j k_bar[m,j] dk(p_m, p_j)/dp_m`.
fn kernel_input_adjoint(
    kernel: &KernelSpec,
    points: &DMatrix<f64>,
    k_bar: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let n = points.nrows();
    let h = points.ncols();
    let rows = kernels::matrix_rows(points);
    let mut out = DMatrix::zeros(n, h);
    let mut g = vec![0.0; h];
    for m in 0..n {
        for j in 0..n {
            kernel.grad_input(&rows[m], &rows[j], &mut g)?;
            let w = 2.0 * k_bar[(m, j)];
            for c in 0..h {
                out[(m, c)] += w * g[c];
            }
        }
    }
    Ok(out)
}

/// Latent predictive mean and variance at one test input.
#[derive(Debug, Clone, Copy)]
pub struct Predictive {
    pub mean: f64,
    /// Variance of the latent function value (before observation noise).
    pub latent_variance: f64,
}

impl Predictive {
    pub fn observed_variance(&self, noise: f64) -> f64 {
        self.latent_variance + noise
    }
}

/// Draw the layer path for a test point conditional on realized outputs, and
/// return the final layer's conditional mean and variance.
///
/// Hidden layers are sampled from their conditional GP given `(F_l, f*_{l-1})`;
/// the last layer is not sampled.
pub fn predictive_sample(
    arch: &DeepGpArchitecture,
    x: &DMatrix<f64>,
    state: &WhitenedState,
    x_star: &[f64],
    seed: u64,
) -> Result<Predictive> {
    let outputs = unwhiten(arch, x, state)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    predict_with_outputs(arch, x, &outputs, x_star, &mut rng)
}

/// Same as [`predictive_sample`] but reusing precomputed layer outputs.
pub fn predict_with_outputs(
    arch: &DeepGpArchitecture,
    x: &DMatrix<f64>,
    outputs: &LayerOutputs,
    x_star: &[f64],
    rng: &mut ChaCha8Rng,
) -> Result<Predictive> {
    if x_star.len() != arch.input_dim() {
        return Err(Error::shape(format!(
            "test input has {} dims, architecture expects {}",
            x_star.len(),
            arch.input_dim()
        )));
    }
    if x_star.iter().any(|v| !v.is_finite()) {
        return Err(Error::domain("test input must be finite"));
    }
    let depth = arch.depth();
    let mut train_rows = kernels::matrix_rows(x);
    let mut test_point: Vec<f64> = x_star.to_vec();
    for (l, layer) in arch.layers().iter().enumerate() {
        let gram = &outputs.grams[l];
        let n = gram.n();
        let mut k_star = DVector::zeros(n);
        for i in 0..n {
            k_star[i] = layer.kernel.evaluate(&test_point, &train_rows[i])?;
        }
        // Jitter sits on the full joint prior diagonal, so the test
        // self-covariance carries it as well.
        let k_ss = layer.kernel.evaluate(&test_point, &test_point)? + arch.jitter();
        let w = linalg::chol_solve_vec(gram.chol(), &k_star);
        let var = (k_ss - k_star.dot(&w)).max(0.0);
        let f = &outputs.values[l];
        let mean: Vec<f64> = (0..layer.width)
            .map(|c| f.column(c).dot(&w))
            .collect();
        if l + 1 == depth {
            return Ok(Predictive {
                mean: mean[0],
                latent_variance: var,
            });
        }
        let sd = var.sqrt();
        test_point = mean
            .iter()
            .map(|m| m + sd * rng.sample::<f64, _>(StandardNormal))
            .collect();
        train_rows = kernels::matrix_rows(f);
    }
    unreachable!("architectures always have at least one layer")
}

/// Prior second moment `E[f_L(a) f_L(b)]` of the architecture — the covariance
/// of its limiting GP for width-invariant constructions, or the exact finite
/// width second moment where the width matters.
pub fn limiting_covariance(arch: &DeepGpArchitecture, a: &[f64], b: &[f64]) -> Result<f64> {
    let layers = arch.layers();
    match layers.len() {
        1 => layers[0].kernel.evaluate(a, b),
        2 => {
            let k1 = &layers[0].kernel;
            let h1 = layers[0].width;
            match &layers[1].kernel {
                KernelSpec::AdditiveRbf {
                    outputscale,
                    lengthscale,
                } => kernels::limit_add_rbf(a, b, k1, *outputscale, *lengthscale),
                KernelSpec::Rbf {
                    outputscale,
                    lengthscale,
                } => {
                    // Product over components: o2^2 (1 + sigma^2/s^2)^{-H/2}.
                    let sigma2 =
                        k1.evaluate(a, a)? + k1.evaluate(b, b)? - 2.0 * k1.evaluate(a, b)?;
                    let s2 = lengthscale * lengthscale;
                    let h = h1 as f64;
                    Ok(outputscale
                        * outputscale
                        * (1.0 + sigma2.max(0.0) / s2).powf(-h / 2.0))
                }
                KernelSpec::MatchedSecondLayerW1 { o2, ell2, o3, ell3 } => {
                    // Additive over components: a 1-d expectation.
                    let sigma2 =
                        k1.evaluate(a, a)? + k1.evaluate(b, b)? - 2.0 * k1.evaluate(a, b)?;
                    let rule = crate::quadrature::gauss_hermite_nodes(41)?;
                    let l3sq = ell3 * ell3;
                    let two_l2sq = 2.0 * ell2 * ell2;
                    let o3sq = o3 * o3;
                    let o2sq = o2 * o2;
                    Ok(rule.gaussian_expectation(sigma2.max(0.0).sqrt(), |t| {
                        let e = (-t * t / two_l2sq).exp();
                        o3sq * (1.0 + 2.0 * o2sq * (1.0 - e) / l3sq).powf(-0.5)
                    }))
                }
                KernelSpec::MatchedSecondLayer2of3 { o2, ell2, o3, ell3 } => {
                    if h1 > 4 {
                        return Err(Error::capability(
                            "limiting covariance of matched_second_layer_2of3 uses tensorized \
                             quadrature; first-layer width must be <= 4",
                        ));
                    }
                    let sigma2 =
                        k1.evaluate(a, a)? + k1.evaluate(b, b)? - 2.0 * k1.evaluate(a, b)?;
                    let rule = crate::quadrature::gauss_hermite_nodes(21)?;
                    let l3sq = ell3 * ell3;
                    let two_l2sq = 2.0 * ell2 * ell2;
                    let o3sq = o3 * o3;
                    let o2sq = o2 * o2;
                    Ok(crate::quadrature::symmetric_gaussian_expectation(
                        &rule,
                        sigma2.max(0.0).sqrt(),
                        h1,
                        |tau| {
                            let s: f64 =
                                tau.iter().map(|t| (-t * t / two_l2sq).exp()).sum();
                            let u = 1.0 + 2.0 * o2sq * (1.0 - s / h1 as f64) / l3sq;
                            o3sq * u.powf(-0.5)
                        },
                    ))
                }
                KernelSpec::FiniteFeatureRelu { beta } => {
                    // Degenerate network: closed form via the arc-cosine kernel
                    // on bias-augmented inputs.
                    match k1 {
                        KernelSpec::LinearBias { beta: beta1 } => {
                            let mut aa: Vec<f64> = a.to_vec();
                            let mut bb: Vec<f64> = b.to_vec();
                            aa.push(*beta1);
                            bb.push(*beta1);
                            kernels::arc_cosine(&aa, &bb, *beta)
                        }
                        _ => Err(Error::capability(
                            "limiting covariance with a ReLU second layer needs a linear first layer",
                        )),
                    }
                }
                other => Err(Error::capability(format!(
                    "no limiting covariance for second-layer kernel {}",
                    other.variant_name()
                ))),
            }
        }
        3 => {
            // RBF + additive chain: quadrature over the first layer.
            let (k1, k2, k3) = (&layers[0].kernel, &layers[1].kernel, &layers[2].kernel);
            match (k1, k2, k3) {
                (
                    KernelSpec::Rbf {
                        outputscale: o1,
                        lengthscale: ell1,
                    },
                    KernelSpec::AdditiveRbf {
                        outputscale: o2,
                        lengthscale: ell2,
                    },
                    KernelSpec::AdditiveRbf {
                        outputscale: o3,
                        lengthscale: ell3,
                    },
                ) => kernels::finite_3layer_quadrature(
                    a,
                    b,
                    layers[0].width as u32,
                    *o1,
                    *ell1,
                    *o2,
                    *ell2,
                    *o3,
                    *ell3,
                    11,
                ),
                _ => Err(Error::capability(
                    "limiting covariance of 3-layer models requires an RBF + additive-RBF chain",
                )),
            }
        }
        d => Err(Error::capability(format!(
            "no limiting covariance for depth-{d} architectures"
        ))),
    }
}

// ---------------------------------------------------------------------------
// Common architecture builders
// ---------------------------------------------------------------------------

/// Two-layer `{RBF + additive RBF}` deep GP — the main architecture in the
/// width experiments.
pub fn two_layer_add_rbf(
    input_dim: usize,
    width: usize,
    o1: f64,
    ell1: f64,
    o2: f64,
    ell2: f64,
    noise: f64,
) -> Result<DeepGpArchitecture> {
    DeepGpArchitecture::new(
        input_dim,
        noise,
        vec![
            LayerSpec {
                width,
                kernel: KernelSpec::Rbf {
                    outputscale: o1,
                    lengthscale: ell1,
                },
            },
            LayerSpec {
                width: 1,
                kernel: KernelSpec::AdditiveRbf {
                    outputscale: o2,
                    lengthscale: ell2,
                },
            },
        ],
    )
}

/// Two-layer `{RBF + RBF}` deep GP. The second RBF carries the conventional
/// `1/H` dimension scaling via its lengthscale.
pub fn two_layer_rbf_rbf(
    input_dim: usize,
    width: usize,
    o1: f64,
    ell1: f64,
    o2: f64,
    ell2: f64,
    noise: f64,
) -> Result<DeepGpArchitecture> {
    let scaled = ell2 * (width as f64).sqrt();
    DeepGpArchitecture::new(
        input_dim,
        noise,
        vec![
            LayerSpec {
                width,
                kernel: KernelSpec::Rbf {
                    outputscale: o1,
                    lengthscale: ell1,
                },
            },
            LayerSpec {
                width: 1,
                kernel: KernelSpec::Rbf {
                    outputscale: o2,
                    lengthscale: scaled,
                },
            },
        ],
    )
}

/// Two-layer model matched per component to the width-1 three-layer model's
/// prior covariance (the density-figure construction): unit RBF first layer,
/// `MatchedSecondLayerW1` second layer.
pub fn matched_two_layer(input_dim: usize, width: usize, noise: f64) -> Result<DeepGpArchitecture> {
    DeepGpArchitecture::new(
        input_dim,
        noise,
        vec![
            LayerSpec {
                width,
                kernel: KernelSpec::unit_rbf(),
            },
            LayerSpec {
                width: 1,
                kernel: KernelSpec::MatchedSecondLayerW1 {
                    o2: 1.0,
                    ell2: 1.0,
                    o3: 1.0,
                    ell3: 1.0,
                },
            },
        ],
    )
}

/// Three-layer `{RBF + additive RBF + additive RBF}` deep GP.
pub fn three_layer_add_rbf(
    input_dim: usize,
    h1: usize,
    h2: usize,
    hypers: [f64; 6],
    noise: f64,
) -> Result<DeepGpArchitecture> {
    let [o1, ell1, o2, ell2, o3, ell3] = hypers;
    DeepGpArchitecture::new(
        input_dim,
        noise,
        vec![
            LayerSpec {
                width: h1,
                kernel: KernelSpec::Rbf {
                    outputscale: o1,
                    lengthscale: ell1,
                },
            },
            LayerSpec {
                width: h2,
                kernel: KernelSpec::AdditiveRbf {
                    outputscale: o2,
                    lengthscale: ell2,
                },
            },
            LayerSpec {
                width: 1,
                kernel: KernelSpec::AdditiveRbf {
                    outputscale: o3,
                    lengthscale: ell3,
                },
            },
        ],
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn unit_2layer(width: usize) -> DeepGpArchitecture {
        two_layer_add_rbf(1, width, 1.0, 1.0, 1.0, 1.0, 0.05).unwrap()
    }

    fn inputs(values: &[f64]) -> DMatrix<f64> {
        DMatrix::from_column_slice(values.len(), 1, values)
    }

    #[test]
    fn architecture_validation() {
        assert!(DeepGpArchitecture::new(1, 0.1, vec![]).is_err());
        // Final layer must have width 1.
        let bad = vec![LayerSpec {
            width: 2,
            kernel: KernelSpec::unit_rbf(),
        }];
        assert!(DeepGpArchitecture::new(1, 0.1, bad).is_err());
        assert!(two_layer_add_rbf(1, 2, 1.0, 1.0, 1.0, 1.0, 0.0).is_err());
        assert!(two_layer_add_rbf(1, 2, 1.0, 1.0, 1.0, 1.0, 0.1).is_ok());
    }

    #[test]
    fn architecture_serde_round_trip() {
        let arch = two_layer_add_rbf(3, 4, 1.1, 0.9, 0.8, 1.2, 0.07).unwrap();
        let json = serde_json::to_string(&arch).unwrap();
        let back: DeepGpArchitecture = serde_json::from_str(&json).unwrap();
        assert_eq!(arch, back);
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(v["input_dim"], 3);
        assert_eq!(v["layers"][0]["width"], 4);
        assert_eq!(v["layers"][0]["kernel"]["variant"], "rbf");
    }

    #[test]
    fn unwhiten_zero_state_gives_zero_outputs() {
        let arch = unit_2layer(3);
        let x = inputs(&[-0.8, 0.1, 0.9]);
        let state = WhitenedState::zeros(&arch, 3);
        let out = unwhiten(&arch, &x, &state).unwrap();
        for f in &out.values {
            assert!(f.iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn unwhiten_scalar_is_jittered_cholesky() {
        let arch = DeepGpArchitecture::new(
            1,
            1.0,
            vec![LayerSpec {
                width: 1,
                kernel: KernelSpec::unit_rbf(),
            }],
        )
        .unwrap();
        let x = inputs(&[0.4]);
        let c = 1.7;
        let state = WhitenedState {
            layers: vec![DMatrix::from_element(1, 1, c)],
        };
        let out = unwhiten(&arch, &x, &state).unwrap();
        assert_relative_eq!(
            out.values[0][(0, 0)],
            c * (1.0 + arch.jitter()).sqrt(),
            epsilon = 1e-14
        );
    }

    #[test]
    fn whiten_inverts_unwhiten() {
        let arch = two_layer_add_rbf(2, 3, 1.0, 0.8, 1.1, 1.2, 0.1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = DMatrix::from_fn(5, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
        let state = WhitenedState::standard_normal(&arch, 5, &mut rng);
        let out = unwhiten(&arch, &x, &state).unwrap();
        let recovered = whiten(&arch, &x, &out).unwrap();
        for (za, zb) in state.layers.iter().zip(&recovered.layers) {
            assert_relative_eq!(za, zb, max_relative = 1e-8);
        }
    }

    #[test]
    fn sample_prior_is_seed_deterministic() {
        let arch = unit_2layer(2);
        let x = inputs(&[-0.5, 0.0, 0.5]);
        let a = sample_prior(&arch, &x, 99).unwrap();
        let b = sample_prior(&arch, &x, 99).unwrap();
        for (fa, fb) in a.values.iter().zip(&b.values) {
            assert_eq!(fa, fb);
        }
        let c = sample_prior(&arch, &x, 100).unwrap();
        assert_ne!(a.values[0], c.values[0]);
    }

    #[test]
    fn single_layer_prior_covariance_matches_gram() {
        let arch = DeepGpArchitecture::new(
            1,
            1.0,
            vec![LayerSpec {
                width: 1,
                kernel: KernelSpec::unit_rbf(),
            }],
        )
        .unwrap();
        let x = inputs(&[-0.7, 0.2, 1.1]);
        let gram = kernels::gram(&KernelSpec::unit_rbf(), &kernels::matrix_rows(&x), arch.jitter())
            .unwrap();
        let draws = 100_000usize;
        let mut acc = DMatrix::<f64>::zeros(3, 3);
        let mut acc_sq = DMatrix::<f64>::zeros(3, 3);
        for seed in 0..draws {
            let f = sample_prior(&arch, &x, seed as u64).unwrap().final_values();
            for i in 0..3 {
                for j in 0..3 {
                    let v = f[i] * f[j];
                    acc[(i, j)] += v;
                    acc_sq[(i, j)] += v * v;
                }
            }
        }
        let nf = draws as f64;
        for i in 0..3 {
            for j in 0..3 {
                let mean = acc[(i, j)] / nf;
                let var = acc_sq[(i, j)] / nf - mean * mean;
                let se = (var / nf).sqrt();
                let mut expect = gram.matrix()[(i, j)];
                if i == j {
                    expect += arch.jitter();
                }
                assert!(
                    (mean - expect).abs() <= 3.0 * se,
                    "({i},{j}): mc {mean} vs {expect} (se {se})"
                );
            }
        }
    }

    #[test]
    fn two_layer_additive_covariance_is_width_invariant() {
        // The Eq-style additive sequence: same marginal covariance for every
        // width, equal to the closed-form limit.
        let x = inputs(&[-0.5, 0.5]);
        let k1 = KernelSpec::unit_rbf();
        let exact = kernels::limit_add_rbf(&[-0.5], &[0.5], &k1, 1.0, 1.0).unwrap();
        for (w_idx, width) in [1usize, 2, 8].into_iter().enumerate() {
            let arch = unit_2layer(width);
            let draws = 60_000usize;
            let mut vals = Vec::with_capacity(draws);
            for s in 0..draws {
                let f = sample_prior(&arch, &x, crate::seed::derive2(7, w_idx as u64, s as u64))
                    .unwrap()
                    .final_values();
                vals.push(f[0] * f[1]);
            }
            let n = draws as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
            let se = (var / n).sqrt();
            assert!(
                (mean - exact).abs() <= 3.0 * se,
                "width {width}: mc {mean} vs exact {exact} (se {se})"
            );
        }
    }

    #[test]
    fn hidden_unit_permutation_leaves_output_distribution_unchanged() {
        let arch = unit_2layer(4);
        let x = inputs(&[-0.5, 0.5]);
        let perm = [2usize, 0, 3, 1];
        let draws = 50_000usize;
        let mut plain = Vec::with_capacity(draws);
        let mut permuted = Vec::with_capacity(draws);
        for s in 0..draws {
            let mut rng = ChaCha8Rng::seed_from_u64(s as u64);
            let state = WhitenedState::standard_normal(&arch, 2, &mut rng);
            let f = unwhiten(&arch, &x, &state).unwrap().final_values();
            plain.push(f[0] * f[1]);
            let mut z1 = state.layers[0].clone();
            for (to, &from) in perm.iter().enumerate() {
                z1.set_column(to, &state.layers[0].column(from));
            }
            let pstate = WhitenedState {
                layers: vec![z1, state.layers[1].clone()],
            };
            let f = unwhiten(&arch, &x, &pstate).unwrap().final_values();
            permuted.push(f[0] * f[1]);
        }
        let n = draws as f64;
        let m1 = plain.iter().sum::<f64>() / n;
        let m2 = permuted.iter().sum::<f64>() / n;
        let v1 = plain.iter().map(|v| (v - m1) * (v - m1)).sum::<f64>() / n;
        let v2 = permuted.iter().map(|v| (v - m2) * (v - m2)).sum::<f64>() / n;
        let se = ((v1 + v2) / n).sqrt();
        assert!((m1 - m2).abs() <= 3.0 * se, "{m1} vs {m2} (se {se})");
    }

    #[test]
    fn degenerate_layers_reproduce_relu_network_prior() {
        // LinearBias -> FiniteFeatureRelu equals the one-hidden-layer ReLU
        // network; its second moment is the arc-cosine kernel.
        let h = 8usize;
        let beta2 = 0.3;
        let arch = DeepGpArchitecture::new(
            2,
            1.0,
            vec![
                LayerSpec {
                    width: h,
                    kernel: KernelSpec::LinearBias { beta: 0.0 },
                },
                LayerSpec {
                    width: 1,
                    kernel: KernelSpec::FiniteFeatureRelu { beta: beta2 },
                },
            ],
        )
        .unwrap();
        let xa = [0.9, -0.4];
        let xb = [0.3, 0.8];
        let x = DMatrix::from_row_slice(2, 2, &[xa[0], xa[1], xb[0], xb[1]]);
        let exact = kernels::arc_cosine(&xa, &xb, beta2).unwrap();
        let draws = 200_000usize;
        let mut vals = Vec::with_capacity(draws);
        for s in 0..draws {
            let f = sample_prior(&arch, &x, s as u64).unwrap().final_values();
            vals.push(f[0] * f[1]);
        }
        let n = draws as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
        let se = (var / n).sqrt();
        assert!(
            (mean - exact).abs() <= 3.0 * se,
            "mc {mean} vs arc-cosine {exact} (se {se})"
        );
        // Matches the architecture-level limiting covariance too.
        let lim = limiting_covariance(&arch, &xa, &xb).unwrap();
        assert_relative_eq!(lim, exact, epsilon = 1e-12);
    }

    #[test]
    fn log_joint_examples() {
        let arch = DeepGpArchitecture::new(
            1,
            1.0,
            vec![LayerSpec {
                width: 1,
                kernel: KernelSpec::unit_rbf(),
            }],
        )
        .unwrap();
        let x = inputs(&[0.0]);
        let y = DVector::from_element(1, 0.0);
        let state = WhitenedState::zeros(&arch, 1);
        let lj = log_joint(&arch, &x, &y, &state).unwrap();
        assert_relative_eq!(lj, -LOG_2PI, epsilon = 1e-12);

        // Shifting y with Z fixed only moves the Gaussian quadratic.
        let c = 0.37;
        let y2 = DVector::from_element(1, c);
        let lj2 = log_joint(&arch, &x, &y2, &state).unwrap();
        assert_relative_eq!(lj2 - lj, -0.5 * c * c, epsilon = 1e-12);
    }

    #[test]
    fn log_joint_gradient_matches_finite_differences() {
        let archs = vec![
            unit_2layer(2),
            two_layer_rbf_rbf(1, 3, 1.0, 0.9, 1.1, 1.0, 0.2).unwrap(),
            three_layer_add_rbf(1, 2, 2, [1.0; 6], 0.1).unwrap(),
            DeepGpArchitecture::new(
                2,
                0.3,
                vec![
                    LayerSpec {
                        width: 3,
                        kernel: KernelSpec::LinearBias { beta: 0.4 },
                    },
                    LayerSpec {
                        width: 1,
                        kernel: KernelSpec::FiniteFeatureRelu { beta: 0.2 },
                    },
                ],
            )
            .unwrap(),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for arch in archs {
            let n = 4;
            let x = DMatrix::from_fn(n, arch.input_dim(), |_, _| {
                rng.sample::<f64, _>(StandardNormal)
            });
            let y = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
            let state = WhitenedState::standard_normal(&arch, n, &mut rng);
            let (_, grad) = log_joint_with_grad(&arch, &x, &y, &state).unwrap();
            let flat = state.flatten();
            let gflat = grad.flatten();
            let h = 1e-5;
            for i in 0..flat.len() {
                let mut p = flat.clone();
                let mut m = flat.clone();
                p[i] += h;
                m[i] -= h;
                let fp = log_joint(&arch, &x, &y, &state.unflatten_like(p.as_slice())).unwrap();
                let fm = log_joint(&arch, &x, &y, &state.unflatten_like(m.as_slice())).unwrap();
                let fd = (fp - fm) / (2.0 * h);
                let rel = (gflat[i] - fd).abs() / (1.0 + fd.abs());
                assert!(
                    rel < 1e-5,
                    "param {i}: grad {} vs fd {fd} (rel {rel})",
                    gflat[i]
                );
            }
        }
    }

    #[test]
    fn predictive_interpolates_training_points_as_jitter_vanishes() {
        let arch = DeepGpArchitecture::with_jitter(
            1,
            1.0,
            vec![LayerSpec {
                width: 1,
                kernel: KernelSpec::unit_rbf(),
            }],
            1e-12,
        )
        .unwrap();
        let x = inputs(&[-0.6, 0.1, 0.8]);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let state = WhitenedState::standard_normal(&arch, 3, &mut rng);
        let out = unwhiten(&arch, &x, &state).unwrap();
        let p = predictive_sample(&arch, &x, &state, &[0.1], 0).unwrap();
        assert_relative_eq!(p.mean, out.values[0][(1, 0)], epsilon = 1e-5);
        assert!(p.latent_variance < 1e-8);
    }

    #[test]
    fn predictive_matches_dense_oracle() {
        // Per-sample conditional mean/variance at the last layer equals the
        // dense computation k*^T (K2 + eps I)^{-1} F2 on the sampled path.
        let arch = unit_2layer(2);
        let x = inputs(&[-0.5, 0.0, 0.5]);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let state = WhitenedState::standard_normal(&arch, 3, &mut rng);
        let out = unwhiten(&arch, &x, &state).unwrap();
        let x_star = [0.25f64];
        let seed = 5u64;
        let p = predictive_sample(&arch, &x, &state, &x_star, seed).unwrap();

        // Replay the hidden-layer draw with the same stream.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layer1 = &arch.layers()[0];
        let rows_x = kernels::matrix_rows(&x);
        let k_star: DVector<f64> = DVector::from_fn(3, |i, _| {
            layer1.kernel.evaluate(&x_star, &rows_x[i]).unwrap()
        });
        let mut k1j = out.grams[0].matrix().clone();
        for i in 0..3 {
            k1j[(i, i)] += arch.jitter();
        }
        let k1_inv = k1j.try_inverse().unwrap();
        let w = &k1_inv * &k_star;
        let kss = layer1.kernel.evaluate(&x_star, &x_star).unwrap() + arch.jitter();
        let var1 = kss - k_star.dot(&w);
        let sd1 = var1.sqrt();
        let f1_star: Vec<f64> = (0..2)
            .map(|c| {
                out.values[0].column(c).dot(&w) + sd1 * rng.sample::<f64, _>(StandardNormal)
            })
            .collect();

        let layer2 = &arch.layers()[1];
        let rows_f1 = kernels::matrix_rows(&out.values[0]);
        let k2_star: DVector<f64> = DVector::from_fn(3, |i, _| {
            layer2.kernel.evaluate(&f1_star, &rows_f1[i]).unwrap()
        });
        let mut k2j = out.grams[1].matrix().clone();
        for i in 0..3 {
            k2j[(i, i)] += arch.jitter();
        }
        let k2_inv = k2j.try_inverse().unwrap();
        let w2 = &k2_inv * &k2_star;
        let mean = out.values[1].column(0).dot(&w2);
        let kss2 = layer2.kernel.evaluate(&f1_star, &f1_star).unwrap() + arch.jitter();
        let var = kss2 - k2_star.dot(&w2);
        assert_relative_eq!(p.mean, mean, epsilon = 1e-10);
        assert_relative_eq!(p.latent_variance, var, epsilon = 1e-10);
    }

    #[test]
    fn limiting_covariance_dispatch() {
        // Two-layer additive: closed form.
        let arch = unit_2layer(3);
        let v = limiting_covariance(&arch, &[-0.5], &[0.5]).unwrap();
        let expect =
            kernels::limit_add_rbf(&[-0.5], &[0.5], &KernelSpec::unit_rbf(), 1.0, 1.0).unwrap();
        assert_relative_eq!(v, expect, epsilon = 1e-14);
        // Two-layer RBF-RBF at finite width equals the finite-H formula.
        let arch = two_layer_rbf_rbf(1, 4, 1.0, 1.0, 1.0, 1.0, 0.1).unwrap();
        let v = limiting_covariance(&arch, &[-0.5], &[0.5]).unwrap();
        let expect =
            kernels::limit_rbf_rbf(&[-0.5], &[0.5], 1.0, 1.0, 1.0, 1.0, Some(4)).unwrap();
        assert_relative_eq!(v, expect, epsilon = 1e-12);
        // Three-layer additive chain: quadrature.
        let arch = three_layer_add_rbf(1, 2, 8, [1.0; 6], 0.1).unwrap();
        let v = limiting_covariance(&arch, &[-0.5], &[0.5]).unwrap();
        let expect = kernels::finite_3layer_quadrature(
            &[-0.5],
            &[0.5],
            2,
            1.0,
            1.0,
            1.0,
            1.0,
            1.0,
            1.0,
            11,
        )
        .unwrap();
        assert_relative_eq!(v, expect, epsilon = 1e-12);
    }
}
