//! Covariance functions and Gram-matrix assembly.
//!
//! Three families live here:
//!
//! * per-layer prior kernels usable inside a deep architecture (`Rbf`,
//!   `AdditiveRbf`, `LinearBias`, `FiniteFeatureRelu`, the matched
//!   second-layer constructions);
//! * closed-form infinite-width limiting kernels (`LimitAddRbf`,
//!   `LimitRbfRbf`, `Limit3LayerAddRbf`, `ArcCosine`);
//! * the quadrature-based finite-width three-layer covariance
//!   (`Quadrature3Layer`), which has no closed form.
//!
//! Every kernel exposes its value, the gradient with respect to its first
//! input (used to differentiate through hidden layers), and the gradient with
//! respect to its hyperparameters (used for marginal-likelihood optimization).

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::quadrature::{self, GaussHermite};

/// Diagonal stabilizer added to every self-Gram before factorization.
pub const DEFAULT_JITTER: f64 = 1e-4;

const INV_TWO_PI: f64 = 1.0 / (2.0 * std::f64::consts::PI);

fn rule(nodes: usize) -> Result<Arc<GaussHermite>> {
    static CACHE: OnceLock<Mutex<HashMap<usize, Arc<GaussHermite>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let mut guard = cache.lock().unwrap();
    if let Some(r) = guard.get(&nodes) {
        return Ok(r.clone());
    }
    let r = Arc::new(quadrature::gauss_hermite_nodes(nodes)?);
    guard.insert(nodes, r.clone());
    Ok(r)
}

fn check_finite(name: &str, v: &[f64]) -> Result<()> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::domain(format!("non-finite input to {name}")));
    }
    Ok(())
}

fn check_same_len(name: &str, a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape(format!(
            "{name}: input lengths differ ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

// ---------------------------------------------------------------------------
// Free kernel functions
// ---------------------------------------------------------------------------

/// Radial basis function: `o² exp(-‖x-x'‖² / (2ℓ²))`.
pub fn rbf(x: &[f64], x2: &[f64], outputscale: f64, lengthscale: f64) -> Result<f64> {
    check_finite("rbf", x)?;
    check_finite("rbf", x2)?;
    check_same_len("rbf", x, x2)?;
    if outputscale <= 0.0 || lengthscale <= 0.0 {
        return Err(Error::domain("rbf: scales must be positive"));
    }
    Ok(outputscale * outputscale * (-sq_dist(x, x2) / (2.0 * lengthscale * lengthscale)).exp())
}

/// Sum of one-dimensional RBF covariances with a `1/H` prefactor:
/// `(o²/H) Σᵢ exp(-(zᵢ-z'ᵢ)² / (2ℓ²))`.
pub fn additive_rbf(z: &[f64], z2: &[f64], outputscale: f64, lengthscale: f64) -> Result<f64> {
    check_finite("additive_rbf", z)?;
    check_finite("additive_rbf", z2)?;
    check_same_len("additive_rbf", z, z2)?;
    if z.is_empty() {
        return Err(Error::shape("additive_rbf: inputs must have length >= 1"));
    }
    if outputscale <= 0.0 || lengthscale <= 0.0 {
        return Err(Error::domain("additive_rbf: scales must be positive"));
    }
    let h = z.len() as f64;
    let two_l2 = 2.0 * lengthscale * lengthscale;
    let s: f64 = z
        .iter()
        .zip(z2)
        .map(|(a, b)| {
            let d = a - b;
            (-d * d / two_l2).exp()
        })
        .sum();
    Ok(outputscale * outputscale / h * s)
}

/// Linear kernel with bias: `β² + xᵀx'`.
pub fn linear_bias(x: &[f64], x2: &[f64], beta: f64) -> Result<f64> {
    check_finite("linear_bias", x)?;
    check_finite("linear_bias", x2)?;
    check_same_len("linear_bias", x, x2)?;
    Ok(beta * beta + dot(x, x2))
}

/// Degenerate ReLU-feature kernel: `β² + (1/H) Σᵢ max(0,zᵢ) max(0,z'ᵢ)`.
pub fn finite_feature_relu(z: &[f64], z2: &[f64], beta: f64) -> Result<f64> {
    check_finite("finite_feature_relu", z)?;
    check_finite("finite_feature_relu", z2)?;
    check_same_len("finite_feature_relu", z, z2)?;
    if z.is_empty() {
        return Err(Error::shape("finite_feature_relu: inputs must have length >= 1"));
    }
    let h = z.len() as f64;
    let s: f64 = z
        .iter()
        .zip(z2)
        .map(|(a, b)| a.max(0.0) * b.max(0.0))
        .sum();
    Ok(beta * beta + s / h)
}

/// First-order arc-cosine kernel:
/// `β² + (1/2π) ‖x‖‖x'‖ (sin θ + (π-θ) cos θ)`, `θ = arccos(xᵀx'/(‖x‖‖x'‖))`.
///
/// The cosine argument is clamped to `[-1, 1]`; if either norm is zero the
/// angular term is defined to be zero.
pub fn arc_cosine(x: &[f64], x2: &[f64], beta: f64) -> Result<f64> {
    check_finite("arc_cosine", x)?;
    check_finite("arc_cosine", x2)?;
    check_same_len("arc_cosine", x, x2)?;
    let na = dot(x, x).sqrt();
    let nb = dot(x2, x2).sqrt();
    if na == 0.0 || nb == 0.0 {
        return Ok(beta * beta);
    }
    let norm_prod = na * nb;
    let cos_theta = (dot(x, x2) / norm_prod).clamp(-1.0, 1.0);
    let theta = cos_theta.acos();
    let angular = theta.sin() + (std::f64::consts::PI - theta) * cos_theta;
    Ok(beta * beta + INV_TWO_PI * norm_prod * angular)
}

/// Width-independent second moment of a two-layer `{k₁ + additive RBF}` deep GP:
/// `o₂² (1 + (k₁(x,x) + k₁(x',x') - 2 k₁(x,x')) / ℓ₂²)^{-1/2}`.
pub fn limit_add_rbf(x: &[f64], x2: &[f64], k1: &KernelSpec, o2: f64, ell2: f64) -> Result<f64> {
    if o2 <= 0.0 || ell2 <= 0.0 {
        return Err(Error::domain("limit_add_rbf: scales must be positive"));
    }
    let sigma2 = k1.evaluate(x, x)? + k1.evaluate(x2, x2)? - 2.0 * k1.evaluate(x, x2)?;
    let bracket = 1.0 + sigma2.max(0.0) / (ell2 * ell2);
    Ok(o2 * o2 * bracket.powf(-0.5))
}

/// Second moment of a two-layer `{RBF + RBF}` deep GP of first-layer width
/// `h1`; `None` is the infinite-width sentinel.
pub fn limit_rbf_rbf(
    x: &[f64],
    x2: &[f64],
    o1: f64,
    ell1: f64,
    o2: f64,
    ell2: f64,
    h1: Option<u32>,
) -> Result<f64> {
    check_finite("limit_rbf_rbf", x)?;
    check_finite("limit_rbf_rbf", x2)?;
    check_same_len("limit_rbf_rbf", x, x2)?;
    if o1 <= 0.0 || ell1 <= 0.0 || o2 <= 0.0 || ell2 <= 0.0 {
        return Err(Error::domain("limit_rbf_rbf: scales must be positive"));
    }
    let e = (-sq_dist(x, x2) / (2.0 * ell1 * ell1)).exp();
    match h1 {
        Some(0) => Err(Error::domain("limit_rbf_rbf: width must be >= 1")),
        Some(h) => {
            let h = h as f64;
            let c = 1.0 + 2.0 * o1 * o1 * (1.0 - e) / (h * ell2 * ell2);
            Ok(o2 * o2 * c.powf(-h / 2.0))
        }
        None => Ok(o2 * o2 * ((o1 * o1 / (ell2 * ell2)) * (e - 1.0)).exp()),
    }
}

/// Infinite-width limit of the three-layer `{RBF + add-RBF + add-RBF}` deep GP,
/// computed as the definitional composition of two additive-RBF limits.
pub fn limit_3layer_add_rbf(
    x: &[f64],
    x2: &[f64],
    o1: f64,
    ell1: f64,
    o2: f64,
    ell2: f64,
    o3: f64,
    ell3: f64,
) -> Result<f64> {
    let inner = KernelSpec::LimitAddRbf { o1, ell1, o2, ell2 };
    limit_add_rbf(x, x2, &inner, o3, ell3)
}

/// Second moment of the three-layer `{RBF + add-RBF + add-RBF}` deep GP at
/// finite first-layer width `h1`, by tensorized Gauss-Hermite quadrature over
/// the first layer. The inner expectation over the second layer is closed-form.
///
/// `h1` is capped at 4: the tensorized rule costs `nodes^h1` evaluations.
pub fn finite_3layer_quadrature(
    x: &[f64],
    x2: &[f64],
    h1: u32,
    o1: f64,
    ell1: f64,
    o2: f64,
    ell2: f64,
    o3: f64,
    ell3: f64,
    nodes: usize,
) -> Result<f64> {
    check_finite("finite_3layer_quadrature", x)?;
    check_finite("finite_3layer_quadrature", x2)?;
    check_same_len("finite_3layer_quadrature", x, x2)?;
    if h1 == 0 {
        return Err(Error::domain("finite_3layer_quadrature: width must be >= 1"));
    }
    if h1 > 4 {
        return Err(Error::capability(format!(
            "finite_3layer_quadrature supports first-layer width <= 4 \
             (tensorized quadrature is nodes^H1 evaluations), got H1 = {h1}"
        )));
    }
    if nodes % 2 == 0 {
        return Err(Error::domain("finite_3layer_quadrature: node count must be odd"));
    }
    let positive = [o1, ell1, o2, ell2, o3, ell3];
    if positive.iter().any(|&v| v <= 0.0) {
        return Err(Error::domain("finite_3layer_quadrature: scales must be positive"));
    }
    let e = (-sq_dist(x, x2) / (2.0 * ell1 * ell1)).exp();
    let sigma1 = (2.0 * o1 * o1 * (1.0 - e)).max(0.0).sqrt();
    let r = rule(nodes)?;
    let h = h1 as usize;
    let two_l2sq = 2.0 * ell2 * ell2;
    let val = quadrature::symmetric_gaussian_expectation(&r, sigma1, h, |tau| {
        let s: f64 = tau.iter().map(|t| (-t * t / two_l2sq).exp()).sum();
        let mean_e = s / h as f64;
        let u = 1.0 + 2.0 * o2 * o2 * (1.0 - mean_e) / (ell3 * ell3);
        o3 * o3 * u.powf(-0.5)
    });
    Ok(val)
}

// ---------------------------------------------------------------------------
// KernelSpec
// ---------------------------------------------------------------------------

/// Tagged covariance function with hyperparameters.
///
/// Serializes to a flat JSON object
/// `{"variant", "o", "ell", "beta", "h", ...}`; see the README for the wire
/// table. Width-dependent variants carry their width in `h`, with `0` as the
/// infinite-width sentinel for `LimitRbfRbf`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "KernelWire", into = "KernelWire")]
pub enum KernelSpec {
    Rbf {
        outputscale: f64,
        lengthscale: f64,
    },
    AdditiveRbf {
        outputscale: f64,
        lengthscale: f64,
    },
    LinearBias {
        beta: f64,
    },
    FiniteFeatureRelu {
        beta: f64,
    },
    ArcCosine {
        beta: f64,
    },
    LimitAddRbf {
        o1: f64,
        ell1: f64,
        o2: f64,
        ell2: f64,
    },
    LimitRbfRbf {
        o1: f64,
        ell1: f64,
        o2: f64,
        ell2: f64,
        /// First-layer width; `None` is the infinite-width limit.
        width: Option<u32>,
    },
    Limit3LayerAddRbf {
        o1: f64,
        ell1: f64,
        o2: f64,
        ell2: f64,
        o3: f64,
        ell3: f64,
    },
    /// Second layer of the depth-comparison experiment: the conditional
    /// expectation of a third additive-RBF layer, collapsed in closed form.
    MatchedSecondLayer2of3 {
        o2: f64,
        ell2: f64,
        o3: f64,
        ell3: f64,
    },
    /// Second layer matched per component to the width-1 three-layer model;
    /// decomposes additively over its inputs.
    MatchedSecondLayerW1 {
        o2: f64,
        ell2: f64,
        o3: f64,
        ell3: f64,
    },
    /// Finite-width three-layer covariance via Gauss-Hermite quadrature.
    Quadrature3Layer {
        o1: f64,
        ell1: f64,
        o2: f64,
        ell2: f64,
        o3: f64,
        ell3: f64,
        width: u32,
        nodes: usize,
    },
}

impl KernelSpec {
    pub fn unit_rbf() -> Self {
        KernelSpec::Rbf {
            outputscale: 1.0,
            lengthscale: 1.0,
        }
    }

    pub fn unit_additive_rbf() -> Self {
        KernelSpec::AdditiveRbf {
            outputscale: 1.0,
            lengthscale: 1.0,
        }
    }

    pub fn variant_name(&self) -> &'static str {
        match self {
            KernelSpec::Rbf { .. } => "rbf",
            KernelSpec::AdditiveRbf { .. } => "additive_rbf",
            KernelSpec::LinearBias { .. } => "linear_bias",
            KernelSpec::FiniteFeatureRelu { .. } => "finite_feature_relu",
            KernelSpec::ArcCosine { .. } => "arc_cosine",
            KernelSpec::LimitAddRbf { .. } => "limit_add_rbf",
            KernelSpec::LimitRbfRbf { .. } => "limit_rbf_rbf",
            KernelSpec::Limit3LayerAddRbf { .. } => "limit_3layer_add_rbf",
            KernelSpec::MatchedSecondLayer2of3 { .. } => "matched_second_layer_2of3",
            KernelSpec::MatchedSecondLayerW1 { .. } => "matched_second_layer_w1",
            KernelSpec::Quadrature3Layer { .. } => "finite_3layer_quadrature",
        }
    }

    /// Check hyperparameter domains.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::domain(format!("{}: {msg}", self.variant_name())));
        match *self {
            KernelSpec::Rbf {
                outputscale,
                lengthscale,
            }
            | KernelSpec::AdditiveRbf {
                outputscale,
                lengthscale,
            } => {
                if outputscale <= 0.0 || lengthscale <= 0.0 {
                    return bad("scales must be strictly positive");
                }
            }
            KernelSpec::LinearBias { beta }
            | KernelSpec::FiniteFeatureRelu { beta }
            | KernelSpec::ArcCosine { beta } => {
                if beta < 0.0 || !beta.is_finite() {
                    return bad("beta must be finite and >= 0");
                }
            }
            KernelSpec::LimitAddRbf { o1, ell1, o2, ell2 } => {
                if [o1, ell1, o2, ell2].iter().any(|&v| v <= 0.0) {
                    return bad("scales must be strictly positive");
                }
            }
            KernelSpec::LimitRbfRbf {
                o1,
                ell1,
                o2,
                ell2,
                width,
            } => {
                if [o1, ell1, o2, ell2].iter().any(|&v| v <= 0.0) {
                    return bad("scales must be strictly positive");
                }
                if width == Some(0) {
                    return bad("width must be >= 1 (or absent for the limit)");
                }
            }
            KernelSpec::Limit3LayerAddRbf {
                o1,
                ell1,
                o2,
                ell2,
                o3,
                ell3,
            } => {
                if [o1, ell1, o2, ell2, o3, ell3].iter().any(|&v| v <= 0.0) {
                    return bad("scales must be strictly positive");
                }
            }
            KernelSpec::MatchedSecondLayer2of3 { o2, ell2, o3, ell3 }
            | KernelSpec::MatchedSecondLayerW1 { o2, ell2, o3, ell3 } => {
                if [o2, ell2, o3, ell3].iter().any(|&v| v <= 0.0) {
                    return bad("scales must be strictly positive");
                }
            }
            KernelSpec::Quadrature3Layer {
                o1,
                ell1,
                o2,
                ell2,
                o3,
                ell3,
                width,
                nodes,
            } => {
                if [o1, ell1, o2, ell2, o3, ell3].iter().any(|&v| v <= 0.0) {
                    return bad("scales must be strictly positive");
                }
                if width == 0 {
                    return bad("width must be >= 1");
                }
                if nodes == 0 || nodes % 2 == 0 {
                    return bad("node count must be odd and >= 1");
                }
            }
        }
        Ok(())
    }

    /// Evaluate the covariance between two points.
    pub fn evaluate(&self, a: &[f64], b: &[f64]) -> Result<f64> {
        match *self {
            KernelSpec::Rbf {
                outputscale,
                lengthscale,
            } => rbf(a, b, outputscale, lengthscale),
            KernelSpec::AdditiveRbf {
                outputscale,
                lengthscale,
            } => additive_rbf(a, b, outputscale, lengthscale),
            KernelSpec::LinearBias { beta } => linear_bias(a, b, beta),
            KernelSpec::FiniteFeatureRelu { beta } => finite_feature_relu(a, b, beta),
            KernelSpec::ArcCosine { beta } => arc_cosine(a, b, beta),
            KernelSpec::LimitAddRbf { o1, ell1, o2, ell2 } => {
                let k1 = KernelSpec::Rbf {
                    outputscale: o1,
                    lengthscale: ell1,
                };
                limit_add_rbf(a, b, &k1, o2, ell2)
            }
            KernelSpec::LimitRbfRbf {
                o1,
                ell1,
                o2,
                ell2,
                width,
            } => limit_rbf_rbf(a, b, o1, ell1, o2, ell2, width),
            KernelSpec::Limit3LayerAddRbf {
                o1,
                ell1,
                o2,
                ell2,
                o3,
                ell3,
            } => limit_3layer_add_rbf(a, b, o1, ell1, o2, ell2, o3, ell3),
            KernelSpec::MatchedSecondLayer2of3 { o2, ell2, o3, ell3 } => {
                check_finite("matched_second_layer_2of3", a)?;
                check_finite("matched_second_layer_2of3", b)?;
                check_same_len("matched_second_layer_2of3", a, b)?;
                Ok(matched_2of3_value(a, b, o2, ell2, o3, ell3))
            }
            KernelSpec::MatchedSecondLayerW1 { o2, ell2, o3, ell3 } => {
                check_finite("matched_second_layer_w1", a)?;
                check_finite("matched_second_layer_w1", b)?;
                check_same_len("matched_second_layer_w1", a, b)?;
                Ok(matched_w1_value(a, b, o2, ell2, o3, ell3))
            }
            KernelSpec::Quadrature3Layer {
                o1,
                ell1,
                o2,
                ell2,
                o3,
                ell3,
                width,
                nodes,
            } => finite_3layer_quadrature(a, b, width, o1, ell1, o2, ell2, o3, ell3, nodes),
        }
    }

    /// Gradient of `k(a, b)` with respect to `a`, written into `out`.
    ///
    /// Supported for kernels that can sit above a hidden layer; limiting
    /// kernels are first-layer-only and report a capability error.
    pub fn grad_input(&self, a: &[f64], b: &[f64], out: &mut [f64]) -> Result<()> {
        debug_assert_eq!(a.len(), b.len());
        debug_assert_eq!(a.len(), out.len());
        let h = a.len() as f64;
        match *self {
            KernelSpec::Rbf {
                outputscale,
                lengthscale,
            } => {
                let l2 = lengthscale * lengthscale;
                let k = outputscale * outputscale * (-sq_dist(a, b) / (2.0 * l2)).exp();
                for i in 0..a.len() {
                    out[i] = -k * (a[i] - b[i]) / l2;
                }
            }
            KernelSpec::AdditiveRbf {
                outputscale,
                lengthscale,
            } => {
                let l2 = lengthscale * lengthscale;
                let c = outputscale * outputscale / h;
                for i in 0..a.len() {
                    let d = a[i] - b[i];
                    out[i] = -c * (-d * d / (2.0 * l2)).exp() * d / l2;
                }
            }
            KernelSpec::LinearBias { .. } => {
                out.copy_from_slice(b);
            }
            KernelSpec::FiniteFeatureRelu { .. } => {
                for i in 0..a.len() {
                    out[i] = if a[i] > 0.0 { b[i].max(0.0) / h } else { 0.0 };
                }
            }
            KernelSpec::MatchedSecondLayer2of3 { o2, ell2, o3, ell3 } => {
                let l2sq = ell2 * ell2;
                let l3sq = ell3 * ell3;
                let mut s = 0.0;
                for i in 0..a.len() {
                    let d = a[i] - b[i];
                    s += (-d * d / (2.0 * l2sq)).exp();
                }
                let mean_e = s / h;
                let u = 1.0 + 2.0 * o2 * o2 * (1.0 - mean_e) / l3sq;
                let coeff = o3 * o3 * o2 * o2 / (l3sq * l2sq * h) * u.powf(-1.5);
                for i in 0..a.len() {
                    let d = a[i] - b[i];
                    out[i] = -coeff * (-d * d / (2.0 * l2sq)).exp() * d;
                }
            }
            KernelSpec::MatchedSecondLayerW1 { o2, ell2, o3, ell3 } => {
                let l2sq = ell2 * ell2;
                let l3sq = ell3 * ell3;
                let c = o3 * o3 / h * o2 * o2 / l3sq;
                for i in 0..a.len() {
                    let d = a[i] - b[i];
                    let e = (-d * d / (2.0 * l2sq)).exp();
                    let u = 1.0 + 2.0 * o2 * o2 * (1.0 - e) / l3sq;
                    out[i] = -c * u.powf(-1.5) * e * d / l2sq;
                }
            }
            _ => {
                return Err(Error::capability(format!(
                    "{} cannot be used above a hidden layer (no input gradient)",
                    self.variant_name()
                )))
            }
        }
        Ok(())
    }

    /// Hyperparameter vector in a fixed per-variant order.
    pub fn hypers(&self) -> Vec<f64> {
        match *self {
            KernelSpec::Rbf {
                outputscale,
                lengthscale,
            }
            | KernelSpec::AdditiveRbf {
                outputscale,
                lengthscale,
            } => vec![outputscale, lengthscale],
            KernelSpec::LinearBias { beta }
            | KernelSpec::FiniteFeatureRelu { beta }
            | KernelSpec::ArcCosine { beta } => vec![beta],
            KernelSpec::LimitAddRbf { o1, ell1, o2, ell2 }
            | KernelSpec::LimitRbfRbf {
                o1, ell1, o2, ell2, ..
            } => vec![o1, ell1, o2, ell2],
            KernelSpec::Limit3LayerAddRbf {
                o1,
                ell1,
                o2,
                ell2,
                o3,
                ell3,
            }
            | KernelSpec::Quadrature3Layer {
                o1,
                ell1,
                o2,
                ell2,
                o3,
                ell3,
                ..
            } => vec![o1, ell1, o2, ell2, o3, ell3],
            KernelSpec::MatchedSecondLayer2of3 { o2, ell2, o3, ell3 }
            | KernelSpec::MatchedSecondLayerW1 { o2, ell2, o3, ell3 } => {
                vec![o2, ell2, o3, ell3]
            }
        }
    }

    /// Replace the hyperparameters, keeping structural fields (widths, node
    /// counts) unchanged.
    pub fn with_hypers(&self, hypers: &[f64]) -> Result<Self> {
        let expect = self.hypers().len();
        if hypers.len() != expect {
            return Err(Error::shape(format!(
                "{} expects {expect} hyperparameters, got {}",
                self.variant_name(),
                hypers.len()
            )));
        }
        let mut s = self.clone();
        match &mut s {
            KernelSpec::Rbf {
                outputscale,
                lengthscale,
            }
            | KernelSpec::AdditiveRbf {
                outputscale,
                lengthscale,
            } => {
                *outputscale = hypers[0];
                *lengthscale = hypers[1];
            }
            KernelSpec::LinearBias { beta }
            | KernelSpec::FiniteFeatureRelu { beta }
            | KernelSpec::ArcCosine { beta } => *beta = hypers[0],
            KernelSpec::LimitAddRbf { o1, ell1, o2, ell2 }
            | KernelSpec::LimitRbfRbf {
                o1, ell1, o2, ell2, ..
            } => {
                *o1 = hypers[0];
                *ell1 = hypers[1];
                *o2 = hypers[2];
                *ell2 = hypers[3];
            }
            KernelSpec::Limit3LayerAddRbf {
                o1,
                ell1,
                o2,
                ell2,
                o3,
                ell3,
            }
            | KernelSpec::Quadrature3Layer {
                o1,
                ell1,
                o2,
                ell2,
                o3,
                ell3,
                ..
            } => {
                *o1 = hypers[0];
                *ell1 = hypers[1];
                *o2 = hypers[2];
                *ell2 = hypers[3];
                *o3 = hypers[4];
                *ell3 = hypers[5];
            }
            KernelSpec::MatchedSecondLayer2of3 { o2, ell2, o3, ell3 }
            | KernelSpec::MatchedSecondLayerW1 { o2, ell2, o3, ell3 } => {
                *o2 = hypers[0];
                *ell2 = hypers[1];
                *o3 = hypers[2];
                *ell3 = hypers[3];
            }
        }
        s.validate()?;
        Ok(s)
    }

    /// Gradient of `k(a, b)` with respect to the hyperparameter vector.
    pub fn grad_hypers(&self, a: &[f64], b: &[f64], out: &mut [f64]) -> Result<()> {
        match *self {
            KernelSpec::Rbf {
                outputscale,
                lengthscale,
            } => {
                let d2 = sq_dist(a, b);
                let l2 = lengthscale * lengthscale;
                let k = outputscale * outputscale * (-d2 / (2.0 * l2)).exp();
                out[0] = 2.0 * k / outputscale;
                out[1] = k * d2 / (l2 * lengthscale);
            }
            KernelSpec::AdditiveRbf {
                outputscale,
                lengthscale,
            } => {
                let h = a.len() as f64;
                let l2 = lengthscale * lengthscale;
                let mut s = 0.0;
                let mut sd = 0.0;
                for i in 0..a.len() {
                    let d = a[i] - b[i];
                    let e = (-d * d / (2.0 * l2)).exp();
                    s += e;
                    sd += e * d * d;
                }
                let o2 = outputscale * outputscale;
                out[0] = 2.0 * outputscale / h * s;
                out[1] = o2 / h * sd / (l2 * lengthscale);
            }
            KernelSpec::LinearBias { beta }
            | KernelSpec::FiniteFeatureRelu { beta }
            | KernelSpec::ArcCosine { beta } => {
                out[0] = 2.0 * beta;
            }
            KernelSpec::LimitAddRbf { o1, ell1, o2, ell2 } => {
                let g = limit_add_rbf_hyper_grads(sq_dist(a, b), o1, ell1, o2, ell2);
                out[..4].copy_from_slice(&g);
            }
            KernelSpec::LimitRbfRbf {
                o1,
                ell1,
                o2,
                ell2,
                width,
            } => {
                let d2 = sq_dist(a, b);
                let l1sq = ell1 * ell1;
                let l2sq = ell2 * ell2;
                let e = (-d2 / (2.0 * l1sq)).exp();
                let de_dl1 = e * d2 / (l1sq * ell1);
                match width {
                    Some(hw) => {
                        let h = hw as f64;
                        let c = 1.0 + 2.0 * o1 * o1 * (1.0 - e) / (h * l2sq);
                        let k = o2 * o2 * c.powf(-h / 2.0);
                        let dk_dc = -(h / 2.0) * o2 * o2 * c.powf(-h / 2.0 - 1.0);
                        out[0] = dk_dc * 4.0 * o1 * (1.0 - e) / (h * l2sq);
                        out[1] = dk_dc * (-2.0 * o1 * o1 / (h * l2sq)) * de_dl1;
                        out[2] = 2.0 * k / o2;
                        out[3] = dk_dc * (-4.0 * o1 * o1 * (1.0 - e) / (h * l2sq * ell2));
                    }
                    None => {
                        let g = (o1 * o1 / l2sq) * (e - 1.0);
                        let k = o2 * o2 * g.exp();
                        out[0] = k * 2.0 * o1 * (e - 1.0) / l2sq;
                        out[1] = k * (o1 * o1 / l2sq) * de_dl1;
                        out[2] = 2.0 * k / o2;
                        out[3] = k * (-2.0 * o1 * o1 * (e - 1.0) / (l2sq * ell2));
                    }
                }
            }
            KernelSpec::Limit3LayerAddRbf {
                o1,
                ell1,
                o2,
                ell2,
                o3,
                ell3,
            } => {
                let d2 = sq_dist(a, b);
                let inner = limit_add_rbf_value(d2, o1, ell1, o2, ell2);
                let inner_g = limit_add_rbf_hyper_grads(d2, o1, ell1, o2, ell2);
                let l3sq = ell3 * ell3;
                let v = 1.0 + 2.0 * (o2 * o2 - inner) / l3sq;
                let k = o3 * o3 * v.powf(-0.5);
                let dk_dv = -0.5 * o3 * o3 * v.powf(-1.5);
                let dv_dinner = -2.0 / l3sq;
                out[0] = dk_dv * dv_dinner * inner_g[0];
                out[1] = dk_dv * dv_dinner * inner_g[1];
                // o2 enters both through the inner kernel and the diagonal term.
                out[2] = dk_dv * (4.0 * o2 / l3sq + dv_dinner * inner_g[2]);
                out[3] = dk_dv * dv_dinner * inner_g[3];
                out[4] = 2.0 * k / o3;
                out[5] = dk_dv * (-4.0 * (o2 * o2 - inner) / (l3sq * ell3));
            }
            KernelSpec::MatchedSecondLayer2of3 { o2, ell2, o3, ell3 } => {
                let h = a.len() as f64;
                let l2sq = ell2 * ell2;
                let l3sq = ell3 * ell3;
                let mut s = 0.0;
                let mut sd = 0.0;
                for i in 0..a.len() {
                    let d = a[i] - b[i];
                    let e = (-d * d / (2.0 * l2sq)).exp();
                    s += e;
                    sd += e * d * d;
                }
                let mean_e = s / h;
                let ds_dl2 = sd / h / (l2sq * ell2);
                let u = 1.0 + 2.0 * o2 * o2 * (1.0 - mean_e) / l3sq;
                let k = o3 * o3 * u.powf(-0.5);
                let dk_du = -0.5 * o3 * o3 * u.powf(-1.5);
                out[0] = dk_du * 4.0 * o2 * (1.0 - mean_e) / l3sq;
                out[1] = dk_du * (-2.0 * o2 * o2 / l3sq) * ds_dl2;
                out[2] = 2.0 * k / o3;
                out[3] = dk_du * (-4.0 * o2 * o2 * (1.0 - mean_e) / (l3sq * ell3));
            }
            KernelSpec::MatchedSecondLayerW1 { o2, ell2, o3, ell3 } => {
                let h = a.len() as f64;
                let l2sq = ell2 * ell2;
                let l3sq = ell3 * ell3;
                let mut sum_k = 0.0;
                let mut g = [0.0f64; 4];
                for i in 0..a.len() {
                    let d = a[i] - b[i];
                    let e = (-d * d / (2.0 * l2sq)).exp();
                    let de_dl2 = e * d * d / (l2sq * ell2);
                    let u = 1.0 + 2.0 * o2 * o2 * (1.0 - e) / l3sq;
                    let term = u.powf(-0.5);
                    let dterm_du = -0.5 * u.powf(-1.5);
                    sum_k += term;
                    g[0] += dterm_du * 4.0 * o2 * (1.0 - e) / l3sq;
                    g[1] += dterm_du * (-2.0 * o2 * o2 / l3sq) * de_dl2;
                    g[3] += dterm_du * (-4.0 * o2 * o2 * (1.0 - e) / (l3sq * ell3));
                }
                let c = o3 * o3 / h;
                out[0] = c * g[0];
                out[1] = c * g[1];
                out[2] = 2.0 * o3 / h * sum_k;
                out[3] = c * g[3];
            }
            KernelSpec::Quadrature3Layer {
                o1,
                ell1,
                o2,
                ell2,
                o3,
                ell3,
                width,
                nodes,
            } => {
                let d2 = sq_dist(a, b);
                let l1sq = ell1 * ell1;
                let e = (-d2 / (2.0 * l1sq)).exp();
                let sig2 = (2.0 * o1 * o1 * (1.0 - e)).max(0.0);
                let sigma1 = sig2.sqrt();
                let r = rule(nodes)?;
                let h = width as usize;
                let l2sq = ell2 * ell2;
                let l3sq = ell3 * ell3;
                // Accumulate [dk/do2, dk/dl2, dk/do3, dk/dl3, dk/dsigma1].
                let mut acc = [0.0f64; 5];
                let hn = h as f64;
                for (idx, val) in acc.iter_mut().enumerate() {
                    *val = quadrature::symmetric_gaussian_expectation(&r, sigma1, h, |tau| {
                        let mut s = 0.0;
                        let mut sd = 0.0;
                        for &t in tau {
                            let ei = (-t * t / (2.0 * l2sq)).exp();
                            s += ei;
                            sd += ei * t * t;
                        }
                        let mean_e = s / hn;
                        let u = 1.0 + 2.0 * o2 * o2 * (1.0 - mean_e) / l3sq;
                        let du = -0.5 * o3 * o3 * u.powf(-1.5);
                        match idx {
                            0 => du * 4.0 * o2 * (1.0 - mean_e) / l3sq,
                            1 => du * (-2.0 * o2 * o2 / l3sq) * (sd / hn / (l2sq * ell2)),
                            2 => 2.0 * o3 * u.powf(-0.5),
                            3 => du * (-4.0 * o2 * o2 * (1.0 - mean_e) / (l3sq * ell3)),
                            // d/dsigma1 through tau_i = sqrt(2) sigma1 xi_i:
                            // dg/dsigma = sum_i dg/dtau_i * tau_i / sigma.
                            _ => {
                                if sigma1 <= 1e-300 {
                                    0.0
                                } else {
                                    let dg_ds = du * (-2.0 * o2 * o2 / l3sq);
                                    dg_ds * (-sd / hn / l2sq) / sigma1
                                }
                            }
                        }
                    });
                }
                let (dsig_do1, dsig_dl1) = if sigma1 <= 1e-300 {
                    (0.0, 0.0)
                } else {
                    let dsig2_do1 = 4.0 * o1 * (1.0 - e);
                    let dsig2_dl1 = -2.0 * o1 * o1 * e * d2 / (l1sq * ell1);
                    (dsig2_do1 / (2.0 * sigma1), dsig2_dl1 / (2.0 * sigma1))
                };
                out[0] = acc[4] * dsig_do1;
                out[1] = acc[4] * dsig_dl1;
                out[2] = acc[0];
                out[3] = acc[1];
                out[4] = acc[2];
                out[5] = acc[3];
            }
        }
        Ok(())
    }

    /// Covariance value at zero input difference, for kernels whose value
    /// depends only on componentwise input differences.
    pub fn stationary_diag(&self) -> Option<f64> {
        match *self {
            KernelSpec::Rbf { outputscale, .. } | KernelSpec::AdditiveRbf { outputscale, .. } => {
                Some(outputscale * outputscale)
            }
            KernelSpec::MatchedSecondLayer2of3 { o3, .. }
            | KernelSpec::MatchedSecondLayerW1 { o3, .. } => Some(o3 * o3),
            KernelSpec::LimitAddRbf { o2, .. } | KernelSpec::LimitRbfRbf { o2, .. } => {
                Some(o2 * o2)
            }
            KernelSpec::Limit3LayerAddRbf { o3, .. } | KernelSpec::Quadrature3Layer { o3, .. } => {
                Some(o3 * o3)
            }
            _ => None,
        }
    }

    /// Covariance as a function of the componentwise difference vector, for
    /// stationary kernels. Returns `None` for non-stationary variants.
    pub fn stationary_value(&self, diffs: &[f64]) -> Option<f64> {
        let h = diffs.len() as f64;
        match *self {
            KernelSpec::Rbf {
                outputscale,
                lengthscale,
            } => {
                let d2: f64 = diffs.iter().map(|d| d * d).sum();
                Some(outputscale * outputscale * (-d2 / (2.0 * lengthscale * lengthscale)).exp())
            }
            KernelSpec::AdditiveRbf {
                outputscale,
                lengthscale,
            } => {
                let two_l2 = 2.0 * lengthscale * lengthscale;
                let s: f64 = diffs.iter().map(|d| (-d * d / two_l2).exp()).sum();
                Some(outputscale * outputscale / h * s)
            }
            KernelSpec::MatchedSecondLayer2of3 { o2, ell2, o3, ell3 } => {
                let zeros = vec![0.0; diffs.len()];
                Some(matched_2of3_value(diffs, &zeros, o2, ell2, o3, ell3))
            }
            KernelSpec::MatchedSecondLayerW1 { o2, ell2, o3, ell3 } => {
                let zeros = vec![0.0; diffs.len()];
                Some(matched_w1_value(diffs, &zeros, o2, ell2, o3, ell3))
            }
            KernelSpec::LimitAddRbf { .. }
            | KernelSpec::LimitRbfRbf { .. }
            | KernelSpec::Limit3LayerAddRbf { .. }
            | KernelSpec::Quadrature3Layer { .. } => {
                let zeros = vec![0.0; diffs.len()];
                self.evaluate(diffs, &zeros).ok()
            }
            _ => None,
        }
    }
}

fn matched_2of3_value(a: &[f64], b: &[f64], o2: f64, ell2: f64, o3: f64, ell3: f64) -> f64 {
    let h = a.len() as f64;
    let two_l2sq = 2.0 * ell2 * ell2;
    let s: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x - y;
            (-d * d / two_l2sq).exp()
        })
        .sum();
    let u = 1.0 + 2.0 * o2 * o2 * (1.0 - s / h) / (ell3 * ell3);
    o3 * o3 * u.powf(-0.5)
}

fn matched_w1_value(a: &[f64], b: &[f64], o2: f64, ell2: f64, o3: f64, ell3: f64) -> f64 {
    let h = a.len() as f64;
    let two_l2sq = 2.0 * ell2 * ell2;
    let l3sq = ell3 * ell3;
    let s: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x - y;
            let e = (-d * d / two_l2sq).exp();
            (1.0 + 2.0 * o2 * o2 * (1.0 - e) / l3sq).powf(-0.5)
        })
        .sum();
    o3 * o3 / h * s
}

fn limit_add_rbf_value(d2: f64, o1: f64, ell1: f64, o2: f64, ell2: f64) -> f64 {
    let e = (-d2 / (2.0 * ell1 * ell1)).exp();
    let b = 1.0 + 2.0 * o1 * o1 * (1.0 - e) / (ell2 * ell2);
    o2 * o2 * b.powf(-0.5)
}

fn limit_add_rbf_hyper_grads(d2: f64, o1: f64, ell1: f64, o2: f64, ell2: f64) -> [f64; 4] {
    let l1sq = ell1 * ell1;
    let l2sq = ell2 * ell2;
    let e = (-d2 / (2.0 * l1sq)).exp();
    let b = 1.0 + 2.0 * o1 * o1 * (1.0 - e) / l2sq;
    let k = o2 * o2 * b.powf(-0.5);
    let dk_db = -0.5 * o2 * o2 * b.powf(-1.5);
    let de_dl1 = e * d2 / (l1sq * ell1);
    [
        dk_db * 4.0 * o1 * (1.0 - e) / l2sq,
        dk_db * (-2.0 * o1 * o1 / l2sq) * de_dl1,
        2.0 * k / o2,
        dk_db * (-4.0 * o1 * o1 * (1.0 - e) / (l2sq * ell2)),
    ]
}

// ---------------------------------------------------------------------------
// Wire format
// ---------------------------------------------------------------------------

/// Flat JSON representation: `{"variant", "o", "ell", "beta", "h"}` plus
/// `o2/ell2/o3/ell3/nodes` for the multi-scale variants. `h = 0` is the
/// infinite-width sentinel for `limit_rbf_rbf`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KernelWire {
    pub variant: String,
    #[serde(default = "one")]
    pub o: f64,
    #[serde(default = "one")]
    pub ell: f64,
    #[serde(default)]
    pub beta: f64,
    #[serde(default)]
    pub h: u32,
    #[serde(default = "one", skip_serializing_if = "is_one")]
    pub o2: f64,
    #[serde(default = "one", skip_serializing_if = "is_one")]
    pub ell2: f64,
    #[serde(default = "one", skip_serializing_if = "is_one")]
    pub o3: f64,
    #[serde(default = "one", skip_serializing_if = "is_one")]
    pub ell3: f64,
    #[serde(default = "default_nodes", skip_serializing_if = "is_default_nodes")]
    pub nodes: usize,
}

fn one() -> f64 {
    1.0
}
fn is_one(v: &f64) -> bool {
    *v == 1.0
}
fn default_nodes() -> usize {
    11
}
fn is_default_nodes(v: &usize) -> bool {
    *v == 11
}

impl From<KernelSpec> for KernelWire {
    fn from(spec: KernelSpec) -> Self {
        let mut w = KernelWire {
            variant: spec.variant_name().to_string(),
            o: 1.0,
            ell: 1.0,
            beta: 0.0,
            h: 0,
            o2: 1.0,
            ell2: 1.0,
            o3: 1.0,
            ell3: 1.0,
            nodes: 11,
        };
        match spec {
            KernelSpec::Rbf {
                outputscale,
                lengthscale,
            }
            | KernelSpec::AdditiveRbf {
                outputscale,
                lengthscale,
            } => {
                w.o = outputscale;
                w.ell = lengthscale;
            }
            KernelSpec::LinearBias { beta }
            | KernelSpec::FiniteFeatureRelu { beta }
            | KernelSpec::ArcCosine { beta } => w.beta = beta,
            KernelSpec::LimitAddRbf { o1, ell1, o2, ell2 } => {
                w.o = o1;
                w.ell = ell1;
                w.o2 = o2;
                w.ell2 = ell2;
            }
            KernelSpec::LimitRbfRbf {
                o1,
                ell1,
                o2,
                ell2,
                width,
            } => {
                w.o = o1;
                w.ell = ell1;
                w.o2 = o2;
                w.ell2 = ell2;
                w.h = width.unwrap_or(0);
            }
            KernelSpec::Limit3LayerAddRbf {
                o1,
                ell1,
                o2,
                ell2,
                o3,
                ell3,
            } => {
                w.o = o1;
                w.ell = ell1;
                w.o2 = o2;
                w.ell2 = ell2;
                w.o3 = o3;
                w.ell3 = ell3;
            }
            KernelSpec::MatchedSecondLayer2of3 { o2, ell2, o3, ell3 }
            | KernelSpec::MatchedSecondLayerW1 { o2, ell2, o3, ell3 } => {
                w.o2 = o2;
                w.ell2 = ell2;
                w.o3 = o3;
                w.ell3 = ell3;
            }
            KernelSpec::Quadrature3Layer {
                o1,
                ell1,
                o2,
                ell2,
                o3,
                ell3,
                width,
                nodes,
            } => {
                w.o = o1;
                w.ell = ell1;
                w.o2 = o2;
                w.ell2 = ell2;
                w.o3 = o3;
                w.ell3 = ell3;
                w.h = width;
                w.nodes = nodes;
            }
        }
        w
    }
}

impl TryFrom<KernelWire> for KernelSpec {
    type Error = Error;

    fn try_from(w: KernelWire) -> Result<Self> {
        let spec = match w.variant.as_str() {
            "rbf" => KernelSpec::Rbf {
                outputscale: w.o,
                lengthscale: w.ell,
            },
            "additive_rbf" => KernelSpec::AdditiveRbf {
                outputscale: w.o,
                lengthscale: w.ell,
            },
            "linear_bias" => KernelSpec::LinearBias { beta: w.beta },
            "finite_feature_relu" => KernelSpec::FiniteFeatureRelu { beta: w.beta },
            "arc_cosine" => KernelSpec::ArcCosine { beta: w.beta },
            "limit_add_rbf" => KernelSpec::LimitAddRbf {
                o1: w.o,
                ell1: w.ell,
                o2: w.o2,
                ell2: w.ell2,
            },
            "limit_rbf_rbf" => KernelSpec::LimitRbfRbf {
                o1: w.o,
                ell1: w.ell,
                o2: w.o2,
                ell2: w.ell2,
                width: if w.h == 0 { None } else { Some(w.h) },
            },
            "limit_3layer_add_rbf" => KernelSpec::Limit3LayerAddRbf {
                o1: w.o,
                ell1: w.ell,
                o2: w.o2,
                ell2: w.ell2,
                o3: w.o3,
                ell3: w.ell3,
            },
            "matched_second_layer_2of3" => KernelSpec::MatchedSecondLayer2of3 {
                o2: w.o2,
                ell2: w.ell2,
                o3: w.o3,
                ell3: w.ell3,
            },
            "matched_second_layer_w1" => KernelSpec::MatchedSecondLayerW1 {
                o2: w.o2,
                ell2: w.ell2,
                o3: w.o3,
                ell3: w.ell3,
            },
            "finite_3layer_quadrature" => KernelSpec::Quadrature3Layer {
                o1: w.o,
                ell1: w.ell,
                o2: w.o2,
                ell2: w.ell2,
                o3: w.o3,
                ell3: w.ell3,
                width: w.h.max(1),
                nodes: w.nodes,
            },
            other => {
                return Err(Error::data(format!("unknown kernel variant '{other}'")));
            }
        };
        spec.validate()?;
        Ok(spec)
    }
}

// ---------------------------------------------------------------------------
// Gram matrices
// ---------------------------------------------------------------------------

/// Dense symmetric covariance matrix with its jitter and cached Cholesky factor.
#[derive(Debug, Clone)]
pub struct GramMatrix {
    matrix: DMatrix<f64>,
    jitter: f64,
    chol: DMatrix<f64>,
}

impl GramMatrix {
    /// The raw (unjittered) covariance matrix.
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// Lower Cholesky factor of `K + jitter I`.
    pub fn chol(&self) -> &DMatrix<f64> {
        &self.chol
    }

    pub fn n(&self) -> usize {
        self.matrix.nrows()
    }
}

/// Extract matrix rows as plain vectors for kernel evaluation.
pub fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect()
}

/// Self-Gram of a point set with jitter and a cached Cholesky factor.
///
/// Entries are evaluated once per unordered pair and mirrored, so the result
/// is exactly symmetric.
pub fn gram(spec: &KernelSpec, points: &[Vec<f64>], jitter: f64) -> Result<GramMatrix> {
    spec.validate()?;
    let n = points.len();
    if n == 0 {
        return Err(Error::shape("gram: empty point set"));
    }
    let mut k = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v = spec.evaluate(&points[i], &points[j])?;
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    let chol = linalg::cholesky_lower(&k, jitter)?;
    Ok(GramMatrix {
        matrix: k,
        jitter,
        chol,
    })
}

/// Self-Gram as a plain symmetric matrix, without jitter or factorization.
pub fn gram_dense(spec: &KernelSpec, points: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    spec.validate()?;
    let n = points.len();
    if n == 0 {
        return Err(Error::shape("gram: empty point set"));
    }
    let mut k = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v = spec.evaluate(&points[i], &points[j])?;
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    Ok(k)
}

/// Rectangular cross-covariance matrix between two point sets.
pub fn gram_cross(spec: &KernelSpec, a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let mut k = DMatrix::<f64>::zeros(a.len(), b.len());
    for i in 0..a.len() {
        for j in 0..b.len() {
            k[(i, j)] = spec.evaluate(&a[i], &b[j])?;
        }
    }
    Ok(k)
}
