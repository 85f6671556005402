//! Quantitative verification machinery: N=2 marginal density grids, moment
//! and tail estimators, concentration diagnostics, characteristic-function
//! bound checks, and the kernel-fit / predictive-likelihood metrics.

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::deepgp::{self, DeepGpArchitecture};
use crate::error::{Error, Result};
use crate::inference::ChainResult;
use crate::kernels::{self, KernelSpec};
use crate::linalg::{self, LOG_2PI};
pub use crate::quadrature::gauss_hermite_nodes;
use crate::quadrature::{symmetric_rule_size, GaussHermite};

// ---------------------------------------------------------------------------
// Statistics helpers
// ---------------------------------------------------------------------------

/// Block-jackknife mean and standard error (20 blocks by default elsewhere).
/// Blocking keeps the error estimate honest for autocorrelated inputs.
pub fn jackknife_mean_se(values: &[f64], blocks: usize) -> (f64, f64) {
    let n = values.len();
    assert!(blocks >= 2 && n >= blocks, "need at least one value per block");
    let mean = values.iter().sum::<f64>() / n as f64;
    let total: f64 = values.iter().sum();
    let mut pseudo = Vec::with_capacity(blocks);
    let base = n / blocks;
    let mut start = 0;
    for b in 0..blocks {
        let len = if b < n % blocks { base + 1 } else { base };
        let block_sum: f64 = values[start..start + len].iter().sum();
        pseudo.push((total - block_sum) / (n - len) as f64);
        start += len;
    }
    let pm = pseudo.iter().sum::<f64>() / blocks as f64;
    let var = pseudo.iter().map(|v| (v - pm) * (v - pm)).sum::<f64>() * (blocks as f64 - 1.0)
        / blocks as f64;
    (mean, var.sqrt())
}

/// Block-jackknife SE of an arbitrary statistic of the sample.
pub fn jackknife_stat_se<F: Fn(&[f64]) -> f64>(
    values: &[f64],
    blocks: usize,
    stat: F,
) -> (f64, f64) {
    let n = values.len();
    assert!(blocks >= 2 && n >= blocks);
    let full = stat(values);
    let base = n / blocks;
    let mut pseudo = Vec::with_capacity(blocks);
    let mut start = 0;
    for b in 0..blocks {
        let len = if b < n % blocks { base + 1 } else { base };
        let mut rest = Vec::with_capacity(n - len);
        rest.extend_from_slice(&values[..start]);
        rest.extend_from_slice(&values[start + len..]);
        pseudo.push(stat(&rest));
        start += len;
    }
    let pm = pseudo.iter().sum::<f64>() / blocks as f64;
    let var = pseudo.iter().map(|v| (v - pm) * (v - pm)).sum::<f64>() * (blocks as f64 - 1.0)
        / blocks as f64;
    (full, var.sqrt())
}

/// Abramowitz-Stegun 7.1.26 rational approximation (|error| < 1.5e-7).
pub fn erf(x: f64) -> f64 {
    let sign = if x < 0.0 { -1.0 } else { 1.0 };
    let x = x.abs();
    let t = 1.0 / (1.0 + 0.3275911 * x);
    let poly = t
        * (0.254829592 + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
    sign * (1.0 - poly * (-x * x).exp())
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

fn double_factorial(k: i64) -> f64 {
    let mut out = 1.0;
    let mut i = k;
    while i > 1 {
        out *= i as f64;
        i -= 2;
    }
    out
}

// ---------------------------------------------------------------------------
// Fast prior path sampling at a small fixed point set
// ---------------------------------------------------------------------------

/// Prior sampler for the layer path of an architecture at a small fixed set
/// of points. The first layer's Gram is factorized once; deeper Grams are
/// refactorized per draw since they depend on the sampled path.
pub struct PathSampler<'a> {
    arch: &'a DeepGpArchitecture,
    n: usize,
    chol1: DMatrix<f64>,
    values: Vec<DMatrix<f64>>,
}

impl<'a> PathSampler<'a> {
    pub fn new(arch: &'a DeepGpArchitecture, points: &[Vec<f64>]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::shape("path sampler: empty point set"));
        }
        if points.len() > 16 {
            return Err(Error::capability(
                "path sampler is meant for small point sets (N <= 16)",
            ));
        }
        let gram1 = kernels::gram(&arch.layers()[0].kernel, points, arch.jitter())?;
        let n = points.len();
        let values = arch
            .layers()
            .iter()
            .map(|l| DMatrix::zeros(n, l.width))
            .collect();
        Ok(PathSampler {
            arch,
            n,
            chol1: gram1.chol().clone(),
            values,
        })
    }

    /// Draw a fresh path; returns per-layer outputs (N x H_l each).
    pub fn draw(&mut self, rng: &mut ChaCha8Rng) -> Result<&[DMatrix<f64>]> {
        let depth = self.arch.depth();
        for l in 0..depth {
            let width = self.arch.layers()[l].width;
            let g = DMatrix::from_fn(self.n, width, |_, _| rng.sample::<f64, _>(StandardNormal));
            let f = if l == 0 {
                &self.chol1 * g
            } else {
                let rows = kernels::matrix_rows(&self.values[l - 1]);
                let gram = kernels::gram(&self.arch.layers()[l].kernel, &rows, self.arch.jitter())?;
                gram.chol() * g
            };
            self.values[l] = f;
        }
        Ok(&self.values)
    }

    /// Draw a path and return only the final-layer values.
    pub fn draw_final(&mut self, rng: &mut ChaCha8Rng) -> Result<DVector<f64>> {
        self.draw(rng)?;
        Ok(self.values.last().unwrap().column(0).into_owned())
    }
}

// ---------------------------------------------------------------------------
// Marginal densities for N = 2
// ---------------------------------------------------------------------------

/// Grid geometry: `points` evenly spaced values on `[-half_range, half_range]`
/// per axis (inclusive).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GridConfig {
    pub points: usize,
    pub half_range: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            points: 20,
            half_range: 3.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub enum DensityMethod {
    /// Exact bivariate Gaussian (single-layer / limiting architectures).
    Exact,
    /// Tensorized Gauss-Hermite over all hidden layers.
    Quadrature { nodes: usize, evaluations: u64 },
    /// Seeded Monte Carlo over hidden-layer paths.
    MonteCarlo { samples: usize },
}

/// The N=2 marginal `p(y1, y2 | x1, x2)` as a finite mixture of centered
/// bivariate Gaussians sharing diagonal `(d1, d2)` and varying off-diagonal.
#[derive(Debug, Clone)]
pub struct PairDensity {
    pub d1: f64,
    pub d2: f64,
    /// Mixture components `(weight, offdiagonal)`.
    pub components: Vec<(f64, f64)>,
    pub method: DensityMethod,
}

impl PairDensity {
    pub fn eval(&self, y1: f64, y2: f64) -> f64 {
        let mut total = 0.0;
        for &(w, c) in &self.components {
            let det = self.d1 * self.d2 - c * c;
            if det <= 0.0 {
                continue;
            }
            let quad = (self.d2 * y1 * y1 - 2.0 * c * y1 * y2 + self.d1 * y2 * y2) / det;
            total += w * (-0.5 * quad).exp() / (2.0 * std::f64::consts::PI * det.sqrt());
        }
        total
    }

    /// Density at the prior mean.
    pub fn peak(&self) -> f64 {
        self.eval(0.0, 0.0)
    }

    /// Mixture mean of the off-diagonal — the model's prior covariance entry.
    pub fn mean_offdiag(&self) -> f64 {
        self.components.iter().map(|&(w, c)| w * c).sum()
    }

    /// Moment-matched Gaussian reference (same diagonal, mean off-diagonal).
    pub fn matched_gaussian(&self) -> PairDensity {
        PairDensity {
            d1: self.d1,
            d2: self.d2,
            components: vec![(1.0, self.mean_offdiag())],
            method: DensityMethod::Exact,
        }
    }

    /// Exact mixture probability of the square `[-half_range, half_range]^2`,
    /// integrating the conditional CDF along one axis. This stays accurate for
    /// near-singular components that a lattice sum over the grid would
    /// misrepresent.
    pub fn mass_in_box(&self, half_range: f64) -> f64 {
        let steps = 2001usize;
        let lo = -half_range;
        let dt = 2.0 * half_range / steps as f64;
        let mut total = 0.0;
        for &(w, c) in &self.components {
            let s1 = self.d1.sqrt();
            let cond_var = (self.d2 - c * c / self.d1).max(1e-300);
            let cond_sd = cond_var.sqrt();
            let mut m = 0.0;
            for i in 0..steps {
                let y1 = lo + (i as f64 + 0.5) * dt;
                let pdf1 = (-0.5 * y1 * y1 / self.d1).exp() / (s1 * (2.0 * std::f64::consts::PI).sqrt());
                let mu = c / self.d1 * y1;
                let p2 = normal_cdf((half_range - mu) / cond_sd) - normal_cdf((lo - mu) / cond_sd);
                m += pdf1 * p2 * dt;
            }
            total += w * m;
        }
        total
    }

    /// `E[(t1 y1 + t2 y2)^r]` for even `r` under the mixture.
    pub fn projection_moment(&self, t1: f64, t2: f64, r: usize) -> f64 {
        assert!(r % 2 == 0);
        let dfact = double_factorial(r as i64 - 1);
        self.components
            .iter()
            .map(|&(w, c)| {
                let var = t1 * t1 * self.d1 + t2 * t2 * self.d2 + 2.0 * t1 * t2 * c;
                w * dfact * var.max(0.0).powi(r as i32 / 2)
            })
            .sum()
    }

    /// Excess kurtosis of the projection `t1 y1 + t2 y2`.
    pub fn excess_kurtosis(&self, t1: f64, t2: f64) -> f64 {
        let m2 = self.projection_moment(t1, t2, 2);
        let m4 = self.projection_moment(t1, t2, 4);
        m4 / (m2 * m2) - 3.0
    }
}

const MAX_QUADRATURE_EVALS: u64 = 14_641; // 11^4
const MC_FALLBACK_SAMPLES: usize = 1_000_000;
const MC_HISTOGRAM_BINS: usize = 4096;

/// Stationary profile of a hidden/final layer kernel, or an error naming the
/// offending variant.
fn profile_of(spec: &KernelSpec) -> Result<(f64, KernelSpec)> {
    match spec.stationary_diag() {
        Some(d) => Ok((d, spec.clone())),
        None => Err(Error::capability(format!(
            "density grids need stationary layer kernels; {} is not",
            spec.variant_name()
        ))),
    }
}

/// Build the N=2 marginal density of `arch` at inputs `(x1, x2)`.
///
/// Hidden layers are integrated with tensorized Gauss-Hermite rules collapsed
/// over exchangeable dimensions; when the total evaluation count would exceed
/// `11^4` the construction falls back to seeded Monte Carlo with 10^6 draws.
pub fn pair_density(
    arch: &DeepGpArchitecture,
    x1: &[f64],
    x2: &[f64],
    nodes: usize,
    seed: u64,
) -> Result<PairDensity> {
    let layers = arch.layers();
    let depth = layers.len();
    let jitter = arch.jitter();
    let k1 = &layers[0].kernel;

    if depth == 1 {
        return Ok(PairDensity {
            d1: k1.evaluate(x1, x1)? + jitter,
            d2: k1.evaluate(x2, x2)? + jitter,
            components: vec![(1.0, k1.evaluate(x1, x2)?)],
            method: DensityMethod::Exact,
        });
    }

    // Difference variance emitted by the first layer (jittered Gram).
    let sigma2_1 =
        (k1.evaluate(x1, x1)? + k1.evaluate(x2, x2)? - 2.0 * k1.evaluate(x1, x2)? + 2.0 * jitter)
            .max(0.0);
    // Hidden and final profiles.
    let mut profiles = Vec::with_capacity(depth - 1);
    for l in 1..depth {
        profiles.push(profile_of(&layers[l].kernel)?);
    }
    let hidden_widths: Vec<usize> = layers[..depth - 1].iter().map(|l| l.width).collect();
    let (final_diag, final_profile) = profiles.last().unwrap().clone();
    let d = final_diag + jitter;

    // Cost of the collapsed tensor rule.
    let mut evals: u64 = 1;
    for &w in &hidden_widths {
        evals = evals.saturating_mul(symmetric_rule_size(nodes, w).min(u128::from(u64::MAX)) as u64);
        if evals > MAX_QUADRATURE_EVALS {
            break;
        }
    }

    if evals <= MAX_QUADRATURE_EVALS {
        let rule = gauss_hermite_nodes(nodes)?;
        let mut components = Vec::new();
        collect_quadrature_components(
            &rule,
            &hidden_widths,
            &profiles,
            jitter,
            0,
            sigma2_1,
            1.0,
            &final_profile,
            &mut components,
        );
        Ok(PairDensity {
            d1: d,
            d2: d,
            components,
            method: DensityMethod::Quadrature { nodes, evaluations: evals },
        })
    } else {
        // Monte Carlo over the hidden difference chain, histogram-compressed.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cs = Vec::with_capacity(MC_FALLBACK_SAMPLES);
        let mut tau: Vec<f64> = Vec::new();
        for _ in 0..MC_FALLBACK_SAMPLES {
            let mut sigma2 = sigma2_1;
            for (li, &w) in hidden_widths.iter().enumerate() {
                tau.clear();
                let sd = sigma2.sqrt();
                for _ in 0..w {
                    tau.push(sd * rng.sample::<f64, _>(StandardNormal));
                }
                if li + 1 == hidden_widths.len() {
                    cs.push(final_profile.stationary_value(&tau).unwrap());
                } else {
                    let (diag_next, prof_next) = &profiles[li];
                    let v = prof_next.stationary_value(&tau).unwrap();
                    sigma2 = (2.0 * (diag_next + jitter - v)).max(0.0);
                }
            }
        }
        // Bin the off-diagonals; the histogram keeps grid evaluation cheap
        // while preserving the mixture to well below Monte Carlo error.
        let (lo, hi) = cs
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let span = (hi - lo).max(1e-12);
        let mut counts = vec![0u64; MC_HISTOGRAM_BINS];
        for &c in &cs {
            let idx = (((c - lo) / span) * MC_HISTOGRAM_BINS as f64) as usize;
            counts[idx.min(MC_HISTOGRAM_BINS - 1)] += 1;
        }
        let components: Vec<(f64, f64)> = counts
            .iter()
            .enumerate()
            .filter(|(_, &n)| n > 0)
            .map(|(i, &n)| {
                let c = lo + (i as f64 + 0.5) / MC_HISTOGRAM_BINS as f64 * span;
                (n as f64 / MC_FALLBACK_SAMPLES as f64, c)
            })
            .collect();
        Ok(PairDensity {
            d1: d,
            d2: d,
            components,
            method: DensityMethod::MonteCarlo {
                samples: MC_FALLBACK_SAMPLES,
            },
        })
    }
}

#[allow(clippy::too_many_arguments)]
fn collect_quadrature_components(
    rule: &GaussHermite,
    hidden_widths: &[usize],
    profiles: &[(f64, KernelSpec)],
    jitter: f64,
    level: usize,
    sigma2: f64,
    weight: f64,
    final_profile: &KernelSpec,
    out: &mut Vec<(f64, f64)>,
) {
    let width = hidden_widths[level];
    let sigma = sigma2.max(0.0).sqrt();
    let atoms = rule.gaussian_atoms(sigma);
    // Enumerate node multisets (collapsed symmetric tensor rule).
    let n_atoms = atoms.len();
    let mut counts = vec![0usize; n_atoms];
    enumerate_multisets(&atoms, &mut counts, 0, width, &mut |tau, w| {
        let w_total = weight * w;
        if level + 1 == hidden_widths.len() {
            let c = final_profile.stationary_value(tau).unwrap();
            out.push((w_total, c));
        } else {
            let (diag_next, prof_next) = &profiles[level];
            let v = prof_next.stationary_value(tau).unwrap();
            let sigma2_next = (2.0 * (diag_next + jitter - v)).max(0.0);
            collect_quadrature_components(
                rule,
                hidden_widths,
                profiles,
                jitter,
                level + 1,
                sigma2_next,
                w_total,
                final_profile,
                out,
            );
        }
    });
}

fn enumerate_multisets(
    atoms: &[(f64, f64)],
    counts: &mut Vec<usize>,
    idx: usize,
    remaining: usize,
    f: &mut dyn FnMut(&[f64], f64),
) {
    if idx == atoms.len() - 1 {
        counts[idx] = remaining;
        let dims: usize = counts.iter().sum();
        let mut log_w = 0.0;
        for i in 1..=dims {
            log_w += (i as f64).ln();
        }
        let mut tau = Vec::with_capacity(dims);
        for (i, &c) in counts.iter().enumerate() {
            for j in 1..=c {
                log_w -= (j as f64).ln();
            }
            log_w += c as f64 * atoms[i].1.ln();
            for _ in 0..c {
                tau.push(atoms[i].0);
            }
        }
        f(&tau, log_w.exp());
        return;
    }
    for c in 0..=remaining {
        counts[idx] = c;
        enumerate_multisets(atoms, counts, idx + 1, remaining - c, f);
    }
}

/// 2-D grid of marginal density values for two test inputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DensityGrid {
    pub y1: Vec<f64>,
    pub y2: Vec<f64>,
    /// Row-major: `values[i * y2.len() + j] = p(y1[i], y2[j])`.
    pub values: Vec<f64>,
    pub method: DensityMethod,
    /// Exact mixture mass of the grid box.
    pub mass: f64,
    /// Density at the prior mean (0, 0).
    pub peak: f64,
}

impl DensityGrid {
    pub fn value(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.y2.len() + j]
    }

    /// Long-format CSV: `y1,y2,density`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("y1,y2,density\n");
        for (i, &a) in self.y1.iter().enumerate() {
            for (j, &b) in self.y2.iter().enumerate() {
                out.push_str(&format!("{a},{b},{}\n", self.value(i, j)));
            }
        }
        out
    }
}

fn grid_axis(config: &GridConfig) -> Vec<f64> {
    let n = config.points;
    (0..n)
        .map(|i| -config.half_range + 2.0 * config.half_range * i as f64 / (n - 1) as f64)
        .collect()
}

/// Evaluate the N=2 marginal density of `arch` on a grid (default 20x20 over
/// `[-3,3]^2` with 7 quadrature nodes).
pub fn density_grid(
    arch: &DeepGpArchitecture,
    x1: &[f64],
    x2: &[f64],
    config: &GridConfig,
    nodes: usize,
    seed: u64,
) -> Result<DensityGrid> {
    if config.points < 2 {
        return Err(Error::domain("density grid needs at least 2 points per axis"));
    }
    let density = pair_density(arch, x1, x2, nodes, seed)?;
    let axis = grid_axis(config);
    let mut values = Vec::with_capacity(axis.len() * axis.len());
    for &a in &axis {
        for &b in &axis {
            values.push(density.eval(a, b));
        }
    }
    Ok(DensityGrid {
        y1: axis.clone(),
        y2: axis,
        values,
        method: density.method.clone(),
        mass: density.mass_in_box(config.half_range),
        peak: density.peak(),
    })
}

/// Signed difference grid `a - b`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DensityDiff {
    pub y1: Vec<f64>,
    pub y2: Vec<f64>,
    pub values: Vec<f64>,
    /// Difference of the two exact box masses.
    pub mass: f64,
}

impl DensityDiff {
    pub fn value(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.y2.len() + j]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("y1,y2,density_diff\n");
        for (i, &a) in self.y1.iter().enumerate() {
            for (j, &b) in self.y2.iter().enumerate() {
                out.push_str(&format!("{a},{b},{}\n", self.value(i, j)));
            }
        }
        out
    }
}

/// Pointwise difference of two density grids over identical axes.
pub fn density_diff(a: &DensityGrid, b: &DensityGrid) -> Result<DensityDiff> {
    if a.y1 != b.y1 || a.y2 != b.y2 {
        return Err(Error::shape("density grids live on different axes"));
    }
    Ok(DensityDiff {
        y1: a.y1.clone(),
        y2: a.y2.clone(),
        values: a
            .values
            .iter()
            .zip(&b.values)
            .map(|(x, y)| x - y)
            .collect(),
        mass: a.mass - b.mass,
    })
}

// ---------------------------------------------------------------------------
// Moment and tail estimators
// ---------------------------------------------------------------------------

const JACKKNIFE_BLOCKS: usize = 20;

/// Monte-Carlo even moments of a projection of the prior, with the
/// covariance-matched Gaussian reference.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MomentReport {
    /// Even orders reported: 2, 4, 6, 8.
    pub orders: Vec<usize>,
    pub estimates: Vec<f64>,
    pub standard_errors: Vec<f64>,
    /// `(t^T K_lim t)^{r/2} (r-1)!!` per order.
    pub reference: Vec<f64>,
    /// Set when the reference covariance came from Monte Carlo rather than a
    /// closed form or quadrature.
    pub reference_is_mc: bool,
    pub samples: usize,
}

impl MomentReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("order,estimate,se,reference\n");
        for i in 0..self.orders.len() {
            out.push_str(&format!(
                "{},{},{},{}\n",
                self.orders[i], self.estimates[i], self.standard_errors[i], self.reference[i]
            ));
        }
        out
    }
}

/// Estimate `E[(t^T f_L)^r]` for r in {2,4,6,8} with jackknife errors.
pub fn moment_report(
    arch: &DeepGpArchitecture,
    points: &[Vec<f64>],
    t: &[f64],
    samples: usize,
    seed: u64,
) -> Result<MomentReport> {
    if samples < 10_000 {
        return Err(Error::domain("moment_report: need at least 10^4 samples"));
    }
    if t.len() != points.len() {
        return Err(Error::shape("projection length must match point count"));
    }
    let mut sampler = PathSampler::new(arch, points)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut proj = Vec::with_capacity(samples);
    for _ in 0..samples {
        let f = sampler.draw_final(&mut rng)?;
        proj.push(t.iter().zip(f.iter()).map(|(a, b)| a * b).sum::<f64>());
    }
    let orders = vec![2usize, 4, 6, 8];
    let mut estimates = Vec::new();
    let mut ses = Vec::new();
    for &r in &orders {
        let powed: Vec<f64> = proj.iter().map(|v| v.powi(r as i32)).collect();
        let (m, se) = jackknife_mean_se(&powed, JACKKNIFE_BLOCKS);
        estimates.push(m);
        ses.push(se);
    }
    // Reference covariance of the projection.
    let (t_klim_t, reference_is_mc) = match projection_limit_variance(arch, points, t) {
        Ok(v) => (v, false),
        Err(_) => {
            // Fall back to the Monte-Carlo second moment and flag it.
            (estimates[0], true)
        }
    };
    let reference: Vec<f64> = orders
        .iter()
        .map(|&r| double_factorial(r as i64 - 1) * t_klim_t.powi(r as i32 / 2))
        .collect();
    Ok(MomentReport {
        orders,
        estimates,
        standard_errors: ses,
        reference,
        reference_is_mc,
        samples,
    })
}

/// `t^T K_lim t` including the jitter the sampler actually uses.
fn projection_limit_variance(
    arch: &DeepGpArchitecture,
    points: &[Vec<f64>],
    t: &[f64],
) -> Result<f64> {
    let n = points.len();
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            let mut k = deepgp::limiting_covariance(arch, &points[i], &points[j])?;
            if i == j {
                k += arch.jitter();
            }
            total += t[i] * t[j] * k;
        }
    }
    Ok(total)
}

// ---------------------------------------------------------------------------
// Concentration of the conditional covariance
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WidthVariance {
    pub width: usize,
    pub variance: f64,
    pub se: f64,
}

/// Monte-Carlo variance of the conditional covariance entry
/// `k_2(f_1(x), f_1(x'))` across first-layer prior draws, per width.
pub fn cond_cov_concentration(
    k1: &KernelSpec,
    k2: &KernelSpec,
    x1: &[f64],
    x2: &[f64],
    widths: &[usize],
    samples: usize,
    seed: u64,
) -> Result<Vec<WidthVariance>> {
    let a = k1.evaluate(x1, x1)?;
    let b = k1.evaluate(x1, x2)?;
    let c = k1.evaluate(x2, x2)?;
    let l11 = a.sqrt();
    let l21 = b / l11;
    let l22 = (c - l21 * l21).max(0.0).sqrt();
    let mut out = Vec::with_capacity(widths.len());
    for (wi, &width) in widths.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(crate::seed::derive(seed, wi as u64));
        let mut vals = Vec::with_capacity(samples);
        let mut u = vec![0.0; width];
        let mut v = vec![0.0; width];
        for _ in 0..samples {
            for i in 0..width {
                let z1: f64 = rng.sample(StandardNormal);
                let z2: f64 = rng.sample(StandardNormal);
                u[i] = l11 * z1;
                v[i] = l21 * z1 + l22 * z2;
            }
            vals.push(k2.evaluate(&u, &v)?);
        }
        let (_, se_of_var) =
            jackknife_stat_se(&vals, JACKKNIFE_BLOCKS, |xs| {
                let m = xs.iter().sum::<f64>() / xs.len() as f64;
                xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() as f64 - 1.0)
            });
        let m = vals.iter().sum::<f64>() / samples as f64;
        let var = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (samples as f64 - 1.0);
        out.push(WidthVariance {
            width,
            variance: var,
            se: se_of_var,
        });
    }
    Ok(out)
}

/// Least-squares slope of `log variance` against `log width`.
pub fn log_log_slope(results: &[WidthVariance]) -> f64 {
    let n = results.len() as f64;
    let xs: Vec<f64> = results.iter().map(|r| (r.width as f64).ln()).collect();
    let ys: Vec<f64> = results.iter().map(|r| r.variance.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let num: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let den: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    num / den
}

// ---------------------------------------------------------------------------
// Characteristic-function bound
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CfBound {
    /// Monte-Carlo estimate of `Re E[exp(i t^T f_L)]`.
    pub lhs: f64,
    /// Gaussian lower bound `exp(-1/2 t^T K_lim t)`.
    pub rhs: f64,
    pub gap: f64,
    pub se: f64,
    pub samples: usize,
}

/// Compare the prior characteristic function against its Gaussian lower bound.
pub fn cf_bound_check(
    arch: &DeepGpArchitecture,
    points: &[Vec<f64>],
    t: &[f64],
    samples: usize,
    seed: u64,
) -> Result<CfBound> {
    if samples < 100_000 {
        return Err(Error::domain("cf_bound_check: need at least 10^5 samples"));
    }
    let mut sampler = PathSampler::new(arch, points)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut vals = Vec::with_capacity(samples);
    for _ in 0..samples {
        let f = sampler.draw_final(&mut rng)?;
        let proj: f64 = t.iter().zip(f.iter()).map(|(a, b)| a * b).sum();
        vals.push(proj.cos());
    }
    let (lhs, se) = jackknife_mean_se(&vals, JACKKNIFE_BLOCKS);
    let t_klim_t = projection_limit_variance(arch, points, t)?;
    let rhs = (-0.5 * t_klim_t).exp();
    Ok(CfBound {
        lhs,
        rhs,
        gap: lhs - rhs,
        se,
        samples,
    })
}

// ---------------------------------------------------------------------------
// Posterior kernel fit and predictive likelihood
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KernelFit {
    pub per_sample: Vec<f64>,
    pub mean: f64,
    pub se: f64,
}

/// Gaussian log marginal likelihood of the data under the last layer's kernel
/// evaluated at each posterior sample's realized penultimate outputs:
/// `log N(y; 0, K_L(F_{L-1}) + jitter I + noise I)`.
pub fn kernel_fit(
    arch: &DeepGpArchitecture,
    chain: &ChainResult,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
) -> Result<KernelFit> {
    if chain.samples.is_empty() {
        return Err(Error::domain("kernel_fit: empty chain"));
    }
    let n = y.len();
    let last = arch.depth() - 1;
    let kernel = &arch.layers()[last].kernel;
    let mut per_sample = Vec::with_capacity(chain.samples.len());
    for state in &chain.samples {
        let inner_rows = if last == 0 {
            kernels::matrix_rows(x)
        } else {
            let outputs = deepgp::unwhiten(arch, x, state)?;
            kernels::matrix_rows(&outputs.values[last - 1])
        };
        let k = kernels::gram_dense(kernel, &inner_rows)?;
        let chol = linalg::cholesky_lower(&k, arch.jitter() + arch.noise())?;
        let alpha = linalg::chol_solve_vec(&chol, y);
        let lml =
            -0.5 * y.dot(&alpha) - linalg::chol_log_diag_sum(&chol) - 0.5 * n as f64 * LOG_2PI;
        per_sample.push(lml);
    }
    let (mean, se) = if per_sample.len() >= JACKKNIFE_BLOCKS {
        jackknife_mean_se(&per_sample, JACKKNIFE_BLOCKS)
    } else {
        (
            per_sample.iter().sum::<f64>() / per_sample.len() as f64,
            0.0,
        )
    };
    Ok(KernelFit {
        per_sample,
        mean,
        se,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictiveLl {
    pub per_point: Vec<f64>,
    /// Mean test log likelihood (nats per point).
    pub mean: f64,
    /// Standard error over test points.
    pub se: f64,
    /// Mixture predictive mean per test point (for RMSE reporting).
    pub mixture_means: Vec<f64>,
}

impl PredictiveLl {
    pub fn rmse(&self, y_test: &DVector<f64>) -> f64 {
        let m = self.mixture_means.len();
        (self
            .mixture_means
            .iter()
            .zip(y_test.iter())
            .map(|(p, y)| (p - y) * (p - y))
            .sum::<f64>()
            / m as f64)
            .sqrt()
    }
}

/// Mean test log likelihood of the equal-weight posterior mixture:
/// per point, `log (1/S) sum_s N(y*; mu_s, var_s + noise)`.
pub fn predictive_ll(
    arch: &DeepGpArchitecture,
    chain: &ChainResult,
    x: &DMatrix<f64>,
    x_test: &DMatrix<f64>,
    y_test: &DVector<f64>,
    seed: u64,
) -> Result<PredictiveLl> {
    if chain.samples.is_empty() {
        return Err(Error::domain("predictive_ll: empty chain"));
    }
    if x_test.nrows() == 0 {
        return Err(Error::domain("predictive_ll: empty test set"));
    }
    let m = x_test.nrows();
    let s_count = chain.samples.len();
    let test_rows = kernels::matrix_rows(x_test);
    // log densities [point][sample]
    let mut logp = vec![Vec::with_capacity(s_count); m];
    let mut mean_acc = vec![0.0f64; m];
    for (si, state) in chain.samples.iter().enumerate() {
        let outputs = deepgp::unwhiten(arch, x, state)?;
        let mut rng = ChaCha8Rng::seed_from_u64(crate::seed::derive(seed, si as u64));
        for (pi, row) in test_rows.iter().enumerate() {
            let pred = deepgp::predict_with_outputs(arch, x, &outputs, row, &mut rng)?;
            let var = pred.observed_variance(arch.noise());
            let resid = y_test[pi] - pred.mean;
            logp[pi].push(-0.5 * (LOG_2PI + var.ln() + resid * resid / var));
            mean_acc[pi] += pred.mean;
        }
    }
    let per_point: Vec<f64> = logp
        .iter()
        .map(|lps| {
            let max = lps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            max + (lps.iter().map(|l| (l - max).exp()).sum::<f64>() / s_count as f64).ln()
        })
        .collect();
    let mean = per_point.iter().sum::<f64>() / m as f64;
    let var = per_point.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
        / (m as f64 - 1.0).max(1.0);
    Ok(PredictiveLl {
        per_point,
        mean,
        se: (var / m as f64).sqrt(),
        mixture_means: mean_acc.iter().map(|v| v / s_count as f64).collect(),
    })
}
