//! Gauss-Hermite quadrature in the physicists' convention,
//! plus tensorized rules for expectations over i.i.d. Gaussian vectors.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

pub const SQRT_PI: f64 = 1.7724538509055160273;

/// Nodes and weights of the `n`-point Gauss-Hermite rule:
/// `∫ f(ξ) e^{-ξ²} dξ ≈ Σ wᵢ f(ξᵢ)`, exact for polynomials of degree `2n-1`.
#[derive(Debug, Clone)]
pub struct GaussHermite {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

/// Compute the `n`-node rule via the Golub-Welsch eigendecomposition of the
/// Jacobi matrix.
pub fn gauss_hermite_nodes(n: usize) -> Result<GaussHermite> {
    if n == 0 || n > 64 {
        return Err(Error::domain(format!(
            "Gauss-Hermite node count must be in 1..=64, got {n}"
        )));
    }
    if n == 1 {
        return Ok(GaussHermite {
            nodes: vec![0.0],
            weights: vec![SQRT_PI],
        });
    }
    let mut jacobi = DMatrix::<f64>::zeros(n, n);
    for k in 1..n {
        let b = (k as f64 / 2.0).sqrt();
        jacobi[(k - 1, k)] = b;
        jacobi[(k, k - 1)] = b;
    }
    let eig = nalgebra::linalg::SymmetricEigen::try_new(jacobi, 1e-15, 20_000)
        .ok_or_else(|| Error::numerical("Gauss-Hermite eigensolver did not converge"))?;
    let mut nodes: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    nodes.sort_by(|a, b| a.partial_cmp(b).unwrap());
    // Polish each node with Newton steps on the orthonormal Hermite polynomial
    // and take weights from the Christoffel function; the raw eigendecomposition
    // is only accurate to ~1e-10 in the induced high-order moments.
    let mut weights = vec![0.0f64; n];
    for (i, node) in nodes.iter_mut().enumerate() {
        let mut x = *node;
        let mut converged = false;
        for _ in 0..50 {
            let (pn, dpn, _) = orthonormal_hermite(n, x);
            let step = pn / dpn;
            x -= step;
            if step.abs() <= 1e-15 * (1.0 + x.abs()) {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(Error::numerical(format!(
                "Gauss-Hermite Newton refinement did not converge at node {i}"
            )));
        }
        let (_, _, christoffel) = orthonormal_hermite(n, x);
        *node = x;
        weights[i] = 1.0 / christoffel;
    }
    Ok(GaussHermite { nodes, weights })
}

/// Evaluate the orthonormal Hermite polynomial `h̃_n(x)` (orthonormal under the
/// weight `e^{-x²}`), its derivative, and the Christoffel sum `Σ_{k<n} h̃_k(x)²`.
fn orthonormal_hermite(n: usize, x: f64) -> (f64, f64, f64) {
    let mut p_prev = 0.0f64;
    let mut p = std::f64::consts::PI.powf(-0.25);
    let mut christoffel = p * p;
    for k in 0..n {
        let next = x * (2.0 / (k as f64 + 1.0)).sqrt() * p
            - (k as f64 / (k as f64 + 1.0)).sqrt() * p_prev;
        p_prev = p;
        p = next;
        if k + 1 < n {
            christoffel += p * p;
        }
    }
    let dp = (2.0 * n as f64).sqrt() * p_prev;
    (p, dp, christoffel)
}

impl GaussHermite {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// `E[f(τ)]` for `τ ~ N(0, σ²)` via the substitution `τ = √2 σ ξ`.
    pub fn gaussian_expectation(&self, sigma: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
        let scale = std::f64::consts::SQRT_2 * sigma;
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| w / SQRT_PI * f(scale * x))
            .sum()
    }

    /// Probability atoms of the discretized `N(0, σ²)`: `(τᵢ, wᵢ/√π)`.
    pub fn gaussian_atoms(&self, sigma: f64) -> Vec<(f64, f64)> {
        let scale = std::f64::consts::SQRT_2 * sigma;
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| (scale * x, w / SQRT_PI))
            .collect()
    }
}

/// Number of function evaluations used by [`symmetric_gaussian_expectation`]
/// with `n` nodes in `dims` dimensions: C(dims + n - 1, n - 1).
pub fn symmetric_rule_size(n_nodes: usize, dims: usize) -> u128 {
    let mut r: u128 = 1;
    for i in 0..(n_nodes - 1).min(dims + n_nodes - 1) {
        r = r.saturating_mul((dims + n_nodes - 1 - i) as u128) / (i as u128 + 1);
    }
    r
}

/// `E[f(τ₁,…,τ_d)]` for i.i.d. `τᵢ ~ N(0, σ²)` and `f` symmetric under
/// permutations of its arguments.
///
/// The full tensor-product rule has `n^d` points; by symmetry it collapses to
/// one evaluation per multiset of nodes, with multinomial weights. The value is
/// identical to the full tensor product.
pub fn symmetric_gaussian_expectation(
    rule: &GaussHermite,
    sigma: f64,
    dims: usize,
    mut f: impl FnMut(&[f64]) -> f64,
) -> f64 {
    assert!(dims >= 1);
    let atoms = rule.gaussian_atoms(sigma);
    let n = atoms.len();
    let mut counts = vec![0usize; n];
    let mut tau = vec![0.0f64; dims];
    let log_fact: Vec<f64> = {
        let mut v = vec![0.0; dims + 1];
        for i in 1..=dims {
            v[i] = v[i - 1] + (i as f64).ln();
        }
        v
    };
    let mut total = 0.0;
    // Enumerate multiplicity vectors summing to `dims`.
    fn recurse(
        atoms: &[(f64, f64)],
        counts: &mut Vec<usize>,
        idx: usize,
        remaining: usize,
        log_fact: &[f64],
        tau: &mut Vec<f64>,
        f: &mut dyn FnMut(&[f64]) -> f64,
        total: &mut f64,
    ) {
        if idx == atoms.len() - 1 {
            counts[idx] = remaining;
            let dims = tau.len();
            let mut log_w = log_fact[dims];
            let mut pos = 0;
            for (i, &c) in counts.iter().enumerate() {
                log_w -= log_fact[c];
                log_w += c as f64 * atoms[i].1.ln();
                for _ in 0..c {
                    tau[pos] = atoms[i].0;
                    pos += 1;
                }
            }
            *total += log_w.exp() * f(tau);
            return;
        }
        for c in 0..=remaining {
            counts[idx] = c;
            recurse(atoms, counts, idx + 1, remaining - c, log_fact, tau, f, total);
        }
    }
    recurse(
        &atoms,
        &mut counts,
        0,
        dims,
        &log_fact,
        &mut tau,
        &mut f,
        &mut total,
    );
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn single_node_rule() {
        let r = gauss_hermite_nodes(1).unwrap();
        assert_relative_eq!(r.nodes[0], 0.0, epsilon = 1e-14);
        assert_relative_eq!(r.weights[0], SQRT_PI, epsilon = 1e-12);
    }

    #[test]
    fn two_node_rule_matches_hermite_roots() {
        // Roots of H2(ξ) = 4ξ² - 2 are ±1/√2, with weights √π/2.
        let r = gauss_hermite_nodes(2).unwrap();
        let inv_sqrt2 = 1.0 / std::f64::consts::SQRT_2;
        assert_relative_eq!(r.nodes[0], -inv_sqrt2, epsilon = 1e-12);
        assert_relative_eq!(r.nodes[1], inv_sqrt2, epsilon = 1e-12);
        assert_relative_eq!(r.weights[0], SQRT_PI / 2.0, epsilon = 1e-12);
        assert_relative_eq!(r.weights[1], SQRT_PI / 2.0, epsilon = 1e-12);
    }

    #[test]
    fn second_moment_exact_with_two_nodes() {
        let r = gauss_hermite_nodes(2).unwrap();
        let m2 = r.gaussian_expectation(1.0, |t| t * t);
        assert_relative_eq!(m2, 1.0, epsilon = 1e-12);
    }

    /// Gaussian moments E[τ^k] for τ ~ N(0, σ²): 0 for odd k, σ^k (k-1)!! even.
    fn gaussian_moment(sigma: f64, k: usize) -> f64 {
        if k % 2 == 1 {
            return 0.0;
        }
        let mut m = 1.0;
        let mut i = k as i64 - 1;
        while i > 0 {
            m *= i as f64;
            i -= 2;
        }
        m * sigma.powi(k as i32)
    }

    #[test]
    fn exactness_up_to_degree_2n_minus_1() {
        for n in [1usize, 2, 3, 5, 7, 11, 21, 64] {
            let r = gauss_hermite_nodes(n).unwrap();
            for sigma in [0.7, 1.0, 2.3] {
                for k in 0..(2 * n) {
                    let got = r.gaussian_expectation(sigma, |t| t.powi(k as i32));
                    let want = gaussian_moment(sigma, k);
                    let scale = gaussian_moment(sigma, k + (k % 2)).max(1.0);
                    assert!(
                        (got - want).abs() <= 1e-10 * scale,
                        "n={n} sigma={sigma} k={k}: got {got}, want {want}"
                    );
                }
            }
        }
    }

    #[test]
    fn node_count_bounds() {
        assert!(gauss_hermite_nodes(0).is_err());
        assert!(gauss_hermite_nodes(65).is_err());
        assert!(gauss_hermite_nodes(64).is_ok());
    }

    #[test]
    fn symmetric_rule_matches_full_tensor_product() {
        let r = gauss_hermite_nodes(4).unwrap();
        let sigma = 0.9;
        // Symmetric test integrand.
        let f = |tau: &[f64]| -> f64 {
            let s: f64 = tau.iter().map(|t| (-0.5 * t * t).exp()).sum();
            (1.0 + s / tau.len() as f64).powf(-0.5)
        };
        let dims = 3;
        // Full tensor product, brute force.
        let atoms = r.gaussian_atoms(sigma);
        let mut full = 0.0;
        for i in 0..4 {
            for j in 0..4 {
                for k in 0..4 {
                    let tau = [atoms[i].0, atoms[j].0, atoms[k].0];
                    full += atoms[i].1 * atoms[j].1 * atoms[k].1 * f(&tau);
                }
            }
        }
        let collapsed = symmetric_gaussian_expectation(&r, sigma, dims, f);
        assert_relative_eq!(collapsed, full, epsilon = 1e-13);
        assert_eq!(symmetric_rule_size(4, 3), 20);
    }
}
