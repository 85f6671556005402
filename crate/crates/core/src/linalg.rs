//! Dense linear-algebra helpers: jittered Cholesky factorization, the reverse-mode
//! adjoint of the Cholesky map, and triangular solves.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub const LOG_2PI: f64 = 1.8378770664093453;

/// Lower Cholesky factor of `k + jitter * I`.
///
/// On failure returns [`Error::CholeskyFailed`] carrying an estimate of the
/// jittered matrix's minimum eigenvalue.
pub fn cholesky_lower(k: &DMatrix<f64>, jitter: f64) -> Result<DMatrix<f64>> {
    let n = k.nrows();
    if n != k.ncols() {
        return Err(Error::shape(format!(
            "Cholesky needs a square matrix, got {}x{}",
            n,
            k.ncols()
        )));
    }
    let mut a = k.clone();
    for i in 0..n {
        a[(i, i)] += jitter;
    }
    match a.clone().cholesky() {
        Some(ch) => Ok(ch.unpack()),
        None => Err(Error::CholeskyFailed {
            min_eigenvalue: min_symmetric_eigenvalue(&a),
        }),
    }
}

/// Smallest eigenvalue of a symmetric matrix; NaN if the eigensolver fails.
pub fn min_symmetric_eigenvalue(a: &DMatrix<f64>) -> f64 {
    match nalgebra::linalg::SymmetricEigen::try_new(a.clone(), 1e-13, 10_000) {
        Some(eig) => eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min),
        None => f64::NAN,
    }
}

/// Solve `l * x = b` for lower-triangular `l`.
pub fn solve_lower(l: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    l.solve_lower_triangular(b)
        .expect("lower-triangular solve: zero diagonal")
}

/// Solve `l^T * x = b` for lower-triangular `l`.
pub fn solve_lower_transpose(l: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    l.tr_solve_lower_triangular(b)
        .expect("transposed lower-triangular solve: zero diagonal")
}

/// Solve `(l l^T) x = b` via two triangular solves.
pub fn chol_solve_vec(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let mut x = b.clone();
    assert!(l.solve_lower_triangular_mut(&mut x));
    assert!(l.tr_solve_lower_triangular_mut(&mut x));
    x
}

/// Solve `(l l^T) X = B` columnwise.
pub fn chol_solve_mat(l: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    solve_lower_transpose(l, &solve_lower(l, b))
}

/// Sum of log diagonal entries; `log det(l l^T) = 2 * chol_log_diag_sum(l)`.
pub fn chol_log_diag_sum(l: &DMatrix<f64>) -> f64 {
    (0..l.nrows()).map(|i| l[(i, i)].ln()).sum()
}

/// Reverse-mode adjoint of the Cholesky factorization.
///
/// Given the lower factor `l` of a symmetric matrix `A = l l^T` and the adjoint
/// `l_bar = d(loss)/dL`, returns the symmetric adjoint `A_bar` such that
/// `d(loss) = <A_bar, dA>` for symmetric perturbations `dA`.
pub fn cholesky_rev(l: &DMatrix<f64>, l_bar: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    // Only the lower triangle of l_bar is meaningful.
    let mut low = l_bar.clone();
    for i in 0..n {
        for j in (i + 1)..n {
            low[(i, j)] = 0.0;
        }
    }
    let q = l.transpose() * low;
    // s = phi(q) + phi(q)^T with the diagonal counted once.
    let mut s = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        s[(i, i)] = q[(i, i)];
        for j in 0..i {
            s[(i, j)] = q[(i, j)];
            s[(j, i)] = q[(i, j)];
        }
    }
    // a_bar = 0.5 * l^-T s l^-1
    let t = solve_lower_transpose(l, &s);
    let a_bar = solve_lower_transpose(l, &t.transpose()).transpose();
    let mut out = a_bar;
    out.scale_mut(0.5);
    // Symmetrize against roundoff.
    let sym = (&out + out.transpose()) * 0.5;
    sym
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_spd(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let b = DMatrix::from_fn(n, n, |_, _| rng.random::<f64>() - 0.5);
        &b * b.transpose() + DMatrix::identity(n, n) * 0.5
    }

    #[test]
    fn cholesky_reconstructs_jittered_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for n in [1usize, 3, 8] {
            let k = random_spd(n, &mut rng);
            let jitter = 1e-4;
            let l = cholesky_lower(&k, jitter).unwrap();
            let rebuilt = &l * l.transpose();
            let mut kj = k.clone();
            for i in 0..n {
                kj[(i, i)] += jitter;
            }
            assert_relative_eq!(rebuilt, kj, max_relative = 1e-8);
        }
    }

    #[test]
    fn cholesky_failure_reports_min_eigenvalue() {
        // Indefinite matrix.
        let k = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let err = cholesky_lower(&k, 0.0).unwrap_err();
        match err {
            Error::CholeskyFailed { min_eigenvalue } => {
                assert_relative_eq!(min_eigenvalue, -1.0, epsilon = 1e-10);
            }
            other => panic!("unexpected error: {other}"),
        }
    }

    /// Finite-difference check of the Cholesky adjoint through a scalar loss.
    #[test]
    fn cholesky_rev_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 5;
        let k = random_spd(n, &mut rng);
        let w = DMatrix::from_fn(n, n, |_, _| rng.random::<f64>() - 0.5);
        // loss(A) = sum(W .* chol(A))
        let loss = |a: &DMatrix<f64>| -> f64 {
            let l = a.clone().cholesky().unwrap().unpack();
            (0..n)
                .flat_map(|i| (0..n).map(move |j| (i, j)))
                .map(|(i, j)| w[(i, j)] * l[(i, j)])
                .sum()
        };
        let l = k.clone().cholesky().unwrap().unpack();
        let a_bar = cholesky_rev(&l, &w);
        let h = 1e-6;
        for i in 0..n {
            for j in 0..=i {
                let mut kp = k.clone();
                let mut km = k.clone();
                // Symmetric perturbation.
                kp[(i, j)] += h;
                km[(i, j)] -= h;
                if i != j {
                    kp[(j, i)] += h;
                    km[(j, i)] -= h;
                }
                let fd = (loss(&kp) - loss(&km)) / (2.0 * h);
                let analytic = if i == j {
                    a_bar[(i, j)]
                } else {
                    2.0 * a_bar[(i, j)]
                };
                assert_relative_eq!(analytic, fd, max_relative = 1e-5, epsilon = 1e-8);
            }
        }
    }
}
