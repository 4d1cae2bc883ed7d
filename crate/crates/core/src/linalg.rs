//! Dense solvers shared by the balancing problems and the oracle regression.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Relative eigenvalue cutoff below which a KKT direction is treated as null.
pub const KKT_RANK_TOL: f64 = 1e-10;

/// Solves the symmetric system `A x = b`.
///
/// Nonsingular systems go through a pivoted LU factorization. When the LU
/// pivots indicate (near-)singularity the system is solved through a
/// symmetric eigendecomposition, dropping eigenvalues below
/// `KKT_RANK_TOL · max|λ|`, which yields the minimum-norm least-squares
/// solution.
pub fn solve_kkt(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let n = a.nrows();
    if a.ncols() != n || b.len() != n {
        return Err(Error::MalformedProblem(format!(
            "KKT system is {}x{} with a right-hand side of length {}",
            a.nrows(),
            a.ncols(),
            b.len()
        )));
    }
    if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput);
    }
    if n == 0 {
        return Ok(DVector::zeros(0));
    }
    if let Some(x) = lu_fast_path(a, b) {
        return Ok(x);
    }
    Ok(min_norm_symmetric(a, b))
}

// The LU path is only trusted when every pivot is comfortably above the
// eigenvalue cutoff; anything borderline goes to the eigen solver.
fn lu_fast_path(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    let lu = a.clone().lu();
    let u = lu.u();
    let (lo, hi) = u
        .diagonal()
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), v| (lo.min(v.abs()), hi.max(v.abs())));
    if !(hi > 0.0) || lo <= 1e-7 * hi {
        return None;
    }
    let mut x = lu.solve(b)?;
    // one step of iterative refinement
    let resid = b - a * &x;
    if let Some(dx) = lu.solve(&resid) {
        x += dx;
    }
    if x.iter().all(|v| v.is_finite()) {
        Some(x)
    } else {
        None
    }
}

/// Minimum-norm solution of a symmetric system via eigendecomposition.
pub fn min_norm_symmetric(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let eig = SymmetricEigen::new(a.clone());
    let max_abs = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut x = DVector::zeros(a.nrows());
    if max_abs == 0.0 {
        return x;
    }
    let tol = KKT_RANK_TOL * max_abs;
    for (i, &lambda) in eig.eigenvalues.iter().enumerate() {
        if lambda.abs() > tol {
            let q = eig.eigenvectors.column(i);
            let coef = q.dot(b) / lambda;
            x.axpy(coef, &q, 1.0);
        }
    }
    x
}

/// Thin singular value decomposition `X = U Σ Vᵀ` by one-sided Jacobi
/// rotations.
///
/// nalgebra's bidiagonal SVD can lose several digits on tall rank-deficient
/// matrices (reconstruction errors near 1e-6 were observed on regression
/// designs), which is not acceptable for the oracle comparisons.
#[derive(Debug, Clone)]
pub struct JacobiSvd {
    /// Columns `σ_i u_i` (length n_rows each).
    scaled_u: DMatrix<f64>,
    v: DMatrix<f64>,
    sigma: Vec<f64>,
    transposed: bool,
}

impl JacobiSvd {
    pub fn new(x: &DMatrix<f64>) -> Self {
        let transposed = x.nrows() < x.ncols();
        let mut a = if transposed { x.transpose() } else { x.clone() };
        let n = a.ncols();
        let mut v = DMatrix::<f64>::identity(n, n);
        for _sweep in 0..60 {
            let mut rotated = false;
            for p in 0..n {
                for q in p + 1..n {
                    let alpha = a.column(p).norm_squared();
                    let beta = a.column(q).norm_squared();
                    let gamma = a.column(p).dot(&a.column(q));
                    if gamma == 0.0 || gamma.abs() <= 1e-15 * (alpha * beta).sqrt() {
                        continue;
                    }
                    rotated = true;
                    let zeta = (beta - alpha) / (2.0 * gamma);
                    let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                    let t = if zeta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (1.0 + t * t).sqrt();
                    let s = c * t;
                    rotate_columns(&mut a, p, q, c, s);
                    rotate_columns(&mut v, p, q, c, s);
                }
            }
            if !rotated {
                break;
            }
        }
        let sigma = (0..n).map(|i| a.column(i).norm()).collect();
        Self { scaled_u: a, v, sigma, transposed }
    }

    /// Singular values in decreasing order.
    pub fn singular_values(&self) -> Vec<f64> {
        let mut s = self.sigma.clone();
        s.sort_by(|a, b| b.total_cmp(a));
        s
    }

    /// Minimum-norm least-squares solution dropping singular values `<= eps`.
    pub fn solve(&self, y: &DVector<f64>, eps: f64) -> DVector<f64> {
        // X = U Σ Vᵀ with the scaled columns B = U Σ (or B = V Σ for a
        // transposed factorization), so β = Σ_i v_i (b_iᵀ y) / σ_i².
        let (left, right) = if self.transposed { (&self.v, &self.scaled_u) } else { (&self.scaled_u, &self.v) };
        let mut beta = DVector::zeros(right.nrows());
        for i in 0..self.sigma.len() {
            let s = self.sigma[i];
            if s <= eps {
                continue;
            }
            let coef = left.column(i).dot(y) / (s * s);
            beta.axpy(coef, &right.column(i), 1.0);
        }
        beta
    }
}

fn rotate_columns(m: &mut DMatrix<f64>, p: usize, q: usize, c: f64, s: f64) {
    for i in 0..m.nrows() {
        let x = m[(i, p)];
        let y = m[(i, q)];
        m[(i, p)] = c * x - s * y;
        m[(i, q)] = s * x + c * y;
    }
}

/// Minimum-norm least-squares solution of `X β ≈ y`, treating singular
/// values below `rel_tol · σ_max` as zero.
pub fn min_norm_lstsq(x: &DMatrix<f64>, y: &DVector<f64>, rel_tol: f64) -> Result<DVector<f64>> {
    if x.nrows() != y.len() {
        return Err(Error::MalformedProblem("design and response lengths differ".into()));
    }
    if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput);
    }
    if x.nrows() == 0 || x.ncols() == 0 {
        return Ok(DVector::zeros(x.ncols()));
    }
    let svd = JacobiSvd::new(x);
    let smax = svd.sigma.iter().fold(0.0f64, |m, v| m.max(*v));
    if smax == 0.0 {
        return Ok(DVector::zeros(x.ncols()));
    }
    Ok(svd.solve(y, rel_tol * smax))
}

/// Singular values in decreasing order.
pub fn singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Vec::new();
    }
    JacobiSvd::new(m).singular_values()
}

/// Number of singular values above `abs_tol`.
pub fn numerical_rank(m: &DMatrix<f64>, abs_tol: f64) -> usize {
    singular_values(m).into_iter().filter(|&s| s > abs_tol).count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    // Textbook Gaussian elimination with partial pivoting, kept independent
    // of nalgebra's factorizations.
    fn gauss_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
        let n = b.len();
        for col in 0..n {
            let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
            a.swap(col, piv);
            b.swap(col, piv);
            for row in col + 1..n {
                let f = a[row][col] / a[col][col];
                for k in col..n {
                    a[row][k] -= f * a[col][k];
                }
                b[row] -= f * b[col];
            }
        }
        let mut x = vec![0.0; n];
        for i in (0..n).rev() {
            let s: f64 = (i + 1..n).map(|k| a[i][k] * x[k]).sum();
            x[i] = (b[i] - s) / a[i][i];
        }
        x
    }

    #[test]
    fn identity_returns_rhs() {
        let b = DVector::from_vec(vec![1.0, -2.0, 3.5]);
        assert_eq!(solve_kkt(&DMatrix::identity(3, 3), &b).unwrap(), b);
    }

    #[test]
    fn singular_diag_gives_min_norm() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 0.0]));
        let x = solve_kkt(&a, &DVector::from_vec(vec![4.0, 0.0])).unwrap();
        assert!((x[0] - 2.0).abs() < 1e-15 && x[1] == 0.0);
    }

    #[test]
    fn random_spd_matches_elimination() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let g = DMatrix::from_fn(6, 6, |_, _| rng.random_range(-1.0..1.0));
            let a = &g * g.transpose() + DMatrix::identity(6, 6) * 0.5;
            let b = DVector::from_fn(6, |_, _| rng.random_range(-1.0..1.0));
            let x = solve_kkt(&a, &b).unwrap();
            let rows: Vec<Vec<f64>> = (0..6).map(|i| (0..6).map(|j| a[(i, j)]).collect()).collect();
            let oracle = gauss_solve(rows, b.iter().copied().collect());
            for i in 0..6 {
                assert!((x[i] - oracle[i]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn eigen_path_agrees_with_lu_on_regular_systems() {
        let a = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 1.0, 1.0, 3.0, 0.0, 1.0, 0.0, 0.0]);
        let b = DVector::from_vec(vec![1.0, 2.0, 1.0]);
        let x1 = solve_kkt(&a, &b).unwrap();
        let x2 = min_norm_symmetric(&a, &b);
        assert!((x1 - x2).norm() < 1e-12);
    }

    #[test]
    fn non_finite_rejected() {
        let a = DMatrix::from_element(1, 1, f64::NAN);
        assert!(matches!(solve_kkt(&a, &DVector::zeros(1)), Err(Error::NonFiniteInput)));
    }

    #[test]
    fn lstsq_min_norm_on_duplicate_columns() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 2.0, 2.0, 3.0, 3.0]);
        let y = DVector::from_vec(vec![2.0, 4.0, 6.0]);
        let beta = min_norm_lstsq(&x, &y, 1e-12).unwrap();
        assert!((beta[0] - 1.0).abs() < 1e-12 && (beta[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn lstsq_wide_system_is_min_norm() {
        let x = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        let beta = min_norm_lstsq(&x, &DVector::from_vec(vec![2.0]), 1e-12).unwrap();
        assert!((beta[0] - 1.0).abs() < 1e-14 && (beta[1] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn jacobi_matches_normal_equations_on_full_rank() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = DMatrix::from_fn(12, 4, |_, _| rng.random_range(-1.0..1.0));
        let y = DVector::from_fn(12, |_, _| rng.random_range(-1.0..1.0));
        let beta = min_norm_lstsq(&x, &y, 1e-12).unwrap();
        let xtx = x.transpose() * &x;
        let rows: Vec<Vec<f64>> = (0..4).map(|i| (0..4).map(|j| xtx[(i, j)]).collect()).collect();
        let oracle = gauss_solve(rows, (x.transpose() * &y).iter().copied().collect());
        for i in 0..4 {
            assert!((beta[i] - oracle[i]).abs() < 1e-10);
        }
        let sv = singular_values(&x);
        let eig = SymmetricEigen::new(xtx).eigenvalues;
        let mut from_eig: Vec<f64> = eig.iter().map(|l| l.sqrt()).collect();
        from_eig.sort_by(|a, b| b.total_cmp(a));
        for (a, b) in sv.iter().zip(&from_eig) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}
