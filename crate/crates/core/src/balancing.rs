//! Sum-to-one balancing weights.
//!
//! Two problems share one KKT code path:
//!
//! * the ridge problem used by the feasible estimator,
//!   `min ‖P w + w₀ 1 − y‖² + η² Σ_j d_j w_j²  s.t. Σ_j w_j = 1`,
//!   with a free, unpenalized intercept `w₀`;
//! * the exact problem used by the oracle,
//!   `min Σ_j d_j w_j²  s.t. M w = m`.
//!
//! Weights are not restricted to be nonnegative.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::solve_kkt;

/// Regularization strength of the ridge problem. `Inf` is the penalty-only
/// limit and is handled in closed form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Eta {
    Finite(f64),
    Inf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RidgeBalanceProblem {
    /// Rows are fit dimensions, columns are the weighted series.
    pub predictors: DMatrix<f64>,
    pub target: DVector<f64>,
    /// Per-column penalty multipliers `d_j ≥ 0`.
    pub penalty_diag: DVector<f64>,
    pub eta: Eta,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExactBalanceProblem {
    /// Moment rows (typically a row of ones followed by factor rows).
    pub moments: DMatrix<f64>,
    pub target: DVector<f64>,
    pub penalty_diag: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightSolution {
    pub weights: Vec<f64>,
    /// Free intercept of the ridge fit; `None` for exact problems.
    pub intercept: Option<f64>,
    /// Euclidean norm of the fit residual (ridge) or moment residual (exact).
    pub imbalance: f64,
    /// `Σ_j d_j w_j²`, the regularizer without the η² factor.
    pub penalty_value: f64,
}

fn check_finite<'a>(values: impl IntoIterator<Item = &'a f64>) -> Result<()> {
    if values.into_iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteInput)
    }
}

fn penalty_value(weights: &[f64], d: &DVector<f64>) -> f64 {
    weights.iter().zip(d.iter()).map(|(w, d)| d * w * w).sum()
}

pub fn solve_ridge_balance(p: &RidgeBalanceProblem) -> Result<WeightSolution> {
    let (m, j) = p.predictors.shape();
    if j == 0 || m == 0 {
        return Err(Error::MalformedProblem("ridge problem needs at least one row and column".into()));
    }
    if p.target.len() != m || p.penalty_diag.len() != j {
        return Err(Error::MalformedProblem(format!(
            "predictors are {m}x{j}, target has {} rows, penalty has {} entries",
            p.target.len(),
            p.penalty_diag.len()
        )));
    }
    check_finite(p.predictors.iter().chain(p.target.iter()).chain(p.penalty_diag.iter()))?;
    if p.penalty_diag.iter().any(|&d| d < 0.0) {
        return Err(Error::MalformedProblem("negative penalty multiplier".into()));
    }

    let weights = match p.eta {
        Eta::Inf => {
            if p.penalty_diag.iter().any(|&d| d <= 0.0) {
                return Err(Error::MalformedProblem(
                    "the penalty-only limit needs strictly positive multipliers".into(),
                ));
            }
            let inv: Vec<f64> = p.penalty_diag.iter().map(|d| 1.0 / d).collect();
            let total: f64 = inv.iter().sum();
            inv.into_iter().map(|v| v / total).collect::<Vec<_>>()
        }
        Eta::Finite(eta) => {
            if !(eta.is_finite() && eta > 0.0) {
                return Err(Error::MalformedProblem(format!("eta must be positive, got {eta}")));
            }
            ridge_kkt(p, eta)?
        }
    };

    let fitted = &p.predictors * DVector::from_column_slice(&weights);
    let intercept = (&p.target - &fitted).mean();
    let resid = fitted.add_scalar(intercept) - &p.target;
    Ok(WeightSolution {
        penalty_value: penalty_value(&weights, &p.penalty_diag),
        weights,
        intercept: Some(intercept),
        imbalance: resid.norm(),
    })
}

// Subtracting the target from every column and centering the columns leaves
// the weights unchanged (Σw = 1 and the intercept is free) and profiles out
// the intercept, so the remaining KKT system is
//   [H 1; 1ᵀ 0] [w; ν] = [0; 1],  H = R̃ᵀR̃ + η² D,
// rescaled so that H has unit mean diagonal.
fn ridge_kkt(p: &RidgeBalanceProblem, eta: f64) -> Result<Vec<f64>> {
    let (m, j) = p.predictors.shape();
    let mut r = p.predictors.clone();
    for row in 0..m {
        let y = p.target[row];
        for col in 0..j {
            r[(row, col)] -= y;
        }
    }
    for col in 0..j {
        let mean = r.column(col).mean();
        r.column_mut(col).add_scalar_mut(-mean);
    }
    let mut h = r.transpose() * &r;
    let eta2 = eta * eta;
    for col in 0..j {
        h[(col, col)] += eta2 * p.penalty_diag[col];
    }
    let mean_diag = h.diagonal().mean();
    let scale = if mean_diag > 0.0 { mean_diag } else { 1.0 };

    let mut kkt = DMatrix::<f64>::zeros(j + 1, j + 1);
    kkt.view_mut((0, 0), (j, j)).copy_from(&(h / scale));
    for col in 0..j {
        kkt[(col, j)] = 1.0;
        kkt[(j, col)] = 1.0;
    }
    let mut rhs = DVector::<f64>::zeros(j + 1);
    rhs[j] = 1.0;
    let sol = solve_kkt(&kkt, &rhs)?;
    let mut w: Vec<f64> = sol.iter().take(j).copied().collect();
    let drift = 1.0 - w.iter().sum::<f64>();
    if drift.abs() > 1e-8 {
        return Err(Error::SingularSystem(format!("sum-to-one constraint violated by {drift:.3e}")));
    }
    let fix = drift / j as f64;
    w.iter_mut().for_each(|v| *v += fix);
    Ok(w)
}

/// Feasibility tolerance on the row-equilibrated moment residual.
pub const EXACT_BALANCE_TOL: f64 = 1e-8;

pub fn solve_exact_balance(p: &ExactBalanceProblem) -> Result<WeightSolution> {
    let (q, j) = p.moments.shape();
    if q == 0 || j == 0 {
        return Err(Error::MalformedProblem("exact problem needs moments and columns".into()));
    }
    if p.target.len() != q || p.penalty_diag.len() != j {
        return Err(Error::MalformedProblem(format!(
            "moments are {q}x{j}, target has {} rows, penalty has {} entries",
            p.target.len(),
            p.penalty_diag.len()
        )));
    }
    check_finite(p.moments.iter().chain(p.target.iter()).chain(p.penalty_diag.iter()))?;
    if p.penalty_diag.iter().any(|&d| d <= 0.0) {
        return Err(Error::MalformedProblem("exact problems need positive multipliers".into()));
    }

    // Equilibrate each moment row; the feasible set is unchanged.
    let mut mom = p.moments.clone();
    let mut tgt = p.target.clone();
    for row in 0..q {
        let s = mom.row(row).iter().fold(tgt[row].abs(), |a, v| a.max(v.abs()));
        if s > 0.0 {
            mom.row_mut(row).scale_mut(1.0 / s);
            tgt[row] /= s;
        }
    }

    let n = j + q;
    let mut kkt = DMatrix::<f64>::zeros(n, n);
    for col in 0..j {
        kkt[(col, col)] = p.penalty_diag[col];
    }
    kkt.view_mut((j, 0), (q, j)).copy_from(&mom);
    kkt.view_mut((0, j), (j, q)).copy_from(&mom.transpose());
    let mut rhs = DVector::<f64>::zeros(n);
    rhs.rows_mut(j, q).copy_from(&tgt);

    let sol = solve_kkt(&kkt, &rhs)?;
    let w = DVector::from_iterator(j, sol.iter().take(j).copied());
    let scaled_resid = (&mom * &w - &tgt).norm();
    if !(scaled_resid <= EXACT_BALANCE_TOL) {
        return Err(Error::InfeasibleConstraints { residual: scaled_resid });
    }
    let weights: Vec<f64> = w.iter().copied().collect();
    Ok(WeightSolution {
        penalty_value: penalty_value(&weights, &p.penalty_diag),
        imbalance: (&p.moments * &w - &p.target).norm(),
        intercept: None,
        weights,
    })
}
