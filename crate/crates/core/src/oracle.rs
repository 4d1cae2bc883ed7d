//! Infeasible benchmarks that know the factor structure: the sequential
//! exact-balance estimator, the joint weighted regression it reproduces, the
//! affine-hull identification check, and factor-strength diagnostics.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{min_norm_lstsq, singular_values};
use crate::panel::{Adoption, CohortPanel};
use crate::sequential::{run_engine, CellEstimate, EstimateGrid, EstimatorKind, Schedule, WeightRule};

/// Known loadings (one row per panel series) and factors (one row per period).
#[derive(Debug, Clone, PartialEq)]
pub struct FactorStructure {
    pub theta: DMatrix<f64>,
    pub psi: DMatrix<f64>,
}

impl FactorStructure {
    pub fn new(theta: DMatrix<f64>, psi: DMatrix<f64>) -> Result<Self> {
        if theta.ncols() != psi.ncols() {
            return Err(Error::FactorMismatch(format!(
                "loadings have {} columns, factors have {}",
                theta.ncols(),
                psi.ncols()
            )));
        }
        if theta.iter().chain(psi.iter()).any(|v| !v.is_finite()) {
            return Err(Error::FactorMismatch("non-finite factor value".into()));
        }
        Ok(Self { theta, psi })
    }

    /// Rank-zero structure for a panel (pure two-way model).
    pub fn zero(n_rows: usize, periods: u32) -> Self {
        Self { theta: DMatrix::zeros(n_rows, 0), psi: DMatrix::zeros(periods as usize, 0) }
    }

    pub fn rank(&self) -> usize {
        self.theta.ncols()
    }

    pub fn check_dims(&self, panel: &CohortPanel) -> Result<()> {
        if self.theta.nrows() != panel.n_rows() || self.psi.nrows() != panel.periods() as usize {
            return Err(Error::FactorMismatch(format!(
                "factors cover {} series x {} periods, panel has {} x {}",
                self.theta.nrows(),
                self.psi.nrows(),
                panel.n_rows(),
                panel.periods()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleConfig {
    pub a_star: u32,
    pub t_star: u32,
}

impl OracleConfig {
    pub fn validate(&self, periods: u32) -> Result<()> {
        if self.t_star < 2 || self.t_star > self.a_star || self.a_star > periods {
            return Err(Error::InvalidConfig(format!(
                "need 2 <= t* <= a* <= T, got t* = {}, a* = {}, T = {periods}",
                self.t_star, self.a_star
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineHullReport {
    pub holds: bool,
    pub rank: usize,
    pub loadings_rank: usize,
    pub factors_rank: usize,
    /// Number of control loadings (series adopting after a*) and pre-periods (before t*).
    pub n_loadings: usize,
    pub n_factors: usize,
    pub loadings_singular_values: Vec<f64>,
    pub factors_singular_values: Vec<f64>,
}

impl AffineHullReport {
    pub fn loadings_gap(&self) -> usize {
        self.rank.saturating_sub(self.loadings_rank)
    }

    pub fn factors_gap(&self) -> usize {
        self.rank.saturating_sub(self.factors_rank)
    }

    pub fn into_result(self) -> Result<Self> {
        if self.holds {
            Ok(self)
        } else {
            Err(Error::AffineHull {
                loadings_ok: self.loadings_gap() == 0,
                factors_ok: self.factors_gap() == 0,
                loadings_rank: self.loadings_rank,
                factors_rank: self.factors_rank,
                rank: self.rank,
            })
        }
    }
}

/// Relative singular-value tolerance for rank decisions.
pub const RANK_TOL: f64 = 1e-8;

fn demeaned(rows: &[DVector<f64>], r: usize) -> DMatrix<f64> {
    let n = rows.len();
    let mut m = DMatrix::zeros(n, r);
    if n == 0 {
        return m;
    }
    let mean = rows.iter().fold(DVector::zeros(r), |acc, v| acc + v) / n as f64;
    for (i, v) in rows.iter().enumerate() {
        m.row_mut(i).copy_from(&(v - &mean).transpose());
    }
    m
}

fn hull_rank(rows: &[DVector<f64>], r: usize) -> (usize, Vec<f64>) {
    let scale = rows.iter().fold(1.0f64, |m, v| m.max(v.norm()));
    let sv = singular_values(&demeaned(rows, r));
    let rank = sv.iter().filter(|&&s| s > RANK_TOL * scale).count();
    (rank, sv)
}

/// Whether the demeaned loadings of series adopting after a* and the demeaned
/// factors of periods before t* both have full rank r.
pub fn check_affine_hull(f: &FactorStructure, panel: &CohortPanel, cfg: &OracleConfig) -> Result<AffineHullReport> {
    f.check_dims(panel)?;
    let r = f.rank();
    let loadings: Vec<DVector<f64>> = (0..panel.n_rows())
        .filter(|&j| panel.row(j).adoption.is_after(cfg.a_star))
        .map(|j| f.theta.row(j).transpose())
        .collect();
    let n_pre = (cfg.t_star.saturating_sub(1) as usize).min(f.psi.nrows());
    let factors: Vec<DVector<f64>> = (0..n_pre).map(|l| f.psi.row(l).transpose()).collect();
    let (loadings_rank, loadings_singular_values) = hull_rank(&loadings, r);
    let (factors_rank, factors_singular_values) = hull_rank(&factors, r);
    Ok(AffineHullReport {
        holds: r == 0 || (loadings_rank == r && factors_rank == r),
        rank: r,
        loadings_rank,
        factors_rank,
        n_loadings: loadings.len(),
        n_factors: factors.len(),
        loadings_singular_values,
        factors_singular_values,
    })
}

/// The widest identification range: the largest a* and then the smallest
/// t* >= 2 for which the affine-hull condition holds and at least one cohort
/// adopts in [t*, a*], if any.
pub fn tightest_config(f: &FactorStructure, panel: &CohortPanel) -> Result<Option<OracleConfig>> {
    f.check_dims(panel)?;
    let periods = panel.periods();
    for a_star in (2..=periods).rev() {
        // need at least one control and one treated cohort at or before a*
        if !(0..panel.n_rows()).any(|j| panel.row(j).adoption.is_after(a_star)) {
            continue;
        }
        let probe = OracleConfig { a_star, t_star: a_star };
        if !check_affine_hull(f, panel, &probe)?.holds {
            continue;
        }
        for t_star in 2..=a_star {
            let cfg = OracleConfig { a_star, t_star };
            if check_affine_hull(f, panel, &cfg)?.holds {
                // t* only grows from here, so a cohort in range must exist now.
                let treated = (0..panel.n_rows())
                    .any(|j| matches!(panel.row(j).adoption, Adoption::At(a) if a >= t_star && a <= a_star));
                if treated {
                    return Ok(Some(cfg));
                }
                break;
            }
        }
    }
    Ok(None)
}

/// `(k, rows)` pairs for k = 0..a*−t*, rows with adoption in [t*, a*−k].
fn oracle_schedule(panel: &CohortPanel, cfg: &OracleConfig) -> Schedule {
    (0..=cfg.a_star - cfg.t_star)
        .map(|k| {
            let rows = (0..panel.n_rows())
                .filter(|&r| {
                    matches!(panel.row(r).adoption, Adoption::At(a) if a >= cfg.t_star && a + k <= cfg.a_star)
                })
                .collect::<Vec<_>>();
            (k, rows)
        })
        .filter(|(_, rows)| !rows.is_empty())
        .collect()
}

// Horizon aggregates with share weights renormalized over the series present
// at each horizon (later cohorts drop out of the identified range first).
fn finish_grid(
    kind: EstimatorKind,
    panel: &CohortPanel,
    schedule: &Schedule,
    cells: Vec<CellEstimate>,
    imputed_panel: CohortPanel,
) -> EstimateGrid {
    let mut horizons = Vec::new();
    let mut tau_by_horizon = Vec::new();
    for (k, rows) in schedule {
        let total: f64 = rows.iter().map(|&r| panel.row(r).share).sum();
        let tau: f64 = cells
            .iter()
            .filter(|c| c.k == *k)
            .map(|c| panel.row(c.row).share / total * c.tau_hat)
            .sum();
        horizons.push(*k);
        tau_by_horizon.push(tau);
    }
    let targets = schedule.first().map(|(_, rows)| rows.clone()).unwrap_or_default();
    let total: f64 = targets.iter().map(|&r| panel.row(r).share).sum();
    let mu = targets.iter().map(|&r| panel.row(r).share / total).collect();
    EstimateGrid { kind, eta: None, cells, horizons, tau_by_horizon, targets, mu, imputed_panel }
}

fn checked_schedule(panel: &CohortPanel, f: &FactorStructure, cfg: &OracleConfig) -> Result<Schedule> {
    cfg.validate(panel.periods())?;
    check_affine_hull(f, panel, cfg)?.into_result()?;
    let schedule = oracle_schedule(panel, cfg);
    if schedule.is_empty() {
        return Err(Error::EmptyCohortRange { a_min: cfg.t_star, a_max: cfg.a_star });
    }
    Ok(schedule)
}

/// Sequential exact-balance estimator with known factors.
pub fn run_sequential_ols(panel: &CohortPanel, f: &FactorStructure, cfg: &OracleConfig) -> Result<EstimateGrid> {
    let schedule = checked_schedule(panel, f, cfg)?;
    let (cells, imputed) = run_engine(panel, &schedule, WeightRule::Exact(f), false)?;
    Ok(finish_grid(EstimatorKind::SeqOls, panel, &schedule, cells, imputed))
}

/// Stacked, √π-weighted design of the joint regression with series and
/// period effects, loadings × period coefficients, factors × series
/// coefficients and one dummy per treated cell.
#[derive(Debug, Clone)]
pub struct JointOlsDesign {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    /// `(row, k, column)` of every treated-cell dummy.
    pub tau_columns: Vec<(usize, u32, usize)>,
}

impl JointOlsDesign {
    pub fn build(panel: &CohortPanel, f: &FactorStructure) -> Result<Self> {
        f.check_dims(panel)?;
        let n = panel.n_rows();
        let t = panel.periods() as usize;
        let r = f.rank();
        let mut tau_columns = Vec::new();
        let base = n + t + t * r + n * r;
        for row in 0..n {
            if let Adoption::At(a) = panel.row(row).adoption {
                for p in (a as usize)..=t {
                    tau_columns.push((row, p as u32 - a, base + tau_columns.len()));
                }
            }
        }
        let ncols = base + tau_columns.len();
        let mut x = DMatrix::zeros(n * t, ncols);
        let mut y = DVector::zeros(n * t);
        for row in 0..n {
            let w = panel.row(row).share.sqrt();
            for p in 0..t {
                let obs = row * t + p;
                y[obs] = w * panel.y()[(row, p)];
                x[(obs, row)] = w;
                x[(obs, n + p)] = w;
                for q in 0..r {
                    x[(obs, n + t + p * r + q)] = w * f.theta[(row, q)];
                    x[(obs, n + t + t * r + row * r + q)] = w * f.psi[(p, q)];
                }
            }
        }
        for &(row, k, col) in &tau_columns {
            let a = panel.row(row).adoption.period().unwrap();
            x[(row * t + (a + k - 1) as usize, col)] = panel.row(row).share.sqrt();
        }
        Ok(Self { x, y, tau_columns })
    }

    /// Treated-cell coefficients of the minimum-norm least-squares fit,
    /// aligned with `tau_columns`. `column_order` permutes the design columns
    /// before solving.
    pub fn solve_tau(&self, column_order: Option<&[usize]>) -> Result<Vec<f64>> {
        let ncols = self.x.ncols();
        let order: Vec<usize> = match column_order {
            Some(o) => o.to_vec(),
            None => (0..ncols).collect(),
        };
        let mut sorted = order.clone();
        sorted.sort_unstable();
        if sorted != (0..ncols).collect::<Vec<_>>() {
            return Err(Error::InvalidConfig("column order is not a permutation".into()));
        }
        let xp = DMatrix::from_fn(self.x.nrows(), ncols, |i, j| self.x[(i, order[j])]);
        let beta = min_norm_lstsq(&xp, &self.y, 1e-10)?;
        let mut position = vec![0; ncols];
        for (j, &c) in order.iter().enumerate() {
            position[c] = j;
        }
        Ok(self.tau_columns.iter().map(|&(_, _, c)| beta[position[c]]).collect())
    }
}

/// The joint regression, reported on the same identified cells as
/// [`run_sequential_ols`].
pub fn run_joint_ols(panel: &CohortPanel, f: &FactorStructure, cfg: &OracleConfig) -> Result<EstimateGrid> {
    let schedule = checked_schedule(panel, f, cfg)?;
    let design = JointOlsDesign::build(panel, f)?;
    let tau = design.solve_tau(None)?;
    let mut imputed = panel.clone();
    let mut cells = Vec::new();
    for (k, rows) in &schedule {
        for &row in rows {
            let i = design
                .tau_columns
                .iter()
                .position(|&(r, kk, _)| r == row && kk == *k)
                .expect("identified cells are treated cells");
            let a = panel.row(row).adoption.period().unwrap();
            imputed.y_mut()[(row, (a + k - 1) as usize)] -= tau[i];
            cells.push(CellEstimate {
                row,
                label: panel.row(row).label.clone(),
                a,
                k: *k,
                tau_hat: tau[i],
                omega: None,
                lambda: None,
                controls: Vec::new(),
            });
        }
    }
    Ok(finish_grid(EstimatorKind::JointOls, panel, &schedule, cells, imputed))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorDiagnostics {
    /// `(θ_j − θ̄)ᵀ(ψ_l − ψ̄)` over controls j (rows) and pre-periods l (columns).
    pub l_matrix: DMatrix<f64>,
    /// Smallest nonzero singular value of `l_matrix`; 0 when there is none.
    pub sigma_tilde: f64,
    pub no_factors: bool,
    /// `σ̃·√n`, which should grow with n for strong factors.
    pub scaled_sigma: f64,
}

/// Demeaned interactive-effects matrix of cell `(a, k)` for series `row`.
pub fn factor_diagnostics(f: &FactorStructure, panel: &CohortPanel, row: usize, k: u32) -> Result<FactorDiagnostics> {
    f.check_dims(panel)?;
    let a = panel
        .row(row)
        .adoption
        .period()
        .ok_or_else(|| Error::InvalidConfig("never-treated series have no cells".into()))?;
    if a + k > panel.periods() || a < 2 {
        return Err(Error::InvalidConfig(format!("cell ({a}, {k}) is outside the panel")));
    }
    let r = f.rank();
    let controls: Vec<DVector<f64>> = (0..panel.n_rows())
        .filter(|&j| panel.row(j).adoption.is_after(a))
        .map(|j| f.theta.row(j).transpose())
        .collect();
    let pre: Vec<DVector<f64>> = (0..(a + k - 1) as usize).map(|l| f.psi.row(l).transpose()).collect();
    let l_matrix = demeaned(&controls, r) * demeaned(&pre, r).transpose();
    let sv = singular_values(&l_matrix);
    let smax = sv.first().copied().unwrap_or(0.0);
    let sigma_tilde = sv.iter().copied().filter(|&s| s > 1e-10 * smax.max(1.0)).next_back().unwrap_or(0.0);
    Ok(FactorDiagnostics {
        l_matrix,
        sigma_tilde,
        no_factors: sigma_tilde == 0.0,
        scaled_sigma: sigma_tilde * (panel.n_units() as f64).sqrt(),
    })
}
