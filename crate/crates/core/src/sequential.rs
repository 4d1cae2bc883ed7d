//! The sequential estimator: horizons in the outer loop, cohorts in the inner
//! loop, each cell estimated by a weighted double difference and then imputed
//! so later cells can use it as untreated data.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::balancing::{
    solve_exact_balance, solve_ridge_balance, Eta, ExactBalanceProblem, RidgeBalanceProblem,
    WeightSolution,
};
use crate::error::{Error, Result};
use crate::oracle::FactorStructure;
use crate::panel::{Adoption, CohortPanel, ValidatedPanel};

/// Regularization choice before resolution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EtaChoice {
    /// Resolved once from the data by [`default_eta_rows`] / [`default_eta_units`].
    Auto,
    Inf,
    Value(f64),
}

impl EtaChoice {
    pub fn parse(raw: &str) -> Result<Self> {
        let s = raw.trim();
        if s.eq_ignore_ascii_case("auto") {
            return Ok(EtaChoice::Auto);
        }
        if s.eq_ignore_ascii_case("inf") || s.eq_ignore_ascii_case("infinity") {
            return Ok(EtaChoice::Inf);
        }
        match s.parse::<f64>() {
            Ok(v) if v.is_finite() && v > 0.0 => Ok(EtaChoice::Value(v)),
            _ => Err(Error::Parse {
                what: "eta".into(),
                message: format!("expected `auto`, `inf` or a positive number, got `{raw}`"),
            }),
        }
    }
}

/// Horizon aggregation weights over the estimated series.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mu {
    /// Proportional to the series' shares.
    #[default]
    Shares,
    /// Explicit weights keyed by series label (the adoption time for cohort rows).
    Custom(Vec<(String, f64)>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EstimatorKind {
    #[serde(rename = "SSDID")]
    Ssdid,
    #[serde(rename = "SEQ_DID")]
    SeqDid,
    #[serde(rename = "SEQ_OLS")]
    SeqOls,
    #[serde(rename = "JOINT_OLS")]
    JointOls,
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EstimatorKind::Ssdid => "SSDID",
            EstimatorKind::SeqDid => "SEQ_DID",
            EstimatorKind::SeqOls => "SEQ_OLS",
            EstimatorKind::JointOls => "JOINT_OLS",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SsdidConfig {
    pub a_min: u32,
    pub a_max: u32,
    pub k_max: u32,
    pub eta: EtaChoice,
    pub mu: Mu,
    /// Estimate all series sharing an adoption time against the same working
    /// panel and impute them together.
    pub preaggregated_parallel: bool,
}

impl SsdidConfig {
    pub fn new(a_min: u32, a_max: u32, k_max: u32) -> Self {
        Self { a_min, a_max, k_max, eta: EtaChoice::Auto, mu: Mu::Shares, preaggregated_parallel: false }
    }

    pub fn with_eta(mut self, eta: EtaChoice) -> Self {
        self.eta = eta;
        self
    }

    pub fn validate(&self, periods: u32) -> Result<()> {
        if self.a_min < 2 {
            return Err(Error::InvalidConfig(format!(
                "a_min = {} leaves no pre-treatment period",
                self.a_min
            )));
        }
        if self.a_min > self.a_max {
            return Err(Error::InvalidConfig(format!(
                "a_min = {} exceeds a_max = {}",
                self.a_min, self.a_max
            )));
        }
        if self.a_max + self.k_max > periods {
            return Err(Error::HorizonOverflow { a_max: self.a_max, k_max: self.k_max, periods });
        }
        if let EtaChoice::Value(v) = self.eta {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidConfig(format!("eta must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellEstimate {
    /// Series index in the panel.
    pub row: usize,
    pub label: String,
    pub a: u32,
    pub k: u32,
    pub tau_hat: f64,
    /// Weights of the double difference; absent for the joint regression.
    pub omega: Option<WeightSolution>,
    pub lambda: Option<WeightSolution>,
    /// Series used as controls, in panel order.
    pub controls: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimateGrid {
    pub kind: EstimatorKind,
    /// Regularization actually used; `None` for the oracle estimators.
    pub eta: Option<Eta>,
    /// Cells in estimation order (k outer, series inner).
    pub cells: Vec<CellEstimate>,
    pub horizons: Vec<u32>,
    pub tau_by_horizon: Vec<f64>,
    /// Estimated series and their aggregation weights.
    pub targets: Vec<usize>,
    pub mu: Vec<f64>,
    pub imputed_panel: CohortPanel,
}

impl EstimateGrid {
    pub fn cell(&self, row: usize, k: u32) -> Option<&CellEstimate> {
        self.cells.iter().find(|c| c.row == row && c.k == k)
    }

    pub fn cell_by_label(&self, label: &str, k: u32) -> Option<&CellEstimate> {
        self.cells.iter().find(|c| c.label == label && c.k == k)
    }

    pub fn tau_k(&self, k: u32) -> Option<f64> {
        self.horizons.iter().position(|&h| h == k).map(|i| self.tau_by_horizon[i])
    }

    /// Cells sorted by (a, label, k), the order used in output files.
    pub fn sorted_cells(&self) -> Vec<&CellEstimate> {
        let mut out: Vec<&CellEstimate> = self.cells.iter().collect();
        out.sort_by(|x, y| (x.a, &x.label, x.k).cmp(&(y.a, &y.label, y.k)));
        out
    }
}

/// How the two weight vectors of a cell are obtained.
#[derive(Debug, Clone, Copy)]
pub(crate) enum WeightRule<'a> {
    Ridge(Eta),
    Exact(&'a FactorStructure),
}

/// Loop schedule: for each horizon, the series estimated at that horizon.
pub(crate) type Schedule = Vec<(u32, Vec<usize>)>;

/// Runs the double loop and returns the cells plus the imputed panel.
pub(crate) fn run_engine(
    panel: &CohortPanel,
    schedule: &Schedule,
    rule: WeightRule<'_>,
    parallel: bool,
) -> Result<(Vec<CellEstimate>, CohortPanel)> {
    let n_rows = panel.n_rows();
    let t = panel.periods() as usize;
    let mut working = panel.clone();
    // imputed[r][p]: treated cell (r, p) has been replaced by its counterfactual
    let mut imputed = vec![vec![false; t]; n_rows];
    let mut cells = Vec::new();

    for (k, rows) in schedule {
        let k = *k;
        let mut i = 0;
        while i < rows.len() {
            // rows sharing an adoption time form one step in parallel mode
            let a = finite_adoption(panel, rows[i]);
            let mut end = i + 1;
            if parallel {
                while end < rows.len() && finite_adoption(panel, rows[end]) == a {
                    end += 1;
                }
            }
            let mut step = Vec::with_capacity(end - i);
            for &row in &rows[i..end] {
                let controls = usable_controls(panel, &imputed, a, a + k);
                if controls.is_empty() {
                    return Err(Error::NoControls { adoption: a });
                }
                step.push(cell_with_controls(&working, row, a, k, controls, rule)?);
                if !parallel {
                    impute(&mut working, &mut imputed, step.last().unwrap());
                }
            }
            if parallel {
                for cell in &step {
                    impute(&mut working, &mut imputed, cell);
                }
            }
            cells.extend(step);
            i = end;
        }
    }
    Ok((cells, working))
}

fn finite_adoption(panel: &CohortPanel, row: usize) -> u32 {
    panel.row(row).adoption.period().expect("schedule contains only treated series")
}

fn impute(working: &mut CohortPanel, imputed: &mut [Vec<bool>], cell: &CellEstimate) {
    let p = (cell.a + cell.k - 1) as usize;
    working.y_mut()[(cell.row, p)] -= cell.tau_hat;
    imputed[cell.row][p] = true;
}

// Series with adoption after `a` whose observed path through `last` is
// untreated or already imputed.
fn usable_controls(panel: &CohortPanel, imputed: &[Vec<bool>], a: u32, last: u32) -> Vec<usize> {
    (0..panel.n_rows())
        .filter(|&j| {
            let adoption = panel.row(j).adoption;
            if !adoption.is_after(a) {
                return false;
            }
            match adoption {
                Adoption::Never => true,
                Adoption::At(aj) => (aj..=last).all(|p| imputed[j][(p - 1) as usize]),
            }
        })
        .collect()
}

/// Estimates cell `(a, k)` of series `row` on a working panel that already
/// holds the imputed values of all earlier cells, using every series adopted
/// after `a` as a control.
pub fn estimate_cell(working: &CohortPanel, row: usize, k: u32, eta: Eta) -> Result<CellEstimate> {
    let a = working
        .row(row)
        .adoption
        .period()
        .ok_or_else(|| Error::InvalidConfig("never-treated series have no effects".into()))?;
    if a < 2 || a + k > working.periods() {
        return Err(Error::InvalidConfig(format!("cell ({a}, {k}) is outside the panel")));
    }
    let controls: Vec<usize> =
        (0..working.n_rows()).filter(|&j| working.row(j).adoption.is_after(a)).collect();
    if controls.is_empty() {
        return Err(Error::NoControls { adoption: a });
    }
    cell_with_controls(working, row, a, k, controls, WeightRule::Ridge(eta))
}

fn cell_with_controls(
    working: &CohortPanel,
    row: usize,
    a: u32,
    k: u32,
    controls: Vec<usize>,
    rule: WeightRule<'_>,
) -> Result<CellEstimate> {
    let y = working.y();
    let post = (a + k - 1) as usize; // 0-based column of period a+k
    let n_pre = post; // periods 1..a+k-1
    let nj = controls.len();

    let (omega, lambda) = match rule {
        WeightRule::Ridge(eta) => {
            let pi: Vec<f64> = controls.iter().map(|&j| working.row(j).share).collect();
            let omega = solve_ridge_balance(&RidgeBalanceProblem {
                predictors: DMatrix::from_fn(n_pre, nj, |l, c| y[(controls[c], l)]),
                target: DVector::from_fn(n_pre, |l, _| y[(row, l)]),
                penalty_diag: DVector::from_iterator(nj, pi.iter().map(|p| 1.0 / p)),
                eta,
            })?;
            let lambda = solve_ridge_balance(&RidgeBalanceProblem {
                predictors: DMatrix::from_fn(nj, n_pre, |c, l| y[(controls[c], l)]),
                target: DVector::from_fn(nj, |c, _| y[(controls[c], post)]),
                penalty_diag: DVector::from_element(n_pre, 1.0),
                eta,
            })?;
            (omega, lambda)
        }
        WeightRule::Exact(f) => {
            let r = f.rank();
            let omega = solve_exact_balance(&ExactBalanceProblem {
                moments: DMatrix::from_fn(r + 1, nj, |q, c| {
                    if q == 0 {
                        1.0
                    } else {
                        f.theta[(controls[c], q - 1)]
                    }
                }),
                target: DVector::from_fn(r + 1, |q, _| if q == 0 { 1.0 } else { f.theta[(row, q - 1)] }),
                penalty_diag: DVector::from_iterator(
                    nj,
                    controls.iter().map(|&j| 1.0 / working.row(j).share),
                ),
            })?;
            let lambda = solve_exact_balance(&ExactBalanceProblem {
                moments: DMatrix::from_fn(r + 1, n_pre, |q, l| if q == 0 { 1.0 } else { f.psi[(l, q - 1)] }),
                target: DVector::from_fn(r + 1, |q, _| if q == 0 { 1.0 } else { f.psi[(post, q - 1)] }),
                penalty_diag: DVector::from_element(n_pre, 1.0),
            })?;
            (omega, lambda)
        }
    };

    let synth = |p: usize| -> f64 { controls.iter().zip(&omega.weights).map(|(&j, w)| w * y[(j, p)]).sum() };
    let post_gap = y[(row, post)] - synth(post);
    let pre_gap: f64 = (0..n_pre).map(|l| lambda.weights[l] * (y[(row, l)] - synth(l))).sum();
    let tau_hat = post_gap - pre_gap;

    Ok(CellEstimate {
        row,
        label: working.row(row).label.clone(),
        a,
        k,
        tau_hat,
        omega: Some(omega),
        lambda: Some(lambda),
        controls,
    })
}

/// Series estimated by a configuration: finite adoption within `[a_min, a_max]`.
pub fn target_rows(panel: &CohortPanel, cfg: &SsdidConfig) -> Result<Vec<usize>> {
    let rows: Vec<usize> = (0..panel.n_rows())
        .filter(|&r| matches!(panel.row(r).adoption, Adoption::At(a) if a >= cfg.a_min && a <= cfg.a_max))
        .collect();
    if rows.is_empty() {
        return Err(Error::EmptyCohortRange { a_min: cfg.a_min, a_max: cfg.a_max });
    }
    Ok(rows)
}

/// Resolves `mu` to weights aligned with `targets`.
pub fn resolve_mu(panel: &CohortPanel, targets: &[usize], mu: &Mu) -> Result<Vec<f64>> {
    let weights: Vec<f64> = match mu {
        Mu::Shares => {
            let total: f64 = targets.iter().map(|&r| panel.row(r).share).sum();
            targets.iter().map(|&r| panel.row(r).share / total).collect()
        }
        Mu::Custom(pairs) => {
            for (label, _) in pairs {
                if !targets.iter().any(|&r| &panel.row(r).label == label) {
                    return Err(Error::InvalidConfig(format!(
                        "aggregation weight given for `{label}`, which is not an estimated series"
                    )));
                }
            }
            targets
                .iter()
                .map(|&r| {
                    let label = &panel.row(r).label;
                    pairs.iter().find(|(l, _)| l == label).map(|(_, w)| *w).ok_or_else(|| {
                        Error::InvalidConfig(format!("no aggregation weight for series `{label}`"))
                    })
                })
                .collect::<Result<_>>()?
        }
    };
    let sum: f64 = weights.iter().sum();
    if !((sum - 1.0).abs() <= 1e-10) || weights.iter().any(|w| !w.is_finite()) {
        return Err(Error::WeightSumViolation { sum });
    }
    Ok(weights)
}

/// `τ̂_k = Σ_a μ_a τ̂_{a,k}` for every horizon of the grid; `mu` is aligned
/// with `grid.targets`.
pub fn aggregate_horizon(grid: &EstimateGrid, mu: &[f64]) -> Result<Vec<f64>> {
    if mu.len() != grid.targets.len() {
        return Err(Error::InvalidConfig(format!(
            "{} aggregation weights for {} series",
            mu.len(),
            grid.targets.len()
        )));
    }
    let sum: f64 = mu.iter().sum();
    if !((sum - 1.0).abs() <= 1e-10) {
        return Err(Error::WeightSumViolation { sum });
    }
    grid.horizons
        .iter()
        .map(|&k| {
            grid.targets
                .iter()
                .zip(mu)
                .map(|(&row, w)| {
                    grid.cell(row, k)
                        .map(|c| w * c.tau_hat)
                        .ok_or_else(|| Error::InvalidConfig(format!("grid lacks cell for series {row} at k = {k}")))
                })
                .sum()
        })
        .collect()
}

/// Resolves an `EtaChoice` for a cohort panel.
pub fn resolve_eta_rows(panel: &CohortPanel, choice: EtaChoice) -> Result<Eta> {
    Ok(match choice {
        EtaChoice::Inf => Eta::Inf,
        EtaChoice::Value(v) => Eta::Finite(v),
        EtaChoice::Auto => Eta::Finite(default_eta_rows(panel)?),
    })
}

/// Runs the sequential estimator over the configured cohort range.
pub fn run_sequential(panel: &CohortPanel, cfg: &SsdidConfig) -> Result<EstimateGrid> {
    cfg.validate(panel.periods())?;
    let eta = resolve_eta_rows(panel, cfg.eta)?;
    run_sequential_with_eta(panel, cfg, eta)
}

/// As [`run_sequential`] with the regularization already resolved (the
/// bootstrap keeps the point estimate's η fixed across replicates).
pub fn run_sequential_with_eta(panel: &CohortPanel, cfg: &SsdidConfig, eta: Eta) -> Result<EstimateGrid> {
    cfg.validate(panel.periods())?;
    let targets = target_rows(panel, cfg)?;
    let mu = resolve_mu(panel, &targets, &cfg.mu)?;
    let schedule: Schedule = (0..=cfg.k_max).map(|k| (k, targets.clone())).collect();
    let (cells, imputed_panel) = run_engine(panel, &schedule, WeightRule::Ridge(eta), cfg.preaggregated_parallel)?;
    let kind = match eta {
        Eta::Inf => EstimatorKind::SeqDid,
        Eta::Finite(_) => EstimatorKind::Ssdid,
    };
    let mut grid = EstimateGrid {
        kind,
        eta: Some(eta),
        cells,
        horizons: (0..=cfg.k_max).collect(),
        tau_by_horizon: Vec::new(),
        targets,
        mu,
        imputed_panel,
    };
    grid.tau_by_horizon = aggregate_horizon(&grid, &grid.mu)?;
    Ok(grid)
}

/// Floor applied when the two-way fit leaves no residual.
pub const ETA_FLOOR: f64 = 1e-12;

struct TwoWayCell {
    row: usize,
    col: usize,
    y: f64,
}

// Additive row + column fit on an incomplete grid by alternating means.
// Returns the residuals in input order.
fn two_way_residuals(cells: &[TwoWayCell], n_rows: usize, n_cols: usize) -> Vec<f64> {
    let scale = cells.iter().fold(0.0f64, |m, c| m.max(c.y.abs())).max(1.0);
    let mut alpha = vec![0.0; n_rows];
    let mut beta = vec![0.0; n_cols];
    let mut row_n = vec![0usize; n_rows];
    let mut col_n = vec![0usize; n_cols];
    for c in cells {
        row_n[c.row] += 1;
        col_n[c.col] += 1;
    }
    for _ in 0..100_000 {
        let mut row_sum = vec![0.0; n_rows];
        for c in cells {
            row_sum[c.row] += c.y - beta[c.col];
        }
        let mut delta = 0.0f64;
        for r in 0..n_rows {
            if row_n[r] > 0 {
                let v = row_sum[r] / row_n[r] as f64;
                delta = delta.max((v - alpha[r]).abs());
                alpha[r] = v;
            }
        }
        let mut col_sum = vec![0.0; n_cols];
        for c in cells {
            col_sum[c.col] += c.y - alpha[c.row];
        }
        for p in 0..n_cols {
            if col_n[p] > 0 {
                let v = col_sum[p] / col_n[p] as f64;
                delta = delta.max((v - beta[p]).abs());
                beta[p] = v;
            }
        }
        if delta <= 1e-12 * scale {
            break;
        }
    }
    cells.iter().map(|c| c.y - alpha[c.row] - beta[c.col]).collect()
}

fn eta_from_sigma2(sigma2: f64, n: usize) -> f64 {
    let eta = sigma2.sqrt() / (n as f64).powf(0.45);
    if eta > ETA_FLOOR {
        eta
    } else {
        log::warn!("two-way fit on untreated cells is exact; flooring eta at {ETA_FLOOR:e}");
        ETA_FLOOR
    }
}

/// `σ̂ / n^0.45`, with `σ̂²` the mean squared residual of a unit + period fixed
/// effects fit on untreated unit-periods and `n` the number of units.
pub fn default_eta_units(panel: &ValidatedPanel) -> Result<f64> {
    let mut cells = Vec::new();
    for (i, u) in panel.units().iter().enumerate() {
        for (p, &y) in u.outcomes.iter().enumerate() {
            if u.adoption.untreated_at(p as u32 + 1) {
                cells.push(TwoWayCell { row: i, col: p, y });
            }
        }
    }
    if cells.is_empty() {
        return Err(Error::NoUntreatedCells);
    }
    let resid = two_way_residuals(&cells, panel.n_units(), panel.periods() as usize);
    let sigma2 = resid.iter().map(|e| e * e).sum::<f64>() / resid.len() as f64;
    Ok(eta_from_sigma2(sigma2, panel.n_units()))
}

/// Cohort-level analogue of [`default_eta_units`]: a series averaging `n_r`
/// units has noise variance `σ²/n_r`, so squared residuals are scaled by the
/// series' unit count before averaging.
pub fn default_eta_rows(panel: &CohortPanel) -> Result<f64> {
    let mut cells = Vec::new();
    for r in 0..panel.n_rows() {
        let adoption = panel.row(r).adoption;
        for p in 0..panel.periods() as usize {
            if adoption.untreated_at(p as u32 + 1) {
                cells.push(TwoWayCell { row: r, col: p, y: panel.y()[(r, p)] });
            }
        }
    }
    if cells.is_empty() {
        return Err(Error::NoUntreatedCells);
    }
    let resid = two_way_residuals(&cells, panel.n_rows(), panel.periods() as usize);
    let sigma2 = cells
        .iter()
        .zip(&resid)
        .map(|(c, e)| panel.row(c.row).n_units.max(1) as f64 * e * e)
        .sum::<f64>()
        / resid.len() as f64;
    Ok(eta_from_sigma2(sigma2, panel.n_units().max(1)))
}
