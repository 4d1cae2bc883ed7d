//! Bayesian-bootstrap standard errors and confidence intervals.
//!
//! Each replicate draws one Exp(1) weight per unit (or per series when the
//! data is already aggregated), rebuilds the weighted cohort means and shares,
//! reruns the estimator with the point estimate's η, and records every cell
//! and horizon target.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::balancing::Eta;
use crate::error::{Error, Result};
use crate::oracle::{run_sequential_ols, FactorStructure, OracleConfig};
use crate::panel::{CohortPanel, CovariateScheme, RowLayout, ValidatedPanel};
use crate::sequential::{
    default_eta_rows, default_eta_units, run_sequential_with_eta, EstimateGrid, EtaChoice, SsdidConfig,
};

/// How units are grouped into series.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayoutSpec {
    Scheme(CovariateScheme),
    /// One series per unit (already-aggregated units such as states).
    PerUnit,
}

impl LayoutSpec {
    pub fn build(&self, panel: &ValidatedPanel) -> Result<RowLayout> {
        match self {
            LayoutSpec::Scheme(s) => RowLayout::from_scheme(panel, *s),
            LayoutSpec::PerUnit => Ok(RowLayout::per_unit(panel)),
        }
    }
}

/// Data the bootstrap resamples from.
#[derive(Debug, Clone)]
pub enum PanelSource {
    Units { panel: ValidatedPanel, layout: LayoutSpec },
    Rows(CohortPanel),
}

impl PanelSource {
    pub fn cohort_panel(&self) -> Result<CohortPanel> {
        match self {
            PanelSource::Units { panel, layout } => layout.build(panel)?.aggregate(panel),
            PanelSource::Rows(p) => Ok(p.clone()),
        }
    }

    pub fn periods(&self) -> u32 {
        match self {
            PanelSource::Units { panel, .. } => panel.periods(),
            PanelSource::Rows(p) => p.periods(),
        }
    }

    /// Resolves η from the finest data available.
    pub fn resolve_eta(&self, choice: EtaChoice) -> Result<Eta> {
        Ok(match choice {
            EtaChoice::Inf => Eta::Inf,
            EtaChoice::Value(v) => Eta::Finite(v),
            EtaChoice::Auto => Eta::Finite(match self {
                PanelSource::Units { panel, .. } => default_eta_units(panel)?,
                PanelSource::Rows(p) => default_eta_rows(p)?,
            }),
        })
    }

    /// Backdates all finite adoption times.
    pub fn shift_adoption(&self, shift: u32) -> Result<PanelSource> {
        Ok(match self {
            PanelSource::Units { panel, layout } => {
                PanelSource::Units { panel: panel.shift_adoption(shift)?, layout: *layout }
            }
            PanelSource::Rows(p) => PanelSource::Rows(p.shift_adoption(shift)?),
        })
    }
}

/// The estimator rerun on every replicate.
#[derive(Debug, Clone)]
pub enum EstimatorSpec {
    Sequential(SsdidConfig),
    SequentialOls { factors: FactorStructure, oracle: OracleConfig },
}

impl EstimatorSpec {
    fn run(&self, panel: &CohortPanel, eta: Option<Eta>) -> Result<EstimateGrid> {
        match self {
            EstimatorSpec::Sequential(cfg) => {
                run_sequential_with_eta(panel, cfg, eta.expect("η is resolved before the loop"))
            }
            EstimatorSpec::SequentialOls { factors, oracle } => run_sequential_ols(panel, factors, oracle),
        }
    }

    fn resolve_eta(&self, source: &PanelSource) -> Result<Option<Eta>> {
        match self {
            EstimatorSpec::Sequential(cfg) => {
                cfg.validate(source.periods())?;
                source.resolve_eta(cfg.eta).map(Some)
            }
            EstimatorSpec::SequentialOls { .. } => Ok(None),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    #[default]
    Unit,
    CohortRow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntervalKind {
    #[default]
    Wald,
    Percentile,
}

/// Distribution of the resampling weights. `Constant` is a test hook.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum XiDraw {
    #[default]
    Exponential,
    Constant(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub replicates: usize,
    pub alpha: f64,
    pub seed: u64,
    pub granularity: Granularity,
    pub interval: IntervalKind,
    /// Run replicates on the rayon pool; results are identical either way.
    pub parallel: bool,
    pub xi: XiDraw,
}

impl BootstrapConfig {
    pub fn new(replicates: usize, seed: u64) -> Self {
        Self {
            replicates,
            alpha: 0.05,
            seed,
            granularity: Granularity::Unit,
            interval: IntervalKind::Wald,
            parallel: false,
            xi: XiDraw::Exponential,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.replicates < 2 {
            return Err(Error::InvalidBootstrap(format!("need at least 2 replicates, got {}", self.replicates)));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidBootstrap(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if let XiDraw::Constant(c) = self.xi {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::InvalidBootstrap(format!("constant weight must be positive, got {c}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum TargetKind {
    Cell { row: usize, label: String, a: u32, k: u32 },
    Horizon { k: u32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetSummary {
    pub name: String,
    pub kind: TargetKind,
    pub point: f64,
    pub se: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
}

#[derive(Debug, Clone)]
pub struct BootstrapResult {
    pub point: EstimateGrid,
    pub targets: Vec<TargetSummary>,
    /// `replicates[b][i]` is replicate b's estimate of target i.
    pub replicates: Vec<Vec<f64>>,
    pub granularity: Granularity,
    pub interval: IntervalKind,
    pub alpha: f64,
    /// Row-level resampling is outside the individual-level theory.
    pub row_level: bool,
}

impl BootstrapResult {
    pub fn horizon(&self, k: u32) -> Option<&TargetSummary> {
        self.targets.iter().find(|t| t.kind == TargetKind::Horizon { k })
    }

    pub fn cell(&self, label: &str, k: u32) -> Option<&TargetSummary> {
        self.targets
            .iter()
            .find(|t| matches!(&t.kind, TargetKind::Cell { label: l, k: kk, .. } if l == label && *kk == k))
    }

    /// `(point − null)/se` per target; `nulls` aligned with `targets`.
    pub fn t_stats(&self, nulls: &[f64]) -> Result<Vec<f64>> {
        self.targets.iter().zip(nulls).map(|(t, &n)| t_statistic(t.point, t.se, n)).collect()
    }
}

pub fn t_statistic(point: f64, se: f64, null: f64) -> Result<f64> {
    if !(se > 0.0) {
        return Err(Error::ZeroSe);
    }
    Ok((point - null) / se)
}

/// Flattens a grid into target values: cells in estimation order, then horizons.
pub fn grid_targets(grid: &EstimateGrid) -> Vec<(String, TargetKind, f64)> {
    let mut out: Vec<(String, TargetKind, f64)> = grid
        .cells
        .iter()
        .map(|c| {
            (
                format!("cell:{}:{}", c.label, c.k),
                TargetKind::Cell { row: c.row, label: c.label.clone(), a: c.a, k: c.k },
                c.tau_hat,
            )
        })
        .collect();
    for (&k, &tau) in grid.horizons.iter().zip(&grid.tau_by_horizon) {
        out.push((format!("horizon:{k}"), TargetKind::Horizon { k }, tau));
    }
    out
}

/// Sample standard deviation (n − 1 denominator).
pub fn sample_sd(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Linear-interpolation sample quantile (type 7).
pub fn quantile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let h = (v.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

pub fn normal_quantile(p: f64) -> f64 {
    Normal::new(0.0, 1.0).expect("standard normal").inverse_cdf(p)
}

/// Standard error and interval from replicate values.
pub fn summarize(point: f64, replicates: &[f64], alpha: f64, kind: IntervalKind) -> (f64, f64, f64) {
    let se = sample_sd(replicates);
    let (lo, hi) = match kind {
        IntervalKind::Wald => {
            let q = normal_quantile(1.0 - alpha / 2.0);
            (point - q * se, point + q * se)
        }
        IntervalKind::Percentile => (quantile(replicates, alpha / 2.0), quantile(replicates, 1.0 - alpha / 2.0)),
    };
    (se, lo, hi)
}

/// Total resampling weight below which a series counts as degenerate.
pub const DEGENERATE_WEIGHT: f64 = 1e-12;
const MAX_ATTEMPTS: usize = 10;

// Weights for replicate b: a ChaCha stream keyed by (seed, b), consumed in
// unit order; retries continue on the same stream. Weights are divided by the
// first draw, which leaves every ratio unchanged and makes a constant draw
// reproduce the point data bit for bit.
fn draw_xi(cfg: &BootstrapConfig, b: usize, n: usize, ok: impl Fn(&[f64]) -> bool) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(b as u64);
    for _ in 0..MAX_ATTEMPTS {
        let mut xi: Vec<f64> = match cfg.xi {
            XiDraw::Exponential => (0..n).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect(),
            XiDraw::Constant(c) => vec![c; n],
        };
        let first = xi[0];
        if first > 0.0 {
            xi.iter_mut().for_each(|x| *x /= first);
        }
        if first > 0.0 && ok(&xi) {
            return Ok(xi);
        }
    }
    Err(Error::DegenerateCohort { replicate: b })
}

struct Resampler {
    source: PanelSource,
    layout: Option<RowLayout>,
    rows: Option<CohortPanel>,
    granularity: Granularity,
}

impl Resampler {
    fn new(source: &PanelSource, granularity: Granularity) -> Result<Self> {
        match (source, granularity) {
            (PanelSource::Rows(_), Granularity::Unit) => Err(Error::InvalidBootstrap(
                "unit-level resampling needs unit-level records".into(),
            )),
            (PanelSource::Units { panel, layout }, Granularity::Unit) => Ok(Self {
                source: source.clone(),
                layout: Some(layout.build(panel)?),
                rows: None,
                granularity,
            }),
            (_, Granularity::CohortRow) => Ok(Self {
                source: source.clone(),
                layout: None,
                rows: Some(source.cohort_panel()?),
                granularity,
            }),
        }
    }

    fn replicate(&self, cfg: &BootstrapConfig, b: usize) -> Result<CohortPanel> {
        match (&self.source, self.granularity) {
            (PanelSource::Units { panel, .. }, Granularity::Unit) => {
                let layout = self.layout.as_ref().unwrap();
                let xi = draw_xi(cfg, b, panel.n_units(), |xi| {
                    layout.row_weights(panel, xi).iter().all(|&w| w >= DEGENERATE_WEIGHT)
                })?;
                layout.aggregate_with(panel, &xi)
            }
            _ => {
                let rows = self.rows.as_ref().unwrap();
                let xi = draw_xi(cfg, b, rows.n_rows(), |xi| {
                    rows.rows().iter().zip(xi).all(|(r, x)| r.weight * x >= DEGENERATE_WEIGHT)
                })?;
                rows.reweighted(&xi)
            }
        }
    }
}

/// Bootstraps one estimator.
pub fn bootstrap(source: &PanelSource, estimator: &EstimatorSpec, cfg: &BootstrapConfig) -> Result<BootstrapResult> {
    let mut out = bootstrap_many(source, std::slice::from_ref(estimator), cfg)?;
    Ok(out.remove(0))
}

/// Bootstraps several estimators on the same replicate draws.
pub fn bootstrap_many(
    source: &PanelSource,
    estimators: &[EstimatorSpec],
    cfg: &BootstrapConfig,
) -> Result<Vec<BootstrapResult>> {
    cfg.validate()?;
    let point_panel = source.cohort_panel()?;
    let etas: Vec<Option<Eta>> = estimators.iter().map(|e| e.resolve_eta(source)).collect::<Result<_>>()?;
    let points: Vec<EstimateGrid> =
        estimators.iter().zip(&etas).map(|(e, eta)| e.run(&point_panel, *eta)).collect::<Result<_>>()?;
    let point_targets: Vec<Vec<(String, TargetKind, f64)>> = points.iter().map(grid_targets).collect();

    let resampler = Resampler::new(source, cfg.granularity)?;
    let one = |b: usize| -> Result<Vec<Vec<f64>>> {
        let panel = resampler.replicate(cfg, b)?;
        estimators
            .iter()
            .zip(&etas)
            .zip(&point_targets)
            .map(|((e, eta), targets)| {
                let grid = e.run(&panel, *eta)?;
                let values: Vec<f64> = grid_targets(&grid).into_iter().map(|t| t.2).collect();
                if values.len() != targets.len() {
                    return Err(Error::InvalidBootstrap(format!(
                        "replicate {b} produced {} targets instead of {}",
                        values.len(),
                        targets.len()
                    )));
                }
                Ok(values)
            })
            .collect()
    };
    let draws: Vec<Vec<Vec<f64>>> = if cfg.parallel {
        (0..cfg.replicates).into_par_iter().map(one).collect::<Result<_>>()?
    } else {
        (0..cfg.replicates).map(one).collect::<Result<_>>()?
    };

    let mut results = Vec::with_capacity(estimators.len());
    for (e_idx, (point, targets)) in points.into_iter().zip(point_targets).enumerate() {
        let replicates: Vec<Vec<f64>> = draws.iter().map(|d| d[e_idx].clone()).collect();
        let summaries = targets
            .into_iter()
            .enumerate()
            .map(|(i, (name, kind, value))| {
                let column: Vec<f64> = replicates.iter().map(|r| r[i]).collect();
                let (se, ci_lower, ci_upper) = summarize(value, &column, cfg.alpha, cfg.interval);
                TargetSummary { name, kind, point: value, se, ci_lower, ci_upper }
            })
            .collect();
        results.push(BootstrapResult {
            point,
            targets: summaries,
            replicates,
            granularity: cfg.granularity,
            interval: cfg.interval,
            alpha: cfg.alpha,
            row_level: cfg.granularity == Granularity::CohortRow,
        });
    }
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_point_summary() {
        let (se, lo, hi) = summarize(2.0, &[1.0, 3.0], 0.05, IntervalKind::Wald);
        assert!((se - 2f64.sqrt()).abs() < 1e-15);
        assert!((hi - 2.0 - 2.772).abs() < 1e-3);
        assert!((2.0 - lo - 2.772).abs() < 1e-3);
        assert!((normal_quantile(0.975) - 1.959964).abs() < 1e-6);
    }

    #[test]
    fn percentile_interval_uses_type7_quantiles() {
        let reps: Vec<f64> = (0..=100).map(|v| v as f64).collect();
        let (_, lo, hi) = summarize(50.0, &reps, 0.1, IntervalKind::Percentile);
        assert!((lo - 5.0).abs() < 1e-12 && (hi - 95.0).abs() < 1e-12);
    }

    #[test]
    fn t_statistic_examples() {
        assert_eq!(t_statistic(2.0, 1.0, 0.0).unwrap(), 2.0);
        assert_eq!(t_statistic(0.0, 5.0, 0.0).unwrap(), 0.0);
        assert_eq!(t_statistic(1.5, 0.5, 1.5).unwrap(), 0.0);
        assert!(matches!(t_statistic(1.0, 0.0, 0.0), Err(Error::ZeroSe)));
    }

    #[test]
    fn config_validation() {
        assert!(BootstrapConfig::new(1, 0).validate().is_err());
        let mut c = BootstrapConfig::new(10, 0);
        c.alpha = 1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn xi_streams_are_keyed_by_replicate() {
        let cfg = BootstrapConfig::new(5, 42);
        let a = draw_xi(&cfg, 3, 6, |_| true).unwrap();
        let b = draw_xi(&cfg, 3, 6, |_| true).unwrap();
        let c = draw_xi(&cfg, 4, 6, |_| true).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a[0], 1.0);
        let r = draw_xi(&cfg, 0, 3, |_| false);
        assert!(matches!(r, Err(Error::DegenerateCohort { replicate: 0 })));
    }
}
