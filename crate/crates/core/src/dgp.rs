//! Simulated staggered-adoption panels with two-way effects, interactive fixed
//! effects and known treatment effects, plus a Monte Carlo harness.
//!
//! Outcomes follow
//! `Y_it = α_i + β_t + s·θ_{g(i)}ᵀψ_t + τ_{A_i, t−A_i}·1{t ≥ A_i} + ε_it`.
//! Loadings live at the group level (states, say); units inherit their
//! group's loadings and adoption time. The structure (loadings, factors,
//! period effects, group effects) is drawn from `structure_seed` and stays
//! fixed across Monte Carlo replications; assignment, unit effects and noise
//! come from `seed`.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{bootstrap_many, BootstrapConfig, EstimatorSpec, LayoutSpec, PanelSource};
use crate::oracle::{run_sequential_ols, tightest_config, FactorStructure};
use crate::panel::{Adoption, CohortPanel, RowLayout, Unit, ValidatedPanel};
use crate::sequential::{EstimateGrid, SsdidConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TauTruth {
    Constant(f64),
    /// `intercept + per_lag·k + per_cohort·a`.
    Linear { intercept: f64, per_lag: f64, per_cohort: f64 },
}

impl TauTruth {
    pub fn value(&self, a: u32, k: u32) -> f64 {
        match *self {
            TauTruth::Constant(c) => c,
            TauTruth::Linear { intercept, per_lag, per_cohort } => {
                intercept + per_lag * k as f64 + per_cohort * a as f64
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseSpec {
    Iid { sd: f64 },
    Ar2 { rho1: f64, rho2: f64, sd: f64 },
}

impl NoiseSpec {
    pub fn is_stationary(&self) -> bool {
        match *self {
            NoiseSpec::Iid { .. } => true,
            NoiseSpec::Ar2 { rho1, rho2, .. } => rho2.abs() < 1.0 && rho1 + rho2 < 1.0 && rho2 - rho1 < 1.0,
        }
    }

    /// Stationary marginal variance.
    pub fn variance(&self) -> f64 {
        match *self {
            NoiseSpec::Iid { sd } => sd * sd,
            NoiseSpec::Ar2 { rho1, rho2, sd } => {
                sd * sd * (1.0 - rho2) / ((1.0 + rho2) * ((1.0 - rho2).powi(2) - rho1 * rho1))
            }
        }
    }

    fn sd(&self) -> f64 {
        match *self {
            NoiseSpec::Iid { sd } | NoiseSpec::Ar2 { sd, .. } => sd,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Assignment {
    /// Never treated with probability `never_share`, otherwise a uniform date
    /// in `start..=end`.
    Independent { start: u32, end: u32, never_share: f64 },
    /// Ever-treated probability `logistic(logit(1 − never_share) + slope·θ₁)`;
    /// date `round(N(mid − slope·spread·θ₁, spread²))` clamped to `start..=end`,
    /// with `spread = (end − start + 1)/4`.
    Confounded { start: u32, end: u32, never_share: f64, slope: f64 },
    /// Group g adopts at `adoptions[g % len]`.
    Fixed { adoptions: Vec<Adoption> },
}

impl Assignment {
    /// Earliest and latest possible finite adoption.
    pub fn window(&self) -> Option<(u32, u32)> {
        match self {
            Assignment::Independent { start, end, .. } | Assignment::Confounded { start, end, .. } => {
                Some((*start, *end))
            }
            Assignment::Fixed { adoptions } => {
                let finite = adoptions.iter().filter_map(|a| a.period());
                Some((finite.clone().min()?, finite.max()?))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactorProcess {
    Iid,
    /// Gaussian random walks, standardized per factor.
    RandomWalk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpSpec {
    pub n_units: usize,
    pub periods: u32,
    pub rank: usize,
    /// Var(IFE)/(Var(IFE) + Var(noise)); 0.8 makes the IFE variance four
    /// times the noise variance.
    pub signal: f64,
    /// Fixes the IFE standard deviation directly, overriding `signal`
    /// (useful for noiseless panels).
    pub ife_sd: Option<f64>,
    pub tau: TauTruth,
    pub noise: NoiseSpec,
    pub assignment: Assignment,
    /// Number of loading groups; `None` gives every unit its own loadings.
    pub n_groups: Option<usize>,
    pub factors: FactorProcess,
    /// Scale of group effects and period effects.
    pub two_way_sd: f64,
    /// Unit-level deviation of α_i around its group effect.
    pub unit_sd: f64,
    pub structure_seed: u64,
    pub seed: u64,
}

impl DgpSpec {
    pub fn new(n_units: usize, periods: u32) -> Self {
        Self {
            n_units,
            periods,
            rank: 0,
            signal: 0.0,
            ife_sd: None,
            tau: TauTruth::Constant(1.0),
            noise: NoiseSpec::Iid { sd: 1.0 },
            assignment: Assignment::Independent { start: (periods / 2).max(2), end: periods, never_share: 0.3 },
            n_groups: None,
            factors: FactorProcess::Iid,
            two_way_sd: 1.0,
            unit_sd: 1.0,
            structure_seed: 0,
            seed: 0,
        }
    }

    /// State-panel analogue: 50 groups over 40 periods, rank-4 persistent
    /// factors, AR(2) noise, and adoption confounded with the first loading.
    pub fn state_panel(n_units: usize) -> Self {
        Self {
            rank: 4,
            signal: 0.5,
            noise: NoiseSpec::Ar2 { rho1: 0.4, rho2: 0.2, sd: 1.0 },
            assignment: Assignment::Confounded { start: 20, end: 35, never_share: 0.3, slope: 1.0 },
            n_groups: Some(50),
            factors: FactorProcess::RandomWalk,
            ..Self::new(n_units, 40)
        }
    }

    pub fn n_groups(&self) -> usize {
        self.n_groups.unwrap_or(self.n_units)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InfeasibleSpec(m));
        if self.n_units < 2 {
            return bad(format!("need at least 2 units, got {}", self.n_units));
        }
        if self.periods < 3 {
            return bad(format!("need at least 3 periods, got {}", self.periods));
        }
        let g = self.n_groups();
        if g < 2 || g > self.n_units {
            return bad(format!("group count {g} must lie in 2..={}", self.n_units));
        }
        if !(0.0..=0.8).contains(&self.signal) {
            return bad(format!("signal {} outside [0, 0.8]", self.signal));
        }
        if let Some(sd) = self.ife_sd {
            if !(sd.is_finite() && sd >= 0.0) {
                return bad(format!("ife_sd must be non-negative, got {sd}"));
            }
        }
        if !self.noise.is_stationary() {
            return bad("AR(2) coefficients are not stationary".into());
        }
        if !(self.noise.sd().is_finite() && self.noise.sd() >= 0.0) {
            return bad("noise sd must be non-negative".into());
        }
        if !(self.two_way_sd >= 0.0 && self.unit_sd >= 0.0) {
            return bad("effect scales must be non-negative".into());
        }
        match &self.assignment {
            Assignment::Independent { never_share, .. } | Assignment::Confounded { never_share, .. } => {
                if !(0.0..1.0).contains(never_share) {
                    return bad(format!("never-treated share {never_share} outside [0, 1)"));
                }
            }
            Assignment::Fixed { adoptions } if adoptions.is_empty() => {
                return bad("fixed assignment lists no adoption times".into());
            }
            Assignment::Fixed { .. } => {}
        }
        if let Some((start, end)) = self.assignment.window() {
            if start < 2 || start > end || end > self.periods {
                return bad(format!("adoption window {start}..={end} does not fit in 2..={}", self.periods));
            }
        }
        if self.ife_sd.is_none() && self.signal > 0.0 && self.rank == 0 {
            return bad("positive signal needs rank ≥ 1".into());
        }
        if self.ife_sd.is_none() && self.signal > 0.0 && self.noise.variance() == 0.0 {
            return bad("signal is a ratio to the noise variance, which is zero; set ife_sd".into());
        }
        Ok(())
    }
}

/// A simulated panel with every component of the outcome stored.
#[derive(Debug, Clone)]
pub struct SimulatedPanel {
    pub spec: DgpSpec,
    pub panel: ValidatedPanel,
    pub group_of_unit: Vec<usize>,
    pub group_adoption: Vec<Adoption>,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    /// Group loadings (groups × r), unscaled.
    pub theta: DMatrix<f64>,
    /// Factors (T × r), already multiplied by the IFE scale.
    pub psi: DMatrix<f64>,
    pub ife_scale: f64,
    /// Noise draws (units × T).
    pub noise: DMatrix<f64>,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn standardize_columns(m: &mut DMatrix<f64>) {
    for mut col in m.column_iter_mut() {
        let n = col.len() as f64;
        let mean = col.sum() / n;
        col.add_scalar_mut(-mean);
        let sd = (col.norm_squared() / n).sqrt();
        if sd > 0.0 {
            col /= sd;
        }
    }
}

pub fn simulate(spec: &DgpSpec) -> Result<SimulatedPanel> {
    spec.validate()?;
    let n = spec.n_units;
    let t = spec.periods as usize;
    let g = spec.n_groups();
    let r = spec.rank;

    let mut srng = ChaCha8Rng::seed_from_u64(spec.structure_seed);
    let theta = DMatrix::from_fn(g, r, |_, _| normal(&mut srng));
    let mut psi = DMatrix::from_fn(t, r, |_, _| normal(&mut srng));
    if spec.factors == FactorProcess::RandomWalk {
        for j in 0..r {
            for p in 1..t {
                psi[(p, j)] += psi[(p - 1, j)];
            }
        }
    }
    standardize_columns(&mut psi);
    let group_alpha: Vec<f64> = (0..g).map(|_| spec.two_way_sd * normal(&mut srng)).collect();
    let mut beta = vec![0.0; t];
    for p in 0..t {
        let step = spec.two_way_sd * normal(&mut srng);
        beta[p] = if p == 0 { step } else { beta[p - 1] + step };
    }
    let group_of_unit: Vec<usize> = (0..n).map(|i| i % g).collect();

    // Scale the IFE so its variance over all unit-periods hits the target.
    let raw = &theta * psi.transpose();
    let (mut sum, mut sum2) = (0.0, 0.0);
    for &gi in &group_of_unit {
        for p in 0..t {
            let v = raw[(gi, p)];
            sum += v;
            sum2 += v * v;
        }
    }
    let cells = (n * t) as f64;
    let raw_var = sum2 / cells - (sum / cells).powi(2);
    let target_var = match spec.ife_sd {
        Some(sd) => sd * sd,
        None => spec.noise.variance() * spec.signal / (1.0 - spec.signal),
    };
    let ife_scale = if target_var == 0.0 || r == 0 {
        0.0
    } else if raw_var > 0.0 {
        (target_var / raw_var).sqrt()
    } else {
        return Err(Error::InfeasibleSpec("factor structure has zero variance".into()));
    };
    let psi = psi * ife_scale;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let group_adoption = assign(spec, &theta, &mut rng);
    let alpha: Vec<f64> = group_of_unit.iter().map(|&gi| group_alpha[gi] + spec.unit_sd * normal(&mut rng)).collect();
    let noise = draw_noise(spec.noise, n, t, &mut rng);

    let ife = &theta * psi.transpose();
    let mut units = Vec::with_capacity(n);
    for i in 0..n {
        let gi = group_of_unit[i];
        let adoption = group_adoption[gi];
        let outcomes = (0..t)
            .map(|p| outcome(spec, alpha[i], beta[p], ife[(gi, p)], adoption, p as u32 + 1, noise[(i, p)]))
            .collect();
        units.push(Unit { id: format!("u{i}"), adoption, weight: 1.0, group: Some(format!("g{gi}")), outcomes });
    }
    let panel = ValidatedPanel::from_units(spec.periods, units)?;
    Ok(SimulatedPanel {
        spec: spec.clone(),
        panel,
        group_of_unit,
        group_adoption,
        alpha,
        beta,
        theta,
        psi,
        ife_scale,
        noise,
    })
}

fn outcome(spec: &DgpSpec, alpha: f64, beta: f64, ife: f64, adoption: Adoption, period: u32, eps: f64) -> f64 {
    let effect = match adoption {
        Adoption::At(a) if period >= a => spec.tau.value(a, period - a),
        _ => 0.0,
    };
    alpha + beta + ife + effect + eps
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn assign(spec: &DgpSpec, theta: &DMatrix<f64>, rng: &mut ChaCha8Rng) -> Vec<Adoption> {
    let g = theta.nrows();
    let first = |gi: usize| if theta.ncols() > 0 { theta[(gi, 0)] } else { 0.0 };
    let mut out: Vec<Adoption> = match spec.assignment.clone() {
        Assignment::Fixed { adoptions } => return (0..g).map(|gi| adoptions[gi % adoptions.len()]).collect(),
        Assignment::Independent { start, end, never_share } => (0..g)
            .map(|_| {
                let never = rng.random::<f64>() < never_share;
                let date = rng.random_range(start..=end);
                if never { Adoption::Never } else { Adoption::At(date) }
            })
            .collect(),
        Assignment::Confounded { start, end, never_share, slope } => {
            let base = ((1.0 - never_share) / never_share.max(1e-12)).ln();
            let mid = (start + end) as f64 / 2.0;
            let spread = (end - start + 1) as f64 / 4.0;
            (0..g)
                .map(|gi| {
                    let z = first(gi);
                    let ever = rng.random::<f64>() < logistic(base + slope * z);
                    let date = (mid - slope * spread * z + spread * normal(rng)).round();
                    let date = date.clamp(start as f64, end as f64) as u32;
                    if ever { Adoption::At(date) } else { Adoption::Never }
                })
                .collect()
        }
    };
    if !out.iter().any(|a| a.is_never()) {
        // Keep a never-treated control: the group least prone to adopt.
        let pick = (0..g).min_by(|&a, &b| first(a).total_cmp(&first(b))).unwrap_or(0);
        out[pick] = Adoption::Never;
    }
    out
}

const BURN_IN: usize = 50;

fn draw_noise(noise: NoiseSpec, n: usize, t: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(n, t);
    for i in 0..n {
        match noise {
            NoiseSpec::Iid { sd } => {
                for p in 0..t {
                    out[(i, p)] = sd * normal(rng);
                }
            }
            NoiseSpec::Ar2 { rho1, rho2, sd } => {
                let (mut e1, mut e2) = (0.0, 0.0);
                for step in 0..BURN_IN + t {
                    let e = rho1 * e1 + rho2 * e2 + sd * normal(rng);
                    e2 = e1;
                    e1 = e;
                    if step >= BURN_IN {
                        out[(i, step - BURN_IN)] = e;
                    }
                }
            }
        }
    }
    out
}

impl SimulatedPanel {
    pub fn truth(&self, a: u32, k: u32) -> f64 {
        self.spec.tau.value(a, k)
    }

    /// IFE component of unit `i` at 0-based period index `p`.
    pub fn ife(&self, i: usize, p: usize) -> f64 {
        let gi = self.group_of_unit[i];
        (0..self.spec.rank).map(|j| self.theta[(gi, j)] * self.psi[(p, j)]).sum()
    }

    /// True effects for every realized cohort and lag that fits in the panel.
    pub fn truths(&self) -> Vec<(u32, u32, f64)> {
        let mut cohorts: Vec<u32> = self.group_adoption.iter().filter_map(|a| a.period()).collect();
        cohorts.sort_unstable();
        cohorts.dedup();
        let mut out = Vec::new();
        for a in cohorts {
            for k in 0..=(self.spec.periods - a) {
                out.push((a, k, self.truth(a, k)));
            }
        }
        out
    }

    /// Row-level loadings (weighted means of unit loadings) and scaled factors
    /// for a layout of this panel.
    pub fn cohort_factors(&self, layout: &RowLayout) -> Result<FactorStructure> {
        let r = self.spec.rank;
        let mut theta = DMatrix::zeros(layout.n_rows(), r);
        let mut totals = vec![0.0; layout.n_rows()];
        for (i, u) in self.panel.units().iter().enumerate() {
            let row = layout.row_of_unit(i);
            totals[row] += u.weight;
            for j in 0..r {
                theta[(row, j)] += u.weight * self.theta[(self.group_of_unit[i], j)];
            }
        }
        for (row, total) in totals.iter().enumerate() {
            for j in 0..r {
                theta[(row, j)] /= total;
            }
        }
        FactorStructure::new(theta, self.psi.clone())
    }

    /// Recomputes every outcome from the stored components.
    pub fn audit(&self) -> bool {
        self.panel.units().iter().enumerate().all(|(i, u)| {
            let gi = self.group_of_unit[i];
            let ife = self.theta.row(gi) * self.psi.transpose();
            u.outcomes.iter().enumerate().all(|(p, &y)| {
                y == outcome(&self.spec, self.alpha[i], self.beta[p], ife[p], u.adoption, p as u32 + 1, self.noise[(i, p)])
            })
        })
    }

    /// Sample variance of the IFE component over the sample variance of the noise.
    pub fn variance_ratio(&self) -> f64 {
        let t = self.spec.periods as usize;
        let var = |vals: &mut dyn Iterator<Item = f64>| {
            let (mut n, mut s, mut s2) = (0.0, 0.0, 0.0);
            for v in vals {
                n += 1.0;
                s += v;
                s2 += v * v;
            }
            s2 / n - (s / n).powi(2)
        };
        let ife = var(&mut (0..self.spec.n_units).flat_map(|i| (0..t).map(move |p| (i, p))).map(|(i, p)| self.ife(i, p)));
        let noise = var(&mut self.noise.iter().copied());
        ife / noise
    }
}

/// Estimators compared in a Monte Carlo run.
#[derive(Debug, Clone)]
pub enum McEstimator {
    Sequential { name: String, config: SsdidConfig },
    /// Sequential OLS with the simulated cohort factors at the tightest
    /// feasible configuration; point estimates only.
    SequentialOls { name: String },
}

impl McEstimator {
    pub fn name(&self) -> &str {
        match self {
            McEstimator::Sequential { name, .. } | McEstimator::SequentialOls { name } => name,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MonteCarloConfig {
    pub reps: usize,
    pub layout: LayoutSpec,
    pub estimators: Vec<McEstimator>,
    /// `None` skips inference (RMSE only).
    pub bootstrap: Option<BootstrapConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McRecord {
    pub rep: usize,
    pub estimator: String,
    pub k: u32,
    pub estimate: f64,
    pub truth: f64,
    pub se: Option<f64>,
    pub covered: Option<bool>,
    pub t_stat: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McRow {
    pub estimator: String,
    pub k: u32,
    pub rmse: f64,
    pub bias: f64,
    pub coverage: Option<f64>,
    pub mean_t: Option<f64>,
    pub sd_t: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct McSummary {
    pub records: Vec<McRecord>,
    pub rows: Vec<McRow>,
}

impl McSummary {
    pub fn row(&self, estimator: &str, k: u32) -> Option<&McRow> {
        self.rows.iter().find(|r| r.estimator == estimator && r.k == k)
    }

    pub fn t_stats(&self, estimator: &str, k: u32) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| r.estimator == estimator && r.k == k)
            .filter_map(|r| r.t_stat)
            .collect()
    }
}

/// Horizon truth implied by a grid's aggregation weights.
pub fn horizon_truth(grid: &EstimateGrid, panel: &CohortPanel, truth: impl Fn(u32, u32) -> f64, k: u32) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for c in grid.cells.iter().filter(|c| c.k == k) {
        let w = grid
            .targets
            .iter()
            .position(|&r| r == c.row)
            .map(|i| grid.mu[i])
            .unwrap_or_else(|| panel.row(c.row).share);
        num += w * truth(c.a, k);
        den += w;
    }
    num / den
}

/// Mixes a base seed with a replication index (splitmix64 finalizer).
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn monte_carlo(spec: &DgpSpec, cfg: &MonteCarloConfig) -> Result<McSummary> {
    if cfg.reps < 2 {
        return Err(Error::InvalidConfig(format!("need at least 2 replications, got {}", cfg.reps)));
    }
    // oracle horizons are capped at the largest lag asked of the other estimators
    let k_cap = cfg
        .estimators
        .iter()
        .filter_map(|e| match e {
            McEstimator::Sequential { config, .. } => Some(config.k_max),
            _ => None,
        })
        .max();
    let mut records = Vec::new();
    for rep in 0..cfg.reps {
        let mut rep_spec = spec.clone();
        rep_spec.seed = derive_seed(spec.seed, rep as u64);
        let sim = simulate(&rep_spec)?;
        let layout = cfg.layout.build(&sim.panel)?;
        let point_panel = layout.aggregate(&sim.panel)?;
        let source = PanelSource::Units { panel: sim.panel.clone(), layout: cfg.layout };
        let truth = |a: u32, k: u32| sim.truth(a, k);

        let sequential: Vec<(&str, EstimatorSpec)> = cfg
            .estimators
            .iter()
            .filter_map(|e| match e {
                McEstimator::Sequential { name, config } => Some((name.as_str(), EstimatorSpec::Sequential(config.clone()))),
                _ => None,
            })
            .collect();
        let specs: Vec<EstimatorSpec> = sequential.iter().map(|(_, s)| s.clone()).collect();
        if let Some(bcfg) = &cfg.bootstrap {
            let mut b = bcfg.clone();
            b.seed = derive_seed(bcfg.seed, rep as u64);
            let results = bootstrap_many(&source, &specs, &b)?;
            for ((name, _), res) in sequential.iter().zip(&results) {
                for &k in &res.point.horizons {
                    let target = res.horizon(k).expect("every horizon is a target");
                    let tr = horizon_truth(&res.point, &point_panel, truth, k);
                    let t_stat = if target.se > 0.0 { Some((target.point - tr) / target.se) } else { None };
                    records.push(McRecord {
                        rep,
                        estimator: name.to_string(),
                        k,
                        estimate: target.point,
                        truth: tr,
                        se: Some(target.se),
                        covered: Some(target.ci_lower <= tr && tr <= target.ci_upper),
                        t_stat,
                    });
                }
            }
        } else {
            for (name, s) in &sequential {
                let EstimatorSpec::Sequential(c) = s else { unreachable!() };
                let grid = crate::sequential::run_sequential_with_eta(&point_panel, c, source.resolve_eta(c.eta)?)?;
                push_points(&mut records, rep, name, &grid, &point_panel, &truth);
            }
        }
        for e in &cfg.estimators {
            if let McEstimator::SequentialOls { name } = e {
                let factors = sim.cohort_factors(&layout)?;
                let oracle = tightest_config(&factors, &point_panel)?
                    .ok_or_else(|| Error::InvalidConfig("no oracle configuration satisfies the affine hull condition".into()))?;
                let mut grid = run_sequential_ols(&point_panel, &factors, &oracle)?;
                if let Some(cap) = k_cap {
                    let keep = grid.horizons.iter().take_while(|&&k| k <= cap).count();
                    grid.horizons.truncate(keep);
                    grid.tau_by_horizon.truncate(keep);
                }
                push_points(&mut records, rep, name, &grid, &point_panel, &truth);
            }
        }
    }
    let rows = summarize_records(&records, cfg);
    Ok(McSummary { records, rows })
}

fn push_points(
    records: &mut Vec<McRecord>,
    rep: usize,
    name: &str,
    grid: &EstimateGrid,
    panel: &CohortPanel,
    truth: &impl Fn(u32, u32) -> f64,
) {
    for (&k, &est) in grid.horizons.iter().zip(&grid.tau_by_horizon) {
        records.push(McRecord {
            rep,
            estimator: name.to_string(),
            k,
            estimate: est,
            truth: horizon_truth(grid, panel, truth, k),
            se: None,
            covered: None,
            t_stat: None,
        });
    }
}

fn summarize_records(records: &[McRecord], cfg: &MonteCarloConfig) -> Vec<McRow> {
    let mut rows = Vec::new();
    for e in &cfg.estimators {
        let mut ks: Vec<u32> = records.iter().filter(|r| r.estimator == e.name()).map(|r| r.k).collect();
        ks.sort_unstable();
        ks.dedup();
        for k in ks {
            let sel: Vec<&McRecord> = records.iter().filter(|r| r.estimator == e.name() && r.k == k).collect();
            let n = sel.len() as f64;
            let err: Vec<f64> = sel.iter().map(|r| r.estimate - r.truth).collect();
            let rmse = (err.iter().map(|e| e * e).sum::<f64>() / n).sqrt();
            let bias = err.iter().sum::<f64>() / n;
            let covered: Vec<bool> = sel.iter().filter_map(|r| r.covered).collect();
            let coverage =
                (!covered.is_empty()).then(|| covered.iter().filter(|&&c| c).count() as f64 / covered.len() as f64);
            let ts: Vec<f64> = sel.iter().filter_map(|r| r.t_stat).collect();
            let (mean_t, sd_t) = if ts.len() >= 2 {
                let m = ts.iter().sum::<f64>() / ts.len() as f64;
                (Some(m), Some(crate::inference::sample_sd(&ts)))
            } else {
                (None, None)
            };
            rows.push(McRow { estimator: e.name().to_string(), k, rmse, bias, coverage, mean_t, sd_t });
        }
    }
    rows
}

/// Parses a flat `key = value` design file. Unknown keys are rejected.
///
/// ```text
/// n_units = 5000
/// periods = 40
/// rank = 4
/// signal = 0.5
/// tau = linear 1.0 0.1 0.0
/// noise = ar2 0.4 0.2 1.0
/// assignment = confounded 20 35 0.3 1.0
/// n_groups = 50
/// factors = random_walk
/// seed = 7
/// ```
pub fn parse_spec(text: &str) -> Result<DgpSpec> {
    let err = |line: usize, m: String| Error::Parse { what: format!("design spec line {line}"), message: m };
    let mut spec = DgpSpec::new(100, 10);
    let mut assignment: Option<Vec<String>> = None;
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content.split_once('=').ok_or_else(|| err(line, format!("expected `key = value`, got `{content}`")))?;
        let key = key.trim();
        let parts: Vec<&str> = value.split_whitespace().collect();
        let num = |i: usize| -> Result<f64> {
            parts
                .get(i)
                .ok_or_else(|| err(line, format!("`{key}` needs more values")))?
                .parse::<f64>()
                .map_err(|e| err(line, format!("`{key}`: {e}")))
        };
        let int = |i: usize| -> Result<u64> {
            parts
                .get(i)
                .ok_or_else(|| err(line, format!("`{key}` needs a value")))?
                .parse::<u64>()
                .map_err(|e| err(line, format!("`{key}`: {e}")))
        };
        match key {
            "n_units" => spec.n_units = int(0)? as usize,
            "periods" | "t" => spec.periods = int(0)? as u32,
            "rank" | "r" => spec.rank = int(0)? as usize,
            "signal" => spec.signal = num(0)?,
            "ife_sd" => spec.ife_sd = Some(num(0)?),
            "n_groups" => spec.n_groups = Some(int(0)? as usize),
            "two_way_sd" => spec.two_way_sd = num(0)?,
            "unit_sd" => spec.unit_sd = num(0)?,
            "structure_seed" => spec.structure_seed = int(0)?,
            "seed" => spec.seed = int(0)?,
            "factors" => {
                spec.factors = match parts.first().copied() {
                    Some("iid") => FactorProcess::Iid,
                    Some("random_walk") => FactorProcess::RandomWalk,
                    other => return Err(err(line, format!("unknown factor process {other:?}"))),
                }
            }
            "tau" => {
                spec.tau = match parts.first().copied() {
                    Some("constant") => TauTruth::Constant(num(1)?),
                    Some("linear") => TauTruth::Linear { intercept: num(1)?, per_lag: num(2)?, per_cohort: num(3)? },
                    other => return Err(err(line, format!("unknown tau form {other:?}"))),
                }
            }
            "noise" => {
                spec.noise = match parts.first().copied() {
                    Some("iid") => NoiseSpec::Iid { sd: num(1)? },
                    Some("ar2") => NoiseSpec::Ar2 { rho1: num(1)?, rho2: num(2)?, sd: num(3)? },
                    other => return Err(err(line, format!("unknown noise form {other:?}"))),
                }
            }
            "assignment" if parts.first() == Some(&"fixed") => {
                assignment = Some(Vec::new());
                spec.assignment = Assignment::Fixed {
                    adoptions: parts[1..]
                        .iter()
                        .map(|p| Adoption::parse(p).map_err(|e| err(line, e.to_string())))
                        .collect::<Result<_>>()?,
                };
            }
            "assignment" => assignment = Some(parts.iter().map(|s| s.to_string()).collect()),
            _ => return Err(err(line, format!("unknown key `{key}`"))),
        }
        if key == "assignment" && parts.first() != Some(&"fixed") {
            let a = assignment.as_ref().unwrap();
            let (start, end, never) = (int(1)? as u32, int(2)? as u32, num(3)?);
            spec.assignment = match a.first().map(String::as_str) {
                Some("independent") => Assignment::Independent { start, end, never_share: never },
                Some("confounded") => Assignment::Confounded { start, end, never_share: never, slope: num(4)? },
                other => return Err(err(line, format!("unknown assignment {other:?}"))),
            };
        }
    }
    if assignment.is_none() {
        spec.assignment = DgpSpec::new(spec.n_units, spec.periods).assignment;
    }
    spec.validate()?;
    Ok(spec)
}
