//! Property checks shared by the proptest suite and the acceptance runner.
//! Each check draws its data from `seed` and returns a proptest verdict.

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use proptest::test_runner::TestCaseError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use ssdid::balancing::{solve_exact_balance, solve_ridge_balance, Eta, ExactBalanceProblem, RidgeBalanceProblem};
use ssdid::dgp::{simulate, Assignment, DgpSpec};
use ssdid::inference::{bootstrap, BootstrapConfig, EstimatorSpec, Granularity, LayoutSpec, PanelSource, XiDraw};
use ssdid::panel::{CohortPanel, CovariateScheme};
use ssdid::sequential::{run_sequential, EstimateGrid, EtaChoice, SsdidConfig};

use super::random_instance;

pub type Check = Result<(), TestCaseError>;

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Noisy cohort panel with 3..=5 cohorts, rank 0..=2, 7..=10 periods.
pub fn noisy_panel(seed: u64) -> CohortPanel {
    let r = (seed % 3) as usize;
    let n_cohorts = 3 + (seed / 3 % 3) as usize;
    let periods = (7 + (seed / 9 % 4) as u32).max(r as u32 + 2 + n_cohorts as u32);
    random_instance(seed, periods, n_cohorts, r, 0.5).panel
}

/// Every finite cohort, lags up to two where the panel allows.
pub fn full_config(panel: &CohortPanel) -> SsdidConfig {
    let finite: Vec<u32> = panel.cohorts().iter().filter_map(|a| a.period()).collect();
    let (lo, hi) = (*finite.iter().min().unwrap(), *finite.iter().max().unwrap());
    SsdidConfig::new(lo, hi, (panel.periods() - hi).min(2))
}

fn max_cell_gap(a: &EstimateGrid, b: &EstimateGrid, scale_b: f64) -> f64 {
    assert_eq!(a.cells.len(), b.cells.len());
    a.cells
        .iter()
        .map(|c| (c.tau_hat * scale_b - b.cell(c.row, c.k).unwrap().tau_hat).abs())
        .fold(0.0, f64::max)
}

pub fn ridge_weights_sum_to_one(seed: u64, m: usize, j: usize, log_eta: Option<f64>) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = RidgeBalanceProblem {
        predictors: DMatrix::from_fn(m, j, |_, _| 3.0 * normal(&mut rng)),
        target: DVector::from_fn(m, |_, _| 3.0 * normal(&mut rng)),
        penalty_diag: DVector::from_fn(j, |_, _| rng.random_range(0.1..10.0)),
        eta: log_eta.map_or(Eta::Inf, |l| Eta::Finite(10f64.powf(l))),
    };
    let sol = solve_ridge_balance(&p).map_err(|e| TestCaseError::fail(e.to_string()))?;
    let sum: f64 = sol.weights.iter().sum();
    prop_assert!((sum - 1.0).abs() <= 1e-10, "sum {sum}");
    Ok(())
}

pub fn exact_balance_residual(seed: u64, r: usize, extra: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let j = r + 1 + extra;
    let moments = DMatrix::from_fn(r + 1, j, |q, _| if q == 0 { 1.0 } else { normal(&mut rng) });
    let target = DVector::from_fn(r + 1, |q, _| if q == 0 { 1.0 } else { normal(&mut rng) });
    let p = ExactBalanceProblem {
        moments: moments.clone(),
        target: target.clone(),
        penalty_diag: DVector::from_fn(j, |_, _| rng.random_range(0.1..10.0)),
    };
    let sol = solve_exact_balance(&p).map_err(|e| TestCaseError::fail(e.to_string()))?;
    let resid = (&moments * DVector::from_vec(sol.weights.clone()) - &target).norm();
    prop_assert!(resid <= 1e-8, "residual {resid:e}");
    let sum: f64 = sol.weights.iter().sum();
    prop_assert!((sum - 1.0).abs() <= 1e-10, "sum {sum}");
    Ok(())
}

/// Adding `α_i + β_t` leaves every cell estimate unchanged.
pub fn two_way_shift_invariance(seed: u64, eta: EtaChoice) -> Check {
    let panel = noisy_panel(seed);
    let cfg = full_config(&panel).with_eta(eta);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let alpha: Vec<f64> = (0..panel.n_rows()).map(|_| 10.0 * normal(&mut rng)).collect();
    let beta: Vec<f64> = (0..panel.periods()).map(|_| 10.0 * normal(&mut rng)).collect();
    let y = DMatrix::from_fn(panel.n_rows(), panel.periods() as usize, |i, p| panel.y()[(i, p)] + alpha[i] + beta[p]);
    let shifted = CohortPanel::new(panel.rows().to_vec(), y).unwrap();
    let base = run_sequential(&panel, &cfg).unwrap();
    let moved = run_sequential(&shifted, &cfg).unwrap();
    let gap = max_cell_gap(&base, &moved, 1.0);
    prop_assert!(gap <= 1e-8, "max gap {gap:e}");
    Ok(())
}

/// Scaling outcomes by `c` scales estimates by `c` (η scales with the data).
pub fn scale_equivariance(seed: u64, c: f64) -> Check {
    let panel = noisy_panel(seed);
    let cfg = full_config(&panel);
    let scaled = CohortPanel::new(panel.rows().to_vec(), panel.y() * c).unwrap();
    let base = run_sequential(&panel, &cfg).unwrap();
    let out = run_sequential(&scaled, &cfg).unwrap();
    let worst = base.cells.iter().map(|x| x.tau_hat.abs() * c).fold(1.0, f64::max);
    let gap = max_cell_gap(&base, &out, c);
    prop_assert!(gap <= 1e-8 * worst, "gap {gap:e} at scale {c}");
    Ok(())
}

pub fn eta_limit(seed: u64) -> Check {
    let panel = noisy_panel(seed);
    let cfg = full_config(&panel);
    let inf = run_sequential(&panel, &cfg.clone().with_eta(EtaChoice::Inf)).unwrap();
    let big = run_sequential(&panel, &cfg.with_eta(EtaChoice::Value(1e7))).unwrap();
    let gap = max_cell_gap(&inf, &big, 1.0);
    prop_assert!(gap <= 1e-6, "gap {gap:e}");
    Ok(())
}

/// Small unit-level panel with three cohorts and a never-treated group.
pub fn unit_source(seed: u64) -> (PanelSource, SsdidConfig) {
    let mut spec = DgpSpec::new(240, 8);
    spec.rank = 1;
    spec.assignment = Assignment::Independent { start: 4, end: 6, never_share: 0.3 };
    spec.seed = seed;
    let sim = simulate(&spec).unwrap();
    let source = PanelSource::Units { panel: sim.panel, layout: LayoutSpec::Scheme(CovariateScheme::default()) };
    (source, SsdidConfig::new(4, 6, 2))
}

fn granularity(row_level: bool) -> Granularity {
    if row_level {
        Granularity::CohortRow
    } else {
        Granularity::Unit
    }
}

/// Constant resampling weights reproduce the point estimate bit for bit.
pub fn constant_xi_identity(seed: u64, c: f64, row_level: bool) -> Check {
    let (source, cfg) = unit_source(seed);
    let mut bcfg = BootstrapConfig::new(3, seed);
    bcfg.xi = XiDraw::Constant(c);
    bcfg.granularity = granularity(row_level);
    let res = bootstrap(&source, &EstimatorSpec::Sequential(cfg), &bcfg).unwrap();
    for rep in &res.replicates {
        for (t, v) in res.targets.iter().zip(rep) {
            prop_assert!(t.point.to_bits() == v.to_bits(), "{}: {} vs {}", t.name, t.point, v);
        }
    }
    Ok(())
}

/// Same seed, same replicates, whether or not replicates run in parallel.
pub fn bootstrap_determinism(seed: u64, row_level: bool) -> Check {
    let (source, cfg) = unit_source(seed);
    let est = EstimatorSpec::Sequential(cfg);
    let mut bcfg = BootstrapConfig::new(6, seed.wrapping_add(1));
    bcfg.granularity = granularity(row_level);
    let first = bootstrap(&source, &est, &bcfg).unwrap();
    let again = bootstrap(&source, &est, &bcfg).unwrap();
    bcfg.parallel = true;
    let par = bootstrap(&source, &est, &bcfg).unwrap();
    let bits = |r: &ssdid::inference::BootstrapResult| -> Vec<u64> {
        r.replicates.iter().flatten().chain(r.targets.iter().map(|t| &t.se)).map(|v| v.to_bits()).collect()
    };
    prop_assert_eq!(bits(&first), bits(&again));
    prop_assert_eq!(bits(&first), bits(&par));
    Ok(())
}
