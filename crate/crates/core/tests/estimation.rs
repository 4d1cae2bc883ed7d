mod common;

use common::random_instance;
use ssdid::dgp::{derive_seed, simulate, Assignment, DgpSpec, NoiseSpec, TauTruth};
use ssdid::error::Error;
use ssdid::inference::{
    bootstrap, bootstrap_many, BootstrapConfig, EstimatorSpec, Granularity, IntervalKind, LayoutSpec, PanelSource,
};
use ssdid::oracle::run_sequential_ols;
use ssdid::panel::{Adoption, CohortPanel, CohortRow, CovariateScheme};
use ssdid::placebo::{run_placebo, PlaceboOptions};
use ssdid::sequential::{default_eta_rows, default_eta_units, run_sequential, EtaChoice, SsdidConfig};

fn two_way_spec(noise_sd: f64) -> DgpSpec {
    let mut spec = DgpSpec::new(500, 10);
    spec.noise = NoiseSpec::Iid { sd: noise_sd };
    spec.tau = TauTruth::Constant(2.0);
    spec.assignment = Assignment::Independent { start: 4, end: 7, never_share: 0.3 };
    spec.seed = 12;
    spec
}

fn cohort_source(spec: &DgpSpec) -> PanelSource {
    let sim = simulate(spec).unwrap();
    PanelSource::Units { panel: sim.panel, layout: LayoutSpec::Scheme(CovariateScheme::default()) }
}

#[test]
fn default_eta_matches_planted_noise() {
    let mut spec = DgpSpec::new(10_000, 10);
    spec.noise = NoiseSpec::Iid { sd: 0.1 };
    spec.seed = 1;
    let sim = simulate(&spec).unwrap();
    let expected = 0.1 / 10_000f64.powf(0.45);
    let eta = default_eta_units(&sim.panel).unwrap();
    assert!((eta / expected - 1.0).abs() <= 0.2, "eta {eta:e} vs {expected:e}");
    let rows = cohort_source(&spec).cohort_panel().unwrap();
    let eta_rows = default_eta_rows(&rows).unwrap();
    assert!((eta_rows / expected - 1.0).abs() <= 0.2, "row-level eta {eta_rows:e}");
}

#[test]
fn noiseless_two_way_panel_is_recovered_at_any_eta() {
    let panel = cohort_source(&two_way_spec(0.0)).cohort_panel().unwrap();
    for eta in [EtaChoice::Auto, EtaChoice::Value(1e-3), EtaChoice::Value(10.0), EtaChoice::Inf] {
        let grid = run_sequential(&panel, &SsdidConfig::new(4, 7, 3).with_eta(eta)).unwrap();
        for c in &grid.cells {
            assert!((c.tau_hat - 2.0).abs() < 1e-10, "{eta:?}: {c:?}");
        }
        for t in &grid.tau_by_horizon {
            assert!((t - 2.0).abs() < 1e-10);
        }
    }
}

#[test]
fn small_eta_matches_oracle_on_noiseless_factor_panels() {
    for seed in 0..10u64 {
        let inst = random_instance(500 + seed, 8, 4, 1 + (seed % 2) as usize, 0.0);
        let ols = run_sequential_ols(&inst.panel, &inst.factors, &inst.oracle).unwrap();
        let finite: Vec<u32> = inst.panel.cohorts().iter().filter_map(|a| a.period()).collect();
        let cfg = SsdidConfig::new(finite[0], *finite.last().unwrap(), 0);
        for (eta, tol) in [(1e-6, 1e-4), (1e-8, 1e-6)] {
            let grid = run_sequential(&inst.panel, &cfg.clone().with_eta(EtaChoice::Value(eta))).unwrap();
            for c in grid.cells.iter() {
                if let Some(o) = ols.cell(c.row, c.k) {
                    assert!((c.tau_hat - o.tau_hat).abs() <= tol, "seed {seed} eta {eta}: {c:?}");
                }
                assert!((c.tau_hat - inst.true_tau(c.row, c.k)).abs() <= tol);
            }
        }
    }
}

#[test]
fn latest_cohort_without_later_controls_fails() {
    let rows = vec![CohortRow::cohort(Adoption::At(3), 5), CohortRow::cohort(Adoption::At(5), 5)];
    let y = nalgebra::DMatrix::from_fn(2, 6, |i, p| (i * 10 + p) as f64);
    let panel = CohortPanel::new(rows, y).unwrap();
    let err = run_sequential(&panel, &SsdidConfig::new(3, 5, 0).with_eta(EtaChoice::Inf)).unwrap_err();
    assert!(matches!(err, Error::NoControls { adoption: 5 }), "{err:?}");
}

fn wald_and_percentile(row_level: bool) {
    let source = cohort_source(&two_way_spec(1.0));
    let est = EstimatorSpec::Sequential(SsdidConfig::new(4, 7, 2));
    let mut cfg = BootstrapConfig::new(40, 6);
    if row_level {
        cfg.granularity = Granularity::CohortRow;
    }
    let wald = bootstrap(&source, &est, &cfg).unwrap();
    cfg.interval = IntervalKind::Percentile;
    let pct = bootstrap(&source, &est, &cfg).unwrap();
    assert_eq!(wald.replicates, pct.replicates);
    assert_eq!(wald.row_level, row_level);
    for (i, (w, p)) in wald.targets.iter().zip(&pct.targets).enumerate() {
        let mut col: Vec<f64> = wald.replicates.iter().map(|r| r[i]).collect();
        let n = col.len() as f64;
        let m = col.iter().sum::<f64>() / n;
        let sd = (col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((w.se - sd).abs() <= 1e-12 * sd.max(1.0));
        assert!((w.ci_upper - w.point - 1.959_963_984_540_054 * sd).abs() <= 1e-9);
        assert!((w.point - w.ci_lower - 1.959_963_984_540_054 * sd).abs() <= 1e-9);
        col.sort_by(f64::total_cmp);
        // type-7 quantile at 0.025 and 0.975 of 40 values
        let q = |p: f64| {
            let h = (n - 1.0) * p;
            let lo = h.floor() as usize;
            col[lo] + (h - lo as f64) * (col[(lo + 1).min(col.len() - 1)] - col[lo])
        };
        assert!((p.ci_lower - q(0.025)).abs() <= 1e-12);
        assert!((p.ci_upper - q(0.975)).abs() <= 1e-12);
    }
}

#[test]
fn bootstrap_intervals_from_replicates() {
    wald_and_percentile(false);
    wald_and_percentile(true);
}

#[test]
fn bootstrap_rejects_bad_configs() {
    let source = cohort_source(&two_way_spec(1.0));
    let est = EstimatorSpec::Sequential(SsdidConfig::new(4, 7, 2));
    let err = bootstrap(&source, &est, &BootstrapConfig::new(1, 0)).unwrap_err();
    assert_eq!(err.code(), "inference.invalid_config");
    let rows = PanelSource::Rows(source.cohort_panel().unwrap());
    let err = bootstrap(&rows, &est, &BootstrapConfig::new(10, 0)).unwrap_err();
    assert_eq!(err.code(), "inference.invalid_config");
}

#[test]
fn estimators_share_replicate_draws() {
    let source = cohort_source(&two_way_spec(1.0));
    let base = SsdidConfig::new(4, 7, 1);
    let specs = [EstimatorSpec::Sequential(base.clone()), EstimatorSpec::Sequential(base.with_eta(EtaChoice::Inf))];
    let cfg = BootstrapConfig::new(8, 21);
    let joint = bootstrap_many(&source, &specs, &cfg).unwrap();
    for (spec, res) in specs.iter().zip(&joint) {
        assert_eq!(bootstrap(&source, spec, &cfg).unwrap().replicates, res.replicates);
    }
}

#[test]
fn oracle_bootstrap_keeps_factors_fixed() {
    let inst = random_instance(44, 10, 4, 2, 0.5);
    let source = PanelSource::Rows(inst.panel.clone());
    let est = EstimatorSpec::SequentialOls { factors: inst.factors.clone(), oracle: inst.oracle };
    let mut cfg = BootstrapConfig::new(10, 2);
    cfg.granularity = Granularity::CohortRow;
    let res = bootstrap(&source, &est, &cfg).unwrap();
    let point = run_sequential_ols(&inst.panel, &inst.factors, &inst.oracle).unwrap();
    assert_eq!(res.point.cells, point.cells);
    assert!(res.targets.iter().all(|t| t.se.is_finite() && t.se >= 0.0));
}

/// Noiseless rank-1 panel, never-treated groups kept as separate controls.
fn noiseless_factor_source() -> PanelSource {
    let mut spec = DgpSpec::new(160, 12);
    spec.rank = 1;
    spec.ife_sd = Some(1.0);
    spec.noise = NoiseSpec::Iid { sd: 0.0 };
    spec.n_groups = Some(8);
    spec.assignment = Assignment::Fixed {
        adoptions: vec![Adoption::At(6), Adoption::At(7), Adoption::At(8), Adoption::Never],
    };
    spec.seed = 3;
    spec.structure_seed = 3;
    let sim = simulate(&spec).unwrap();
    PanelSource::Units { panel: sim.panel, layout: LayoutSpec::Scheme(CovariateScheme::hybrid(true)) }
}

#[test]
fn placebo_on_a_correct_noiseless_model_is_zero() {
    let source = noiseless_factor_source();
    let cfg = SsdidConfig::new(6, 8, 0).with_eta(EtaChoice::Value(1e-7));
    let report = run_placebo(&source, &cfg, &PlaceboOptions::new(2), &BootstrapConfig::new(10, 1)).unwrap();
    assert_eq!(report.k_max, 1);
    assert_eq!(report.horizons.iter().map(|h| h.k).collect::<Vec<_>>(), [0, 1]);
    for c in &report.grid().cells {
        assert!(c.tau_hat.abs() <= 1e-8, "{c:?}");
    }
    assert!(report.pass);
}

#[test]
fn placebo_shift_past_first_adoption_is_rejected() {
    let source = noiseless_factor_source();
    let cfg = SsdidConfig::new(6, 8, 0);
    let err = run_placebo(&source, &cfg, &PlaceboOptions::new(5), &BootstrapConfig::new(10, 1)).unwrap_err();
    assert!(matches!(err, Error::ShiftOutOfRange { .. }), "{err:?}");
}

#[test]
fn placebo_flags_plain_did_under_confounded_factors() {
    let seeds = 100u64;
    let mut flagged = 0;
    for rep in 0..seeds {
        let mut spec = DgpSpec::state_panel(4000);
        spec.signal = 0.8;
        spec.seed = derive_seed(31, rep);
        let sim = simulate(&spec).unwrap();
        let source = PanelSource::Units { panel: sim.panel, layout: LayoutSpec::Scheme(CovariateScheme::grouped()) };
        let cfg = SsdidConfig::new(20, 32, 0).with_eta(EtaChoice::Inf);
        let report =
            run_placebo(&source, &cfg, &PlaceboOptions::new(2), &BootstrapConfig::new(50, derive_seed(32, rep))).unwrap();
        flagged += report.horizons.iter().any(|h| h.z.abs() > 1.96) as usize;
    }
    assert!(flagged as f64 >= 0.8 * seeds as f64, "flagged {flagged} of {seeds}");
}
