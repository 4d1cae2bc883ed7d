#![allow(dead_code)]

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use ssdid::oracle::{check_affine_hull, FactorStructure, OracleConfig};
use ssdid::panel::{Adoption, CohortPanel, CohortRow};

pub mod props;

/// A cohort-level instance with known structure.
pub struct Instance {
    pub panel: CohortPanel,
    pub factors: FactorStructure,
    pub oracle: OracleConfig,
    /// True effect of series `row` at horizon `k`, indexed `[row][k]`.
    pub tau: Vec<Vec<f64>>,
}

impl Instance {
    pub fn true_tau(&self, row: usize, k: u32) -> f64 {
        self.tau[row][k as usize]
    }
}

/// Random instance: `n_cohorts` distinct finite adoption times, `r + 1`
/// never-treated series (so the control loadings can span), random shares,
/// two-way effects, rank-r interactive effects, heterogeneous effects and
/// optional noise. Retries until the affine-hull condition holds.
pub fn random_instance(seed: u64, periods: u32, n_cohorts: usize, r: usize, noise: f64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let lo = r as u32 + 2;
        let mut times: Vec<u32> = (lo..=periods).collect();
        for i in (1..times.len()).rev() {
            let j = rng.random_range(0..=i);
            times.swap(i, j);
        }
        let mut times: Vec<u32> = times.into_iter().take(n_cohorts).collect();
        times.sort_unstable();

        let mut rows: Vec<CohortRow> = times
            .iter()
            .map(|&a| CohortRow::new(Adoption::At(a), a.to_string(), rng.random_range(1.0..5.0), 1))
            .collect();
        for g in 0..=r {
            rows.push(CohortRow::new(Adoption::Never, format!("inf:{g}"), rng.random_range(1.0..5.0), 1));
        }
        let n = rows.len();
        let t = periods as usize;
        let mut normal = || -> f64 { rng.sample(StandardNormal) };
        let theta = DMatrix::from_fn(n, r, |_, _| normal());
        let psi = DMatrix::from_fn(t, r, |_, _| normal());
        let alpha: Vec<f64> = (0..n).map(|_| normal()).collect();
        let beta: Vec<f64> = (0..t).map(|_| normal()).collect();
        let tau: Vec<Vec<f64>> = (0..n).map(|_| (0..t).map(|_| 1.0 + 0.5 * normal()).collect()).collect();
        let ife = &theta * psi.transpose();
        let mut y = DMatrix::zeros(n, t);
        for i in 0..n {
            for p in 0..t {
                let mut v = alpha[i] + beta[p] + ife[(i, p)] + noise * normal();
                if let Adoption::At(a) = rows[i].adoption {
                    if p as u32 + 1 >= a {
                        v += tau[i][p + 1 - a as usize];
                    }
                }
                y[(i, p)] = v;
            }
        }
        let panel = CohortPanel::new(rows, y).unwrap();
        let factors = FactorStructure::new(theta, psi).unwrap();
        if let Some(oracle) = well_conditioned_config(&factors, &panel, HULL_MARGIN) {
            let has_cells = (0..panel.n_rows()).any(|i| {
                matches!(panel.row(i).adoption, Adoption::At(a) if a >= oracle.t_star && a <= oracle.a_star)
            });
            if has_cells {
                return Instance { panel, factors, oracle, tau };
            }
        }
    }
}

/// Smallest admissible r-th singular value of the demeaned loadings and
/// factors. Near-degenerate spans make both oracle paths lose digits in
/// proportion to their conditioning, which would blur exact comparisons.
pub const HULL_MARGIN: f64 = 0.05;

/// Like `tightest_config`, but each affine-hull span must clear `margin`.
pub fn well_conditioned_config(f: &FactorStructure, panel: &CohortPanel, margin: f64) -> Option<OracleConfig> {
    let r = f.rank();
    let ok = |cfg: &OracleConfig, loadings: bool| -> bool {
        let rep = check_affine_hull(f, panel, cfg).unwrap();
        if r == 0 {
            return true;
        }
        let sv = if loadings { &rep.loadings_singular_values } else { &rep.factors_singular_values };
        sv.len() >= r && sv[r - 1] >= margin
    };
    for a_star in (2..=panel.periods()).rev() {
        if !(0..panel.n_rows()).any(|j| panel.row(j).adoption.is_after(a_star)) {
            continue;
        }
        if !ok(&OracleConfig { a_star, t_star: a_star }, true) {
            continue;
        }
        for t_star in 2..=a_star {
            let cfg = OracleConfig { a_star, t_star };
            if ok(&cfg, false) {
                return Some(cfg);
            }
        }
    }
    None
}
