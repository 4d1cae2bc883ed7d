//! Placebo checks: backdate adoption by P periods and estimate effects over
//! horizons that fall before the true adoption.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{bootstrap, BootstrapConfig, BootstrapResult, EstimatorSpec, PanelSource};
use crate::sequential::{EstimateGrid, SsdidConfig};

/// Standard errors below this are treated as zero when forming z-scores.
pub const SE_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlaceboOptions {
    pub shift: u32,
    /// |z| threshold applied to horizon aggregates.
    pub threshold: f64,
    /// Horizon cap overriding `shift − 1`. Horizons k ≥ shift then estimate
    /// true effects at lag k − shift (anticipation mode).
    pub k_max_override: Option<u32>,
}

impl PlaceboOptions {
    pub fn new(shift: u32) -> Self {
        Self { shift, threshold: 1.96, k_max_override: None }
    }

    pub fn k_max(&self) -> u32 {
        self.k_max_override.unwrap_or(self.shift.saturating_sub(1))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlaceboHorizon {
    pub k: u32,
    pub estimate: f64,
    pub se: f64,
    pub z: f64,
}

#[derive(Debug, Clone)]
pub struct PlaceboReport {
    pub shift: u32,
    pub k_max: u32,
    pub threshold: f64,
    pub config: SsdidConfig,
    pub horizons: Vec<PlaceboHorizon>,
    /// (target name, z) for every cell.
    pub cell_z: Vec<(String, f64)>,
    pub pass: bool,
    pub bootstrap: BootstrapResult,
}

impl PlaceboReport {
    pub fn grid(&self) -> &EstimateGrid {
        &self.bootstrap.point
    }
}

/// `estimate / se`, with a floor so numerically zero estimates give z = 0.
pub fn z_score(estimate: f64, se: f64) -> f64 {
    if se > SE_FLOOR {
        estimate / se
    } else if estimate.abs() <= SE_FLOOR {
        0.0
    } else {
        f64::INFINITY.copysign(estimate)
    }
}

/// Cohort range and horizon cap on the shifted timeline.
pub fn placebo_config(cfg: &SsdidConfig, opts: &PlaceboOptions) -> Result<SsdidConfig> {
    if opts.shift == 0 {
        return Err(Error::InvalidShift);
    }
    if opts.shift + 2 > cfg.a_max {
        return Err(Error::ShiftOutOfRange { shift: opts.shift, adoption: cfg.a_max.to_string() });
    }
    let mut out = cfg.clone();
    out.a_min = cfg.a_min.saturating_sub(opts.shift).max(2);
    out.a_max = cfg.a_max - opts.shift;
    out.k_max = opts.k_max();
    Ok(out)
}

pub fn run_placebo(
    source: &PanelSource,
    cfg: &SsdidConfig,
    opts: &PlaceboOptions,
    bcfg: &BootstrapConfig,
) -> Result<PlaceboReport> {
    let shifted = source.shift_adoption(opts.shift)?;
    let pcfg = placebo_config(cfg, opts)?;
    let boot = bootstrap(&shifted, &EstimatorSpec::Sequential(pcfg.clone()), bcfg)?;

    let horizons: Vec<PlaceboHorizon> = boot
        .point
        .horizons
        .iter()
        .filter_map(|&k| boot.horizon(k))
        .map(|t| {
            let k = match t.kind {
                crate::inference::TargetKind::Horizon { k } => k,
                _ => unreachable!(),
            };
            PlaceboHorizon { k, estimate: t.point, se: t.se, z: z_score(t.point, t.se) }
        })
        .collect();
    let cell_z = boot
        .targets
        .iter()
        .filter(|t| matches!(t.kind, crate::inference::TargetKind::Cell { .. }))
        .map(|t| (t.name.clone(), z_score(t.point, t.se)))
        .collect();
    // In anticipation mode only the pre-adoption horizons are placebo checks.
    let pass = horizons.iter().filter(|h| h.k < opts.shift).all(|h| h.z.abs() <= opts.threshold);
    Ok(PlaceboReport {
        shift: opts.shift,
        k_max: pcfg.k_max,
        threshold: opts.threshold,
        config: pcfg,
        horizons,
        cell_z,
        pass,
        bootstrap: boot,
    })
}
