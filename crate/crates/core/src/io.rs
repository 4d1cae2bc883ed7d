//! CSV readers and writers for panels, factor files and result tables.
//!
//! Writers take any `Write`; callers decide where the bytes land.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::dgp::McSummary;
use crate::error::{Error, Result};
use crate::inference::BootstrapResult;
use crate::oracle::FactorStructure;
use crate::panel::{Adoption, CohortPanel, PanelRecord};
use crate::placebo::PlaceboReport;
use crate::sequential::{EstimateGrid, Mu};

fn parse_err(what: &str, line: u64, message: impl Into<String>) -> Error {
    Error::Parse { what: format!("{what} line {line}"), message: message.into() }
}

fn open(path: &Path) -> Result<File> {
    Ok(File::open(path)?)
}

fn column(headers: &csv::StringRecord, name: &str) -> Option<usize> {
    headers.iter().position(|h| h.trim().eq_ignore_ascii_case(name))
}

/// Long-format panel: `unit,period,outcome,adoption[,weight][,group]`.
pub fn read_panel<R: Read>(reader: R) -> Result<Vec<PanelRecord>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let need = |name: &str| {
        column(&headers, name).ok_or_else(|| parse_err("panel header", 1, format!("missing column `{name}`")))
    };
    let (unit, period, outcome, adoption) = (need("unit")?, need("period")?, need("outcome")?, need("adoption")?);
    let weight = column(&headers, "weight");
    let group = column(&headers, "group");

    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let field = |i: usize| rec.get(i).unwrap_or("");
        let p = field(period).parse::<u32>().map_err(|e| parse_err("panel", line, format!("period: {e}")))?;
        let y = field(outcome).parse::<f64>().map_err(|e| parse_err("panel", line, format!("outcome: {e}")))?;
        let a = Adoption::parse(field(adoption)).map_err(|e| parse_err("panel", line, e.to_string()))?;
        let mut r = PanelRecord::new(field(unit), p, y, a);
        if let Some(w) = weight.map(field).filter(|s| !s.is_empty()) {
            r.weight = w.parse::<f64>().map_err(|e| parse_err("panel", line, format!("weight: {e}")))?;
        }
        if let Some(g) = group.map(field).filter(|s| !s.is_empty()) {
            r.group = Some(g.to_string());
        }
        out.push(r);
    }
    Ok(out)
}

pub fn read_panel_path(path: &Path) -> Result<Vec<PanelRecord>> {
    read_panel(open(path)?)
}

pub fn write_panel<W: Write>(writer: W, records: &[PanelRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["unit", "period", "outcome", "adoption", "weight", "group"])?;
    for r in records {
        w.write_record([
            r.unit.clone(),
            r.period.to_string(),
            r.outcome.to_string(),
            r.adoption.to_string(),
            r.weight.to_string(),
            r.group.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Factor file `kind,index,f1..fr`: `theta` rows are keyed by series label,
/// `psi` rows by period. Every series and period must appear once.
pub fn read_factors<R: Read>(reader: R, panel: &CohortPanel) -> Result<FactorStructure> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.len() < 2 || !headers[0].eq_ignore_ascii_case("kind") || !headers[1].eq_ignore_ascii_case("index") {
        return Err(parse_err("factors header", 1, "expected `kind,index,f1,...`"));
    }
    let r = headers.len() - 2;
    let t = panel.periods() as usize;
    let mut theta = DMatrix::from_element(panel.n_rows(), r, f64::NAN);
    let mut psi = DMatrix::from_element(t, r, f64::NAN);
    let mut seen_theta = vec![false; panel.n_rows()];
    let mut seen_psi = vec![false; t];
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let values: Vec<f64> = (0..r)
            .map(|j| rec.get(j + 2).unwrap_or("").parse::<f64>().map_err(|e| parse_err("factors", line, e.to_string())))
            .collect::<Result<_>>()?;
        let index = rec.get(1).unwrap_or("");
        let (target, seen, row) = match rec.get(0).unwrap_or("").to_ascii_lowercase().as_str() {
            "theta" => {
                let row = panel
                    .row_by_label(index)
                    .ok_or_else(|| Error::FactorMismatch(format!("no series labelled `{index}`")))?;
                (&mut theta, &mut seen_theta, row)
            }
            "psi" => {
                let p = index.parse::<usize>().map_err(|e| parse_err("factors", line, format!("period: {e}")))?;
                if p == 0 || p > t {
                    return Err(Error::FactorMismatch(format!("period {p} outside 1..={t}")));
                }
                (&mut psi, &mut seen_psi, p - 1)
            }
            other => return Err(parse_err("factors", line, format!("unknown kind `{other}`"))),
        };
        if seen[row] {
            return Err(Error::FactorMismatch(format!("duplicate entry for `{index}`")));
        }
        seen[row] = true;
        for (j, v) in values.into_iter().enumerate() {
            target[(row, j)] = v;
        }
    }
    if r > 0 {
        if let Some(missing) = seen_theta.iter().position(|s| !s) {
            return Err(Error::FactorMismatch(format!("no loadings for series `{}`", panel.row(missing).label)));
        }
        if let Some(missing) = seen_psi.iter().position(|s| !s) {
            return Err(Error::FactorMismatch(format!("no factors for period {}", missing + 1)));
        }
    }
    FactorStructure::new(theta, psi)
}

pub fn read_factors_path(path: &Path, panel: &CohortPanel) -> Result<FactorStructure> {
    read_factors(open(path)?, panel)
}

pub fn write_factors<W: Write>(writer: W, f: &FactorStructure, panel: &CohortPanel) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let r = f.rank();
    let mut header = vec!["kind".to_string(), "index".to_string()];
    header.extend((1..=r).map(|j| format!("f{j}")));
    w.write_record(&header)?;
    for row in 0..panel.n_rows() {
        let mut rec = vec!["theta".to_string(), panel.row(row).label.clone()];
        rec.extend((0..r).map(|j| f.theta[(row, j)].to_string()));
        w.write_record(&rec)?;
    }
    for p in 0..f.psi.nrows() {
        let mut rec = vec!["psi".to_string(), (p + 1).to_string()];
        rec.extend((0..r).map(|j| f.psi[(p, j)].to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Horizon weights file `a,mu` keyed by series label.
pub fn read_mu<R: Read>(reader: R) -> Result<Mu> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let label = rec.get(0).unwrap_or("").to_string();
        let w = rec
            .get(1)
            .unwrap_or("")
            .parse::<f64>()
            .map_err(|e| parse_err("mu", line, e.to_string()))?;
        out.push((label, w));
    }
    Ok(Mu::Custom(out))
}

pub fn read_mu_path(path: &Path) -> Result<Mu> {
    read_mu(open(path)?)
}

pub fn write_truths<W: Write>(writer: W, truths: &[(u32, u32, f64)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["a", "k", "tau"])?;
    for (a, k, tau) in truths {
        w.write_record([a.to_string(), k.to_string(), tau.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Cell estimates `a,k,tau_hat`, sorted by cohort then lag. A `series`
/// column is appended when several series share an adoption time.
pub fn write_estimates<W: Write>(writer: W, grid: &EstimateGrid) -> Result<()> {
    let cells = grid.sorted_cells();
    let labelled = cells.iter().any(|c| c.label != c.a.to_string());
    let mut w = csv::Writer::from_writer(writer);
    if labelled {
        w.write_record(["a", "k", "tau_hat", "series"])?;
    } else {
        w.write_record(["a", "k", "tau_hat"])?;
    }
    for c in cells {
        let mut rec = vec![c.a.to_string(), c.k.to_string(), c.tau_hat.to_string()];
        if labelled {
            rec.push(c.label.clone());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Horizon table `k,tau_k,se,ci_lo,ci_hi`; inference columns are empty
/// without a bootstrap.
pub fn write_horizons<W: Write>(writer: W, grid: &EstimateGrid, boot: Option<&BootstrapResult>) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["k", "tau_k", "se", "ci_lo", "ci_hi"])?;
    for (&k, &tau) in grid.horizons.iter().zip(&grid.tau_by_horizon) {
        let (se, lo, hi) = match boot.and_then(|b| b.horizon(k)) {
            Some(t) => (t.se.to_string(), t.ci_lower.to_string(), t.ci_upper.to_string()),
            None => (String::new(), String::new(), String::new()),
        };
        w.write_record([k.to_string(), tau.to_string(), se, lo, hi])?;
    }
    w.flush()?;
    Ok(())
}

/// Replicate dump `replicate,target,estimate` (replicates numbered from 1).
pub fn write_replicates<W: Write>(writer: W, boot: &BootstrapResult) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["replicate", "target", "estimate"])?;
    for (b, values) in boot.replicates.iter().enumerate() {
        for (t, v) in boot.targets.iter().zip(values) {
            w.write_record([(b + 1).to_string(), t.name.clone(), v.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_placebo<W: Write>(writer: W, report: &PlaceboReport) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["horizon", "estimate", "se", "z"])?;
    for h in &report.horizons {
        w.write_record([h.k.to_string(), h.estimate.to_string(), h.se.to_string(), h.z.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_mc_rmse<W: Write>(writer: W, summary: &McSummary) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["estimator", "k", "rmse", "bias"])?;
    for r in &summary.rows {
        w.write_record([r.estimator.clone(), r.k.to_string(), r.rmse.to_string(), r.bias.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_mc_coverage<W: Write>(writer: W, summary: &McSummary) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["estimator", "k", "coverage", "mean_t", "sd_t"])?;
    for r in &summary.rows {
        w.write_record([r.estimator.clone(), r.k.to_string(), opt(r.coverage), opt(r.mean_t), opt(r.sd_t)])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_mc_tstats<W: Write>(writer: W, summary: &McSummary) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["rep", "estimator", "k", "t"])?;
    for r in summary.records.iter().filter(|r| r.t_stat.is_some()) {
        w.write_record([r.rep.to_string(), r.estimator.clone(), r.k.to_string(), opt(r.t_stat)])?;
    }
    w.flush()?;
    Ok(())
}
