//! Long-format panel ingestion, validation, and aggregation into cohort series.
//!
//! A [`ValidatedPanel`] holds one balanced outcome path per unit. A
//! [`RowLayout`] decides which units are averaged together (adoption cohorts,
//! covariate-split never-treated series, covariate groups, or one row per unit
//! for pre-aggregated data), and [`RowLayout::aggregate`] produces the
//! [`CohortPanel`] that the estimators consume.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Treatment adoption period. `Never` sorts after every finite period.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Adoption {
    At(u32),
    Never,
}

impl Adoption {
    pub fn period(self) -> Option<u32> {
        match self {
            Adoption::At(a) => Some(a),
            Adoption::Never => None,
        }
    }

    pub fn is_never(self) -> bool {
        matches!(self, Adoption::Never)
    }

    /// True when the series is still untreated in period `a`, i.e. adoption > a.
    pub fn is_after(self, a: u32) -> bool {
        match self {
            Adoption::At(x) => x > a,
            Adoption::Never => true,
        }
    }

    /// Whether period `t` (1-based) is untreated for this adoption time.
    pub fn untreated_at(self, t: u32) -> bool {
        self.is_after(t)
    }

    /// Parses `""`, `inf`, `Inf`, `infinity` as never-treated, integers as periods.
    pub fn parse(raw: &str) -> Result<Self> {
        let s = raw.trim();
        if s.is_empty() || s.eq_ignore_ascii_case("inf") || s.eq_ignore_ascii_case("infinity") {
            return Ok(Adoption::Never);
        }
        s.parse::<u32>().map(Adoption::At).map_err(|_| Error::Parse {
            what: "adoption".into(),
            message: format!("expected a period or `inf`, got `{raw}`"),
        })
    }
}

impl fmt::Display for Adoption {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Adoption::At(a) => write!(f, "{a}"),
            Adoption::Never => f.write_str("inf"),
        }
    }
}

/// One unit-period observation.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelRecord {
    pub unit: String,
    pub period: u32,
    pub outcome: f64,
    pub adoption: Adoption,
    /// Aggregation weight, 1 unless supplied.
    pub weight: f64,
    pub group: Option<String>,
}

impl PanelRecord {
    pub fn new(unit: impl Into<String>, period: u32, outcome: f64, adoption: Adoption) -> Self {
        Self { unit: unit.into(), period, outcome, adoption, weight: 1.0, group: None }
    }

    pub fn with_weight(mut self, weight: f64) -> Self {
        self.weight = weight;
        self
    }

    pub fn with_group(mut self, group: impl Into<String>) -> Self {
        self.group = Some(group.into());
        self
    }
}

/// A unit's full outcome path, periods 1..=T stored at indices 0..T.
#[derive(Debug, Clone, PartialEq)]
pub struct Unit {
    pub id: String,
    pub adoption: Adoption,
    pub weight: f64,
    pub group: Option<String>,
    pub outcomes: Vec<f64>,
}

/// A balanced panel with consistent per-unit attributes.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidatedPanel {
    periods: u32,
    units: Vec<Unit>,
}

/// Checks uniqueness, balance and adoption consistency of a record list.
///
/// Units keep the order of their first appearance; bootstrap weights are keyed
/// by that index.
pub fn validate(records: &[PanelRecord]) -> Result<ValidatedPanel> {
    if records.is_empty() {
        return Err(Error::EmptyPanel);
    }
    let mut index: HashMap<&str, usize> = HashMap::new();
    let mut units: Vec<(&PanelRecord, Vec<(u32, f64)>)> = Vec::new();
    let mut periods = 0u32;

    for rec in records {
        if rec.period == 0 {
            return Err(Error::InvalidRecord(format!("unit {} has period 0", rec.unit)));
        }
        if !rec.outcome.is_finite() {
            return Err(Error::InvalidRecord(format!(
                "unit {} period {} has a non-finite outcome",
                rec.unit, rec.period
            )));
        }
        if !(rec.weight.is_finite() && rec.weight >= 0.0) {
            return Err(Error::InvalidRecord(format!("unit {} has an invalid weight", rec.unit)));
        }
        if rec.adoption == Adoption::At(0) {
            return Err(Error::InvalidRecord(format!("unit {} adopts at period 0", rec.unit)));
        }
        periods = periods.max(rec.period);

        match index.get(rec.unit.as_str()) {
            Some(&i) => {
                let (first, cells) = &mut units[i];
                if first.adoption != rec.adoption {
                    return Err(Error::InconsistentAdoption {
                        unit: rec.unit.clone(),
                        first: first.adoption.to_string(),
                        second: rec.adoption.to_string(),
                    });
                }
                if first.weight != rec.weight {
                    return Err(Error::InconsistentUnitAttribute {
                        unit: rec.unit.clone(),
                        field: "weight",
                    });
                }
                if first.group != rec.group {
                    return Err(Error::InconsistentUnitAttribute {
                        unit: rec.unit.clone(),
                        field: "group",
                    });
                }
                cells.push((rec.period, rec.outcome));
            }
            None => {
                index.insert(rec.unit.as_str(), units.len());
                units.push((rec, vec![(rec.period, rec.outcome)]));
            }
        }
    }

    let mut out = Vec::with_capacity(units.len());
    for (first, cells) in units {
        if let Adoption::At(a) = first.adoption {
            if a > periods {
                return Err(Error::InvalidRecord(format!(
                    "unit {} adopts at {a}, after the last period {periods}",
                    first.unit
                )));
            }
        }
        let mut outcomes: Vec<Option<f64>> = vec![None; periods as usize];
        for (t, y) in cells {
            let slot = &mut outcomes[(t - 1) as usize];
            if slot.is_some() {
                return Err(Error::DuplicateCell { unit: first.unit.clone(), period: t });
            }
            *slot = Some(y);
        }
        let outcomes = outcomes
            .into_iter()
            .enumerate()
            .map(|(i, y)| {
                y.ok_or_else(|| Error::UnbalancedPanel {
                    unit: first.unit.clone(),
                    period: i as u32 + 1,
                    periods,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(Unit {
            id: first.unit.clone(),
            adoption: first.adoption,
            weight: first.weight,
            group: first.group.clone(),
            outcomes,
        });
    }
    Ok(ValidatedPanel { periods, units: out })
}

impl ValidatedPanel {
    /// Builds a panel from complete unit paths (used by the simulator, which
    /// produces balanced data by construction).
    pub fn from_units(periods: u32, units: Vec<Unit>) -> Result<Self> {
        if units.is_empty() {
            return Err(Error::EmptyPanel);
        }
        for u in &units {
            if u.outcomes.len() != periods as usize {
                return Err(Error::UnbalancedPanel {
                    unit: u.id.clone(),
                    period: u.outcomes.len() as u32 + 1,
                    periods,
                });
            }
        }
        Ok(Self { periods, units })
    }

    pub fn periods(&self) -> u32 {
        self.periods
    }

    pub fn n_units(&self) -> usize {
        self.units.len()
    }

    pub fn units(&self) -> &[Unit] {
        &self.units
    }

    /// Unit count per adoption time.
    pub fn cohort_census(&self) -> BTreeMap<Adoption, usize> {
        let mut census = BTreeMap::new();
        for u in &self.units {
            *census.entry(u.adoption).or_insert(0) += 1;
        }
        census
    }

    pub fn records(&self) -> Vec<PanelRecord> {
        let mut out = Vec::with_capacity(self.units.len() * self.periods as usize);
        for u in &self.units {
            for (i, &y) in u.outcomes.iter().enumerate() {
                out.push(PanelRecord {
                    unit: u.id.clone(),
                    period: i as u32 + 1,
                    outcome: y,
                    adoption: u.adoption,
                    weight: u.weight,
                    group: u.group.clone(),
                });
            }
        }
        out
    }

    /// Backdates every finite adoption by `shift` periods.
    pub fn shift_adoption(&self, shift: u32) -> Result<ValidatedPanel> {
        if shift == 0 {
            return Err(Error::InvalidShift);
        }
        let mut units = self.units.clone();
        for u in &mut units {
            u.adoption = shift_one(u.adoption, shift)?;
        }
        Ok(ValidatedPanel { periods: self.periods, units })
    }
}

fn shift_one(adoption: Adoption, shift: u32) -> Result<Adoption> {
    match adoption {
        Adoption::Never => Ok(Adoption::Never),
        Adoption::At(a) if a >= shift + 2 => Ok(Adoption::At(a - shift)),
        Adoption::At(_) => Err(Error::ShiftOutOfRange { shift, adoption: adoption.to_string() }),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovariateMode {
    #[default]
    None,
    /// Cohort rows for treated units; never-treated units may be split by group.
    Hybrid,
    /// One row per covariate group; adoption must be constant within a group.
    Grouped,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CovariateScheme {
    pub mode: CovariateMode,
    /// Keep each never-treated covariate cell as its own control series.
    pub never_treated_split: bool,
}

impl CovariateScheme {
    pub fn hybrid(never_treated_split: bool) -> Self {
        Self { mode: CovariateMode::Hybrid, never_treated_split }
    }

    pub fn grouped() -> Self {
        Self { mode: CovariateMode::Grouped, never_treated_split: false }
    }
}

/// Assignment of units to aggregated series.
#[derive(Debug, Clone, PartialEq)]
pub struct RowLayout {
    rows: Vec<(Adoption, String)>,
    unit_row: Vec<usize>,
}

impl RowLayout {
    pub fn from_scheme(panel: &ValidatedPanel, scheme: CovariateScheme) -> Result<Self> {
        let key = |u: &Unit| -> (Adoption, String) {
            let group = u.group.clone().unwrap_or_default();
            match scheme.mode {
                CovariateMode::Hybrid if u.adoption.is_never() && scheme.never_treated_split => {
                    (Adoption::Never, format!("inf:{group}"))
                }
                CovariateMode::Grouped => (u.adoption, group),
                _ => (u.adoption, u.adoption.to_string()),
            }
        };

        if scheme.mode == CovariateMode::Grouped {
            let mut seen: HashMap<String, Adoption> = HashMap::new();
            for u in panel.units() {
                let g = u.group.clone().unwrap_or_default();
                match seen.get(&g) {
                    Some(&a) if a != u.adoption => {
                        return Err(Error::GroupAdoptionMismatch {
                            group: g,
                            first: a.to_string(),
                            second: u.adoption.to_string(),
                        });
                    }
                    Some(_) => {}
                    None => {
                        seen.insert(g, u.adoption);
                    }
                }
            }
        }

        let keys: Vec<(Adoption, String)> = panel.units().iter().map(key).collect();
        let mut rows: Vec<(Adoption, String)> = keys.clone();
        rows.sort();
        rows.dedup();
        let lookup: HashMap<&(Adoption, String), usize> =
            rows.iter().enumerate().map(|(i, k)| (k, i)).collect();
        let unit_row = keys.iter().map(|k| lookup[k]).collect();
        Ok(Self { rows, unit_row })
    }

    /// One row per unit, ordered by adoption and then by unit order. This is
    /// the layout for data that is already aggregated (states, counties).
    pub fn per_unit(panel: &ValidatedPanel) -> Self {
        let mut order: Vec<usize> = (0..panel.n_units()).collect();
        order.sort_by_key(|&i| panel.units()[i].adoption);
        let mut unit_row = vec![0; panel.n_units()];
        let mut rows = Vec::with_capacity(order.len());
        for (r, &i) in order.iter().enumerate() {
            let u = &panel.units()[i];
            unit_row[i] = r;
            rows.push((u.adoption, u.id.clone()));
        }
        Self { rows, unit_row }
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn row_of_unit(&self, unit: usize) -> usize {
        self.unit_row[unit]
    }

    /// Per-row totals of `weight·xi`.
    pub fn row_weights(&self, panel: &ValidatedPanel, xi: &[f64]) -> Vec<f64> {
        let mut totals = vec![0.0; self.rows.len()];
        for (i, u) in panel.units().iter().enumerate() {
            totals[self.unit_row[i]] += u.weight * xi[i];
        }
        totals
    }

    /// Weighted within-row means with unit multipliers `xi` (all ones for the
    /// point estimate, bootstrap draws otherwise).
    pub fn aggregate_with(&self, panel: &ValidatedPanel, xi: &[f64]) -> Result<CohortPanel> {
        debug_assert_eq!(xi.len(), panel.n_units());
        let t = panel.periods() as usize;
        let n_rows = self.rows.len();
        let mut sums = DMatrix::<f64>::zeros(n_rows, t);
        let mut totals = vec![0.0; n_rows];
        let mut counts = vec![0usize; n_rows];
        for (i, u) in panel.units().iter().enumerate() {
            let r = self.unit_row[i];
            let w = u.weight * xi[i];
            totals[r] += w;
            counts[r] += 1;
            for (p, &y) in u.outcomes.iter().enumerate() {
                sums[(r, p)] += w * y;
            }
        }
        let mut rows = Vec::with_capacity(n_rows);
        for (r, (adoption, label)) in self.rows.iter().enumerate() {
            if !(totals[r] > 0.0) {
                return Err(Error::InvalidRecord(format!("series {label} has zero total weight")));
            }
            for p in 0..t {
                sums[(r, p)] /= totals[r];
            }
            rows.push(CohortRow::new(*adoption, label.clone(), totals[r], counts[r]));
        }
        CohortPanel::new(rows, sums)
    }

    pub fn aggregate(&self, panel: &ValidatedPanel) -> Result<CohortPanel> {
        self.aggregate_with(panel, &vec![1.0; panel.n_units()])
    }
}

/// Aggregates a validated panel under a covariate scheme.
pub fn aggregate(panel: &ValidatedPanel, scheme: CovariateScheme) -> Result<CohortPanel> {
    RowLayout::from_scheme(panel, scheme)?.aggregate(panel)
}

/// Metadata of one aggregated series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortRow {
    pub adoption: Adoption,
    pub label: String,
    /// Total aggregation weight (unit count when all weights are 1).
    pub weight: f64,
    pub n_units: usize,
    /// Weight share; filled in by [`CohortPanel::new`].
    pub share: f64,
}

impl CohortRow {
    pub fn new(adoption: Adoption, label: impl Into<String>, weight: f64, n_units: usize) -> Self {
        Self { adoption, label: label.into(), weight, n_units, share: 0.0 }
    }

    /// A cohort row labelled by its adoption time.
    pub fn cohort(adoption: Adoption, n_units: usize) -> Self {
        Self::new(adoption, adoption.to_string(), n_units as f64, n_units)
    }
}

/// Aggregated series `Y[row, t]` with their shares.
#[derive(Debug, Clone, PartialEq)]
pub struct CohortPanel {
    rows: Vec<CohortRow>,
    y: DMatrix<f64>,
    n_units: usize,
}

impl CohortPanel {
    /// Shares are recomputed from row weights; rows must be ordered by adoption.
    pub fn new(mut rows: Vec<CohortRow>, y: DMatrix<f64>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::EmptyPanel);
        }
        if y.nrows() != rows.len() || y.ncols() == 0 {
            return Err(Error::InvalidRecord(format!(
                "outcome matrix is {}x{} for {} series",
                y.nrows(),
                y.ncols(),
                rows.len()
            )));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidRecord("non-finite aggregated outcome".into()));
        }
        if rows.windows(2).any(|w| w[0].adoption > w[1].adoption) {
            return Err(Error::InvalidRecord("series must be ordered by adoption".into()));
        }
        if let Some(r) = rows.iter().find(|r| !(r.weight.is_finite() && r.weight > 0.0)) {
            return Err(Error::InvalidRecord(format!("series {} has non-positive weight", r.label)));
        }
        let total: f64 = rows.iter().map(|r| r.weight).sum();
        for r in &mut rows {
            r.share = r.weight / total;
        }
        let n_units = rows.iter().map(|r| r.n_units).sum();
        Ok(Self { rows, y, n_units })
    }

    pub fn periods(&self) -> u32 {
        self.y.ncols() as u32
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[CohortRow] {
        &self.rows
    }

    pub fn row(&self, r: usize) -> &CohortRow {
        &self.rows[r]
    }

    pub fn y(&self) -> &DMatrix<f64> {
        &self.y
    }

    pub(crate) fn y_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.y
    }

    /// Outcome of series `r` in 1-based period `t`.
    pub fn value(&self, r: usize, t: u32) -> f64 {
        self.y[(r, (t - 1) as usize)]
    }

    pub fn n_units(&self) -> usize {
        self.n_units
    }

    pub fn shares(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.share).collect()
    }

    /// Distinct adoption times, ascending with `Never` last.
    pub fn cohorts(&self) -> Vec<Adoption> {
        let mut out: Vec<Adoption> = self.rows.iter().map(|r| r.adoption).collect();
        out.dedup();
        out
    }

    pub fn row_by_label(&self, label: &str) -> Option<usize> {
        self.rows.iter().position(|r| r.label == label)
    }

    /// Same series with row weights multiplied by `xi` (row-level reweighting).
    pub fn reweighted(&self, xi: &[f64]) -> Result<CohortPanel> {
        let rows = self
            .rows
            .iter()
            .zip(xi)
            .map(|(r, &x)| CohortRow { weight: r.weight * x, ..r.clone() })
            .collect();
        CohortPanel::new(rows, self.y.clone())
    }

    /// Backdates every finite adoption by `shift`; rows labelled by their
    /// adoption time are relabelled.
    pub fn shift_adoption(&self, shift: u32) -> Result<CohortPanel> {
        if shift == 0 {
            return Err(Error::InvalidShift);
        }
        let mut rows = self.rows.clone();
        for r in &mut rows {
            let shifted = shift_one(r.adoption, shift)?;
            if r.label == r.adoption.to_string() {
                r.label = shifted.to_string();
            }
            r.adoption = shifted;
        }
        CohortPanel::new(rows, self.y.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_by_three() -> Vec<PanelRecord> {
        let mut recs = Vec::new();
        for t in 1..=3 {
            recs.push(PanelRecord::new("1", t, t as f64, Adoption::At(2)));
            recs.push(PanelRecord::new("2", t, 2.0 * t as f64, Adoption::Never));
        }
        recs
    }

    #[test]
    fn minimal_panel_validates() {
        let p = validate(&two_by_three()).unwrap();
        assert_eq!(p.periods(), 3);
        assert_eq!(p.n_units(), 2);
        let census: Vec<_> = p.cohort_census().into_keys().collect();
        assert_eq!(census, vec![Adoption::At(2), Adoption::Never]);
    }

    #[test]
    fn missing_cell_is_unbalanced() {
        let recs: Vec<_> =
            two_by_three().into_iter().filter(|r| !(r.unit == "1" && r.period == 3)).collect();
        assert!(matches!(validate(&recs), Err(Error::UnbalancedPanel { period: 3, .. })));
    }

    #[test]
    fn conflicting_adoption_rejected() {
        let mut recs = two_by_three();
        recs[2].adoption = Adoption::At(3);
        assert!(matches!(validate(&recs), Err(Error::InconsistentAdoption { .. })));
    }

    #[test]
    fn duplicate_and_empty() {
        let mut recs = two_by_three();
        recs.push(PanelRecord::new("2", 1, 0.0, Adoption::Never));
        assert!(matches!(validate(&recs), Err(Error::DuplicateCell { period: 1, .. })));
        assert!(matches!(validate(&[]), Err(Error::EmptyPanel)));
    }

    fn four_units(weights: [f64; 4]) -> ValidatedPanel {
        let outcomes = [1.0, 3.0, 10.0, 20.0];
        let adoption = [Adoption::At(2), Adoption::At(2), Adoption::Never, Adoption::Never];
        let mut recs = Vec::new();
        for i in 0..4 {
            for t in 1..=2 {
                recs.push(
                    PanelRecord::new(format!("u{i}"), t, outcomes[i] + (t - 1) as f64, adoption[i])
                        .with_weight(weights[i])
                        .with_group(if i == 2 { "rural" } else { "urban" }),
                );
            }
        }
        validate(&recs).unwrap()
    }

    #[test]
    fn arithmetic_and_weighted_means() {
        let c = aggregate(&four_units([1.0; 4]), CovariateScheme::default()).unwrap();
        assert_eq!(c.value(0, 1), 2.0);
        assert_eq!(c.row(0).share, 0.5);

        let c = aggregate(&four_units([1.0, 3.0, 1.0, 1.0]), CovariateScheme::default()).unwrap();
        assert_eq!(c.value(0, 1), 2.5);
        assert!((c.shares().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hybrid_split_adds_control_rows() {
        let c = aggregate(&four_units([1.0; 4]), CovariateScheme::hybrid(true)).unwrap();
        assert_eq!(c.n_rows(), 3);
        assert_eq!(c.row(1).label, "inf:rural");
        assert_eq!(c.row(2).label, "inf:urban");
        let c = aggregate(&four_units([1.0; 4]), CovariateScheme::hybrid(false)).unwrap();
        assert_eq!(c.n_rows(), 2);
    }

    #[test]
    fn grouped_mode_requires_constant_adoption() {
        // unit 1 (cohort 2) and unit 3 (never) are both "urban"
        let err = aggregate(&four_units([1.0; 4]), CovariateScheme::grouped()).unwrap_err();
        assert!(matches!(err, Error::GroupAdoptionMismatch { .. }));
    }

    #[test]
    fn shift_examples() {
        let mut recs = Vec::new();
        for (i, a) in [Adoption::At(5), Adoption::At(7), Adoption::Never].into_iter().enumerate() {
            for t in 1..=8 {
                recs.push(PanelRecord::new(i.to_string(), t, 0.0, a));
            }
        }
        let p = validate(&recs).unwrap();
        let shifted: Vec<_> = p.shift_adoption(2).unwrap().units().iter().map(|u| u.adoption).collect();
        assert_eq!(shifted, vec![Adoption::At(3), Adoption::At(5), Adoption::Never]);
        assert!(matches!(p.shift_adoption(0), Err(Error::InvalidShift)));

        let p = validate(&two_by_three()).unwrap();
        assert!(matches!(p.shift_adoption(2), Err(Error::ShiftOutOfRange { .. })));
    }

    #[test]
    fn adoption_parsing_and_order() {
        assert_eq!(Adoption::parse("").unwrap(), Adoption::Never);
        assert_eq!(Adoption::parse("inf").unwrap(), Adoption::Never);
        assert_eq!(Adoption::parse(" 4 ").unwrap(), Adoption::At(4));
        assert!(Adoption::parse("x").is_err());
        assert!(Adoption::At(u32::MAX) < Adoption::Never);
    }
}
