//! Cohort-size correction of period exposures from monthly birth counts.
//!
//! Period exposure built from January-1 populations implicitly assumes births
//! spread uniformly over each year. When a cohort's births are concentrated
//! early or late in the year, every cell on its diagonal `t - x = b` carries a
//! biased exposure. The indicator `I(b)` is the ratio of the monthly-weighted
//! exposure to the uniform one along that diagonal.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, IssueKind, LineIssue, Result};
use crate::grid::Grid;
use crate::ingest::{MonthlyBirthSeries, Table};
use crate::lexis::{improvements, MortalitySurface, SourceTag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Computed,
    Predicted,
    Unavailable,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Computed => "computed",
            Provenance::Predicted => "predicted",
            Provenance::Unavailable => "unavailable",
        }
    }
}

impl std::str::FromStr for Provenance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "computed" => Ok(Provenance::Computed),
            "predicted" => Ok(Provenance::Predicted),
            "unavailable" => Ok(Provenance::Unavailable),
            other => Err(Error::InvalidInput(format!("unknown provenance `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IndicatorEntry {
    /// `NaN` when unavailable.
    pub value: f64,
    pub provenance: Provenance,
}

/// Per-cohort correction indicator keyed by year of birth.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorrectionIndicator {
    pub country: String,
    entries: BTreeMap<i32, IndicatorEntry>,
}

impl CorrectionIndicator {
    pub fn new(country: impl Into<String>) -> Self {
        CorrectionIndicator {
            country: country.into(),
            entries: BTreeMap::new(),
        }
    }

    /// A constant indicator over a range of cohorts.
    pub fn constant(country: impl Into<String>, cohorts: std::ops::RangeInclusive<i32>, value: f64) -> Result<Self> {
        let mut ind = CorrectionIndicator::new(country);
        for b in cohorts {
            ind.insert(b, value, Provenance::Computed)?;
        }
        Ok(ind)
    }

    pub fn insert(&mut self, cohort: i32, value: f64, provenance: Provenance) -> Result<()> {
        let value = if provenance == Provenance::Unavailable {
            f64::NAN
        } else if value > 0.0 && value.is_finite() {
            value
        } else {
            return Err(Error::InvalidInput(format!(
                "indicator for cohort {cohort} must be positive and finite, got {value}"
            )));
        };
        self.entries.insert(cohort, IndicatorEntry { value, provenance });
        Ok(())
    }

    pub fn mark_unavailable(&mut self, cohort: i32) {
        self.entries.insert(
            cohort,
            IndicatorEntry {
                value: f64::NAN,
                provenance: Provenance::Unavailable,
            },
        );
    }

    /// The usable value for a cohort; `None` when absent or unavailable.
    pub fn get(&self, cohort: i32) -> Option<f64> {
        self.entries
            .get(&cohort)
            .filter(|e| e.provenance != Provenance::Unavailable)
            .map(|e| e.value)
    }

    pub fn entry(&self, cohort: i32) -> Option<&IndicatorEntry> {
        self.entries.get(&cohort)
    }

    pub fn entries(&self) -> &BTreeMap<i32, IndicatorEntry> {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Fill cohorts that are absent or unavailable here from `other`.
    pub fn fill_from(&mut self, other: &CorrectionIndicator) {
        for (&b, e) in &other.entries {
            if e.provenance != Provenance::Unavailable && self.get(b).is_none() {
                self.entries.insert(b, *e);
            }
        }
    }

    /// Usable values only, for regression inputs.
    pub fn values(&self) -> BTreeMap<i32, f64> {
        self.entries
            .iter()
            .filter(|(_, e)| e.provenance != Provenance::Unavailable)
            .map(|(&b, e)| (b, e.value))
            .collect()
    }
}

/// Where within each month births are assumed to fall on average.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MonthWeights {
    /// Month `j` sits at `(2j - 1) / 24` of the year.
    #[default]
    Midpoint,
    /// Midpoints of the actual calendar months, leap years included.
    CalendarExact,
}

impl std::str::FromStr for MonthWeights {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "midpoint" => Ok(MonthWeights::Midpoint),
            "calendar-exact" | "calendar" => Ok(MonthWeights::CalendarExact),
            other => Err(Error::InvalidInput(format!("unknown month weighting `{other}`"))),
        }
    }
}

fn is_leap(year: i32) -> bool {
    (year % 4 == 0 && year % 100 != 0) || year % 400 == 0
}

impl MonthWeights {
    /// Position of each month's midpoint as a fraction of the year.
    pub fn positions(self, year: i32) -> [f64; 12] {
        match self {
            MonthWeights::Midpoint => std::array::from_fn(|j| (2 * j + 1) as f64 / 24.0),
            MonthWeights::CalendarExact => {
                let feb = if is_leap(year) { 29.0 } else { 28.0 };
                let days = [31.0, feb, 31.0, 30.0, 31.0, 30.0, 31.0, 31.0, 30.0, 31.0, 30.0, 31.0];
                let total: f64 = days.iter().sum();
                let mut before = 0.0;
                days.map(|d| {
                    let mid = (before + d / 2.0) / total;
                    before += d;
                    mid
                })
            }
        }
    }
}

fn complete_months(series: &MonthlyBirthSeries, year: i32) -> Result<[f64; 12]> {
    series
        .monthly(year)
        .ok_or_else(|| Error::InvalidInput(format!("monthly births for {year} are missing or incomplete")))
}

/// Mean within-year birth time `ū(b)` as a fraction of the year.
pub fn mean_birth_fraction(series: &MonthlyBirthSeries, year: i32, weights: MonthWeights) -> Result<f64> {
    let months = complete_months(series, year)?;
    let total: f64 = months.iter().sum();
    if total <= 0.0 {
        return Err(Error::InvalidInput(format!("zero total births in {year}")));
    }
    let pos = weights.positions(year);
    Ok(months.iter().zip(pos).map(|(b, p)| b * p).sum::<f64>() / total)
}

/// The indicator from its ingredients: `2 [λ (1 - ū(b)) + (1 - λ) ū(b-1)]`.
pub fn indicator_formula(share: f64, fraction: f64, prev_fraction: f64) -> f64 {
    2.0 * (share * (1.0 - fraction) + (1.0 - share) * prev_fraction)
}

/// `I(b)`: the ratio of monthly-refined to uniform-births exposure along the
/// diagonal whose lower triangles belong to cohort `b` and upper triangles to
/// cohort `b - 1`.
pub fn correction_indicator(series: &MonthlyBirthSeries, cohort: i32, weights: MonthWeights) -> Result<f64> {
    let now: f64 = complete_months(series, cohort)?.iter().sum();
    let prev: f64 = complete_months(series, cohort - 1)?.iter().sum();
    if now + prev <= 0.0 {
        return Err(Error::InvalidInput(format!(
            "zero births in both {} and {cohort}",
            cohort - 1
        )));
    }
    let share = now / (now + prev);
    // A zero-birth year contributes nothing, so its fraction is irrelevant.
    let fraction = if now > 0.0 { mean_birth_fraction(series, cohort, weights)? } else { 0.5 };
    let prev_fraction = if prev > 0.0 {
        mean_birth_fraction(series, cohort - 1, weights)?
    } else {
        0.5
    };
    Ok(indicator_formula(share, fraction, prev_fraction))
}

/// Indicators for every cohort of the series: computed where the two birth
/// years are complete, unavailable otherwise.
pub fn indicator_from_births(series: &MonthlyBirthSeries, weights: MonthWeights) -> CorrectionIndicator {
    let mut ind = CorrectionIndicator::new(series.country.clone());
    for &b in series.years.keys() {
        match correction_indicator(series, b, weights) {
            Ok(v) => ind.insert(b, v, Provenance::Computed).expect("positive by construction"),
            Err(_) => ind.mark_unavailable(b),
        }
    }
    if let Some((&last, _)) = series.years.last_key_value() {
        // The year after the last one still has its upper triangles covered.
        if ind.get(last + 1).is_none() && !series.years.contains_key(&(last + 1)) {
            ind.mark_unavailable(last + 1);
        }
    }
    ind
}

/// Diagonals of the surface with no usable indicator value.
pub fn uncovered_cohorts(surface: &MortalitySurface, indicator: &CorrectionIndicator) -> Vec<i32> {
    let ages = surface.age_span();
    let years = surface.year_span();
    (years.start - ages.end as i32..=years.end - ages.start as i32)
        .filter(|&b| indicator.get(b).is_none())
        .collect()
}

/// `m̃(x,t) = m(x,t) / I(t-x)` via exposure rescaling; deaths are unchanged.
/// Uncovered diagonals are an error unless `pass_through` is set, in which
/// case they keep `I = 1` and are logged.
pub fn correct_surface(
    surface: &MortalitySurface,
    indicator: &CorrectionIndicator,
    pass_through: bool,
) -> Result<MortalitySurface> {
    let uncovered = uncovered_cohorts(surface, indicator);
    if !uncovered.is_empty() {
        if !pass_through {
            return Err(Error::InvalidInput(format!(
                "correction indicator missing for cohorts {uncovered:?}"
            )));
        }
        log::warn!("indicator pass-through (I = 1) for cohorts {uncovered:?}");
    }
    let e = surface.exposure();
    let scaled = Grid::from_fn(e.age_span(), e.year_span(), |x, t| {
        e.at(x, t) * indicator.get(t - x as i32).unwrap_or(1.0)
    });
    Ok(
        MortalitySurface::from_counts(surface.deaths().clone(), scaled, surface.gender(), SourceTag::Corrected)?
            .with_open_age(surface.open_age()),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortAnomaly {
    pub cohort: i32,
    /// Ages contributing to the averages.
    pub cells: usize,
    pub before: f64,
    pub after: f64,
    /// `after / before`; 1 when `before` is zero.
    pub ratio: f64,
    /// The correction removed most of a material deviation.
    pub flagged: bool,
}

/// Thresholds for marking a cohort as a resolved anomaly.
pub const FLAG_RATIO: f64 = 0.5;
pub const FLAG_MIN_DROP: f64 = 0.005;

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Per-diagonal mean absolute deviation of improvement rates from the age's
/// median improvement.
///
/// A perturbed cell `m(x, t)` enters both `r(x, t-1)` and `r(x, t)`; the
/// smaller of the two deviations is used so a neighbouring perturbed diagonal
/// does not leak into this one. Cells in the first or last year have only one
/// of the two rates and are skipped.
pub fn diagonal_deviation(surface: &MortalitySurface) -> Result<BTreeMap<i32, (usize, f64)>> {
    let r = improvements(surface)?.r;
    let mut sums: BTreeMap<i32, (usize, f64)> = BTreeMap::new();
    for x in r.ages() {
        let row: Vec<f64> = r.row(x).expect("age in grid").iter().copied().filter(|v| v.is_finite()).collect();
        let reference = median(row);
        if reference.is_nan() {
            continue;
        }
        for t in surface.year_span().start..=surface.year_span().end {
            let dev = |year: i32| r.get(x, year).filter(|v| v.is_finite()).map(|v| (v - reference).abs());
            let (Some(a), Some(b)) = (dev(t - 1), dev(t)) else {
                continue;
            };
            let d = a.min(b);
            let e = sums.entry(t - x as i32).or_insert((0, 0.0));
            e.0 += 1;
            e.1 += d;
        }
    }
    Ok(sums.into_iter().map(|(b, (n, s))| (b, (n, s / n as f64))).collect())
}

pub fn anomaly_report(crude: &MortalitySurface, corrected: &MortalitySurface) -> Result<Vec<CohortAnomaly>> {
    if !crude.rates().same_shape(corrected.rates()) {
        return Err(Error::ShapeMismatch("crude and corrected surfaces differ in shape".into()));
    }
    let before = diagonal_deviation(crude)?;
    let after = diagonal_deviation(corrected)?;
    Ok(before
        .into_iter()
        .map(|(cohort, (cells, b))| {
            let a = after.get(&cohort).map_or(b, |v| v.1);
            let ratio = if b == 0.0 { 1.0 } else { a / b };
            CohortAnomaly {
                cohort,
                cells,
                before: b,
                after: a,
                ratio,
                flagged: ratio < FLAG_RATIO && b - a > FLAG_MIN_DROP,
            }
        })
        .collect())
}

/// Indicator as a `cohort,indicator,provenance` table; unavailable values are `.`.
pub fn indicator_table(indicator: &CorrectionIndicator) -> Table {
    let mut t = Table::new(["cohort", "indicator", "provenance"]);
    for (&b, e) in indicator.entries() {
        t.push(vec![b.into(), e.value.into(), e.provenance.as_str().into()]);
    }
    t
}

/// Parse a `cohort,indicator[,provenance]` CSV. Without a provenance column
/// values count as computed; `.` marks an unavailable cohort.
pub fn parse_indicator_csv(text: &str, file: &str, country: &str) -> Result<CorrectionIndicator> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .flexible(true)
        .from_reader(text.as_bytes());
    let headers: Vec<String> = rdr.headers()?.iter().map(|h| h.to_ascii_lowercase()).collect();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let (Some(bc), Some(vc)) = (col("cohort"), col("indicator")) else {
        return Err(Error::Input {
            file: file.into(),
            issues: vec![LineIssue {
                line: 1,
                kind: IssueKind::Parse,
                reason: "header must name cohort and indicator".into(),
            }],
        });
    };
    let pc = col("provenance");
    let mut out = CorrectionIndicator::new(country);
    let mut issues = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let field = |i: usize| rec.get(i).unwrap_or("");
        let row = (|| -> std::result::Result<(), (IssueKind, String)> {
            let b: i32 = field(bc)
                .parse()
                .map_err(|_| (IssueKind::Parse, format!("invalid cohort `{}`", field(bc))))?;
            if out.entry(b).is_some() {
                return Err((IssueKind::Validation, format!("duplicate cohort {b}")));
            }
            let provenance = match pc.map(field) {
                Some(p) if !p.is_empty() => p.parse::<Provenance>().map_err(|e| (IssueKind::Parse, e.to_string()))?,
                _ => Provenance::Computed,
            };
            let raw = field(vc);
            if raw == "." || provenance == Provenance::Unavailable {
                out.mark_unavailable(b);
                return Ok(());
            }
            let v: f64 = raw
                .parse()
                .map_err(|_| (IssueKind::Parse, format!("invalid indicator `{raw}`")))?;
            out.insert(b, v, provenance).map_err(|e| (IssueKind::Validation, e.to_string()))
        })();
        if let Err((kind, reason)) = row {
            issues.push(LineIssue { line, kind, reason });
        }
    }
    if !issues.is_empty() {
        return Err(Error::Input {
            file: file.into(),
            issues,
        });
    }
    Ok(out)
}

pub fn read_indicator_csv(path: &Path, country: &str) -> Result<CorrectionIndicator> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_indicator_csv(&text, &path.display().to_string(), country)
}
