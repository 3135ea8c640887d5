//! Best-Estimate and shocked mortality tables, cohort life expectancies and
//! annuity valuation for the longevity trend capital requirement.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, IssueKind, LineIssue, Result};
use crate::grid::{AgeSpan, Gender, Grid, Span};

/// Cohort expectancies stop once survival falls below this.
pub const SURVIVAL_CUTOFF: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    #[serde(rename = "BE")]
    BestEstimate,
    #[serde(rename = "SCR")]
    Shock,
}

/// Relative change of `q` from the valuation year `t0`, over `t0..=t0+T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImprovementPath {
    pub role: Role,
    pub base_year: i32,
    pub ir: Grid,
}

/// `IR(x, t) = (q(x, t) − q(x, t0)) / q(x, t0)` with `q(x, t0)` taken from
/// `base` (one value per age of `target`); the `t0` column is zero.
pub fn improvement_path(base: &[f64], target: &Grid, base_year: i32, role: Role) -> Result<ImprovementPath> {
    if base.len() != target.n_ages() {
        return Err(Error::ShapeMismatch(format!(
            "{} base ages for a {}-age target",
            base.len(),
            target.n_ages()
        )));
    }
    if target.year_min() != base_year + 1 && target.year_min() != base_year {
        return Err(Error::ShapeMismatch(format!(
            "target starts in {}, expected {}",
            target.year_min(),
            base_year + 1
        )));
    }
    let years = Span::new(base_year, target.year_max())?;
    let ages = target.age_span();
    for (i, &q0) in base.iter().enumerate() {
        if !(q0 > 0.0) {
            return Err(Error::InvalidInput(format!(
                "base probability at age {} is {q0}; improvement undefined",
                ages.start + i as u32
            )));
        }
    }
    let ir = Grid::from_fn(ages, years, |x, t| {
        if t == base_year {
            0.0
        } else {
            let q0 = base[(x - ages.start) as usize];
            (target.at(x, t) - q0) / q0
        }
    });
    Ok(ImprovementPath { role, base_year, ir })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShockedTables {
    pub gender: Gender,
    pub base_year: i32,
    pub be: Grid,
    pub scr: Grid,
    pub clamped: usize,
}

/// `q^A(x, t) = q(x, t0) (1 + IR^A(x, t))`, clamped to `[0, 1]`.
pub fn build_shocked_tables(be: &ImprovementPath, scr: &ImprovementPath, base: &[f64], gender: Gender) -> Result<ShockedTables> {
    if be.base_year != scr.base_year || !be.ir.same_shape(&scr.ir) {
        return Err(Error::ShapeMismatch("improvement paths differ in valuation year or grid".into()));
    }
    if base.len() != be.ir.n_ages() {
        return Err(Error::ShapeMismatch("base column does not match the path ages".into()));
    }
    let age_min = be.ir.age_min();
    let mut clamped = 0;
    let mut build = |path: &ImprovementPath| {
        path.ir.cells().fold(path.ir.clone(), |mut g, (x, t, ir)| {
            let q = base[(x - age_min) as usize] * (1.0 + ir);
            let c = q.clamp(0.0, 1.0);
            if c != q {
                clamped += 1;
            }
            g.set(x, t, c);
            g
        })
    };
    let be_table = build(be);
    let scr_table = build(scr);
    if clamped > 0 {
        log::warn!("{clamped} shocked-table probabilities clamped to [0, 1]");
    }
    Ok(ShockedTables {
        gender,
        base_year: be.base_year,
        be: be_table,
        scr: scr_table,
        clamped,
    })
}

impl ShockedTables {
    pub fn table(&self, role: Role) -> &Grid {
        match role {
            Role::BestEstimate => &self.be,
            Role::Shock => &self.scr,
        }
    }
}

/// `Σ_{k≥1} v^k Π_{i<k} (1 − q(x+i, t+i))` along the diagonal from `(x, t)`.
/// Stops when survival drops below [`SURVIVAL_CUTOFF`] or past the top age.
pub fn discounted_annuity(table: &Grid, age: u32, year: i32, discount: f64) -> Result<f64> {
    if table.get(age, year).is_none() {
        return Err(Error::InvalidInput(format!("age {age}, year {year} outside the table")));
    }
    let mut survival = 1.0;
    let mut factor = 1.0;
    let mut total = 0.0;
    let mut i = 0u32;
    loop {
        let (x, t) = (age + i, year + i as i32);
        if x > table.age_max() {
            break;
        }
        let Some(q) = table.get(x, t) else {
            return Err(Error::InvalidInput(format!(
                "diagonal from age {age} in {year} leaves the table in {t} at age {x}; a longer projection is needed"
            )));
        };
        survival *= 1.0 - q;
        factor *= discount;
        total += factor * survival;
        if survival < SURVIVAL_CUTOFF {
            break;
        }
        i += 1;
    }
    Ok(total)
}

/// Curtate cohort expectancy with future improvements along the diagonal.
pub fn cohort_life_expectancy(tables: &ShockedTables, role: Role, age: u32, year: i32) -> Result<f64> {
    discounted_annuity(tables.table(role), age, year, 1.0)
}

/// `(e(SCR) − e(BE)) / e(BE)` for the cohort aged `age` in `year`.
pub fn ie_indicator(tables: &ShockedTables, age: u32, year: i32) -> Result<f64> {
    let be = cohort_life_expectancy(tables, Role::BestEstimate, age, year)?;
    if be == 0.0 {
        return Err(Error::InvalidInput(format!("zero best-estimate expectancy at age {age}, year {year}")));
    }
    let scr = cohort_life_expectancy(tables, Role::Shock, age, year)?;
    Ok((scr - be) / be)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelPoint {
    pub gender: Gender,
    /// Age at the valuation year.
    pub age: u32,
    /// Yearly annuity, paid at the end of each year survived.
    pub amount: f64,
    pub count: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnuityPortfolio {
    pub points: Vec<ModelPoint>,
    pub discount_rate: f64,
}

impl AnnuityPortfolio {
    /// One unit annuitant at each age of the band.
    pub fn flat(gender: Gender, ages: AgeSpan, discount_rate: f64) -> Self {
        AnnuityPortfolio {
            points: (ages.start..=ages.end)
                .map(|age| ModelPoint {
                    gender,
                    age,
                    amount: 1.0,
                    count: 1.0,
                })
                .collect(),
            discount_rate,
        }
    }

    fn discount(&self) -> f64 {
        1.0 / (1.0 + self.discount_rate)
    }
}

/// Parse `gender,age,amount,count` rows (header required).
pub fn parse_portfolio_csv(text: &str, file: &str, discount_rate: f64) -> Result<AnnuityPortfolio> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .flexible(true)
        .from_reader(text.as_bytes());
    let headers: Vec<String> = rdr.headers()?.iter().map(|h| h.to_ascii_lowercase()).collect();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let (Some(g), Some(a), Some(m), Some(c)) = (col("gender"), col("age"), col("amount"), col("count")) else {
        return Err(Error::Input {
            file: file.into(),
            issues: vec![LineIssue {
                line: 1,
                kind: IssueKind::Parse,
                reason: "header must name gender, age, amount, count".into(),
            }],
        });
    };
    let mut issues = Vec::new();
    let mut points = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let field = |i: usize| rec.get(i).unwrap_or("");
        let parsed = (|| -> std::result::Result<ModelPoint, (IssueKind, String)> {
            let gender = field(g).parse::<Gender>().map_err(|e| (IssueKind::Parse, e.to_string()))?;
            let age = field(a)
                .parse::<u32>()
                .map_err(|_| (IssueKind::Parse, format!("invalid age `{}`", field(a))))?;
            let num = |i: usize, what: &str| -> std::result::Result<f64, (IssueKind, String)> {
                let v = field(i)
                    .parse::<f64>()
                    .map_err(|_| (IssueKind::Parse, format!("invalid {what} `{}`", field(i))))?;
                if v.is_finite() && v >= 0.0 {
                    Ok(v)
                } else {
                    Err((IssueKind::Validation, format!("{what} must be finite and non-negative")))
                }
            };
            Ok(ModelPoint {
                gender,
                age,
                amount: num(m, "amount")?,
                count: num(c, "count")?,
            })
        })();
        match parsed {
            Ok(p) => points.push(p),
            Err((kind, reason)) => issues.push(LineIssue { line, kind, reason }),
        }
    }
    if !issues.is_empty() {
        return Err(Error::Input {
            file: file.into(),
            issues,
        });
    }
    if !(discount_rate.is_finite() && discount_rate > -1.0) {
        return Err(Error::InvalidInput(format!("discount rate {discount_rate} must exceed -1")));
    }
    Ok(AnnuityPortfolio { points, discount_rate })
}

pub fn read_portfolio_csv(path: &Path, discount_rate: f64) -> Result<AnnuityPortfolio> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_portfolio_csv(&text, &path.display().to_string(), discount_rate)
}

fn check_point(p: &ModelPoint, tables: &ShockedTables) -> Result<()> {
    if p.gender != tables.gender {
        return Err(Error::InvalidInput(format!(
            "model point of gender {} valued on {} tables",
            p.gender, tables.gender
        )));
    }
    if !tables.be.age_span().contains(p.age) {
        return Err(Error::InvalidInput(format!("model point age {} outside the tables", p.age)));
    }
    Ok(())
}

/// Present value of the portfolio's end-of-year annuities under one table.
pub fn portfolio_value(portfolio: &AnnuityPortfolio, tables: &ShockedTables, role: Role) -> Result<f64> {
    let v = portfolio.discount();
    let mut total = 0.0;
    for p in &portfolio.points {
        check_point(p, tables)?;
        total += p.count * p.amount * discounted_annuity(tables.table(role), p.age, tables.base_year, v)?;
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationValue {
    pub label: String,
    pub value_be: f64,
    pub value_scr: f64,
    /// `value_scr − value_be`; positive is a capital need.
    pub scr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScrImpact {
    pub crude: CalibrationValue,
    pub corrected: CalibrationValue,
    pub absolute_difference: f64,
    /// `(scr_corrected − scr_crude) / scr_crude`.
    pub relative_difference: f64,
}

fn calibration(label: &str, portfolio: &AnnuityPortfolio, tables: &ShockedTables) -> Result<CalibrationValue> {
    let value_be = portfolio_value(portfolio, tables, Role::BestEstimate)?;
    let value_scr = portfolio_value(portfolio, tables, Role::Shock)?;
    Ok(CalibrationValue {
        label: label.into(),
        value_be,
        value_scr,
        scr: value_scr - value_be,
    })
}

/// Compare capital under two calibrations sharing one Best-Estimate table.
pub fn scr_impact(portfolio: &AnnuityPortfolio, crude: &ShockedTables, corrected: &ShockedTables) -> Result<ScrImpact> {
    if crude.be != corrected.be || crude.base_year != corrected.base_year {
        return Err(Error::InvalidInput(
            "both calibrations must share the same Best-Estimate table".into(),
        ));
    }
    let a = calibration("crude", portfolio, crude)?;
    let b = calibration("corrected", portfolio, corrected)?;
    let absolute_difference = b.scr - a.scr;
    let relative_difference = if a.scr == 0.0 {
        if absolute_difference == 0.0 { 0.0 } else { f64::INFINITY.copysign(absolute_difference) }
    } else {
        absolute_difference / a.scr
    };
    Ok(ScrImpact {
        crude: a,
        corrected: b,
        absolute_difference,
        relative_difference,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Weighting {
    #[default]
    Amount,
    Count,
}

impl std::str::FromStr for Weighting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "amount" => Ok(Weighting::Amount),
            "count" => Ok(Weighting::Count),
            other => Err(Error::InvalidInput(format!("unknown weighting `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub weighting: Weighting,
    pub year: i32,
    pub next_year: i32,
    /// Weighted mean of `e(SCR) − e(BE)` at each valuation year.
    pub delta: f64,
    pub next_delta: f64,
    /// `(next_delta − delta) / delta × 100`.
    pub evolution_pct: f64,
}

fn weighted_gap(portfolio: &AnnuityPortfolio, tables: &ShockedTables, weighting: Weighting) -> Result<f64> {
    let (mut num, mut den) = (0.0, 0.0);
    for p in &portfolio.points {
        check_point(p, tables)?;
        let w = match weighting {
            Weighting::Amount => p.amount * p.count,
            Weighting::Count => p.count,
        };
        let gap = cohort_life_expectancy(tables, Role::Shock, p.age, tables.base_year)?
            - cohort_life_expectancy(tables, Role::BestEstimate, p.age, tables.base_year)?;
        num += w * gap;
        den += w;
    }
    if den == 0.0 {
        return Err(Error::InvalidInput("portfolio has zero total weight".into()));
    }
    Ok(num / den)
}

/// Year-on-year relative evolution of the weighted shock-minus-BE expectancy gap.
pub fn stability_indicator(
    tables: &ShockedTables,
    next: &ShockedTables,
    portfolio: &AnnuityPortfolio,
    weighting: Weighting,
) -> Result<StabilityReport> {
    let delta = weighted_gap(portfolio, tables, weighting)?;
    let next_delta = weighted_gap(portfolio, next, weighting)?;
    if delta == 0.0 {
        return Err(Error::InvalidInput("expectancy gap is zero at the first valuation year".into()));
    }
    Ok(StabilityReport {
        weighting,
        year: tables.base_year,
        next_year: next.base_year,
        delta,
        next_delta,
        evolution_pct: (next_delta - delta) / delta * 100.0,
    })
}
