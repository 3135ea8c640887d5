//! Period mortality surfaces and the shared demographic calculus.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{AgeSpan, Gender, Grid, Span, YearSpan};
use crate::ingest::{RawDeathsLexis, RawPopulation, SuffixPolicy, YearEnd};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceTag {
    Crude,
    Corrected,
    Simulated,
}

impl SourceTag {
    pub fn as_str(self) -> &'static str {
        match self {
            SourceTag::Crude => "crude",
            SourceTag::Corrected => "corrected",
            SourceTag::Simulated => "simulated",
        }
    }
}

/// Deaths, exposure and central death rates on a rectangular age × year grid.
///
/// Invariant: `rates = deaths / exposure` on every non-missing cell, with
/// exposure strictly positive there. Missing cells are `NaN` in all grids
/// that depend on them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MortalitySurface {
    gender: Gender,
    source: SourceTag,
    deaths: Grid,
    exposure: Grid,
    rates: Grid,
    /// Age carrying the open-ended `110+` flag, when inside the grid.
    open_age: Option<u32>,
}

impl MortalitySurface {
    pub fn from_counts(deaths: Grid, exposure: Grid, gender: Gender, source: SourceTag) -> Result<Self> {
        if !deaths.same_shape(&exposure) {
            return Err(Error::ShapeMismatch("deaths and exposure grids differ".into()));
        }
        for (age, year, e) in exposure.cells() {
            let d = deaths.at(age, year);
            if d.is_nan() || e.is_nan() {
                continue;
            }
            if e <= 0.0 {
                return Err(Error::NonPositiveExposure { age, year, value: e });
            }
            if d < 0.0 || !d.is_finite() || !e.is_finite() {
                return Err(Error::InvalidInput(format!(
                    "invalid counts at age {age}, year {year}: deaths {d}, exposure {e}"
                )));
            }
        }
        let rates = deaths.zip_map(&exposure, |d, e| d / e)?;
        Ok(MortalitySurface {
            gender,
            source,
            deaths,
            exposure,
            rates,
            open_age: None,
        })
    }

    pub fn gender(&self) -> Gender {
        self.gender
    }

    pub fn source(&self) -> SourceTag {
        self.source
    }

    pub fn deaths(&self) -> &Grid {
        &self.deaths
    }

    pub fn exposure(&self) -> &Grid {
        &self.exposure
    }

    pub fn rates(&self) -> &Grid {
        &self.rates
    }

    pub fn open_age(&self) -> Option<u32> {
        self.open_age
    }

    pub fn age_span(&self) -> AgeSpan {
        self.rates.age_span()
    }

    pub fn year_span(&self) -> YearSpan {
        self.rates.year_span()
    }

    pub fn has_missing(&self) -> bool {
        self.rates.values().iter().any(|v| v.is_nan())
    }

    pub(crate) fn with_open_age(mut self, open_age: Option<u32>) -> Self {
        self.open_age = open_age;
        self
    }

    /// Restrict to a calibration window.
    pub fn window(&self, ages: AgeSpan, years: YearSpan) -> Result<MortalitySurface> {
        let open_age = self.open_age.filter(|&a| ages.contains(a));
        Ok(MortalitySurface::from_counts(
            self.deaths.window(ages, years)?,
            self.exposure.window(ages, years)?,
            self.gender,
            self.source,
        )?
        .with_open_age(open_age))
    }
}

/// One-year death probabilities on an age × year grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QSurface {
    pub gender: Gender,
    pub source: SourceTag,
    pub q: Grid,
}

impl QSurface {
    pub fn new(q: Grid, gender: Gender, source: SourceTag) -> Self {
        QSurface { gender, source, q }
    }

    pub fn at(&self, age: u32, year: i32) -> f64 {
        self.q.at(age, year)
    }

    pub fn get(&self, age: u32, year: i32) -> Option<f64> {
        self.q.get(age, year)
    }

    pub fn age_span(&self) -> AgeSpan {
        self.q.age_span()
    }

    pub fn year_span(&self) -> YearSpan {
        self.q.year_span()
    }
}

/// Year-on-year relative change of central death rates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImprovementMatrix {
    /// `r(x, t)` indexed by the first year `t` of each pair.
    pub r: Grid,
    /// Cells where `m(x, t) = 0`; left as `NaN` in `r`.
    pub undefined: Vec<(u32, i32)>,
}

/// Build a period surface from Lexis-triangle deaths and January-1
/// populations: `E(x,t) = (P(x,t) + P(x,t+1)) / 2` and
/// `D(x,t) = lower + upper triangle deaths`.
pub fn build_surface(
    deaths: &RawDeathsLexis,
    population: &RawPopulation,
    gender: Gender,
    ages: AgeSpan,
    years: YearSpan,
    policy: SuffixPolicy,
) -> Result<MortalitySurface> {
    let pop_years = population.years();
    for t in years.start..=years.end + 1 {
        if !pop_years.contains(&t) {
            return Err(Error::MissingPopulationYear(t));
        }
    }
    let start = population.resolve(policy, YearEnd::Start);
    let end = population.resolve(policy, YearEnd::End);
    let deaths_ix = deaths.index();
    let mut open_age = None;

    let mut d_grid = Grid::filled(ages, years, f64::NAN);
    let mut e_grid = Grid::filled(ages, years, f64::NAN);
    for x in ages.start..=ages.end {
        for t in years.start..=years.end {
            let lower_key = (t, x, t - x as i32);
            let upper_key = (t, x, t - x as i32 - 1);
            let (Some(lower), Some(upper)) = (deaths_ix.get(&lower_key), deaths_ix.get(&upper_key)) else {
                return Err(Error::InvalidInput(format!(
                    "deaths do not cover age {x}, year {t} (both Lexis triangles required)"
                )));
            };
            let p0 = start.get(&(t, x));
            let p1 = end.get(&(t + 1, x));
            let (Some(p0), Some(p1)) = (p0, p1) else {
                return Err(Error::InvalidInput(format!(
                    "population missing for age {x} in year {} or {}",
                    t,
                    t + 1
                )));
            };
            if lower.open_age || upper.open_age || p0.open_age || p1.open_age {
                open_age = Some(x);
            }
            let d = match (lower.count(gender), upper.count(gender)) {
                (Some(a), Some(b)) => a + b,
                _ => f64::NAN,
            };
            let e = match (p0.count(gender), p1.count(gender)) {
                (Some(a), Some(b)) => 0.5 * (a + b),
                _ => f64::NAN,
            };
            d_grid.set(x, t, d);
            e_grid.set(x, t, e);
        }
    }
    Ok(MortalitySurface::from_counts(d_grid, e_grid, gender, SourceTag::Crude)?.with_open_age(open_age))
}

/// `q = 1 - exp(-m)` cell-wise.
pub fn to_q(surface: &MortalitySurface) -> QSurface {
    QSurface::new(
        surface.rates().map(|m| -(-m).exp_m1()),
        surface.gender(),
        surface.source(),
    )
}

pub fn improvements(surface: &MortalitySurface) -> Result<ImprovementMatrix> {
    let m = surface.rates();
    if m.n_years() < 2 {
        return Err(Error::InvalidInput("improvement rates need at least two years".into()));
    }
    let years = Span::new(m.year_min(), m.year_max() - 1)?;
    let mut undefined = Vec::new();
    let r = Grid::from_fn(m.age_span(), years, |x, t| {
        let (now, next) = (m.at(x, t), m.at(x, t + 1));
        if now == 0.0 {
            undefined.push((x, t));
            f64::NAN
        } else {
            next / now - 1.0
        }
    });
    Ok(ImprovementMatrix { r, undefined })
}

fn check_year(span: YearSpan, t: i32) -> Result<()> {
    if span.contains(t) {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!(
            "year {t} outside {}-{}",
            span.start, span.end
        )))
    }
}

/// Curtate period expectancy between `from_age` and `truncation_age` using
/// the death probabilities of the single year `year`.
pub fn period_life_expectancy(q: &QSurface, from_age: u32, truncation_age: u32, year: i32) -> Result<f64> {
    check_year(q.year_span(), year)?;
    let ages = q.age_span();
    if from_age >= truncation_age || from_age < ages.start || truncation_age > ages.end + 1 {
        return Err(Error::InvalidInput(format!(
            "age band {from_age}-{truncation_age} not inside {}-{}",
            ages.start,
            ages.end + 1
        )));
    }
    let mut survival = 1.0;
    let mut total = 0.0;
    for age in from_age..truncation_age {
        survival *= 1.0 - q.at(age, year);
        total += survival;
    }
    Ok(total)
}

/// The rate column `m(·, t)`.
pub fn force_of_mortality_curve(surface: &MortalitySurface, year: i32) -> Result<Vec<f64>> {
    check_year(surface.year_span(), year)?;
    Ok(surface.rates().column(year).expect("year checked"))
}

/// Life-table deaths `d(x) = l(x) - l(x+1)` from a radix at the youngest age.
pub fn death_curve(q: &QSurface, year: i32, radix: f64) -> Result<Vec<f64>> {
    check_year(q.year_span(), year)?;
    if radix <= 0.0 || !radix.is_finite() {
        return Err(Error::InvalidInput(format!("radix must be positive, got {radix}")));
    }
    let mut alive = radix;
    Ok(q.q
        .column(year)
        .expect("year checked")
        .into_iter()
        .map(|qx| {
            let next = alive * (1.0 - qx);
            let d = alive - next;
            alive = next;
            d
        })
        .collect())
}

/// Ages used to fit the old-age extrapolation.
pub const CLOSURE_FIT_AGES: u32 = 15;
const CLOSURE_MIN_AGES: usize = 5;

/// Logistic fit `logit q(x) = intercept + slope * x` on the closure band.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogisticFit {
    pub intercept: f64,
    pub slope: f64,
}

impl LogisticFit {
    pub fn q(&self, age: f64) -> f64 {
        let z = self.intercept + self.slope * age;
        1.0 / (1.0 + (-z).exp())
    }
}

/// Fit the closure logistic to `q` values at consecutive ages starting at
/// `age_min`, using the ages `closure_start - 14 ..= closure_start`.
pub fn fit_closure(column: &[f64], age_min: u32, closure_start: u32) -> Result<LogisticFit> {
    let lo = closure_start.saturating_sub(CLOSURE_FIT_AGES - 1).max(age_min);
    let mut pts = Vec::with_capacity(CLOSURE_FIT_AGES as usize);
    for age in lo..=closure_start {
        let Some(&qx) = column.get((age - age_min) as usize) else { break };
        if qx > 0.0 && qx < 1.0 {
            pts.push((age as f64, (qx / (1.0 - qx)).ln()));
        }
    }
    if pts.len() < CLOSURE_MIN_AGES {
        return Err(Error::InvalidInput(format!(
            "closure band ending at age {closure_start} has {} usable ages, need {CLOSURE_MIN_AGES}",
            pts.len()
        )));
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    Ok(LogisticFit {
        intercept: my - slope * mx,
        slope,
    })
}

/// Replace ages above `closure_start` by the fitted logistic and extend to
/// `omega`, where `q = 1`. Returns the closed column over `age_min..=omega`.
pub fn close_column(column: &[f64], age_min: u32, closure_start: u32, omega: u32) -> Result<Vec<f64>> {
    let fit = fit_closure(column, age_min, closure_start)?;
    Ok((age_min..=omega)
        .map(|age| {
            if age == omega {
                1.0
            } else if age <= closure_start {
                column[(age - age_min) as usize]
            } else {
                fit.q(age as f64)
            }
        })
        .collect())
}

/// Kannisto-type closure applied year by year.
pub fn close_table(q: &QSurface, closure_start: u32, omega: u32) -> Result<QSurface> {
    let ages = q.age_span();
    if closure_start > ages.end || closure_start < ages.start {
        return Err(Error::InvalidInput(format!(
            "closure start {closure_start} outside ages {}-{}",
            ages.start, ages.end
        )));
    }
    if omega <= ages.end {
        return Err(Error::InvalidInput(format!(
            "omega {omega} must exceed the top age {}",
            ages.end
        )));
    }
    let mut out = Grid::filled(Span::new(ages.start, omega)?, q.year_span(), f64::NAN);
    for t in q.q.years() {
        let col = q.q.column(t).expect("year in grid");
        for (i, v) in close_column(&col, ages.start, closure_start, omega)?.into_iter().enumerate() {
            out.set(ages.start + i as u32, t, v);
        }
    }
    Ok(QSurface::new(out, q.gender, q.source))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{DeathsRecord, PopulationRecord, YearSuffix};

    fn pop(year: i32, age: u32, n: f64) -> PopulationRecord {
        PopulationRecord {
            year,
            suffix: YearSuffix::None,
            age,
            open_age: false,
            female: Some(n),
            male: Some(n),
            total: Some(2.0 * n),
        }
    }

    fn death(year: i32, age: u32, cohort: i32, n: f64) -> DeathsRecord {
        DeathsRecord {
            year,
            age,
            open_age: false,
            cohort,
            female: Some(n),
            male: Some(n),
            total: Some(2.0 * n),
        }
    }

    fn one_cell(p0: f64, p1: f64, lower: f64, upper: f64) -> Result<MortalitySurface> {
        let deaths = RawDeathsLexis {
            title: None,
            records: vec![death(2000, 50, 1950, lower), death(2000, 50, 1949, upper)],
        };
        let population = RawPopulation {
            title: None,
            records: vec![pop(2000, 50, p0), pop(2001, 50, p1)],
        };
        build_surface(
            &deaths,
            &population,
            Gender::Female,
            Span::new(50, 50).unwrap(),
            Span::new(2000, 2000).unwrap(),
            SuffixPolicy::Consistent,
        )
    }

    #[test]
    fn flat_population_exposure() {
        let s = one_cell(1000.0, 1000.0, 4.0, 6.0).unwrap();
        assert_eq!(s.exposure().at(50, 2000), 1000.0);
        assert_eq!(s.deaths().at(50, 2000), 10.0);
        assert_eq!(s.rates().at(50, 2000), 0.01);
    }

    #[test]
    fn midpoint_exposure() {
        let s = one_cell(800.0, 1200.0, 5.0, 5.0).unwrap();
        assert_eq!(s.exposure().at(50, 2000), 1000.0);
        assert_eq!(s.rates().at(50, 2000), 0.01);
    }

    #[test]
    fn missing_population_year_named() {
        let deaths = RawDeathsLexis {
            title: None,
            records: vec![death(2000, 50, 1950, 1.0), death(2000, 50, 1949, 1.0)],
        };
        let population = RawPopulation {
            title: None,
            records: vec![pop(2000, 50, 10.0)],
        };
        let err = build_surface(
            &deaths,
            &population,
            Gender::Female,
            Span::new(50, 50).unwrap(),
            Span::new(2000, 2000).unwrap(),
            SuffixPolicy::Consistent,
        )
        .unwrap_err();
        assert!(matches!(err, Error::MissingPopulationYear(2001)));
    }

    #[test]
    fn zero_exposure_rejected() {
        let err = one_cell(0.0, 0.0, 1.0, 1.0).unwrap_err();
        assert!(matches!(err, Error::NonPositiveExposure { age: 50, year: 2000, .. }));
    }

    #[test]
    fn missing_counts_stay_missing() {
        let mut deaths = RawDeathsLexis {
            title: None,
            records: vec![death(2000, 50, 1950, 1.0), death(2000, 50, 1949, 1.0)],
        };
        deaths.records[0].female = None;
        let population = RawPopulation {
            title: None,
            records: vec![pop(2000, 50, 10.0), pop(2001, 50, 10.0)],
        };
        let ages = Span::new(50, 50).unwrap();
        let years = Span::new(2000, 2000).unwrap();
        let s = build_surface(&deaths, &population, Gender::Female, ages, years, SuffixPolicy::Consistent).unwrap();
        assert!(s.rates().at(50, 2000).is_nan());
        assert!(s.has_missing());
        let m = build_surface(&deaths, &population, Gender::Male, ages, years, SuffixPolicy::Consistent).unwrap();
        assert_eq!(m.rates().at(50, 2000), 0.2);
    }

    fn surface_from_rates(rates: Grid) -> MortalitySurface {
        let e = rates.map(|_| 1000.0);
        let d = rates.map(|m| m * 1000.0);
        MortalitySurface::from_counts(d, e, Gender::Total, SourceTag::Crude).unwrap()
    }

    #[test]
    fn q_from_m() {
        let g = Grid::from_rows(0, 2000, vec![vec![0.0, std::f64::consts::LN_2]]).unwrap();
        let q = to_q(&surface_from_rates(g));
        assert_eq!(q.at(0, 2000), 0.0);
        assert!((q.at(0, 2001) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn improvement_rates() {
        let constant = surface_from_rates(Grid::from_rows(0, 2000, vec![vec![0.02, 0.02, 0.02]]).unwrap());
        assert!(improvements(&constant).unwrap().r.values().iter().all(|&r| r == 0.0));
        let halving = surface_from_rates(Grid::from_rows(0, 2000, vec![vec![0.04, 0.02, 0.01]]).unwrap());
        assert!(improvements(&halving).unwrap().r.values().iter().all(|&r| r == -0.5));
        let zero = surface_from_rates(Grid::from_rows(0, 2000, vec![vec![0.0, 0.02]]).unwrap());
        let imp = improvements(&zero).unwrap();
        assert_eq!(imp.undefined, vec![(0, 2000)]);
        assert!(imp.r.at(0, 2000).is_nan());
        let single = surface_from_rates(Grid::from_rows(0, 2000, vec![vec![0.01]]).unwrap());
        assert!(improvements(&single).is_err());
    }

    fn flat_q(value: f64, ages: (u32, u32)) -> QSurface {
        QSurface::new(
            Grid::filled(Span::new(ages.0, ages.1).unwrap(), Span::new(2000, 2001).unwrap(), value),
            Gender::Female,
            SourceTag::Crude,
        )
    }

    #[test]
    fn period_expectancy_closed_forms() {
        assert_eq!(period_life_expectancy(&flat_q(0.0, (30, 94)), 30, 95, 2000).unwrap(), 65.0);
        assert_eq!(period_life_expectancy(&flat_q(1.0, (30, 94)), 30, 95, 2000).unwrap(), 0.0);
        assert_eq!(period_life_expectancy(&flat_q(0.5, (30, 94)), 30, 33, 2000).unwrap(), 0.875);
        assert!(period_life_expectancy(&flat_q(0.5, (30, 94)), 30, 96, 2000).is_err());
        assert!(period_life_expectancy(&flat_q(0.5, (30, 94)), 30, 95, 2005).is_err());
    }

    #[test]
    fn death_curve_telescopes() {
        let all_die = death_curve(&flat_q(1.0, (0, 4)), 2000, 1000.0).unwrap();
        assert_eq!(all_die, vec![1000.0, 0.0, 0.0, 0.0, 0.0]);
        let q = QSurface::new(
            Grid::from_fn(Span::new(0, 9).unwrap(), Span::new(2000, 2000).unwrap(), |a, _| 0.01 * (a + 1) as f64),
            Gender::Female,
            SourceTag::Crude,
        );
        let d = death_curve(&q, 2000, 100_000.0).unwrap();
        let survive: f64 = (0..10).map(|a| 1.0 - 0.01 * (a + 1) as f64).product();
        let total: f64 = d.iter().sum();
        assert!((total - 100_000.0 * (1.0 - survive)).abs() < 1e-8);
        assert!(death_curve(&q, 2000, 0.0).is_err());
    }

    #[test]
    fn closure_reproduces_logistic_generator() {
        let gen = LogisticFit {
            intercept: -10.5,
            slope: 0.1,
        };
        let q = QSurface::new(
            Grid::from_fn(Span::new(60, 95).unwrap(), Span::new(2000, 2002).unwrap(), |a, _| gen.q(a as f64)),
            Gender::Female,
            SourceTag::Crude,
        );
        let closed = close_table(&q, 90, 120).unwrap();
        assert_eq!(closed.age_span(), Span::new(60, 120).unwrap());
        for t in 2000..=2002 {
            assert_eq!(closed.at(120, t), 1.0);
            for a in 91..120 {
                assert!((closed.at(a, t) - gen.q(a as f64)).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn closure_needs_five_ages() {
        let q = flat_q(0.1, (90, 93));
        assert!(close_table(&q, 93, 110).is_err());
        assert!(close_table(&flat_q(0.1, (80, 95)), 96, 110).is_err());
        assert!(close_table(&flat_q(0.1, (80, 95)), 95, 95).is_err());
    }

    #[test]
    fn closure_monotone_for_gompertz() {
        let q = QSurface::new(
            Grid::from_fn(Span::new(50, 95).unwrap(), Span::new(2000, 2004).unwrap(), |a, t| {
                let m = 2e-5 * (0.1 * a as f64).exp() * 0.98f64.powi(t - 2000);
                1.0 - (-m).exp()
            }),
            Gender::Male,
            SourceTag::Crude,
        );
        let closed = close_table(&q, 95, 120).unwrap();
        for t in 2000..=2004 {
            for a in 50..120 {
                assert!(closed.at(a + 1, t) >= closed.at(a, t), "age {a}, year {t}");
            }
        }
    }
}
