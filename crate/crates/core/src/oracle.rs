//! Individual-level demographic micro-simulator.
//!
//! Each simulated person gets a birth instant inside a birth month and a
//! lifetime from a piecewise-constant hazard (constant within each integer
//! age × calendar year cell). Lifelines are tabulated exactly into Lexis
//! triangle deaths, January-1 populations and continuous person-years, so
//! the output is a ground truth for everything the pipeline estimates.

use std::collections::BTreeSet;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Gender, Grid, Span};
use crate::ingest::{
    format_deaths_lexis, format_monthly_births, format_population, DeathsRecord, MonthlyBirthSeries,
    PopulationRecord, RawDeathsLexis, RawPopulation, YearSuffix,
};
use crate::lexis::{MortalitySurface, SourceTag};

/// Baseline hazard by integer age.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Hazard {
    Constant { rate: f64 },
    /// Rates for consecutive ages from `age_min`; the last rate continues upward
    /// and the first applies below `age_min`.
    ByAge { age_min: u32, rates: Vec<f64> },
    /// `a · exp(b · x)`.
    Gompertz { a: f64, b: f64 },
}

impl Hazard {
    pub fn at_age(&self, age: u32) -> f64 {
        match self {
            Hazard::Constant { rate } => *rate,
            Hazard::ByAge { age_min, rates } => {
                let i = age.saturating_sub(*age_min) as usize;
                rates[i.min(rates.len() - 1)]
            }
            Hazard::Gompertz { a, b } => a * (b * age as f64).exp(),
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match self {
            Hazard::Constant { rate } => rate.is_finite() && *rate >= 0.0,
            Hazard::ByAge { rates, .. } => !rates.is_empty() && rates.iter().all(|r| r.is_finite() && *r >= 0.0),
            Hazard::Gompertz { a, b } => a.is_finite() && b.is_finite() && *a >= 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("invalid hazard {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BirthTiming {
    /// Uniform within the birth month.
    #[default]
    Uniform,
    /// Everyone born at the first instant of the month.
    MonthStart,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSpec {
    pub year: i32,
    pub births: u64,
    /// Share of births per month; defaults to uniform. Must sum to 1.
    #[serde(default)]
    pub months: Option<[f64; 12]>,
}

fn default_country() -> String {
    "SIM".into()
}

fn default_gender() -> Gender {
    Gender::Female
}

fn default_max_age() -> u32 {
    120
}

fn default_chunk() -> usize {
    1 << 16
}

fn default_factor() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleSpec {
    pub seed: u64,
    #[serde(default = "default_country")]
    pub country: String,
    #[serde(default = "default_gender")]
    pub gender: Gender,
    /// First and last calendar year tabulated; populations run to `last + 1`.
    pub first_year: i32,
    pub last_year: i32,
    pub cohorts: Vec<CohortSpec>,
    pub hazard: Hazard,
    /// Yearly multiplicative change of every rate, relative to `first_year`.
    #[serde(default = "default_factor")]
    pub annual_factor: f64,
    #[serde(default)]
    pub birth_timing: BirthTiming,
    /// Oldest age tabulated; older person-years are not recorded.
    #[serde(default = "default_max_age")]
    pub max_age: u32,
    /// Individuals per RNG substream.
    #[serde(default = "default_chunk")]
    pub chunk_size: usize,
}

impl OracleSpec {
    /// True hazard in cell `(age, year)`.
    pub fn rate(&self, age: u32, year: i32) -> f64 {
        self.hazard.at_age(age) * self.annual_factor.powi(year - self.first_year)
    }

    pub fn validate(&self) -> Result<()> {
        if self.first_year > self.last_year {
            return Err(Error::InvalidInput("first_year after last_year".into()));
        }
        if self.chunk_size == 0 {
            return Err(Error::InvalidInput("chunk_size must be positive".into()));
        }
        if !(self.annual_factor.is_finite() && self.annual_factor > 0.0) {
            return Err(Error::InvalidInput("annual_factor must be positive".into()));
        }
        self.hazard.validate()?;
        let mut seen = BTreeSet::new();
        for c in &self.cohorts {
            if !seen.insert(c.year) {
                return Err(Error::InvalidInput(format!("cohort {} listed twice", c.year)));
            }
            if c.year > self.last_year {
                return Err(Error::InvalidInput(format!("cohort {} born after the last year", c.year)));
            }
            if let Some(m) = &c.months {
                let sum: f64 = m.iter().sum();
                if m.iter().any(|v| !v.is_finite() || *v < 0.0) || (sum - 1.0).abs() > 1e-9 {
                    return Err(Error::InvalidInput(format!(
                        "monthly distribution of cohort {} must be non-negative and sum to 1",
                        c.year
                    )));
                }
            }
        }
        Ok(())
    }
}

pub fn parse_oracle_spec(text: &str) -> Result<OracleSpec> {
    let spec: OracleSpec = serde_json::from_str(text)?;
    spec.validate()?;
    Ok(spec)
}

/// Integer births per month by largest remainder; ties go to the earlier month.
pub fn allocate_months(births: u64, shares: &[f64; 12]) -> [u64; 12] {
    let raw: Vec<f64> = shares.iter().map(|s| s * births as f64).collect();
    let mut out: [u64; 12] = std::array::from_fn(|j| raw[j].floor() as u64);
    let assigned: u64 = out.iter().sum();
    let mut order: Vec<usize> = (0..12).collect();
    order.sort_by(|&a, &b| (raw[b] - raw[b].floor()).total_cmp(&(raw[a] - raw[a].floor())).then(a.cmp(&b)));
    for &j in order.iter().take(births.saturating_sub(assigned) as usize) {
        out[j] += 1;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleOutput {
    pub deaths: RawDeathsLexis,
    pub population: RawPopulation,
    pub births: MonthlyBirthSeries,
    /// `m*(x, t)` over ages `0..=max_age` and the tabulated years.
    pub true_rates: Grid,
    /// Person-years lived in each cell.
    pub exact_exposure: Grid,
    pub exact_deaths: Grid,
}

impl OracleOutput {
    /// Death rates on exact person-years, `D / E*`.
    pub fn exact_surface(&self, gender: Gender) -> Result<MortalitySurface> {
        MortalitySurface::from_counts(self.exact_deaths.clone(), self.exact_exposure.clone(), gender, SourceTag::Simulated)
    }

    /// Write `Deaths_lexis.txt`, `Population.txt` and `births_monthly.csv`.
    pub fn write_files(&self, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let files = [
            ("Deaths_lexis.txt", format_deaths_lexis(&self.deaths)),
            ("Population.txt", format_population(&self.population)),
            ("births_monthly.csv", format_monthly_births(&self.births)),
        ];
        let mut paths = Vec::new();
        for (name, text) in files {
            let p = dir.join(name);
            std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
            paths.push(p);
        }
        Ok(paths)
    }
}

/// Tabulation accumulators, ages `0..=max_age` by years.
struct Tab {
    n_years: usize,
    lower: Vec<u64>,
    upper: Vec<u64>,
    exposure: Vec<f64>,
    /// January-1 counts for `first_year..=last_year + 1`.
    pop: Vec<u64>,
}

impl Tab {
    fn new(n_ages: usize, n_years: usize) -> Tab {
        Tab {
            n_years,
            lower: vec![0; n_ages * n_years],
            upper: vec![0; n_ages * n_years],
            exposure: vec![0.0; n_ages * n_years],
            pop: vec![0; n_ages * (n_years + 1)],
        }
    }

    fn merge(&mut self, other: &Tab) {
        for (a, b) in self.lower.iter_mut().zip(&other.lower) {
            *a += b;
        }
        for (a, b) in self.upper.iter_mut().zip(&other.upper) {
            *a += b;
        }
        for (a, b) in self.exposure.iter_mut().zip(&other.exposure) {
            *a += b;
        }
        for (a, b) in self.pop.iter_mut().zip(&other.pop) {
            *a += b;
        }
    }
}

struct Chunk {
    cohort_index: usize,
    chunk_index: usize,
    year: i32,
    /// `(month, count)` runs covering this chunk.
    runs: Vec<(usize, u64)>,
}

fn plan_chunks(spec: &OracleSpec) -> (Vec<Chunk>, Vec<[u64; 12]>) {
    let mut chunks = Vec::new();
    let mut allocations = Vec::new();
    for (ci, c) in spec.cohorts.iter().enumerate() {
        let shares = c.months.unwrap_or([1.0 / 12.0; 12]);
        let alloc = allocate_months(c.births, &shares);
        allocations.push(alloc);
        let mut chunk_index = 0;
        let mut runs = Vec::new();
        let mut filled = 0u64;
        for (m, &n) in alloc.iter().enumerate() {
            let mut left = n;
            while left > 0 {
                let take = left.min(spec.chunk_size as u64 - filled);
                runs.push((m, take));
                filled += take;
                left -= take;
                if filled == spec.chunk_size as u64 {
                    chunks.push(Chunk {
                        cohort_index: ci,
                        chunk_index,
                        year: c.year,
                        runs: std::mem::take(&mut runs),
                    });
                    chunk_index += 1;
                    filled = 0;
                }
            }
        }
        if !runs.is_empty() {
            chunks.push(Chunk {
                cohort_index: ci,
                chunk_index,
                year: c.year,
                runs,
            });
        }
    }
    (chunks, allocations)
}

fn simulate_chunk(spec: &OracleSpec, chunk: &Chunk) -> Tab {
    let n_ages = spec.max_age as usize + 1;
    let n_years = (spec.last_year - spec.first_year + 1) as usize;
    let mut tab = Tab::new(n_ages, n_years);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(((chunk.cohort_index as u64) << 32) | chunk.chunk_index as u64);
    let end = (spec.last_year + 1) as f64;
    let b = chunk.year;
    for &(month, count) in &chunk.runs {
        for _ in 0..count {
            let offset = match spec.birth_timing {
                BirthTiming::Uniform => rng.random::<f64>(),
                BirthTiming::MonthStart => 0.0,
            };
            let birth = b as f64 + (month as f64 + offset) / 12.0;
            let budget: f64 = Exp1.sample(&mut rng);
            walk(spec, &mut tab, birth, b, budget, end);
        }
    }
    tab
}

/// Follow one life from birth, spending the exponential hazard budget across
/// age and calendar-year segments.
fn walk(spec: &OracleSpec, tab: &mut Tab, birth: f64, cohort: i32, mut budget: f64, end: f64) {
    let nt = tab.n_years;
    let cell = |age: u32, year: i32| -> Option<usize> {
        (age <= spec.max_age && year >= spec.first_year && year <= spec.last_year)
            .then(|| age as usize * nt + (year - spec.first_year) as usize)
    };
    let record_pop = |tab: &mut Tab, age: u32, year: i32| {
        if age <= spec.max_age && year >= spec.first_year && year <= spec.last_year + 1 {
            tab.pop[age as usize * (nt + 1) + (year - spec.first_year) as usize] += 1;
        }
    };
    let mut time = birth;
    let mut age = 0u32;
    let mut year = cohort;
    if birth == cohort as f64 {
        record_pop(tab, 0, cohort);
    }
    while time < end && age <= spec.max_age {
        let age_edge = birth + (age + 1) as f64;
        let year_edge = (year + 1) as f64;
        let seg_end = age_edge.min(year_edge).min(end);
        let h = spec.rate(age, year);
        let len = seg_end - time;
        if h * len >= budget {
            let lived = budget / h;
            if let Some(i) = cell(age, year) {
                tab.exposure[i] += lived;
                if year - age as i32 == cohort {
                    tab.lower[i] += 1;
                } else {
                    tab.upper[i] += 1;
                }
            }
            return;
        }
        budget -= h * len;
        if let Some(i) = cell(age, year) {
            tab.exposure[i] += len;
        }
        time = seg_end;
        if seg_end == age_edge {
            age += 1;
        }
        if seg_end == year_edge {
            year += 1;
            record_pop(tab, age, year);
        }
    }
}

pub fn simulate_population(spec: &OracleSpec) -> Result<OracleOutput> {
    simulate_population_with(spec, true)
}

/// As [`simulate_population`], optionally on the calling thread only. Both
/// modes give identical results.
pub fn simulate_population_with(spec: &OracleSpec, parallel: bool) -> Result<OracleOutput> {
    spec.validate()?;
    let (chunks, allocations) = plan_chunks(spec);
    let n_ages = spec.max_age as usize + 1;
    let n_years = (spec.last_year - spec.first_year + 1) as usize;
    let tabs: Vec<Tab> = if parallel {
        chunks.par_iter().map(|c| simulate_chunk(spec, c)).collect()
    } else {
        chunks.iter().map(|c| simulate_chunk(spec, c)).collect()
    };
    let mut tab = Tab::new(n_ages, n_years);
    for t in &tabs {
        tab.merge(t);
    }
    Ok(assemble(spec, &tab, &allocations))
}

fn split(gender: Gender, n: f64) -> (Option<f64>, Option<f64>, Option<f64>) {
    match gender {
        Gender::Female => (Some(n), Some(0.0), Some(n)),
        Gender::Male => (Some(0.0), Some(n), Some(n)),
        Gender::Total => (Some(n), Some(0.0), Some(n)),
    }
}

fn assemble(spec: &OracleSpec, tab: &Tab, allocations: &[[u64; 12]]) -> OracleOutput {
    let nt = tab.n_years;
    let ages = Span::new(0, spec.max_age).expect("ordered");
    let years = Span::new(spec.first_year, spec.last_year).expect("validated");
    let mut records = Vec::with_capacity(2 * (spec.max_age as usize + 1) * nt);
    for t in spec.first_year..=spec.last_year {
        for x in 0..=spec.max_age {
            let i = x as usize * nt + (t - spec.first_year) as usize;
            for (cohort, n) in [(t - x as i32, tab.lower[i]), (t - x as i32 - 1, tab.upper[i])] {
                let (female, male, total) = split(spec.gender, n as f64);
                records.push(DeathsRecord {
                    year: t,
                    age: x,
                    open_age: false,
                    cohort,
                    female,
                    male,
                    total,
                });
            }
        }
    }
    let mut pop = Vec::with_capacity((spec.max_age as usize + 1) * (nt + 1));
    for t in spec.first_year..=spec.last_year + 1 {
        for x in 0..=spec.max_age {
            let n = tab.pop[x as usize * (nt + 1) + (t - spec.first_year) as usize];
            let (female, male, total) = split(spec.gender, n as f64);
            pop.push(PopulationRecord {
                year: t,
                suffix: YearSuffix::None,
                age: x,
                open_age: false,
                female,
                male,
                total,
            });
        }
    }
    let mut births = MonthlyBirthSeries::new(spec.country.clone());
    for (c, alloc) in spec.cohorts.iter().zip(allocations) {
        births.insert_year(c.year, alloc.map(|n| n as f64));
    }
    let idx = |x: u32, t: i32| x as usize * nt + (t - spec.first_year) as usize;
    OracleOutput {
        deaths: RawDeathsLexis {
            title: Some(format!("{}, Deaths (Lexis triangle), simulated", spec.country)),
            records,
        },
        population: RawPopulation {
            title: Some(format!("{}, Population on January 1, simulated", spec.country)),
            records: pop,
        },
        births,
        true_rates: Grid::from_fn(ages, years, |x, t| spec.rate(x, t)),
        exact_exposure: Grid::from_fn(ages, years, |x, t| tab.exposure[idx(x, t)]),
        exact_deaths: Grid::from_fn(ages, years, |x, t| (tab.lower[idx(x, t)] + tab.upper[idx(x, t)]) as f64),
    }
}

/// Multiply rates along diagonals `t − x = cohort` by the given factors,
/// keeping deaths fixed and dividing exposure. Undone by `correct_surface`
/// with `I(cohort) = factor`.
pub fn inject_anomaly(surface: &MortalitySurface, cohorts: &[i32], factors: &[f64]) -> Result<MortalitySurface> {
    if cohorts.len() != factors.len() {
        return Err(Error::InvalidInput(format!(
            "{} cohorts but {} factors",
            cohorts.len(),
            factors.len()
        )));
    }
    let ages = surface.age_span();
    let years = surface.year_span();
    let lo = years.start - ages.end as i32;
    let hi = years.end - ages.start as i32;
    for (&c, &f) in cohorts.iter().zip(factors) {
        if !(f.is_finite() && f > 0.0) {
            return Err(Error::InvalidInput(format!("factor {f} for cohort {c} must be positive")));
        }
        if c < lo || c > hi {
            return Err(Error::InvalidInput(format!("cohort {c} has no diagonal in the surface ({lo}-{hi})")));
        }
    }
    let e = surface.exposure();
    let exposure = Grid::from_fn(ages, years, |x, t| {
        let b = t - x as i32;
        let f: f64 = cohorts
            .iter()
            .zip(factors)
            .filter(|(c, _)| **c == b)
            .map(|(_, f)| f)
            .product();
        e.at(x, t) / f
    });
    Ok(
        MortalitySurface::from_counts(surface.deaths().clone(), exposure, surface.gender(), surface.source())?
            .with_open_age(surface.open_age()),
    )
}

/// A surface with the given exposure and deaths drawn as `Poisson(E · m)`.
pub fn sample_poisson_surface(rates: &Grid, exposure: &Grid, gender: Gender, seed: u64) -> Result<MortalitySurface> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut deaths = Grid::filled(rates.age_span(), rates.year_span(), 0.0);
    for (x, t, m) in rates.cells() {
        let mean = m * exposure.get(x, t).ok_or_else(|| Error::ShapeMismatch("exposure grid".into()))?;
        let d = if mean > 0.0 {
            Poisson::new(mean)
                .map_err(|e| Error::InvalidInput(format!("Poisson mean {mean}: {e}")))?
                .sample(&mut rng)
        } else {
            0.0
        };
        deaths.set(x, t, d);
    }
    MortalitySurface::from_counts(deaths, exposure.clone(), gender, SourceTag::Simulated)
}
