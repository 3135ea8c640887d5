//! Stochastic projection of fitted models with random-walk-with-drift
//! period indices, scenario percentiles and life-expectancy fans.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{AgeSpan, Grid, Span, YearSpan};
use crate::lexis::close_column;
use crate::models::{ModelParams, ModelTag};

/// Fewest fitted periods accepted for estimating dynamics.
pub const MIN_PERIODS: usize = 10;

/// Random walk with drift: `y(t+1) = y(t) + drift + ε`, `ε ~ N(0, covariance)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomWalk {
    pub drift: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
    /// Number of first differences used.
    pub differences: usize,
}

impl RandomWalk {
    /// Estimate from a multivariate series given as one vector per component.
    pub fn estimate(components: &[&[f64]]) -> Result<RandomWalk> {
        let n = components.first().map_or(0, |c| c.len());
        if n < 3 || components.iter().any(|c| c.len() != n) {
            return Err(Error::InvalidInput(format!(
                "random walk needs at least 3 aligned observations, got {n}"
            )));
        }
        let diffs: Vec<Vec<f64>> = components
            .iter()
            .map(|c| c.windows(2).map(|w| w[1] - w[0]).collect())
            .collect();
        let m = (n - 1) as f64;
        let drift: Vec<f64> = diffs.iter().map(|d| d.iter().sum::<f64>() / m).collect();
        let covariance = (0..diffs.len())
            .map(|a| {
                (0..diffs.len())
                    .map(|b| {
                        diffs[a]
                            .iter()
                            .zip(&diffs[b])
                            .map(|(x, y)| (x - drift[a]) * (y - drift[b]))
                            .sum::<f64>()
                            / (m - 1.0)
                    })
                    .collect()
            })
            .collect();
        Ok(RandomWalk {
            drift,
            covariance,
            differences: n - 1,
        })
    }

    pub fn dim(&self) -> usize {
        self.drift.len()
    }

    /// Lower Cholesky factor; non-positive pivots (degenerate directions) give zero columns.
    pub fn cholesky(&self) -> Vec<Vec<f64>> {
        let n = self.dim();
        let c = &self.covariance;
        let mut l = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..=i {
                let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
                if i == j {
                    l[i][j] = (c[i][i] - s).max(0.0).sqrt();
                } else if l[j][j] > 0.0 {
                    l[i][j] = (c[i][j] - s) / l[j][j];
                }
            }
        }
        l
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeriesDynamics {
    pub tag: ModelTag,
    /// `κ2` for M1/M3, `(κ1, κ2)` for M5.
    pub index: RandomWalk,
    /// `γ` over estimated cohorts (M3).
    pub cohort: Option<RandomWalk>,
}

pub fn estimate_dynamics(params: &ModelParams) -> Result<TimeSeriesDynamics> {
    let t = params.kappa2.len();
    if t < MIN_PERIODS {
        return Err(Error::InvalidInput(format!(
            "{t} fitted periods; at least {MIN_PERIODS} are needed to estimate dynamics"
        )));
    }
    let index = match params.tag {
        ModelTag::M1 | ModelTag::M3 => RandomWalk::estimate(&[&params.kappa2])?,
        ModelTag::M5 => RandomWalk::estimate(&[&params.kappa1, &params.kappa2])?,
    };
    let cohort = if params.tag == ModelTag::M3 {
        let gammas: Vec<f64> = params.cohorts.iter().filter(|c| !c.pinned).map(|c| c.gamma).collect();
        Some(RandomWalk::estimate(&[&gammas])?)
    } else {
        None
    };
    Ok(TimeSeriesDynamics {
        tag: params.tag,
        index,
        cohort,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProjectionSettings {
    pub scenarios: usize,
    pub horizon: usize,
    pub seed: u64,
    /// Age closing every table, with `q(omega) = 1`.
    pub omega: u32,
}

impl Default for ProjectionSettings {
    fn default() -> Self {
        ProjectionSettings {
            scenarios: 5000,
            horizon: 60,
            seed: 0,
            omega: 120,
        }
    }
}

/// Projected death probabilities per scenario. Scenario 0 is the central
/// path with all innovations set to zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSet {
    pub tag: ModelTag,
    pub settings: ProjectionSettings,
    /// Last fitted year `t0`.
    pub base_year: i32,
    /// Fitted ages before closure.
    pub band: AgeSpan,
    /// Fitted `q` at `t0`, closed to omega.
    pub base: Vec<f64>,
    pub scenarios: Vec<Grid>,
    pub clamped: usize,
}

impl ScenarioSet {
    pub fn ages(&self) -> AgeSpan {
        Span {
            start: self.band.start,
            end: self.settings.omega,
        }
    }

    pub fn years(&self) -> YearSpan {
        Span {
            start: self.base_year + 1,
            end: self.base_year + self.settings.horizon as i32,
        }
    }

    pub fn central(&self) -> &Grid {
        &self.scenarios[0]
    }

    pub fn base_q(&self, age: u32) -> f64 {
        self.base[(age - self.band.start) as usize]
    }

    /// Base year column followed by the projection of one scenario.
    pub fn with_base(&self, scenario: usize) -> Grid {
        let years = Span::new(self.base_year, self.years().end).expect("ordered");
        let s = &self.scenarios[scenario];
        Grid::from_fn(self.ages(), years, |x, t| if t == self.base_year { self.base_q(x) } else { s.at(x, t) })
    }
}

struct Projector<'a> {
    params: &'a ModelParams,
    dynamics: &'a TimeSeriesDynamics,
    settings: ProjectionSettings,
    index_chol: Vec<Vec<f64>>,
    cohort_chol: f64,
    last_cohort: Option<(i32, f64)>,
}

impl Projector<'_> {
    /// Closed `q` column over `band.start..=omega` from a band predictor.
    fn column(&self, year_eta: impl Fn(u32) -> f64, clamped: &mut usize) -> Result<Vec<f64>> {
        let band = self.params.ages;
        let raw: Vec<f64> = (band.start..=band.end)
            .map(|x| {
                let eta = year_eta(x);
                let q = match self.params.tag {
                    ModelTag::M1 | ModelTag::M3 => -(-eta.exp()).exp_m1(),
                    ModelTag::M5 => 1.0 / (1.0 + (-eta).exp()),
                };
                if !(0.0..=1.0).contains(&q) {
                    *clamped += 1;
                    if q.is_nan() { 1.0 } else { q.clamp(0.0, 1.0) }
                } else {
                    q
                }
            })
            .collect();
        close_column(&raw, band.start, band.end, self.settings.omega)
    }

    fn scenario(&self, index: usize) -> Result<(Grid, usize)> {
        let p = self.params;
        let s = self.settings;
        let t0 = p.years.end;
        let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
        rng.set_stream(index as u64);
        let draw = |rng: &mut ChaCha8Rng| -> f64 {
            if index == 0 {
                0.0
            } else {
                StandardNormal.sample(rng)
            }
        };
        let dim = self.dynamics.index.dim();
        let mut state: Vec<f64> = match p.tag {
            ModelTag::M1 | ModelTag::M3 => vec![*p.kappa2.last().expect("fitted")],
            ModelTag::M5 => vec![*p.kappa1.last().expect("fitted"), *p.kappa2.last().expect("fitted")],
        };
        let mut path = Vec::with_capacity(s.horizon);
        for _ in 0..s.horizon {
            let z: Vec<f64> = (0..dim).map(|_| draw(&mut rng)).collect();
            for (i, v) in state.iter_mut().enumerate() {
                let shock: f64 = (0..=i).map(|k| self.index_chol[i][k] * z[k]).sum();
                *v += self.dynamics.index.drift[i] + shock;
            }
            path.push(state.clone());
        }
        // Cohort effects beyond the last estimated cohort, youngest needed last.
        let mut future_gamma = Vec::new();
        if let (Some((last, g_last)), Some(rw)) = (self.last_cohort, &self.dynamics.cohort) {
            let youngest = t0 + s.horizon as i32 - p.ages.start as i32;
            let mut g = g_last;
            for _ in last + 1..=youngest {
                g += rw.drift[0] + self.cohort_chol * draw(&mut rng);
                future_gamma.push(g);
            }
        }
        let gamma = |c: i32| -> f64 {
            match self.last_cohort {
                Some((last, _)) if c > last => future_gamma[(c - last - 1) as usize],
                _ => p.gamma(c).unwrap_or(0.0),
            }
        };

        let ages = Span::new(p.ages.start, s.omega)?;
        let years = Span::new(t0 + 1, t0 + s.horizon as i32)?;
        let mut grid = Grid::filled(ages, years, f64::NAN);
        let mut clamped = 0;
        for (h, st) in path.iter().enumerate() {
            let t = t0 + 1 + h as i32;
            let col = self.column(
                |x| {
                    let i = (x - p.ages.start) as usize;
                    match p.tag {
                        ModelTag::M1 => p.beta1[i] + p.beta2[i] * st[0],
                        ModelTag::M3 => p.beta1[i] + st[0] + gamma(t - x as i32),
                        ModelTag::M5 => st[0] + st[1] * (x as f64 - p.mean_age.unwrap_or(0.0)),
                    }
                },
                &mut clamped,
            )?;
            for (k, q) in col.into_iter().enumerate() {
                grid.set(p.ages.start + k as u32, t, q);
            }
        }
        Ok((grid, clamped))
    }
}

/// Draw `settings.scenarios` projections of `settings.horizon` years beyond
/// the last fitted year. Scenario `s` uses ChaCha8 seeded from
/// `settings.seed` on stream `s`, so results do not depend on threading.
pub fn simulate(params: &ModelParams, dynamics: &TimeSeriesDynamics, settings: ProjectionSettings) -> Result<ScenarioSet> {
    if settings.scenarios == 0 || settings.horizon == 0 {
        return Err(Error::InvalidInput("scenario count and horizon must be positive".into()));
    }
    if settings.omega <= params.ages.end {
        return Err(Error::InvalidInput(format!(
            "omega {} must exceed the top fitted age {}",
            settings.omega, params.ages.end
        )));
    }
    if dynamics.tag != params.tag {
        return Err(Error::InvalidInput("dynamics estimated for a different model".into()));
    }
    let last_cohort = params
        .cohorts
        .iter()
        .rev()
        .find(|c| !c.pinned)
        .map(|c| (c.cohort, c.gamma));
    let projector = Projector {
        params,
        dynamics,
        settings,
        index_chol: dynamics.index.cholesky(),
        cohort_chol: dynamics.cohort.as_ref().map_or(0.0, |c| c.covariance[0][0].max(0.0).sqrt()),
        last_cohort,
    };
    let t0 = params.years.end;
    let mut base_clamped = 0;
    let base = projector.column(|x| params.predictor(x, t0), &mut base_clamped)?;
    let results: Vec<Result<(Grid, usize)>> = (0..settings.scenarios)
        .into_par_iter()
        .map(|s| projector.scenario(s))
        .collect();
    let mut scenarios = Vec::with_capacity(settings.scenarios);
    let mut clamped = base_clamped;
    for r in results {
        let (g, c) = r?;
        clamped += c;
        scenarios.push(g);
    }
    if clamped > 0 {
        log::warn!("{clamped} projected probabilities clamped to [0, 1]");
    }
    Ok(ScenarioSet {
        tag: params.tag,
        settings,
        base_year: t0,
        band: params.ages,
        base,
        scenarios,
        clamped,
    })
}

/// Index of the nearest-rank (lower) empirical `p`-th percentile in a sorted
/// sample of size `n`.
pub fn nearest_rank(p: f64, n: usize) -> usize {
    let rank = (p / 100.0 * n as f64).ceil() as usize;
    rank.clamp(1, n) - 1
}

/// Pointwise percentile of the improvement ratio `(q − q0) / q0`, mapped back
/// to `q0 (1 + IR)`. Covers the projection years.
pub fn percentile_table(set: &ScenarioSet, p: f64) -> Result<Grid> {
    if !(p > 0.0 && p < 100.0) {
        return Err(Error::InvalidInput(format!("percentile {p} outside (0, 100)")));
    }
    if set.scenarios.len() < 1000 {
        log::warn!("percentile from only {} scenarios", set.scenarios.len());
    }
    let ages = set.ages();
    let years = set.years();
    let k = nearest_rank(p, set.scenarios.len());
    let mut out = Grid::filled(ages, years, f64::NAN);
    let mut buf = Vec::with_capacity(set.scenarios.len());
    for x in ages.start..=ages.end {
        let q0 = set.base_q(x);
        if q0 <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "base probability at age {x} is zero; improvement ratio undefined"
            )));
        }
        for t in years.start..=years.end {
            buf.clear();
            buf.extend(set.scenarios.iter().map(|g| (g.at(x, t) - q0) / q0));
            buf.sort_by(f64::total_cmp);
            out.set(x, t, q0 * (1.0 + buf[k]));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExpectancyKind {
    Period,
    Cohort,
}

impl std::str::FromStr for ExpectancyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "period" => Ok(ExpectancyKind::Period),
            "cohort" => Ok(ExpectancyKind::Cohort),
            other => Err(Error::InvalidInput(format!("unknown expectancy kind `{other}`"))),
        }
    }
}

/// Curtate expectancy summed over `from_age..truncation` with `q` given by
/// the closure, which receives the step index.
pub(crate) fn curtate(from_age: u32, truncation: u32, q: impl Fn(u32) -> f64) -> f64 {
    let mut survival = 1.0;
    let mut total = 0.0;
    for i in 0..truncation.saturating_sub(from_age) {
        survival *= 1.0 - q(i);
        total += survival;
    }
    total
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpectancyFan {
    pub kind: ExpectancyKind,
    pub age: u32,
    pub truncation: u32,
    pub years: Vec<i32>,
    /// `[scenario][year]`.
    pub per_scenario: Vec<Vec<f64>>,
    /// `(percentile, curve)` for 0.5, 50 and 99.5.
    pub percentiles: Vec<(f64, Vec<f64>)>,
}

pub const FAN_PERCENTILES: [f64; 3] = [0.5, 50.0, 99.5];

pub fn life_expectancy_fan(set: &ScenarioSet, kind: ExpectancyKind, age: u32, truncation: u32) -> Result<ExpectancyFan> {
    let ages = set.ages();
    if truncation > ages.end || age < ages.start || age >= truncation {
        return Err(Error::InvalidInput(format!(
            "expectancy from {age} to {truncation} not inside ages {}-{}",
            ages.start, ages.end
        )));
    }
    let span = set.years();
    let years: Vec<i32> = match kind {
        ExpectancyKind::Period => (span.start..=span.end).collect(),
        ExpectancyKind::Cohort => {
            let steps = (truncation - age) as i32;
            (span.start..=span.end - steps + 1).collect()
        }
    };
    if years.is_empty() {
        return Err(Error::InvalidInput(format!(
            "horizon of {} years is too short for cohort expectancy from {age} to {truncation}",
            set.settings.horizon
        )));
    }
    let per_scenario: Vec<Vec<f64>> = set
        .scenarios
        .par_iter()
        .map(|g| {
            years
                .iter()
                .map(|&t| match kind {
                    ExpectancyKind::Period => curtate(age, truncation, |i| g.at(age + i, t)),
                    ExpectancyKind::Cohort => curtate(age, truncation, |i| g.at(age + i, t + i as i32)),
                })
                .collect()
        })
        .collect();
    let n = per_scenario.len();
    let percentiles = FAN_PERCENTILES
        .iter()
        .map(|&p| {
            let k = nearest_rank(p, n);
            let curve = (0..years.len())
                .map(|j| {
                    let mut v: Vec<f64> = per_scenario.iter().map(|s| s[j]).collect();
                    v.sort_by(f64::total_cmp);
                    v[k]
                })
                .collect();
            (p, curve)
        })
        .collect();
    Ok(ExpectancyFan {
        kind,
        age,
        truncation,
        years,
        per_scenario,
        percentiles,
    })
}
