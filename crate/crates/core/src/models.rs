//! Maximum-likelihood fits of three stochastic mortality models:
//!
//! * `M1` (Lee–Carter): `ln m(x,t) = β1(x) + β2(x) κ2(t)`, Poisson deaths;
//! * `M3` (age–period–cohort): `ln m(x,t) = β1(x) + κ2(t) + γ(t−x)`, Poisson deaths;
//! * `M5` (Cairns–Blake–Dowd): `logit q(x,t) = κ1(t) + κ2(t) (x − x̄)`, binomial deaths.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::grid::{AgeSpan, Grid, YearSpan};
use crate::lexis::MortalitySurface;

pub const MAX_ITERATIONS: usize = 10_000;
pub const LL_TOLERANCE: f64 = 1e-10;
pub const PARAM_TOLERANCE: f64 = 1e-8;
/// Death-count floor used where a log of observed deaths is needed.
pub const DEATH_FLOOR: f64 = 1e-8;
/// Cohorts observed on fewer cells are pinned to `γ = 0`.
pub const MIN_COHORT_CELLS: usize = 5;
const MAX_HALVINGS: usize = 60;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ModelTag {
    M1,
    M3,
    M5,
}

impl ModelTag {
    pub const ALL: [ModelTag; 3] = [ModelTag::M1, ModelTag::M3, ModelTag::M5];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelTag::M1 => "M1",
            ModelTag::M3 => "M3",
            ModelTag::M5 => "M5",
        }
    }
}

impl std::fmt::Display for ModelTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ModelTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "m1" | "lc" | "lee-carter" => Ok(ModelTag::M1),
            "m3" | "apc" => Ok(ModelTag::M3),
            "m5" | "cbd" => Ok(ModelTag::M5),
            other => Err(Error::InvalidInput(format!("unknown model `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortEffect {
    pub cohort: i32,
    pub gamma: f64,
    /// Cells of the calibration window on this diagonal.
    pub cells: usize,
    /// Too few cells: held at zero and left out of the fit.
    pub pinned: bool,
}

/// Fitted parameters. Vectors not used by a model are empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub tag: ModelTag,
    pub ages: AgeSpan,
    pub years: YearSpan,
    /// `β1(x)`: age level (M1, M3).
    pub beta1: Vec<f64>,
    /// `β2(x)`: age sensitivity to the period index (M1).
    pub beta2: Vec<f64>,
    /// `κ1(t)`: level index (M5).
    pub kappa1: Vec<f64>,
    /// `κ2(t)`: period index (M1, M3) or slope index (M5).
    pub kappa2: Vec<f64>,
    /// `γ(c)` by year of birth, oldest cohort first (M3).
    pub cohorts: Vec<CohortEffect>,
    /// `x̄` (M5).
    pub mean_age: Option<f64>,
    pub constraints: Vec<String>,
}

impl ModelParams {
    fn age_index(&self, age: u32) -> usize {
        (age - self.ages.start) as usize
    }

    fn year_index(&self, year: i32) -> usize {
        (year - self.years.start) as usize
    }

    pub fn gamma(&self, cohort: i32) -> Option<f64> {
        let first = self.cohorts.first()?.cohort;
        let i = usize::try_from(cohort - first).ok()?;
        self.cohorts.get(i).map(|c| c.gamma)
    }

    /// Linear predictor inside the calibration window: `ln m` for M1/M3,
    /// `logit q` for M5.
    pub fn predictor(&self, age: u32, year: i32) -> f64 {
        let (i, j) = (self.age_index(age), self.year_index(year));
        match self.tag {
            ModelTag::M1 => self.beta1[i] + self.beta2[i] * self.kappa2[j],
            ModelTag::M3 => self.beta1[i] + self.kappa2[j] + self.gamma(year - age as i32).unwrap_or(0.0),
            ModelTag::M5 => self.kappa1[j] + self.kappa2[j] * (age as f64 - self.mean_age.unwrap_or(0.0)),
        }
    }

    pub fn fitted_q(&self, age: u32, year: i32) -> f64 {
        let eta = self.predictor(age, year);
        match self.tag {
            ModelTag::M1 | ModelTag::M3 => -(-eta.exp()).exp_m1(),
            ModelTag::M5 => logistic(eta),
        }
    }

    pub fn fitted_q_grid(&self) -> Grid {
        Grid::from_fn(self.ages, self.years, |x, t| self.fitted_q(x, t))
    }

    /// Number of free parameters after identification constraints.
    pub fn parameter_count(&self) -> usize {
        let a = self.beta1.len().max(self.beta2.len());
        let t = self.kappa2.len();
        match self.tag {
            ModelTag::M1 => 2 * a + t - 2,
            ModelTag::M3 => {
                let c = self.cohorts.iter().filter(|c| !c.pinned).count();
                (a + t + c).saturating_sub(3)
            }
            ModelTag::M5 => 2 * t,
        }
    }
}

impl ModelParams {
    /// Re-impose the identification constraints (`Σβ2 = 1`, `Σκ2 = 0` for M1;
    /// `Σκ2 = 0` and a trend-free `γ` for M3). The predictor is unchanged.
    pub fn renormalize(&mut self) -> Result<()> {
        match self.tag {
            ModelTag::M1 => normalize_m1(&mut self.beta1, &mut self.beta2, &mut self.kappa2),
            ModelTag::M3 => {
                let free: Vec<bool> = self.cohorts.iter().map(|c| !c.pinned).collect();
                let mut gamma: Vec<f64> = self.cohorts.iter().map(|c| c.gamma).collect();
                let cohort_min = self.cohorts.first().map_or(self.years.start - self.ages.end as i32, |c| c.cohort);
                normalize_m3(
                    &mut self.beta1,
                    &mut self.kappa2,
                    &mut gamma,
                    &free,
                    self.ages.start,
                    self.years.start,
                    cohort_min,
                );
                for (c, g) in self.cohorts.iter_mut().zip(gamma) {
                    c.gamma = g;
                }
                Ok(())
            }
            ModelTag::M5 => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub tag: ModelTag,
    pub log_likelihood: f64,
    pub parameters: usize,
    pub cells: usize,
    /// `lnL − (k/2) ln n`; higher is better.
    pub bic: f64,
    pub iterations: usize,
    pub gradient_norm: f64,
    /// Log-likelihood after each iteration, starting from the initial values.
    pub trace: Vec<f64>,
    pub residuals: Grid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFit {
    pub params: ModelParams,
    pub diagnostics: FitDiagnostics,
}

pub fn bic(log_likelihood: f64, parameters: usize, cells: usize) -> f64 {
    log_likelihood - 0.5 * parameters as f64 * (cells as f64).ln()
}

pub fn fit(tag: ModelTag, surface: &MortalitySurface) -> Result<ModelFit> {
    match tag {
        ModelTag::M1 => fit_m1(surface),
        ModelTag::M3 => fit_m3(surface),
        ModelTag::M5 => fit_m5(surface),
    }
}

fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Dense copy of a complete calibration window.
struct Cells {
    ages: AgeSpan,
    years: YearSpan,
    na: usize,
    nt: usize,
    d: Vec<f64>,
    e: Vec<f64>,
}

impl Cells {
    fn new(surface: &MortalitySurface) -> Result<Cells> {
        if let Some((x, t, _)) = surface.rates().cells().find(|c| c.2.is_nan()) {
            return Err(Error::InvalidInput(format!(
                "calibration window has a missing cell at age {x}, year {t}"
            )));
        }
        let d = surface.deaths();
        Ok(Cells {
            ages: surface.age_span(),
            years: surface.year_span(),
            na: d.n_ages(),
            nt: d.n_years(),
            d: d.values().to_vec(),
            e: surface.exposure().values().to_vec(),
        })
    }

    fn len(&self) -> usize {
        self.na * self.nt
    }

    fn age(&self, i: usize) -> u32 {
        self.ages.start + i as u32
    }

    fn year(&self, j: usize) -> i32 {
        self.years.start + j as i32
    }
}

fn poisson_ll(d: f64, mu: f64) -> f64 {
    let log_term = if d > 0.0 { d * mu.ln() } else { 0.0 };
    log_term - mu - ln_gamma(d + 1.0)
}

/// Poisson kernel `D η − E e^η`, equal to the log-likelihood up to a constant.
fn kernel(d: f64, e: f64, eta: f64) -> f64 {
    d * eta - e * eta.exp()
}

/// One-dimensional damped Newton step on a concave objective: halve until
/// the objective increases. Steps that cannot be told apart from rounding
/// are dropped, so flat directions do not drift.
fn damped_step(current: f64, step: f64, objective: impl Fn(f64) -> f64) -> f64 {
    if !step.is_finite() || step == 0.0 {
        return current;
    }
    let base = objective(current);
    let mut s = step;
    for _ in 0..MAX_HALVINGS {
        let candidate = current + s;
        if objective(candidate) > base {
            return candidate;
        }
        s *= 0.5;
    }
    current
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn converged(prev_ll: f64, ll: f64, max_update: f64) -> bool {
    (ll - prev_ll).abs() <= LL_TOLERANCE * ll.abs().max(1.0) && max_update < PARAM_TOLERANCE
}

fn stalled(model: &str, ll: f64, next: f64) {
    if ll - next > LL_TOLERANCE * ll.abs().max(1.0) {
        log::warn!("{model} fit stopped: log-likelihood fell from {ll} to {next}");
    } else {
        log::debug!("{model} fit stopped at rounding level");
    }
}

fn non_convergence(what: &str, trace: Vec<f64>) -> Error {
    let tail = trace[trace.len().saturating_sub(5)..].to_vec();
    Error::NonConvergence {
        what: what.to_string(),
        iterations: trace.len() - 1,
        trace: tail,
    }
}

fn warn_zero_rows(c: &Cells) {
    for i in 0..c.na {
        if c.d[i * c.nt..(i + 1) * c.nt].iter().all(|&d| d == 0.0) {
            log::warn!("no deaths at age {} in the calibration window; death floor applied", c.age(i));
        }
    }
}

/// Enforce `Σ β2 = 1` and `Σ κ2 = 0` without changing the predictor.
fn normalize_m1(beta1: &mut [f64], beta2: &mut [f64], kappa: &mut [f64]) -> Result<()> {
    let s: f64 = beta2.iter().sum();
    if !s.is_finite() || s.abs() < 1e-300 {
        return Err(Error::Numeric("age-sensitivity vector sums to zero".into()));
    }
    beta2.iter_mut().for_each(|b| *b /= s);
    kappa.iter_mut().for_each(|k| *k *= s);
    let mean = kappa.iter().sum::<f64>() / kappa.len() as f64;
    kappa.iter_mut().for_each(|k| *k -= mean);
    for (a, b) in beta1.iter_mut().zip(beta2.iter()) {
        *a += b * mean;
    }
    Ok(())
}

fn m1_init(c: &Cells) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let logm = |i: usize, j: usize| (c.d[i * c.nt + j].max(DEATH_FLOOR) / c.e[i * c.nt + j]).ln();
    let beta1: Vec<f64> = (0..c.na)
        .map(|i| (0..c.nt).map(|j| logm(i, j)).sum::<f64>() / c.nt as f64)
        .collect();
    let z = nalgebra::DMatrix::from_fn(c.na, c.nt, |i, j| logm(i, j) - beta1[i]);
    let fallback = (vec![1.0 / c.na as f64; c.na], vec![0.0; c.nt]);
    let (beta2, kappa) = match z.try_svd(true, true, f64::EPSILON, 200) {
        Some(svd) if svd.singular_values.len() > 0 && svd.singular_values[0] > 1e-12 => {
            let u = svd.u.as_ref().expect("requested").column(0).into_owned();
            let v = svd.v_t.as_ref().expect("requested").row(0).into_owned();
            let s = u.sum();
            if s.abs() < 1e-8 {
                fallback
            } else {
                let sv = svd.singular_values[0];
                (u.iter().map(|x| x / s).collect(), v.iter().map(|x| x * sv * s).collect())
            }
        }
        _ => fallback,
    };
    (beta1, beta2, kappa)
}

pub fn fit_m1(surface: &MortalitySurface) -> Result<ModelFit> {
    let c = Cells::new(surface)?;
    warn_zero_rows(&c);
    let (na, nt) = (c.na, c.nt);
    let (mut b1, mut b2, mut k) = m1_init(&c);
    normalize_m1(&mut b1, &mut b2, &mut k)?;

    let total_ll = |b1: &[f64], b2: &[f64], k: &[f64]| -> f64 {
        (0..na)
            .flat_map(|i| (0..nt).map(move |j| (i, j)))
            .map(|(i, j)| {
                let idx = i * nt + j;
                poisson_ll(c.d[idx], c.e[idx] * (b1[i] + b2[i] * k[j]).exp())
            })
            .sum()
    };

    let mut ll = total_ll(&b1, &b2, &k);
    let mut trace = vec![ll];
    let mut done = false;
    for _ in 0..MAX_ITERATIONS {
        let (p1, p2, pk) = (b1.clone(), b2.clone(), k.clone());
        for i in 0..na {
            let (mut sd, mut sm) = (0.0, 0.0);
            for j in 0..nt {
                let idx = i * nt + j;
                sd += c.d[idx];
                sm += c.e[idx] * (b1[i] + b2[i] * k[j]).exp();
            }
            b1[i] += (sd.max(DEATH_FLOOR) / sm).ln();
        }
        for j in 0..nt {
            let col = |kj: f64| -> f64 {
                (0..na)
                    .map(|i| kernel(c.d[i * nt + j], c.e[i * nt + j], b1[i] + b2[i] * kj))
                    .sum()
            };
            let (mut g, mut h) = (0.0, 0.0);
            for i in 0..na {
                let idx = i * nt + j;
                let mu = c.e[idx] * (b1[i] + b2[i] * k[j]).exp();
                g += (c.d[idx] - mu) * b2[i];
                h += mu * b2[i] * b2[i];
            }
            if h > 0.0 {
                k[j] = damped_step(k[j], g / h, col);
            }
        }
        for i in 0..na {
            let row = |bi: f64| -> f64 {
                (0..nt)
                    .map(|j| kernel(c.d[i * nt + j], c.e[i * nt + j], b1[i] + bi * k[j]))
                    .sum()
            };
            let (mut g, mut h) = (0.0, 0.0);
            for j in 0..nt {
                let idx = i * nt + j;
                let mu = c.e[idx] * (b1[i] + b2[i] * k[j]).exp();
                g += (c.d[idx] - mu) * k[j];
                h += mu * k[j] * k[j];
            }
            if h > 0.0 {
                b2[i] = damped_step(b2[i], g / h, row);
            }
        }
        normalize_m1(&mut b1, &mut b2, &mut k)?;
        let next = total_ll(&b1, &b2, &k);
        if !next.is_finite() {
            return Err(Error::Numeric("M1 log-likelihood is not finite".into()));
        }
        if next < ll {
            // Every sub-step ascends, so a drop is rounding: keep the previous point.
            stalled("M1", ll, next);
            (b1, b2, k) = (p1, p2, pk);
            done = true;
            break;
        }
        trace.push(next);
        let update = max_abs_diff(&p1, &b1).max(max_abs_diff(&p2, &b2)).max(max_abs_diff(&pk, &k));
        let prev = ll;
        ll = next;
        if converged(prev, ll, update) {
            done = true;
            break;
        }
    }
    if !done {
        return Err(non_convergence("M1 fit", trace));
    }

    let params = ModelParams {
        tag: ModelTag::M1,
        ages: c.ages,
        years: c.years,
        beta1: b1,
        beta2: b2,
        kappa1: Vec::new(),
        kappa2: k,
        cohorts: Vec::new(),
        mean_age: None,
        constraints: vec!["sum(beta2) = 1".into(), "sum(kappa2) = 0".into()],
    };
    let mut grad = vec![0.0; 2 * na + nt];
    for i in 0..na {
        for j in 0..nt {
            let idx = i * nt + j;
            let r = c.d[idx] - c.e[idx] * params.predictor(c.age(i), c.year(j)).exp();
            grad[i] += r;
            grad[na + i] += r * params.kappa2[j];
            grad[2 * na + j] += r * params.beta2[i];
        }
    }
    Ok(finish(params, surface, &c, trace, norm(&grad)))
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn finish(params: ModelParams, surface: &MortalitySurface, c: &Cells, trace: Vec<f64>, gradient_norm: f64) -> ModelFit {
    let log_likelihood = log_likelihood(&params, surface);
    let parameters = params.parameter_count();
    let cells = c.len();
    let diagnostics = FitDiagnostics {
        tag: params.tag,
        log_likelihood,
        parameters,
        cells,
        bic: bic(log_likelihood, parameters, cells),
        iterations: trace.len() - 1,
        gradient_norm,
        trace,
        residuals: standardized_residuals(&params, surface),
    };
    ModelFit { params, diagnostics }
}

/// Remove the linear trend of the estimated `γ` (over cohorts) and centre
/// `κ2`, moving both into `β1` and `κ2` so the predictor is unchanged.
fn normalize_m3(
    beta1: &mut [f64],
    kappa: &mut [f64],
    gamma: &mut [f64],
    free: &[bool],
    age_min: u32,
    year_min: i32,
    cohort_min: i32,
) {
    // Cohort offsets relative to the cohort of (age_min, year_min).
    let origin = year_min - age_min as i32;
    let pts: Vec<(f64, f64)> = gamma
        .iter()
        .zip(free)
        .enumerate()
        .filter(|(_, (_, &f))| f)
        .map(|(ci, (&g, _))| ((cohort_min + ci as i32 - origin) as f64, g))
        .collect();
    if !pts.is_empty() {
        let n = pts.len() as f64;
        let mc = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let mg = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let scc: f64 = pts.iter().map(|p| (p.0 - mc).powi(2)).sum();
        let slope = if scc > 0.0 {
            pts.iter().map(|p| (p.0 - mc) * (p.1 - mg)).sum::<f64>() / scc
        } else {
            0.0
        };
        let level = mg - slope * mc;
        for (ci, g) in gamma.iter_mut().enumerate() {
            if free[ci] {
                *g -= level + slope * (cohort_min + ci as i32 - origin) as f64;
            }
        }
        // γ trend `level + slope (t − x − origin)` = `level − slope (x − age_min)
        //  + slope (t − year_min)`.
        for (i, b) in beta1.iter_mut().enumerate() {
            *b += level - slope * i as f64;
        }
        for (j, k) in kappa.iter_mut().enumerate() {
            *k += slope * j as f64;
        }
    }
    let mean = kappa.iter().sum::<f64>() / kappa.len() as f64;
    kappa.iter_mut().for_each(|k| *k -= mean);
    beta1.iter_mut().for_each(|b| *b += mean);
}

pub fn fit_m3(surface: &MortalitySurface) -> Result<ModelFit> {
    let c = Cells::new(surface)?;
    warn_zero_rows(&c);
    let (na, nt) = (c.na, c.nt);
    let cohort_min = c.years.start - c.ages.end as i32;
    let n_cohorts = na + nt - 1;
    let cohort_of = |i: usize, j: usize| j + na - 1 - i;
    let mut counts = vec![0usize; n_cohorts];
    for i in 0..na {
        for j in 0..nt {
            counts[cohort_of(i, j)] += 1;
        }
    }
    let free: Vec<bool> = counts.iter().map(|&n| n >= MIN_COHORT_CELLS).collect();
    let pinned: Vec<i32> = free
        .iter()
        .enumerate()
        .filter(|(_, &f)| !f)
        .map(|(ci, _)| cohort_min + ci as i32)
        .collect();
    if !pinned.is_empty() {
        log::info!("M3: cohorts {pinned:?} have fewer than {MIN_COHORT_CELLS} cells; gamma pinned to 0");
    }
    let in_fit = |i: usize, j: usize| free[cohort_of(i, j)];
    if !(0..na).all(|i| (0..nt).any(|j| in_fit(i, j))) || !(0..nt).all(|j| (0..na).any(|i| in_fit(i, j))) {
        return Err(Error::InvalidInput(format!(
            "M3 needs a window with cohorts of at least {MIN_COHORT_CELLS} cells covering every age and year"
        )));
    }

    let mut b1: Vec<f64> = (0..na)
        .map(|i| {
            (0..nt)
                .map(|j| (c.d[i * nt + j].max(DEATH_FLOOR) / c.e[i * nt + j]).ln())
                .sum::<f64>()
                / nt as f64
        })
        .collect();
    let mut k = vec![0.0; nt];
    let mut g = vec![0.0; n_cohorts];

    let eta = |b1: &[f64], k: &[f64], g: &[f64], i: usize, j: usize| b1[i] + k[j] + g[cohort_of(i, j)];
    let fit_ll = |b1: &[f64], k: &[f64], g: &[f64]| -> f64 {
        let mut s = 0.0;
        for i in 0..na {
            for j in 0..nt {
                if in_fit(i, j) {
                    let idx = i * nt + j;
                    s += poisson_ll(c.d[idx], c.e[idx] * eta(b1, k, g, i, j).exp());
                }
            }
        }
        s
    };

    let mut ll = fit_ll(&b1, &k, &g);
    let mut trace = vec![ll];
    let mut done = false;
    for _ in 0..MAX_ITERATIONS {
        let (p1, pk, pg) = (b1.clone(), k.clone(), g.clone());
        for i in 0..na {
            let (mut sd, mut sm) = (0.0, 0.0);
            for j in (0..nt).filter(|&j| in_fit(i, j)) {
                sd += c.d[i * nt + j];
                sm += c.e[i * nt + j] * eta(&b1, &k, &g, i, j).exp();
            }
            b1[i] += (sd.max(DEATH_FLOOR) / sm).ln();
        }
        for j in 0..nt {
            let (mut sd, mut sm) = (0.0, 0.0);
            for i in (0..na).filter(|&i| in_fit(i, j)) {
                sd += c.d[i * nt + j];
                sm += c.e[i * nt + j] * eta(&b1, &k, &g, i, j).exp();
            }
            k[j] += (sd.max(DEATH_FLOOR) / sm).ln();
        }
        let mut sd = vec![0.0; n_cohorts];
        let mut sm = vec![0.0; n_cohorts];
        for i in 0..na {
            for j in 0..nt {
                let ci = cohort_of(i, j);
                if free[ci] {
                    sd[ci] += c.d[i * nt + j];
                    sm[ci] += c.e[i * nt + j] * eta(&b1, &k, &g, i, j).exp();
                }
            }
        }
        for ci in (0..n_cohorts).filter(|&ci| free[ci]) {
            g[ci] += (sd[ci].max(DEATH_FLOOR) / sm[ci]).ln();
        }
        normalize_m3(&mut b1, &mut k, &mut g, &free, c.ages.start, c.years.start, cohort_min);
        let next = fit_ll(&b1, &k, &g);
        if !next.is_finite() {
            return Err(Error::Numeric("M3 log-likelihood is not finite".into()));
        }
        if next < ll {
            stalled("M3", ll, next);
            (b1, k, g) = (p1, pk, pg);
            done = true;
            break;
        }
        trace.push(next);
        let update = max_abs_diff(&p1, &b1).max(max_abs_diff(&pk, &k)).max(max_abs_diff(&pg, &g));
        let prev = ll;
        ll = next;
        if converged(prev, ll, update) {
            done = true;
            break;
        }
    }
    if !done {
        return Err(non_convergence("M3 fit", trace));
    }

    let mut grad = vec![0.0; na + nt + n_cohorts];
    for i in 0..na {
        for j in (0..nt).filter(|&j| in_fit(i, j)) {
            let idx = i * nt + j;
            let r = c.d[idx] - c.e[idx] * eta(&b1, &k, &g, i, j).exp();
            grad[i] += r;
            grad[na + j] += r;
            grad[na + nt + cohort_of(i, j)] += r;
        }
    }
    let params = ModelParams {
        tag: ModelTag::M3,
        ages: c.ages,
        years: c.years,
        beta1: b1,
        beta2: Vec::new(),
        kappa1: Vec::new(),
        kappa2: k,
        cohorts: (0..n_cohorts)
            .map(|ci| CohortEffect {
                cohort: cohort_min + ci as i32,
                gamma: g[ci],
                cells: counts[ci],
                pinned: !free[ci],
            })
            .collect(),
        mean_age: None,
        constraints: vec![
            "sum(kappa2) = 0".into(),
            "sum(gamma) = 0 over estimated cohorts".into(),
            "sum(cohort * gamma) = 0 over estimated cohorts".into(),
        ],
    };
    Ok(finish(params, surface, &c, trace, norm(&grad)))
}

fn binomial_ll(d: f64, trials: f64, p: f64) -> f64 {
    let comb = ln_gamma(trials + 1.0) - ln_gamma(d + 1.0) - ln_gamma(trials - d + 1.0);
    let hit = if d > 0.0 { d * p.ln() } else { 0.0 };
    let miss = if trials - d > 0.0 { (trials - d) * (-p).ln_1p() } else { 0.0 };
    comb + hit + miss
}

/// Initial exposure `E + D/2` used as binomial trials.
pub fn initial_exposure(exposure: f64, deaths: f64) -> f64 {
    exposure + 0.5 * deaths
}

pub fn fit_m5(surface: &MortalitySurface) -> Result<ModelFit> {
    let c = Cells::new(surface)?;
    let (na, nt) = (c.na, c.nt);
    if na < 2 {
        return Err(Error::InvalidInput("M5 needs at least two ages".into()));
    }
    let mean_age = (0..na).map(|i| c.age(i) as f64).sum::<f64>() / na as f64;
    let z: Vec<f64> = (0..na).map(|i| c.age(i) as f64 - mean_age).collect();
    let trials: Vec<f64> = c.d.iter().zip(&c.e).map(|(&d, &e)| initial_exposure(e, d)).collect();

    for j in 0..nt {
        let deaths: f64 = (0..na).map(|i| c.d[i * nt + j]).sum();
        let survivors: f64 = (0..na).map(|i| trials[i * nt + j] - c.d[i * nt + j]).sum();
        if deaths <= 0.0 || survivors <= 0.0 {
            return Err(Error::Numeric(format!(
                "M5: year {} is separated (no {}); logistic fit undefined",
                c.year(j),
                if deaths <= 0.0 { "deaths" } else { "survivors" }
            )));
        }
    }

    let year_ll = |j: usize, k1: f64, k2: f64| -> f64 {
        (0..na)
            .map(|i| binomial_ll(c.d[i * nt + j], trials[i * nt + j], logistic(k1 + k2 * z[i])))
            .sum()
    };

    let zz: f64 = z.iter().map(|v| v * v).sum();
    let mut k1 = vec![0.0; nt];
    let mut k2 = vec![0.0; nt];
    for j in 0..nt {
        let lg: Vec<f64> = (0..na)
            .map(|i| {
                let q = (c.d[i * nt + j] / trials[i * nt + j]).clamp(1e-8, 1.0 - 1e-8);
                (q / (1.0 - q)).ln()
            })
            .collect();
        k1[j] = lg.iter().sum::<f64>() / na as f64;
        k2[j] = lg.iter().zip(&z).map(|(l, zi)| l * zi).sum::<f64>() / zz;
    }

    let mut ll: f64 = (0..nt).map(|j| year_ll(j, k1[j], k2[j])).sum();
    let mut trace = vec![ll];
    let mut active = vec![true; nt];
    let mut done = false;
    for _ in 0..MAX_ITERATIONS {
        let mut update: f64 = 0.0;
        for j in 0..nt {
            let (mut g1, mut g2, mut h11, mut h12, mut h22) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..na {
                let idx = i * nt + j;
                let p = logistic(k1[j] + k2[j] * z[i]);
                let w = trials[idx] * p * (1.0 - p);
                let r = c.d[idx] - trials[idx] * p;
                g1 += r;
                g2 += r * z[i];
                h11 += w;
                h12 += w * z[i];
                h22 += w * z[i] * z[i];
            }
            let det = h11 * h22 - h12 * h12;
            if !(det > 0.0) {
                return Err(Error::Numeric(format!("M5: singular information in year {}", c.year(j))));
            }
            let s1 = (h22 * g1 - h12 * g2) / det;
            let s2 = (h11 * g2 - h12 * g1) / det;
            let base = year_ll(j, k1[j], k2[j]);
            let mut f = 1.0;
            let mut moved = false;
            for _ in 0..MAX_HALVINGS {
                if year_ll(j, k1[j] + f * s1, k2[j] + f * s2) > base {
                    k1[j] += f * s1;
                    k2[j] += f * s2;
                    moved = true;
                    break;
                }
                f *= 0.5;
            }
            let u = if moved { (f * s1).abs().max((f * s2).abs()) } else { 0.0 };
            active[j] = u >= PARAM_TOLERANCE;
            update = update.max(u);
        }
        let next: f64 = (0..nt).map(|j| year_ll(j, k1[j], k2[j])).sum();
        if !next.is_finite() {
            return Err(Error::Numeric("M5 log-likelihood is not finite".into()));
        }
        trace.push(next);
        let prev = ll;
        ll = next;
        if converged(prev, ll, update) {
            done = true;
            break;
        }
    }
    if !done {
        let years: Vec<i32> = (0..nt).filter(|&j| active[j]).map(|j| c.year(j)).collect();
        return Err(non_convergence(&format!("M5 fit (years {years:?})"), trace));
    }

    let mut grad = vec![0.0; 2 * nt];
    for j in 0..nt {
        for i in 0..na {
            let idx = i * nt + j;
            let r = c.d[idx] - trials[idx] * logistic(k1[j] + k2[j] * z[i]);
            grad[j] += r;
            grad[nt + j] += r * z[i];
        }
    }
    let params = ModelParams {
        tag: ModelTag::M5,
        ages: c.ages,
        years: c.years,
        beta1: Vec::new(),
        beta2: Vec::new(),
        kappa1: k1,
        kappa2: k2,
        cohorts: Vec::new(),
        mean_age: Some(mean_age),
        constraints: Vec::new(),
    };
    Ok(finish(params, surface, &c, trace, norm(&grad)))
}

/// Log-likelihood of the surface under fitted parameters, over every cell of
/// the calibration window.
pub fn log_likelihood(params: &ModelParams, surface: &MortalitySurface) -> f64 {
    let (d, e) = (surface.deaths(), surface.exposure());
    let mut s = 0.0;
    for x in params.ages.start..=params.ages.end {
        for t in params.years.start..=params.years.end {
            let (dx, ex) = (d.at(x, t), e.at(x, t));
            s += match params.tag {
                ModelTag::M1 | ModelTag::M3 => poisson_ll(dx, ex * params.predictor(x, t).exp()),
                ModelTag::M5 => binomial_ll(dx, initial_exposure(ex, dx), params.fitted_q(x, t)),
            };
        }
    }
    s
}

/// `(D − Ê[D]) / sd(D)` per cell: Poisson for M1/M3, binomial for M5.
pub fn standardized_residuals(params: &ModelParams, surface: &MortalitySurface) -> Grid {
    let (d, e) = (surface.deaths(), surface.exposure());
    Grid::from_fn(params.ages, params.years, |x, t| {
        let (dx, ex) = (d.at(x, t), e.at(x, t));
        match params.tag {
            ModelTag::M1 | ModelTag::M3 => {
                let mu = ex * params.predictor(x, t).exp();
                (dx - mu) / mu.sqrt()
            }
            ModelTag::M5 => {
                let n = initial_exposure(ex, dx);
                let p = params.fitted_q(x, t);
                (dx - n * p) / (n * p * (1.0 - p)).sqrt()
            }
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BicRow {
    pub model: ModelTag,
    pub dataset: String,
    pub bic: f64,
    pub log_likelihood: f64,
    pub parameters: usize,
    pub cells: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BicChange {
    pub model: ModelTag,
    pub from: String,
    pub to: String,
    pub bic_from: f64,
    pub bic_to: f64,
    /// `(bic_to − bic_from) / |bic_from| × 100`; positive means improvement.
    pub pct_change: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BicComparison {
    /// Highest BIC first.
    pub ranking: Vec<BicRow>,
    /// Per model, each dataset against the first dataset listed for it.
    pub changes: Vec<BicChange>,
}

/// Rank fits by BIC (descending). Ties keep input order.
pub fn compare_bic(fits: &[(String, FitDiagnostics)]) -> BicComparison {
    let mut ranking: Vec<BicRow> = fits
        .iter()
        .map(|(dataset, d)| BicRow {
            model: d.tag,
            dataset: dataset.clone(),
            bic: d.bic,
            log_likelihood: d.log_likelihood,
            parameters: d.parameters,
            cells: d.cells,
        })
        .collect();
    let mut changes = Vec::new();
    for tag in ModelTag::ALL {
        let rows: Vec<&BicRow> = ranking.iter().filter(|r| r.model == tag).collect();
        if let Some((first, rest)) = rows.split_first() {
            for r in rest {
                changes.push(BicChange {
                    model: tag,
                    from: first.dataset.clone(),
                    to: r.dataset.clone(),
                    bic_from: first.bic,
                    bic_to: r.bic,
                    pct_change: (r.bic - first.bic) / first.bic.abs() * 100.0,
                });
            }
        }
    }
    ranking.sort_by(|a, b| b.bic.total_cmp(&a.bic));
    BicComparison { ranking, changes }
}
