//! Model choice: BIC ranking with residual-randomness and parameter-stability
//! advisories.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::models::{FitDiagnostics, ModelParams, ModelTag};

/// Years dropped from the end of the window for the stability refit.
pub const STABILITY_SHORTENING: i32 = 5;

/// Wald–Wolfowitz runs test on residual signs, pooled over sequences.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunsStat {
    pub runs: f64,
    pub expected: f64,
    pub z: f64,
    /// Two-sided normal p-value.
    pub p_value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunsReport {
    pub age: Option<RunsStat>,
    pub time: Option<RunsStat>,
    pub cohort: Option<RunsStat>,
}

impl RunsReport {
    /// Mean `|z|` over the axes with a defined statistic.
    pub fn mean_abs_z(&self) -> Option<f64> {
        let zs: Vec<f64> = [self.age, self.time, self.cohort].iter().flatten().map(|s| s.z.abs()).collect();
        (!zs.is_empty()).then(|| zs.iter().sum::<f64>() / zs.len() as f64)
    }
}

fn pooled_runs(sequences: impl Iterator<Item = Vec<bool>>) -> Option<RunsStat> {
    let (mut runs, mut mean, mut var) = (0.0, 0.0, 0.0);
    for seq in sequences {
        let n = seq.len() as f64;
        let pos = seq.iter().filter(|&&s| s).count() as f64;
        let neg = n - pos;
        if pos == 0.0 || neg == 0.0 {
            continue;
        }
        runs += 1.0 + seq.windows(2).filter(|w| w[0] != w[1]).count() as f64;
        let mu = 2.0 * pos * neg / n + 1.0;
        mean += mu;
        var += (mu - 1.0) * (mu - 2.0) / (n - 1.0);
    }
    if var <= 0.0 {
        return None;
    }
    let z = (runs - mean) / var.sqrt();
    let normal = Normal::standard();
    Some(RunsStat {
        runs,
        expected: mean,
        z,
        p_value: 2.0 * (1.0 - normal.cdf(z.abs())),
    })
}

/// Runs of residual signs along age (per year), time (per age) and cohort
/// (per diagonal). Missing and zero residuals are skipped.
pub fn runs_test(residuals: &Grid) -> RunsReport {
    let sign = |v: f64| (v.is_finite() && v != 0.0).then_some(v > 0.0);
    let by_age = residuals
        .years()
        .map(|t| residuals.ages().filter_map(|x| sign(residuals.at(x, t))).collect::<Vec<_>>());
    let by_time = residuals
        .ages()
        .map(|x| residuals.years().filter_map(|t| sign(residuals.at(x, t))).collect::<Vec<_>>());
    let mut diagonals: BTreeMap<i32, Vec<bool>> = BTreeMap::new();
    for t in residuals.years() {
        for x in residuals.ages() {
            if let Some(s) = sign(residuals.at(x, t)) {
                diagonals.entry(t - x as i32).or_default().push(s);
            }
        }
    }
    RunsReport {
        age: pooled_runs(by_age),
        time: pooled_runs(by_time),
        cohort: pooled_runs(diagonals.into_values()),
    }
}

fn relative_sup(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    if n == 0 {
        return 0.0;
    }
    let scale = a[..n].iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    let diff = a[..n].iter().zip(&b[..n]).fold(0.0f64, |m, (p, q)| m.max((p - q).abs()));
    diff / scale
}

/// Largest relative sup-norm change of any parameter vector between a fit and
/// its refit on a shortened window. Period indices are compared over the
/// shared years and cohort effects over the shared estimated cohorts.
pub fn parameter_drift(full: &ModelParams, short: &ModelParams) -> Result<f64> {
    if full.tag != short.tag || full.ages != short.ages || full.years.start != short.years.start {
        return Err(Error::ShapeMismatch("refit must share model, ages and first year".into()));
    }
    let gamma = |p: &ModelParams| -> BTreeMap<i32, f64> {
        p.cohorts.iter().filter(|c| !c.pinned).map(|c| (c.cohort, c.gamma)).collect()
    };
    let (gf, gs) = (gamma(full), gamma(short));
    let shared: Vec<i32> = gf.keys().filter(|c| gs.contains_key(c)).copied().collect();
    let gfv: Vec<f64> = shared.iter().map(|c| gf[c]).collect();
    let gsv: Vec<f64> = shared.iter().map(|c| gs[c]).collect();
    Ok([
        relative_sup(&full.beta1, &short.beta1),
        relative_sup(&full.beta2, &short.beta2),
        relative_sup(&full.kappa1, &short.kappa1),
        relative_sup(&full.kappa2, &short.kappa2),
        relative_sup(&gfv, &gsv),
    ]
    .into_iter()
    .fold(0.0, f64::max))
}

/// One fitted model offered for selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub diagnostics: FitDiagnostics,
    pub runs: RunsReport,
    /// `None` when the shortened refit could not be made.
    pub drift: Option<f64>,
}

impl Candidate {
    pub fn new(diagnostics: FitDiagnostics, drift: Option<f64>) -> Self {
        Candidate {
            runs: runs_test(&diagnostics.residuals),
            diagnostics,
            drift,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SelectionWeights {
    /// Penalty per unit of mean `|z|` in the runs tests.
    pub residual: f64,
    /// Penalty per unit of relative parameter drift.
    pub stability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRow {
    pub model: ModelTag,
    pub bic: f64,
    pub runs_mean_abs_z: Option<f64>,
    pub drift: Option<f64>,
    /// `bic − residual·mean|z| − stability·drift`; equals BIC with zero weights.
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    /// Best score first.
    pub ranking: Vec<CandidateRow>,
    pub best_by_score: ModelTag,
    pub override_model: Option<ModelTag>,
    pub selected: ModelTag,
    pub candidates: Vec<Candidate>,
}

/// Rank candidates and pick the best score unless `override_model` names one
/// of them.
pub fn select_model(
    candidates: &[Candidate],
    weights: SelectionWeights,
    override_model: Option<ModelTag>,
) -> Result<SelectionReport> {
    if candidates.is_empty() {
        return Err(Error::InvalidInput("no fitted models to select from".into()));
    }
    let mut ranking: Vec<CandidateRow> = candidates
        .iter()
        .map(|c| {
            let z = c.runs.mean_abs_z();
            CandidateRow {
                model: c.diagnostics.tag,
                bic: c.diagnostics.bic,
                runs_mean_abs_z: z,
                drift: c.drift,
                score: c.diagnostics.bic
                    - weights.residual * z.unwrap_or(0.0)
                    - weights.stability * c.drift.unwrap_or(0.0),
            }
        })
        .collect();
    ranking.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.model.cmp(&b.model)));
    let best = ranking[0].model;
    if let Some(m) = override_model {
        if !ranking.iter().any(|r| r.model == m) {
            return Err(Error::InvalidInput(format!("override names {m}, which was not fitted")));
        }
    }
    Ok(SelectionReport {
        best_by_score: best,
        override_model,
        selected: override_model.unwrap_or(best),
        ranking,
        candidates: candidates.to_vec(),
    })
}
