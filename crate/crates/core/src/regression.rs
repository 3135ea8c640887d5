//! Reconstruction of a country's correction indicator from donor countries
//! by ordinary least squares with exhaustive subset selection.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::correction::{CorrectionIndicator, Provenance};
use crate::error::{Error, Result};
use crate::grid::YearSpan;

/// Year → indicator value.
pub type Series = BTreeMap<i32, f64>;

/// Largest donor set accepted by the exhaustive search.
pub const MAX_DONORS: usize = 12;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    Bic,
    #[default]
    #[serde(rename = "adjr2")]
    AdjR2,
}

impl std::str::FromStr for Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "bic" => Ok(Criterion::Bic),
            "adjr2" | "adj-r2" | "adjusted-r2" => Ok(Criterion::AdjR2),
            other => Err(Error::InvalidInput(format!("unknown criterion `{other}`"))),
        }
    }
}

impl std::fmt::Display for Criterion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Criterion::Bic => "bic",
            Criterion::AdjR2 => "adjr2",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OlsFit {
    pub donors: Vec<String>,
    pub intercept: f64,
    pub intercept_se: f64,
    pub coefficients: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub window: YearSpan,
    pub n: usize,
    pub rss: f64,
    pub r2: f64,
    pub adj_r2: f64,
    /// `n ln(RSS/n) + (k+1) ln n`; lower is better.
    pub bic: f64,
    pub residuals: Series,
}

impl OlsFit {
    pub fn score(&self, criterion: Criterion) -> f64 {
        match criterion {
            Criterion::Bic => self.bic,
            Criterion::AdjR2 => self.adj_r2,
        }
    }

    pub fn coefficient(&self, donor: &str) -> Option<f64> {
        self.donors
            .iter()
            .position(|d| d == donor)
            .map(|i| self.coefficients[i])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetScore {
    pub donors: Vec<String>,
    /// `None` when the subset's design is rank-deficient or too small.
    pub adj_r2: Option<f64>,
    pub bic: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub criterion: Criterion,
    pub chosen: OlsFit,
    pub by_bic: OlsFit,
    pub by_adj_r2: OlsFit,
    pub subsets: Vec<SubsetScore>,
}

fn window_values(series: &Series, window: YearSpan, name: &str) -> Result<Vec<f64>> {
    let mut missing = Vec::new();
    let values: Vec<f64> = (window.start..=window.end)
        .map(|y| match series.get(&y) {
            Some(v) if v.is_finite() => *v,
            _ => {
                missing.push(y);
                f64::NAN
            }
        })
        .collect();
    if !missing.is_empty() {
        return Err(Error::InvalidInput(format!("{name} undefined in years {missing:?}")));
    }
    Ok(values)
}

/// Check columns for linear dependence by modified Gram–Schmidt, naming the
/// first column that lies in the span of the earlier ones.
fn check_rank(x: &DMatrix<f64>, names: &[String]) -> Result<()> {
    let mut basis: Vec<DVector<f64>> = Vec::new();
    for j in 0..x.ncols() {
        let original = x.column(j).into_owned();
        let scale = original.norm();
        let mut v = original;
        for b in &basis {
            let proj = b.dot(&v);
            v -= b * proj;
        }
        let norm = v.norm();
        if scale == 0.0 || norm <= 1e-10 * scale {
            let what = if j == 0 { "intercept".to_string() } else { names[j - 1].clone() };
            let earlier: Vec<&str> = std::iter::once("intercept")
                .chain(names[..j.saturating_sub(1)].iter().map(String::as_str))
                .take(j)
                .collect();
            return Err(Error::RankDeficient(format!(
                "{what} is collinear with {}",
                if earlier.is_empty() { "nothing (zero column)".to_string() } else { earlier.join(", ") }
            )));
        }
        basis.push(v / norm);
    }
    Ok(())
}

/// Least squares of `target` on an intercept and every donor over `window`.
pub fn fit_ols(target: &Series, donors: &BTreeMap<String, Series>, window: YearSpan) -> Result<OlsFit> {
    let y = window_values(target, window, "target")?;
    let names: Vec<String> = donors.keys().cloned().collect();
    let cols = donors
        .iter()
        .map(|(name, s)| window_values(s, window, name))
        .collect::<Result<Vec<_>>>()?;
    ols(&y, &names, &cols, window)
}

fn ols(y: &[f64], names: &[String], cols: &[Vec<f64>], window: YearSpan) -> Result<OlsFit> {
    let n = y.len();
    let k = cols.len();
    if n < k + 2 {
        return Err(Error::InvalidInput(format!(
            "{n} observations cannot support {k} donors (need at least {})",
            k + 2
        )));
    }
    for (name, c) in names.iter().zip(cols) {
        if c.iter().all(|&v| v == c[0]) {
            return Err(Error::RankDeficient(format!("donor {name} is constant on the window")));
        }
    }
    let x = DMatrix::from_fn(n, k + 1, |i, j| if j == 0 { 1.0 } else { cols[j - 1][i] });
    check_rank(&x, names)?;
    let yv = DVector::from_column_slice(y);
    let qr = x.clone().qr();
    let r = qr.r();
    let qty = qr.q().transpose() * &yv;
    let beta = r
        .solve_upper_triangular(&qty)
        .ok_or_else(|| Error::RankDeficient("singular triangular factor".into()))?;
    let fitted = &x * &beta;
    let resid = &yv - fitted;
    let rss = resid.norm_squared();
    let mean = y.iter().sum::<f64>() / n as f64;
    let tss: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    let r2 = if tss > 0.0 { 1.0 - rss / tss } else { 1.0 };
    let adj_r2 = 1.0 - (1.0 - r2) * (n as f64 - 1.0) / (n - k - 1) as f64;
    let bic = n as f64 * (rss / n as f64).ln() + (k as f64 + 1.0) * (n as f64).ln();
    let sigma2 = rss / (n - k - 1) as f64;
    let r_inv = r
        .try_inverse()
        .ok_or_else(|| Error::RankDeficient("singular triangular factor".into()))?;
    let se: Vec<f64> = (0..=k)
        .map(|i| (sigma2 * r_inv.row(i).norm_squared()).sqrt())
        .collect();
    Ok(OlsFit {
        donors: names.to_vec(),
        intercept: beta[0],
        intercept_se: se[0],
        coefficients: beta.iter().skip(1).copied().collect(),
        std_errors: se[1..].to_vec(),
        window,
        n,
        rss,
        r2,
        adj_r2,
        bic,
        residuals: (window.start..=window.end).zip(resid.iter().copied()).collect(),
    })
}

/// True when `a` beats `b`; exact score ties go to the smaller subset, then
/// to the lexicographically smaller donor list.
fn better(a: &OlsFit, b: &OlsFit, criterion: Criterion) -> bool {
    let (sa, sb) = (a.score(criterion), b.score(criterion));
    let ord = match criterion {
        Criterion::Bic => sb.total_cmp(&sa),
        Criterion::AdjR2 => sa.total_cmp(&sb),
    };
    match ord {
        std::cmp::Ordering::Greater => true,
        std::cmp::Ordering::Less => false,
        std::cmp::Ordering::Equal => (a.donors.len(), &a.donors) < (b.donors.len(), &b.donors),
    }
}

/// Fit every non-empty donor subset and keep the best under each criterion.
pub fn stepwise_select(
    target: &Series,
    donors: &BTreeMap<String, Series>,
    window: YearSpan,
    criterion: Criterion,
) -> Result<Selection> {
    if donors.is_empty() {
        return Err(Error::InvalidInput("empty donor set".into()));
    }
    if donors.len() > MAX_DONORS {
        return Err(Error::InvalidInput(format!(
            "{} donors exceed the exhaustive-search limit of {MAX_DONORS}",
            donors.len()
        )));
    }
    let y = window_values(target, window, "target")?;
    let names: Vec<String> = donors.keys().cloned().collect();
    let cols = donors
        .iter()
        .map(|(name, s)| window_values(s, window, name))
        .collect::<Result<Vec<_>>>()?;

    let mut subsets = Vec::new();
    let mut best_bic: Option<OlsFit> = None;
    let mut best_adj: Option<OlsFit> = None;
    for mask in 1u32..(1 << names.len()) {
        let idx: Vec<usize> = (0..names.len()).filter(|i| mask & (1 << i) != 0).collect();
        let sub_names: Vec<String> = idx.iter().map(|&i| names[i].clone()).collect();
        let sub_cols: Vec<Vec<f64>> = idx.iter().map(|&i| cols[i].clone()).collect();
        match ols(&y, &sub_names, &sub_cols, window) {
            Ok(fit) => {
                subsets.push(SubsetScore {
                    donors: sub_names,
                    adj_r2: Some(fit.adj_r2),
                    bic: Some(fit.bic),
                });
                if best_bic.as_ref().is_none_or(|b| better(&fit, b, Criterion::Bic)) {
                    best_bic = Some(fit.clone());
                }
                if best_adj.as_ref().is_none_or(|b| better(&fit, b, Criterion::AdjR2)) {
                    best_adj = Some(fit);
                }
            }
            Err(Error::RankDeficient(_)) | Err(Error::InvalidInput(_)) => subsets.push(SubsetScore {
                donors: sub_names,
                adj_r2: None,
                bic: None,
            }),
            Err(e) => return Err(e),
        }
    }
    let (Some(by_bic), Some(by_adj_r2)) = (best_bic, best_adj) else {
        return Err(Error::RankDeficient("no donor subset admits a full-rank fit".into()));
    };
    let chosen = match criterion {
        Criterion::Bic => by_bic.clone(),
        Criterion::AdjR2 => by_adj_r2.clone(),
    };
    Ok(Selection {
        criterion,
        chosen,
        by_bic,
        by_adj_r2,
        subsets,
    })
}

/// `Î(b) = μ̂ + Σ α̂_C I_C(b)` for each requested year where every selected
/// donor is defined. Years with a missing donor are omitted and returned.
pub fn predict(
    fit: &OlsFit,
    donors: &BTreeMap<String, Series>,
    years: YearSpan,
    country: &str,
) -> Result<(CorrectionIndicator, Vec<i32>)> {
    let mut out = CorrectionIndicator::new(country);
    let mut missing = Vec::new();
    for year in years.start..=years.end {
        let mut value = fit.intercept;
        let mut complete = true;
        for (name, coef) in fit.donors.iter().zip(&fit.coefficients) {
            match donors.get(name).and_then(|s| s.get(&year)).filter(|v| v.is_finite()) {
                Some(v) => value += coef * v,
                None => {
                    complete = false;
                    break;
                }
            }
        }
        if complete {
            if value <= 0.0 {
                return Err(Error::Numeric(format!(
                    "predicted indicator {value} for {year} is not positive"
                )));
            }
            out.insert(year, value, Provenance::Predicted)?;
        } else {
            missing.push(year);
        }
    }
    Ok((out, missing))
}
