//! Human Fertility Database style monthly birth counts.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::hmd::{parse_count, read_text};
use crate::error::{Error, IssueKind, LineIssue, Result};

/// Births of one calendar year split by month, plus the auxiliary
/// total/unknown rows some files carry.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct YearBirths {
    pub months: [Option<f64>; 12],
    pub reported_total: Option<f64>,
    pub unknown: Option<f64>,
}

impl YearBirths {
    pub fn is_complete(&self) -> bool {
        self.months.iter().all(Option::is_some)
    }

    /// Sum over months 1–12; `None` unless the year is complete.
    pub fn total(&self) -> Option<f64> {
        self.is_complete()
            .then(|| self.months.iter().map(|m| m.unwrap_or(0.0)).sum())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MonthlyBirthSeries {
    pub country: String,
    pub years: BTreeMap<i32, YearBirths>,
}

impl MonthlyBirthSeries {
    pub fn new(country: impl Into<String>) -> Self {
        MonthlyBirthSeries {
            country: country.into(),
            years: BTreeMap::new(),
        }
    }

    /// Add a complete year from twelve monthly counts.
    pub fn insert_year(&mut self, year: i32, months: [f64; 12]) {
        self.years.insert(
            year,
            YearBirths {
                months: months.map(Some),
                ..Default::default()
            },
        );
    }

    pub fn is_complete(&self, year: i32) -> bool {
        self.years.get(&year).is_some_and(YearBirths::is_complete)
    }

    pub fn births(&self, year: i32) -> Option<f64> {
        self.years.get(&year).and_then(YearBirths::total)
    }

    pub fn completeness(&self) -> BTreeMap<i32, bool> {
        self.years
            .iter()
            .map(|(&y, b)| (y, b.is_complete()))
            .collect()
    }

    /// Monthly counts of a complete year.
    pub fn monthly(&self, year: i32) -> Option<[f64; 12]> {
        let y = self.years.get(&year)?;
        y.is_complete().then(|| y.months.map(|m| m.unwrap_or(0.0)))
    }
}

enum MonthToken {
    Month(usize),
    Total,
    Unknown,
}

fn parse_month(token: &str) -> std::result::Result<MonthToken, String> {
    match token.to_ascii_uppercase().as_str() {
        "TOT" => Ok(MonthToken::Total),
        "UNK" => Ok(MonthToken::Unknown),
        t => match t.parse::<usize>() {
            Ok(m @ 1..=12) => Ok(MonthToken::Month(m)),
            _ => Err(format!("invalid month `{token}` (expected 1-12, TOT or UNK)")),
        },
    }
}

pub fn parse_monthly_births(path: impl AsRef<Path>) -> Result<MonthlyBirthSeries> {
    let path = path.as_ref();
    parse_monthly_births_str(&read_text(path)?, &path.display().to_string())
}

fn split_fields(line: &str, comma: bool) -> Vec<&str> {
    if comma {
        line.split(',').map(str::trim).collect()
    } else {
        line.split_whitespace().collect()
    }
}

struct Columns {
    code: usize,
    year: usize,
    month: usize,
    births: usize,
    width: usize,
}

fn header_columns(fields: &[&str]) -> Option<Columns> {
    let find = |pred: &dyn Fn(&str) -> bool| {
        fields
            .iter()
            .position(|f| pred(&f.trim_matches('"').to_ascii_lowercase()))
    };
    Some(Columns {
        code: find(&|f| f == "code" || f == "country code" || f == "countrycode")?,
        year: find(&|f| f == "year")?,
        month: find(&|f| f == "month")?,
        births: find(&|f| f == "births")?,
        width: fields.len(),
    })
}

/// Parse monthly births. Columns are located by header name (`Code`, `Year`,
/// `Month`, `Births`); other columns are ignored. Fields are comma-separated
/// when the header contains a comma, whitespace-separated otherwise.
pub fn parse_monthly_births_str(text: &str, file: &str) -> Result<MonthlyBirthSeries> {
    let mut issues = Vec::new();
    let mut cols: Option<(Columns, bool)> = None;
    let mut series = MonthlyBirthSeries::default();
    let mut country: Option<String> = None;
    let mut seen = std::collections::HashSet::new();
    let push = |issues: &mut Vec<LineIssue>, line, kind, reason: String| {
        issues.push(LineIssue { line, kind, reason })
    };

    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let Some((c, comma)) = &cols else {
            let comma = line.contains(',');
            if let Some(c) = header_columns(&split_fields(line, comma)) {
                cols = Some((c, comma));
            }
            continue;
        };
        let f = split_fields(line, *comma);
        if f.len() != c.width {
            push(
                &mut issues,
                line_no,
                IssueKind::Parse,
                format!("expected {} fields, found {}", c.width, f.len()),
            );
            continue;
        }
        let code = f[c.code].trim_matches('"');
        let year = match f[c.year].parse::<i32>() {
            Ok(y) => y,
            Err(_) => {
                push(&mut issues, line_no, IssueKind::Parse, format!("invalid year `{}`", f[c.year]));
                continue;
            }
        };
        let month = match parse_month(f[c.month]) {
            Ok(m) => m,
            Err(reason) => {
                push(&mut issues, line_no, IssueKind::Parse, reason);
                continue;
            }
        };
        let births = match parse_count(f[c.births]) {
            Ok(b) => b,
            Err(reason) => {
                push(&mut issues, line_no, IssueKind::Parse, reason);
                continue;
            }
        };
        match &country {
            None => country = Some(code.to_string()),
            Some(prev) if prev != code => {
                push(
                    &mut issues,
                    line_no,
                    IssueKind::Validation,
                    format!("country code `{code}` differs from `{prev}`"),
                );
                continue;
            }
            Some(_) => {}
        }
        let key = match month {
            MonthToken::Month(m) => m,
            MonthToken::Total => 13,
            MonthToken::Unknown => 14,
        };
        if !seen.insert((year, key)) {
            push(
                &mut issues,
                line_no,
                IssueKind::Validation,
                format!("duplicate month `{}` in year {year}", f[c.month]),
            );
            continue;
        }
        let entry = series.years.entry(year).or_default();
        match month {
            MonthToken::Month(m) => entry.months[m - 1] = births,
            MonthToken::Total => entry.reported_total = births,
            MonthToken::Unknown => entry.unknown = births,
        }
    }
    if cols.is_none() {
        issues.push(LineIssue {
            line: 0,
            kind: IssueKind::Parse,
            reason: "header with Code, Year, Month, Births columns not found".into(),
        });
    }
    if !issues.is_empty() {
        return Err(Error::Input {
            file: file.to_string(),
            issues,
        });
    }
    series.country = country.unwrap_or_default();
    Ok(series)
}

/// Serialize as comma-separated `Code,Year,Month,Births`.
pub fn format_monthly_births(series: &MonthlyBirthSeries) -> String {
    let mut out = String::from("Code,Year,Month,Births\n");
    let fmt = |v: Option<f64>| v.map_or_else(|| ".".to_string(), |v| format!("{v}"));
    for (year, y) in &series.years {
        for (m, v) in y.months.iter().enumerate() {
            if v.is_some() {
                let _ = writeln!(out, "{},{},{},{}", series.country, year, m + 1, fmt(*v));
            }
        }
        if y.reported_total.is_some() {
            let _ = writeln!(out, "{},{},TOT,{}", series.country, year, fmt(y.reported_total));
        }
        if y.unknown.is_some() {
            let _ = writeln!(out, "{},{},UNK,{}", series.country, year, fmt(y.unknown));
        }
    }
    out
}
