//! Human Mortality Database style text tables: deaths by Lexis triangle and
//! January-1 population counts.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, IssueKind, LineIssue, Result};
use crate::grid::Gender;

/// Which half of a Lexis square a death record belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Triangle {
    /// Born in `year - age`: the decedent reached age `age` during the year.
    Lower,
    /// Born in `year - age - 1`: the decedent was already aged `age` on January 1.
    Upper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeathsRecord {
    pub year: i32,
    pub age: u32,
    /// Set for the open-ended top age group (`110+`).
    pub open_age: bool,
    pub cohort: i32,
    pub female: Option<f64>,
    pub male: Option<f64>,
    pub total: Option<f64>,
}

impl DeathsRecord {
    pub fn triangle(&self) -> Triangle {
        if self.cohort == self.year - self.age as i32 {
            Triangle::Lower
        } else {
            Triangle::Upper
        }
    }

    pub fn count(&self, gender: Gender) -> Option<f64> {
        match gender {
            Gender::Female => self.female,
            Gender::Male => self.male,
            Gender::Total => self.total,
        }
    }

    /// True when any of the three count columns carried the missing marker.
    pub fn has_missing(&self) -> bool {
        self.female.is_none() || self.male.is_none() || self.total.is_none()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RawDeathsLexis {
    pub title: Option<String>,
    pub records: Vec<DeathsRecord>,
}

impl RawDeathsLexis {
    /// Lookup keyed by `(year, age, cohort)`.
    pub fn index(&self) -> BTreeMap<(i32, u32, i32), &DeathsRecord> {
        self.records
            .iter()
            .map(|r| ((r.year, r.age, r.cohort), r))
            .collect()
    }
}

/// Territorial-change marker attached to a population year (`1990+`, `1990-`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum YearSuffix {
    None,
    Plus,
    Minus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationRecord {
    pub year: i32,
    pub suffix: YearSuffix,
    pub age: u32,
    pub open_age: bool,
    pub female: Option<f64>,
    pub male: Option<f64>,
    pub total: Option<f64>,
}

impl PopulationRecord {
    pub fn count(&self, gender: Gender) -> Option<f64> {
        match gender {
            Gender::Female => self.female,
            Gender::Male => self.male,
            Gender::Total => self.total,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RawPopulation {
    pub title: Option<String>,
    pub records: Vec<PopulationRecord>,
}

/// How to pick between `+` and `-` population rows for years with a
/// territorial change.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SuffixPolicy {
    /// January 1 of the exposure year uses `+`, the following January 1 uses `-`,
    /// so both ends of a year refer to the same territory.
    #[default]
    Consistent,
    Plus,
    Minus,
}

impl std::str::FromStr for SuffixPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "consistent" => Ok(SuffixPolicy::Consistent),
            "plus" | "+" => Ok(SuffixPolicy::Plus),
            "minus" | "-" => Ok(SuffixPolicy::Minus),
            other => Err(Error::InvalidInput(format!("unknown suffix policy `{other}`"))),
        }
    }
}

/// Which end of the exposure year a population count is requested for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum YearEnd {
    Start,
    End,
}

impl RawPopulation {
    pub fn years(&self) -> std::collections::BTreeSet<i32> {
        self.records.iter().map(|r| r.year).collect()
    }

    /// Population lookup `(year, age) -> record` resolving territorial suffixes.
    pub fn resolve(
        &self,
        policy: SuffixPolicy,
        end: YearEnd,
    ) -> BTreeMap<(i32, u32), &PopulationRecord> {
        let preferred = match (policy, end) {
            (SuffixPolicy::Plus, _) | (SuffixPolicy::Consistent, YearEnd::Start) => YearSuffix::Plus,
            (SuffixPolicy::Minus, _) | (SuffixPolicy::Consistent, YearEnd::End) => YearSuffix::Minus,
        };
        let mut out: BTreeMap<(i32, u32), &PopulationRecord> = BTreeMap::new();
        for r in &self.records {
            let key = (r.year, r.age);
            match out.get(&key) {
                Some(prev) if prev.suffix == preferred || prev.suffix == YearSuffix::None => {}
                Some(_) if r.suffix != preferred && r.suffix != YearSuffix::None => {}
                _ => {
                    out.insert(key, r);
                }
            }
        }
        out
    }
}

pub(crate) fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn parse_deaths_lexis(path: impl AsRef<Path>) -> Result<RawDeathsLexis> {
    let path = path.as_ref();
    parse_deaths_lexis_str(&read_text(path)?, &path.display().to_string())
}

pub fn parse_population(path: impl AsRef<Path>) -> Result<RawPopulation> {
    let path = path.as_ref();
    parse_population_str(&read_text(path)?, &path.display().to_string())
}

const DEATHS_HEADER: [&str; 6] = ["year", "age", "cohort", "female", "male", "total"];
const POPULATION_HEADER: [&str; 5] = ["year", "age", "female", "male", "total"];

struct Scanned<'a> {
    title: Option<String>,
    rows: Vec<(usize, Vec<&'a str>)>,
}

/// Split an HMD table into title, header and data rows. Column spacing is free.
fn scan<'a>(text: &'a str, header: &[&str], issues: &mut Vec<LineIssue>) -> Option<Scanned<'a>> {
    let mut title = None;
    let mut rows = Vec::new();
    let mut in_body = false;
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.is_empty() {
            continue;
        }
        if !in_body {
            let is_header = tokens.len() == header.len()
                && tokens
                    .iter()
                    .zip(header)
                    .all(|(t, h)| t.eq_ignore_ascii_case(h));
            if is_header {
                in_body = true;
            } else if title.is_none() {
                title = Some(line.trim().to_string());
            } else {
                issues.push(LineIssue {
                    line: line_no,
                    kind: IssueKind::Parse,
                    reason: format!("unexpected line before column header `{}`", header.join(" ")),
                });
            }
            continue;
        }
        if tokens.len() != header.len() {
            issues.push(LineIssue {
                line: line_no,
                kind: IssueKind::Parse,
                reason: format!("expected {} columns, found {}", header.len(), tokens.len()),
            });
            continue;
        }
        rows.push((line_no, tokens));
    }
    if !in_body {
        issues.push(LineIssue {
            line: 0,
            kind: IssueKind::Parse,
            reason: format!("column header `{}` not found", header.join(" ")),
        });
        return None;
    }
    Some(Scanned { title, rows })
}

pub(crate) fn parse_count(token: &str) -> std::result::Result<Option<f64>, String> {
    if token == "." {
        return Ok(None);
    }
    let v: f64 = token
        .parse()
        .map_err(|_| format!("invalid count `{token}`"))?;
    if !v.is_finite() {
        return Err(format!("non-finite count `{token}`"));
    }
    if v < 0.0 {
        return Err(format!("negative count `{token}`"));
    }
    Ok(Some(v))
}

fn parse_age(token: &str) -> std::result::Result<(u32, bool), String> {
    let (digits, open) = match token.strip_suffix('+') {
        Some(d) => (d, true),
        None => (token, false),
    };
    digits
        .parse::<u32>()
        .map(|a| (a, open))
        .map_err(|_| format!("invalid age `{token}`"))
}

fn parse_year(token: &str) -> std::result::Result<i32, String> {
    token
        .parse::<i32>()
        .map_err(|_| format!("invalid year `{token}`"))
}

fn parse_suffixed_year(token: &str) -> std::result::Result<(i32, YearSuffix), String> {
    if let Some(y) = token.strip_suffix('+') {
        return parse_year(y).map(|y| (y, YearSuffix::Plus));
    }
    if let Some(y) = token.strip_suffix('-').or_else(|| token.strip_suffix('\u{2212}')) {
        return parse_year(y).map(|y| (y, YearSuffix::Minus));
    }
    parse_year(token).map(|y| (y, YearSuffix::None))
}

fn issue(line: usize, kind: IssueKind, reason: impl Into<String>) -> LineIssue {
    LineIssue {
        line,
        kind,
        reason: reason.into(),
    }
}

pub fn parse_deaths_lexis_str(text: &str, file: &str) -> Result<RawDeathsLexis> {
    let mut issues = Vec::new();
    let Some(scanned) = scan(text, &DEATHS_HEADER, &mut issues) else {
        return Err(Error::Input {
            file: file.to_string(),
            issues,
        });
    };
    let mut records = Vec::with_capacity(scanned.rows.len());
    let mut seen = HashSet::new();
    for (line, t) in scanned.rows {
        let parsed = (|| {
            let year = parse_year(t[0])?;
            let (age, open_age) = parse_age(t[1])?;
            let cohort = parse_year(t[2])?;
            Ok::<_, String>(DeathsRecord {
                year,
                age,
                open_age,
                cohort,
                female: parse_count(t[3])?,
                male: parse_count(t[4])?,
                total: parse_count(t[5])?,
            })
        })();
        let rec = match parsed {
            Ok(r) => r,
            Err(reason) => {
                issues.push(issue(line, IssueKind::Parse, reason));
                continue;
            }
        };
        let lower = rec.year - rec.age as i32;
        if rec.cohort != lower && rec.cohort != lower - 1 {
            issues.push(issue(
                line,
                IssueKind::Validation,
                format!(
                    "cohort {} inconsistent with year {} and age {} (must be {} or {})",
                    rec.cohort,
                    rec.year,
                    rec.age,
                    lower,
                    lower - 1
                ),
            ));
            continue;
        }
        if !seen.insert((rec.year, rec.age, rec.cohort)) {
            issues.push(issue(
                line,
                IssueKind::Validation,
                format!("duplicate record for year {}, age {}, cohort {}", rec.year, rec.age, rec.cohort),
            ));
            continue;
        }
        records.push(rec);
    }
    if !issues.is_empty() {
        issues.sort_by_key(|i: &LineIssue| i.line);
        return Err(Error::Input {
            file: file.to_string(),
            issues,
        });
    }
    Ok(RawDeathsLexis {
        title: scanned.title,
        records,
    })
}

pub fn parse_population_str(text: &str, file: &str) -> Result<RawPopulation> {
    let mut issues = Vec::new();
    let Some(scanned) = scan(text, &POPULATION_HEADER, &mut issues) else {
        return Err(Error::Input {
            file: file.to_string(),
            issues,
        });
    };
    let mut records = Vec::with_capacity(scanned.rows.len());
    let mut seen = HashSet::new();
    for (line, t) in scanned.rows {
        let parsed = (|| {
            let (year, suffix) = parse_suffixed_year(t[0])?;
            let (age, open_age) = parse_age(t[1])?;
            Ok::<_, String>(PopulationRecord {
                year,
                suffix,
                age,
                open_age,
                female: parse_count(t[2])?,
                male: parse_count(t[3])?,
                total: parse_count(t[4])?,
            })
        })();
        let rec = match parsed {
            Ok(r) => r,
            Err(reason) => {
                issues.push(issue(line, IssueKind::Parse, reason));
                continue;
            }
        };
        if !seen.insert((rec.year, rec.suffix, rec.age)) {
            issues.push(issue(
                line,
                IssueKind::Validation,
                format!("duplicate record for year {}, age {}", t[0], rec.age),
            ));
            continue;
        }
        records.push(rec);
    }
    if !issues.is_empty() {
        issues.sort_by_key(|i: &LineIssue| i.line);
        return Err(Error::Input {
            file: file.to_string(),
            issues,
        });
    }
    Ok(RawPopulation {
        title: scanned.title,
        records,
    })
}

fn fmt_count(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{v}"),
        None => ".".to_string(),
    }
}

fn fmt_age(age: u32, open: bool) -> String {
    if open {
        format!("{age}+")
    } else {
        age.to_string()
    }
}

/// Serialize in the whitespace-aligned HMD layout. Values use the shortest
/// representation that parses back to the same `f64`.
pub fn format_deaths_lexis(data: &RawDeathsLexis) -> String {
    let mut out = String::new();
    let title = data.title.as_deref().unwrap_or("Deaths by Lexis triangle");
    let _ = writeln!(out, "{title}");
    let _ = writeln!(
        out,
        "{:>6}{:>8}{:>8}{:>16}{:>16}{:>16}",
        "Year", "Age", "Cohort", "Female", "Male", "Total"
    );
    for r in &data.records {
        let _ = writeln!(
            out,
            "{:>6}{:>8}{:>8}{:>16}{:>16}{:>16}",
            r.year,
            fmt_age(r.age, r.open_age),
            r.cohort,
            fmt_count(r.female),
            fmt_count(r.male),
            fmt_count(r.total)
        );
    }
    out
}

pub fn format_population(data: &RawPopulation) -> String {
    let mut out = String::new();
    let title = data.title.as_deref().unwrap_or("Population size (abridged to single ages)");
    let _ = writeln!(out, "{title}");
    let _ = writeln!(
        out,
        "{:>7}{:>8}{:>16}{:>16}{:>16}",
        "Year", "Age", "Female", "Male", "Total"
    );
    for r in &data.records {
        let year = match r.suffix {
            YearSuffix::None => r.year.to_string(),
            YearSuffix::Plus => format!("{}+", r.year),
            YearSuffix::Minus => format!("{}-", r.year),
        };
        let _ = writeln!(
            out,
            "{:>7}{:>8}{:>16}{:>16}{:>16}",
            year,
            fmt_age(r.age, r.open_age),
            fmt_count(r.female),
            fmt_count(r.male),
            fmt_count(r.total)
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn deaths(body: &str) -> Result<RawDeathsLexis> {
        let text = format!("Testland, Deaths by Lexis triangle\n  Year  Age  Cohort  Female  Male  Total\n{body}");
        parse_deaths_lexis_str(&text, "fixture")
    }

    #[test]
    fn upper_triangle_record() {
        let d = deaths("1920  5  1914  12.3  14.0  26.3\n").unwrap();
        let r = &d.records[0];
        assert_eq!((r.year, r.age, r.cohort), (1920, 5, 1914));
        assert_eq!(r.triangle(), Triangle::Upper);
        assert_eq!(r.female, Some(12.3));
        assert_eq!(r.total, Some(26.3));
    }

    #[test]
    fn lower_triangle_and_open_age() {
        let d = deaths("1920  5  1915  1 1 2\n2000 110+ 1890 3 1 4\n").unwrap();
        assert_eq!(d.records[0].triangle(), Triangle::Lower);
        assert!(d.records[1].open_age);
        assert_eq!(d.records[1].age, 110);
    }

    #[test]
    fn inconsistent_cohort_rejected_with_line_number() {
        let err = deaths("1920  5  1916  1  1  2\n").unwrap_err();
        match err {
            Error::Input { file, issues } => {
                assert_eq!(file, "fixture");
                assert_eq!(issues.len(), 1);
                assert_eq!(issues[0].line, 3);
                assert_eq!(issues[0].kind, IssueKind::Validation);
                assert!(issues[0].reason.contains("1915 or 1914"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn every_bad_line_is_reported() {
        let err = deaths("1920 5 1915 1 1 2\n1920 x 1915 1 1 2\n1920 5 1915 1 1 2\n1921 5 1915 -1 1 2\n1921 6\n")
            .unwrap_err();
        let Error::Input { issues, .. } = err else { panic!() };
        let lines: Vec<usize> = issues.iter().map(|i| i.line).collect();
        assert_eq!(lines, vec![4, 5, 6, 7]);
        assert_eq!(issues[1].kind, IssueKind::Validation);
    }

    #[test]
    fn missing_marker_is_kept_as_missing() {
        let body = "\
1920 0 1920 . 10 20
1920 0 1919 5 5 10
1920 1 1919 4 4 8
1920 1 1918 3 3 6
1921 0 1921 2 2 4
1921 0 1920 1 1 2
1921 1 1920 4.5 4.5 9
1921 1 1919 . . .
1922 0 1922 1 1 2
1922 0 1921 0 0 0
";
        let d = deaths(body).unwrap();
        assert_eq!(d.records.len(), 10);
        assert_eq!(d.records[0].female, None);
        assert_eq!(d.records[0].male, Some(10.0));
        assert!(d.records[7].has_missing());
        let again = parse_deaths_lexis_str(&format_deaths_lexis(&d), "rt").unwrap();
        assert_eq!(again, d);
    }

    #[test]
    fn population_records_and_duplicates() {
        let head = "Testland, Population\n Year Age Female Male Total\n";
        let p = parse_population_str(&format!("{head}1950  0  400000 420000 820000\n"), "p").unwrap();
        assert_eq!(p.records.len(), 1);
        assert_eq!(p.records[0].total, Some(820000.0));
        assert_eq!(p.records[0].suffix, YearSuffix::None);

        let err = parse_population_str(&format!("{head}1950 0 1 1 2\n1950 0 1 1 2\n"), "p").unwrap_err();
        assert!(matches!(err, Error::Input { ref issues, .. } if issues[0].line == 4));
    }

    #[test]
    fn territorial_suffixes_retained() {
        let text = "T\nYear Age Female Male Total\n1990- 0 10 10 20\n1990+ 0 12 12 24\n1991 0 11 11 22\n1989 0 9 9 18\n1992\u{2212} 0 1 1 2\n";
        let p = parse_population_str(text, "p").unwrap();
        assert_eq!(p.records.len(), 5);
        assert_eq!(p.records[0].suffix, YearSuffix::Minus);
        assert_eq!(p.records[1].suffix, YearSuffix::Plus);
        assert_eq!(p.records[4].suffix, YearSuffix::Minus);
        let again = parse_population_str(&format_population(&p), "rt").unwrap();
        assert_eq!(again.records, p.records);

        let start = p.resolve(SuffixPolicy::Consistent, YearEnd::Start);
        let end = p.resolve(SuffixPolicy::Consistent, YearEnd::End);
        assert_eq!(start[&(1990, 0)].total, Some(24.0));
        assert_eq!(end[&(1990, 0)].total, Some(20.0));
        assert_eq!(start[&(1991, 0)].total, Some(22.0));
        let minus = p.resolve(SuffixPolicy::Minus, YearEnd::Start);
        assert_eq!(minus[&(1990, 0)].total, Some(20.0));
    }

    #[test]
    fn missing_header_is_an_error() {
        let err = parse_population_str("1950 0 1 1 2\n", "p").unwrap_err();
        assert!(matches!(err, Error::Input { .. }));
    }
}
