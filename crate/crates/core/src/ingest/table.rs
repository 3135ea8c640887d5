//! CSV emission with JSON mirrors, and the age × year grid CSV layout.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, IssueKind, LineIssue, Result};
use crate::grid::{Gender, Grid};
use crate::lexis::{MortalitySurface, SourceTag};

/// Number of significant digits written for real-valued CSV cells.
pub const CSV_SIGNIFICANT_DIGITS: usize = 7;

/// Format a real with [`CSV_SIGNIFICANT_DIGITS`] significant digits; missing
/// values (`NaN`) are written as `.`.
pub fn format_real(v: f64) -> String {
    if v.is_nan() {
        return ".".to_string();
    }
    if v == 0.0 {
        return "0".to_string();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let exp = v.abs().log10().floor() as i32;
    let digits = CSV_SIGNIFICANT_DIGITS as i32;
    if (-5..15).contains(&exp) {
        let decimals = (digits - 1 - exp).max(0) as usize;
        let s = format!("{v:.decimals$}");
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    } else {
        format!("{v:.*e}", CSV_SIGNIFICANT_DIGITS - 1)
    }
}

fn parse_real(token: &str) -> std::result::Result<f64, String> {
    match token.trim() {
        "." | "" => Ok(f64::NAN),
        t => t.parse::<f64>().map_err(|_| format!("invalid number `{t}`")),
    }
}

/// A cell of an output table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Int(i64),
    Real(f64),
    Text(String),
}

impl From<i64> for Value {
    fn from(v: i64) -> Self {
        Value::Int(v)
    }
}
impl From<i32> for Value {
    fn from(v: i32) -> Self {
        Value::Int(v as i64)
    }
}
impl From<u32> for Value {
    fn from(v: u32) -> Self {
        Value::Int(v as i64)
    }
}
impl From<usize> for Value {
    fn from(v: usize) -> Self {
        Value::Int(v as i64)
    }
}
impl From<f64> for Value {
    fn from(v: f64) -> Self {
        Value::Real(v)
    }
}
impl From<&str> for Value {
    fn from(v: &str) -> Self {
        Value::Text(v.to_string())
    }
}
impl From<String> for Value {
    fn from(v: String) -> Self {
        Value::Text(v)
    }
}
impl From<bool> for Value {
    fn from(v: bool) -> Self {
        Value::Text(v.to_string())
    }
}

impl Value {
    fn to_csv(&self) -> String {
        match self {
            Value::Int(i) => i.to_string(),
            Value::Real(r) => format_real(*r),
            Value::Text(t) => t.clone(),
        }
    }
}

/// A rectangular table with named columns, written as CSV plus a JSON mirror.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Value>>,
}

impl Table {
    pub fn new<S: Into<String>>(columns: impl IntoIterator<Item = S>) -> Self {
        Table {
            columns: columns.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Value>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
        w.write_record(&self.columns)?;
        for row in &self.rows {
            w.write_record(row.iter().map(Value::to_csv))?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::InvalidInput(format!("csv buffer: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// JSON mirror: `{"columns": [...], "rows": [[...], ...]}`; missing reals become `null`.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_grid(grid: &Grid) -> Table {
        let mut t = Table::new(std::iter::once("age".to_string()).chain(grid.years().map(|y| y.to_string())));
        for age in grid.ages() {
            let mut row = vec![Value::Int(age as i64)];
            row.extend(grid.row(age).unwrap_or(&[]).iter().map(|&v| Value::Real(v)));
            t.push(row);
        }
        t
    }
}

/// Path of the JSON mirror written next to a CSV file.
pub fn json_mirror_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("json")
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Write `table` as CSV at `path` and its JSON mirror next to it.
pub fn write_table(table: &Table, path: &Path) -> Result<()> {
    write_file(path, &table.to_csv()?)?;
    write_file(&json_mirror_path(path), &table.to_json()?)
}

/// Age × year CSV: header `age,<year>,...`, one row per age. Lines starting
/// with `#` are treated as comments.
pub fn grid_to_csv(grid: &Grid) -> Result<String> {
    if grid.is_empty() {
        return Err(Error::InvalidInput("cannot write an empty grid".into()));
    }
    Table::from_grid(grid).to_csv()
}

pub fn grid_from_csv(text: &str, file: &str) -> Result<Grid> {
    let mut issues = Vec::new();
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'));
    let bad = |issues: Vec<LineIssue>| Error::Input {
        file: file.to_string(),
        issues,
    };
    let Some((hline, header)) = lines.next() else {
        return Err(bad(vec![LineIssue {
            line: 0,
            kind: IssueKind::Parse,
            reason: "empty grid file".into(),
        }]));
    };
    let head: Vec<&str> = header.split(',').map(str::trim).collect();
    if head.first().map(|h| h.eq_ignore_ascii_case("age")) != Some(true) || head.len() < 2 {
        return Err(bad(vec![LineIssue {
            line: hline + 1,
            kind: IssueKind::Parse,
            reason: "grid header must be `age,<year>,...`".into(),
        }]));
    }
    let mut years = Vec::new();
    for tok in &head[1..] {
        match tok.parse::<i32>() {
            Ok(y) => years.push(y),
            Err(_) => issues.push(LineIssue {
                line: hline + 1,
                kind: IssueKind::Parse,
                reason: format!("invalid year `{tok}`"),
            }),
        }
    }
    if years.windows(2).any(|w| Some(w[1]) != w[0].checked_add(1)) {
        issues.push(LineIssue {
            line: hline + 1,
            kind: IssueKind::Validation,
            reason: "years must be consecutive and increasing".into(),
        });
    }
    let mut ages: Vec<u32> = Vec::new();
    let mut rows = Vec::new();
    for (i, line) in lines {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != head.len() {
            issues.push(LineIssue {
                line: i + 1,
                kind: IssueKind::Parse,
                reason: format!("expected {} fields, found {}", head.len(), f.len()),
            });
            continue;
        }
        let age = match f[0].trim().parse::<u32>() {
            Ok(a) => a,
            Err(_) => {
                issues.push(LineIssue {
                    line: i + 1,
                    kind: IssueKind::Parse,
                    reason: format!("invalid age `{}`", f[0]),
                });
                continue;
            }
        };
        let mut row = Vec::with_capacity(f.len() - 1);
        for tok in &f[1..] {
            match parse_real(tok) {
                Ok(v) => row.push(v),
                Err(reason) => {
                    issues.push(LineIssue {
                        line: i + 1,
                        kind: IssueKind::Parse,
                        reason,
                    });
                    break;
                }
            }
        }
        if row.len() == f.len() - 1 {
            if let Some(&prev) = ages.last() {
                if Some(age) != prev.checked_add(1) {
                    issues.push(LineIssue {
                        line: i + 1,
                        kind: IssueKind::Validation,
                        reason: "ages must be consecutive and increasing".into(),
                    });
                    continue;
                }
            }
            ages.push(age);
            rows.push(row);
        }
    }
    if rows.is_empty() && issues.is_empty() {
        issues.push(LineIssue {
            line: 0,
            kind: IssueKind::Parse,
            reason: "grid has no rows".into(),
        });
    }
    if !issues.is_empty() {
        return Err(bad(issues));
    }
    Grid::from_rows(ages[0], years[0], rows)
}

/// Sibling file names for the three grids of a surface written at `path`.
pub fn surface_paths(path: &Path) -> (PathBuf, PathBuf, PathBuf) {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let dir = path.parent().unwrap_or(Path::new(""));
    (
        path.to_path_buf(),
        dir.join(format!("{stem}_deaths.csv")),
        dir.join(format!("{stem}_exposure.csv")),
    )
}

/// Write the rate grid of `surface` at `path` (ages as rows, years as
/// columns), with deaths and exposure in `<stem>_deaths.csv` and
/// `<stem>_exposure.csv`, each accompanied by a JSON mirror.
pub fn write_surface_csv(surface: &MortalitySurface, path: impl AsRef<Path>) -> Result<()> {
    let (rates, deaths, exposure) = surface_paths(path.as_ref());
    if surface.rates().is_empty() {
        return Err(Error::InvalidInput("cannot write an empty surface".into()));
    }
    for (grid, p) in [
        (surface.rates(), &rates),
        (surface.deaths(), &deaths),
        (surface.exposure(), &exposure),
    ] {
        write_table(&Table::from_grid(grid), p)?;
    }
    Ok(())
}

/// Read a surface written by [`write_surface_csv`]. The rate grid is checked
/// against deaths / exposure at the written precision.
pub fn read_surface_csv(
    path: impl AsRef<Path>,
    gender: Gender,
    source: SourceTag,
) -> Result<MortalitySurface> {
    let (rates_p, deaths_p, exposure_p) = surface_paths(path.as_ref());
    let read = |p: &Path| -> Result<Grid> {
        let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        grid_from_csv(&text, &p.display().to_string())
    };
    let rates = read(&rates_p)?;
    let surface = MortalitySurface::from_counts(read(&deaths_p)?, read(&exposure_p)?, gender, source)?;
    let tol = 10f64.powi(1 - CSV_SIGNIFICANT_DIGITS as i32);
    let consistent = rates
        .zip_map(surface.rates(), |a, b| {
            if a.is_nan() && b.is_nan() {
                0.0
            } else {
                ((a - b) / b.abs().max(f64::MIN_POSITIVE)).abs()
            }
        })?
        .values()
        .iter()
        .all(|&d| d <= tol);
    if !consistent {
        return Err(Error::InvalidInput(format!(
            "{}: rates disagree with deaths / exposure",
            rates_p.display()
        )));
    }
    Ok(surface)
}
