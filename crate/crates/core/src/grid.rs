//! Dense age × year grids.
//!
//! Ages index rows and calendar years index columns. Missing cells are stored
//! as `NaN` and are never treated as zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gender {
    Female,
    Male,
    Total,
}

impl Gender {
    pub fn as_str(self) -> &'static str {
        match self {
            Gender::Female => "female",
            Gender::Male => "male",
            Gender::Total => "total",
        }
    }
}

impl std::str::FromStr for Gender {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "female" | "f" => Ok(Gender::Female),
            "male" | "m" => Ok(Gender::Male),
            "total" | "t" => Ok(Gender::Total),
            other => Err(Error::InvalidInput(format!("unknown gender `{other}`"))),
        }
    }
}

impl std::fmt::Display for Gender {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Inclusive integer range parsed from `a-b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span<T> {
    pub start: T,
    pub end: T,
}

impl<T: Copy + PartialOrd> Span<T> {
    pub fn new(start: T, end: T) -> Result<Self>
    where
        T: std::fmt::Display,
    {
        if start > end {
            return Err(Error::InvalidInput(format!("empty range {start}-{end}")));
        }
        Ok(Span { start, end })
    }

    pub fn contains(&self, v: T) -> bool {
        v >= self.start && v <= self.end
    }
}

impl<T> std::str::FromStr for Span<T>
where
    T: std::str::FromStr + Copy + PartialOrd + std::fmt::Display,
{
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        // Allow a leading minus on the first bound by splitting on the last dash.
        let split = s
            .char_indices()
            .skip(1)
            .filter(|&(_, c)| c == '-' || c == ':')
            .map(|(i, _)| i)
            .last();
        let (a, b) = match split {
            Some(i) => (&s[..i], &s[i + 1..]),
            None => (s, s),
        };
        let parse = |t: &str| {
            t.trim()
                .parse::<T>()
                .map_err(|_| Error::InvalidInput(format!("bad range `{s}`")))
        };
        Span::new(parse(a)?, parse(b)?)
    }
}

pub type AgeSpan = Span<u32>;
pub type YearSpan = Span<i32>;

/// Row-major age × year grid of reals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    age_min: u32,
    n_ages: usize,
    year_min: i32,
    n_years: usize,
    values: Vec<f64>,
}

impl Grid {
    pub fn filled(ages: AgeSpan, years: YearSpan, fill: f64) -> Self {
        let n_ages = (ages.end - ages.start) as usize + 1;
        let n_years = (years.end - years.start) as usize + 1;
        Grid {
            age_min: ages.start,
            n_ages,
            year_min: years.start,
            n_years,
            values: vec![fill; n_ages * n_years],
        }
    }

    /// A grid with no cells, anchored at the given corner.
    pub fn empty(age_min: u32, year_min: i32) -> Self {
        Grid {
            age_min,
            n_ages: 0,
            year_min,
            n_years: 0,
            values: Vec::new(),
        }
    }

    pub fn from_fn(ages: AgeSpan, years: YearSpan, mut f: impl FnMut(u32, i32) -> f64) -> Self {
        let mut g = Grid::filled(ages, years, f64::NAN);
        for a in ages.start..=ages.end {
            for y in years.start..=years.end {
                let i = g.index(a, y).expect("in range");
                g.values[i] = f(a, y);
            }
        }
        g
    }

    pub fn from_rows(age_min: u32, year_min: i32, rows: Vec<Vec<f64>>) -> Result<Self> {
        let n_ages = rows.len();
        let n_years = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n_years) {
            return Err(Error::ShapeMismatch("ragged grid rows".into()));
        }
        Ok(Grid {
            age_min,
            n_ages,
            year_min,
            n_years,
            values: rows.into_iter().flatten().collect(),
        })
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn n_ages(&self) -> usize {
        self.n_ages
    }

    pub fn n_years(&self) -> usize {
        self.n_years
    }

    pub fn age_min(&self) -> u32 {
        self.age_min
    }

    pub fn age_max(&self) -> u32 {
        self.age_min + self.n_ages as u32 - 1
    }

    pub fn year_min(&self) -> i32 {
        self.year_min
    }

    pub fn year_max(&self) -> i32 {
        self.year_min + self.n_years as i32 - 1
    }

    pub fn age_span(&self) -> AgeSpan {
        Span {
            start: self.age_min,
            end: self.age_max(),
        }
    }

    pub fn year_span(&self) -> YearSpan {
        Span {
            start: self.year_min,
            end: self.year_max(),
        }
    }

    pub fn ages(&self) -> impl Iterator<Item = u32> + '_ {
        (0..self.n_ages).map(move |i| self.age_min + i as u32)
    }

    pub fn years(&self) -> impl Iterator<Item = i32> + '_ {
        (0..self.n_years).map(move |j| self.year_min + j as i32)
    }

    pub fn same_shape(&self, other: &Grid) -> bool {
        self.age_min == other.age_min
            && self.n_ages == other.n_ages
            && self.year_min == other.year_min
            && self.n_years == other.n_years
    }

    fn index(&self, age: u32, year: i32) -> Option<usize> {
        if age < self.age_min || year < self.year_min {
            return None;
        }
        let i = (age - self.age_min) as usize;
        let j = (year - self.year_min) as usize;
        (i < self.n_ages && j < self.n_years).then(|| i * self.n_years + j)
    }

    /// Cell value; `None` outside the grid. Missing cells come back as `Some(NaN)`.
    pub fn get(&self, age: u32, year: i32) -> Option<f64> {
        self.index(age, year).map(|i| self.values[i])
    }

    pub fn at(&self, age: u32, year: i32) -> f64 {
        self.get(age, year)
            .unwrap_or_else(|| panic!("cell ({age}, {year}) outside grid"))
    }

    pub fn set(&mut self, age: u32, year: i32, value: f64) {
        let i = self
            .index(age, year)
            .unwrap_or_else(|| panic!("cell ({age}, {year}) outside grid"));
        self.values[i] = value;
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, age: u32) -> Option<&[f64]> {
        let i = age.checked_sub(self.age_min)? as usize;
        (i < self.n_ages).then(|| &self.values[i * self.n_years..(i + 1) * self.n_years])
    }

    pub fn column(&self, year: i32) -> Option<Vec<f64>> {
        let j = year.checked_sub(self.year_min)?;
        if j < 0 || j as usize >= self.n_years {
            return None;
        }
        Some(
            (0..self.n_ages)
                .map(|i| self.values[i * self.n_years + j as usize])
                .collect(),
        )
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Grid {
        Grid {
            values: self.values.iter().map(|&v| f(v)).collect(),
            ..self.clone()
        }
    }

    pub fn zip_map(&self, other: &Grid, f: impl Fn(f64, f64) -> f64) -> Result<Grid> {
        if !self.same_shape(other) {
            return Err(Error::ShapeMismatch(format!(
                "grid {}x{} vs {}x{}",
                self.n_ages, self.n_years, other.n_ages, other.n_years
            )));
        }
        Ok(Grid {
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
            ..self.clone()
        })
    }

    /// Sub-grid restricted to the given spans, which must lie inside this grid.
    pub fn window(&self, ages: AgeSpan, years: YearSpan) -> Result<Grid> {
        if !self.age_span().contains(ages.start)
            || !self.age_span().contains(ages.end)
            || !self.year_span().contains(years.start)
            || !self.year_span().contains(years.end)
        {
            return Err(Error::InvalidInput(format!(
                "window ages {}-{}, years {}-{} outside grid",
                ages.start, ages.end, years.start, years.end
            )));
        }
        Ok(Grid::from_fn(ages, years, |a, y| self.at(a, y)))
    }

    /// Iterate `(age, year, value)` in row-major order.
    pub fn cells(&self) -> impl Iterator<Item = (u32, i32, f64)> + '_ {
        self.values.iter().enumerate().map(move |(k, &v)| {
            let i = k / self.n_years;
            let j = k % self.n_years;
            (self.age_min + i as u32, self.year_min + j as i32, v)
        })
    }
}
