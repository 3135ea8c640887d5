//! Readers for HMD / HFD style input files and writers for toolkit outputs.
//!
//! Parsers are pure functions over text: every rejected line is reported with
//! its file, line number and reason, and the `.` missing marker is preserved
//! as `None` rather than coerced to zero.

mod hfd;
mod hmd;
mod table;

pub use hfd::{
    format_monthly_births, parse_monthly_births, parse_monthly_births_str, MonthlyBirthSeries,
    YearBirths,
};
pub use hmd::{
    format_deaths_lexis, format_population, parse_deaths_lexis, parse_deaths_lexis_str,
    parse_population, parse_population_str, DeathsRecord, PopulationRecord, RawDeathsLexis,
    RawPopulation, SuffixPolicy, Triangle, YearEnd, YearSuffix,
};
pub use table::{
    format_real, grid_from_csv, grid_to_csv, json_mirror_path, read_surface_csv, surface_paths,
    write_surface_csv, write_table, Table, Value, CSV_SIGNIFICANT_DIGITS,
};
