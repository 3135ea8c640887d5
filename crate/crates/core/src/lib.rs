//! Cohort-anomaly correction of period mortality surfaces, stochastic
//! mortality models and longevity trend capital analytics.

pub mod error;
pub mod forecast;
pub mod grid;
pub mod ingest;
pub mod correction;
pub mod lexis;
pub mod models;
pub mod oracle;
pub mod pipeline;
pub mod regression;
pub mod scr;
pub mod selection;

pub use error::{Error, Result};
pub use grid::{AgeSpan, Gender, Grid, Span, YearSpan};
