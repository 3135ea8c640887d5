//! End-to-end run: ingest, correct, fit, select, project and value, with every
//! artifact checksummed in a manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value as Json};
use sha2::{Digest, Sha256};

use crate::correction::{
    anomaly_report, correct_surface, indicator_from_births, indicator_table, read_indicator_csv, CohortAnomaly,
    CorrectionIndicator, MonthWeights,
};
use crate::error::{Error, IssueKind, LineIssue, Result};
use crate::forecast::{
    estimate_dynamics, life_expectancy_fan, percentile_table, simulate, ExpectancyFan, ExpectancyKind,
    ProjectionSettings, ScenarioSet,
};
use crate::grid::{AgeSpan, Gender, Grid, Span, YearSpan};
use crate::ingest::{parse_deaths_lexis, parse_monthly_births, parse_population, SuffixPolicy, Table, Value};
use crate::lexis::{build_surface, improvements, period_life_expectancy, to_q, MortalitySurface};
use crate::models::{compare_bic, fit, ModelFit, ModelParams, ModelTag};
use crate::scr::{
    build_shocked_tables, cohort_life_expectancy, ie_indicator, improvement_path, read_portfolio_csv, scr_impact,
    stability_indicator, AnnuityPortfolio, Role, ShockedTables, StabilityReport, Weighting,
};
use crate::selection::{parameter_drift, select_model, Candidate, SelectionReport, SelectionWeights, STABILITY_SHORTENING};

pub const TOOL: &str = concat!("cohortfix ", env!("CARGO_PKG_VERSION"));
/// Default calibration window length when `years` is not set.
pub const DEFAULT_WINDOW_YEARS: i32 = 30;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const FAILED_MARKER: &str = "FAILED";

/// Settings of a full run. Every key has a default; see [`RunConfig::KEYS`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub deaths: Option<PathBuf>,
    pub population: Option<PathBuf>,
    pub births: Option<PathBuf>,
    /// Indicator values filling cohorts the births file cannot cover.
    pub predicted_indicator: Option<PathBuf>,
    pub portfolio: Option<PathBuf>,
    pub gender: Gender,
    pub ages: AgeSpan,
    /// `None`: the last [`DEFAULT_WINDOW_YEARS`] years the data covers.
    pub years: Option<YearSpan>,
    pub models: Vec<ModelTag>,
    pub model_override: Option<ModelTag>,
    pub residual_weight: f64,
    pub stability_weight: f64,
    pub scenarios: usize,
    pub horizon: usize,
    pub seed: u64,
    pub omega: u32,
    pub percentiles: Vec<f64>,
    pub discount_rate: f64,
    pub out: PathBuf,
    pub skip_correction: bool,
    pub pass_through: bool,
    pub month_weights: MonthWeights,
    pub le_age: u32,
    pub le_truncate: u32,
    pub weighting: Weighting,
    pub suffix_policy: SuffixPolicy,
    /// Also value a vintage one year older for the stability indicator.
    pub stability: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            deaths: None,
            population: None,
            births: None,
            predicted_indicator: None,
            portfolio: None,
            gender: Gender::Female,
            ages: Span { start: 60, end: 95 },
            years: None,
            models: ModelTag::ALL.to_vec(),
            model_override: None,
            residual_weight: 0.0,
            stability_weight: 0.0,
            scenarios: 5000,
            horizon: 60,
            seed: 0,
            omega: 120,
            percentiles: vec![0.5, 50.0, 99.5],
            discount_rate: 0.02,
            out: PathBuf::from("out"),
            skip_correction: false,
            pass_through: false,
            month_weights: MonthWeights::Midpoint,
            le_age: 65,
            le_truncate: 95,
            weighting: Weighting::Amount,
            suffix_policy: SuffixPolicy::Consistent,
            stability: true,
        }
    }
}

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(format!("expected a boolean, got `{v}`")),
    }
}

fn parse_num<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("invalid number `{v}`"))
}

fn path_value(p: &Option<PathBuf>) -> String {
    p.as_ref().map_or_else(|| "none".to_string(), |p| p.display().to_string())
}

fn list<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub const KEYS: [&'static str; 27] = [
        "deaths",
        "population",
        "births",
        "predicted_indicator",
        "portfolio",
        "gender",
        "ages",
        "years",
        "models",
        "model_override",
        "residual_weight",
        "stability_weight",
        "scenarios",
        "horizon",
        "seed",
        "omega",
        "percentiles",
        "discount_rate",
        "out",
        "skip_correction",
        "pass_through",
        "month_weights",
        "le_age",
        "le_truncate",
        "weighting",
        "suffix_policy",
        "stability",
    ];

    /// Set one key. Relative paths are resolved against `base`.
    pub fn set(&mut self, key: &str, value: &str, base: &Path) -> std::result::Result<(), String> {
        let value = value.trim();
        let path = |v: &str| -> Option<PathBuf> {
            (!v.is_empty() && v != "none").then(|| base.join(v))
        };
        let err = |e: Error| e.to_string();
        match key {
            "deaths" => self.deaths = path(value),
            "population" => self.population = path(value),
            "births" => self.births = path(value),
            "predicted_indicator" => self.predicted_indicator = path(value),
            "portfolio" => self.portfolio = path(value),
            "out" => self.out = base.join(value),
            "gender" => self.gender = value.parse().map_err(err)?,
            "ages" => self.ages = value.parse().map_err(err)?,
            "years" => {
                self.years = match value {
                    "auto" | "" => None,
                    v => Some(v.parse().map_err(err)?),
                }
            }
            "models" => {
                let mut models = value
                    .split(',')
                    .map(|m| m.trim().parse::<ModelTag>().map_err(err))
                    .collect::<std::result::Result<Vec<_>, _>>()?;
                models.sort();
                models.dedup();
                self.models = models;
            }
            "model_override" => {
                self.model_override = match value {
                    "none" | "" => None,
                    v => Some(v.parse().map_err(err)?),
                }
            }
            "residual_weight" => self.residual_weight = parse_num(value)?,
            "stability_weight" => self.stability_weight = parse_num(value)?,
            "scenarios" => self.scenarios = parse_num(value)?,
            "horizon" => self.horizon = parse_num(value)?,
            "seed" => self.seed = parse_num(value)?,
            "omega" => self.omega = parse_num(value)?,
            "percentiles" => {
                self.percentiles = value
                    .split(',')
                    .map(|p| parse_num::<f64>(p.trim()))
                    .collect::<std::result::Result<Vec<_>, _>>()?
            }
            "discount_rate" => self.discount_rate = parse_num(value)?,
            "skip_correction" => self.skip_correction = parse_bool(value)?,
            "pass_through" => self.pass_through = parse_bool(value)?,
            "month_weights" => self.month_weights = value.parse().map_err(err)?,
            "le_age" => self.le_age = parse_num(value)?,
            "le_truncate" => self.le_truncate = parse_num(value)?,
            "weighting" => self.weighting = value.parse().map_err(err)?,
            "suffix_policy" => self.suffix_policy = value.parse().map_err(err)?,
            "stability" => self.stability = parse_bool(value)?,
            other => return Err(format!("unknown key `{other}`")),
        }
        Ok(())
    }

    /// Effective settings in a fixed order. The output directory is left out
    /// so that bundles written to different places stay identical.
    pub fn echo(&self) -> Vec<(String, String)> {
        Self::KEYS
            .into_iter()
            .filter(|&k| k != "out")
            .map(|k| {
                let v = match k {
                    "deaths" => path_value(&self.deaths),
                    "population" => path_value(&self.population),
                    "births" => path_value(&self.births),
                    "predicted_indicator" => path_value(&self.predicted_indicator),
                    "portfolio" => path_value(&self.portfolio),
                    "gender" => self.gender.to_string(),
                    "ages" => format!("{}-{}", self.ages.start, self.ages.end),
                    "years" => self.years.map_or("auto".into(), |y| format!("{}-{}", y.start, y.end)),
                    "models" => list(&self.models),
                    "model_override" => self.model_override.map_or("none".into(), |m| m.to_string()),
                    "residual_weight" => self.residual_weight.to_string(),
                    "stability_weight" => self.stability_weight.to_string(),
                    "scenarios" => self.scenarios.to_string(),
                    "horizon" => self.horizon.to_string(),
                    "seed" => self.seed.to_string(),
                    "omega" => self.omega.to_string(),
                    "percentiles" => list(&self.percentiles),
                    "discount_rate" => self.discount_rate.to_string(),
                    "skip_correction" => self.skip_correction.to_string(),
                    "pass_through" => self.pass_through.to_string(),
                    "month_weights" => format!("{:?}", self.month_weights).to_ascii_lowercase(),
                    "le_age" => self.le_age.to_string(),
                    "le_truncate" => self.le_truncate.to_string(),
                    "weighting" => format!("{:?}", self.weighting).to_ascii_lowercase(),
                    "suffix_policy" => format!("{:?}", self.suffix_policy).to_ascii_lowercase(),
                    "stability" => self.stability.to_string(),
                    _ => unreachable!("listed keys"),
                };
                (k.to_string(), v)
            })
            .collect()
    }

    pub fn hash(&self) -> String {
        let text: String = self.echo().iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        sha256_hex(text.as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidInput(m));
        if self.models.is_empty() {
            return fail("no models listed".into());
        }
        if let Some(m) = self.model_override {
            if !self.models.contains(&m) {
                return fail(format!("model_override {m} is not among the fitted models"));
            }
        }
        if self.scenarios == 0 || self.horizon == 0 {
            return fail("scenarios and horizon must be positive".into());
        }
        if self.omega <= self.ages.end {
            return fail(format!("omega {} must exceed the top age {}", self.omega, self.ages.end));
        }
        if self.percentiles.iter().any(|p| !(*p > 0.0 && *p < 100.0)) {
            return fail("percentiles must lie in (0, 100)".into());
        }
        if !(self.le_age >= self.ages.start && self.le_age < self.le_truncate && self.le_truncate <= self.ages.end + 1) {
            return fail(format!(
                "life expectancy band {}-{} must lie inside ages {}-{}",
                self.le_age,
                self.le_truncate,
                self.ages.start,
                self.ages.end + 1
            ));
        }
        if !(self.discount_rate.is_finite() && self.discount_rate > -1.0) {
            return fail(format!("discount rate {} must exceed -1", self.discount_rate));
        }
        if !(self.residual_weight >= 0.0 && self.stability_weight >= 0.0) {
            return fail("selection weights must be non-negative".into());
        }
        Ok(())
    }

    fn projection(&self) -> ProjectionSettings {
        ProjectionSettings {
            scenarios: self.scenarios,
            horizon: self.horizon,
            seed: self.seed,
            omega: self.omega,
        }
    }
}

/// Parse a flat `key = value` file; `#` starts a comment line.
pub fn parse_run_config(text: &str, file: &str, base: &Path) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    let mut seen = BTreeMap::new();
    let mut issues = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.trim();
        if content.is_empty() || content.starts_with('#') {
            continue;
        }
        let Some((k, v)) = content.split_once('=') else {
            issues.push(LineIssue {
                line,
                kind: IssueKind::Parse,
                reason: "expected `key = value`".into(),
            });
            continue;
        };
        let key = k.trim();
        if let Some(prev) = seen.insert(key.to_string(), line) {
            issues.push(LineIssue {
                line,
                kind: IssueKind::Validation,
                reason: format!("`{key}` already set on line {prev}"),
            });
            continue;
        }
        if let Err(reason) = cfg.set(key, v, base) {
            let kind = if reason.starts_with("unknown key") { IssueKind::Parse } else { IssueKind::Validation };
            issues.push(LineIssue { line, kind, reason });
        }
    }
    if !issues.is_empty() {
        return Err(Error::Input {
            file: file.into(),
            issues,
        });
    }
    Ok(cfg)
}

pub fn read_run_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    parse_run_config(&text, &path.display().to_string(), base)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub stage: String,
    /// Relative to the output directory.
    pub path: String,
    pub sha256: String,
    pub bytes: usize,
}

/// Writes CSV / JSON outputs, each prefixed by the same provenance metadata,
/// and records their checksums.
#[derive(Debug)]
pub struct ArtifactWriter {
    dir: PathBuf,
    metadata: Vec<(String, String)>,
    artifacts: Vec<Artifact>,
}

impl ArtifactWriter {
    pub fn new(dir: impl Into<PathBuf>, metadata: Vec<(String, String)>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(ArtifactWriter {
            dir,
            metadata,
            artifacts: Vec::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn artifacts(&self) -> &[Artifact] {
        &self.artifacts
    }

    fn metadata_json(&self) -> Json {
        Json::Object(self.metadata.iter().map(|(k, v)| (k.clone(), Json::String(v.clone()))).collect())
    }

    fn put(&mut self, stage: &str, name: &str, contents: &str) -> Result<PathBuf> {
        let path = self.dir.join(name);
        std::fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
        self.artifacts.push(Artifact {
            stage: stage.into(),
            path: name.into(),
            sha256: sha256_hex(contents.as_bytes()),
            bytes: contents.len(),
        });
        Ok(path)
    }

    /// `<name>.csv` with a `# key: value` header, and `<name>.json`.
    pub fn table(&mut self, stage: &str, name: &str, table: &Table) -> Result<PathBuf> {
        let mut csv: String = self.metadata.iter().map(|(k, v)| format!("# {k}: {v}\n")).collect();
        csv.push_str(&table.to_csv()?);
        let path = self.put(stage, &format!("{name}.csv"), &csv)?;
        let mirror = json!({
            "metadata": self.metadata_json(),
            "columns": table.columns,
            "rows": table.rows,
        });
        self.put(stage, &format!("{name}.json"), &serde_json::to_string_pretty(&mirror)?)?;
        Ok(path)
    }

    pub fn grid(&mut self, stage: &str, name: &str, grid: &Grid) -> Result<PathBuf> {
        self.table(stage, name, &Table::from_grid(grid))
    }

    /// Rates at `<name>.csv`, deaths and exposure alongside, readable by
    /// [`crate::ingest::read_surface_csv`].
    pub fn surface(&mut self, stage: &str, name: &str, surface: &MortalitySurface) -> Result<PathBuf> {
        let path = self.grid(stage, name, surface.rates())?;
        self.grid(stage, &format!("{name}_deaths"), surface.deaths())?;
        self.grid(stage, &format!("{name}_exposure"), surface.exposure())?;
        Ok(path)
    }

    /// `<name>.json` as `{"metadata": ..., "data": ...}`.
    pub fn json<T: Serialize + ?Sized>(&mut self, stage: &str, name: &str, data: &T) -> Result<PathBuf> {
        let doc = json!({ "metadata": self.metadata_json(), "data": data });
        self.put(stage, &format!("{name}.json"), &serde_json::to_string_pretty(&doc)?)
    }
}

/// Read the `data` member of a JSON artifact, or the whole document when it
/// has no metadata wrapper.
pub fn read_json_artifact<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let doc: Json = serde_json::from_str(&text)?;
    let data = match doc {
        Json::Object(mut m) if m.contains_key("metadata") && m.contains_key("data") => m.remove("data").expect("checked"),
        other => other,
    };
    Ok(serde_json::from_value(data)?)
}

pub fn parameter_tables(params: &ModelParams) -> Vec<(&'static str, Table)> {
    let mut out = Vec::new();
    let by_age = |v: &[f64]| {
        let mut t = Table::new(["age", "value"]);
        for (i, &b) in v.iter().enumerate() {
            t.push(vec![(params.ages.start + i as u32).into(), b.into()]);
        }
        t
    };
    let by_year = |v: &[f64]| {
        let mut t = Table::new(["year", "value"]);
        for (j, &k) in v.iter().enumerate() {
            t.push(vec![(params.years.start + j as i32).into(), k.into()]);
        }
        t
    };
    if !params.beta1.is_empty() {
        out.push(("beta1", by_age(&params.beta1)));
    }
    if !params.beta2.is_empty() {
        out.push(("beta2", by_age(&params.beta2)));
    }
    if !params.kappa1.is_empty() {
        out.push(("kappa1", by_year(&params.kappa1)));
    }
    if !params.kappa2.is_empty() {
        out.push(("kappa2", by_year(&params.kappa2)));
    }
    if !params.cohorts.is_empty() {
        let mut t = Table::new(["cohort", "gamma", "cells", "pinned"]);
        for c in &params.cohorts {
            t.push(vec![c.cohort.into(), c.gamma.into(), c.cells.into(), c.pinned.into()]);
        }
        out.push(("gamma", t));
    }
    out
}

/// Summary of a fit without the residual grid.
pub fn diagnostics_json(fit: &ModelFit) -> Json {
    let d = &fit.diagnostics;
    json!({
        "model": d.tag,
        "log_likelihood": d.log_likelihood,
        "parameters": d.parameters,
        "cells": d.cells,
        "bic": d.bic,
        "iterations": d.iterations,
        "gradient_norm": d.gradient_norm,
        "trace": d.trace,
        "constraints": fit.params.constraints,
        "mean_age": fit.params.mean_age,
    })
}

/// Write parameters (JSON and one CSV per vector), diagnostics and residuals.
pub fn write_fit(w: &mut ArtifactWriter, stage: &str, prefix: &str, fit: &ModelFit) -> Result<()> {
    w.json(stage, &format!("{prefix}_params"), &fit.params)?;
    for (name, table) in parameter_tables(&fit.params) {
        w.table(stage, &format!("{prefix}_{name}"), &table)?;
    }
    w.json(stage, &format!("{prefix}_diagnostics"), &diagnostics_json(fit))?;
    w.grid(stage, &format!("{prefix}_residuals"), &fit.diagnostics.residuals)?;
    Ok(())
}

pub fn anomaly_table(rows: &[CohortAnomaly]) -> Table {
    let mut t = Table::new(["cohort", "cells", "before", "after", "ratio", "flagged"]);
    for r in rows {
        t.push(vec![
            r.cohort.into(),
            r.cells.into(),
            r.before.into(),
            r.after.into(),
            r.ratio.into(),
            r.flagged.into(),
        ]);
    }
    t
}

/// Period expectancy between two ages for every year of the surface.
pub fn period_expectancy_table(surface: &MortalitySurface, from: u32, truncation: u32) -> Result<Table> {
    let q = to_q(surface);
    let mut t = Table::new(["year", "life_expectancy"]);
    for year in surface.rates().years() {
        t.push(vec![year.into(), period_life_expectancy(&q, from, truncation, year)?.into()]);
    }
    Ok(t)
}

fn percentile_label(p: f64) -> String {
    format!("p{p}")
}

pub fn fan_table(fan: &ExpectancyFan) -> Table {
    let mut t = Table::new(std::iter::once("year".to_string()).chain(fan.percentiles.iter().map(|(p, _)| percentile_label(*p))));
    for (j, &year) in fan.years.iter().enumerate() {
        let mut row: Vec<Value> = vec![year.into()];
        row.extend(fan.percentiles.iter().map(|(_, c)| Value::Real(c[j])));
        t.push(row);
    }
    t
}

/// Write central and percentile tables, expectancy fans and a summary.
pub fn write_projection(
    w: &mut ArtifactWriter,
    stage: &str,
    prefix: &str,
    set: &ScenarioSet,
    percentiles: &[f64],
    le_age: u32,
    le_truncate: u32,
) -> Result<()> {
    w.grid(stage, &format!("{prefix}_central"), &set.with_base(0))?;
    for &p in percentiles {
        w.grid(stage, &format!("{prefix}_{}", percentile_label(p)), &percentile_table(set, p)?)?;
    }
    for kind in [ExpectancyKind::Period, ExpectancyKind::Cohort] {
        let fan = life_expectancy_fan(set, kind, le_age, le_truncate)?;
        let name = format!("{prefix}_le_{}", if kind == ExpectancyKind::Period { "period" } else { "cohort" });
        w.table(stage, &name, &fan_table(&fan))?;
    }
    w.json(
        stage,
        &format!("{prefix}_summary"),
        &json!({
            "model": set.tag,
            "settings": set.settings,
            "base_year": set.base_year,
            "band": set.band,
            "clamped": set.clamped,
            "dynamics_note": "random walk with drift on the period indices; M3 cohort effects follow their own random walk",
        }),
    )?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Ok,
    Skipped,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub status: StageStatus,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputRecord {
    pub name: String,
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub config_sha256: String,
    pub seed: u64,
    pub config: BTreeMap<String, String>,
    pub inputs: Vec<InputRecord>,
    pub stages: Vec<StageRecord>,
    pub artifacts: Vec<Artifact>,
}

impl Manifest {
    pub fn stage(&self, name: &str) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.name == name)
    }
}

/// Stability indicator of one calibration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelledStability {
    pub calibration: String,
    pub report: StabilityReport,
}

/// Outputs of one calibration carried between stages.
struct Calibration {
    label: &'static str,
    surface: MortalitySurface,
}

/// What the capital calculation needs from a scenario set: the base column,
/// the central path and the 0.5th-percentile table.
#[derive(Debug, Clone, PartialEq)]
pub struct Projected {
    pub label: &'static str,
    pub base_year: i32,
    pub base: Vec<f64>,
    pub central: Grid,
    pub shock: Grid,
}

impl Projected {
    pub fn from_set(label: &'static str, set: &ScenarioSet) -> Result<Self> {
        Ok(Projected {
            label,
            base_year: set.base_year,
            base: set.base.clone(),
            central: set.central().clone(),
            shock: percentile_table(set, 0.5)?,
        })
    }
}

/// Tables for `proj` with the Best-Estimate path of `be`.
pub fn shocked(be: &Projected, proj: &Projected, gender: Gender) -> Result<ShockedTables> {
    let be_path = improvement_path(&be.base, &be.central, be.base_year, Role::BestEstimate)?;
    let scr_path = improvement_path(&proj.base, &proj.shock, proj.base_year, Role::Shock)?;
    build_shocked_tables(&be_path, &scr_path, &be.base, gender)
}

struct Run<'a> {
    cfg: &'a RunConfig,
    writer: ArtifactWriter,
    stages: Vec<StageRecord>,
    inputs: Vec<InputRecord>,
}

impl Run<'_> {
    fn manifest(&self) -> Manifest {
        Manifest {
            tool: TOOL.into(),
            config_sha256: self.cfg.hash(),
            seed: self.cfg.seed,
            config: self.cfg.echo().into_iter().collect(),
            inputs: self.inputs.clone(),
            stages: self.stages.clone(),
            artifacts: self.writer.artifacts().to_vec(),
        }
    }

    fn write_manifest(&self) -> Result<Manifest> {
        let m = self.manifest();
        let path = self.writer.dir().join(MANIFEST_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(&m)?).map_err(|e| Error::io(&path, e))?;
        Ok(m)
    }

    fn stage<T>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> Result<(T, Option<String>)>) -> Result<T> {
        log::info!("stage {name}");
        match f(self) {
            Ok((v, note)) => {
                self.stages.push(StageRecord {
                    name: name.into(),
                    status: StageStatus::Ok,
                    note,
                });
                Ok(v)
            }
            Err(e) => {
                self.stages.push(StageRecord {
                    name: name.into(),
                    status: StageStatus::Failed,
                    note: Some(e.to_string()),
                });
                let _ = self.write_manifest();
                let marker = self.writer.dir().join(FAILED_MARKER);
                let _ = std::fs::write(&marker, format!("stage {name}: {e}\n"));
                Err(Error::Stage {
                    stage: name.into(),
                    source: Box::new(e),
                })
            }
        }
    }

    fn skip(&mut self, name: &str, note: &str) {
        self.stages.push(StageRecord {
            name: name.into(),
            status: StageStatus::Skipped,
            note: Some(note.into()),
        });
    }
}

fn required<'p>(p: &'p Option<PathBuf>, key: &str) -> Result<&'p PathBuf> {
    p.as_ref().ok_or_else(|| Error::InvalidInput(format!("`{key}` is required")))
}

fn default_years(deaths: &crate::ingest::RawDeathsLexis, pop_years: &std::collections::BTreeSet<i32>) -> Result<YearSpan> {
    let usable: Vec<i32> = deaths
        .records
        .iter()
        .map(|r| r.year)
        .filter(|t| pop_years.contains(t) && pop_years.contains(&(t + 1)))
        .collect();
    let (Some(&lo), Some(&hi)) = (usable.iter().min(), usable.iter().max()) else {
        return Err(Error::InvalidInput("no year has both deaths and bracketing populations".into()));
    };
    Span::new(lo.max(hi - DEFAULT_WINDOW_YEARS + 1), hi)
}

fn fit_all(cals: &[Calibration], models: &[ModelTag]) -> Result<Vec<Vec<(ModelFit, Option<f64>)>>> {
    let jobs: Vec<(usize, ModelTag)> = (0..cals.len()).flat_map(|c| models.iter().map(move |&m| (c, m))).collect();
    let results: Vec<Result<(ModelFit, Option<f64>)>> = jobs
        .par_iter()
        .map(|&(c, m)| {
            let surface = &cals[c].surface;
            let full = fit(m, surface)?;
            let years = surface.year_span();
            let drift = Span::new(years.start, years.end - STABILITY_SHORTENING)
                .and_then(|short| surface.window(surface.age_span(), short))
                .and_then(|s| fit(m, &s))
                .and_then(|short| parameter_drift(&full.params, &short.params));
            let drift = match drift {
                Ok(d) => Some(d),
                Err(e) => {
                    log::warn!("{m} stability refit on {}: {e}", cals[c].label);
                    None
                }
            };
            Ok((full, drift))
        })
        .collect();
    let mut out: Vec<Vec<(ModelFit, Option<f64>)>> = cals.iter().map(|_| Vec::new()).collect();
    for ((c, _), r) in jobs.into_iter().zip(results) {
        out[c].push(r?);
    }
    Ok(out)
}

fn selection_json(r: &SelectionReport) -> Json {
    json!({
        "ranking": r.ranking,
        "runs": r.candidates.iter().map(|c| json!({"model": c.diagnostics.tag, "runs": c.runs})).collect::<Vec<_>>(),
        "best_by_score": r.best_by_score,
        "override": r.override_model,
        "selected": r.selected,
    })
}

/// Cohort expectancies and `IE` per age at the valuation year, one column
/// pair per calibration; ages whose diagonal leaves the tables are omitted.
pub fn ie_table(tables: &[(&str, ShockedTables)]) -> Table {
    let mut cols = vec!["cohort".to_string(), "age".into(), "le_be".into()];
    for (label, _) in tables {
        cols.push(format!("le_scr_{label}"));
        cols.push(format!("ie_{label}"));
    }
    let mut t = Table::new(cols);
    let first = &tables[0].1;
    let t0 = first.base_year;
    for age in first.be.ages() {
        let row = (|| -> Result<Vec<Value>> {
            let mut row: Vec<Value> = vec![(t0 - age as i32).into(), age.into()];
            row.push(cohort_life_expectancy(first, Role::BestEstimate, age, t0)?.into());
            for (_, tab) in tables {
                row.push(cohort_life_expectancy(tab, Role::Shock, age, t0)?.into());
                row.push(ie_indicator(tab, age, t0)?.into());
            }
            Ok(row)
        })();
        if let Ok(row) = row {
            t.push(row);
        }
    }
    t
}

fn vintage_tables(cfg: &RunConfig, cals: &[Calibration], model: ModelTag) -> Result<Vec<(&'static str, ShockedTables)>> {
    let mut projected = Vec::new();
    for cal in cals {
        let years = cal.surface.year_span();
        let older = cal.surface.window(cal.surface.age_span(), Span::new(years.start, years.end - 1)?)?;
        let f = fit(model, &older)?;
        let set = simulate(&f.params, &estimate_dynamics(&f.params)?, cfg.projection())?;
        projected.push(Projected::from_set(cal.label, &set)?);
    }
    let be = projected.last().expect("at least one calibration");
    projected.iter().map(|p| Ok((p.label, shocked(be, p, cfg.gender)?))).collect()
}

/// Execute every stage, writing artifacts and `manifest.json` under
/// `config.out`. A failing stage leaves a `FAILED` marker and the partial
/// bundle.
pub fn run_pipeline(cfg: &RunConfig) -> Result<Manifest> {
    cfg.validate()?;
    for stale in [MANIFEST_FILE, FAILED_MARKER] {
        let p = cfg.out.join(stale);
        if p.exists() {
            std::fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
        }
    }
    let mut inputs = Vec::new();
    for (name, p) in [
        ("deaths", &cfg.deaths),
        ("population", &cfg.population),
        ("births", &cfg.births),
        ("predicted_indicator", &cfg.predicted_indicator),
        ("portfolio", &cfg.portfolio),
    ] {
        if let Some(p) = p {
            if name == "births" && cfg.skip_correction {
                continue;
            }
            inputs.push(InputRecord {
                name: name.into(),
                path: p.display().to_string(),
                sha256: file_sha256(p)?,
            });
        }
    }
    let mut metadata = vec![
        ("tool".to_string(), TOOL.to_string()),
        ("config_sha256".into(), cfg.hash()),
        ("seed".into(), cfg.seed.to_string()),
    ];
    metadata.extend(inputs.iter().map(|i| (format!("input.{}", i.name), i.sha256.clone())));
    metadata.extend(cfg.echo().into_iter().map(|(k, v)| (format!("config.{k}"), v)));
    let mut run = Run {
        cfg,
        writer: ArtifactWriter::new(&cfg.out, metadata)?,
        stages: Vec::new(),
        inputs,
    };

    let crude = run.stage("ingest", |r| {
        let deaths = parse_deaths_lexis(required(&r.cfg.deaths, "deaths")?)?;
        let population = parse_population(required(&r.cfg.population, "population")?)?;
        let years = match r.cfg.years {
            Some(y) => y,
            None => default_years(&deaths, &population.years())?,
        };
        let surface = build_surface(&deaths, &population, r.cfg.gender, r.cfg.ages, years, r.cfg.suffix_policy)?;
        r.writer.surface("ingest", "surface_crude", &surface)?;
        r.writer.grid("ingest", "improvements_crude", &improvements(&surface)?.r)?;
        let le = period_expectancy_table(&surface, r.cfg.le_age, r.cfg.le_truncate)?;
        r.writer.table("ingest", "period_le_crude", &le)?;
        let note = format!("window {}-{}", years.start, years.end);
        Ok((surface, Some(note)))
    })?;

    let mut cals = vec![Calibration {
        label: "crude",
        surface: crude,
    }];
    if cfg.skip_correction {
        run.skip("correct", "correction skipped by configuration; corrected artifacts not produced");
    } else {
        let corrected = run.stage("correct", |r| {
            let crude = &cals[0].surface;
            let mut indicator = match &r.cfg.births {
                Some(p) => indicator_from_births(&parse_monthly_births(p)?, r.cfg.month_weights),
                None => CorrectionIndicator::new(""),
            };
            if let Some(p) = &r.cfg.predicted_indicator {
                indicator.fill_from(&read_indicator_csv(p, &indicator.country)?);
            }
            let corrected = correct_surface(crude, &indicator, r.cfg.pass_through)?;
            r.writer.table("correct", "indicator", &indicator_table(&indicator))?;
            r.writer.surface("correct", "surface_corrected", &corrected)?;
            r.writer.grid("correct", "improvements_corrected", &improvements(&corrected)?.r)?;
            let le = period_expectancy_table(&corrected, r.cfg.le_age, r.cfg.le_truncate)?;
            r.writer.table("correct", "period_le_corrected", &le)?;
            let report = anomaly_report(crude, &corrected)?;
            r.writer.table("correct", "anomaly_report", &anomaly_table(&report))?;
            let flagged: Vec<i32> = report.iter().filter(|a| a.flagged).map(|a| a.cohort).collect();
            Ok((corrected, Some(format!("flagged cohorts {flagged:?}"))))
        })?;
        cals.push(Calibration {
            label: "corrected",
            surface: corrected,
        });
    }

    let fits = run.stage("fit", |r| {
        let fits = fit_all(&cals, &r.cfg.models)?;
        for (cal, per_model) in cals.iter().zip(&fits) {
            for (f, _) in per_model {
                write_fit(&mut r.writer, "fit", &format!("fit_{}_{}", cal.label, f.params.tag.as_str().to_ascii_lowercase()), f)?;
            }
        }
        Ok((fits, None))
    })?;

    let selected = run.stage("select", |r| {
        let weights = SelectionWeights {
            residual: r.cfg.residual_weight,
            stability: r.cfg.stability_weight,
        };
        let mut reports = Vec::new();
        for per_model in &fits {
            let candidates: Vec<Candidate> =
                per_model.iter().map(|(f, d)| Candidate::new(f.diagnostics.clone(), *d)).collect();
            reports.push(select_model(&candidates, weights, r.cfg.model_override)?);
        }
        let labelled: Vec<(String, crate::models::FitDiagnostics)> = cals
            .iter()
            .zip(&fits)
            .flat_map(|(c, per_model)| per_model.iter().map(|(f, _)| (c.label.to_string(), f.diagnostics.clone())))
            .collect();
        let comparison = compare_bic(&labelled);
        let best: Vec<ModelTag> = reports.iter().map(|r| r.best_by_score).collect();
        let flip = best.windows(2).any(|w| w[0] != w[1]);
        let selected = reports.last().expect("one calibration").selected;
        let doc = json!({
            "calibrations": cals.iter().zip(&reports).map(|(c, rep)| json!({"calibration": c.label, "report": selection_json(rep)})).collect::<Vec<_>>(),
            "bic_comparison": comparison,
            "best_model_changes_after_correction": flip,
            "selected": selected,
            "criteria_note": "BIC decides; runs tests and parameter drift are advisory unless weighted",
        });
        r.writer.json("select", "selection", &doc)?;
        let note = if flip {
            format!("selected {selected}; best model differs between calibrations {best:?}")
        } else {
            format!("selected {selected}")
        };
        Ok((selected, Some(note)))
    })?;

    let projected = run.stage("project", |r| {
        let mut out = Vec::new();
        for (cal, per_model) in cals.iter().zip(&fits) {
            let (f, _) = per_model.iter().find(|(f, _)| f.params.tag == selected).expect("selected among fitted");
            let set = simulate(&f.params, &estimate_dynamics(&f.params)?, r.cfg.projection())?;
            write_projection(
                &mut r.writer,
                "project",
                &format!("projection_{}", cal.label),
                &set,
                &r.cfg.percentiles,
                r.cfg.le_age,
                r.cfg.le_truncate,
            )?;
            out.push(Projected::from_set(cal.label, &set)?);
        }
        Ok((out, Some(format!("model {selected}, {} scenarios", r.cfg.scenarios))))
    })?;

    run.stage("scr", |r| {
        let cfg = r.cfg;
        let portfolio = match &cfg.portfolio {
            Some(p) => read_portfolio_csv(p, cfg.discount_rate)?,
            None => AnnuityPortfolio::flat(cfg.gender, Span::new(cfg.le_age, cfg.ages.end)?, cfg.discount_rate),
        };
        let be = projected.last().expect("one calibration");
        let tables: Vec<(&str, ShockedTables)> = projected
            .iter()
            .map(|p| Ok((p.label, shocked(be, p, cfg.gender)?)))
            .collect::<Result<_>>()?;
        r.writer.grid("scr", "shocked_be", &tables[0].1.be)?;
        for (label, t) in &tables {
            r.writer.grid("scr", &format!("shocked_scr_{label}"), &t.scr)?;
        }
        r.writer.table("scr", "ie_curve", &ie_table(&tables))?;
        let mut notes = vec!["Best-Estimate path is the central projection of the selected model".to_string()];
        if let [(_, crude), (_, corrected)] = tables.as_slice() {
            let impact = scr_impact(&portfolio, crude, corrected)?;
            r.writer.json("scr", "scr_impact", &impact)?;
            notes.push(format!("relative SCR change {:.4}", impact.relative_difference));
        } else {
            notes.push("single calibration: SCR impact not computed".into());
            let (label, t) = &tables[0];
            let be = crate::scr::portfolio_value(&portfolio, t, Role::BestEstimate)?;
            let scr = crate::scr::portfolio_value(&portfolio, t, Role::Shock)?;
            r.writer.json("scr", "scr_value", &json!({"calibration": label, "value_be": be, "value_scr": scr, "scr": scr - be}))?;
        }
        if cfg.stability {
            let older = vintage_tables(cfg, &cals, selected)?;
            let mut reports = Vec::new();
            for ((label, prev), (_, now)) in older.iter().zip(&tables) {
                let s = stability_indicator(prev, now, &portfolio, cfg.weighting)?;
                reports.push(LabelledStability {
                    calibration: label.to_string(),
                    report: s,
                });
            }
            r.writer.json("scr", "stability", &reports)?;
        } else {
            notes.push("stability indicator disabled".into());
        }
        Ok(((), Some(notes.join("; "))))
    })?;

    run.write_manifest()
}
