use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cohortfix_core::correction::{
    anomaly_report, correct_surface, indicator_from_births, indicator_table, read_indicator_csv, CorrectionIndicator,
    MonthWeights,
};
use cohortfix_core::forecast::{estimate_dynamics, simulate, ProjectionSettings};
use cohortfix_core::ingest::{
    parse_deaths_lexis, parse_monthly_births, parse_population, read_surface_csv, SuffixPolicy,
};
use cohortfix_core::lexis::{build_surface, improvements, MortalitySurface, SourceTag};
use cohortfix_core::models::{compare_bic, fit, ModelParams, ModelTag};
use cohortfix_core::oracle::{parse_oracle_spec, simulate_population};
use cohortfix_core::pipeline::{
    anomaly_table, file_sha256, ie_table, period_expectancy_table, read_json_artifact, read_run_config, run_pipeline,
    shocked, write_fit, write_projection, ArtifactWriter, LabelledStability, Projected, RunConfig, TOOL,
};
use cohortfix_core::regression::{predict, stepwise_select, Criterion, Series};
use cohortfix_core::scr::{read_portfolio_csv, scr_impact, stability_indicator, AnnuityPortfolio};
use cohortfix_core::{AgeSpan, Error, Gender, Result, Span, YearSpan};

/// Cohort-anomaly correction of period mortality tables and longevity trend
/// capital analytics.
#[derive(Parser)]
#[command(name = "cohortfix", version)]
struct Cli {
    /// Flat `key = value` configuration supplying defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Only report errors.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Band {
    #[arg(long)]
    gender: Option<Gender>,
    /// Age band, e.g. `60-95`.
    #[arg(long)]
    ages: Option<AgeSpan>,
    /// Calibration years, e.g. `1980-2009`.
    #[arg(long)]
    years: Option<YearSpan>,
}

#[derive(Subcommand)]
enum Command {
    /// Build a crude rate surface from Lexis deaths and January-1 populations.
    Surface {
        #[arg(long)]
        deaths: Option<PathBuf>,
        #[arg(long)]
        population: Option<PathBuf>,
        #[command(flatten)]
        band: Band,
        #[arg(long)]
        suffix_policy: Option<SuffixPolicy>,
    },
    /// Improvement-rate matrix of a surface.
    Improvements {
        #[arg(long)]
        surface: PathBuf,
        #[arg(long)]
        gender: Option<Gender>,
    },
    /// Period life expectancy by year for a surface.
    LifeExpectancy {
        #[arg(long)]
        surface: PathBuf,
        #[arg(long)]
        gender: Option<Gender>,
        #[arg(long)]
        from: Option<u32>,
        #[arg(long)]
        truncate: Option<u32>,
    },
    /// Rescale exposures by the correction indicator.
    Correct {
        #[arg(long)]
        surface: PathBuf,
        #[arg(long)]
        gender: Option<Gender>,
        #[arg(long)]
        births: Option<PathBuf>,
        #[arg(long)]
        predicted_indicator: Option<PathBuf>,
        /// Leave cohorts without an indicator uncorrected.
        #[arg(long)]
        pass_through: bool,
        #[arg(long)]
        month_weights: Option<MonthWeights>,
    },
    /// Exhaustive subset regression of an indicator on donor countries.
    RegressIndicator {
        #[arg(long)]
        target: PathBuf,
        /// `NAME=PATH`, repeatable.
        #[arg(long = "donor", value_parser = parse_donor)]
        donors: Vec<(String, PathBuf)>,
        #[arg(long, default_value = "adjr2")]
        criterion: Criterion,
        #[arg(long)]
        window: YearSpan,
        #[arg(long)]
        predict_years: Option<YearSpan>,
    },
    /// Fit stochastic mortality models to a surface.
    Fit {
        #[arg(long)]
        surface: PathBuf,
        /// `m1`, `m3`, `m5` or `all`.
        #[arg(long, default_value = "all")]
        model: String,
        #[command(flatten)]
        band: Band,
    },
    /// Simulate scenarios from fitted parameters.
    Project {
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        scenarios: Option<usize>,
        #[arg(long)]
        horizon: Option<usize>,
        /// Comma-separated, e.g. `0.5,50,99.5`.
        #[arg(long)]
        percentiles: Option<String>,
    },
    /// Shocked tables, expectancy impacts and capital for two calibrations.
    Scr {
        #[arg(long)]
        crude_params: PathBuf,
        #[arg(long)]
        corrected_params: PathBuf,
        /// Parameters fitted one year earlier, for the stability indicator.
        #[arg(long, requires = "corrected_previous")]
        crude_previous: Option<PathBuf>,
        #[arg(long, requires = "crude_previous")]
        corrected_previous: Option<PathBuf>,
        #[arg(long)]
        portfolio: Option<PathBuf>,
        #[arg(long)]
        discount_rate: Option<f64>,
        #[arg(long)]
        scenarios: Option<usize>,
        #[arg(long)]
        horizon: Option<usize>,
    },
    /// Micro-simulate a population and write HMD / HFD style files.
    SimulateOracle {
        #[arg(long)]
        spec: PathBuf,
    },
    /// Full pipeline driven by the configuration.
    Run {
        #[arg(long)]
        skip_correction: bool,
    },
}

fn parse_donor(s: &str) -> std::result::Result<(String, PathBuf), String> {
    let (name, path) = s.split_once('=').ok_or("expected NAME=PATH")?;
    Ok((name.trim().to_string(), PathBuf::from(path.trim())))
}

struct Context {
    cfg: RunConfig,
    command: &'static str,
}

impl Context {
    fn writer(&self, inputs: &[(&str, &Path)]) -> Result<ArtifactWriter> {
        let mut meta = vec![
            ("tool".to_string(), TOOL.to_string()),
            ("command".into(), self.command.into()),
            ("seed".into(), self.cfg.seed.to_string()),
        ];
        for (name, p) in inputs {
            meta.push((format!("input.{name}"), file_sha256(p)?));
        }
        ArtifactWriter::new(&self.cfg.out, meta)
    }

    fn gender(&self, g: Option<Gender>) -> Gender {
        g.unwrap_or(self.cfg.gender)
    }

    fn settings(&self, scenarios: Option<usize>, horizon: Option<usize>) -> ProjectionSettings {
        ProjectionSettings {
            scenarios: scenarios.unwrap_or(self.cfg.scenarios),
            horizon: horizon.unwrap_or(self.cfg.horizon),
            seed: self.cfg.seed,
            omega: self.cfg.omega,
        }
    }
}

fn read_surface(path: &Path, gender: Gender) -> Result<MortalitySurface> {
    read_surface_csv(path, gender, SourceTag::Crude)
}

fn read_series(path: &Path) -> Result<Series> {
    Ok(read_indicator_csv(path, "")?.values())
}

fn execute(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => read_run_config(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    let command = match &cli.command {
        Command::Surface { .. } => "surface",
        Command::Improvements { .. } => "improvements",
        Command::LifeExpectancy { .. } => "life-expectancy",
        Command::Correct { .. } => "correct",
        Command::RegressIndicator { .. } => "regress-indicator",
        Command::Fit { .. } => "fit",
        Command::Project { .. } => "project",
        Command::Scr { .. } => "scr",
        Command::SimulateOracle { .. } => "simulate-oracle",
        Command::Run { .. } => "run",
    };
    let mut ctx = Context { cfg, command };

    match cli.command {
        Command::Surface {
            deaths,
            population,
            band,
            suffix_policy,
        } => {
            let deaths = deaths.or(ctx.cfg.deaths.clone()).ok_or_else(|| missing("--deaths"))?;
            let population = population.or(ctx.cfg.population.clone()).ok_or_else(|| missing("--population"))?;
            let years = band.years.or(ctx.cfg.years).ok_or_else(|| missing("--years"))?;
            let surface = build_surface(
                &parse_deaths_lexis(&deaths)?,
                &parse_population(&population)?,
                ctx.gender(band.gender),
                band.ages.unwrap_or(ctx.cfg.ages),
                years,
                suffix_policy.unwrap_or(ctx.cfg.suffix_policy),
            )?;
            let mut w = ctx.writer(&[("deaths", &deaths), ("population", &population)])?;
            w.surface(command, "surface", &surface)?;
        }
        Command::Improvements { surface, gender } => {
            let s = read_surface(&surface, ctx.gender(gender))?;
            let mut w = ctx.writer(&[("surface", &surface)])?;
            w.grid(command, "improvements", &improvements(&s)?.r)?;
        }
        Command::LifeExpectancy {
            surface,
            gender,
            from,
            truncate,
        } => {
            let s = read_surface(&surface, ctx.gender(gender))?;
            let table = period_expectancy_table(
                &s,
                from.unwrap_or(ctx.cfg.le_age),
                truncate.unwrap_or(ctx.cfg.le_truncate),
            )?;
            ctx.writer(&[("surface", &surface)])?.table(command, "period_le", &table)?;
        }
        Command::Correct {
            surface,
            gender,
            births,
            predicted_indicator,
            pass_through,
            month_weights,
        } => {
            let crude = read_surface(&surface, ctx.gender(gender))?;
            let births = births.or(ctx.cfg.births.clone());
            let predicted = predicted_indicator.or(ctx.cfg.predicted_indicator.clone());
            let weights = month_weights.unwrap_or(ctx.cfg.month_weights);
            let mut indicator = match &births {
                Some(p) => indicator_from_births(&parse_monthly_births(p)?, weights),
                None => CorrectionIndicator::new(""),
            };
            if let Some(p) = &predicted {
                indicator.fill_from(&read_indicator_csv(p, &indicator.country)?);
            }
            let corrected = correct_surface(&crude, &indicator, pass_through || ctx.cfg.pass_through)?;
            let mut inputs: Vec<(&str, &Path)> = vec![("surface", &surface)];
            if let Some(p) = &births {
                inputs.push(("births", p));
            }
            if let Some(p) = &predicted {
                inputs.push(("predicted_indicator", p));
            }
            let mut w = ctx.writer(&inputs)?;
            w.surface(command, "surface_corrected", &corrected)?;
            w.table(command, "indicator", &indicator_table(&indicator))?;
            w.table(command, "anomaly_report", &anomaly_table(&anomaly_report(&crude, &corrected)?))?;
        }
        Command::RegressIndicator {
            target,
            donors,
            criterion,
            window,
            predict_years,
        } => {
            let target_series = read_series(&target)?;
            let mut panel = BTreeMap::new();
            for (name, path) in &donors {
                if panel.insert(name.clone(), read_series(path)?).is_some() {
                    return Err(Error::InvalidInput(format!("donor `{name}` given twice")));
                }
            }
            let selection = stepwise_select(&target_series, &panel, window, criterion)?;
            let mut inputs: Vec<(&str, &Path)> = vec![("target", &target)];
            inputs.extend(donors.iter().map(|(n, p)| (n.as_str(), p.as_path())));
            let mut w = ctx.writer(&inputs)?;
            w.json(command, "fit_report", &selection)?;
            if let Some(years) = predict_years {
                let (predicted, missing) = predict(&selection.chosen, &panel, years, "")?;
                if !missing.is_empty() {
                    log::warn!("no prediction for {missing:?}: a selected donor is undefined");
                }
                w.table(command, "predicted_indicator", &indicator_table(&predicted))?;
            }
        }
        Command::Fit { surface, model, band } => {
            let s = read_surface(&surface, ctx.gender(band.gender))?;
            let ages = band.ages.unwrap_or(s.age_span());
            let years = band.years.unwrap_or(s.year_span());
            let s = s.window(ages, years)?;
            let tags: Vec<ModelTag> = if model.eq_ignore_ascii_case("all") {
                ModelTag::ALL.to_vec()
            } else {
                model.split(',').map(|m| m.parse()).collect::<Result<_>>()?
            };
            let mut w = ctx.writer(&[("surface", &surface)])?;
            let mut diags = Vec::new();
            for tag in tags {
                let f = fit(tag, &s)?;
                write_fit(&mut w, command, &format!("fit_{}", tag.as_str().to_ascii_lowercase()), &f)?;
                diags.push(("surface".to_string(), f.diagnostics));
            }
            w.json(command, "bic", &compare_bic(&diags))?;
        }
        Command::Project {
            params,
            scenarios,
            horizon,
            percentiles,
        } => {
            if let Some(p) = percentiles {
                ctx.cfg.set("percentiles", &p, Path::new("")).map_err(Error::InvalidInput)?;
            }
            let p: ModelParams = read_json_artifact(&params)?;
            let set = simulate(&p, &estimate_dynamics(&p)?, ctx.settings(scenarios, horizon))?;
            let mut w = ctx.writer(&[("params", &params)])?;
            write_projection(
                &mut w,
                command,
                "projection",
                &set,
                &ctx.cfg.percentiles,
                ctx.cfg.le_age,
                ctx.cfg.le_truncate,
            )?;
        }
        Command::Scr {
            crude_params,
            corrected_params,
            crude_previous,
            corrected_previous,
            portfolio,
            discount_rate,
            scenarios,
            horizon,
        } => {
            let settings = ctx.settings(scenarios, horizon);
            let project = |label: &'static str, path: &Path| -> Result<Projected> {
                let p: ModelParams = read_json_artifact(path)?;
                Projected::from_set(label, &simulate(&p, &estimate_dynamics(&p)?, settings)?)
            };
            let pair = |crude: &Path, corrected: &Path| -> Result<_> {
                let (a, b) = (project("crude", crude)?, project("corrected", corrected)?);
                Ok((shocked(&b, &a, ctx.cfg.gender)?, shocked(&b, &b, ctx.cfg.gender)?))
            };
            let (crude, corrected) = pair(&crude_params, &corrected_params)?;
            let rate = discount_rate.unwrap_or(ctx.cfg.discount_rate);
            let portfolio_path = portfolio.or(ctx.cfg.portfolio.clone());
            let book = match &portfolio_path {
                Some(p) => read_portfolio_csv(p, rate)?,
                None => AnnuityPortfolio::flat(ctx.cfg.gender, Span::new(ctx.cfg.le_age, ctx.cfg.ages.end)?, rate),
            };
            let mut inputs: Vec<(&str, &Path)> = vec![("crude_params", &crude_params), ("corrected_params", &corrected_params)];
            if let Some(p) = &portfolio_path {
                inputs.push(("portfolio", p));
            }
            let mut w = ctx.writer(&inputs)?;
            w.grid(command, "shocked_be", &corrected.be)?;
            w.grid(command, "shocked_scr_crude", &crude.scr)?;
            w.grid(command, "shocked_scr_corrected", &corrected.scr)?;
            w.table(command, "ie_curve", &ie_table(&[("crude", crude.clone()), ("corrected", corrected.clone())]))?;
            w.json(command, "scr_impact", &scr_impact(&book, &crude, &corrected)?)?;
            if let (Some(cp), Some(kp)) = (crude_previous, corrected_previous) {
                let (crude_prev, corrected_prev) = pair(&cp, &kp)?;
                let doc = [
                    LabelledStability {
                        calibration: "crude".into(),
                        report: stability_indicator(&crude_prev, &crude, &book, ctx.cfg.weighting)?,
                    },
                    LabelledStability {
                        calibration: "corrected".into(),
                        report: stability_indicator(&corrected_prev, &corrected, &book, ctx.cfg.weighting)?,
                    },
                ];
                w.json(command, "stability", &doc)?;
            }
        }
        Command::SimulateOracle { spec } => {
            let text = std::fs::read_to_string(&spec).map_err(|e| Error::Io {
                path: spec.clone(),
                source: e,
            })?;
            let mut s = parse_oracle_spec(&text)?;
            if let Some(seed) = cli.seed {
                s.seed = seed;
            }
            let out = simulate_population(&s)?;
            for p in out.write_files(&ctx.cfg.out)? {
                log::info!("wrote {}", p.display());
            }
        }
        Command::Run { skip_correction } => {
            if cli.config.is_none() {
                return Err(missing("--config"));
            }
            ctx.cfg.skip_correction |= skip_correction;
            let manifest = run_pipeline(&ctx.cfg)?;
            log::info!(
                "{} artifacts written to {}",
                manifest.artifacts.len(),
                ctx.cfg.out.display()
            );
        }
    }
    Ok(())
}

fn missing(flag: &str) -> Error {
    Error::InvalidInput(format!("{flag} is required (or set it in the configuration)"))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "error" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numeric() {
                ExitCode::from(3)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
