#![allow(dead_code)]

use std::path::{Path, PathBuf};

use cohortfix_core::correction::{CorrectionIndicator, Provenance};
use cohortfix_core::lexis::MortalitySurface;
use cohortfix_core::oracle::{inject_anomaly, sample_poisson_surface};
use cohortfix_core::{Gender, Grid, Span};

pub const ANOMALY_COHORTS: [i32; 4] = [1915, 1919, 1920, 1940];
pub const ANOMALY_FACTORS: [f64; 4] = [1.0 / 1.06, 1.0 / 1.06, 1.06, 1.06];
/// Calibration window of the anomaly fixture.
pub const FIXTURE_YEARS: (i32, i32) = (1985, 2014);

/// `a exp(b x) trend^(t − first year)`.
pub fn gompertz(ages: (u32, u32), years: (i32, i32), a: f64, b: f64, trend: f64) -> Grid {
    Grid::from_fn(Span::new(ages.0, ages.1).unwrap(), Span::new(years.0, years.1).unwrap(), |x, t| {
        a * (b * x as f64).exp() * trend.powi(t - years.0)
    })
}

pub struct AnomalyFixture {
    /// Poisson-sampled surface on the true exposures.
    pub clean: MortalitySurface,
    /// `clean` with the cohort anomalies injected.
    pub crude: MortalitySurface,
    /// `I(b)` equal to the injected factor on the anomalous cohorts, 1 elsewhere.
    pub indicator: CorrectionIndicator,
}

/// Gompertz surface over ages 50–89 and years 1985–2014 with ±6% exposure
/// errors on four cohorts.
pub fn anomaly_fixture(seed: u64, exposure: f64) -> AnomalyFixture {
    let rates = gompertz((50, 89), (FIXTURE_YEARS.0, FIXTURE_YEARS.1), 4e-5, 0.1, 0.985);
    let e = rates.map(|_| exposure);
    let clean = sample_poisson_surface(&rates, &e, Gender::Female, seed).unwrap();
    let crude = inject_anomaly(&clean, &ANOMALY_COHORTS, &ANOMALY_FACTORS).unwrap();
    let mut indicator = CorrectionIndicator::constant("SIM", FIXTURE_YEARS.0 - 89 - 1..=FIXTURE_YEARS.1 - 50, 1.0).unwrap();
    for (&b, &f) in ANOMALY_COHORTS.iter().zip(&ANOMALY_FACTORS) {
        indicator.insert(b, f, Provenance::Computed).unwrap();
    }
    AnomalyFixture {
        clean,
        crude,
        indicator,
    }
}

/// Monthly shares putting most births of a year late (`late = true`) or early.
pub fn skewed_months(late: bool) -> [f64; 12] {
    let mut m = [0.05; 12];
    if late {
        m[9] = 0.15;
        m[10] = 0.2;
        m[11] = 0.25;
        m[..9].iter_mut().for_each(|v| *v = 0.4 / 9.0);
    } else {
        m[0] = 0.25;
        m[1] = 0.2;
        m[2] = 0.15;
        m[3..].iter_mut().for_each(|v| *v = 0.4 / 9.0);
    }
    m
}

/// Oracle spec JSON for a small population with anomalous birth timing around
/// 1919/1920 and 1940.
pub fn pipeline_oracle_spec(births: u64) -> String {
    let cohorts: Vec<String> = (1905..=1950)
        .map(|y| {
            let months = match y {
                1915 | 1919 => format!(", \"months\": {:?}", skewed_months(true)),
                1920 | 1940 => format!(", \"months\": {:?}", skewed_months(false)),
                _ => String::new(),
            };
            format!("{{\"year\": {y}, \"births\": {births}{months}}}")
        })
        .collect();
    format!(
        "{{\"seed\": 17, \"first_year\": 1990, \"last_year\": 2009, \"cohorts\": [{}], \
         \"hazard\": {{\"gompertz\": {{\"a\": 3e-5, \"b\": 0.1}}}}, \"annual_factor\": 0.985}}",
        cohorts.join(", ")
    )
}

/// Simulate the pipeline inputs into `dir` and write a configuration next to
/// them. Returns the configuration path.
pub fn write_pipeline_inputs(dir: &Path, births: u64, extra: &str) -> PathBuf {
    let spec = cohortfix_core::oracle::parse_oracle_spec(&pipeline_oracle_spec(births)).unwrap();
    let out = cohortfix_core::oracle::simulate_population(&spec).unwrap();
    out.write_files(&dir.join("data")).unwrap();
    let config = format!(
        "# oracle-generated inputs\n\
         deaths = data/Deaths_lexis.txt\n\
         population = data/Population.txt\n\
         births = data/births_monthly.csv\n\
         ages = 60-79\n\
         years = 1995-2009\n\
         scenarios = 200\n\
         horizon = 60\n\
         seed = 3\n\
         le_truncate = 80\n\
         {extra}"
    );
    let path = dir.join("run.conf");
    std::fs::write(&path, config).unwrap();
    path
}

/// All regular files under `dir`, relative path → bytes.
pub fn read_tree(dir: &Path) -> std::collections::BTreeMap<String, Vec<u8>> {
    let mut out = std::collections::BTreeMap::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.is_file() {
            out.insert(p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap());
        }
    }
    out
}
