//! Micro-simulated populations checked against the surface builder and the
//! correction indicator.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use cohortfix_core::correction::{correct_surface, indicator_from_births, MonthWeights};
use cohortfix_core::ingest::SuffixPolicy;
use cohortfix_core::lexis::{build_surface, MortalitySurface};
use cohortfix_core::oracle::{parse_oracle_spec, simulate_population, OracleOutput};
use cohortfix_core::{Gender, Span};

const LATE_COHORT: i32 = 1955;
const HAZARD: f64 = 0.02;

fn late_months() -> [f64; 12] {
    let mut m = [0.0; 12];
    m[10] = 0.5;
    m[11] = 0.5;
    m
}

/// Cohorts 1950-1969 with uniform births except one born in November and
/// December, constant hazard, tabulated 1960-1969.
fn simulated() -> &'static (OracleOutput, MortalitySurface) {
    static CELL: OnceLock<(OracleOutput, MortalitySurface)> = OnceLock::new();
    CELL.get_or_init(|| {
        let cohorts: Vec<String> = (1950..=1969)
            .map(|y| {
                if y == LATE_COHORT {
                    format!("{{\"year\": {y}, \"births\": 1000000, \"months\": {:?}}}", late_months())
                } else {
                    format!("{{\"year\": {y}, \"births\": 1000000}}")
                }
            })
            .collect();
        let spec = format!(
            "{{\"seed\": 5, \"first_year\": 1960, \"last_year\": 1969, \"max_age\": 20, \
             \"cohorts\": [{}], \"hazard\": {{\"constant\": {{\"rate\": {HAZARD}}}}}}}",
            cohorts.join(", ")
        );
        let out = simulate_population(&parse_oracle_spec(&spec).unwrap()).unwrap();
        let surface = build_surface(
            &out.deaths,
            &out.population,
            Gender::Female,
            Span::new(0, 9).unwrap(),
            Span::new(1960, 1969).unwrap(),
            SuffixPolicy::Consistent,
        )
        .unwrap();
        (out, surface)
    })
}

/// `(deaths, uniform exposure, exact exposure)` summed along each diagonal.
fn diagonals(out: &OracleOutput, surface: &MortalitySurface) -> BTreeMap<i32, (f64, f64, f64)> {
    let mut acc: BTreeMap<i32, (f64, f64, f64)> = BTreeMap::new();
    for (x, t, e) in surface.exposure().cells() {
        let a = acc.entry(t - x as i32).or_default();
        a.0 += surface.deaths().at(x, t);
        a.1 += e;
        a.2 += out.exact_exposure.at(x, t);
    }
    acc
}

#[test]
fn uniform_births_give_unbiased_crude_rates() {
    let (out, surface) = simulated();
    let (mut d, mut e) = (0.0, 0.0);
    for (b, (db, eb, _)) in diagonals(out, surface) {
        if b != LATE_COHORT && b != LATE_COHORT + 1 {
            d += db;
            e += eb;
        }
    }
    let m = d / e;
    assert!((m / HAZARD - 1.0).abs() < 0.01, "pooled crude rate {m}");
}

#[test]
fn late_births_bias_crude_rates_and_correction_removes_it() {
    let (out, surface) = simulated();
    let indicator = indicator_from_births(&out.births, MonthWeights::CalendarExact);
    let corrected = correct_surface(surface, &indicator, true).unwrap();
    let sums = diagonals(out, surface);
    let corrected_sums = diagonals(out, &corrected);

    let (d, e, _) = sums[&LATE_COHORT];
    let crude = d / e;
    assert!(crude < HAZARD * 0.95, "late cohort crude rate {crude} not biased low by 5%");
    // Two independent computations of the exposure error on the late diagonal.
    let (_, _, exact) = sums[&LATE_COHORT];
    let i = indicator.get(LATE_COHORT).unwrap();
    assert!((exact / e - i).abs() < 0.005, "E*/E {} vs I {i}", exact / e);
    // The next diagonal holds the late cohort's upper triangles, where deaths
    // before the birthday make the formula about half a point high.
    let (_, e1, exact1) = sums[&(LATE_COHORT + 1)];
    let i1 = indicator.get(LATE_COHORT + 1).unwrap();
    assert!((exact1 / e1 - i1).abs() < 0.01, "next diagonal: E*/E {} vs I {i1}", exact1 / e1);
    for b in [LATE_COHORT, LATE_COHORT + 1] {
        let (d, e, _) = sums[&b];
        let (dc, ec, _) = corrected_sums[&b];
        assert!((dc / ec / HAZARD - 1.0).abs() < 0.01, "cohort {b}: corrected {}", dc / ec);
        assert!((d / e / HAZARD - 1.0).abs() > 0.05);
    }
}

#[test]
fn exact_exposure_rates_are_unbiased_on_every_diagonal() {
    let (out, surface) = simulated();
    for (b, (d, _, exact)) in diagonals(out, surface) {
        // Diagonals hold 1 to 10 cells; allow four standard errors.
        let se = d.sqrt() / exact;
        assert!((d / exact - HAZARD).abs() < 4.0 * se, "cohort {b}: {}", d / exact);
    }
}
