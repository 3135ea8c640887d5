//! Invariants checked over generated surfaces, indicators and tables.

use cohortfix_core::correction::{correct_surface, indicator_formula, CorrectionIndicator, Provenance};
use cohortfix_core::forecast::nearest_rank;
use cohortfix_core::ingest::{grid_from_csv, grid_to_csv};
use cohortfix_core::lexis::{death_curve, improvements, to_q, MortalitySurface, SourceTag};
use cohortfix_core::oracle::inject_anomaly;
use cohortfix_core::scr::{
    build_shocked_tables, ie_indicator, improvement_path, portfolio_value, AnnuityPortfolio, Role,
};
use cohortfix_core::{Gender, Grid, Span};
use proptest::prelude::*;

const AGES: (u32, u32) = (60, 80);
const YEARS: (i32, i32) = (2000, 2009);

/// Surfaces with rates between 1e-4 and 0.5 and exposures between 10 and 1e6.
fn surface() -> impl Strategy<Value = MortalitySurface> {
    let n = ((AGES.1 - AGES.0 + 1) * (YEARS.1 - YEARS.0 + 1) as u32) as usize;
    (
        proptest::collection::vec(-9.2f64..-0.7, n),
        proptest::collection::vec(1.0f64..6.0, n),
    )
        .prop_map(|(log_m, log_e)| {
            let ages = Span::new(AGES.0, AGES.1).unwrap();
            let years = Span::new(YEARS.0, YEARS.1).unwrap();
            let mut k = 0;
            let mut cells = Vec::with_capacity(log_m.len());
            let exposure = Grid::from_fn(ages, years, |_, _| {
                let e = 10f64.powf(log_e[k]);
                cells.push(e * log_m[k].exp());
                k += 1;
                e
            });
            let mut k = 0;
            let deaths = Grid::from_fn(ages, years, |_, _| {
                k += 1;
                cells[k - 1]
            });
            MortalitySurface::from_counts(deaths, exposure, Gender::Female, SourceTag::Simulated).unwrap()
        })
}

/// Indicator values for every diagonal of the generated surfaces.
fn indicator() -> impl Strategy<Value = Vec<f64>> {
    let n = (YEARS.1 - AGES.0 as i32 - (YEARS.0 - AGES.1 as i32) + 1) as usize;
    proptest::collection::vec(0.7f64..1.3, n)
}

fn cohorts() -> std::ops::RangeInclusive<i32> {
    (YEARS.0 - AGES.1 as i32)..=(YEARS.1 - AGES.0 as i32)
}

fn build_indicator(values: &[f64]) -> CorrectionIndicator {
    let mut ind = CorrectionIndicator::new("SIM");
    for (b, &v) in cohorts().zip(values) {
        ind.insert(b, v, Provenance::Computed).unwrap();
    }
    ind
}

fn rel(a: f64, b: f64) -> f64 {
    ((a - b) / b).abs()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn probabilities_match_rates(s in surface()) {
        let q = to_q(&s);
        for (x, t, m) in s.rates().cells() {
            let qx = q.at(x, t);
            prop_assert!((0.0..1.0).contains(&qx));
            prop_assert!((-(1.0 - qx).ln() - m).abs() <= 1e-12 * m.max(1.0));
        }
    }

    #[test]
    fn unit_indicator_is_the_identity(s in surface()) {
        let ind = CorrectionIndicator::constant("SIM", cohorts(), 1.0).unwrap();
        let out = correct_surface(&s, &ind, false).unwrap();
        prop_assert_eq!(out.rates(), s.rates());
        prop_assert_eq!(out.deaths(), s.deaths());
    }

    #[test]
    fn correction_divides_each_diagonal_by_its_indicator(s in surface(), values in indicator()) {
        let ind = build_indicator(&values);
        let out = correct_surface(&s, &ind, false).unwrap();
        for (x, t, m) in s.rates().cells() {
            let i = ind.get(t - x as i32).unwrap();
            prop_assert!(rel(out.rates().at(x, t) * i, m) < 1e-12);
        }
    }

    #[test]
    fn injection_is_undone_by_correction(s in surface(), values in indicator()) {
        let cohorts: Vec<i32> = cohorts().collect();
        let injected = inject_anomaly(&s, &cohorts, &values).unwrap();
        let restored = correct_surface(&injected, &build_indicator(&values), false).unwrap();
        for (x, t, m) in s.rates().cells() {
            prop_assert!(rel(restored.rates().at(x, t), m) < 1e-12);
        }
    }

    #[test]
    fn improvements_ignore_a_common_scale(s in surface(), scale in 0.1f64..10.0) {
        let scaled = MortalitySurface::from_counts(
            s.deaths().map(|d| d * scale),
            s.exposure().clone(),
            Gender::Female,
            SourceTag::Simulated,
        )
        .unwrap();
        let (r, r2) = (improvements(&s).unwrap().r, improvements(&scaled).unwrap().r);
        for (x, t, v) in r.cells() {
            prop_assert!((r2.at(x, t) - v).abs() < 1e-9 * (1.0 + v.abs()));
        }
    }

    #[test]
    fn death_curve_telescopes(s in surface(), radix in 1.0f64..1e6) {
        let q = to_q(&s);
        for t in YEARS.0..=YEARS.1 {
            let d = death_curve(&q, t, radix).unwrap();
            let survive: f64 = q.q.column(t).unwrap().iter().map(|qx| 1.0 - qx).product();
            prop_assert!(d.iter().all(|v| *v >= 0.0));
            prop_assert!(rel(d.iter().sum::<f64>(), radix * (1.0 - survive)) < 1e-9);
        }
    }

    #[test]
    fn surface_csv_round_trips(s in surface()) {
        let grid = s.rates();
        let back = grid_from_csv(&grid_to_csv(grid).unwrap(), "prop").unwrap();
        prop_assert!(back.same_shape(grid));
        for (x, t, v) in grid.cells() {
            prop_assert!(rel(back.at(x, t), v) <= 1e-6);
        }
    }

    #[test]
    fn indicator_stays_in_range_and_uniform_fractions_give_one(
        share in 0.0f64..=1.0,
        u in 0.0f64..=1.0,
        prev in 0.0f64..=1.0,
    ) {
        let i = indicator_formula(share, u, prev);
        prop_assert!((0.0..=2.0).contains(&i));
        prop_assert!((indicator_formula(share, 0.5, 0.5) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn nearest_rank_is_monotone_and_in_range(n in 1usize..5000, a in 0.01f64..99.99, b in 0.01f64..99.99) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(nearest_rank(lo, n) <= nearest_rank(hi, n));
        prop_assert!(nearest_rank(hi, n) < n);
    }

    #[test]
    fn lower_shocked_mortality_raises_value_and_expectancy(
        base in proptest::collection::vec(0.005f64..0.2, 21),
        trend in proptest::collection::vec(-0.03f64..0.0, 21),
        shock in proptest::collection::vec(0.0f64..0.05, 21),
    ) {
        // Ages 60-80 from 2000 need 20 projection years to reach the top age.
        let ages = Span::new(AGES.0, AGES.1).unwrap();
        let years = Span::new(2001, 2020).unwrap();
        let i = |x: u32| (x - AGES.0) as usize;
        let be = Grid::from_fn(ages, years, |x, t| base[i(x)] * (1.0 + trend[i(x)]).powi(t - 2000));
        let scr = Grid::from_fn(ages, years, |x, t| be.at(x, t) * (1.0 - shock[i(x)]));
        let tables = build_shocked_tables(
            &improvement_path(&base, &be, 2000, Role::BestEstimate).unwrap(),
            &improvement_path(&base, &scr, 2000, Role::Shock).unwrap(),
            &base,
            Gender::Female,
        )
        .unwrap();
        let portfolio = AnnuityPortfolio::flat(Gender::Female, ages, 0.02);
        let v_be = portfolio_value(&portfolio, &tables, Role::BestEstimate).unwrap();
        let v_scr = portfolio_value(&portfolio, &tables, Role::Shock).unwrap();
        prop_assert!(v_scr >= v_be);
        for x in AGES.0..=AGES.1 {
            prop_assert!(ie_indicator(&tables, x, 2000).unwrap() >= 0.0);
        }
    }
}
