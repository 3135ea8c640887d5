//! Replays the checked-in fuzz seeds through the same entry points as the
//! fuzz targets, and feeds them random and mutated inputs.

use std::path::{Path, PathBuf};

use cohortfix_core::{correction, ingest, oracle, pipeline, scr};
use proptest::prelude::*;

const TARGETS: [&str; 8] = [
    "deaths_lexis",
    "population",
    "monthly_births",
    "grid_csv",
    "config",
    "indicator_csv",
    "portfolio_csv",
    "oracle_spec",
];

/// Mirror of the fuzz target bodies.
fn run_target(target: &str, data: &[u8]) {
    let text = String::from_utf8_lossy(data);
    match target {
        "deaths_lexis" => {
            if let Ok(parsed) = ingest::parse_deaths_lexis_str(&text, "fuzz") {
                let again = ingest::format_deaths_lexis(&parsed);
                ingest::parse_deaths_lexis_str(&again, "fuzz").unwrap();
            }
        }
        "population" => {
            if let Ok(parsed) = ingest::parse_population_str(&text, "fuzz") {
                let again = ingest::format_population(&parsed);
                ingest::parse_population_str(&again, "fuzz").unwrap();
            }
        }
        "monthly_births" => {
            let _ = ingest::parse_monthly_births_str(&text, "fuzz");
        }
        "grid_csv" => {
            let _ = ingest::grid_from_csv(&text, "fuzz");
        }
        "config" => {
            if let Ok(cfg) = pipeline::parse_run_config(&text, "fuzz", Path::new(".")) {
                let _ = cfg.validate();
                let _ = cfg.hash();
            }
        }
        "indicator_csv" => {
            let _ = correction::parse_indicator_csv(&text, "fuzz", "SIM");
        }
        "portfolio_csv" => {
            let _ = scr::parse_portfolio_csv(&text, "fuzz", 0.02);
        }
        "oracle_spec" => {
            let _ = oracle::parse_oracle_spec(&text);
        }
        other => panic!("unknown target {other}"),
    }
}

fn corpus_dir(target: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target)
}

fn seeds(target: &str) -> Vec<Vec<u8>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(corpus_dir(target))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .collect();
    paths.sort();
    paths.into_iter().map(|p| std::fs::read(p).unwrap()).collect()
}

#[test]
fn every_target_has_seeds_and_replays_cleanly() {
    for target in TARGETS {
        let s = seeds(target);
        assert!(!s.is_empty(), "no seeds for {target}");
        for data in &s {
            run_target(target, data);
        }
    }
}

#[test]
fn valid_seeds_parse() {
    let first = |t: &str, name: &str| std::fs::read_to_string(corpus_dir(t).join(name)).unwrap();
    let deaths = ingest::parse_deaths_lexis_str(&first("deaths_lexis", "oracle_small.txt"), "seed").unwrap();
    assert!(!deaths.records.is_empty());
    let pop = ingest::parse_population_str(&first("population", "territorial_suffix.txt"), "seed").unwrap();
    assert_eq!(pop.records.len(), 4);
    assert!(ingest::parse_monthly_births_str(&first("monthly_births", "oracle_small.csv"), "seed").is_ok());
    let grid = ingest::grid_from_csv(&first("grid_csv", "small.csv"), "seed").unwrap();
    assert_eq!((grid.n_ages(), grid.n_years()), (2, 3));
    assert!(pipeline::parse_run_config(&first("config", "run.conf"), "seed", Path::new(".")).is_ok());
    assert!(pipeline::parse_run_config(&first("config", "bad_lines.conf"), "seed", Path::new(".")).is_err());
    let ind = correction::parse_indicator_csv(&first("indicator_csv", "with_provenance.csv"), "seed", "FRA").unwrap();
    assert_eq!(ind.get(1921), None);
    assert!(correction::parse_indicator_csv(&first("indicator_csv", "duplicate.csv"), "seed", "FRA").is_err());
    let p = scr::parse_portfolio_csv(&first("portfolio_csv", "points.csv"), "seed", 0.02).unwrap();
    assert_eq!(p.points.len(), 3);
    assert!(scr::parse_portfolio_csv(&first("portfolio_csv", "bad_rows.csv"), "seed", 0.02).is_err());
    assert!(oracle::parse_oracle_spec(&first("oracle_spec", "gompertz_skewed.json")).is_ok());
    assert!(oracle::parse_oracle_spec(&first("oracle_spec", "invalid.json")).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2048))]

    #[test]
    fn arbitrary_bytes_never_panic(target in 0usize..TARGETS.len(), data in proptest::collection::vec(any::<u8>(), 0..512)) {
        run_target(TARGETS[target], &data);
    }

    #[test]
    fn printable_text_never_panics(target in 0usize..TARGETS.len(), text in "[ -~\n\t]{0,400}") {
        run_target(TARGETS[target], text.as_bytes());
    }

    #[test]
    fn mutated_seeds_never_panic(
        target in 0usize..TARGETS.len(),
        pick in any::<prop::sample::Index>(),
        edits in proptest::collection::vec((any::<prop::sample::Index>(), any::<u8>(), 0u8..3), 1..12),
    ) {
        let all = seeds(TARGETS[target]);
        let mut data = all[pick.index(all.len())].clone();
        for (at, byte, op) in edits {
            if data.is_empty() {
                data.push(byte);
                continue;
            }
            let i = at.index(data.len());
            match op {
                0 => data[i] = byte,
                1 => data.insert(i, byte),
                _ => {
                    data.remove(i);
                }
            }
        }
        run_target(TARGETS[target], &data);
    }
}
