use std::fs;
use std::sync::atomic::AtomicBool;
use std::sync::Arc;

use layerfuzz::coverage::CoverageRow;
use layerfuzz::difftest::{BugRecord, VerdictKind};
use layerfuzz::registry::Registry;
use layerfuzz::scheduler::{fuzz_to_dir, load_seed, run_campaign, CampaignConfig, ConfigError, RunOptions, Selection};

fn short(seed: u64, iterations: u64) -> CampaignConfig {
    CampaignConfig {
        rng_seed: seed,
        max_iterations: Some(iterations),
        ..CampaignConfig::default()
    }
}

#[test]
fn defaults() {
    let c = CampaignConfig::default();
    assert_eq!(c.time_budget_seconds, 600.0);
    assert_eq!((c.lambda, c.p, c.threshold), (0.5, 0.4, 0.4));
    assert_eq!((c.pool_capacity, c.sigma, c.n_shape), (50, 5, 5));
    assert_eq!(c.backends, ["eager", "fused"]);
    assert_eq!(c.initial_seeds.len(), 5);
    assert!(c.synthesize_first);
    assert_eq!(c.selection, Selection::Mcmc);
    assert!(c.check().unwrap().is_empty());
}

#[test]
fn toml_round_trip_and_field_names() {
    let c = CampaignConfig::from_toml("T = 0.25\nrng_seed = 9\nbackends = [\"eager\", \"faulty:relu_nan\"]\n").unwrap();
    assert_eq!(c.threshold, 0.25);
    assert_eq!(c.rng_seed, 9);
    assert_eq!(CampaignConfig::from_toml(&c.to_toml()).unwrap(), c);
    assert!(matches!(CampaignConfig::from_toml("tau = 1\n"), Err(ConfigError::Parse(_))));
}

#[test]
fn check_rejects_and_warns() {
    let bad = |text: &str| CampaignConfig::from_toml(text).unwrap().check();
    assert!(matches!(bad("lambda = 1.5"), Err(ConfigError::Invalid(_))));
    assert!(matches!(bad("p = 0.0"), Err(ConfigError::Invalid(_))));
    assert!(matches!(bad("T = 0.0"), Err(ConfigError::Invalid(_))));
    assert!(matches!(bad("pool_capacity = 0"), Err(ConfigError::Invalid(_))));
    assert!(matches!(bad("backends = [\"eager\"]"), Err(ConfigError::Invalid(_))));
    assert!(matches!(bad("backends = [\"eager\", \"tvm\"]"), Err(ConfigError::Invalid(_))));
    assert!(matches!(bad("initial_seeds = []"), Err(ConfigError::Invalid(_))));
    let w = bad("p = 0.9").unwrap();
    assert_eq!(w.len(), 1);
    assert!(w[0].contains("0.313"));
}

#[test]
fn seeds_resolve() {
    let reg = Registry::builtin();
    assert!(load_seed("zoo:lenet", &reg).is_ok());
    assert!(load_seed("zoo:vgg", &reg).is_err());
    assert!(load_seed("/nonexistent/model.json", &reg).is_err());
}

#[test]
fn coverage_curve_is_monotone() {
    let reg = Registry::builtin();
    let r = run_campaign(&short(1, 300), &reg, &RunOptions::default()).unwrap();
    assert_eq!(r.iterations, 300);
    assert_eq!(r.rows.len(), 301);
    for w in r.rows.windows(2) {
        assert!(w[1].timestamp >= w[0].timestamp);
        assert!(w[1].cov_input >= w[0].cov_input);
        assert!(w[1].cov_param >= w[0].cov_param);
        assert!(w[1].cov_sequence >= w[0].cov_sequence);
        assert!(w[1].behavior_paths >= w[0].behavior_paths);
    }
    assert!(r.pool_size <= 50);
    assert_eq!(r.selections.iter().sum::<u64>(), 300);
    assert!(r.bugs.is_empty(), "{:?}", r.bugs.records.keys());
    let last = r.final_row().unwrap();
    assert!(last.cov_sequence > r.rows[0].cov_sequence);
}

#[test]
fn same_seed_same_campaign() {
    let reg = Registry::builtin();
    let a = run_campaign(&short(4, 150), &reg, &RunOptions::default()).unwrap();
    let b = run_campaign(&short(4, 150), &reg, &RunOptions::default()).unwrap();
    assert_eq!(a.rows, b.rows);
    assert_eq!(a.stats, b.stats);
    let c = run_campaign(&short(5, 150), &reg, &RunOptions::default()).unwrap();
    assert_ne!(a.stats, c.stats);
}

#[test]
fn artifacts_are_written() {
    let reg = Registry::builtin();
    let dir = tempfile::tempdir().unwrap();
    let mut c = short(0, 400);
    c.backends = vec!["eager".into(), "faulty:relu_nan".into()];
    let r = fuzz_to_dir(&c, &reg, dir.path(), None).unwrap();
    let p = dir.path();
    assert_eq!(CampaignConfig::load(&p.join("config-snapshot.toml")).unwrap(), c);
    let csv = fs::read_to_string(p.join("coverage.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(CoverageRow::HEADER));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), r.rows.len());
    for (line, row) in rows.iter().zip(&r.rows) {
        assert_eq!(*line, row.to_csv());
        assert!(CoverageRow::parse(line).is_some());
    }
    assert!(p.join("models/seed-00.json").exists());
    let log = fs::read_to_string(p.join("campaign.log")).unwrap();
    assert!(log.contains("iter 1:"));
    assert!(log.lines().last().unwrap().starts_with("done: 400 iterations"));

    assert!(!r.bugs.is_empty());
    let report: Vec<BugRecord> = serde_json::from_str(&fs::read_to_string(p.join("bugs/report.json")).unwrap()).unwrap();
    assert_eq!(report.len(), r.bugs.len());
    for b in &report {
        assert!(p.join(b.model.as_ref().unwrap()).exists());
    }
    assert!(report.iter().any(|b| b.verdict == VerdictKind::Nan && b.responsible_kind.as_deref() == Some("ReLU")));
}

#[test]
fn stop_flag_and_first_bug() {
    let reg = Registry::builtin();
    let stop = Arc::new(AtomicBool::new(true));
    let r = run_campaign(
        &short(0, 100),
        &reg,
        &RunOptions {
            out_dir: None,
            stop: Some(stop),
        },
    )
    .unwrap();
    assert!(r.stopped_early);
    assert_eq!(r.iterations, 0);

    let mut c = short(0, 5_000);
    c.backends = vec!["eager".into(), "faulty:dense_zero_crash".into()];
    c.stop_on_first_bug = true;
    let r = run_campaign(&c, &reg, &RunOptions::default()).unwrap();
    assert_eq!(r.bugs.len(), 1);
    assert!(r.iterations < 5_000);
}

#[test]
fn random_selection_ignores_fitness() {
    let reg = Registry::builtin();
    let mut c = short(2, 800);
    c.selection = Selection::Random;
    let r = run_campaign(&c, &reg, &RunOptions::default()).unwrap();
    assert!(r.selections.iter().all(|n| *n > 60), "{:?}", r.selections);
}
