use surveyopt::allocation::PrecisionTargets;
use surveyopt::hb::{Prior, SamplerSettings};
use surveyopt::mc::*;
use surveyopt::popgen::{synthesize, PopulationConfig, SyntheticPopulation, TruthRegistry};
use surveyopt::sampling::{Allocation, Provenance};
use surveyopt::Variable;

fn population() -> (SyntheticPopulation, TruthRegistry) {
    let mut cfg = PopulationConfig::desk();
    cfg.total_size = 12_000;
    cfg.strata = 12;
    cfg.domains = 3;
    synthesize(&cfg).unwrap()
}

fn config(pop: &SyntheticPopulation, fraction: f64, alpha: f64, replications: usize) -> MCConfig {
    let sizes = pop.stratum_sizes().iter().map(|&n| ((n as f64 * fraction).round() as usize).max(2)).collect();
    MCConfig {
        replications,
        allocation: Allocation::new(sizes, Provenance::Custom),
        alpha,
        variables: Variable::ALL.to_vec(),
        priors: [Prior { nu: 5.0, s2: 0.05 }, Prior { nu: 5.0, s2: 0.05 }, Prior { nu: 5.0, s2: 5.0 }],
        settings: SamplerSettings { burn_in: 300, draws: 600, ..SamplerSettings::default() },
        apply_deff: true,
        rhat_limit: 1.05,
        seed: 99,
        threads: 0,
    }
}

fn targets(pop: &SyntheticPopulation) -> PrecisionTargets {
    PrecisionTargets::uniform(3, pop.n_domains(), 0.05, 0.2)
}

#[test]
fn single_replication_record_is_complete() {
    let (pop, truth) = population();
    let t = targets(&pop);
    let ctx = MCContext { pop: &pop, truth: &truth, targets: &t };
    let cfg = config(&pop, 0.3, 0.5, 1);
    let rec = run_replication(0, &cfg, ctx).unwrap();
    assert_eq!(rec.variables.len(), 3);
    for v in &rec.variables {
        assert_eq!(v.covered.len(), pop.n_domains() + 1);
        assert_eq!(v.are.len(), pop.n_domains() + 1);
        assert!(v.are.iter().all(|a| *a >= 0.0));
        assert!(v.failure.is_none() || !v.usable);
    }
    assert_eq!(run_replication(0, &cfg, ctx).unwrap(), rec);
    assert_ne!(run_replication(1, &cfg, ctx).unwrap(), rec);
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let (pop, truth) = population();
    let t = targets(&pop);
    let ctx = MCContext { pop: &pop, truth: &truth, targets: &t };
    let mut cfg = config(&pop, 0.2, 0.3, 6);
    cfg.threads = 1;
    let one = run_mc(&cfg, ctx).unwrap();
    cfg.threads = 4;
    let four = run_mc(&cfg, ctx).unwrap();
    assert_eq!(one, four);
    assert_eq!(aggregate(&one).unwrap(), aggregate(&four).unwrap());
    assert_eq!(one.iter().map(|r| r.replication).collect::<Vec<_>>(), (0..6).collect::<Vec<_>>());
}

/// A census master with no reduction pins every binary posterior to the
/// population value and leaves the continuous one within a rounding error.
#[test]
fn census_allocation_recovers_truth() {
    let (pop, truth) = population();
    let t = targets(&pop);
    let ctx = MCContext { pop: &pop, truth: &truth, targets: &t };
    let cfg = config(&pop, 1.0, 0.0, 2);
    let records = run_mc(&cfg, ctx).unwrap();
    for r in &records {
        for v in &r.variables {
            assert!(v.usable, "{}: {:?}", v.variable, v.failure);
            assert!(v.covered.iter().all(|&c| c), "{}", v.variable);
            assert!(v.are.iter().all(|a| *a < 1e-6), "{} {:?}", v.variable, v.are);
        }
    }
    let agg = aggregate(&records).unwrap();
    assert!(agg.variables.iter().all(|v| v.coverage_mean == 1.0));
}

#[test]
fn aggregates_recompute_exactly_from_raw_export() {
    let (pop, truth) = population();
    let t = targets(&pop);
    let ctx = MCContext { pop: &pop, truth: &truth, targets: &t };
    let records = run_mc(&config(&pop, 0.2, 0.4, 4), ctx).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("raw.csv");
    write_raw_csv(&records, &raw).unwrap();
    let back = read_raw_csv(&raw).unwrap();
    assert_eq!(aggregate(&back).unwrap(), aggregate(&records).unwrap());

    let summary = dir.path().join("summary.csv");
    write_summary_csv(&aggregate(&records).unwrap(), &summary).unwrap();
    let mut reader = csv::Reader::from_path(&summary).unwrap();
    assert_eq!(reader.headers().unwrap().iter().collect::<Vec<_>>(), SUMMARY_CSV_HEADER.to_vec());
    assert_eq!(reader.records().count(), 3);
    assert!(read_raw_csv(&dir.path().join("absent.csv")).is_err());
}

#[test]
fn one_failing_domain_fails_the_replication() {
    let (pop, truth) = population();
    let mut t = PrecisionTargets::uniform(3, pop.n_domains(), 0.99, 0.99);
    t.domain[1] = vec![1e-9; 3];
    let ctx = MCContext { pop: &pop, truth: &truth, targets: &t };
    let records = run_mc(&config(&pop, 0.2, 0.0, 2), ctx).unwrap();
    for r in &records {
        for v in &r.variables {
            assert!(!v.cv_pass);
            assert_eq!(v.cv.iter().filter(|&&c| c > 1e-9).count(), v.cv.len());
        }
    }
    assert!(aggregate(&records).unwrap().variables.iter().all(|v| v.cv_pass_rate == 0.0));
}

#[test]
fn invalid_configuration_is_rejected() {
    let (pop, truth) = population();
    let t = targets(&pop);
    let ctx = MCContext { pop: &pop, truth: &truth, targets: &t };
    let mut cfg = config(&pop, 0.2, 0.0, 0);
    assert!(run_mc(&cfg, ctx).is_err());
    cfg.replications = 1;
    cfg.alpha = 1.0;
    assert!(run_mc(&cfg, ctx).is_err());
}
