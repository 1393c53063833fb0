//! Synthetic agents and the experiment harness end to end.

use std::collections::BTreeMap;

use bart_irl::agents::{generate_population, AgentKind, AgentSpec};
use bart_irl::experiment::{
    demonstrations, figure_data, from_csv, read_report, run_experiment, run_on_sessions, weight_report,
    BehavioralCsvRow, DataSource, ExperimentConfig, Grouping, Half, LldRow, WeightReport, ALL, RISK_AVERSE,
    RISK_PRONE,
};
use bart_irl::irl::log_likelihood;
use bart_irl::task::sample_breakpoint;
use bart_irl::trajectory::{all_formal, behavioral_stats, sessions_to_string, train_test_split, SplitScheme};
use bart_irl::{BartConfig, FeatureOptions, ThetaWeights, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn two_populations(seed: u64, n: usize, trials: usize) -> DataSource {
    DataSource::Synthetic {
        populations: vec![
            AgentSpec::new(AgentKind::Threshold { tau: 39.0, softness: 3.0 }, n, trials, seed).with_prefix("hi"),
            AgentSpec::new(AgentKind::Threshold { tau: 18.0, softness: 3.0 }, n, trials, seed + 1).with_prefix("lo"),
        ],
        config: BartConfig {
            formal_trials: trials,
            ..BartConfig::default()
        },
    }
}

#[test]
fn threshold_pumps_increase_with_tau() {
    let cfg = BartConfig {
        formal_trials: 10_000,
        ..BartConfig::default()
    };
    let means: Vec<f64> = (1..=12)
        .map(|k| {
            let kind = AgentKind::Threshold {
                tau: 10.0 * k as f64,
                softness: 2.0,
            };
            let s = generate_population(&AgentSpec::new(kind, 1, 10_000, k), &cfg).unwrap();
            behavioral_stats(&s).unwrap().mean_pumps
        })
        .collect();
    assert!(means.windows(2).all(|w| w[1] > w[0]), "{means:?}");
}

#[test]
fn sharp_threshold_at_64_earns_the_optimal_payoff() {
    let cfg = BartConfig {
        formal_trials: 100_000,
        ..BartConfig::default()
    };
    let kind = AgentKind::Threshold { tau: 64.5, softness: 1e-3 };
    let s = generate_population(&AgentSpec::new(kind, 1, 100_000, 8), &cfg).unwrap();
    let payoff = behavioral_stats(&s).unwrap().mean_payoff_per_trial;
    assert!((payoff - 320.0).abs() <= 3.0, "{payoff}");
}

#[test]
fn breakpoints_are_uniform() {
    let cfg = BartConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let n = 10_000;
    let mut counts = vec![0usize; cfg.max_state];
    for _ in 0..n {
        counts[sample_breakpoint(&mut rng, &cfg) - 1] += 1;
    }
    let expected = n as f64 / cfg.max_state as f64;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let p = 1.0 - ChiSquared::new((cfg.max_state - 1) as f64).unwrap().cdf(chi2);
    assert!(p > 0.001, "chi2 {chi2}, p {p}");
}

#[test]
fn maxent_agents_prefer_their_own_theta() {
    let cfg = BartConfig::default();
    for seed in [1, 2, 3] {
        let theta = ThetaWeights([0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, -0.1]);
        let spec = AgentSpec::new(AgentKind::MaxEnt { theta }, 50, 30, seed);
        let sessions = generate_population(&spec, &cfg).unwrap();
        let demos = demonstrations(&sessions, &all_formal(&sessions), FeatureOptions::default());
        let own = log_likelihood(&theta, &demos).unwrap();
        let zero = log_likelihood(&ThetaWeights::zero(), &demos).unwrap();
        assert!(own.action_only > zero.action_only);
        assert!(own.with_transitions > zero.with_transitions);
    }
}

#[test]
fn pooled_model_never_beats_matched_models() {
    for seed in [4, 5, 6] {
        let source = two_populations(seed, 30, 30);
        let sessions = source.load().unwrap();
        let report = run_on_sessions(&sessions, &ExperimentConfig::new(source)).unwrap();
        for g in [RISK_PRONE, RISK_AVERSE] {
            let pooled = report.lld(ALL, g, Half::Test).unwrap().action_only;
            let matched = report.lld(g, g, Half::Test).unwrap().action_only;
            assert!(pooled <= matched + 1e-6, "seed {seed} {g}: pooled {pooled} matched {matched}");
        }
    }
}

#[test]
fn step_feature_dominates_recovered_weights() {
    // compare magnitudes on comparable scales: normalized f11 = i / M carries
    // θ* = -0.2 · 128
    let cfg = BartConfig::default();
    for seed in [1, 2, 3] {
        let spec = AgentSpec::new(AgentKind::MaxEnt { theta: ThetaWeights::unit(10, -0.2) }, 300, 30, seed);
        let sessions = generate_population(&spec, &cfg).unwrap();
        let opts = FeatureOptions {
            normalize: true,
            ..FeatureOptions::default()
        };
        let mut exp = ExperimentConfig::new(DataSource::File {
            path: "unused".into(),
            strict: false,
        });
        exp.grouping = Grouping::Pooled;
        exp.features = opts;
        let report = run_on_sessions(&sessions, &exp).unwrap();
        assert_eq!(report.weights.ranking[0][0], 11, "seed {seed}: {:?}", report.weights.weights[0]);
        let w = report.weights.weights[0].0[10];
        assert!((w + 25.6).abs() < 2.5, "seed {seed}: {w}");
    }
}

#[test]
fn reports_are_deterministic_and_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::new(two_populations(9, 6, 10));
    cfg.output_dir = Some(dir.path().to_path_buf());
    let (a, sessions) = run_experiment(&cfg).unwrap();
    let (b, _) = run_experiment(&cfg).unwrap();
    assert_eq!(a, b);

    let back = read_report(&dir.path().join("report.json")).unwrap();
    assert_eq!(back, a);
    assert_eq!(back.config, cfg);

    let weights = WeightReport::from_csv(&std::fs::read_to_string(dir.path().join("weights.csv")).unwrap()).unwrap();
    assert_eq!(weights.weights, a.weights.weights);
    assert_eq!(weights.ranking, a.weights.ranking);
    let json: WeightReport =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("weights.json")).unwrap()).unwrap();
    assert_eq!(json, a.weights);
    let lld: Vec<LldRow> = from_csv(&std::fs::read_to_string(dir.path().join("lld.csv")).unwrap()).unwrap();
    assert_eq!(lld, a.lld);
    let behavioral: Vec<BehavioralCsvRow> =
        from_csv(&std::fs::read_to_string(dir.path().join("behavioral.csv")).unwrap()).unwrap();
    let expected: Vec<BehavioralCsvRow> = a.behavioral.iter().map(Into::into).collect();
    assert_eq!(behavioral, expected);

    for name in ["pump_histogram.csv", "payoff_vs_pumps.csv", "weight_bars.csv"] {
        assert!(dir.path().join("figure_data").join(name).exists());
    }
    let fig = figure_data(&a, &sessions);
    let formal: usize = sessions.iter().map(|s| s.formal_trials().count()).sum();
    assert_eq!(fig.pump_histogram.iter().map(|b| b.count).sum::<usize>(), formal);
    for p in &fig.payoff_vs_pumps {
        match p.outcome {
            bart_irl::OutcomeKind::Cash => assert_eq!(p.payoff, 10 * p.num_pumps as u64),
            bart_irl::OutcomeKind::Burst => assert_eq!(p.payoff, 0),
        }
    }
    for m in &a.models {
        assert!(m.train.converged || a.warnings.iter().any(|w| w.contains(&m.group)));
    }
}

#[test]
fn single_subject_pooled_report_has_one_row() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("one.jsonl");
    let spec = AgentSpec::new(AgentKind::Threshold { tau: 20.0, softness: 2.0 }, 1, 30, 3);
    let sessions = generate_population(&spec, &BartConfig::default()).unwrap();
    std::fs::write(&path, sessions_to_string(&sessions).unwrap()).unwrap();
    let mut cfg = ExperimentConfig::new(DataSource::File { path, strict: true });
    cfg.grouping = Grouping::Pooled;
    let (report, _) = run_experiment(&cfg).unwrap();
    assert_eq!(report.behavioral.len(), 1);
    assert_eq!(report.models.len(), 1);
    assert_eq!(report.median_pumps, None);
    assert!(report.lld.iter().all(|r| r.model == ALL && r.data == ALL));

    cfg.grouping = Grouping::Median;
    let err = run_experiment(&cfg).unwrap_err().to_string();
    assert!(err.contains("median split requires ≥ 2 subjects"), "{err}");
}

#[test]
fn empty_test_half_is_an_error() {
    let cfg = BartConfig {
        formal_trials: 1,
        practice_trials: 0,
        ..BartConfig::default()
    };
    let spec = AgentSpec::new(AgentKind::Threshold { tau: 20.0, softness: 2.0 }, 3, 1, 3);
    let sessions = generate_population(&spec, &cfg).unwrap();
    let split = train_test_split(&sessions, SplitScheme::Interleaved);
    assert!(split.test.is_empty());
    let mut exp = ExperimentConfig::new(DataSource::File {
        path: "unused".into(),
        strict: false,
    });
    exp.grouping = Grouping::Pooled;
    let err = run_on_sessions(&sessions, &exp).unwrap_err().to_string();
    assert!(err.contains("zero test trials"), "{err}");
}

#[test]
fn non_convergence_is_flagged_not_fatal() {
    let source = two_populations(12, 4, 10);
    let sessions = source.load().unwrap();
    let mut cfg = ExperimentConfig::new(source);
    cfg.train = TrainConfig {
        max_iters: 1,
        ..TrainConfig::default()
    };
    let report = run_on_sessions(&sessions, &cfg).unwrap();
    assert_eq!(report.warnings.len(), 3);
    assert!(report.models.iter().all(|m| !m.train.converged));
}

#[test]
fn per_subject_models_warn_about_data_size() {
    let source = two_populations(13, 2, 10);
    let sessions = source.load().unwrap();
    let mut cfg = ExperimentConfig::new(source);
    cfg.grouping = Grouping::Pooled;
    cfg.per_subject = true;
    cfg.train.l2_lambda = 0.1;
    let report = run_on_sessions(&sessions, &cfg).unwrap();
    assert!(report.warnings[0].contains("per-subject"));
    let models: BTreeMap<_, _> = report.models.iter().map(|m| (m.group.clone(), m)).collect();
    assert_eq!(models.len(), 1 + sessions.len());
    let identical = weight_report(&[("a".into(), ThetaWeights::unit(3, 1.0)), ("b".into(), ThetaWeights::unit(3, 1.0))]);
    assert!(identical.differences[0].diff.0.iter().all(|d| *d == 0.0));
}
