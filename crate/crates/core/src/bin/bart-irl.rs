//! `bart-irl`: simulate, inspect and fit BART trajectory data.
//!
//! Exit codes: 0 success, 1 validation or domain error, 2 usage error.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufReader, Write as _};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use bart_irl::agents::{generate_population, AgentKind, AgentSpec};
use bart_irl::experiment::{
    demonstrations, read_report, run_experiment, write_atomic, write_tables, DataSource, ExperimentConfig,
    Grouping, WeightReport, ALL, RISK_AVERSE, RISK_PRONE,
};
use bart_irl::irl::{log_likelihood, Optimizer};
use bart_irl::trajectory::{
    all_formal, behavioral_stats, median_split, parse_sessions, sessions_to_string, train_test_split, ParseOptions,
    Session, SplitScheme, TrialRef,
};
use bart_irl::{BartConfig, Error, FeatureOptions, FeatureSemantics, Result, ThetaWeights, TrainConfig};

#[derive(Parser)]
#[command(name = "bart-irl", version, about = "Maximum-entropy IRL for the Balloon Analogue Risk Task")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic sessions from an agent
    Simulate(SimulateArgs),
    /// Print behavioral statistics of a session file
    Stats(DataArgs),
    /// Print the train/test assignment of every formal trial as CSV
    Split(SplitArgs),
    /// Run the pooled / group-split experiment and write a report bundle
    Train(TrainArgs),
    /// Score a session file under a fixed θ
    Eval(EvalArgs),
    /// Summarize a report bundle, optionally rewriting its tables
    Report(ReportArgs),
    /// Check a session file against every data invariant
    Validate(DataArgs),
}

#[derive(Args)]
struct DataArgs {
    /// JSONL session file
    #[arg(long)]
    data: PathBuf,
    /// Reject unknown keys instead of warning
    #[arg(long)]
    strict: bool,
}

#[derive(Args)]
struct SimulateArgs {
    /// "threshold:<tau>,<softness>" or "maxent:<11 comma-separated weights>"
    #[arg(long, allow_hyphen_values = true)]
    agent: AgentKind,
    #[arg(long, default_value_t = 1)]
    subjects: usize,
    /// Formal trials per subject
    #[arg(long, default_value_t = 30)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Subject id prefix
    #[arg(long, default_value = "s")]
    prefix: String,
    #[arg(long, default_value_t = 128)]
    max_state: usize,
    #[command(flatten)]
    features: FeatureArgs,
    /// Output JSONL file
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FeatureArgs {
    /// Divide f1 by the number of prior trials and f11 by max_state
    #[arg(long)]
    normalize_features: bool,
    /// How the previous-trial features match a state
    #[arg(long, default_value = "exact", value_parser = ["exact", "threshold"])]
    feature_semantics: String,
}

impl FeatureArgs {
    fn options(&self) -> Result<FeatureOptions> {
        Ok(FeatureOptions {
            semantics: self.feature_semantics.parse::<FeatureSemantics>()?,
            normalize: self.normalize_features,
        })
    }
}

#[derive(Args)]
struct SplitArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value = "interleaved")]
    split: SplitScheme,
    /// Write the CSV here instead of stdout
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value = "interleaved")]
    split: SplitScheme,
    #[arg(long, default_value = "both", value_parser = ["pooled", "median", "both"])]
    group: String,
    #[arg(long, default_value = "newton", value_parser = ["newton", "gradient-ascent"])]
    optimizer: String,
    /// Initial step size for gradient ascent
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    /// Stop when ‖gradient‖∞ falls to this
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[arg(long, default_value_t = 5000)]
    max_iters: usize,
    /// L2 penalty λ on θ (objective minus λ/2·‖θ‖²)
    #[arg(long, default_value_t = 0.0)]
    l2: f64,
    #[command(flatten)]
    features: FeatureArgs,
    /// Also fit one model per subject
    #[arg(long)]
    per_subject: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Report bundle directory
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    /// JSON file holding θ, labeled or as a bare array, or a weights.json from train
    #[arg(long)]
    theta: PathBuf,
    /// Which model to take from a weights.json
    #[arg(long, default_value = "all")]
    model: String,
    /// Score only the test half of this split; all formal trials otherwise
    #[arg(long)]
    split: Option<SplitScheme>,
    /// Rank by the trajectory log-likelihood instead of the action-only one
    #[arg(long)]
    include_transitions: bool,
    #[command(flatten)]
    features: FeatureArgs,
}

#[derive(Args)]
struct ReportArgs {
    /// report.json from a train run
    #[arg(long)]
    input: PathBuf,
    /// Session file used for the run; needed with --out
    #[arg(long, requires = "out")]
    data: Option<PathBuf>,
    /// Rewrite the CSV tables and figure data into this directory
    #[arg(long, requires = "data")]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    match run(cli.command) {
        Ok(text) => {
            // a closed pipe (`| head`) is not an error
            match std::io::stdout().lock().write_all(text.as_bytes()) {
                Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => {
                    eprintln!("error: {e}");
                    ExitCode::from(1)
                }
                _ => ExitCode::SUCCESS,
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("BART_IRL_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::domain(format!("BART_IRL_THREADS must be a positive integer, got {raw:?}")))?;
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::domain(e.to_string()))?;
    #[cfg(not(feature = "parallel"))]
    let _ = n;
    Ok(())
}

/// Runs one subcommand and returns what it prints to stdout.
fn run(command: Command) -> Result<String> {
    match command {
        Command::Simulate(a) => simulate(a),
        Command::Stats(a) => {
            let sessions = load(&a)?;
            json_text(&behavioral_stats(&sessions)?)
        }
        Command::Split(a) => split(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Report(a) => report(a),
        Command::Validate(a) => {
            let sessions = load(&a)?;
            let trials: usize = sessions.iter().map(|s| s.trials.len()).sum();
            Ok(format!("ok: {} sessions, {trials} trials\n", sessions.len()))
        }
    }
}

fn load(a: &DataArgs) -> Result<Vec<Session>> {
    let file = fs::File::open(&a.data)
        .map_err(|e| Error::domain(format!("cannot open {}: {e}", a.data.display())))?;
    parse_sessions(BufReader::new(file), ParseOptions { strict: a.strict })
}

fn json_text<T: serde::Serialize>(value: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(value)? + "\n")
}

fn simulate(a: SimulateArgs) -> Result<String> {
    let config = BartConfig {
        formal_trials: a.trials,
        ..BartConfig::with_max_state(a.max_state)
    };
    let mut spec = AgentSpec::new(a.agent, a.subjects, a.trials, a.seed).with_prefix(&a.prefix);
    spec.feature_options = a.features.options()?;
    let sessions = generate_population(&spec, &config)?;
    write_atomic(&a.out, sessions_to_string(&sessions)?.as_bytes())?;
    json_text(&behavioral_stats(&sessions)?)
}

fn split(a: SplitArgs) -> Result<String> {
    let sessions = load(&a.data)?;
    let s = train_test_split(&sessions, a.split);
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["subject_id", "trial_index", "half"])?;
    for (half, refs) in [("train", &s.train), ("test", &s.test)] {
        for r in refs {
            let sess = &sessions[r.session];
            w.write_record([sess.subject_id.as_str(), &r.trial_index.to_string(), half])?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::domain(e.to_string()))?;
    match a.out {
        Some(path) => write_atomic(&path, &bytes).map(|()| String::new()),
        None => Ok(String::from_utf8_lossy(&bytes).into_owned()),
    }
}

fn train(a: TrainArgs) -> Result<String> {
    let mut cfg = ExperimentConfig::new(DataSource::File {
        path: a.data.data.clone(),
        strict: a.data.strict,
    });
    cfg.split = a.split;
    cfg.grouping = a.group.parse::<Grouping>()?;
    cfg.features = a.features.options()?;
    cfg.per_subject = a.per_subject;
    cfg.output_dir = Some(a.out.clone());
    cfg.seed = a.seed;
    cfg.train = TrainConfig {
        optimizer: a.optimizer.parse::<Optimizer>()?,
        learning_rate: a.lr,
        max_iters: a.max_iters,
        grad_tol_inf: a.tol,
        l2_lambda: a.l2,
        seed: a.seed,
    };
    let (report, _) = run_experiment(&cfg)?;
    let mut out = String::new();
    for m in &report.models {
        let _ = writeln!(
            out,
            "model {}: converged={} iterations={} ‖grad‖∞={:.3e} train LLD={:.6}",
            m.group, m.train.converged, m.train.iterations, m.train.final_grad_inf_norm, m.train.train_lld.action_only
        );
    }
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    let _ = writeln!(out, "report written to {}", a.out.display());
    Ok(out)
}

fn eval(a: EvalArgs) -> Result<String> {
    let sessions = load(&a.data)?;
    let text = fs::read_to_string(&a.theta)
        .map_err(|e| Error::domain(format!("cannot read {}: {e}", a.theta.display())))?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    let theta = if value.get("groups").is_some() {
        let report: WeightReport = serde_json::from_value(value)?;
        let k = report
            .groups
            .iter()
            .position(|g| *g == a.model)
            .ok_or_else(|| Error::domain(format!("no model {:?} in {}", a.model, a.theta.display())))?;
        report.weights[k]
    } else {
        ThetaWeights::from_json(&value)?
    };
    let opts = a.features.options()?;
    let refs = match a.split {
        Some(scheme) => train_test_split(&sessions, scheme).test,
        None => all_formal(&sessions),
    };
    let mut groups: Vec<(&str, Vec<TrialRef>)> = vec![(ALL, refs.clone())];
    if sessions.len() >= 2 {
        let g = median_split(&sessions)?;
        for (name, ids) in [(RISK_PRONE, &g.risk_prone), (RISK_AVERSE, &g.risk_averse)] {
            let subset: Vec<TrialRef> =
                refs.iter().filter(|r| ids.contains(&sessions[r.session].subject_id)).cloned().collect();
            groups.push((name, subset));
        }
    }
    let mut out =
        String::from("group,n_trajectories,n_decisions,action_only,with_transitions,per_decision_action_only,value\n");
    for (name, subset) in groups {
        if subset.is_empty() {
            continue;
        }
        let ll = log_likelihood(&theta, &demonstrations(&sessions, &subset, opts))?;
        let _ = writeln!(
            out,
            "{name},{},{},{},{},{},{}",
            ll.n_trajectories,
            ll.n_decisions,
            ll.action_only,
            ll.with_transitions,
            ll.per_decision_action_only,
            ll.value(a.include_transitions)
        );
    }
    Ok(out)
}

fn report(a: ReportArgs) -> Result<String> {
    let report = read_report(&a.input)?;
    let mut out = format!("subjects: {}  median pumps: {:?}\n", report.n_subjects, report.median_pumps);
    out += &report.weights.to_csv()?;
    out += "model,data,split,action_only,with_transitions\n";
    for r in &report.lld {
        let _ = writeln!(out, "{},{},{:?},{},{}", r.model, r.data, r.split, r.action_only, r.with_transitions);
    }
    for w in &report.warnings {
        let _ = writeln!(out, "warning: {w}");
    }
    if let (Some(data), Some(dir)) = (a.data, a.out) {
        let sessions = load(&DataArgs { data, strict: false })?;
        write_tables(&report, &sessions, Path::new(&dir))?;
        write_atomic(&dir.join("report.json"), serde_json::to_string_pretty(&report)?.as_bytes())?;
    }
    Ok(out)
}
