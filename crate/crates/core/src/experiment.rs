//! The pooled / median-split experiment protocol and its report bundle.
//!
//! Sessions are split per subject into train and test halves, one model is
//! trained per group on the pooled train trials of that group, and every
//! model is scored on every group's test half. Bundle layout:
//!
//! ```text
//! <outdir>/behavioral.csv
//! <outdir>/weights.csv
//! <outdir>/weights.json
//! <outdir>/lld.csv
//! <outdir>/report.json
//! <outdir>/figure_data/{pump_histogram,payoff_vs_pumps,weight_bars}.csv
//! ```

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::agents::{generate_population, AgentSpec};
use crate::error::{Error, Result};
use crate::features::{FeatureOptions, HistoryBuilder, FEATURE_NAMES, N_FEATURES};
use crate::irl::{self, Demonstration, FeatureSource, LogLikelihood, ThetaWeights, TrainConfig, TrainReport};
use crate::task::{BartConfig, OutcomeKind};
use crate::trajectory::{
    behavioral_stats, median_split, parse_sessions, train_test_split, BehavioralStats, ParseOptions,
    Session, SplitScheme, TrialRef,
};

pub const ALL: &str = "all";
pub const RISK_PRONE: &str = "risk_prone";
pub const RISK_AVERSE: &str = "risk_averse";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum DataSource {
    File {
        path: PathBuf,
        #[serde(default)]
        strict: bool,
    },
    /// Populations are concatenated; prefixes should keep subject ids unique.
    Synthetic {
        populations: Vec<AgentSpec>,
        config: BartConfig,
    },
}

impl DataSource {
    pub fn load(&self) -> Result<Vec<Session>> {
        match self {
            DataSource::File { path, strict } => {
                let file = fs::File::open(path)?;
                parse_sessions(BufReader::new(file), ParseOptions { strict: *strict })
            }
            DataSource::Synthetic { populations, config } => {
                let mut out = Vec::new();
                for spec in populations {
                    out.extend(generate_population(spec, config)?);
                }
                let ids: BTreeSet<&str> = out.iter().map(|s| s.subject_id.as_str()).collect();
                if ids.len() != out.len() {
                    return Err(Error::domain("synthetic populations produced duplicate subject ids"));
                }
                Ok(out)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Grouping {
    Pooled,
    Median,
    #[default]
    Both,
}

impl std::str::FromStr for Grouping {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pooled" => Ok(Grouping::Pooled),
            "median" => Ok(Grouping::Median),
            "both" => Ok(Grouping::Both),
            other => Err(Error::domain(format!("unknown grouping {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub source: DataSource,
    pub split: SplitScheme,
    pub train: TrainConfig,
    pub features: FeatureOptions,
    pub grouping: Grouping,
    /// Also fit one model per subject. Thirty trials per subject is thin.
    #[serde(default)]
    pub per_subject: bool,
    pub output_dir: Option<PathBuf>,
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn new(source: DataSource) -> Self {
        Self {
            source,
            split: SplitScheme::default(),
            train: TrainConfig::default(),
            features: FeatureOptions::default(),
            grouping: Grouping::default(),
            per_subject: false,
            output_dir: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub name: String,
    pub subjects: Vec<String>,
    pub n_train: usize,
    pub n_test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelReport {
    pub group: String,
    pub train: TrainReport,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Half {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LldRow {
    pub model: String,
    pub data: String,
    pub split: Half,
    pub n_trajectories: usize,
    pub n_decisions: usize,
    pub action_only: f64,
    pub with_transitions: f64,
    pub per_decision_action_only: f64,
}

impl LldRow {
    fn new(model: &str, data: &str, split: Half, ll: LogLikelihood) -> Self {
        Self {
            model: model.to_string(),
            data: data.to_string(),
            split,
            n_trajectories: ll.n_trajectories,
            n_decisions: ll.n_decisions,
            action_only: ll.action_only,
            with_transitions: ll.with_transitions,
            per_decision_action_only: ll.per_decision_action_only,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BehavioralRow {
    pub group: String,
    #[serde(flatten)]
    pub stats: BehavioralStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightDifference {
    pub a: String,
    pub b: String,
    /// `weights[a] - weights[b]`
    pub diff: ThetaWeights,
}

/// Per-feature weights for several models, side by side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightReport {
    pub features: Vec<String>,
    pub groups: Vec<String>,
    pub weights: Vec<ThetaWeights>,
    /// Per group, 1-based feature numbers ordered by decreasing |weight|.
    pub ranking: Vec<Vec<usize>>,
    pub differences: Vec<WeightDifference>,
}

pub fn weight_report(models: &[(String, ThetaWeights)]) -> WeightReport {
    let ranking = models
        .iter()
        .map(|(_, t)| {
            let mut idx: Vec<usize> = (0..N_FEATURES).collect();
            idx.sort_by(|&a, &b| t.0[b].abs().total_cmp(&t.0[a].abs()).then(a.cmp(&b)));
            idx.into_iter().map(|k| k + 1).collect()
        })
        .collect();
    let mut differences = Vec::new();
    for (x, (a, ta)) in models.iter().enumerate() {
        for (b, tb) in &models[x + 1..] {
            differences.push(WeightDifference {
                a: a.clone(),
                b: b.clone(),
                diff: ThetaWeights(std::array::from_fn(|k| ta.0[k] - tb.0[k])),
            });
        }
    }
    WeightReport {
        features: FEATURE_NAMES.iter().map(|s| s.to_string()).collect(),
        groups: models.iter().map(|(g, _)| g.clone()).collect(),
        weights: models.iter().map(|(_, t)| *t).collect(),
        ranking,
        differences,
    }
}

impl WeightReport {
    /// Columns: `feature,name,<group>...,rank_<group>...`
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["feature".to_string(), "name".to_string()];
        header.extend(self.groups.iter().cloned());
        header.extend(self.groups.iter().map(|g| format!("rank_{g}")));
        w.write_record(&header)?;
        for k in 0..N_FEATURES {
            let mut rec = vec![format!("f{}", k + 1), self.features[k].clone()];
            rec.extend(self.weights.iter().map(|t| t.0[k].to_string()));
            rec.extend(self.ranking.iter().map(|r| {
                (r.iter().position(|&f| f == k + 1).expect("ranking is a permutation") + 1).to_string()
            }));
            w.write_record(&rec)?;
        }
        Ok(String::from_utf8(w.into_inner().map_err(|e| e.into_error())?).expect("csv is UTF-8"))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let header = r.headers()?.clone();
        let n_groups = (header.len().saturating_sub(2)) / 2;
        let groups: Vec<String> = header.iter().skip(2).take(n_groups).map(String::from).collect();
        let mut features = Vec::new();
        let mut weights = vec![[0.0; N_FEATURES]; n_groups];
        for (k, rec) in r.records().enumerate() {
            let rec = rec?;
            if k >= N_FEATURES {
                return Err(Error::domain("weights.csv has more than 11 feature rows"));
            }
            features.push(rec[1].to_string());
            for g in 0..n_groups {
                weights[g][k] = rec[2 + g]
                    .parse()
                    .map_err(|_| Error::domain(format!("bad weight {:?}", &rec[2 + g])))?;
            }
        }
        let models: Vec<(String, ThetaWeights)> = groups.into_iter().zip(weights.into_iter().map(ThetaWeights)).collect();
        let mut report = weight_report(&models);
        report.features = features;
        Ok(report)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub n_subjects: usize,
    pub median_pumps: Option<f64>,
    pub groups: Vec<GroupSummary>,
    pub behavioral: Vec<BehavioralRow>,
    pub models: Vec<ModelReport>,
    pub weights: WeightReport,
    pub lld: Vec<LldRow>,
    pub warnings: Vec<String>,
}

impl ExperimentReport {
    pub fn model(&self, group: &str) -> Option<&TrainReport> {
        self.models.iter().find(|m| m.group == group).map(|m| &m.train)
    }

    pub fn lld(&self, model: &str, data: &str, split: Half) -> Option<&LldRow> {
        self.lld
            .iter()
            .find(|r| r.model == model && r.data == data && r.split == split)
    }
}

/// Demonstrations for the given trials, each carrying the full session
/// history that preceded it.
pub fn demonstrations(sessions: &[Session], refs: &[TrialRef], opts: FeatureOptions) -> Vec<Demonstration> {
    let mut by_session: HashMap<usize, Vec<usize>> = HashMap::new();
    for r in refs {
        by_session.entry(r.session).or_default().push(r.trial_index);
    }
    let mut contexts: HashMap<TrialRef, Demonstration> = HashMap::new();
    for (&si, wanted) in &by_session {
        let session = &sessions[si];
        let wanted: BTreeSet<usize> = wanted.iter().copied().collect();
        let mut builder = HistoryBuilder::new(&session.config);
        for t in &session.trials {
            if wanted.contains(&t.trial_index) {
                contexts.insert(
                    TrialRef { session: si, trial_index: t.trial_index },
                    Demonstration {
                        source: FeatureSource::History {
                            context: builder.context(),
                            options: opts,
                        },
                        outcome: t.outcome,
                        num_pumps: t.num_pumps,
                    },
                );
            }
            builder.push(t);
        }
    }
    refs.iter()
        .map(|r| contexts.get(r).cloned().expect("every ref names an existing trial"))
        .collect()
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<(ExperimentReport, Vec<Session>)> {
    let sessions = cfg.source.load()?;
    let report = run_on_sessions(&sessions, cfg)?;
    if let Some(dir) = &cfg.output_dir {
        write_bundle(&report, &sessions, dir)?;
    }
    Ok((report, sessions))
}

pub fn run_on_sessions(sessions: &[Session], cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    if sessions.is_empty() {
        return Err(Error::domain("no sessions to analyse"));
    }
    let mut warnings = Vec::new();
    let all_idx: Vec<usize> = (0..sessions.len()).collect();
    let mut groups: Vec<(String, Vec<usize>)> = Vec::new();
    let mut median_pumps = None;

    if matches!(cfg.grouping, Grouping::Pooled | Grouping::Both) {
        groups.push((ALL.to_string(), all_idx.clone()));
    }
    if matches!(cfg.grouping, Grouping::Median | Grouping::Both) {
        let split = median_split(sessions)?;
        median_pumps = Some(split.median);
        for (name, members) in [(RISK_PRONE, &split.risk_prone), (RISK_AVERSE, &split.risk_averse)] {
            let idx = all_idx
                .iter()
                .copied()
                .filter(|&i| members.contains(&sessions[i].subject_id))
                .collect();
            groups.push((name.to_string(), idx));
        }
    }
    if cfg.per_subject {
        warnings.push(format!(
            "per-subject models are fit on about {} trials each; expect high variance",
            sessions[0].formal_trials().count().div_ceil(2)
        ));
        for (i, s) in sessions.iter().enumerate() {
            groups.push((format!("subject:{}", s.subject_id), vec![i]));
        }
    }

    let split = train_test_split(sessions, cfg.split);
    let mut summaries = Vec::new();
    let mut behavioral = Vec::new();
    let mut train_sets = Vec::new();
    let mut test_sets = Vec::new();
    for (name, members) in &groups {
        let member_set: BTreeSet<usize> = members.iter().copied().collect();
        let pick = |refs: &[TrialRef]| -> Vec<TrialRef> {
            refs.iter().copied().filter(|r| member_set.contains(&r.session)).collect()
        };
        let (train_refs, test_refs) = (pick(&split.train), pick(&split.test));
        if train_refs.is_empty() {
            return Err(Error::domain(format!("group {name} has zero training trials")));
        }
        if test_refs.is_empty() {
            return Err(Error::domain(format!("group {name} has zero test trials")));
        }
        let group_sessions: Vec<Session> = members.iter().map(|&i| sessions[i].clone()).collect();
        behavioral.push(BehavioralRow {
            group: name.clone(),
            stats: behavioral_stats(&group_sessions)?,
        });
        summaries.push(GroupSummary {
            name: name.clone(),
            subjects: group_sessions.iter().map(|s| s.subject_id.clone()).collect(),
            n_train: train_refs.len(),
            n_test: test_refs.len(),
        });
        train_sets.push(demonstrations(sessions, &train_refs, cfg.features));
        test_sets.push(demonstrations(sessions, &test_refs, cfg.features));
    }

    let mut models = Vec::new();
    for ((name, _), train) in groups.iter().zip(&train_sets) {
        let report = irl::train(train, &cfg.train)?;
        if !report.converged {
            warnings.push(format!(
                "model {name} did not converge: ‖grad‖∞ = {:.3e} after {} iterations",
                report.final_grad_inf_norm, report.iterations
            ));
        }
        models.push(ModelReport {
            group: name.clone(),
            train: report,
        });
    }

    let mut lld = Vec::new();
    for (m, model) in models.iter().enumerate() {
        lld.push(LldRow::new(&model.group, &groups[m].0, Half::Train, model.train.train_lld));
        for (g, (data, _)) in groups.iter().enumerate() {
            // per-subject models are only scored on their own subject
            if (model.group.starts_with("subject:") || data.starts_with("subject:")) && m != g {
                continue;
            }
            let ll = irl::log_likelihood(&model.train.theta, &test_sets[g])?;
            lld.push(LldRow::new(&model.group, data, Half::Test, ll));
        }
    }

    let weights = weight_report(
        &models
            .iter()
            .map(|m| (m.group.clone(), m.train.theta))
            .collect::<Vec<_>>(),
    );
    Ok(ExperimentReport {
        config: cfg.clone(),
        n_subjects: sessions.len(),
        median_pumps,
        groups: summaries,
        behavioral,
        models,
        weights,
        lld,
        warnings,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub num_pumps: usize,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PayoffPoint {
    pub subject_id: String,
    pub trial_index: usize,
    pub outcome: OutcomeKind,
    pub num_pumps: usize,
    pub payoff: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightBar {
    pub group: String,
    pub feature: String,
    pub name: String,
    pub weight: f64,
}

/// Plot-ready tables: pump histogram, payoff against pumps, weight bars.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FigureData {
    pub pump_histogram: Vec<HistogramBin>,
    pub payoff_vs_pumps: Vec<PayoffPoint>,
    pub weight_bars: Vec<WeightBar>,
}

pub fn figure_data(report: &ExperimentReport, sessions: &[Session]) -> FigureData {
    let max_state = sessions.iter().map(|s| s.config.max_state).max().unwrap_or(0);
    let mut counts = vec![0usize; max_state + 1];
    let mut payoff_vs_pumps = Vec::new();
    for s in sessions {
        for t in s.formal_trials() {
            counts[t.num_pumps] += 1;
            payoff_vs_pumps.push(PayoffPoint {
                subject_id: s.subject_id.clone(),
                trial_index: t.trial_index,
                outcome: t.outcome,
                num_pumps: t.num_pumps,
                payoff: t.payoff(&s.config),
            });
        }
    }
    let weight_bars = report
        .weights
        .groups
        .iter()
        .zip(&report.weights.weights)
        .flat_map(|(g, t)| {
            (0..N_FEATURES).map(move |k| WeightBar {
                group: g.clone(),
                feature: format!("f{}", k + 1),
                name: FEATURE_NAMES[k].to_string(),
                weight: t.0[k],
            })
        })
        .collect();
    FigureData {
        pump_histogram: counts
            .into_iter()
            .enumerate()
            .map(|(num_pumps, count)| HistogramBin { num_pumps, count })
            .collect(),
        payoff_vs_pumps,
        weight_bars,
    }
}

pub fn to_csv<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    Ok(String::from_utf8(w.into_inner().map_err(|e| e.into_error())?).expect("csv is UTF-8"))
}

pub fn from_csv<T: serde::de::DeserializeOwned>(text: &str) -> Result<Vec<T>> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}

/// Flat row for behavioral.csv.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BehavioralCsvRow {
    pub group: String,
    pub n_subjects: usize,
    pub n_trials: usize,
    pub mean_pumps: f64,
    pub cash_rate: f64,
    pub mean_payoff_per_trial: f64,
    pub mean_payoff_per_subject: f64,
    pub mean_rt_per_trial: Option<f64>,
    pub mean_rt_per_pump: Option<f64>,
}

impl From<&BehavioralRow> for BehavioralCsvRow {
    fn from(r: &BehavioralRow) -> Self {
        let s = &r.stats;
        Self {
            group: r.group.clone(),
            n_subjects: s.n_subjects,
            n_trials: s.n_trials,
            mean_pumps: s.mean_pumps,
            cash_rate: s.cash_rate,
            mean_payoff_per_trial: s.mean_payoff_per_trial,
            mean_payoff_per_subject: s.mean_payoff_per_subject,
            mean_rt_per_trial: s.mean_rt_per_trial,
            mean_rt_per_pump: s.mean_rt_per_pump,
        }
    }
}

/// Writes `bytes` to a sibling temp file, then renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::domain(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_tables(report: &ExperimentReport, sessions: &[Session], dir: &Path) -> Result<()> {
    let behavioral: Vec<BehavioralCsvRow> = report.behavioral.iter().map(Into::into).collect();
    write_atomic(&dir.join("behavioral.csv"), to_csv(&behavioral)?.as_bytes())?;
    write_atomic(&dir.join("weights.csv"), report.weights.to_csv()?.as_bytes())?;
    write_atomic(
        &dir.join("weights.json"),
        serde_json::to_string_pretty(&report.weights)?.as_bytes(),
    )?;
    write_atomic(&dir.join("lld.csv"), to_csv(&report.lld)?.as_bytes())?;
    let fig = figure_data(report, sessions);
    let fig_dir = dir.join("figure_data");
    write_atomic(&fig_dir.join("pump_histogram.csv"), to_csv(&fig.pump_histogram)?.as_bytes())?;
    write_atomic(&fig_dir.join("payoff_vs_pumps.csv"), to_csv(&fig.payoff_vs_pumps)?.as_bytes())?;
    write_atomic(&fig_dir.join("weight_bars.csv"), to_csv(&fig.weight_bars)?.as_bytes())?;
    Ok(())
}

pub fn write_bundle(report: &ExperimentReport, sessions: &[Session], dir: &Path) -> Result<()> {
    write_tables(report, sessions, dir)?;
    write_atomic(
        &dir.join("report.json"),
        serde_json::to_string_pretty(report)?.as_bytes(),
    )?;
    Ok(())
}

pub fn read_report(path: &Path) -> Result<ExperimentReport> {
    Ok(serde_json::from_reader(BufReader::new(fs::File::open(path)?))?)
}
