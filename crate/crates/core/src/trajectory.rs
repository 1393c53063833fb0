//! Trial records, JSONL I/O, behavioral statistics, and data splits.
//!
//! A file is one JSON object per line. The first line may be a config
//! sidecar `{"config": {...}}`; without it the default task applies to every
//! session. Trials are grouped by `subject_id` in order of first appearance
//! and sorted by `trial_index`.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::task::{trial_payoff, BartConfig, OutcomeKind};

const TRIAL_KEYS: [&str; 7] = [
    "subject_id",
    "trial_index",
    "practice",
    "outcome",
    "num_pumps",
    "breakpoint",
    "reaction_times_ms",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub subject_id: String,
    pub trial_index: usize,
    pub practice: bool,
    pub outcome: OutcomeKind,
    pub num_pumps: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub breakpoint: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reaction_times_ms: Option<Vec<f64>>,
}

impl TrialRecord {
    pub fn payoff(&self, cfg: &BartConfig) -> u64 {
        trial_payoff(self.outcome, self.num_pumps, cfg)
    }

    /// Decision states visited, `1..=end_state`.
    pub fn end_state(&self) -> usize {
        crate::task::end_state(self.outcome, self.num_pumps)
    }

    pub fn validate(&self, cfg: &BartConfig, line: Option<usize>) -> Result<()> {
        if self.num_pumps > cfg.max_state {
            return Err(Error::invalid(
                line,
                "num_pumps",
                format!("must be ≤ max_state ({})", cfg.max_state),
            ));
        }
        if self.outcome == OutcomeKind::Burst && self.num_pumps < 1 {
            return Err(Error::invalid(line, "num_pumps", "Burst requires num_pumps ≥ 1"));
        }
        if self.outcome == OutcomeKind::Cash && self.num_pumps == cfg.max_state {
            return Err(Error::invalid(
                line,
                "num_pumps",
                "Cash after max_state pumps is impossible (the last pump always bursts)",
            ));
        }
        if let Some(bp) = self.breakpoint {
            if bp < 1 || bp > cfg.max_state {
                return Err(Error::invalid(
                    line,
                    "breakpoint",
                    format!("must lie in 1..={}", cfg.max_state),
                ));
            }
            match self.outcome {
                OutcomeKind::Burst if bp != self.num_pumps => {
                    return Err(Error::invalid(
                        line,
                        "breakpoint",
                        "Burst requires breakpoint = num_pumps",
                    ))
                }
                OutcomeKind::Cash if bp <= self.num_pumps => {
                    return Err(Error::invalid(
                        line,
                        "breakpoint",
                        "Cash requires breakpoint > num_pumps",
                    ))
                }
                _ => {}
            }
        }
        if let Some(rts) = &self.reaction_times_ms {
            let expected = self.num_pumps + usize::from(self.outcome == OutcomeKind::Cash);
            if rts.len() != expected {
                return Err(Error::invalid(
                    line,
                    "reaction_times_ms",
                    format!("expected {expected} entries (one per key press), found {}", rts.len()),
                ));
            }
            if rts.iter().any(|t| !t.is_finite() || *t < 0.0) {
                return Err(Error::invalid(
                    line,
                    "reaction_times_ms",
                    "entries must be finite and non-negative",
                ));
            }
        }
        Ok(())
    }
}

/// One subject's ordered trials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub subject_id: String,
    pub config: BartConfig,
    pub trials: Vec<TrialRecord>,
}

impl Session {
    /// Non-practice trials in session order.
    pub fn formal_trials(&self) -> impl Iterator<Item = &TrialRecord> {
        self.trials.iter().filter(|t| !t.practice)
    }

    pub fn mean_pumps(&self) -> Option<f64> {
        let (n, sum) = self
            .formal_trials()
            .fold((0usize, 0usize), |(n, s), t| (n + 1, s + t.num_pumps));
        (n > 0).then(|| sum as f64 / n as f64)
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        for (k, t) in self.trials.iter().enumerate() {
            if t.subject_id != self.subject_id {
                return Err(Error::invalid(
                    None,
                    "subject_id",
                    format!("trial {k} belongs to {:?}, not {:?}", t.subject_id, self.subject_id),
                ));
            }
            if t.trial_index != k {
                return Err(Error::invalid(
                    None,
                    "trial_index",
                    format!("subject {:?}: indices must be contiguous from 0", self.subject_id),
                ));
            }
            t.validate(&self.config, None)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ParseOptions {
    /// Reject unknown keys instead of warning about them.
    pub strict: bool,
}

#[derive(Deserialize)]
struct ConfigLine {
    config: BartConfig,
}

/// Reads sessions from JSONL. Line numbers in errors are 1-based.
pub fn parse_sessions<R: BufRead>(reader: R, opts: ParseOptions) -> Result<Vec<Session>> {
    let mut config: Option<BartConfig> = None;
    let mut seen_record = false;
    let mut records: Vec<(usize, TrialRecord)> = Vec::new();

    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        let Value::Object(obj) = value else {
            return Err(Error::Parse {
                line: lineno,
                message: "expected a JSON object".into(),
            });
        };

        if obj.contains_key("config") {
            if seen_record || config.is_some() {
                return Err(Error::invalid(
                    Some(lineno),
                    "config",
                    "config sidecar must be the first line",
                ));
            }
            let parsed: ConfigLine =
                serde_json::from_value(Value::Object(obj)).map_err(|e| Error::Parse {
                    line: lineno,
                    message: e.to_string(),
                })?;
            parsed.config.validate().map_err(|e| match e {
                Error::Validation { field, rule, .. } => Error::Validation {
                    line: Some(lineno),
                    field,
                    rule,
                },
                other => other,
            })?;
            config = Some(parsed.config);
            continue;
        }

        seen_record = true;
        check_keys(&obj, lineno, opts)?;
        let record: TrialRecord =
            serde_json::from_value(Value::Object(obj)).map_err(|e| Error::Parse {
                line: lineno,
                message: e.to_string(),
            })?;
        records.push((lineno, record));
    }

    let config = config.unwrap_or_default();
    let mut order: Vec<String> = Vec::new();
    let mut grouped: HashMap<String, Vec<(usize, TrialRecord)>> = HashMap::new();
    for (lineno, record) in records {
        record.validate(&config, Some(lineno))?;
        let entry = grouped.entry(record.subject_id.clone()).or_insert_with(|| {
            order.push(record.subject_id.clone());
            Vec::new()
        });
        entry.push((lineno, record));
    }

    order
        .into_iter()
        .map(|subject_id| {
            let mut trials = grouped.remove(&subject_id).unwrap_or_default();
            trials.sort_by_key(|(_, t)| t.trial_index);
            for pair in trials.windows(2) {
                if pair[0].1.trial_index == pair[1].1.trial_index {
                    let line = pair[0].0.max(pair[1].0);
                    return Err(Error::invalid(
                        Some(line),
                        "trial_index",
                        format!(
                            "duplicate (subject_id, trial_index) = ({subject_id:?}, {})",
                            pair[1].1.trial_index
                        ),
                    ));
                }
            }
            for (k, (line, t)) in trials.iter().enumerate() {
                if t.trial_index != k {
                    return Err(Error::invalid(
                        Some(*line),
                        "trial_index",
                        format!("subject {subject_id:?}: expected trial_index {k}, found {}", t.trial_index),
                    ));
                }
            }
            Ok(Session {
                subject_id,
                config,
                trials: trials.into_iter().map(|(_, t)| t).collect(),
            })
        })
        .collect()
}

fn check_keys(obj: &Map<String, Value>, lineno: usize, opts: ParseOptions) -> Result<()> {
    for key in obj.keys() {
        if !TRIAL_KEYS.contains(&key.as_str()) {
            if opts.strict {
                return Err(Error::invalid(Some(lineno), key, "unknown key"));
            }
            log::warn!("line {lineno}: ignoring unknown key {key:?}");
        }
    }
    Ok(())
}

pub fn parse_sessions_str(text: &str, opts: ParseOptions) -> Result<Vec<Session>> {
    parse_sessions(text.as_bytes(), opts)
}

/// Writes the config sidecar followed by every trial. All sessions must
/// share one config.
pub fn write_sessions<W: Write>(sessions: &[Session], mut out: W) -> Result<()> {
    let config = sessions.first().map(|s| s.config).unwrap_or_default();
    if sessions.iter().any(|s| s.config != config) {
        return Err(Error::domain("sessions in one file must share a config"));
    }
    serde_json::to_writer(&mut out, &serde_json::json!({ "config": config }))?;
    out.write_all(b"\n")?;
    for session in sessions {
        for trial in &session.trials {
            serde_json::to_writer(&mut out, trial)?;
            out.write_all(b"\n")?;
        }
    }
    Ok(())
}

pub fn sessions_to_string(sessions: &[Session]) -> Result<String> {
    let mut buf = Vec::new();
    write_sessions(sessions, &mut buf)?;
    Ok(String::from_utf8(buf).expect("serde_json writes UTF-8"))
}

/// Summary statistics over non-practice trials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BehavioralStats {
    pub n_subjects: usize,
    pub n_trials: usize,
    pub mean_pumps: f64,
    pub cash_rate: f64,
    /// Mean points banked per trial.
    pub mean_payoff_per_trial: f64,
    /// Mean over subjects of their total points for the session.
    pub mean_payoff_per_subject: f64,
    /// Mean summed reaction time per trial, seconds.
    pub mean_rt_per_trial: Option<f64>,
    /// Mean reaction time of pump presses, seconds.
    pub mean_rt_per_pump: Option<f64>,
}

pub fn behavioral_stats(sessions: &[Session]) -> Result<BehavioralStats> {
    let mut n_subjects = 0usize;
    let mut n_trials = 0usize;
    let mut pumps = 0usize;
    let mut cashes = 0usize;
    let mut payoff = 0u64;
    let mut rt_trial_sum = 0.0;
    let mut rt_trials = 0usize;
    let mut rt_pump_sum = 0.0;
    let mut rt_pumps = 0usize;

    for session in sessions {
        let mut any = false;
        for t in session.formal_trials() {
            any = true;
            n_trials += 1;
            pumps += t.num_pumps;
            cashes += usize::from(t.outcome == OutcomeKind::Cash);
            payoff += t.payoff(&session.config);
            if let Some(rts) = &t.reaction_times_ms {
                rt_trial_sum += rts.iter().sum::<f64>() / 1000.0;
                rt_trials += 1;
                rt_pump_sum += rts[..t.num_pumps].iter().sum::<f64>() / 1000.0;
                rt_pumps += t.num_pumps;
            }
        }
        n_subjects += usize::from(any);
    }
    if n_trials == 0 {
        return Err(Error::domain("behavioral statistics need at least one non-practice trial"));
    }
    let n = n_trials as f64;
    Ok(BehavioralStats {
        n_subjects,
        n_trials,
        mean_pumps: pumps as f64 / n,
        cash_rate: cashes as f64 / n,
        mean_payoff_per_trial: payoff as f64 / n,
        mean_payoff_per_subject: payoff as f64 / n_subjects as f64,
        mean_rt_per_trial: (rt_trials > 0).then(|| rt_trial_sum / rt_trials as f64),
        mean_rt_per_pump: (rt_pumps > 0).then(|| rt_pump_sum / rt_pumps as f64),
    })
}

/// Subjects partitioned by mean pumps around the across-subject median.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSplit {
    pub median: f64,
    pub risk_prone: BTreeSet<String>,
    pub risk_averse: BTreeSet<String>,
}

/// Subjects strictly above the median of per-subject mean pumps are
/// risk-prone; the rest, including ties at the median, are risk-averse.
pub fn median_split(sessions: &[Session]) -> Result<GroupSplit> {
    let means: Vec<(&str, f64)> = sessions
        .iter()
        .filter_map(|s| s.mean_pumps().map(|m| (s.subject_id.as_str(), m)))
        .collect();
    if means.len() < 2 {
        return Err(Error::domain("median split requires ≥ 2 subjects"));
    }
    let mut sorted: Vec<f64> = means.iter().map(|(_, m)| *m).collect();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    };
    let (prone, averse): (Vec<_>, Vec<_>) = means.iter().partition(|(_, m)| *m > median);
    Ok(GroupSplit {
        median,
        risk_prone: prone.into_iter().map(|(s, _)| s.to_string()).collect(),
        risk_averse: averse.into_iter().map(|(s, _)| s.to_string()).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitScheme {
    /// Even `trial_index` trains, odd tests.
    #[default]
    Interleaved,
    /// The first ⌈n/2⌉ non-practice trials train.
    FirstHalf,
}

impl fmt::Display for SplitScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitScheme::Interleaved => "interleaved",
            SplitScheme::FirstHalf => "first-half",
        })
    }
}

impl FromStr for SplitScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "interleaved" => Ok(SplitScheme::Interleaved),
            "first-half" => Ok(SplitScheme::FirstHalf),
            other => Err(Error::domain(format!("unknown split scheme {other:?}"))),
        }
    }
}

/// A trial located by its session's position in the input slice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TrialRef {
    pub session: usize,
    pub trial_index: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialSplit {
    pub train: Vec<TrialRef>,
    pub test: Vec<TrialRef>,
}

/// Splits each subject's non-practice trials in half. Practice trials land
/// in neither half; features still see the whole session history.
pub fn train_test_split(sessions: &[Session], scheme: SplitScheme) -> TrialSplit {
    let mut split = TrialSplit::default();
    for (si, session) in sessions.iter().enumerate() {
        let formal: Vec<&TrialRecord> = session.formal_trials().collect();
        let n_train = formal.len().div_ceil(2);
        for (k, t) in formal.iter().enumerate() {
            let r = TrialRef {
                session: si,
                trial_index: t.trial_index,
            };
            let to_train = match scheme {
                SplitScheme::Interleaved => t.trial_index % 2 == 0,
                SplitScheme::FirstHalf => k < n_train,
            };
            if to_train {
                split.train.push(r);
            } else {
                split.test.push(r);
            }
        }
    }
    split
}

/// Every non-practice trial.
pub fn all_formal(sessions: &[Session]) -> Vec<TrialRef> {
    sessions
        .iter()
        .enumerate()
        .flat_map(|(si, s)| {
            s.formal_trials().map(move |t| TrialRef {
                session: si,
                trial_index: t.trial_index,
            })
        })
        .collect()
}
