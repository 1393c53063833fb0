//! Synthetic subjects.
//!
//! Two families: MaxEnt agents that act on the soft-optimal policy of a known
//! θ* (recomputed every trial from the agent's own history), and threshold
//! agents whose pump probability is a logistic step around a target state.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureMatrix, FeatureOptions, HistoryBuilder, HistoryContext, N_FEATURES};
use crate::irl::{soft_backward, PolicyTable, ThetaWeights};
use crate::task::{simulate_trial, BartConfig};
use crate::trajectory::{Session, TrialRecord};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum AgentKind {
    MaxEnt { theta: ThetaWeights },
    Threshold { tau: f64, softness: f64 },
}

impl AgentKind {
    pub fn validate(&self, cfg: &BartConfig) -> Result<()> {
        match *self {
            AgentKind::MaxEnt { theta } => theta.check_finite(),
            AgentKind::Threshold { tau, softness } => {
                if !(softness > 0.0) || !softness.is_finite() {
                    return Err(Error::domain(format!("softness must be > 0, got {softness}")));
                }
                if !(1.0..=cfg.max_state as f64).contains(&tau) {
                    return Err(Error::domain(format!(
                        "tau must lie in [1, {}], got {tau}",
                        cfg.max_state
                    )));
                }
                Ok(())
            }
        }
    }
}

/// `threshold:<tau>,<softness>` or `maxent:<11 comma-separated reals>`.
impl FromStr for AgentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, args) = s
            .split_once(':')
            .ok_or_else(|| Error::domain(format!("agent spec {s:?} lacks ':'")))?;
        let nums = args
            .split(',')
            .map(|x| {
                x.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::domain(format!("bad number {x:?} in agent spec")))
            })
            .collect::<Result<Vec<_>>>()?;
        match name {
            "threshold" => match nums[..] {
                [tau, softness] => Ok(AgentKind::Threshold { tau, softness }),
                _ => Err(Error::domain("threshold agent takes <tau>,<softness>")),
            },
            "maxent" => {
                if nums.len() != N_FEATURES {
                    return Err(Error::domain(format!(
                        "maxent agent takes {N_FEATURES} weights, got {}",
                        nums.len()
                    )));
                }
                Ok(AgentKind::MaxEnt {
                    theta: ThetaWeights::from_slice(&nums)?,
                })
            }
            other => Err(Error::domain(format!("unknown agent kind {other:?}"))),
        }
    }
}

impl fmt::Display for AgentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AgentKind::Threshold { tau, softness } => write!(f, "threshold:{tau},{softness}"),
            AgentKind::MaxEnt { theta } => {
                let parts: Vec<String> = theta.0.iter().map(|v| v.to_string()).collect();
                write!(f, "maxent:{}", parts.join(","))
            }
        }
    }
}

/// A population of identical agents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentSpec {
    pub kind: AgentKind,
    pub n_subjects: usize,
    pub trials_per_subject: usize,
    pub seed: u64,
    /// Subject ids are `<prefix><index>`.
    #[serde(default = "default_prefix")]
    pub subject_prefix: String,
    /// Feature construction a MaxEnt agent plans with.
    #[serde(default)]
    pub feature_options: FeatureOptions,
}

fn default_prefix() -> String {
    "s".to_string()
}

impl AgentSpec {
    pub fn new(kind: AgentKind, n_subjects: usize, trials_per_subject: usize, seed: u64) -> Self {
        Self {
            kind,
            n_subjects,
            trials_per_subject,
            seed,
            subject_prefix: default_prefix(),
            feature_options: FeatureOptions::default(),
        }
    }

    pub fn with_prefix(mut self, prefix: &str) -> Self {
        self.subject_prefix = prefix.to_string();
        self
    }
}

fn logistic_pump(i: usize, tau: f64, softness: f64) -> f64 {
    let z = (i as f64 - tau) / softness;
    if z >= 0.0 {
        let e = (-z).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + z.exp())
    }
}

pub fn agent_policy(kind: &AgentKind, ctx: &HistoryContext, opts: FeatureOptions) -> Result<PolicyTable> {
    match *kind {
        AgentKind::MaxEnt { theta } => soft_backward(&theta, &FeatureMatrix::from_context(ctx, opts)),
        AgentKind::Threshold { tau, softness } => Ok(PolicyTable::from_pump_probs(
            (1..=ctx.max_state)
                .map(|i| logistic_pump(i, tau, softness))
                .collect(),
        )),
    }
}

/// One session per subject: `cfg.practice_trials` practice balloons followed
/// by `spec.trials_per_subject` formal ones.
pub fn generate_population(spec: &AgentSpec, cfg: &BartConfig) -> Result<Vec<Session>> {
    cfg.validate()?;
    spec.kind.validate(cfg)?;
    let session_cfg = BartConfig {
        formal_trials: spec.trials_per_subject,
        ..*cfg
    };
    session_cfg.validate()?;
    let subjects: Vec<usize> = (0..spec.n_subjects).collect();

    #[cfg(feature = "parallel")]
    let sessions = {
        use rayon::prelude::*;
        subjects
            .par_iter()
            .map(|&k| generate_subject(spec, &session_cfg, k))
            .collect()
    };
    #[cfg(not(feature = "parallel"))]
    let sessions = subjects
        .iter()
        .map(|&k| generate_subject(spec, &session_cfg, k))
        .collect();
    sessions
}

fn generate_subject(spec: &AgentSpec, cfg: &BartConfig, index: usize) -> Result<Session> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let subject_id = format!("{}{index:03}", spec.subject_prefix);
    let mut history = HistoryBuilder::new(cfg);
    let threshold_policy = match spec.kind {
        AgentKind::Threshold { .. } => Some(agent_policy(&spec.kind, &history.context(), spec.feature_options)?),
        AgentKind::MaxEnt { .. } => None,
    };
    let mut trials = Vec::with_capacity(cfg.total_trials());
    for trial_index in 0..cfg.total_trials() {
        let policy = match &threshold_policy {
            Some(p) => p.clone(),
            None => agent_policy(&spec.kind, &history.context(), spec.feature_options)?,
        };
        let sim = simulate_trial(&policy.pump_prob, &mut rng, cfg)?;
        let record = TrialRecord {
            subject_id: subject_id.clone(),
            trial_index,
            practice: trial_index < cfg.practice_trials,
            outcome: sim.outcome.kind,
            num_pumps: sim.outcome.num_pumps,
            breakpoint: Some(sim.breakpoint),
            reaction_times_ms: None,
        };
        history.push(&record);
        trials.push(record);
    }
    Ok(Session {
        subject_id,
        config: *cfg,
        trials,
    })
}
