//! History-dependent state features.
//!
//! Each decision state `i` of a trial gets an 11-dimensional vector built
//! from the trials that came before it in the same session:
//!
//! | idx | feature |
//! |-----|---------|
//! | f1  | number of earlier trials that reached state `i` |
//! | f2, f3 | previous trial burst / cashed at `i` |
//! | f4, f5 | second previous trial burst / cashed at `i` |
//! | f6, f7 | third previous trial burst / cashed at `i` |
//! | f8  | `i` is the (rounded) average burst state |
//! | f9  | `i` is the (rounded) average cash state |
//! | f10 | `i` is the (rounded) average end state |
//! | f11 | `i` itself, the step within the current trial |
//!
//! A trial that cashed after `p` pumps ended at state `p + 1`; one that burst
//! on pump `p` ended at state `p`. Practice trials count as history.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::task::{BartConfig, OutcomeKind};
use crate::trajectory::{Session, TrialRecord};

pub const N_FEATURES: usize = 11;

pub const FEATURE_NAMES: [&str; N_FEATURES] = [
    "visit_count",
    "prev1_burst",
    "prev1_stop",
    "prev2_burst",
    "prev2_stop",
    "prev3_burst",
    "prev3_stop",
    "avg_burst_state",
    "avg_stop_state",
    "avg_end_state",
    "step",
];

/// How the end-of-trial indicators (f2..f10) compare a remembered state `j`
/// with the current state `i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureSemantics {
    /// `i == j`
    #[default]
    Exact,
    /// `i >= j`: the remembered trial had ended at or before `i`.
    Threshold,
}

impl std::str::FromStr for FeatureSemantics {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(FeatureSemantics::Exact),
            "threshold" => Ok(FeatureSemantics::Threshold),
            other => Err(Error::domain(format!("unknown feature semantics {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FeatureOptions {
    pub semantics: FeatureSemantics,
    /// Divide f1 by the number of prior trials and f11 by `max_state`.
    pub normalize: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EndEvent {
    pub kind: OutcomeKind,
    pub end_state: usize,
}

/// What a subject has experienced before a given trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryContext {
    pub max_state: usize,
    pub n_prior: usize,
    /// `visit_count[i - 1]`: earlier trials that reached state `i`.
    pub visit_count: Vec<usize>,
    /// Most recent first.
    pub prev_end: [Option<EndEvent>; 3],
    pub avg_burst_state: Option<f64>,
    pub avg_stop_state: Option<f64>,
    pub avg_end_state: Option<f64>,
}

/// Accumulates history one trial at a time.
#[derive(Debug, Clone)]
pub struct HistoryBuilder {
    max_state: usize,
    n_prior: usize,
    // visits[i - 1] = number of prior trials with end_state >= i, built lazily
    // from end_hist
    end_hist: Vec<usize>,
    prev_end: [Option<EndEvent>; 3],
    burst_sum: usize,
    burst_n: usize,
    stop_sum: usize,
    stop_n: usize,
}

impl HistoryBuilder {
    pub fn new(cfg: &BartConfig) -> Self {
        Self {
            max_state: cfg.max_state,
            n_prior: 0,
            end_hist: vec![0; cfg.max_state + 1],
            prev_end: [None; 3],
            burst_sum: 0,
            burst_n: 0,
            stop_sum: 0,
            stop_n: 0,
        }
    }

    pub fn push(&mut self, trial: &TrialRecord) {
        let end = trial.end_state().min(self.max_state);
        self.end_hist[end] += 1;
        self.n_prior += 1;
        self.prev_end = [
            Some(EndEvent {
                kind: trial.outcome,
                end_state: end,
            }),
            self.prev_end[0],
            self.prev_end[1],
        ];
        match trial.outcome {
            OutcomeKind::Burst => {
                self.burst_sum += end;
                self.burst_n += 1;
            }
            OutcomeKind::Cash => {
                self.stop_sum += end;
                self.stop_n += 1;
            }
        }
    }

    pub fn context(&self) -> HistoryContext {
        let mut visit_count = vec![0; self.max_state];
        let mut reached = 0;
        for i in (1..=self.max_state).rev() {
            reached += self.end_hist[i];
            visit_count[i - 1] = reached;
        }
        let mean = |sum: usize, n: usize| (n > 0).then(|| sum as f64 / n as f64);
        HistoryContext {
            max_state: self.max_state,
            n_prior: self.n_prior,
            visit_count,
            prev_end: self.prev_end,
            avg_burst_state: mean(self.burst_sum, self.burst_n),
            avg_stop_state: mean(self.stop_sum, self.stop_n),
            avg_end_state: mean(self.burst_sum + self.stop_sum, self.burst_n + self.stop_n),
        }
    }
}

/// History seen by trial `trial_index` of `session`.
pub fn build_history(session: &Session, trial_index: usize) -> Result<HistoryContext> {
    if trial_index >= session.trials.len() {
        return Err(Error::domain(format!(
            "trial_index {trial_index} out of range for {} trials",
            session.trials.len()
        )));
    }
    let mut builder = HistoryBuilder::new(&session.config);
    for t in &session.trials[..trial_index] {
        builder.push(t);
    }
    Ok(builder.context())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector(pub [f64; N_FEATURES]);

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

pub fn feature_vector(ctx: &HistoryContext, i: usize, opts: FeatureOptions) -> FeatureVector {
    let hit = |j: usize| match opts.semantics {
        FeatureSemantics::Exact => i == j,
        FeatureSemantics::Threshold => i >= j,
    };
    let indicator = |b: bool| if b { 1.0 } else { 0.0 };
    let mut f = [0.0; N_FEATURES];

    f[0] = ctx.visit_count.get(i.wrapping_sub(1)).copied().unwrap_or(0) as f64;
    for (k, prev) in ctx.prev_end.iter().enumerate() {
        if let Some(ev) = prev {
            let slot = 1 + 2 * k + usize::from(ev.kind == OutcomeKind::Cash);
            f[slot] = indicator(hit(ev.end_state));
        }
    }
    let avgs = [ctx.avg_burst_state, ctx.avg_stop_state, ctx.avg_end_state];
    for (k, avg) in avgs.iter().enumerate() {
        f[7 + k] = indicator(avg.is_some_and(|a| hit(round_half_up(a))));
    }
    f[10] = i as f64;

    if opts.normalize {
        f[0] = if ctx.n_prior > 0 {
            f[0] / ctx.n_prior as f64
        } else {
            0.0
        };
        f[10] /= ctx.max_state as f64;
    }
    FeatureVector(f)
}

/// Features for every decision state of one trial; row `i - 1` is state `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    pub rows: Vec<[f64; N_FEATURES]>,
}

impl FeatureMatrix {
    pub fn from_context(ctx: &HistoryContext, opts: FeatureOptions) -> Self {
        Self {
            rows: (1..=ctx.max_state)
                .map(|i| feature_vector(ctx, i, opts).0)
                .collect(),
        }
    }

    pub fn max_state(&self) -> usize {
        self.rows.len()
    }

    pub fn row(&self, i: usize) -> &[f64; N_FEATURES] {
        &self.rows[i - 1]
    }

    /// Column `k` (0-based feature index) across states.
    pub fn column(&self, k: usize) -> Vec<f64> {
        self.rows.iter().map(|r| r[k]).collect()
    }

    /// CSV with header `f1..f11`, one row per state.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record((1..=N_FEATURES).map(|k| format!("f{k}")))?;
        for row in &self.rows {
            w.write_record(row.iter().map(|v| v.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn trial_feature_matrix(
    session: &Session,
    trial_index: usize,
    opts: FeatureOptions,
) -> Result<FeatureMatrix> {
    Ok(FeatureMatrix::from_context(
        &build_history(session, trial_index)?,
        opts,
    ))
}

/// Feature matrices for every trial of a session, built in one pass.
pub fn session_feature_matrices(session: &Session, opts: FeatureOptions) -> Vec<FeatureMatrix> {
    let mut builder = HistoryBuilder::new(&session.config);
    session
        .trials
        .iter()
        .map(|t| {
            let m = FeatureMatrix::from_context(&builder.context(), opts);
            builder.push(t);
            m
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trial(idx: usize, outcome: OutcomeKind, pumps: usize) -> TrialRecord {
        TrialRecord {
            subject_id: "s".into(),
            trial_index: idx,
            practice: false,
            outcome,
            num_pumps: pumps,
            breakpoint: None,
            reaction_times_ms: None,
        }
    }

    fn session(trials: Vec<(OutcomeKind, usize)>) -> Session {
        Session {
            subject_id: "s".into(),
            config: BartConfig::default(),
            trials: trials
                .into_iter()
                .enumerate()
                .map(|(k, (o, p))| trial(k, o, p))
                .collect(),
        }
    }

    use OutcomeKind::{Burst, Cash};

    #[test]
    fn empty_history() {
        let s = session(vec![(Cash, 3)]);
        let ctx = build_history(&s, 0).unwrap();
        assert_eq!(ctx.n_prior, 0);
        assert!(ctx.visit_count.iter().all(|&v| v == 0));
        assert_eq!(ctx.prev_end, [None; 3]);
        assert_eq!(ctx.avg_end_state, None);
        let f = feature_vector(&ctx, 5, FeatureOptions::default());
        assert_eq!(f.0, [0., 0., 0., 0., 0., 0., 0., 0., 0., 0., 5.]);
        assert!(build_history(&s, 1).is_err());
    }

    #[test]
    fn burst_history_visits() {
        let s = session(vec![(Burst, 10), (Cash, 0)]);
        let ctx = build_history(&s, 1).unwrap();
        assert!((1..=10).all(|i| ctx.visit_count[i - 1] == 1));
        assert!((11..=128).all(|i| ctx.visit_count[i - 1] == 0));
        let opts = FeatureOptions::default();
        assert_eq!(feature_vector(&ctx, 10, opts).0[1], 1.0);
        assert_eq!(feature_vector(&ctx, 9, opts).0[1], 0.0);
        assert_eq!(feature_vector(&ctx, 7, opts).0[0], 1.0);
    }

    #[test]
    fn averages_and_rounding() {
        let s = session(vec![(Burst, 10), (Cash, 20), (Cash, 1)]);
        let ctx = build_history(&s, 2).unwrap();
        assert_eq!(ctx.avg_end_state, Some(15.5));
        assert_eq!(ctx.avg_burst_state, Some(10.0));
        assert_eq!(ctx.avg_stop_state, Some(21.0));
        let opts = FeatureOptions::default();
        assert_eq!(feature_vector(&ctx, 16, opts).0[9], 1.0);
        assert_eq!(feature_vector(&ctx, 15, opts).0[9], 0.0);
        assert_eq!(feature_vector(&ctx, 10, opts).0[7], 1.0);
        assert_eq!(feature_vector(&ctx, 21, opts).0[8], 1.0);
        // previous trial cashed at 21, the one before burst at 10
        assert_eq!(feature_vector(&ctx, 21, opts).0[2], 1.0);
        assert_eq!(feature_vector(&ctx, 10, opts).0[3], 1.0);
    }

    #[test]
    fn threshold_semantics() {
        let s = session(vec![(Burst, 10), (Cash, 0)]);
        let ctx = build_history(&s, 1).unwrap();
        let opts = FeatureOptions {
            semantics: FeatureSemantics::Threshold,
            normalize: false,
        };
        assert_eq!(feature_vector(&ctx, 9, opts).0[1], 0.0);
        assert_eq!(feature_vector(&ctx, 10, opts).0[1], 1.0);
        assert_eq!(feature_vector(&ctx, 50, opts).0[1], 1.0);
    }

    #[test]
    fn normalization() {
        let s = session(vec![(Burst, 10), (Cash, 2), (Cash, 0)]);
        let ctx = build_history(&s, 2).unwrap();
        let opts = FeatureOptions {
            semantics: FeatureSemantics::Exact,
            normalize: true,
        };
        let f = feature_vector(&ctx, 2, opts).0;
        assert_eq!(f[0], 1.0);
        assert_eq!(f[10], 2.0 / 128.0);
        assert_eq!(feature_vector(&ctx, 5, opts).0[0], 0.5);
        let empty = build_history(&s, 0).unwrap();
        assert_eq!(feature_vector(&empty, 1, opts).0[0], 0.0);
    }

    #[test]
    fn matrix_columns() {
        let s = session(vec![(Burst, 10), (Cash, 4)]);
        let opts = FeatureOptions::default();
        let first = trial_feature_matrix(&s, 0, opts).unwrap();
        assert!(first.column(10).iter().copied().eq((1..=128).map(|i| i as f64)));
        for k in 0..10 {
            assert!(first.column(k).iter().all(|&v| v == 0.0));
        }
        let second = trial_feature_matrix(&s, 1, opts).unwrap();
        let c1 = second.column(0);
        assert!(c1[..10].iter().all(|&v| v == 1.0));
        assert!(c1[10..].iter().all(|&v| v == 0.0));
        assert_eq!(session_feature_matrices(&s, opts), vec![first, second]);
    }

    #[test]
    fn csv_export() {
        let s = session(vec![(Cash, 1)]);
        let m = trial_feature_matrix(&s, 0, FeatureOptions::default()).unwrap();
        let mut buf = Vec::new();
        m.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("f1,f2,f3,f4,f5,f6,f7,f8,f9,f10,f11"));
        assert_eq!(lines.next(), Some("0,0,0,0,0,0,0,0,0,0,1"));
        assert_eq!(text.lines().count(), 129);
    }
}
