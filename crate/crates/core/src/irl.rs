//! Maximum-entropy IRL on the per-trial balloon MDP.
//!
//! Every trial is its own finite-horizon MDP over decision states
//! `1..=max_state`, with state reward `r(i) = θ·f(i)` taken from that trial's
//! feature matrix. Cash and burst are absorbing with zero reward. The model
//! puts probability `exp(Σ r) · Π T / Z` on each of the `2M` possible
//! trajectories, where `Π T` is the product of the true burst/survive
//! probabilities. The soft backward pass
//!
//! ```text
//! Q_stop(i) = 0
//! Q_pump(i) = log( h(i) + (1 - h(i)) · exp V(i+1) )      h(i) = 1/(M+1-i)
//! V(i)      = r(i) + logsumexp(Q_stop(i), Q_pump(i))
//! ```
//!
//! gives `log Z = V(1)`, the model's action conditionals
//! `P(Pump|i) = exp(Q_pump - logsumexp(..))`, and its transition conditionals
//! `P(burst | Pump at i) = h(i) / exp Q_pump(i)`. With random bursts the
//! latter differ from `h(i)`: the distribution tilts outcomes as well as
//! actions. Propagating both gives the exact state visitation `D(i)`, so
//! `f̃ − Σ D f` is the exact gradient of the mean trajectory log-likelihood
//! and minus the covariance of the trajectory feature sums is its Hessian.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureMatrix, FeatureOptions, HistoryContext, FEATURE_NAMES, N_FEATURES};
use crate::task::{hazard, OutcomeKind};

pub type FeatureSum = [f64; N_FEATURES];
type Square = [[f64; N_FEATURES]; N_FEATURES];

/// Reward weights, one per feature.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ThetaWeights(pub [f64; N_FEATURES]);

#[derive(Serialize, Deserialize)]
struct LabeledTheta {
    features: Vec<String>,
    theta: Vec<f64>,
}

impl ThetaWeights {
    pub fn zero() -> Self {
        Self::default()
    }

    /// A weight vector that is zero except for `value` on feature `index`
    /// (0-based).
    pub fn unit(index: usize, value: f64) -> Self {
        let mut t = [0.0; N_FEATURES];
        t[index] = value;
        Self(t)
    }

    pub fn from_slice(values: &[f64]) -> Result<Self> {
        let arr: [f64; N_FEATURES] = values.try_into().map_err(|_| {
            Error::domain(format!(
                "theta must have {N_FEATURES} entries, found {}",
                values.len()
            ))
        })?;
        let theta = Self(arr);
        theta.check_finite()?;
        Ok(theta)
    }

    pub fn check_finite(&self) -> Result<()> {
        if self.0.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::domain(format!("theta must be finite, got {:?}", self.0)))
        }
    }

    #[inline]
    pub fn reward(&self, row: &[f64; N_FEATURES]) -> f64 {
        self.0.iter().zip(row).map(|(a, b)| a * b).sum()
    }

    pub fn inf_norm(&self) -> f64 {
        inf_norm(&self.0)
    }

    /// `{"features": [...names], "theta": [...11 values]}`
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(LabeledTheta {
            features: FEATURE_NAMES.iter().map(|s| s.to_string()).collect(),
            theta: self.0.to_vec(),
        })
        .expect("plain numbers serialize")
    }

    /// Accepts the labeled form written by [`ThetaWeights::to_json`] or a
    /// bare array of 11 numbers.
    pub fn from_json(value: &serde_json::Value) -> Result<Self> {
        if let Ok(values) = serde_json::from_value::<Vec<f64>>(value.clone()) {
            return Self::from_slice(&values);
        }
        let labeled: LabeledTheta = serde_json::from_value(value.clone())?;
        if labeled.features.len() != labeled.theta.len() {
            return Err(Error::domain("theta labels and values differ in length"));
        }
        if labeled.features.iter().zip(FEATURE_NAMES).any(|(a, b)| a != b) {
            return Err(Error::domain(format!(
                "theta labels must be {FEATURE_NAMES:?}"
            )));
        }
        Self::from_slice(&labeled.theta)
    }
}

impl Serialize for ThetaWeights {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.0.serialize(s)
    }
}

impl<'de> Deserialize<'de> for ThetaWeights {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        <[f64; N_FEATURES]>::deserialize(d).map(ThetaWeights)
    }
}

pub(crate) fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

#[inline]
fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Action and transition conditionals for one trial context. Index `i - 1`
/// is state `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyTable {
    pub pump_prob: Vec<f64>,
    pub log_pump: Vec<f64>,
    pub log_stop: Vec<f64>,
    /// `log P(burst | Pump at i)`.
    pub log_burst: Vec<f64>,
    /// `log P(reach i+1 | Pump at i)`; `-inf` at `max_state`.
    pub log_survive: Vec<f64>,
    /// Soft value `V(1)`, the log partition function of the trial. NaN for
    /// tables not produced by the backward pass.
    pub log_partition: f64,
}

impl PolicyTable {
    pub fn max_state(&self) -> usize {
        self.pump_prob.len()
    }

    pub fn stop_prob(&self, i: usize) -> f64 {
        1.0 - self.pump_prob[i - 1]
    }

    pub fn burst_prob(&self, i: usize) -> f64 {
        self.log_burst[i - 1].exp()
    }

    /// Build a table straight from pump probabilities, with the true burst
    /// hazards (used for scripted and threshold agents).
    pub fn from_pump_probs(pump_prob: Vec<f64>) -> Self {
        let m = pump_prob.len();
        let log_pump = pump_prob.iter().map(|p| p.ln()).collect();
        let log_stop = pump_prob.iter().map(|p| (-p).ln_1p()).collect();
        let log_burst = (1..=m).map(|i| hazard(i, m).ln()).collect();
        let log_survive = (1..=m).map(|i| true_log_survive(i, m)).collect();
        Self {
            pump_prob,
            log_pump,
            log_stop,
            log_burst,
            log_survive,
            log_partition: f64::NAN,
        }
    }

    /// The same action probabilities acting under the true burst hazards.
    /// This is how an agent following the policy actually behaves.
    pub fn under_true_dynamics(&self) -> Self {
        Self {
            log_partition: self.log_partition,
            ..Self::from_pump_probs(self.pump_prob.clone())
        }
    }

    /// Log-probability of one trajectory's actions, optionally with the
    /// table's transition terms.
    pub fn trajectory_log_prob(
        &self,
        kind: OutcomeKind,
        num_pumps: usize,
        include_transitions: bool,
    ) -> f64 {
        let mut lp: f64 = self.log_pump[..num_pumps].iter().sum();
        if kind == OutcomeKind::Cash {
            lp += self.log_stop[num_pumps];
        }
        if include_transitions {
            let survived = match kind {
                OutcomeKind::Cash => num_pumps,
                OutcomeKind::Burst => num_pumps - 1,
            };
            lp += self.log_survive[..survived].iter().sum::<f64>();
            if kind == OutcomeKind::Burst {
                lp += self.log_burst[num_pumps - 1];
            }
        }
        lp
    }
}

#[inline]
fn true_log_survive(i: usize, m: usize) -> f64 {
    // 1 - h(i) = (M - i) / (M + 1 - i)
    if i >= m {
        f64::NEG_INFINITY
    } else {
        ((m - i) as f64 / (m + 1 - i) as f64).ln()
    }
}

/// Log-probability of a trajectory's burst/survive outcomes under the true
/// hazards.
pub fn transition_log_prob(kind: OutcomeKind, num_pumps: usize, max_state: usize) -> f64 {
    let survived = match kind {
        OutcomeKind::Cash => num_pumps,
        OutcomeKind::Burst => num_pumps - 1,
    };
    let mut lp: f64 = (1..=survived).map(|i| true_log_survive(i, max_state)).sum();
    if kind == OutcomeKind::Burst {
        lp += hazard(num_pumps, max_state).ln();
    }
    lp
}

/// Soft value iteration for one trial context.
pub fn soft_backward(theta: &ThetaWeights, features: &FeatureMatrix) -> Result<PolicyTable> {
    theta.check_finite()?;
    Ok(soft_backward_unchecked(theta, features))
}

fn soft_backward_unchecked(theta: &ThetaWeights, features: &FeatureMatrix) -> PolicyTable {
    let m = features.max_state();
    let mut pump_prob = vec![0.0; m];
    let mut log_pump = vec![0.0; m];
    let mut log_stop = vec![0.0; m];
    let mut log_burst = vec![0.0; m];
    let mut log_survive = vec![f64::NEG_INFINITY; m];
    let mut v_next = f64::NEG_INFINITY;
    for i in (1..=m).rev() {
        let q_pump = if i == m {
            0.0
        } else {
            let burst = hazard(i, m).ln();
            let survive = true_log_survive(i, m) + v_next;
            let q = log_add_exp(burst, survive);
            log_burst[i - 1] = burst - q;
            log_survive[i - 1] = survive - q;
            q
        };
        let lse = log_add_exp(0.0, q_pump);
        log_pump[i - 1] = q_pump - lse;
        log_stop[i - 1] = -lse;
        pump_prob[i - 1] = log_pump[i - 1].exp();
        v_next = theta.reward(features.row(i)) + lse;
    }
    PolicyTable {
        pump_prob,
        log_pump,
        log_stop,
        log_burst,
        log_survive,
        log_partition: v_next,
    }
}

/// Expected state visits per trial plus where the trial ends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisitationVector {
    /// `d[i - 1] = D(i)`
    pub d: Vec<f64>,
    /// Probability the trial cashes at state `i`.
    pub cash_mass: Vec<f64>,
    /// Probability the trial bursts on the pump from state `i`.
    pub burst_mass: Vec<f64>,
}

impl VisitationVector {
    /// Probability that `i` is the last decision state visited.
    pub fn end_mass(&self, i: usize) -> f64 {
        self.cash_mass[i - 1] + self.burst_mass[i - 1]
    }

    pub fn total_mass(&self) -> f64 {
        self.cash_mass.iter().chain(&self.burst_mass).sum()
    }
}

/// Visitation under the table's own action and transition conditionals.
pub fn forward_visitation(policy: &PolicyTable) -> VisitationVector {
    let m = policy.max_state();
    let mut d = vec![0.0; m];
    let mut cash_mass = vec![0.0; m];
    let mut burst_mass = vec![0.0; m];
    let mut reach = 1.0;
    for i in 1..=m {
        d[i - 1] = reach;
        let p = policy.pump_prob[i - 1];
        cash_mass[i - 1] = reach * (1.0 - p);
        burst_mass[i - 1] = reach * p * policy.log_burst[i - 1].exp();
        reach *= p * policy.log_survive[i - 1].exp();
    }
    VisitationVector {
        d,
        cash_mass,
        burst_mass,
    }
}

/// `Σ_i D(i) f(i)` for one trial.
pub fn expected_feature_sum(features: &FeatureMatrix, visitation: &VisitationVector) -> FeatureSum {
    let mut acc = [0.0; N_FEATURES];
    for (row, &d) in features.rows.iter().zip(&visitation.d) {
        for k in 0..N_FEATURES {
            acc[k] += d * row[k];
        }
    }
    acc
}

/// Where a demonstration's features come from.
#[derive(Debug, Clone, PartialEq)]
pub enum FeatureSource {
    Dense(FeatureMatrix),
    /// Materialized on demand; keeps large training sets small in memory.
    History {
        context: HistoryContext,
        options: FeatureOptions,
    },
}

/// One observed trial together with its feature context.
#[derive(Debug, Clone, PartialEq)]
pub struct Demonstration {
    pub source: FeatureSource,
    pub outcome: OutcomeKind,
    pub num_pumps: usize,
}

impl Demonstration {
    pub fn new(features: FeatureMatrix, outcome: OutcomeKind, num_pumps: usize) -> Self {
        Self {
            source: FeatureSource::Dense(features),
            outcome,
            num_pumps,
        }
    }

    pub fn features(&self) -> std::borrow::Cow<'_, FeatureMatrix> {
        match &self.source {
            FeatureSource::Dense(m) => std::borrow::Cow::Borrowed(m),
            FeatureSource::History { context, options } => {
                std::borrow::Cow::Owned(FeatureMatrix::from_context(context, *options))
            }
        }
    }

    pub fn end_state(&self) -> usize {
        crate::task::end_state(self.outcome, self.num_pumps)
    }

    /// Decisions taken: one per pump, plus the cash press.
    pub fn n_decisions(&self) -> usize {
        self.num_pumps + usize::from(self.outcome == OutcomeKind::Cash)
    }

    /// Features summed over the visited states `1..=end_state`.
    pub fn empirical_sum(&self, features: &FeatureMatrix) -> FeatureSum {
        let mut acc = [0.0; N_FEATURES];
        for row in &features.rows[..self.end_state()] {
            for k in 0..N_FEATURES {
                acc[k] += row[k];
            }
        }
        acc
    }

    fn check(&self, max_state: usize) -> Result<()> {
        let ok = match self.outcome {
            OutcomeKind::Cash => self.num_pumps < max_state,
            OutcomeKind::Burst => (1..=max_state).contains(&self.num_pumps),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::domain(format!(
                "{:?} with {} pumps is impossible with max_state {max_state}",
                self.outcome, self.num_pumps
            )))
        }
    }
}

#[derive(Debug, Clone)]
struct TrialEval {
    ll_action: f64,
    ll_trajectory: f64,
    n_decisions: usize,
    empirical: FeatureSum,
    expected: FeatureSum,
    covariance: Option<Box<Square>>,
}

fn evaluate_trial(theta: &ThetaWeights, demo: &Demonstration, with_cov: bool) -> Result<TrialEval> {
    let features = demo.features();
    let m = features.max_state();
    demo.check(m)?;
    let policy = soft_backward_unchecked(theta, &features);
    let visit = forward_visitation(&policy);
    let expected = expected_feature_sum(&features, &visit);
    let covariance = with_cov.then(|| {
        let mut cov = Box::new([[0.0; N_FEATURES]; N_FEATURES]);
        let mut prefix = [0.0; N_FEATURES];
        for i in 1..=m {
            let row = features.row(i);
            for k in 0..N_FEATURES {
                prefix[k] += row[k];
            }
            let w = visit.end_mass(i);
            if w == 0.0 {
                continue;
            }
            let mut c = [0.0; N_FEATURES];
            for k in 0..N_FEATURES {
                c[k] = prefix[k] - expected[k];
            }
            for a in 0..N_FEATURES {
                for b in a..N_FEATURES {
                    cov[a][b] += w * c[a] * c[b];
                }
            }
        }
        for a in 0..N_FEATURES {
            for b in 0..a {
                cov[a][b] = cov[b][a];
            }
        }
        cov
    });
    let empirical = demo.empirical_sum(&features);
    // log P(ζ) = θ·F(ζ) − log Z + log Π T(ζ)
    let ll_trajectory = theta.0.iter().zip(&empirical).map(|(a, b)| a * b).sum::<f64>()
        - policy.log_partition
        + transition_log_prob(demo.outcome, demo.num_pumps, m);
    Ok(TrialEval {
        ll_action: policy.trajectory_log_prob(demo.outcome, demo.num_pumps, false),
        ll_trajectory,
        n_decisions: demo.n_decisions(),
        empirical,
        expected,
        covariance,
    })
}

#[cfg(feature = "parallel")]
fn evaluate_all(theta: &ThetaWeights, demos: &[Demonstration], with_cov: bool) -> Result<Vec<TrialEval>> {
    use rayon::prelude::*;
    demos
        .par_iter()
        .map(|d| evaluate_trial(theta, d, with_cov))
        .collect()
}

#[cfg(not(feature = "parallel"))]
fn evaluate_all(theta: &ThetaWeights, demos: &[Demonstration], with_cov: bool) -> Result<Vec<TrialEval>> {
    demos
        .iter()
        .map(|d| evaluate_trial(theta, d, with_cov))
        .collect()
}

/// Dataset-level sums, reduced in trial order so results do not depend on
/// thread scheduling.
#[derive(Debug, Clone)]
struct Aggregate {
    n: usize,
    n_decisions: usize,
    ll_action: f64,
    ll_trajectory: f64,
    empirical: FeatureSum,
    expected: FeatureSum,
    covariance: Option<Box<Square>>,
}

fn aggregate(theta: &ThetaWeights, demos: &[Demonstration], with_cov: bool) -> Result<Aggregate> {
    if demos.is_empty() {
        return Err(Error::domain("need at least one demonstration"));
    }
    theta.check_finite()?;
    let evals = evaluate_all(theta, demos, with_cov)?;
    let n = evals.len() as f64;
    let mut agg = Aggregate {
        n: evals.len(),
        n_decisions: 0,
        ll_action: 0.0,
        ll_trajectory: 0.0,
        empirical: [0.0; N_FEATURES],
        expected: [0.0; N_FEATURES],
        covariance: with_cov.then(|| Box::new([[0.0; N_FEATURES]; N_FEATURES])),
    };
    for e in &evals {
        agg.n_decisions += e.n_decisions;
        agg.ll_action += e.ll_action;
        agg.ll_trajectory += e.ll_trajectory;
        for k in 0..N_FEATURES {
            agg.empirical[k] += e.empirical[k];
            agg.expected[k] += e.expected[k];
        }
        if let (Some(total), Some(c)) = (agg.covariance.as_mut(), e.covariance.as_ref()) {
            for a in 0..N_FEATURES {
                for b in 0..N_FEATURES {
                    total[a][b] += c[a][b];
                }
            }
        }
    }
    agg.ll_action /= n;
    agg.ll_trajectory /= n;
    for k in 0..N_FEATURES {
        agg.empirical[k] /= n;
        agg.expected[k] /= n;
    }
    if let Some(total) = agg.covariance.as_mut() {
        total.iter_mut().flatten().for_each(|v| *v /= n);
    }
    Ok(agg)
}

/// Mean over trials of the visited-state feature sums.
pub fn empirical_feature_expectation(demos: &[Demonstration]) -> Result<FeatureSum> {
    if demos.is_empty() {
        return Err(Error::domain("need at least one demonstration"));
    }
    let mut acc = [0.0; N_FEATURES];
    for d in demos {
        let s = d.empirical_sum(&d.features());
        for k in 0..N_FEATURES {
            acc[k] += s[k];
        }
    }
    Ok(acc.map(|v| v / demos.len() as f64))
}

/// Mean over trials of the model's expected feature sums.
pub fn expected_feature_expectation(theta: &ThetaWeights, demos: &[Demonstration]) -> Result<FeatureSum> {
    Ok(aggregate(theta, demos, false)?.expected)
}

/// Gradient of the mean trajectory log-likelihood
/// ([`LogLikelihood::with_transitions`]): empirical minus expected feature
/// sums.
pub fn gradient(theta: &ThetaWeights, demos: &[Demonstration]) -> Result<FeatureSum> {
    let agg = aggregate(theta, demos, false)?;
    Ok(std::array::from_fn(|k| agg.empirical[k] - agg.expected[k]))
}

/// Average log-likelihood of a set of trajectories, in nats.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogLikelihood {
    pub n_trajectories: usize,
    pub n_decisions: usize,
    /// Mean over trajectories of `Σ log P(a|i)`.
    pub action_only: f64,
    /// Mean trajectory log-probability under the model: `action_only` plus
    /// the model's burst/survive conditionals. This is the training
    /// objective.
    pub with_transitions: f64,
    /// Action log-likelihood per decision rather than per trajectory.
    pub per_decision_action_only: f64,
}

impl LogLikelihood {
    pub fn value(&self, include_transitions: bool) -> f64 {
        if include_transitions {
            self.with_transitions
        } else {
            self.action_only
        }
    }
}

pub fn log_likelihood(theta: &ThetaWeights, demos: &[Demonstration]) -> Result<LogLikelihood> {
    let agg = aggregate(theta, demos, false)?;
    Ok(agg.log_likelihood())
}

impl Aggregate {
    fn log_likelihood(&self) -> LogLikelihood {
        LogLikelihood {
            n_trajectories: self.n,
            n_decisions: self.n_decisions,
            action_only: self.ll_action,
            with_transitions: self.ll_trajectory,
            per_decision_action_only: if self.n_decisions > 0 {
                self.ll_action * self.n as f64 / self.n_decisions as f64
            } else {
                0.0
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Optimizer {
    /// Newton steps with backtracking, using the exact Hessian of the
    /// log-likelihood (minus the feature-sum covariance).
    #[default]
    Newton,
    /// Fixed-step gradient ascent; the step halves whenever a step would
    /// lower the objective.
    GradientAscent,
}

impl std::str::FromStr for Optimizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "newton" => Ok(Optimizer::Newton),
            "gradient-ascent" | "gradient" => Ok(Optimizer::GradientAscent),
            other => Err(Error::domain(format!("unknown optimizer {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub learning_rate: f64,
    pub max_iters: usize,
    pub grad_tol_inf: f64,
    pub l2_lambda: f64,
    /// Recorded for provenance; training itself is deterministic.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: Optimizer::default(),
            learning_rate: 0.05,
            max_iters: 5000,
            grad_tol_inf: 1e-4,
            l2_lambda: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub theta: ThetaWeights,
    pub iterations: usize,
    pub converged: bool,
    /// ‖∇ objective‖∞ at `theta`, including the L2 term.
    pub final_grad_inf_norm: f64,
    /// ‖f̃ − E_θ[f]‖∞ at `theta`.
    pub moment_gap_inf: f64,
    pub final_objective: f64,
    pub train_lld: LogLikelihood,
    /// Objective after every accepted step, starting at θ = 0.
    pub objective_trace: Vec<f64>,
    pub hyperparameters: TrainConfig,
}

struct Point {
    theta: ThetaWeights,
    agg: Aggregate,
    objective: f64,
    grad: FeatureSum,
}

fn evaluate_point(theta: ThetaWeights, demos: &[Demonstration], cfg: &TrainConfig, with_cov: bool) -> Result<Point> {
    let agg = aggregate(&theta, demos, with_cov)?;
    let penalty = 0.5 * cfg.l2_lambda * theta.0.iter().map(|v| v * v).sum::<f64>();
    let objective = agg.ll_trajectory - penalty;
    let grad = std::array::from_fn(|k| agg.empirical[k] - agg.expected[k] - cfg.l2_lambda * theta.0[k]);
    Ok(Point {
        theta,
        agg,
        objective,
        grad,
    })
}

/// Fits θ by maximizing the mean trajectory log-likelihood minus
/// `l2_lambda/2 · ‖θ‖²`, starting from θ = 0.
pub fn train(demos: &[Demonstration], cfg: &TrainConfig) -> Result<TrainReport> {
    if demos.is_empty() {
        return Err(Error::domain("training set is empty"));
    }
    if !(cfg.learning_rate > 0.0) || !(cfg.grad_tol_inf >= 0.0) || !(cfg.l2_lambda >= 0.0) {
        return Err(Error::domain(
            "learning_rate must be > 0; grad_tol_inf and l2_lambda must be ≥ 0",
        ));
    }
    let newton = cfg.optimizer == Optimizer::Newton;
    let mut current = evaluate_point(ThetaWeights::zero(), demos, cfg, newton)?;
    if !current.objective.is_finite() {
        return Err(Error::Diverged {
            iteration: 0,
            last_finite: current.theta.0.to_vec(),
        });
    }
    let mut trace = vec![current.objective];
    let mut converged = false;
    let mut iterations = 0;
    let mut step = cfg.learning_rate;
    let mut damping = 0.0;

    while iterations < cfg.max_iters {
        if inf_norm(&current.grad) <= cfg.grad_tol_inf {
            converged = true;
            break;
        }
        iterations += 1;
        let accepted = match cfg.optimizer {
            Optimizer::GradientAscent => {
                let cand = ThetaWeights(std::array::from_fn(|k| current.theta.0[k] + step * current.grad[k]));
                let next = evaluate_point(cand, demos, cfg, false)?;
                if next.objective.is_finite() && next.objective >= current.objective {
                    Some(next)
                } else {
                    step /= 2.0;
                    if step < f64::MIN_POSITIVE {
                        return Err(Error::Diverged {
                            iteration: iterations,
                            last_finite: current.theta.0.to_vec(),
                        });
                    }
                    None
                }
            }
            Optimizer::Newton => {
                // Levenberg-Marquardt on the exact Hessian: damping is zero
                // near the optimum (plain Newton) and grows while the
                // quadratic model overpredicts the gain
                let mut found = None;
                while damping <= 1e16 {
                    let delta = newton_direction(&current, cfg.l2_lambda, damping);
                    let predicted = predicted_gain(&current, &delta, cfg.l2_lambda);
                    let cand = ThetaWeights(std::array::from_fn(|k| current.theta.0[k] + delta[k]));
                    let next = evaluate_point(cand, demos, cfg, true)?;
                    let gain = next.objective - current.objective;
                    let noise = 1e-13 * current.objective.abs().max(1.0);
                    let ok = next.objective.is_finite()
                        && if predicted > noise {
                            gain >= 1e-4 * predicted
                        } else {
                            gain >= 0.0
                        };
                    if ok {
                        let ratio = if predicted > noise { gain / predicted } else { 1.0 };
                        if ratio > 0.75 {
                            damping = if damping < 1e-6 { 0.0 } else { damping / 10.0 };
                        } else if ratio < 0.25 {
                            damping = (damping * 4.0).max(1e-3);
                        }
                        found = Some(next);
                        break;
                    }
                    damping = (damping * 10.0).max(1e-3);
                }
                if found.is_none() {
                    // no ascent left at machine precision
                    log::warn!(
                        "newton stalled at iteration {iterations} with ‖grad‖∞ = {:.3e}",
                        inf_norm(&current.grad)
                    );
                    break;
                }
                found
            }
        };
        if let Some(next) = accepted {
            current = next;
            trace.push(current.objective);
        }
    }
    if !converged && iterations > 0 {
        converged = inf_norm(&current.grad) <= cfg.grad_tol_inf;
    }

    let moment: FeatureSum = std::array::from_fn(|k| current.agg.empirical[k] - current.agg.expected[k]);
    Ok(TrainReport {
        theta: current.theta,
        iterations,
        converged,
        final_grad_inf_norm: inf_norm(&current.grad),
        moment_gap_inf: inf_norm(&moment),
        final_objective: current.objective,
        train_lld: current.agg.log_likelihood(),
        objective_trace: trace,
        hyperparameters: *cfg,
    })
}

fn hessian(point: &Point, l2: f64) -> nalgebra::SMatrix<f64, N_FEATURES, N_FEATURES> {
    let cov = point
        .agg
        .covariance
        .as_ref()
        .expect("newton points carry the covariance");
    nalgebra::SMatrix::from_fn(|a, b| cov[a][b] + if a == b { l2 } else { 0.0 })
}

/// Quadratic-model gain `gᵀδ − ½ δᵀ(Cov + λI)δ`.
fn predicted_gain(point: &Point, delta: &FeatureSum, l2: f64) -> f64 {
    let d = nalgebra::SVector::<f64, N_FEATURES>::from_column_slice(delta);
    let g = nalgebra::SVector::<f64, N_FEATURES>::from_column_slice(&point.grad);
    g.dot(&d) - 0.5 * d.dot(&(hessian(point, l2) * d))
}

/// Solves `(H + μ·diag(H))δ = g` with `H = Cov + λI`, adding a small ridge
/// only when `H` is numerically singular.
fn newton_direction(point: &Point, l2: f64, damping: f64) -> FeatureSum {
    let base = hessian(point, l2);
    let scale = (0..N_FEATURES).map(|k| base[(k, k)]).fold(0.0, f64::max).max(1e-300);
    let g = nalgebra::SVector::<f64, N_FEATURES>::from_column_slice(&point.grad);
    let mut ridge = 0.0;
    loop {
        let mut h = base;
        for k in 0..N_FEATURES {
            h[(k, k)] += damping * base[(k, k)] + ridge;
        }
        if let Some(chol) = h.cholesky() {
            let delta = chol.solve(&g);
            if delta.iter().all(|v| v.is_finite()) {
                return std::array::from_fn(|k| delta[k]);
            }
        }
        ridge = if ridge == 0.0 { 1e-12 * scale } else { ridge * 100.0 };
        if ridge > scale * 1e6 {
            return std::array::from_fn(|k| g[k] / scale);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::BartConfig;

    fn raw_matrix(max_state: usize) -> FeatureMatrix {
        let ctx = crate::features::HistoryBuilder::new(&BartConfig::with_max_state(max_state)).context();
        FeatureMatrix::from_context(&ctx, FeatureOptions::default())
    }

    #[test]
    fn zero_theta_last_state_is_even() {
        let p = soft_backward(&ThetaWeights::zero(), &raw_matrix(128)).unwrap();
        assert!((p.pump_prob[127] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn policy_is_normalized() {
        let theta = ThetaWeights([0.3, -1.0, 2.0, 0.0, 0.0, 0.0, 0.0, 0.5, 0.0, -0.5, -0.05]);
        let p = soft_backward(&theta, &raw_matrix(128)).unwrap();
        for i in 1..=128 {
            let total = p.log_pump[i - 1].exp() + p.log_stop[i - 1].exp();
            assert!((total - 1.0).abs() < 1e-12);
            assert!((p.pump_prob[i - 1] + p.stop_prob(i) - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn strongly_negative_step_weight_leaves_only_the_burst_branch() {
        // every continuation is worthless, so pumping is only as attractive
        // as the chance of an immediate (zero-reward) burst: h / (1 + h)
        let p = soft_backward(&ThetaWeights::unit(10, -1e3), &raw_matrix(128)).unwrap();
        for i in 1..=128 {
            let h = hazard(i, 128);
            assert!((p.pump_prob[i - 1] - h / (1.0 + h)).abs() < 1e-6, "state {i}");
        }
        assert!(p.log_partition.is_finite());
    }

    #[test]
    fn non_finite_theta_is_rejected() {
        let t = ThetaWeights::unit(0, f64::NAN);
        assert!(soft_backward(&t, &raw_matrix(4)).is_err());
        assert!(ThetaWeights::from_slice(&[1.0; 10]).is_err());
    }

    #[test]
    fn forward_always_pump_and_always_stop() {
        let pump = PolicyTable::from_pump_probs(vec![1.0; 128]);
        let v = forward_visitation(&pump);
        for i in 1..=128 {
            assert!((v.d[i - 1] - (129 - i) as f64 / 128.0).abs() < 1e-12);
        }
        assert!((v.total_mass() - 1.0).abs() < 1e-12);

        let stop = PolicyTable::from_pump_probs(vec![0.0; 128]);
        let v = forward_visitation(&stop);
        assert_eq!(v.d[0], 1.0);
        assert!(v.d[1..].iter().all(|&d| d == 0.0));
    }

    #[test]
    fn empirical_examples() {
        let m = raw_matrix(128);
        let cash = Demonstration::new(m.clone(), OutcomeKind::Cash, 2);
        let e = empirical_feature_expectation(std::slice::from_ref(&cash)).unwrap();
        assert_eq!(e[10], 6.0);
        assert!(e[..10].iter().all(|&v| v == 0.0));
        let burst = Demonstration::new(m, OutcomeKind::Burst, 2);
        assert_eq!(empirical_feature_expectation(std::slice::from_ref(&burst)).unwrap()[10], 3.0);
        let two = empirical_feature_expectation(&[cash.clone(), cash]).unwrap();
        assert_eq!(two, e);
        assert!(empirical_feature_expectation(&[]).is_err());
    }

    #[test]
    fn likelihood_examples() {
        let m = raw_matrix(128);
        let theta = ThetaWeights([0.1, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, -0.03]);
        let stop = Demonstration::new(m.clone(), OutcomeKind::Cash, 0);
        let ll = log_likelihood(&theta, std::slice::from_ref(&stop)).unwrap();
        let p = soft_backward(&theta, &m).unwrap();
        assert!((ll.action_only - p.log_stop[0]).abs() < 1e-15);
        assert_eq!(ll.with_transitions, ll.action_only);

        // θ = 0: the last pump is a coin flip, and bursting there is certain
        let pol = soft_backward(&ThetaWeights::zero(), &m).unwrap();
        assert!((pol.log_pump[127] - 0.5f64.ln()).abs() < 1e-15);
        assert_eq!(hazard(128, 128).ln(), 0.0);
        assert_eq!(pol.log_burst[127], 0.0);
        let full = Demonstration::new(m, OutcomeKind::Burst, 128);
        let ll = log_likelihood(&ThetaWeights::zero(), &[full]).unwrap();
        let factored = pol.trajectory_log_prob(OutcomeKind::Burst, 128, true);
        assert!((ll.with_transitions - factored).abs() < 1e-9);
        assert!(ll.action_only.is_finite());
    }

    #[test]
    fn impossible_demonstration_is_rejected() {
        let d = Demonstration::new(raw_matrix(4), OutcomeKind::Cash, 4);
        assert!(log_likelihood(&ThetaWeights::zero(), &[d]).is_err());
    }

    #[test]
    fn theta_json_forms() {
        let t = ThetaWeights([1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0]);
        let back = ThetaWeights::from_json(&t.to_json()).unwrap();
        assert_eq!(back, t);
        let bare = serde_json::json!([0, 0, 0, 0, 0, 0, 0, 0, 0, 0, -0.2]);
        assert_eq!(ThetaWeights::from_json(&bare).unwrap(), ThetaWeights::unit(10, -0.2));
        let short = serde_json::json!([0, 0, 0]);
        assert!(ThetaWeights::from_json(&short).is_err());
    }

    #[test]
    fn zero_iterations_returns_zero_theta() {
        let d = Demonstration::new(raw_matrix(8), OutcomeKind::Cash, 3);
        let cfg = TrainConfig {
            max_iters: 0,
            ..TrainConfig::default()
        };
        let r = train(&[d], &cfg).unwrap();
        assert_eq!(r.theta, ThetaWeights::zero());
        assert!(!r.converged);
        assert_eq!(r.iterations, 0);
    }

    #[test]
    fn covariance_is_the_negative_hessian() {
        let mut rows = Vec::new();
        for i in 1..=8usize {
            let x = i as f64;
            rows.push([
                (9 - i) as f64,
                f64::from(i == 3),
                f64::from(i == 5),
                0.0,
                (x * 0.7).sin(),
                0.0,
                f64::from(i >= 6),
                0.0,
                0.0,
                (x * 1.3).cos(),
                x,
            ]);
        }
        let fm = FeatureMatrix { rows };
        let demos: Vec<_> = [(OutcomeKind::Cash, 2), (OutcomeKind::Burst, 4), (OutcomeKind::Cash, 6)]
            .iter()
            .map(|&(k, p)| Demonstration::new(fm.clone(), k, p))
            .collect();
        let theta = ThetaWeights([0.1, -0.3, 0.2, 0.0, 0.4, 0.0, -0.2, 0.0, 0.0, 0.3, 0.05]);
        let agg = aggregate(&theta, &demos, true).unwrap();
        let cov = agg.covariance.unwrap();
        let h = 1e-5;
        let g = gradient(&theta, &demos).unwrap();
        for b in 0..N_FEATURES {
            let mut plus = theta;
            plus.0[b] += h;
            let mut minus = theta;
            minus.0[b] -= h;
            let fd = (log_likelihood(&plus, &demos).unwrap().with_transitions
                - log_likelihood(&minus, &demos).unwrap().with_transitions)
                / (2.0 * h);
            assert!((fd - g[b]).abs() < 1e-6, "grad {b}: fd {fd} analytic {}", g[b]);
        }
        for b in 0..N_FEATURES {
            let mut plus = theta;
            plus.0[b] += h;
            let mut minus = theta;
            minus.0[b] -= h;
            let gp = gradient(&plus, &demos).unwrap();
            let gm = gradient(&minus, &demos).unwrap();
            for a in 0..N_FEATURES {
                let fd = -(gp[a] - gm[a]) / (2.0 * h);
                assert!((fd - cov[a][b]).abs() < 1e-6 * (1.0 + cov[a][b].abs()), "({a},{b}) fd {fd} cov {}", cov[a][b]);
            }
        }
    }

    #[test]
    fn factored_probabilities_sum_to_one() {
        let theta = ThetaWeights([0.2, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, -0.4]);
        let fm = raw_matrix(6);
        let pol = soft_backward(&theta, &fm).unwrap();
        let mut total = 0.0;
        for p in 0..6 {
            let lp = pol.trajectory_log_prob(OutcomeKind::Cash, p, true);
            let d = Demonstration::new(fm.clone(), OutcomeKind::Cash, p);
            let ll = log_likelihood(&theta, &[d]).unwrap();
            assert!((ll.with_transitions - lp).abs() < 1e-12);
            total += lp.exp();
        }
        for p in 1..=6 {
            total += pol.trajectory_log_prob(OutcomeKind::Burst, p, true).exp();
        }
        assert!((total - 1.0).abs() < 1e-12);
        let v = forward_visitation(&pol);
        assert!((v.total_mass() - 1.0).abs() < 1e-12);
        let physical = pol.under_true_dynamics();
        assert_eq!(physical.pump_prob, pol.pump_prob);
        assert!((physical.burst_prob(1) - 1.0 / 6.0).abs() < 1e-15);
    }
}
