//! The tabular balloon task.
//!
//! A decision state `i` (1-based) is the moment after `i - 1` successful
//! pumps. Each balloon has a hidden breakpoint drawn uniformly from
//! `1..=max_state`; pumping from state `i == breakpoint` bursts it. Given that
//! the balloon survived to state `i`, the burst hazard of the next pump is
//! `1 / (max_state + 1 - i)`.
//!
//! Cash and burst outcomes are absorbing, so the burst/active status never
//! needs to be stored on a decision state.
//!
//! Analytics (expected marginal reward, optimal stop, exact payoffs) use
//! exact rationals. Simulation uses `f64` policies and a caller-owned RNG.

use num_rational::Ratio;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BartConfig {
    pub max_state: usize,
    pub points_per_pump: u32,
    pub formal_trials: usize,
    pub practice_trials: usize,
}

impl Default for BartConfig {
    fn default() -> Self {
        Self {
            max_state: 128,
            points_per_pump: 10,
            formal_trials: 30,
            practice_trials: 1,
        }
    }
}

impl BartConfig {
    /// A default-valued config with a different number of states.
    pub fn with_max_state(max_state: usize) -> Self {
        Self {
            max_state,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_state < 1 {
            return Err(Error::invalid(None, "max_state", "must be ≥ 1"));
        }
        if self.points_per_pump < 1 {
            return Err(Error::invalid(None, "points_per_pump", "must be ≥ 1"));
        }
        if self.formal_trials < 1 {
            return Err(Error::invalid(None, "formal_trials", "must be ≥ 1"));
        }
        Ok(())
    }

    pub fn total_trials(&self) -> usize {
        self.formal_trials + self.practice_trials
    }

    fn check_state(&self, i: usize) -> Result<()> {
        if i == 0 || i > self.max_state {
            return Err(Error::domain(format!(
                "state {i} outside 1..={}",
                self.max_state
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Pump,
    Stop,
}

/// How a trial ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutcomeKind {
    Cash,
    Burst,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub kind: OutcomeKind,
    pub num_pumps: usize,
    pub payoff: u64,
}

impl TrialOutcome {
    pub fn cash(num_pumps: usize, cfg: &BartConfig) -> Self {
        Self {
            kind: OutcomeKind::Cash,
            num_pumps,
            payoff: trial_payoff(OutcomeKind::Cash, num_pumps, cfg),
        }
    }

    pub fn burst(num_pumps: usize) -> Self {
        Self {
            kind: OutcomeKind::Burst,
            num_pumps,
            payoff: 0,
        }
    }

    /// The decision state at which the trial ended: `p + 1` after cashing
    /// with `p` pumps, `p` after bursting on pump `p`.
    pub fn end_state(&self) -> usize {
        end_state(self.kind, self.num_pumps)
    }
}

pub fn end_state(kind: OutcomeKind, num_pumps: usize) -> usize {
    match kind {
        OutcomeKind::Cash => num_pumps + 1,
        OutcomeKind::Burst => num_pumps,
    }
}

/// Points banked by a trial. Bursts pay nothing.
pub fn trial_payoff(kind: OutcomeKind, num_pumps: usize, cfg: &BartConfig) -> u64 {
    match kind {
        OutcomeKind::Cash => cfg.points_per_pump as u64 * num_pumps as u64,
        OutcomeKind::Burst => 0,
    }
}

/// Exact conditional burst hazard of pumping from state `i`.
pub fn burst_probability_exact(i: usize, cfg: &BartConfig) -> Result<Ratio<i64>> {
    cfg.check_state(i)?;
    Ok(Ratio::new(1, (cfg.max_state + 1 - i) as i64))
}

pub fn burst_probability(i: usize, cfg: &BartConfig) -> Result<f64> {
    cfg.check_state(i)?;
    Ok(hazard(i, cfg.max_state))
}

/// Unchecked hazard for hot loops; `i` must be in `1..=max_state`.
#[inline]
pub(crate) fn hazard(i: usize, max_state: usize) -> f64 {
    1.0 / (max_state + 1 - i) as f64
}

/// Marginal reward of the pump taken from state `i`: the pump either adds
/// `points_per_pump` or wipes out the `i - 1` pumps already banked.
pub fn true_marginal_reward(i: usize, exploded: bool, cfg: &BartConfig) -> Result<i64> {
    cfg.check_state(i)?;
    let ppp = cfg.points_per_pump as i64;
    Ok(if exploded { -ppp * (i as i64 - 1) } else { ppp })
}

/// Exact expected marginal reward of pumping from state `i`,
/// `ppp * (M + 1 - 2i) / (M + 1 - i)`.
///
/// At `i = 1` with the default task this is `1270/128`, slightly below the
/// round figure of 10 one might quote for the first pump.
pub fn expected_marginal_reward_exact(i: usize, cfg: &BartConfig) -> Result<Ratio<i64>> {
    cfg.check_state(i)?;
    let gain = Ratio::from_integer(cfg.points_per_pump as i64);
    let p_burst = burst_probability_exact(i, cfg)?;
    let loss = Ratio::from_integer(true_marginal_reward(i, true, cfg)?);
    Ok((Ratio::from_integer(1) - p_burst) * gain + p_burst * loss)
}

pub fn expected_marginal_reward(i: usize, cfg: &BartConfig) -> Result<f64> {
    let r = expected_marginal_reward_exact(i, cfg)?;
    Ok(*r.numer() as f64 / *r.denom() as f64)
}

/// Largest number of pumps `τ` whose expected marginal reward is still
/// positive. Zero when even the first pump is not worth it.
pub fn optimal_stop_pumps(cfg: &BartConfig) -> usize {
    (1..=cfg.max_state)
        .take_while(|&i| {
            expected_marginal_reward_exact(i, cfg)
                .map(|r| r > Ratio::from_integer(0))
                .unwrap_or(false)
        })
        .last()
        .unwrap_or(0)
}

/// Exact expected payoff of the deterministic "pump `τ` times, then cash"
/// policy: `ppp * τ * (M - τ) / M`.
pub fn stop_after_payoff_exact(pumps: usize, cfg: &BartConfig) -> Result<Ratio<i64>> {
    if pumps > cfg.max_state {
        return Err(Error::domain(format!(
            "cannot plan {pumps} pumps with max_state {}",
            cfg.max_state
        )));
    }
    let m = cfg.max_state as i64;
    let t = pumps as i64;
    Ok(Ratio::new(cfg.points_per_pump as i64 * t * (m - t), m))
}

/// Result of one transition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Step {
    Continue(usize),
    End(TrialOutcome),
}

/// Deterministic transition given the trial's breakpoint.
pub fn step(i: usize, action: Action, breakpoint: usize, cfg: &BartConfig) -> Result<Step> {
    cfg.check_state(i)?;
    if breakpoint == 0 || breakpoint > cfg.max_state {
        return Err(Error::domain(format!(
            "breakpoint {breakpoint} outside 1..={}",
            cfg.max_state
        )));
    }
    if i > breakpoint {
        return Err(Error::domain(format!(
            "state {i} is past breakpoint {breakpoint}; the trial already ended"
        )));
    }
    Ok(match action {
        Action::Stop => Step::End(TrialOutcome::cash(i - 1, cfg)),
        Action::Pump if i == breakpoint => Step::End(TrialOutcome::burst(i)),
        Action::Pump => Step::Continue(i + 1),
    })
}

/// A simulated balloon: the outcome plus the breakpoint that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SimulatedTrial {
    pub outcome: TrialOutcome,
    pub breakpoint: usize,
}

pub fn sample_breakpoint<R: Rng + ?Sized>(rng: &mut R, cfg: &BartConfig) -> usize {
    rng.random_range(1..=cfg.max_state)
}

/// Plays one balloon. `pump_prob[i - 1]` is `P(Pump | i)`.
pub fn simulate_trial<R: Rng + ?Sized>(
    pump_prob: &[f64],
    rng: &mut R,
    cfg: &BartConfig,
) -> Result<SimulatedTrial> {
    if pump_prob.len() != cfg.max_state {
        return Err(Error::domain(format!(
            "policy covers {} states, expected {}",
            pump_prob.len(),
            cfg.max_state
        )));
    }
    if let Some(bad) = pump_prob.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::domain(format!(
            "pump probability {bad} outside [0, 1]"
        )));
    }
    let breakpoint = sample_breakpoint(rng, cfg);
    let mut i = 1;
    loop {
        let action = if rng.random::<f64>() < pump_prob[i - 1] {
            Action::Pump
        } else {
            Action::Stop
        };
        match step(i, action, breakpoint, cfg)? {
            Step::Continue(next) => i = next,
            Step::End(outcome) => return Ok(SimulatedTrial { outcome, breakpoint }),
        }
    }
}
