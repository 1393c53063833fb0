//! Browser bindings for three views of the task: the expected-reward curve,
//! the soft-optimal policy for a given θ, and a simulated population.
//!
//! Every export takes plain numbers or strings and returns a JSON string, so
//! the page needs no generated types beyond the function names.

use bart_irl::agents::{generate_population, AgentKind, AgentSpec};
use bart_irl::features::HistoryBuilder;
use bart_irl::irl::{forward_visitation, soft_backward};
use bart_irl::task::{expected_marginal_reward, optimal_stop_pumps, stop_after_payoff_exact};
use bart_irl::trajectory::{behavioral_stats, BehavioralStats, TrialRecord};
use bart_irl::{BartConfig, FeatureMatrix, FeatureOptions, OutcomeKind, ThetaWeights, N_FEATURES};
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Debug, Serialize)]
pub struct TaskCurve {
    pub expected_reward: Vec<f64>,
    /// `stop_payoff[k]` is the expected payoff of planning to stop after `k` pumps.
    pub stop_payoff: Vec<f64>,
    pub optimal_stop: usize,
}

#[derive(Debug, Serialize)]
pub struct PolicyView {
    pub pump_prob: Vec<f64>,
    pub visitation: Vec<f64>,
    pub cash_mass: Vec<f64>,
    pub burst_mass: Vec<f64>,
    pub expected_pumps: f64,
}

#[derive(Debug, Serialize)]
pub struct PopulationView {
    pub stats: BehavioralStats,
    /// `histogram[p]` counts formal trials that ended after `p` pumps.
    pub histogram: Vec<usize>,
}

fn config(max_state: usize, points_per_pump: u32) -> bart_irl::Result<BartConfig> {
    let cfg = BartConfig {
        points_per_pump,
        ..BartConfig::with_max_state(max_state)
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn task_curve(max_state: usize, points_per_pump: u32) -> bart_irl::Result<TaskCurve> {
    let cfg = config(max_state, points_per_pump)?;
    let expected_reward = (1..=max_state)
        .map(|i| expected_marginal_reward(i, &cfg))
        .collect::<bart_irl::Result<_>>()?;
    let stop_payoff = (0..=max_state)
        .map(|k| stop_after_payoff_exact(k, &cfg).map(|r| *r.numer() as f64 / *r.denom() as f64))
        .collect::<bart_irl::Result<_>>()?;
    Ok(TaskCurve {
        expected_reward,
        stop_payoff,
        optimal_stop: optimal_stop_pumps(&cfg),
    })
}

/// `history` holds `(burst, num_pumps)` for each earlier trial, oldest first.
pub fn policy_view(
    theta: &[f64],
    history: &[(bool, usize)],
    max_state: usize,
    normalize: bool,
) -> bart_irl::Result<PolicyView> {
    let weights: [f64; N_FEATURES] = theta.try_into().map_err(|_| {
        bart_irl::Error::domain(format!("θ needs {N_FEATURES} weights, got {}", theta.len()))
    })?;
    let theta = ThetaWeights(weights);
    theta.check_finite()?;
    let cfg = config(max_state, BartConfig::default().points_per_pump)?;
    let mut builder = HistoryBuilder::new(&cfg);
    for (k, &(burst, num_pumps)) in history.iter().enumerate() {
        let (outcome, limit) = if burst {
            (OutcomeKind::Burst, 1..=max_state)
        } else {
            (OutcomeKind::Cash, 0..=max_state - 1)
        };
        if !limit.contains(&num_pumps) {
            return Err(bart_irl::Error::domain(format!(
                "history trial {k}: {num_pumps} pumps is impossible for this outcome"
            )));
        }
        builder.push(&TrialRecord {
            subject_id: "demo".into(),
            trial_index: k,
            practice: false,
            outcome,
            num_pumps,
            breakpoint: None,
            reaction_times_ms: None,
        });
    }
    let opts = FeatureOptions {
        normalize,
        ..FeatureOptions::default()
    };
    let fm = FeatureMatrix::from_context(&builder.context(), opts);
    let policy = soft_backward(&theta, &fm)?.under_true_dynamics();
    let v = forward_visitation(&policy);
    // every visited state past the first was reached by one pump
    let expected_pumps = v.d.iter().skip(1).sum::<f64>() + v.burst_mass.iter().sum::<f64>();
    Ok(PolicyView {
        pump_prob: policy.pump_prob,
        visitation: v.d,
        cash_mass: v.cash_mass,
        burst_mass: v.burst_mass,
        expected_pumps,
    })
}

pub fn population_view(agent: &str, subjects: usize, trials: usize, seed: u64) -> bart_irl::Result<PopulationView> {
    let kind: AgentKind = agent.parse()?;
    let cfg = BartConfig {
        formal_trials: trials,
        ..BartConfig::default()
    };
    let sessions = generate_population(&AgentSpec::new(kind, subjects, trials, seed), &cfg)?;
    let mut histogram = vec![0; cfg.max_state + 1];
    for t in sessions.iter().flat_map(|s| s.formal_trials()) {
        histogram[t.num_pumps] += 1;
    }
    Ok(PopulationView {
        stats: behavioral_stats(&sessions)?,
        histogram,
    })
}

fn to_js<T: Serialize>(r: bart_irl::Result<T>) -> Result<String, JsError> {
    let value = r.map_err(|e| JsError::new(&e.to_string()))?;
    serde_json::to_string(&value).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = taskCurve)]
pub fn task_curve_js(max_state: usize, points_per_pump: u32) -> Result<String, JsError> {
    to_js(task_curve(max_state, points_per_pump))
}

/// `history` is a flat list of pump counts; negative entries mark bursts
/// (`-p` burst on pump `p`).
#[wasm_bindgen(js_name = policyView)]
pub fn policy_view_js(theta: &[f64], history: &[i32], max_state: usize, normalize: bool) -> Result<String, JsError> {
    let history: Vec<(bool, usize)> = history.iter().map(|&p| (p < 0, p.unsigned_abs() as usize)).collect();
    to_js(policy_view(theta, &history, max_state, normalize))
}

#[wasm_bindgen(js_name = populationView)]
pub fn population_view_js(agent: &str, subjects: usize, trials: usize, seed: u64) -> Result<String, JsError> {
    to_js(population_view(agent, subjects, trials, seed))
}
