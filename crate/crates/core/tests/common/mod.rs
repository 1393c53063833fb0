//! Shared oracles and generators for the integration tests.
#![allow(dead_code)]

use bart_irl::features::FeatureMatrix;
use bart_irl::task::BartConfig;
use bart_irl::trajectory::{Session, TrialRecord};
use bart_irl::{OutcomeKind, ThetaWeights, N_FEATURES};
use rand::Rng;

/// One complete trajectory and its probability.
#[derive(Debug, Clone, Copy)]
pub struct Enumerated {
    pub kind: OutcomeKind,
    pub num_pumps: usize,
    pub prob: f64,
}

/// All `2M` trajectories with probability `∝ exp(Σ θ·f) · Π transitions`,
/// built without the backward pass.
pub fn enumerate_maxent(theta: &ThetaWeights, fm: &FeatureMatrix) -> Vec<Enumerated> {
    let m = fm.rows.len();
    let reward = |i: usize| -> f64 { (0..N_FEATURES).map(|k| theta.0[k] * fm.rows[i - 1][k]).sum() };
    let mut out = Vec::new();
    let mut logw = Vec::new();
    for kind in [OutcomeKind::Cash, OutcomeKind::Burst] {
        let pumps: Vec<usize> = match kind {
            OutcomeKind::Cash => (0..m).collect(),
            OutcomeKind::Burst => (1..=m).collect(),
        };
        for p in pumps {
            let end = if kind == OutcomeKind::Cash { p + 1 } else { p };
            let mut lw: f64 = (1..=end).map(reward).sum();
            lw += physical_log_transitions(kind, p, m);
            out.push(Enumerated {
                kind,
                num_pumps: p,
                prob: 0.0,
            });
            logw.push(lw);
        }
    }
    let max = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logw.iter().map(|l| (l - max).exp()).sum();
    for (e, l) in out.iter_mut().zip(&logw) {
        e.prob = (l - max).exp() / z;
    }
    out
}

/// All trajectories of an agent that pumps with `pump_prob[i-1]` under the
/// uniform breakpoint.
pub fn enumerate_agent(pump_prob: &[f64]) -> Vec<Enumerated> {
    let m = pump_prob.len();
    let mut out = Vec::new();
    for p in 0..m {
        let pumps: f64 = pump_prob[..p].iter().product();
        let survive = (m - p) as f64 / m as f64;
        out.push(Enumerated {
            kind: OutcomeKind::Cash,
            num_pumps: p,
            prob: pumps * survive * (1.0 - pump_prob[p]),
        });
    }
    for p in 1..=m {
        let pumps: f64 = pump_prob[..p].iter().product();
        // the breakpoint is exactly p
        out.push(Enumerated {
            kind: OutcomeKind::Burst,
            num_pumps: p,
            prob: pumps / m as f64,
        });
    }
    out
}

/// `log Π` of the survive/burst probabilities along a trajectory, from the
/// uniform breakpoint: surviving `s` pumps has probability `(M - s)/M`.
pub fn physical_log_transitions(kind: OutcomeKind, num_pumps: usize, m: usize) -> f64 {
    match kind {
        OutcomeKind::Cash => ((m - num_pumps) as f64 / m as f64).ln(),
        // survive p-1 pumps, then the breakpoint is exactly p
        OutcomeKind::Burst => (1.0 / m as f64).ln(),
    }
}

/// Visitation, cash and burst mass implied by an enumeration.
pub fn masses(traj: &[Enumerated], m: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut d = vec![0.0; m];
    let mut cash = vec![0.0; m];
    let mut burst = vec![0.0; m];
    for t in traj {
        let end = if t.kind == OutcomeKind::Cash { t.num_pumps + 1 } else { t.num_pumps };
        for v in &mut d[..end] {
            *v += t.prob;
        }
        match t.kind {
            OutcomeKind::Cash => cash[end - 1] += t.prob,
            OutcomeKind::Burst => burst[end - 1] += t.prob,
        }
    }
    (d, cash, burst)
}

pub fn random_theta<R: Rng>(rng: &mut R, scale: f64) -> ThetaWeights {
    ThetaWeights(std::array::from_fn(|_| rng.random_range(-scale..=scale)))
}

pub fn random_dense_matrix<R: Rng>(rng: &mut R, m: usize) -> FeatureMatrix {
    FeatureMatrix {
        rows: (0..m)
            .map(|_| std::array::from_fn(|_| rng.random_range(-1.0..=1.0)))
            .collect(),
    }
}

/// A random trial consistent with `cfg`.
pub fn random_trial<R: Rng>(rng: &mut R, subject: &str, index: usize, practice: bool, cfg: &BartConfig) -> TrialRecord {
    let m = cfg.max_state;
    let cash = rng.random_bool(0.6);
    let (outcome, num_pumps) = if cash {
        (OutcomeKind::Cash, rng.random_range(0..m))
    } else {
        (OutcomeKind::Burst, rng.random_range(1..=m))
    };
    let breakpoint = rng.random_bool(0.5).then(|| match outcome {
        OutcomeKind::Burst => num_pumps,
        OutcomeKind::Cash => rng.random_range(num_pumps + 1..=m),
    });
    let reaction_times_ms = rng.random_bool(0.5).then(|| {
        let presses = num_pumps + usize::from(cash);
        (0..presses).map(|_| rng.random_range(0.0..3000.0)).collect()
    });
    TrialRecord {
        subject_id: subject.to_string(),
        trial_index: index,
        practice,
        outcome,
        num_pumps,
        breakpoint,
        reaction_times_ms,
    }
}

pub fn random_session<R: Rng>(rng: &mut R, subject: &str, cfg: &BartConfig) -> Session {
    let trials = (0..cfg.total_trials())
        .map(|k| random_trial(rng, subject, k, k < cfg.practice_trials, cfg))
        .collect();
    Session {
        subject_id: subject.to_string(),
        config: *cfg,
        trials,
    }
}

pub fn random_config<R: Rng>(rng: &mut R) -> BartConfig {
    let max_state = if rng.random_bool(0.5) { 128 } else { rng.random_range(1..=20) };
    BartConfig {
        max_state,
        points_per_pump: rng.random_range(1..=20),
        formal_trials: rng.random_range(1..=12),
        practice_trials: rng.random_range(0..=2),
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}
