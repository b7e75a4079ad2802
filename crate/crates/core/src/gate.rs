//! Uncertainty gate routing each turn to the policy (System 1) or to MCTS
//! (System 2), with the threshold set as a running percentile of observed
//! uncertainty so that roughly `target_ratio` of turns go to MCTS.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::ActionDistribution;

pub const DEFAULT_MIN_SAMPLES: usize = 10;

#[derive(Debug, Error)]
pub enum GateError {
    #[error("target ratio {0} is outside [0, 1]")]
    InvalidRatio(f64),
    #[error("percentile of an empty sample")]
    EmptySample,
    #[error("distribution has fewer than two actions")]
    TooFewActions,
    #[error("writing gate trace: {0}")]
    Io(#[from] std::io::Error),
    #[error("writing gate trace: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    PolicyLm,
    Mcts,
}

/// How confident the policy is; larger means more confident.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UncertaintyMeasure {
    /// Gap between the two largest probabilities.
    #[default]
    Top2Gap,
    /// Negated entropy, so that larger still means more confident.
    NegEntropy,
}

impl UncertaintyMeasure {
    pub fn confidence(self, dist: &ActionDistribution) -> Result<f64, GateError> {
        if dist.len() < 2 {
            return Err(GateError::TooFewActions);
        }
        Ok(match self {
            UncertaintyMeasure::Top2Gap => dist.top2_gap().map_err(|_| GateError::TooFewActions)?,
            UncertaintyMeasure::NegEntropy => -dist.entropy(),
        })
    }
}

/// Nearest-rank percentile: the `ceil(q * n)`-th smallest sample (at least
/// the first).
pub fn percentile(samples: &[f64], q: f64) -> Result<f64, GateError> {
    if samples.is_empty() {
        return Err(GateError::EmptySample);
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((q.clamp(0.0, 1.0) * sorted.len() as f64).ceil() as usize).max(1);
    Ok(sorted[rank - 1])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateRecord {
    pub turn: usize,
    pub delta: f64,
    /// `None` while warming up.
    pub threshold: Option<f64>,
    pub decision: Decision,
}

#[derive(Debug, Clone)]
pub struct GateState {
    target_ratio: f64,
    pub min_samples: usize,
    pub measure: UncertaintyMeasure,
    collected: Vec<f64>,
    rng: ChaCha8Rng,
    pub trace: Vec<GateRecord>,
}

impl GateState {
    pub fn new(target_ratio: f64, seed: u64) -> Result<Self, GateError> {
        if !(0.0..=1.0).contains(&target_ratio) {
            return Err(GateError::InvalidRatio(target_ratio));
        }
        Ok(GateState {
            target_ratio,
            min_samples: DEFAULT_MIN_SAMPLES,
            measure: UncertaintyMeasure::default(),
            collected: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            trace: Vec::new(),
        })
    }

    pub fn with_min_samples(mut self, n: usize) -> Self {
        self.min_samples = n;
        self
    }

    pub fn with_measure(mut self, measure: UncertaintyMeasure) -> Self {
        self.measure = measure;
        self
    }

    pub fn target_ratio(&self) -> f64 {
        self.target_ratio
    }

    pub fn collected(&self) -> &[f64] {
        &self.collected
    }

    /// Decides from a precomputed confidence value.
    pub fn decide_delta(&mut self, turn: usize, delta: f64) -> Decision {
        let (decision, threshold) = if self.collected.len() < self.min_samples.max(1) {
            let mcts = self.rng.gen_bool(self.target_ratio);
            (if mcts { Decision::Mcts } else { Decision::PolicyLm }, None)
        } else {
            let eta = percentile(&self.collected, self.target_ratio).expect("non-empty after warm-up");
            let mcts = if delta < eta {
                true
            } else if delta > eta {
                false
            } else {
                // Ties at the threshold go to MCTS only as often as needed to
                // keep the target fraction below-or-at the threshold.
                let below = self.collected.iter().filter(|&&d| d < eta).count() as f64;
                let equal = self.collected.iter().filter(|&&d| d == eta).count() as f64;
                let p = (self.target_ratio * self.collected.len() as f64 - below) / equal;
                self.rng.gen_bool(p.clamp(0.0, 1.0))
            };
            (if mcts { Decision::Mcts } else { Decision::PolicyLm }, Some(eta))
        };
        self.collected.push(delta);
        self.trace.push(GateRecord {
            turn,
            delta,
            threshold,
            decision,
        });
        decision
    }

    pub fn mcts_fraction(&self) -> f64 {
        if self.trace.is_empty() {
            return 0.0;
        }
        let n = self.trace.iter().filter(|r| r.decision == Decision::Mcts).count();
        n as f64 / self.trace.len() as f64
    }

    pub fn write_trace_csv(&self, path: &Path) -> Result<(), GateError> {
        write_trace_csv(&self.trace, path)
    }
}

pub fn gate_decide(gate: &mut GateState, turn: usize, dist: &ActionDistribution) -> Result<Decision, GateError> {
    let delta = gate.measure.confidence(dist)?;
    Ok(gate.decide_delta(turn, delta))
}

pub fn write_trace_csv(records: &[GateRecord], path: &Path) -> Result<(), GateError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["turn", "delta", "threshold", "decision"])?;
    for r in records {
        let threshold = r.threshold.map(|t| t.to_string()).unwrap_or_default();
        let decision = match r.decision {
            Decision::PolicyLm => "policy",
            Decision::Mcts => "mcts",
        };
        w.write_record([r.turn.to_string(), r.delta.to_string(), threshold, decision.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
