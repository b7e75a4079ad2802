//! Loss and update machinery shared by offline pretraining and self-play.
//!
//! Every loss here has the form
//! `sum_i c_i * log pi(a_i | s_i) + w * sum_i (Q(s_i, a_i) - y_i)^2`
//! where the policy coefficients `c_i` and value targets `y_i` are plain
//! numbers (detached from the parameters) by the time gradients are taken.

use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dialogue::{discounted_returns, DialogueError, Episode};
use crate::env::EnvError;
use crate::mcts::MctsError;
use crate::policy::{Gradients, ModelError, PolicyModel, PolicyParams};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Mcts(#[from] MctsError),
    #[error(transparent)]
    Data(#[from] DialogueError),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("training diverged (non-finite loss) in epoch {epoch}; partial history kept at {history:?}")]
    Diverged { epoch: usize, history: Option<PathBuf> },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// One featurized training record.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: Vec<f64>,
    pub action: usize,
    pub reward: f64,
    /// Discounted return from this turn to the end of its episode.
    pub ret: f64,
    /// Features of the next state; `None` for terminal transitions.
    pub next_x: Option<Vec<f64>>,
}

/// Featurizes every transition of `episodes` with the model's encoder.
pub fn episode_samples(model: &PolicyModel, episodes: &[Episode], gamma: f64) -> Vec<Sample> {
    let mut out = Vec::new();
    for ep in episodes {
        let returns = discounted_returns(&ep.rewards(), gamma);
        for (t, ret) in ep.transitions.iter().zip(returns) {
            out.push(Sample {
                x: model.features(&t.state),
                action: t.action,
                reward: t.reward,
                ret,
                next_x: (!t.done).then(|| model.features(&t.next_state)),
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub policy: f64,
    pub q: f64,
    pub weight: f64,
    pub grads: Gradients,
}

impl LossOutput {
    pub fn total(&self) -> f64 {
        self.policy + self.weight * self.q
    }
}

/// Detached per-sample terms: policy coefficient and Q target.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Terms {
    pub coef: f64,
    pub target: f64,
}

/// `r + gamma * max_a' Q(s', a')`, or `r` at a terminal transition.
pub fn bootstrap_target(params: &PolicyParams, s: &Sample, gamma: f64) -> Result<f64, ModelError> {
    Ok(match &s.next_x {
        None => s.reward,
        Some(nx) => s.reward + gamma * params.q_forward(nx)?.max(),
    })
}

const CHUNK: usize = 32;

/// Evaluates `sum c log pi + w sum (Q - y)^2` and its gradient, with the
/// per-sample terms produced by `terms` from the current Q value.
pub fn weighted_loss<F>(params: &PolicyParams, batch: &[Sample], weight: f64, terms: F) -> Result<LossOutput, ModelError>
where
    F: Fn(&Sample, f64) -> Result<Terms, ModelError> + Sync,
{
    let partials = batch
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut g = params.zeros_like();
            let (mut pl, mut ql) = (0.0, 0.0);
            let a_n = params.num_actions;
            for s in chunk {
                if s.action >= a_n {
                    return Err(ModelError::DimensionMismatch {
                        expected: a_n,
                        got: s.action + 1,
                    });
                }
                let acts = params.activations(&s.x)?;
                let probs = crate::policy::ActionDistribution::from_logits(&acts.logits).probs;
                let qa = acts.q[s.action];
                let Terms { coef, target } = terms(s, qa)?;
                pl += coef * probs[s.action].ln();
                ql += (qa - target).powi(2);
                // d(c log p_a)/dlogits = c (onehot - p)
                let mut d_logits: Vec<f64> = probs.iter().map(|p| -coef * p).collect();
                d_logits[s.action] += coef;
                let mut d_q = vec![0.0; a_n];
                d_q[s.action] = weight * 2.0 * (qa - target);
                params.backward_into(&s.x, &acts, &d_logits, &d_q, &mut g)?;
            }
            Ok((pl, ql, g))
        })
        .collect::<Result<Vec<_>, ModelError>>()?;
    let mut grads = params.zeros_like();
    let (mut policy, mut q) = (0.0, 0.0);
    for (pl, ql, g) in partials {
        policy += pl;
        q += ql;
        grads.add_scaled(&g, 1.0);
    }
    Ok(LossOutput {
        policy,
        q,
        weight,
        grads,
    })
}

/// Plain SGD step; refuses to apply non-finite updates.
pub fn sgd_step(params: &mut PolicyParams, out: &LossOutput, lr: f64) -> Result<(), ModelError> {
    if !out.total().is_finite() || !out.grads.is_finite() {
        return Err(ModelError::NonFinite("loss or gradient"));
    }
    if lr != 0.0 {
        params.add_scaled(&out.grads, -lr);
    }
    Ok(())
}

/// One line of a training history CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub policy_loss: f64,
    pub q_loss: f64,
    pub val_metric: f64,
}

pub fn write_history(path: &std::path::Path, rows: &[EpochRecord]) -> Result<(), TrainError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
