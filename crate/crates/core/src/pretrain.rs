//! Offline RL pretraining on critic-scored logged dialogues.
//!
//! Two variants: full-return (policy weighted by the realised discounted
//! return, Q regressed onto it) and bootstrapped (Q regressed onto a
//! one-step target, policy weighted by the detached TD gap).

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dialogue::{ActionSource, Background, DialogueState, Episode, TaskKind};
use crate::env::{Environment, Phase};
use crate::policy::{ModelError, PolicyModel, PolicyParams};
use crate::train::{
    bootstrap_target, episode_samples, sgd_step, weighted_loss, write_history, EpochRecord, LossOutput, Sample, Terms,
    TrainError,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PretrainVariant {
    FullReturn,
    Bootstrapped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub lambda1: f64,
    pub gamma: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub variant: PretrainVariant,
    /// Use `(Q* - Q)` instead of `(Q - Q*)` as the bootstrapped policy
    /// coefficient.
    #[serde(default)]
    pub flip_bootstrap_sign: bool,
    #[serde(default)]
    pub seed: u64,
}

impl PretrainConfig {
    pub fn for_task(task: TaskKind) -> Self {
        let (lambda1, epochs, learning_rate, variant) = match task {
            TaskKind::Esconv | TaskKind::Custom => (10.0, 5, 6e-6, PretrainVariant::FullReturn),
            TaskKind::Cima => (10.0, 10, 1e-5, PretrainVariant::Bootstrapped),
            TaskKind::CraigslistBargain => (1.0, 10, 6e-6, PretrainVariant::FullReturn),
        };
        PretrainConfig {
            lambda1,
            gamma: 0.999,
            epochs,
            batch_size: 8,
            learning_rate,
            variant,
            flip_bootstrap_sign: false,
            seed: 0,
        }
    }
}

/// Logged episodes with critic rewards attached to every turn.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoredDataset {
    pub episodes: Vec<Episode>,
    /// Records dropped because the critic failed on them.
    pub skipped: usize,
    pub errors: Vec<String>,
}

impl ScoredDataset {
    pub fn from_episodes(episodes: Vec<Episode>) -> Self {
        ScoredDataset {
            episodes,
            ..Default::default()
        }
    }

    pub fn num_transitions(&self) -> usize {
        self.episodes.iter().map(|e| e.transitions.len()).sum()
    }
}

/// Scores every turn of every raw episode with the critic (`l` samples per
/// turn). Episodes whose scoring fails are skipped and counted.
pub fn score_dataset(raw: &[Episode], env: &Environment) -> ScoredDataset {
    let mut out = ScoredDataset::default();
    'episodes: for (i, ep) in raw.iter().enumerate() {
        let mut scored = ep.clone();
        for t in &mut scored.transitions {
            match env.evaluate(&t.next_state, Phase::Training) {
                Ok(eval) => {
                    t.reward = eval.reward;
                    t.verdicts = eval.verdicts;
                    scored.success = eval.success;
                    scored.deal_price = eval.deal_price;
                }
                Err(e) => {
                    out.skipped += 1;
                    out.errors.push(format!("episode {i}: {e}"));
                    continue 'episodes;
                }
            }
        }
        if let Some(last) = scored.transitions.last_mut() {
            last.done = true;
        }
        out.episodes.push(scored);
    }
    out
}

/// Plays logged episodes from `cases` with a fixed behaviour policy; rewards
/// come from the critic. The actions are tagged as logged.
pub fn collect_logged_episodes<F>(env: &Environment, cases: &[Background], mut behaviour: F) -> Result<Vec<Episode>, TrainError>
where
    F: FnMut(&DialogueState) -> usize,
{
    let mut out = Vec::with_capacity(cases.len());
    for case in cases {
        let mut state = env.initial_state(case.clone());
        let mut ep = Episode::new(env.task.task());
        loop {
            let (mut t, eval) = env.step_eval(&state, behaviour(&state), Phase::Training)?;
            t.source = Some(ActionSource::Logged);
            state = t.next_state.clone();
            let done = t.done;
            ep.push(t);
            if done {
                ep.success = eval.success;
                ep.deal_price = eval.deal_price;
                break;
            }
        }
        out.push(ep);
    }
    Ok(out)
}

/// `-sum R log pi(a|s) + lambda1 * sum (Q(s,a) - R)^2` with `R` the
/// realised return.
pub fn pretrain_loss_full(params: &PolicyParams, batch: &[Sample], cfg: &PretrainConfig) -> Result<LossOutput, TrainError> {
    Ok(weighted_loss(params, batch, cfg.lambda1, |s, _| {
        Ok(Terms {
            coef: -s.ret,
            target: s.ret,
        })
    })?)
}

/// Q regressed onto `Q* = r + gamma max Q(s', .)`; policy weighted by the
/// detached `Q(s,a) - Q*`.
pub fn pretrain_loss_bootstrapped(params: &PolicyParams, batch: &[Sample], cfg: &PretrainConfig) -> Result<LossOutput, TrainError> {
    let sign = if cfg.flip_bootstrap_sign { -1.0 } else { 1.0 };
    Ok(weighted_loss(params, batch, cfg.lambda1, |s, qa| {
        let target = bootstrap_target(params, s, cfg.gamma)?;
        Ok(Terms {
            coef: sign * (qa - target),
            target,
        })
    })?)
}

/// Policy term of the configured variant on its own.
pub fn pretrain_policy_loss(params: &PolicyParams, batch: &[Sample], cfg: &PretrainConfig) -> Result<LossOutput, TrainError> {
    let mut c = cfg.clone();
    c.lambda1 = 0.0;
    pretrain_loss(params, batch, &c)
}

/// Q term of the configured variant on its own (unweighted).
pub fn pretrain_q_loss(params: &PolicyParams, batch: &[Sample], cfg: &PretrainConfig) -> Result<LossOutput, TrainError> {
    let target = |s: &Sample| match cfg.variant {
        PretrainVariant::FullReturn => Ok(s.ret),
        PretrainVariant::Bootstrapped => bootstrap_target(params, s, cfg.gamma),
    };
    Ok(weighted_loss(params, batch, 1.0, |s, _| {
        Ok(Terms {
            coef: 0.0,
            target: target(s)?,
        })
    })?)
}

pub fn pretrain_loss(params: &PolicyParams, batch: &[Sample], cfg: &PretrainConfig) -> Result<LossOutput, TrainError> {
    match cfg.variant {
        PretrainVariant::FullReturn => pretrain_loss_full(params, batch, cfg),
        PretrainVariant::Bootstrapped => pretrain_loss_bootstrapped(params, batch, cfg),
    }
}

/// Teacher-forced validation score: mean logged reward over turns where the
/// greedy action agrees with the logged one (disagreements score 0).
pub fn validation_metric(params: &PolicyParams, samples: &[Sample]) -> Result<f64, TrainError> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for s in samples {
        if params.policy_forward(&s.x)?.argmax() == s.action {
            total += s.reward;
        }
    }
    Ok(total / samples.len() as f64)
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    /// Model carrying the best-on-validation parameters.
    pub model: PolicyModel,
    pub final_params: PolicyParams,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
}

/// Trains with minibatch SGD and keeps the parameters of the epoch with the
/// best validation metric (the last epoch when no validation data is given).
pub fn run_pretraining(
    model: &PolicyModel,
    dataset: &ScoredDataset,
    validation: Option<&ScoredDataset>,
    cfg: &PretrainConfig,
    history_path: Option<&Path>,
) -> Result<PretrainOutcome, TrainError> {
    let mut samples = episode_samples(model, &dataset.episodes, cfg.gamma);
    if samples.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let val = validation.map(|v| episode_samples(model, &v.episodes, cfg.gamma));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = model.params.clone();
    let mut best = (f64::NEG_INFINITY, params.clone(), 0usize);
    let mut history = Vec::new();
    let bs = cfg.batch_size.max(1);
    for epoch in 1..=cfg.epochs {
        samples.shuffle(&mut rng);
        let (mut pl, mut ql) = (0.0, 0.0);
        for batch in samples.chunks(bs) {
            let step = pretrain_loss(&params, batch, cfg).and_then(|out| {
                sgd_step(&mut params, &out, cfg.learning_rate)?;
                Ok(out)
            });
            match step {
                Ok(out) => {
                    pl += out.policy;
                    ql += out.q;
                }
                Err(TrainError::Model(ModelError::NonFinite(_))) => return Err(diverged(epoch, &history, history_path)),
                Err(e) => return Err(e),
            }
        }
        let n = samples.len() as f64;
        let val_metric = match &val {
            Some(v) => validation_metric(&params, v)?,
            None => 0.0,
        };
        history.push(EpochRecord {
            epoch,
            policy_loss: pl / n,
            q_loss: ql / n,
            val_metric,
        });
        if val.is_none() || val_metric > best.0 {
            best = (val_metric, params.clone(), epoch);
        }
    }
    if cfg.epochs == 0 {
        best.1 = params.clone();
    }
    if let Some(p) = history_path {
        write_history(p, &history)?;
    }
    let mut trained = model.clone();
    trained.params = best.1;
    Ok(PretrainOutcome {
        model: trained,
        final_params: params,
        best_epoch: best.2,
        history,
    })
}

fn diverged(epoch: usize, history: &[EpochRecord], path: Option<&Path>) -> TrainError {
    let saved: Option<PathBuf> = path.and_then(|p| write_history(p, history).ok().map(|_| p.to_path_buf()));
    TrainError::Diverged { epoch, history: saved }
}
