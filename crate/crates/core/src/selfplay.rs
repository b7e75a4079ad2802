//! MCTS-guided self-play fine-tuning.
//!
//! Every action of a self-play episode is chosen by the planner with the
//! current policy as prior. After each batch of episodes the policy head is
//! trained towards the realised returns (advantage-weighted log-likelihood)
//! and the Q head towards one-step bootstrap targets.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dialogue::{append_jsonl, ActionSource, Background, Episode, TaskKind};
use crate::env::{Environment, Phase};
use crate::mcts::{plan, MctsConfig};
use crate::policy::{ModelError, PolicyModel, PolicyParams};
use crate::train::{bootstrap_target, episode_samples, sgd_step, weighted_loss, LossOutput, Sample, Terms, TrainError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfPlayConfig {
    pub lambda2: f64,
    pub epochs: usize,
    pub episodes_per_epoch: usize,
    pub learning_rate: f64,
    pub gamma: f64,
    pub mcts: MctsConfig,
    /// Gradient steps on each epoch's buffer.
    #[serde(default = "one")]
    pub updates_per_epoch: usize,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> usize {
    1
}

impl SelfPlayConfig {
    pub fn for_task(task: TaskKind) -> Self {
        let (lambda2, epochs, learning_rate) = match task {
            TaskKind::Esconv | TaskKind::Custom => (1.0, 5, 1e-6),
            TaskKind::Cima => (10.0, 3, 1e-5),
            TaskKind::CraigslistBargain => (1.0, 3, 1e-6),
        };
        SelfPlayConfig {
            lambda2,
            epochs,
            episodes_per_epoch: 100,
            learning_rate,
            gamma: 0.999,
            mcts: MctsConfig::default(),
            updates_per_epoch: 1,
            seed: 0,
        }
    }
}

/// Complete episodes collected in one epoch.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReplayBuffer {
    pub episodes: Vec<Episode>,
}

impl ReplayBuffer {
    pub fn push(&mut self, episode: Episode) {
        self.episodes.push(episode);
    }

    pub fn len(&self) -> usize {
        self.episodes.iter().map(|e| e.transitions.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn clear(&mut self) {
        self.episodes.clear();
    }

    pub fn samples(&self, model: &PolicyModel, gamma: f64) -> Vec<Sample> {
        episode_samples(model, &self.episodes, gamma)
    }
}

/// Plays one episode from `case` choosing every action with MCTS.
pub fn rollout_selfplay_episode(
    case: Background,
    model: &PolicyModel,
    env: &Environment,
    mcts: &MctsConfig,
) -> Result<Episode, TrainError> {
    let mut state = env.initial_state(case);
    let mut ep = Episode::new(env.task.task());
    loop {
        let out = plan(&state, model, env, mcts)?;
        let (mut t, eval) = env.step_eval(&state, out.action, Phase::Training)?;
        t.source = Some(ActionSource::Mcts);
        state = t.next_state.clone();
        let done = t.done;
        ep.push(t);
        if done {
            ep.success = eval.success;
            ep.deal_price = eval.deal_price;
            return Ok(ep);
        }
    }
}

/// `sum (Q* - Q(s,a))^2` with the detached bootstrap target `Q*`.
pub fn selfplay_q_loss(params: &PolicyParams, batch: &[Sample], cfg: &SelfPlayConfig) -> Result<LossOutput, TrainError> {
    let out = weighted_loss(params, batch, 1.0, |s, _| {
        Ok(Terms {
            coef: 0.0,
            target: bootstrap_target(params, s, cfg.gamma)?,
        })
    })?;
    Ok(out)
}

/// `sum (Q(s,a) - R) log pi(a|s)` with the coefficient detached; `R` is the
/// realised return.
pub fn selfplay_policy_loss(params: &PolicyParams, batch: &[Sample], _cfg: &SelfPlayConfig) -> Result<LossOutput, TrainError> {
    let out = weighted_loss(params, batch, 0.0, |s, qa| {
        Ok(Terms {
            coef: qa - s.ret,
            target: qa,
        })
    })?;
    Ok(out)
}

/// Combined loss `L_theta + lambda2 * L_beta` with one gradient pass.
pub fn selfplay_loss(params: &PolicyParams, batch: &[Sample], cfg: &SelfPlayConfig) -> Result<LossOutput, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    Ok(weighted_loss(params, batch, cfg.lambda2, |s, qa| {
        Ok(Terms {
            coef: qa - s.ret,
            target: bootstrap_target(params, s, cfg.gamma)?,
        })
    })?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfPlayEpoch {
    pub epoch: usize,
    pub mean_reward: f64,
    pub success_rate: f64,
    pub policy_loss: f64,
    pub q_loss: f64,
    pub total_loss: f64,
    pub failed_episodes: usize,
}

#[derive(Debug, Clone)]
pub struct SelfPlayOutcome {
    pub model: PolicyModel,
    /// Parameters of the epoch with the highest self-play success rate.
    pub best_params: PolicyParams,
    pub history: Vec<SelfPlayEpoch>,
}

/// Where self-play writes its artefacts; all optional.
#[derive(Debug, Clone, Default)]
pub struct SelfPlayOutputs {
    pub metrics_csv: Option<PathBuf>,
    pub episodes_jsonl: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
}

/// Runs `cfg.epochs` rounds of rollouts and updates. Cases are drawn
/// cyclically from `cases`.
pub fn run_selfplay_training(
    model: &PolicyModel,
    env: &Environment,
    cases: &[Background],
    cfg: &SelfPlayConfig,
    outputs: &SelfPlayOutputs,
) -> Result<SelfPlayOutcome, TrainError> {
    if cases.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut model = model.clone();
    let mut best = (f64::NEG_INFINITY, model.params.clone());
    let mut history = Vec::new();
    let mut buffer = ReplayBuffer::default();
    for epoch in 1..=cfg.epochs {
        buffer.clear();
        let start = (epoch - 1) * cfg.episodes_per_epoch;
        let results: Vec<_> = (0..cfg.episodes_per_epoch)
            .into_par_iter()
            .map(|i| rollout_selfplay_episode(cases[(start + i) % cases.len()].clone(), &model, env, &cfg.mcts))
            .collect();
        let mut failed = 0;
        for r in results {
            match r {
                Ok(mut ep) => {
                    ep.tag = Some(format!("selfplay:{epoch}"));
                    buffer.push(ep);
                }
                Err(_) => failed += 1,
            }
        }
        if let Some(p) = &outputs.episodes_jsonl {
            append_jsonl(p, &buffer.episodes)?;
        }
        let n_eps = buffer.episodes.len().max(1) as f64;
        let success_rate = buffer.episodes.iter().filter(|e| e.success).count() as f64 / n_eps;
        let mean_reward = buffer.episodes.iter().flat_map(|e| e.rewards()).sum::<f64>() / buffer.len().max(1) as f64;
        let samples = buffer.samples(&model, cfg.gamma);
        let mut last = None;
        if !samples.is_empty() {
            for _ in 0..cfg.updates_per_epoch.max(1) {
                let out = selfplay_loss(&model.params, &samples, cfg)?;
                match sgd_step(&mut model.params, &out, cfg.learning_rate) {
                    Ok(()) => last = Some(out),
                    Err(ModelError::NonFinite(_)) => {
                        let saved = save_progress(&history, &model, outputs)?;
                        return Err(TrainError::Diverged { epoch, history: saved });
                    }
                    Err(e) => return Err(e.into()),
                }
            }
        }
        let n = samples.len().max(1) as f64;
        let (pl, ql, total) = last
            .map(|o| (o.policy / n, o.q / n, o.total() / n))
            .unwrap_or((0.0, 0.0, 0.0));
        history.push(SelfPlayEpoch {
            epoch,
            mean_reward,
            success_rate,
            policy_loss: pl,
            q_loss: ql,
            total_loss: total,
            failed_episodes: failed,
        });
        if success_rate > best.0 {
            best = (success_rate, model.params.clone());
        }
        save_progress(&history, &model, outputs)?;
    }
    if let Some(dir) = &outputs.checkpoint_dir {
        let mut b = model.clone();
        b.params = best.1.clone();
        b.save(&dir.join("selfplay_best.json"))?;
    }
    Ok(SelfPlayOutcome {
        model,
        best_params: best.1,
        history,
    })
}

fn save_progress(history: &[SelfPlayEpoch], model: &PolicyModel, outputs: &SelfPlayOutputs) -> Result<Option<PathBuf>, TrainError> {
    if let Some(dir) = &outputs.checkpoint_dir {
        model.save(&dir.join("selfplay_final.json"))?;
    }
    match &outputs.metrics_csv {
        Some(p) => {
            write_metrics(p, history)?;
            Ok(Some(p.clone()))
        }
        None => Ok(None),
    }
}

pub fn write_metrics(path: &Path, rows: &[SelfPlayEpoch]) -> Result<(), TrainError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dialogue::TaskSpec;
    use crate::env::{ScriptedBackend, ScriptedSimSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn s(x: Vec<f64>, action: usize, reward: f64, ret: f64, next_x: Option<Vec<f64>>) -> Sample {
        Sample {
            x,
            action,
            reward,
            ret,
            next_x,
        }
    }

    #[test]
    fn q_loss_examples() {
        let cfg = SelfPlayConfig::for_task(TaskKind::Esconv);
        let mut p = PolicyParams::zeros(1, 2, 2);
        p.bq = vec![0.4, 0.0];
        let out = selfplay_q_loss(&p, &[s(vec![1.0], 0, 1.0, 1.0, None)], &cfg).unwrap();
        assert!((out.q - 0.36).abs() < 1e-12);
        let mut c0 = cfg.clone();
        c0.gamma = 0.0;
        let out = selfplay_q_loss(&p, &[s(vec![1.0], 0, 0.4, 1.0, Some(vec![0.0]))], &c0).unwrap();
        assert_eq!(out.q, 0.0);
    }

    #[test]
    fn policy_loss_examples() {
        let cfg = SelfPlayConfig::for_task(TaskKind::Esconv);
        let p = PolicyParams::zeros(1, 2, 2);
        let first = selfplay_policy_loss(&p, &[s(vec![1.0], 1, 1.0, 1.0, None)], &cfg).unwrap();
        let out = first.clone();
        assert!((out.policy - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(out.grads.bp[1] < 0.0, "descent raises the taken action");
        let out = selfplay_policy_loss(&p, &[s(vec![1.0], 1, 0.0, 0.0, None)], &cfg).unwrap();
        assert_eq!(out.policy, 0.0);
        assert!(out.grads.iter().all(|g| *g == 0.0));
        let mut shifted = p.clone();
        shifted.bq = vec![0.5, 0.5];
        let a = selfplay_policy_loss(&shifted, &[s(vec![1.0], 1, 1.5, 1.5, None)], &cfg).unwrap();
        assert!((a.policy - first.policy).abs() < 1e-12);
    }

    #[test]
    fn combined_total() {
        let cfg = SelfPlayConfig {
            lambda2: 10.0,
            ..SelfPlayConfig::for_task(TaskKind::Cima)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = PolicyParams::init(3, 4, 2, &mut rng);
        let batch = vec![
            s(vec![0.1, 0.2, 0.3], 0, 0.5, 0.9, Some(vec![0.3, 0.2, 0.1])),
            s(vec![0.0, 1.0, 0.0], 1, -0.5, -0.5, None),
        ];
        let all = selfplay_loss(&p, &batch, &cfg).unwrap();
        let pl = selfplay_policy_loss(&p, &batch, &cfg).unwrap();
        let ql = selfplay_q_loss(&p, &batch, &cfg).unwrap();
        assert!((all.total() - (pl.policy + 10.0 * ql.q)).abs() < 1e-12);
    }

    fn setup(max_turns: usize) -> (Environment, ScriptedSimSpec) {
        let spec = ScriptedSimSpec::two_phase(TaskKind::Esconv, 8);
        let mut task = TaskSpec::builtin(TaskKind::Esconv).unwrap();
        task.max_turns = max_turns;
        (Environment::new(task, Arc::new(ScriptedBackend::new(spec.clone()))), spec)
    }

    #[test]
    fn rollout_is_deterministic_and_tagged() {
        let (env, spec) = setup(8);
        let model = PolicyModel::untrained(env.task.catalog.clone(), 8);
        let case = spec.sample_case(TaskKind::Esconv, 0, &mut ChaCha8Rng::seed_from_u64(1));
        let a = rollout_selfplay_episode(case.clone(), &model, &env, &MctsConfig::default()).unwrap();
        let b = rollout_selfplay_episode(case, &model, &env, &MctsConfig::default()).unwrap();
        assert_eq!(a, b);
        assert!(a.transitions.iter().all(|t| t.source == Some(ActionSource::Mcts)));
    }

    #[test]
    fn zero_lr_keeps_params() {
        let (env, spec) = setup(3);
        let model = PolicyModel::untrained(env.task.catalog.clone(), 3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cases: Vec<_> = (0..4).map(|i| spec.sample_case(TaskKind::Esconv, i, &mut rng)).collect();
        let cfg = SelfPlayConfig {
            epochs: 2,
            episodes_per_epoch: 4,
            learning_rate: 0.0,
            ..SelfPlayConfig::for_task(TaskKind::Esconv)
        };
        let dir = tempfile::tempdir().unwrap();
        let outputs = SelfPlayOutputs {
            episodes_jsonl: Some(dir.path().join("eps.jsonl")),
            metrics_csv: Some(dir.path().join("m.csv")),
            checkpoint_dir: None,
        };
        let out = run_selfplay_training(&model, &env, &cases, &cfg, &outputs).unwrap();
        assert_eq!(out.model.params, model.params);
        let eps: Vec<Episode> = crate::dialogue::read_jsonl(&dir.path().join("eps.jsonl")).unwrap();
        assert_eq!(eps.len(), 8);
        assert_eq!(eps[7].tag.as_deref(), Some("selfplay:2"));
    }
}
