//! Three-role dialogue environment (system responder, user responder,
//! critic) over interchangeable backends, with LLM-call accounting.

mod llm;
mod prompts;
mod scripted;

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use llm::{
    llm_chat, Cassette, CassetteEntry, CassetteTransport, ChatMessage, ChatRequest, ChatTransport,
    HttpTransport, LlmBackend, LlmConfig, RecordingTransport, RetryPolicy, TransportError,
};
pub use prompts::{fill_placeholders, opener, render_transcript, role_names, MessageTemplate, PromptPack};
pub use scripted::{
    optimal_plan, BargainSim, OraclePlan, ScriptedBackend, ScriptedSimSpec, VerdictBand,
};

use crate::dialogue::{
    is_success, map_verdicts_to_reward, Background, DialogueError, DialogueState, Speaker, Strategy,
    TaskKind, TaskSpec, Transition, Utterance,
};
use crate::eval::compute_sl;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("state is terminal (turn {turn} of {max_turns})")]
    TerminalState { turn: usize, max_turns: usize },
    #[error("unknown strategy id {0}")]
    UnknownStrategy(usize),
    #[error("step failed after {attempts} attempts: {source}")]
    StepFailed {
        attempts: usize,
        #[source]
        source: TransportError,
    },
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("could not parse critic answer {0:?}")]
    ParseFailure(String),
    #[error(transparent)]
    Verdict(#[from] DialogueError),
    #[error("backend error: {0}")]
    Backend(String),
}

/// One LLM role implementation. Implementations must be pure functions of
/// their inputs (scripted) or independent per call (LLM).
pub trait RoleBackend: Send + Sync {
    /// Generates the system reply under the instruction of `strategy`.
    fn system_respond(&self, state: &DialogueState, strategy: &Strategy) -> Result<String, EnvError>;

    fn user_respond(&self, state: &DialogueState) -> Result<String, EnvError>;

    /// One critic sample; `sample` is the index within the `l` draws.
    fn critic_judge(&self, state: &DialogueState, sample: usize) -> Result<String, EnvError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Acting,
    Simulation,
    Training,
}

impl Phase {
    pub const ALL: [Phase; 3] = [Phase::Acting, Phase::Simulation, Phase::Training];

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    User,
    Critic,
}

/// Counts LLM invocations per role and phase. One critic unit covers one
/// `l`-sample evaluation; raw critic samples are tracked separately.
#[derive(Debug, Default)]
pub struct CallCounter {
    units: [[AtomicU64; 3]; 3],
    critic_samples: [AtomicU64; 3],
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleCounts {
    pub system: u64,
    pub user: u64,
    pub critic: u64,
    pub critic_samples: u64,
}

impl RoleCounts {
    pub fn units(&self) -> u64 {
        self.system + self.user + self.critic
    }

    fn add(&mut self, o: &RoleCounts) {
        self.system += o.system;
        self.user += o.user;
        self.critic += o.critic;
        self.critic_samples += o.critic_samples;
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallCounts {
    pub per_phase: BTreeMap<Phase, RoleCounts>,
}

impl CallCounts {
    pub fn phase(&self, phase: Phase) -> RoleCounts {
        self.per_phase.get(&phase).copied().unwrap_or_default()
    }

    pub fn total(&self) -> RoleCounts {
        let mut t = RoleCounts::default();
        for c in self.per_phase.values() {
            t.add(c);
        }
        t
    }

    pub fn total_units(&self) -> u64 {
        self.total().units()
    }

    /// Element-wise sum.
    pub fn merge(&mut self, other: &CallCounts) {
        for (p, c) in &other.per_phase {
            self.per_phase.entry(*p).or_default().add(c);
        }
    }

    /// Element-wise `self - earlier`.
    pub fn since(&self, earlier: &CallCounts) -> CallCounts {
        let mut out = CallCounts::default();
        for p in Phase::ALL {
            let (a, b) = (self.phase(p), earlier.phase(p));
            let d = RoleCounts {
                system: a.system - b.system,
                user: a.user - b.user,
                critic: a.critic - b.critic,
                critic_samples: a.critic_samples - b.critic_samples,
            };
            if d != RoleCounts::default() {
                out.per_phase.insert(p, d);
            }
        }
        out
    }
}

impl CallCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, role: Role, phase: Phase) {
        self.units[phase.index()][role as usize].fetch_add(1, Ordering::Relaxed);
    }

    pub fn record_critic_samples(&self, phase: Phase, n: u64) {
        self.critic_samples[phase.index()].fetch_add(n, Ordering::Relaxed);
    }

    pub fn snapshot(&self) -> CallCounts {
        let mut out = CallCounts::default();
        for p in Phase::ALL {
            let i = p.index();
            let c = RoleCounts {
                system: self.units[i][Role::System as usize].load(Ordering::Relaxed),
                user: self.units[i][Role::User as usize].load(Ordering::Relaxed),
                critic: self.units[i][Role::Critic as usize].load(Ordering::Relaxed),
                critic_samples: self.critic_samples[i].load(Ordering::Relaxed),
            };
            if c != RoleCounts::default() {
                out.per_phase.insert(p, c);
            }
        }
        out
    }

    /// Adds a snapshot taken elsewhere (e.g. a per-case counter).
    pub fn absorb(&self, counts: &CallCounts) {
        for (p, c) in &counts.per_phase {
            let i = p.index();
            self.units[i][Role::System as usize].fetch_add(c.system, Ordering::Relaxed);
            self.units[i][Role::User as usize].fetch_add(c.user, Ordering::Relaxed);
            self.units[i][Role::Critic as usize].fetch_add(c.critic, Ordering::Relaxed);
            self.critic_samples[i].fetch_add(c.critic_samples, Ordering::Relaxed);
        }
    }

    pub fn reset(&self) {
        for row in &self.units {
            for c in row {
                c.store(0, Ordering::Relaxed);
            }
        }
        for c in &self.critic_samples {
            c.store(0, Ordering::Relaxed);
        }
    }
}

/// Result of one `l`-sample critic evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub reward: f64,
    pub verdicts: Vec<String>,
    pub success: bool,
    pub deal_price: Option<f64>,
}

/// A task bound to a backend and a shared call counter.
#[derive(Clone)]
pub struct Environment {
    pub task: TaskSpec,
    backend: Arc<dyn RoleBackend>,
    counter: Arc<CallCounter>,
}

impl std::fmt::Debug for Environment {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Environment").field("task", &self.task.task()).finish()
    }
}

impl Environment {
    pub fn new(task: TaskSpec, backend: Arc<dyn RoleBackend>) -> Self {
        Environment {
            task,
            backend,
            counter: Arc::new(CallCounter::new()),
        }
    }

    pub fn with_counter(mut self, counter: Arc<CallCounter>) -> Self {
        self.counter = counter;
        self
    }

    pub fn counter(&self) -> &Arc<CallCounter> {
        &self.counter
    }

    pub fn backend(&self) -> &Arc<dyn RoleBackend> {
        &self.backend
    }

    pub fn initial_state(&self, background: Background) -> DialogueState {
        let opener = opener(self.task.task(), &background);
        DialogueState::new(background, opener)
    }

    fn strategy(&self, action: usize) -> Result<&Strategy, EnvError> {
        self.task.catalog.get(action).ok_or(EnvError::UnknownStrategy(action))
    }

    /// Generates the system utterance for `action` and the user's reply
    /// (two backend calls).
    pub fn simulate_turn(&self, state: &DialogueState, action: usize, phase: Phase) -> Result<DialogueState, EnvError> {
        if state.turn >= self.task.max_turns {
            return Err(EnvError::TerminalState {
                turn: state.turn,
                max_turns: self.task.max_turns,
            });
        }
        let strategy = self.strategy(action)?;
        self.counter.record(Role::System, phase);
        let sys_text = self.backend.system_respond(state, strategy)?;
        let system = Utterance {
            speaker: Speaker::System,
            text: sys_text,
            turn_index: state.next_turn_index(),
            strategy: Some(action),
        };
        let mut partial = state.clone();
        partial.history.push(system.clone());
        self.counter.record(Role::User, phase);
        let user_text = self.backend.user_respond(&partial)?;
        let user = Utterance {
            speaker: Speaker::User,
            text: user_text,
            turn_index: state.next_turn_index() + 1,
            strategy: None,
        };
        Ok(state.with_exchange(system, user))
    }

    /// Scores `state` with `l` critic samples (one critic unit).
    pub fn evaluate(&self, state: &DialogueState, phase: Phase) -> Result<Evaluation, EnvError> {
        let l = self.task.critic_samples.max(1);
        self.counter.record(Role::Critic, phase);
        self.counter.record_critic_samples(phase, l as u64);
        let verdicts = (0..l)
            .map(|i| self.backend.critic_judge(state, i))
            .collect::<Result<Vec<_>, _>>()?;
        if self.task.task() == TaskKind::CraigslistBargain {
            return self.score_bargain(state, verdicts);
        }
        let reward = map_verdicts_to_reward(&verdicts, &self.task.reward_map)?;
        Ok(Evaluation {
            reward,
            success: is_success(reward, &self.task.reward_map),
            verdicts,
            deal_price: None,
        })
    }

    fn score_bargain(&self, state: &DialogueState, verdicts: Vec<String>) -> Result<Evaluation, EnvError> {
        let bg = &state.background;
        let (listed, target) = match (bg.listed_price, bg.buyer_target) {
            (Some(l), Some(t)) => (l, t),
            _ => return Err(EnvError::Config("bargaining case needs listed_price and buyer_target".into())),
        };
        let mut deals = Vec::new();
        let mut total = 0.0;
        for v in &verdicts {
            if let Some(price) = parse_deal(v)? {
                let sl = compute_sl(Some(price), listed, target)
                    .map_err(|e| EnvError::Config(e.to_string()))?;
                total += sl.min(1.0);
                deals.push(price);
            } else {
                total += self.task.reward_map.lookup(v)?.score;
            }
        }
        let success = 2 * deals.len() > verdicts.len();
        let deal_price = success.then(|| deals.iter().sum::<f64>() / deals.len() as f64);
        Ok(Evaluation {
            reward: total / verdicts.len() as f64,
            verdicts,
            success,
            deal_price,
        })
    }

    /// Takes `action` in `state`: system reply, user reply, critic score.
    pub fn step(&self, state: &DialogueState, action: usize, phase: Phase) -> Result<Transition, EnvError> {
        self.step_eval(state, action, phase).map(|(t, _)| t)
    }

    /// Like [`Environment::step`], also returning the critic evaluation.
    pub fn step_eval(&self, state: &DialogueState, action: usize, phase: Phase) -> Result<(Transition, Evaluation), EnvError> {
        let next_state = self.simulate_turn(state, action, phase)?;
        let eval = self.evaluate(&next_state, phase)?;
        let done = eval.success || next_state.turn >= self.task.max_turns;
        let t = Transition {
            state: state.clone(),
            action,
            reward: eval.reward,
            next_state,
            done,
            verdicts: eval.verdicts.clone(),
            source: None,
        };
        Ok((t, eval))
    }

    /// Asks the critic once whether a deal was reached and at what price.
    pub fn extract_deal(&self, state: &DialogueState, phase: Phase) -> Result<Option<f64>, EnvError> {
        self.counter.record(Role::Critic, phase);
        self.counter.record_critic_samples(phase, 1);
        parse_deal(&self.backend.critic_judge(state, 0)?)
    }
}

/// Parses the bargaining critic's templated answer.
pub fn parse_deal(answer: &str) -> Result<Option<f64>, EnvError> {
    use std::sync::OnceLock;
    static DEAL: OnceLock<regex::Regex> = OnceLock::new();
    static NO_DEAL: OnceLock<regex::Regex> = OnceLock::new();
    let deal = DEAL.get_or_init(|| {
        regex::Regex::new(r"(?i)reached a deal at\s*\$?\s*([0-9][0-9,]*(?:\.[0-9]+)?)").expect("deal regex")
    });
    let no_deal = NO_DEAL.get_or_init(|| regex::Regex::new(r"(?i)not reached a deal").expect("no-deal regex"));
    if no_deal.is_match(answer) {
        return Ok(None);
    }
    if let Some(c) = deal.captures(answer) {
        let price: f64 = c[1]
            .replace(',', "")
            .parse()
            .map_err(|_| EnvError::ParseFailure(answer.to_string()))?;
        return Ok(Some(price));
    }
    Err(EnvError::ParseFailure(answer.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deal_templates() {
        assert_eq!(parse_deal("They have reached a deal at $15.").unwrap(), Some(15.0));
        assert_eq!(parse_deal("They have not reached a deal.").unwrap(), None);
        assert_eq!(parse_deal("They have reached a deal at $1,200.").unwrap(), Some(1200.0));
        assert_eq!(parse_deal("They have reached a deal at 99.5").unwrap(), Some(99.5));
        assert!(matches!(parse_deal("Maybe?"), Err(EnvError::ParseFailure(_))));
    }

    #[test]
    fn counter_snapshot_and_reset() {
        let c = CallCounter::new();
        c.record(Role::System, Phase::Acting);
        c.record(Role::User, Phase::Acting);
        c.record(Role::Critic, Phase::Simulation);
        c.record_critic_samples(Phase::Simulation, 10);
        let s = c.snapshot();
        assert_eq!(s.total_units(), 3);
        assert_eq!(s.phase(Phase::Simulation).critic_samples, 10);
        assert_eq!(s.phase(Phase::Training), RoleCounts::default());
        let before = s.clone();
        c.record(Role::User, Phase::Training);
        assert_eq!(c.snapshot().since(&before).total_units(), 1);
        c.reset();
        assert_eq!(c.snapshot(), CallCounts::default());
    }
}
