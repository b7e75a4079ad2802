//! Open-loop MCTS over strategy sequences.
//!
//! Each node is identified by the strategy prefix that reached it and caches
//! the one simulated dialogue realised for that prefix, so revisiting a
//! prefix never calls the responders again. A simulation descends by PUCT
//! until it steps off the tree, simulates that one new turn, scores it with
//! the critic, expands it with the policy prior and backs the critic value
//! up the path with a running mean.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dialogue::DialogueState;
use crate::env::{EnvError, Environment, Phase};
use crate::policy::{ActionDistribution, ModelError, PolicyModel};

#[derive(Debug, Error)]
pub enum MctsError {
    #[error("simulation aborted: {0}")]
    SimulationAborted(#[source] EnvError),
    #[error("prior evaluation failed: {0}")]
    EncoderFailure(#[source] ModelError),
    #[error("cannot plan from a terminal state (turn {turn} of {max_turns})")]
    TerminalRoot { turn: usize, max_turns: usize },
    #[error("prior has {got} actions but the task has {expected}")]
    PriorMismatch { expected: usize, got: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MctsConfig {
    pub n_simulations: usize,
    pub c_p: f64,
    pub q0: f64,
    /// Cap on tree depth below the root; the turn cap always applies.
    #[serde(default)]
    pub max_depth: Option<usize>,
    /// Ignore the policy and use a uniform prior.
    #[serde(default)]
    pub uniform_prior: bool,
    /// Keep a per-simulation trace.
    #[serde(default)]
    pub trace: bool,
}

impl Default for MctsConfig {
    fn default() -> Self {
        MctsConfig {
            n_simulations: 10,
            c_p: 1.0,
            q0: 0.0,
            max_depth: None,
            uniform_prior: false,
            trace: false,
        }
    }
}

/// Source of prior action distributions for expansion.
pub trait PriorSource {
    fn prior(&self, state: &DialogueState) -> Result<ActionDistribution, ModelError>;
}

impl PriorSource for PolicyModel {
    fn prior(&self, state: &DialogueState) -> Result<ActionDistribution, ModelError> {
        self.policy(state)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct UniformPrior(pub usize);

impl PriorSource for UniformPrior {
    fn prior(&self, _state: &DialogueState) -> Result<ActionDistribution, ModelError> {
        Ok(ActionDistribution::uniform(self.0))
    }
}

pub type NodeId = usize;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchNode {
    pub action_prefix: Vec<usize>,
    /// Simulated dialogue realised for this prefix.
    pub state: DialogueState,
    /// Critic value of `state` (unused for the root).
    pub value: f64,
    pub terminal: bool,
    pub prior: Option<ActionDistribution>,
    pub visits: Vec<u32>,
    pub q: Vec<f64>,
    pub children: Vec<Option<NodeId>>,
}

impl SearchNode {
    fn new(action_prefix: Vec<usize>, state: DialogueState, value: f64, terminal: bool, num_actions: usize) -> Self {
        SearchNode {
            action_prefix,
            state,
            value,
            terminal,
            prior: None,
            visits: vec![0; num_actions],
            q: vec![0.0; num_actions],
            children: vec![None; num_actions],
        }
    }

    pub fn is_expanded(&self) -> bool {
        self.prior.is_some()
    }

    pub fn total_visits(&self) -> u64 {
        self.visits.iter().map(|&n| u64::from(n)).sum()
    }

    pub fn depth(&self) -> usize {
        self.action_prefix.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationTrace {
    pub path: Vec<usize>,
    pub value: f64,
    pub new_prefix: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchTrace {
    pub simulations: Vec<SimulationTrace>,
    pub root_prior: Vec<f64>,
    pub root_visits: Vec<u32>,
    pub root_q: Vec<f64>,
}

/// `Q + c_p * p * sqrt(sum N) / (1 + N)`.
pub fn puct_score(q: f64, prior: f64, visits: u32, total_visits: u64, c_p: f64) -> f64 {
    q + c_p * prior * (total_visits as f64).sqrt() / (1.0 + f64::from(visits))
}

/// Applies one backup of `v` to an edge: `N += 1`, then `Q += (v - Q) / N`.
pub fn backup_edge(visits: &mut u32, q: &mut f64, v: f64) {
    *visits += 1;
    *q += (v - *q) / f64::from(*visits);
}

#[derive(Debug, Clone)]
pub struct SearchTree {
    pub nodes: Vec<SearchNode>,
    pub config: MctsConfig,
    num_actions: usize,
    max_turns: usize,
    pub policy_calls: usize,
    pub completed_simulations: usize,
    pub new_prefixes: usize,
    pub trace: Vec<SimulationTrace>,
}

impl SearchTree {
    pub fn new(root: DialogueState, num_actions: usize, max_turns: usize, config: MctsConfig) -> Self {
        let root = SearchNode::new(Vec::new(), root, 0.0, false, num_actions);
        SearchTree {
            nodes: vec![root],
            config,
            num_actions,
            max_turns,
            policy_calls: 0,
            completed_simulations: 0,
            new_prefixes: 0,
            trace: Vec::new(),
        }
    }

    pub fn root(&self) -> &SearchNode {
        &self.nodes[0]
    }

    /// PUCT argmax at `node`, lowest action id on ties.
    pub fn select(&self, node: NodeId) -> usize {
        let n = &self.nodes[node];
        let prior = n.prior.as_ref().expect("select on an unexpanded node");
        let total = n.total_visits();
        let mut best = 0;
        let mut best_score = f64::NEG_INFINITY;
        for a in 0..self.num_actions {
            let s = puct_score(n.q[a], prior.probs[a], n.visits[a], total, self.config.c_p);
            if s > best_score {
                best = a;
                best_score = s;
            }
        }
        best
    }

    /// Sets the prior from one policy call and resets the edge statistics to
    /// `N = 0`, `Q = Q0`. Makes no environment calls.
    pub fn expand(&mut self, node: NodeId, prior: &dyn PriorSource) -> Result<(), MctsError> {
        let dist = if self.config.uniform_prior {
            ActionDistribution::uniform(self.num_actions)
        } else {
            self.policy_calls += 1;
            prior.prior(&self.nodes[node].state).map_err(MctsError::EncoderFailure)?
        };
        if dist.len() != self.num_actions {
            return Err(MctsError::PriorMismatch {
                expected: self.num_actions,
                got: dist.len(),
            });
        }
        let q0 = self.config.q0;
        let n = &mut self.nodes[node];
        n.prior = Some(dist);
        n.visits.iter_mut().for_each(|v| *v = 0);
        n.q.iter_mut().for_each(|q| *q = q0);
        Ok(())
    }

    /// Critic value of a node's cached dialogue (one critic unit).
    pub fn evaluate_leaf(&self, node: NodeId, env: &Environment) -> Result<crate::env::Evaluation, MctsError> {
        env.evaluate(&self.nodes[node].state, Phase::Simulation)
            .map_err(MctsError::SimulationAborted)
    }

    pub fn backpropagate(&mut self, path: &[(NodeId, usize)], v: f64) {
        for &(node, a) in path {
            let n = &mut self.nodes[node];
            backup_edge(&mut n.visits[a], &mut n.q[a], v);
        }
    }

    fn depth_capped(&self, node: &SearchNode) -> bool {
        self.config.max_depth.is_some_and(|d| node.depth() >= d) || node.state.turn >= self.max_turns
    }

    /// One select/expand/evaluate/backpropagate iteration.
    pub fn simulate(&mut self, prior: &dyn PriorSource, env: &Environment) -> Result<(), MctsError> {
        if !self.nodes[0].is_expanded() {
            self.expand(0, prior)?;
        }
        let mut path = Vec::new();
        let mut node = 0;
        let (value, new_prefix) = loop {
            let a = self.select(node);
            path.push((node, a));
            match self.nodes[node].children[a] {
                Some(child) => {
                    let c = &self.nodes[child];
                    if c.terminal || !c.is_expanded() {
                        break (c.value, false);
                    }
                    node = child;
                }
                None => {
                    let parent = &self.nodes[node];
                    let next = env
                        .simulate_turn(&parent.state, a, Phase::Simulation)
                        .map_err(MctsError::SimulationAborted)?;
                    let mut prefix = parent.action_prefix.clone();
                    prefix.push(a);
                    let child = self.nodes.len();
                    self.nodes.push(SearchNode::new(prefix, next, 0.0, false, self.num_actions));
                    let eval = match self.evaluate_leaf(child, env) {
                        Ok(e) => e,
                        Err(e) => {
                            self.nodes.pop();
                            return Err(e);
                        }
                    };
                    let terminal = eval.success || self.depth_capped(&self.nodes[child]);
                    self.nodes[child].value = eval.reward;
                    self.nodes[child].terminal = terminal;
                    if !terminal {
                        if let Err(e) = self.expand(child, prior) {
                            self.nodes.pop();
                            return Err(e);
                        }
                    }
                    self.nodes[node].children[a] = Some(child);
                    self.new_prefixes += 1;
                    break (eval.reward, true);
                }
            }
        };
        self.backpropagate(&path, value);
        self.completed_simulations += 1;
        if self.config.trace {
            self.trace.push(SimulationTrace {
                path: path.iter().map(|&(_, a)| a).collect(),
                value,
                new_prefix,
            });
        }
        Ok(())
    }

    /// Root action with the most visits, lowest id on ties.
    pub fn best_action(&self) -> usize {
        let v = &self.root().visits;
        let mut best = 0;
        for a in 1..v.len() {
            if v[a] > v[best] {
                best = a;
            }
        }
        best
    }

    pub fn search_trace(&self) -> SearchTrace {
        let r = self.root();
        SearchTrace {
            simulations: self.trace.clone(),
            root_prior: r.prior.as_ref().map(|p| p.probs.clone()).unwrap_or_default(),
            root_visits: r.visits.clone(),
            root_q: r.q.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanOutcome {
    pub action: usize,
    pub root_visits: Vec<u32>,
    pub root_q: Vec<f64>,
    pub simulations: usize,
    pub new_prefixes: usize,
    pub policy_calls: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<SearchTrace>,
}

/// Runs `n_simulations` iterations from `root` and returns the most visited
/// root action.
pub fn plan(root: &DialogueState, prior: &dyn PriorSource, env: &Environment, cfg: &MctsConfig) -> Result<PlanOutcome, MctsError> {
    let max_turns = env.task.max_turns;
    if root.turn >= max_turns {
        return Err(MctsError::TerminalRoot {
            turn: root.turn,
            max_turns,
        });
    }
    let mut tree = SearchTree::new(root.clone(), env.task.num_actions(), max_turns, cfg.clone());
    for _ in 0..cfg.n_simulations.max(1) {
        tree.simulate(prior, env)?;
    }
    Ok(PlanOutcome {
        action: tree.best_action(),
        root_visits: tree.root().visits.clone(),
        root_q: tree.root().q.clone(),
        simulations: tree.completed_simulations,
        new_prefixes: tree.new_prefixes,
        policy_calls: tree.policy_calls,
        trace: cfg.trace.then(|| tree.search_trace()),
    })
}
