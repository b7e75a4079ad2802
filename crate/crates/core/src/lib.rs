//! Dual-process dialogue planning: a learned strategy policy (fast path)
//! and an MCTS planner (slow path) joined by an uncertainty gate, with
//! offline pretraining, MCTS-guided self-play, pluggable dialogue
//! environments and an evaluation harness.

pub mod dialogue;
pub mod env;
pub mod eval;
pub mod gate;
pub mod mcts;
pub mod policy;
pub mod pretrain;
pub mod selfplay;
pub mod train;

pub use dialogue::{Background, DialogueState, Episode, TaskKind, TaskSpec, Transition};
pub use env::Environment;
pub use mcts::{plan, MctsConfig};
pub use policy::PolicyModel;
