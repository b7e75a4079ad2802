//! The fast planner: a state encoder feeding a shared trunk with a softmax
//! policy head and a per-action Q head.

mod encoder;
mod network;

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use encoder::{fnv1a, DefaultFeaturizer, FeaturizerConfig, StateEncoder, DEFAULT_BUCKETS, DEFAULT_DECAY};
pub use network::{argmax, ActionDistribution, Activations, Gradients, PolicyParams, QValues};

use crate::dialogue::{DialogueState, StrategyCatalog, TaskKind};

pub const CHECKPOINT_VERSION: u32 = 1;
pub const DEFAULT_HIDDEN: usize = 64;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("distribution has {0} actions, need at least 2")]
    TooFewActions(usize),
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint was trained with a different encoder ({found}, expected {expected})")]
    EncoderMismatch { found: String, expected: String },
    #[error("checkpoint parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

/// On-disk checkpoint container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub task: TaskKind,
    pub encoder_hash: String,
    pub params: PolicyParams,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let bytes = std::fs::read(path)?;
        let value: serde_json::Value = serde_json::from_slice(&bytes)?;
        let found = value.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if found != CHECKPOINT_VERSION {
            return Err(ModelError::VersionMismatch {
                found,
                expected: CHECKPOINT_VERSION,
            });
        }
        let ckpt: Checkpoint = serde_json::from_value(value)?;
        ckpt.params.check_shapes()?;
        Ok(ckpt)
    }
}

/// Parameters bound to the encoder and catalog they were trained with.
#[derive(Clone)]
pub struct PolicyModel {
    pub params: PolicyParams,
    pub encoder: Arc<dyn StateEncoder>,
    pub catalog: StrategyCatalog,
}

impl std::fmt::Debug for PolicyModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PolicyModel")
            .field("dims", &self.params.dims())
            .field("task", &self.catalog.task)
            .finish()
    }
}

impl PolicyModel {
    pub fn new(params: PolicyParams, encoder: Arc<dyn StateEncoder>, catalog: StrategyCatalog) -> Result<Self, ModelError> {
        if params.input_dim != encoder.dim() {
            return Err(ModelError::DimensionMismatch {
                expected: encoder.dim(),
                got: params.input_dim,
            });
        }
        if params.num_actions != catalog.len() {
            return Err(ModelError::DimensionMismatch {
                expected: catalog.len(),
                got: params.num_actions,
            });
        }
        params.check_shapes()?;
        Ok(PolicyModel { params, encoder, catalog })
    }

    /// Fresh model with the default featurizer and zero weights, i.e. a
    /// uniform policy.
    pub fn untrained(catalog: StrategyCatalog, max_turns: usize) -> Self {
        let enc = DefaultFeaturizer::new(catalog.len(), max_turns);
        let params = PolicyParams::zeros(enc.dim(), DEFAULT_HIDDEN, catalog.len());
        PolicyModel {
            params,
            encoder: Arc::new(enc),
            catalog,
        }
    }

    pub fn random<R: rand::Rng + ?Sized>(catalog: StrategyCatalog, max_turns: usize, hidden: usize, rng: &mut R) -> Self {
        let enc = DefaultFeaturizer::new(catalog.len(), max_turns);
        let params = PolicyParams::init(enc.dim(), hidden, catalog.len(), rng);
        PolicyModel {
            params,
            encoder: Arc::new(enc),
            catalog,
        }
    }

    pub fn features(&self, state: &DialogueState) -> Vec<f64> {
        self.encoder.encode(state, &self.catalog)
    }

    pub fn policy(&self, state: &DialogueState) -> Result<ActionDistribution, ModelError> {
        self.params.policy_forward(&self.features(state))
    }

    pub fn q_values(&self, state: &DialogueState) -> Result<QValues, ModelError> {
        self.params.q_forward(&self.features(state))
    }

    pub fn greedy_action(&self, state: &DialogueState) -> Result<usize, ModelError> {
        Ok(self.policy(state)?.argmax())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            task: self.catalog.task,
            encoder_hash: self.encoder.config_hash(),
            params: self.params.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        self.checkpoint().save(path)
    }

    /// Loads parameters into a model with the given encoder and catalog,
    /// rejecting checkpoints from a different encoder or shape.
    pub fn load(path: &Path, encoder: Arc<dyn StateEncoder>, catalog: StrategyCatalog) -> Result<Self, ModelError> {
        let ckpt = Checkpoint::load(path)?;
        let expected = encoder.config_hash();
        if ckpt.params.input_dim != encoder.dim() {
            return Err(ModelError::DimensionMismatch {
                expected: encoder.dim(),
                got: ckpt.params.input_dim,
            });
        }
        if ckpt.params.num_actions != catalog.len() {
            return Err(ModelError::DimensionMismatch {
                expected: catalog.len(),
                got: ckpt.params.num_actions,
            });
        }
        if ckpt.encoder_hash != expected {
            return Err(ModelError::EncoderMismatch {
                found: ckpt.encoder_hash,
                expected,
            });
        }
        Self::new(ckpt.params, encoder, catalog)
    }
}
