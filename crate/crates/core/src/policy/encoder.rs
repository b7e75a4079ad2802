//! State featurizers.
//!
//! A [`StateEncoder`] turns a dialogue state into a fixed-length real vector
//! consumed by the policy trunk. The default featurizer is a cheap stand-in for
//! a pretrained language-model encoder; anything producing a stable vector can
//! be plugged in behind the same trait.

use sha2::{Digest, Sha256};

use crate::dialogue::{DialogueState, Speaker, StrategyCatalog, TaskKind};

pub trait StateEncoder: Send + Sync {
    fn dim(&self) -> usize;

    fn encode(&self, state: &DialogueState, catalog: &StrategyCatalog) -> Vec<f64>;

    /// Stable identifier of the encoder configuration, stored in checkpoints.
    fn config_hash(&self) -> String;
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeaturizerConfig {
    pub num_actions: usize,
    pub max_turns: usize,
    pub buckets: usize,
    pub decay: f64,
}

/// Layout: `[turn/T | one-hot last strategy (A) | decayed strategy bag (A) |
/// hashed bag of words of the last user utterance | price gap]`.
#[derive(Debug, Clone)]
pub struct DefaultFeaturizer {
    cfg: FeaturizerConfig,
}

pub const DEFAULT_BUCKETS: usize = 64;
pub const DEFAULT_DECAY: f64 = 0.5;

impl DefaultFeaturizer {
    pub fn new(num_actions: usize, max_turns: usize) -> Self {
        Self::with_config(FeaturizerConfig {
            num_actions,
            max_turns,
            buckets: DEFAULT_BUCKETS,
            decay: DEFAULT_DECAY,
        })
    }

    pub fn with_config(cfg: FeaturizerConfig) -> Self {
        assert!(cfg.num_actions > 0 && cfg.buckets > 0 && cfg.max_turns > 0);
        DefaultFeaturizer { cfg }
    }

    pub fn config(&self) -> &FeaturizerConfig {
        &self.cfg
    }
}

impl StateEncoder for DefaultFeaturizer {
    fn dim(&self) -> usize {
        1 + 2 * self.cfg.num_actions + self.cfg.buckets + 1
    }

    fn encode(&self, state: &DialogueState, catalog: &StrategyCatalog) -> Vec<f64> {
        let a = self.cfg.num_actions;
        let mut x = vec![0.0; self.dim()];
        x[0] = state.turn as f64 / self.cfg.max_turns as f64;

        let seq = state.strategy_sequence();
        if let Some(&last) = seq.last() {
            if last < a {
                x[1 + last] = 1.0;
            }
        }
        let mut w = 1.0;
        for &s in seq.iter().rev() {
            if s < a {
                x[1 + a + s] += w;
            }
            w *= self.cfg.decay;
        }

        let bow = 1 + 2 * a;
        if let Some(u) = state.last_user() {
            let tokens = tokenize(&u.text);
            let n = tokens.len().max(1) as f64;
            for t in &tokens {
                let b = (fnv1a(t.as_bytes()) % self.cfg.buckets as u64) as usize;
                x[bow + b] += 1.0 / n;
            }
        }

        if catalog.task == TaskKind::CraigslistBargain {
            x[bow + self.cfg.buckets] = price_gap(state);
        }
        x
    }

    fn config_hash(&self) -> String {
        let c = &self.cfg;
        let desc = format!(
            "default-featurizer/v1;a={};t={};buckets={};decay={:e}",
            c.num_actions, c.max_turns, c.buckets, c.decay
        );
        hex::encode(Sha256::digest(desc.as_bytes()))
    }
}

fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric() && c != '\'')
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// 64-bit FNV-1a, stable across platforms and releases.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Normalized distance between the seller's latest quoted price and the
/// buyer's target: 1 at the listed price, 0 at the target.
fn price_gap(state: &DialogueState) -> f64 {
    let bg = &state.background;
    let (Some(listed), Some(target)) = (bg.listed_price, bg.buyer_target) else {
        return 0.0;
    };
    if listed <= target {
        return 0.0;
    }
    let quoted = state
        .history
        .iter()
        .rev()
        .filter(|u| u.speaker == Speaker::User)
        .find_map(|u| last_price(&u.text))
        .unwrap_or(listed);
    (quoted - target) / (listed - target)
}

pub(crate) fn last_price(text: &str) -> Option<f64> {
    use std::sync::OnceLock;
    static RE: OnceLock<regex::Regex> = OnceLock::new();
    let re = RE.get_or_init(|| regex::Regex::new(r"\$\s?(\d[\d,]*(?:\.\d+)?)").expect("price regex"));
    re.captures_iter(text)
        .last()
        .and_then(|c| c[1].replace(',', "").parse().ok())
}
