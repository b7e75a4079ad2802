//! Deterministic scripted simulator.
//!
//! A hidden score starts at the case's `initial_score` and moves by a
//! per-strategy effect that may depend on the phase of the turn
//! (`(turn + phase_offset) % phases`). The critic maps the hidden score to a
//! verdict through ascending score bands; optional noise jitters the band
//! edges per critic sample from a seeded generator. Everything is a pure
//! function of the case and the strategy sequence in the history, so a
//! replayed dialogue always produces the same verdicts.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dialogue::{
    is_success, Background, DialogueState, SimCase, Strategy, TaskKind, TaskSpec,
};
use crate::eval::compute_sl;
use crate::policy::fnv1a;

use super::{EnvError, RoleBackend};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictBand {
    /// Lower edge of the band; ignored for the first band.
    pub min_score: f64,
    pub verdict: String,
    /// What the simulated user says while in this band.
    pub user_line: String,
}

/// Seller behaviour for bargaining tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BargainSim {
    /// Price drop per point of hidden score.
    pub concession_per_point: f64,
    /// Strategy id that accepts the current offer.
    pub agree_action: usize,
    /// Minimum hidden score at which the seller accepts an agreement.
    pub deal_threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedSimSpec {
    pub num_actions: usize,
    /// `effects[phase][action]`.
    pub effects: Vec<Vec<f64>>,
    /// User-text cue announcing the phase of the next turn, one per phase.
    pub phase_cues: Vec<String>,
    pub bands: Vec<VerdictBand>,
    #[serde(default)]
    pub score_bounds: Option<(f64, f64)>,
    #[serde(default)]
    pub noise: f64,
    #[serde(default)]
    pub noise_seed: u64,
    /// Initial scores cases are drawn from.
    pub initial_scores: Vec<f64>,
    #[serde(default)]
    pub bargain: Option<BargainSim>,
}

fn band(min_score: f64, verdict: &str, user_line: &str) -> VerdictBand {
    VerdictBand {
        min_score,
        verdict: verdict.into(),
        user_line: user_line.into(),
    }
}

impl ScriptedSimSpec {
    /// Emotional-support style bands (worse / same / better / solved).
    pub fn support_bands(solved_at: f64) -> Vec<VerdictBand> {
        vec![
            band(f64::NEG_INFINITY, "No, the Patient feels worse.", "I feel worse than before."),
            band(0.0, "No, the Patient feels the same.", "I still feel the same."),
            band(2.0, "No, but the Patient feels better.", "I feel a bit better."),
            band(solved_at, "Yes, the Patient’s issue has been solved.", "Thank you, I feel much better now!"),
        ]
    }

    pub fn tutoring_bands(solved_at: f64) -> Vec<VerdictBand> {
        vec![
            band(f64::NEG_INFINITY, "No, the Student made an incorrect translation.", "Is it il cane?"),
            band(0.0, "No, the Student did not try to translate.", "I really don't know."),
            band(2.0, "No, the Student only correctly translated a part of the exercise.", "Il gatto is... something?"),
            band(solved_at, "Yes, the Student correctly translated the whole sentence of the exercise.", "Il gatto è rosso!"),
        ]
    }

    /// The two-phase task: in phase 0 strategy 0 is strongly helpful and
    /// strategy 2 mildly so; in phase 1 strategies 3 and 4 take those roles.
    /// Everything else sets the user back. The phase of the upcoming turn
    /// is only visible through the user's wording.
    pub fn two_phase(task: TaskKind, num_actions: usize) -> Self {
        assert!(num_actions >= 5, "two-phase task needs at least 5 strategies");
        let solved_at = 6.0;
        let mut p0 = vec![-1.0; num_actions];
        let mut p1 = vec![-1.0; num_actions];
        p0[0] = 2.0;
        p0[2] = 1.0;
        p1[3] = 2.0;
        p1[4] = 1.0;
        let bands = match task {
            TaskKind::Cima => Self::tutoring_bands(solved_at),
            _ => Self::support_bands(solved_at),
        };
        ScriptedSimSpec {
            num_actions,
            effects: vec![p0, p1],
            phase_cues: vec![
                "I keep worrying about what comes next.".into(),
                "Honestly I just feel so alone with this.".into(),
            ],
            bands,
            score_bounds: Some((-3.0, 8.0)),
            noise: 0.0,
            noise_seed: 0,
            initial_scores: vec![0.0, 1.0],
            bargain: None,
        }
    }

    /// Bargaining task: pressure strategies raise the hidden score, which
    /// lowers the seller's quote; agreeing closes the deal once the seller
    /// is ready.
    pub fn bargaining(num_actions: usize) -> Self {
        assert!(num_actions >= 10);
        let mut eff = vec![0.0; num_actions];
        eff[3] = 1.0; // propose the first price
        eff[4] = 1.5; // counter price
        eff[5] = 1.0; // comparatives
        eff[10] = 0.5; // disagree
        eff[0] = -0.5;
        ScriptedSimSpec {
            num_actions,
            effects: vec![eff],
            phase_cues: vec![String::new()],
            bands: vec![band(f64::NEG_INFINITY, "They have not reached a deal.", "")],
            score_bounds: Some((0.0, 6.0)),
            noise: 0.0,
            noise_seed: 0,
            initial_scores: vec![0.0],
            bargain: Some(BargainSim {
                concession_per_point: 0.08,
                agree_action: 9,
                deal_threshold: 1.0,
            }),
        }
    }

    pub fn phases(&self) -> usize {
        self.effects.len()
    }

    pub fn phase_at(&self, case: &SimCase, turn: usize) -> usize {
        (turn + case.phase_offset) % self.phases()
    }

    /// Strategy with the largest immediate effect at `turn` (lowest id on
    /// ties); a myopic expert used to generate logged data.
    pub fn greedy_action(&self, case: &SimCase, turn: usize) -> usize {
        crate::policy::argmax(&self.effects[self.phase_at(case, turn)])
    }

    fn clamp(&self, h: f64) -> f64 {
        match self.score_bounds {
            Some((lo, hi)) => h.clamp(lo, hi),
            None => h,
        }
    }

    pub fn hidden_score(&self, case: &SimCase, actions: &[usize]) -> f64 {
        let mut h = case.initial_score;
        for (turn, &a) in actions.iter().enumerate() {
            let phase = self.phase_at(case, turn);
            h = self.clamp(h + self.effects[phase].get(a).copied().unwrap_or(0.0));
        }
        h
    }

    /// Index of the noise-free band for `score`.
    pub fn band_index(&self, score: f64) -> usize {
        self.bands
            .iter()
            .enumerate()
            .skip(1)
            .filter(|(_, b)| score >= b.min_score)
            .map(|(i, _)| i)
            .next_back()
            .unwrap_or(0)
    }

    fn noisy_band_index(&self, score: f64, key: u64) -> usize {
        if self.noise <= 0.0 {
            return self.band_index(score);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        let mut idx = 0;
        for (i, b) in self.bands.iter().enumerate().skip(1) {
            let edge = b.min_score + self.noise * rng.gen_range(-1.0..=1.0);
            if score >= edge {
                idx = i;
            }
        }
        idx
    }

    fn offer(&self, state: &DialogueState, score: f64) -> f64 {
        let bg = &state.background;
        let listed = bg.listed_price.unwrap_or(100.0);
        let target = bg.buyer_target.unwrap_or(listed * 0.7);
        let per_point = self.bargain.as_ref().map_or(0.0, |b| b.concession_per_point);
        let floor = target - 0.25 * (listed - target);
        (listed - per_point * listed * score).max(floor).round()
    }

    /// Deal price if the last strategy accepted a standing offer.
    fn deal(&self, state: &DialogueState, case: &SimCase, actions: &[usize]) -> Option<f64> {
        let b = self.bargain.as_ref()?;
        let (&last, before) = actions.split_last()?;
        let h = self.hidden_score(case, before);
        (last == b.agree_action && h >= b.deal_threshold).then(|| self.offer(state, h))
    }

    /// Draws the background for evaluation case `index`.
    pub fn sample_case<R: Rng + ?Sized>(&self, task: TaskKind, index: usize, rng: &mut R) -> Background {
        let sim = SimCase {
            initial_score: self.initial_scores[rng.gen_range(0..self.initial_scores.len())],
            phase_offset: rng.gen_range(0..self.phases()),
        };
        let cue = &self.phase_cues[self.phase_at(&sim, 0)];
        let mut bg = Background {
            case_id: Some(format!("case-{index}")),
            sim: Some(sim),
            ..Default::default()
        };
        match task {
            TaskKind::CraigslistBargain => {
                let listed = f64::from(rng.gen_range(5u32..40)) * 10.0;
                bg.item_name = Some("bike".into());
                bg.item_description = Some("A lightly used city bike.".into());
                bg.listed_price = Some(listed);
                bg.buyer_target = Some((listed * 0.7).round());
            }
            TaskKind::Cima => {
                bg.exercise = Some("The cat is red".into());
                bg.situation = Some(format!("I'm not sure how to say cat. {cue}"));
            }
            _ => {
                bg.emotion_type = Some("anxiety".into());
                bg.problem_type = Some("job crisis".into());
                bg.situation = Some(format!("I lost my job last week. {cue}"));
            }
        }
        bg
    }

    /// Noise-free reward and success flag after `actions`, straight from the
    /// spec tables (independent of the environment step path).
    pub fn noise_free_outcome(&self, task: &TaskSpec, state: &DialogueState, case: &SimCase, actions: &[usize]) -> (f64, bool) {
        if self.bargain.is_some() {
            let bg = &state.background;
            return match self.deal(state, case, actions) {
                Some(price) => {
                    let sl = compute_sl(
                        Some(price),
                        bg.listed_price.unwrap_or(100.0),
                        bg.buyer_target.unwrap_or(70.0),
                    )
                    .unwrap_or(0.0);
                    (sl.min(1.0), true)
                }
                None => (0.0, false),
            };
        }
        let verdict = &self.bands[self.band_index(self.hidden_score(case, actions))].verdict;
        let score = task
            .reward_map
            .lookup(verdict)
            .map(|v| v.score)
            .unwrap_or(f64::NAN);
        (score, is_success(score, &task.reward_map))
    }
}

/// Backend that plays all three roles from a [`ScriptedSimSpec`].
#[derive(Debug, Clone)]
pub struct ScriptedBackend {
    pub spec: ScriptedSimSpec,
}

impl ScriptedBackend {
    pub fn new(spec: ScriptedSimSpec) -> Self {
        ScriptedBackend { spec }
    }

    fn noise_key(&self, state: &DialogueState, actions: &[usize], sample: usize) -> u64 {
        let mut bytes = Vec::with_capacity(16 + 8 * actions.len());
        bytes.extend_from_slice(&self.spec.noise_seed.to_le_bytes());
        if let Some(id) = &state.background.case_id {
            bytes.extend_from_slice(id.as_bytes());
        }
        for &a in actions {
            bytes.extend_from_slice(&(a as u64).to_le_bytes());
        }
        bytes.extend_from_slice(&(sample as u64).to_le_bytes());
        fnv1a(&bytes)
    }
}

impl RoleBackend for ScriptedBackend {
    fn system_respond(&self, _state: &DialogueState, strategy: &Strategy) -> Result<String, EnvError> {
        Ok(format!("[{}] {}", strategy.name, strategy.instruction))
    }

    fn user_respond(&self, state: &DialogueState) -> Result<String, EnvError> {
        let case = state.background.sim.unwrap_or_default();
        let actions = state.strategy_sequence();
        if self.spec.bargain.is_some() {
            if let Some(price) = self.spec.deal(state, &case, &actions) {
                return Ok(format!("Deal, ${price} it is."));
            }
            let offer = self.spec.offer(state, self.spec.hidden_score(&case, &actions));
            return Ok(format!("The best I can do is ${offer}."));
        }
        let h = self.spec.hidden_score(&case, &actions);
        let line = &self.spec.bands[self.spec.band_index(h)].user_line;
        let cue = &self.spec.phase_cues[self.spec.phase_at(&case, actions.len())];
        Ok(format!("{line} {cue}").trim().to_string())
    }

    fn critic_judge(&self, state: &DialogueState, sample: usize) -> Result<String, EnvError> {
        let case = state.background.sim.unwrap_or_default();
        let actions = state.strategy_sequence();
        if self.spec.bargain.is_some() {
            return Ok(match self.spec.deal(state, &case, &actions) {
                Some(price) => format!("They have reached a deal at ${price}."),
                None => "They have not reached a deal.".into(),
            });
        }
        let h = self.spec.hidden_score(&case, &actions);
        let idx = self.spec.noisy_band_index(h, self.noise_key(state, &actions, sample));
        Ok(self.spec.bands[idx].verdict.clone())
    }
}

/// Exhaustive-search reference over all action sequences of length up to
/// the turn cap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OraclePlan {
    pub best_actions: Vec<usize>,
    pub best_return: f64,
    /// Best achievable return when starting with each action.
    pub first_action_returns: Vec<f64>,
}

impl OraclePlan {
    pub fn best_first_action(&self) -> usize {
        crate::policy::argmax(&self.first_action_returns)
    }

    /// Gap between the best and second-best first action.
    pub fn first_action_margin(&self) -> f64 {
        let mut v = self.first_action_returns.clone();
        v.sort_by(|a, b| b.total_cmp(a));
        v[0] - v.get(1).copied().unwrap_or(f64::NEG_INFINITY)
    }
}

/// Enumerates every strategy sequence from `state` (noise-free), stopping
/// at success or the turn cap, and returns the max-return plan.
pub fn optimal_plan(spec: &ScriptedSimSpec, task: &TaskSpec, state: &DialogueState) -> OraclePlan {
    let case = state.background.sim.unwrap_or_default();
    let prefix = state.strategy_sequence();
    let remaining = task.max_turns.saturating_sub(state.turn);
    let mut first_action_returns = vec![f64::NEG_INFINITY; spec.num_actions];
    let mut best = (f64::NEG_INFINITY, Vec::new());
    for a in 0..spec.num_actions {
        let mut seq = prefix.clone();
        seq.push(a);
        let (ret, tail) = best_from(spec, task, state, &case, &mut seq, remaining - 1);
        first_action_returns[a] = ret;
        if ret > best.0 {
            let mut actions = vec![a];
            actions.extend(tail);
            best = (ret, actions);
        }
    }
    OraclePlan {
        best_actions: best.1,
        best_return: best.0,
        first_action_returns,
    }
}

/// Return collected from the last action of `seq` onward, discounted from
/// that action, maximised over continuations.
fn best_from(
    spec: &ScriptedSimSpec,
    task: &TaskSpec,
    state: &DialogueState,
    case: &SimCase,
    seq: &mut Vec<usize>,
    remaining: usize,
) -> (f64, Vec<usize>) {
    let (r, success) = spec.noise_free_outcome(task, state, case, seq);
    if success || remaining == 0 {
        return (r, Vec::new());
    }
    let mut best = (f64::NEG_INFINITY, Vec::new());
    for a in 0..spec.num_actions {
        seq.push(a);
        let (ret, tail) = best_from(spec, task, state, case, seq, remaining - 1);
        seq.pop();
        if ret > best.0 {
            let mut actions = vec![a];
            actions.extend(tail);
            best = (ret, actions);
        }
    }
    (r + task.gamma * best.0, best.1)
}

impl ScriptedSimSpec {
    /// Exact success probability of the uniform-random policy from the
    /// case's initial state (noise-free dynamics).
    pub fn random_policy_success(&self, task: &TaskSpec, state: &DialogueState) -> f64 {
        let case = state.background.sim.unwrap_or_default();
        let mut memo: HashMap<(usize, u64), f64> = HashMap::new();
        self.random_success_from(task, state, &case, &mut state.strategy_sequence(), &mut memo)
    }

    fn random_success_from(
        &self,
        task: &TaskSpec,
        state: &DialogueState,
        case: &SimCase,
        seq: &mut Vec<usize>,
        memo: &mut HashMap<(usize, u64), f64>,
    ) -> f64 {
        let turn = seq.len();
        if turn >= task.max_turns {
            return 0.0;
        }
        // Without a bargaining component the future depends only on
        // (turn, hidden score).
        let key = (turn, self.hidden_score(case, seq).to_bits());
        if self.bargain.is_none() {
            if let Some(&p) = memo.get(&key) {
                return p;
            }
        }
        let mut total = 0.0;
        for a in 0..self.num_actions {
            seq.push(a);
            let (_, success) = self.noise_free_outcome(task, state, case, seq);
            total += if success {
                1.0
            } else {
                self.random_success_from(task, state, case, seq, memo)
            };
            seq.pop();
        }
        let p = total / self.num_actions as f64;
        if self.bargain.is_none() {
            memo.insert(key, p);
        }
        p
    }
}
