//! Dialogue MDP: strategies, states, critic reward maps, transitions and
//! episodes, plus the discounted-return arithmetic shared by both training
//! stages.

use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DialogueError {
    #[error("critic verdict {verdict:?} matched {matches} reward-map entries (expected exactly one)")]
    UnrecognizedVerdict { verdict: String, matches: usize },
    #[error("turn index {index} out of range for episode of length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("invalid catalog: {0}")]
    InvalidCatalog(String),
    #[error("empty verdict list")]
    NoVerdicts,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error at line {line}: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    #[serde(alias = "ESConv")]
    Esconv,
    #[serde(alias = "CIMA")]
    Cima,
    #[serde(alias = "CraigslistBargain", alias = "cb")]
    CraigslistBargain,
    Custom,
}

impl TaskKind {
    pub fn dir_name(self) -> &'static str {
        match self {
            TaskKind::Esconv => "esconv",
            TaskKind::Cima => "cima",
            TaskKind::CraigslistBargain => "cb",
            TaskKind::Custom => "custom",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.dir_name())
    }
}

impl std::str::FromStr for TaskKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "esconv" => Ok(TaskKind::Esconv),
            "cima" => Ok(TaskKind::Cima),
            "cb" | "craigslistbargain" | "craigslist_bargain" => Ok(TaskKind::CraigslistBargain),
            "custom" => Ok(TaskKind::Custom),
            other => Err(format!("unknown task {other:?}")),
        }
    }
}

/// A discrete dialogue action together with the instruction text injected
/// into the system-role prompt when the action is taken.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Strategy {
    pub id: usize,
    pub name: String,
    pub instruction: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StrategyCatalog {
    pub task: TaskKind,
    pub strategies: Vec<Strategy>,
}

const ESCONV_STRATEGIES: &str = include_str!("../prompts/esconv/strategies.tsv");
const CIMA_STRATEGIES: &str = include_str!("../prompts/cima/strategies.tsv");
const CB_STRATEGIES: &str = include_str!("../prompts/cb/strategies.tsv");

impl StrategyCatalog {
    /// Builds a catalog from `(name, instruction)` pairs, assigning ids in order.
    pub fn new<I, S>(task: TaskKind, entries: I) -> Result<Self, DialogueError>
    where
        I: IntoIterator<Item = (S, S)>,
        S: Into<String>,
    {
        let strategies = entries
            .into_iter()
            .enumerate()
            .map(|(id, (name, instruction))| Strategy {
                id,
                name: name.into(),
                instruction: instruction.into(),
            })
            .collect();
        let catalog = StrategyCatalog { task, strategies };
        catalog.validate()?;
        Ok(catalog)
    }

    pub fn builtin(task: TaskKind) -> Option<Self> {
        let table = match task {
            TaskKind::Esconv => ESCONV_STRATEGIES,
            TaskKind::Cima => CIMA_STRATEGIES,
            TaskKind::CraigslistBargain => CB_STRATEGIES,
            TaskKind::Custom => return None,
        };
        let entries = table.lines().filter(|l| !l.trim().is_empty()).map(|line| {
            let (name, instruction) = line.split_once('\t').expect("strategy table row");
            (name, instruction)
        });
        Some(Self::new(task, entries).expect("builtin catalog is valid"))
    }

    pub fn validate(&self) -> Result<(), DialogueError> {
        if self.strategies.is_empty() {
            return Err(DialogueError::InvalidCatalog("no strategies".into()));
        }
        for (i, s) in self.strategies.iter().enumerate() {
            if s.id != i {
                return Err(DialogueError::InvalidCatalog(format!(
                    "strategy {:?} has id {} at position {}",
                    s.name, s.id, i
                )));
            }
            if s.instruction.trim().is_empty() {
                return Err(DialogueError::InvalidCatalog(format!(
                    "strategy {:?} has an empty instruction",
                    s.name
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.strategies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.strategies.is_empty()
    }

    pub fn get(&self, id: usize) -> Option<&Strategy> {
        self.strategies.get(id)
    }

    pub fn by_name(&self, name: &str) -> Option<&Strategy> {
        self.strategies.iter().find(|s| s.name.eq_ignore_ascii_case(name))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Speaker {
    System,
    User,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub speaker: Speaker,
    pub text: String,
    pub turn_index: usize,
    /// Strategy that drove a system utterance, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategy: Option<usize>,
}

/// Case metadata. Only the fields relevant to the task are populated.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Background {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub case_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub situation: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub emotion_type: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub problem_type: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exercise: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub item_name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub item_description: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub listed_price: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub buyer_target: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sim: Option<SimCase>,
}

/// Hidden parameters read by the scripted simulator.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SimCase {
    pub initial_score: f64,
    pub phase_offset: usize,
}

/// The MDP state: case background plus the utterance history.
///
/// `turn` counts completed system/user exchanges after the task opener.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialogueState {
    pub background: Background,
    pub history: Vec<Utterance>,
    pub turn: usize,
}

impl DialogueState {
    /// Starts a dialogue from the task opener (e.g. the patient's situation).
    pub fn new(background: Background, opener: Vec<(Speaker, String)>) -> Self {
        let history = opener
            .into_iter()
            .enumerate()
            .map(|(turn_index, (speaker, text))| Utterance {
                speaker,
                text,
                turn_index,
                strategy: None,
            })
            .collect();
        DialogueState {
            background,
            history,
            turn: 0,
        }
    }

    /// Returns the successor state after one system/user exchange.
    pub fn with_exchange(&self, system: Utterance, user: Utterance) -> Self {
        let mut next = self.clone();
        let base = next.history.len();
        next.history.push(Utterance {
            speaker: Speaker::System,
            turn_index: base,
            ..system
        });
        next.history.push(Utterance {
            speaker: Speaker::User,
            turn_index: base + 1,
            ..user
        });
        next.turn += 1;
        next
    }

    pub fn last_user(&self) -> Option<&Utterance> {
        self.history.iter().rev().find(|u| u.speaker == Speaker::User)
    }

    pub fn last_system(&self) -> Option<&Utterance> {
        self.history.iter().rev().find(|u| u.speaker == Speaker::System)
    }

    /// Strategies of the system turns in order, skipping untagged utterances.
    pub fn strategy_sequence(&self) -> Vec<usize> {
        self.history
            .iter()
            .filter(|u| u.speaker == Speaker::System)
            .filter_map(|u| u.strategy)
            .collect()
    }

    pub fn next_turn_index(&self) -> usize {
        self.history.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictScore {
    /// Canonical label, e.g. "feel better".
    pub verdict: String,
    pub score: f64,
    /// Extra key phrases accepted for this entry besides the label.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub phrases: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardMap {
    pub verdicts: Vec<VerdictScore>,
    pub success_score: f64,
}

impl RewardMap {
    pub fn esconv() -> Self {
        RewardMap {
            verdicts: vec![
                entry("feel worse", -1.0, &["feels worse"]),
                entry("feel the same", -0.5, &["feels the same"]),
                entry("feel better", 0.1, &["feels better"]),
                entry("solved", 1.0, &[]),
            ],
            success_score: 1.0,
        }
    }

    pub fn cima() -> Self {
        RewardMap {
            verdicts: vec![
                entry("incorrect answer", -1.0, &["incorrect translation"]),
                entry("no answer", -0.5, &["did not try to translate"]),
                entry(
                    "partially correct",
                    0.5,
                    &["partially correct answer", "only correctly translated a part"],
                ),
                entry("correct answer", 1.0, &["correctly translated the whole sentence"]),
            ],
            success_score: 1.0,
        }
    }

    /// Bargaining verdicts carry a price, so the map only covers the no-deal
    /// sentence; deal rewards come from the sale-to-list ratio.
    pub fn bargain() -> Self {
        RewardMap {
            verdicts: vec![entry("not reached a deal", 0.0, &[])],
            success_score: 1.0,
        }
    }

    pub fn for_task(task: TaskKind) -> Self {
        match task {
            TaskKind::Esconv | TaskKind::Custom => Self::esconv(),
            TaskKind::Cima => Self::cima(),
            TaskKind::CraigslistBargain => Self::bargain(),
        }
    }

    /// Finds the single entry matched by `verdict`.
    pub fn lookup(&self, verdict: &str) -> Result<&VerdictScore, DialogueError> {
        let sentence = first_sentence(verdict).to_lowercase();
        // (entry index, match start, match end)
        let mut hits: Vec<(usize, usize, usize)> = Vec::new();
        for (i, e) in self.verdicts.iter().enumerate() {
            let phrases = std::iter::once(&e.verdict).chain(e.phrases.iter());
            for p in phrases {
                let p = p.to_lowercase();
                for (start, _) in sentence.match_indices(&p) {
                    let end = start + p.len();
                    if on_word_boundary(&sentence, start, end) {
                        hits.push((i, start, end));
                    }
                }
            }
        }
        // A match nested inside a longer match of another entry is shadowed
        // ("correct answer" inside "incorrect answer").
        let kept: Vec<usize> = hits
            .iter()
            .filter(|&&(i, s, e)| {
                !hits
                    .iter()
                    .any(|&(j, s2, e2)| j != i && s2 <= s && e <= e2 && (e2 - s2) > (e - s))
            })
            .map(|&(i, _, _)| i)
            .collect();
        let mut distinct = kept.clone();
        distinct.sort_unstable();
        distinct.dedup();
        match distinct.as_slice() {
            [only] => Ok(&self.verdicts[*only]),
            _ => Err(DialogueError::UnrecognizedVerdict {
                verdict: verdict.to_string(),
                matches: distinct.len(),
            }),
        }
    }
}

fn entry(verdict: &str, score: f64, phrases: &[&str]) -> VerdictScore {
    VerdictScore {
        verdict: verdict.to_string(),
        score,
        phrases: phrases.iter().map(|p| p.to_string()).collect(),
    }
}

fn on_word_boundary(s: &str, start: usize, end: usize) -> bool {
    let before = s[..start].chars().next_back();
    let after = s[end..].chars().next();
    !before.is_some_and(char::is_alphanumeric) && !after.is_some_and(char::is_alphanumeric)
}

/// First sentence of a critic reply: text up to the first `.`, `!` or `?`
/// that ends a word, or the first line break.
pub fn first_sentence(text: &str) -> &str {
    let text = text.trim_start();
    let line = text.lines().next().unwrap_or("");
    let bytes = line.as_bytes();
    for (i, &b) in bytes.iter().enumerate() {
        if matches!(b, b'.' | b'!' | b'?') {
            let next = bytes.get(i + 1);
            if next.is_none() || next.is_some_and(|c| c.is_ascii_whitespace()) {
                return &line[..=i];
            }
        }
    }
    line
}

/// Mean of the mapped scores of `verdicts`.
pub fn map_verdicts_to_reward<S: AsRef<str>>(
    verdicts: &[S],
    map: &RewardMap,
) -> Result<f64, DialogueError> {
    if verdicts.is_empty() {
        return Err(DialogueError::NoVerdicts);
    }
    let mut total = 0.0;
    for v in verdicts {
        total += map.lookup(v.as_ref())?.score;
    }
    Ok(total / verdicts.len() as f64)
}

pub fn is_success(reward: f64, map: &RewardMap) -> bool {
    reward >= map.success_score
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub catalog: StrategyCatalog,
    pub reward_map: RewardMap,
    pub max_turns: usize,
    pub gamma: f64,
    pub critic_samples: usize,
}

impl TaskSpec {
    pub fn builtin(task: TaskKind) -> Option<Self> {
        let catalog = StrategyCatalog::builtin(task)?;
        let max_turns = match task {
            TaskKind::CraigslistBargain => 5,
            _ => 8,
        };
        Some(TaskSpec {
            catalog,
            reward_map: RewardMap::for_task(task),
            max_turns,
            gamma: 0.999,
            critic_samples: 10,
        })
    }

    pub fn task(&self) -> TaskKind {
        self.catalog.task
    }

    pub fn num_actions(&self) -> usize {
        self.catalog.len()
    }

    pub fn load_json(path: &Path) -> Result<Self, DialogueError> {
        let text = std::fs::read_to_string(path)?;
        let spec: TaskSpec =
            serde_json::from_str(&text).map_err(|source| DialogueError::Json { line: 1, source })?;
        spec.catalog.validate()?;
        Ok(spec)
    }
}

/// Who picked the action recorded in a transition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionSource {
    Policy,
    Mcts,
    Logged,
    Human,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: DialogueState,
    pub action: usize,
    pub reward: f64,
    pub next_state: DialogueState,
    pub done: bool,
    pub verdicts: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<ActionSource>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub task: TaskKind,
    pub transitions: Vec<Transition>,
    pub success: bool,
    pub turns: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deal_price: Option<f64>,
    /// Free-form provenance tag, e.g. "selfplay" or "human".
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tag: Option<String>,
}

impl Episode {
    pub fn new(task: TaskKind) -> Self {
        Episode {
            task,
            transitions: Vec::new(),
            success: false,
            turns: 0,
            deal_price: None,
            tag: None,
        }
    }

    pub fn push(&mut self, transition: Transition) {
        self.transitions.push(transition);
        self.turns = self.transitions.len();
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.transitions.iter().map(|t| t.reward).collect()
    }

    pub fn final_state(&self) -> Option<&DialogueState> {
        self.transitions.last().map(|t| &t.next_state)
    }
}

/// Discounted return from 1-based turn `t` to the end of the episode,
/// `sum_{k >= t} gamma^(k - t) r_k`.
pub fn cumulative_return(episode: &Episode, t: usize, gamma: f64) -> Result<f64, DialogueError> {
    let len = episode.transitions.len();
    if t == 0 || t > len {
        return Err(DialogueError::IndexOutOfRange { index: t, len });
    }
    Ok(discounted_returns(&episode.rewards(), gamma)[t - 1])
}

/// Returns-to-go for every position of `rewards`.
pub fn discounted_returns(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for (i, r) in rewards.iter().enumerate().rev() {
        acc = r + gamma * acc;
        out[i] = acc;
    }
    out
}

/// Appends records to a JSON-Lines file, creating it if needed.
pub fn append_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<(), DialogueError> {
    let file = OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).map_err(|source| DialogueError::Json { line: 0, source })?;
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<(), DialogueError> {
    if path.exists() {
        std::fs::remove_file(path)?;
    }
    append_jsonl(path, records)
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, DialogueError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|source| DialogueError::Json { line: i + 1, source })?;
        out.push(rec);
    }
    Ok(out)
}
