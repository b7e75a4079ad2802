//! Evaluation runs, metrics, cost reports, run manifests and the terminal
//! chat probe.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dialogue::{
    read_jsonl, write_jsonl, ActionSource, Background, DialogueError, DialogueState, Episode, Speaker, TaskKind,
    TaskSpec, Transition, Utterance,
};
use crate::env::{
    CallCounter, CallCounts, Cassette, CassetteTransport, EnvError, Environment, HttpTransport, LlmBackend, LlmConfig,
    Phase, PromptPack, Role, RoleBackend, ScriptedBackend, ScriptedSimSpec,
};
use crate::gate::{gate_decide, Decision, GateError, GateRecord, GateState, DEFAULT_MIN_SAMPLES};
use crate::mcts::{plan, MctsConfig, MctsError};
use crate::policy::{ModelError, PolicyModel};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("listed price {listed} must exceed buyer target {target} > 0")]
    InvalidPrices { listed: f64, target: f64 },
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Mcts(#[from] MctsError),
    #[error(transparent)]
    Gate(#[from] GateError),
    #[error(transparent)]
    Data(#[from] DialogueError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl EvalError {
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            EvalError::Config(_) | EvalError::InvalidPrices { .. } | EvalError::Env(EnvError::Config(_) | EnvError::Auth(_))
        )
    }
}

/// Sale-to-list ratio of a bargaining outcome: `(listed - deal) / (listed -
/// target)` clamped to `[0, 1.5]`; no deal scores 0.
pub fn compute_sl(deal_price: Option<f64>, listed: f64, buyer_target: f64) -> Result<f64, EvalError> {
    if !(listed > buyer_target && buyer_target > 0.0) {
        return Err(EvalError::InvalidPrices {
            listed,
            target: buyer_target,
        });
    }
    Ok(match deal_price {
        None => 0.0,
        Some(p) => ((listed - p) / (listed - buyer_target)).clamp(0.0, 1.5),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PlannerMode {
    System1,
    System2,
    Dual { target_ratio: f64 },
}

impl PlannerMode {
    pub fn label(&self) -> String {
        match self {
            PlannerMode::System1 => "system1".into(),
            PlannerMode::System2 => "system2".into(),
            PlannerMode::Dual { target_ratio } => format!("dual@{target_ratio}"),
        }
    }

    pub fn target_ratio(&self) -> f64 {
        match self {
            PlannerMode::System1 => 0.0,
            PlannerMode::System2 => 1.0,
            PlannerMode::Dual { target_ratio } => *target_ratio,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Scripted,
    Llm,
    Cassette,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub task: TaskKind,
    pub mode: PlannerMode,
    #[serde(default)]
    pub mcts: MctsConfig,
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub backend: BackendKind,
    pub n_eval_cases: usize,
    #[serde(default)]
    pub seed: u64,
    /// Overrides the task's turn cap.
    #[serde(default)]
    pub max_turns: Option<usize>,
    /// Scripted simulator; defaults to the built-in one for the task.
    #[serde(default)]
    pub scripted: Option<ScriptedSimSpec>,
    #[serde(default)]
    pub llm: LlmConfig,
    #[serde(default)]
    pub cassette: Option<PathBuf>,
    /// JSON-Lines file of case backgrounds; scripted cases otherwise.
    #[serde(default)]
    pub cases: Option<PathBuf>,
    #[serde(default = "default_min_samples")]
    pub gate_min_samples: usize,
    #[serde(default)]
    pub workers: Option<usize>,
}

fn default_min_samples() -> usize {
    DEFAULT_MIN_SAMPLES
}

impl RunConfig {
    pub fn new(task: TaskKind, mode: PlannerMode) -> Self {
        RunConfig {
            task,
            mode,
            mcts: MctsConfig::default(),
            checkpoint: None,
            backend: BackendKind::Scripted,
            n_eval_cases: 100,
            seed: 0,
            max_turns: None,
            scripted: None,
            llm: LlmConfig::default(),
            cassette: None,
            cases: None,
            gate_min_samples: DEFAULT_MIN_SAMPLES,
            workers: None,
        }
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        if let PlannerMode::Dual { target_ratio } = self.mode {
            if !(0.0..=1.0).contains(&target_ratio) {
                return Err(EvalError::Config(format!("target ratio {target_ratio} is outside [0, 1]")));
            }
        }
        if self.mcts.n_simulations == 0 {
            return Err(EvalError::Config("n_simulations must be positive".into()));
        }
        Ok(())
    }

    pub fn task_spec(&self) -> Result<TaskSpec, EvalError> {
        let mut spec = TaskSpec::builtin(self.task)
            .ok_or_else(|| EvalError::Config(format!("no built-in task definition for {}", self.task)))?;
        if let Some(t) = self.max_turns {
            spec.max_turns = t;
        }
        Ok(spec)
    }

    pub fn scripted_spec(&self) -> Result<ScriptedSimSpec, EvalError> {
        let n = self.task_spec()?.num_actions();
        Ok(match &self.scripted {
            Some(s) => s.clone(),
            None if self.task == TaskKind::CraigslistBargain => ScriptedSimSpec::bargaining(n),
            None => ScriptedSimSpec::two_phase(self.task, n),
        })
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Builds the environment selected by `cfg.backend`. LLM credentials are
/// checked here so a missing key fails before any episode runs.
pub fn build_environment(cfg: &RunConfig) -> Result<Environment, EvalError> {
    let task = cfg.task_spec()?;
    let prompts = || -> Result<PromptPack, EvalError> {
        match &cfg.llm.prompt_dir {
            Some(dir) => Ok(PromptPack::from_dir(cfg.task, dir)?),
            None => PromptPack::builtin(cfg.task)
                .ok_or_else(|| EvalError::Config("custom tasks need llm.prompt_dir".into())),
        }
    };
    let backend: Arc<dyn RoleBackend> = match cfg.backend {
        BackendKind::Scripted => Arc::new(ScriptedBackend::new(cfg.scripted_spec()?)),
        BackendKind::Llm => {
            let transport = HttpTransport::from_config(&cfg.llm)?;
            Arc::new(LlmBackend::new(Box::new(transport), prompts()?, cfg.llm.clone()))
        }
        BackendKind::Cassette => {
            let path = cfg
                .cassette
                .as_ref()
                .ok_or_else(|| EvalError::Config("cassette backend needs a cassette path".into()))?;
            let transport = CassetteTransport::new(Cassette::load(path)?);
            Arc::new(LlmBackend::new(Box::new(transport), prompts()?, cfg.llm.clone()))
        }
    };
    Ok(Environment::new(task, backend))
}

/// Evaluation cases: from `cfg.cases` when given, else drawn from the
/// scripted simulator with the run seed.
pub fn eval_cases(cfg: &RunConfig) -> Result<Vec<Background>, EvalError> {
    if let Some(p) = &cfg.cases {
        let mut cases: Vec<Background> = read_jsonl(p)?;
        cases.truncate(cfg.n_eval_cases);
        return Ok(cases);
    }
    let spec = cfg.scripted_spec()?;
    Ok(scripted_cases(&spec, cfg.task, cfg.n_eval_cases, cfg.seed))
}

pub fn scripted_cases(spec: &ScriptedSimSpec, task: TaskKind, n: usize, seed: u64) -> Vec<Background> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|i| spec.sample_case(task, i, &mut rng)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub index: usize,
    pub case_id: Option<String>,
    pub turns: usize,
    pub success: bool,
    pub deal_price: Option<f64>,
    pub sl: Option<f64>,
    pub mcts_turns: usize,
    pub policy_turns: usize,
    pub calls: CallCounts,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub n_cases: usize,
    pub n_failed: usize,
    pub at: f64,
    pub sr: f64,
    pub sl: Option<f64>,
    pub realized_mcts_ratio: f64,
    pub cost: CallCounts,
}

/// Aggregates over the records without an error.
pub fn aggregate(records: &[CaseRecord]) -> Aggregates {
    let ok: Vec<&CaseRecord> = records.iter().filter(|r| r.error.is_none()).collect();
    let n = ok.len();
    let mut cost = CallCounts::default();
    for r in records {
        cost.merge(&r.calls);
    }
    let mean = |f: &dyn Fn(&CaseRecord) -> f64| {
        if n == 0 {
            0.0
        } else {
            ok.iter().map(|r| f(r)).sum::<f64>() / n as f64
        }
    };
    let has_sl = ok.iter().any(|r| r.sl.is_some());
    let turns: usize = ok.iter().map(|r| r.turns).sum();
    let mcts: usize = ok.iter().map(|r| r.mcts_turns).sum();
    Aggregates {
        n_cases: n,
        n_failed: records.len() - n,
        at: mean(&|r| r.turns as f64),
        sr: mean(&|r| if r.success { 1.0 } else { 0.0 }),
        sl: has_sl.then(|| mean(&|r| r.sl.unwrap_or(0.0))),
        realized_mcts_ratio: if turns == 0 { 0.0 } else { mcts as f64 / turns as f64 },
        cost,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task: TaskKind,
    pub mode: PlannerMode,
    #[serde(flatten)]
    pub metrics: Aggregates,
    pub records: Vec<CaseRecord>,
    #[serde(default)]
    pub gate_trace: Vec<GateRecord>,
}

/// Chooses the action for one turn under the configured planner.
pub fn choose_action(
    mode: &PlannerMode,
    gate: Option<&mut GateState>,
    model: &PolicyModel,
    env: &Environment,
    state: &DialogueState,
    mcts: &MctsConfig,
) -> Result<(usize, ActionSource), EvalError> {
    let use_mcts = match mode {
        PlannerMode::System1 => false,
        PlannerMode::System2 => true,
        PlannerMode::Dual { .. } => {
            let gate = gate.ok_or_else(|| EvalError::Config("dual mode needs a gate".into()))?;
            let dist = model.policy(state)?;
            gate_decide(gate, state.turn, &dist)? == Decision::Mcts
        }
    };
    if use_mcts {
        Ok((plan(state, model, env, mcts)?.action, ActionSource::Mcts))
    } else {
        Ok((model.greedy_action(state)?, ActionSource::Policy))
    }
}

/// Runs one episode to success or the turn cap.
pub fn run_episode(
    case: Background,
    mode: &PlannerMode,
    mut gate: Option<&mut GateState>,
    model: &PolicyModel,
    env: &Environment,
    mcts: &MctsConfig,
) -> Result<Episode, EvalError> {
    let mut state = env.initial_state(case);
    let mut ep = Episode::new(env.task.task());
    loop {
        let (action, source) = choose_action(mode, gate.as_deref_mut(), model, env, &state, mcts)?;
        let (mut t, eval) = env.step_eval(&state, action, Phase::Acting)?;
        t.source = Some(source);
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

fn case_record(index: usize, case: &Background, result: &Result<Episode, EvalError>, calls: CallCounts, task: TaskKind) -> CaseRecord {
    let mut rec = CaseRecord {
        index,
        case_id: case.case_id.clone(),
        turns: 0,
        success: false,
        deal_price: None,
        sl: None,
        mcts_turns: 0,
        policy_turns: 0,
        calls,
        error: None,
    };
    match result {
        Ok(ep) => {
            rec.turns = ep.turns;
            rec.success = ep.success;
            rec.deal_price = ep.deal_price;
            let count = |s| ep.transitions.iter().filter(|t| t.source == Some(s)).count();
            rec.mcts_turns = count(ActionSource::Mcts);
            rec.policy_turns = count(ActionSource::Policy);
            if task == TaskKind::CraigslistBargain {
                match (case.listed_price, case.buyer_target) {
                    (Some(l), Some(t)) => match compute_sl(ep.deal_price, l, t) {
                        Ok(sl) => rec.sl = Some(sl),
                        Err(e) => rec.error = Some(e.to_string()),
                    },
                    _ => rec.error = Some("case lacks prices".into()),
                }
            }
        }
        Err(e) => rec.error = Some(e.to_string()),
    }
    rec
}

/// Evaluates `cases` and returns the report with the episodes (`None` for
/// failed cases). Dual mode runs cases serially in order through one gate;
/// the other modes run cases in parallel.
pub fn run_eval(
    cfg: &RunConfig,
    model: &PolicyModel,
    env: &Environment,
    cases: &[Background],
) -> Result<(MetricsReport, Vec<Option<Episode>>), EvalError> {
    cfg.validate()?;
    let task = env.task.task();
    let run_case = |i: usize, case: &Background, gate: Option<&mut GateState>| {
        let counter = Arc::new(CallCounter::new());
        let case_env = env.clone().with_counter(counter.clone());
        let result = run_episode(case.clone(), &cfg.mode, gate, model, &case_env, &cfg.mcts);
        let calls = counter.snapshot();
        env.counter().absorb(&calls);
        let rec = case_record(i, case, &result, calls, task);
        (rec, result.ok())
    };
    let mut gate_trace = Vec::new();
    let results: Vec<(CaseRecord, Option<Episode>)> = match cfg.mode {
        PlannerMode::Dual { target_ratio } => {
            let mut gate = GateState::new(target_ratio, cfg.seed)?.with_min_samples(cfg.gate_min_samples);
            let out = cases.iter().enumerate().map(|(i, c)| run_case(i, c, Some(&mut gate))).collect();
            gate_trace = gate.trace;
            out
        }
        _ => {
            let go = || cases.par_iter().enumerate().map(|(i, c)| run_case(i, c, None)).collect();
            match cfg.workers {
                Some(w) => rayon::ThreadPoolBuilder::new()
                    .num_threads(w.max(1))
                    .build()
                    .map_err(|e| EvalError::Config(e.to_string()))?
                    .install(go),
                None => go(),
            }
        }
    };
    let (records, episodes): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    let report = MetricsReport {
        task,
        mode: cfg.mode,
        metrics: aggregate(&records),
        records,
        gate_trace,
    };
    Ok((report, episodes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostSummary {
    pub mode: String,
    pub target_ratio: f64,
    pub realized_mcts_ratio: f64,
    pub cases: usize,
    pub mean_turns: f64,
    pub total_units: u64,
    pub units_per_case: f64,
    pub units_per_turn: f64,
    pub acting_units: u64,
    pub simulation_units: u64,
    pub critic_samples: u64,
}

pub fn cost_report(report: &MetricsReport) -> CostSummary {
    let m = &report.metrics;
    let total = m.cost.total_units();
    let turns: usize = report.records.iter().map(|r| r.turns).sum();
    let per = |d: usize| if d == 0 { 0.0 } else { total as f64 / d as f64 };
    CostSummary {
        mode: report.mode.label(),
        target_ratio: report.mode.target_ratio(),
        realized_mcts_ratio: m.realized_mcts_ratio,
        cases: report.records.len(),
        mean_turns: m.at,
        total_units: total,
        units_per_case: per(report.records.len()),
        units_per_turn: per(turns),
        acting_units: m.cost.phase(Phase::Acting).units(),
        simulation_units: m.cost.phase(Phase::Simulation).units(),
        critic_samples: m.cost.total().critic_samples,
    }
}

/// One row per run, e.g. a sweep over MCTS ratios.
pub fn write_cost_csv(rows: &[CostSummary], path: &Path) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Everything needed to replay a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub seed: u64,
    pub config_hash: String,
    pub checkpoint_hash: Option<String>,
    pub config: RunConfig,
}

impl Manifest {
    pub fn new(cfg: &RunConfig) -> Result<Self, EvalError> {
        let checkpoint_hash = match &cfg.checkpoint {
            Some(p) => Some(sha256_hex(&std::fs::read(p)?)),
            None => None,
        };
        Ok(Manifest {
            version: env!("CARGO_PKG_VERSION").into(),
            seed: cfg.seed,
            config_hash: cfg.hash(),
            checkpoint_hash,
            config: cfg.clone(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), EvalError> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// Loads a manifest and checks that the config and checkpoint still
    /// match their recorded hashes.
    pub fn load(path: &Path) -> Result<Self, EvalError> {
        let m: Manifest = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if m.config.hash() != m.config_hash {
            return Err(EvalError::Config("manifest config does not match its hash".into()));
        }
        if let (Some(p), Some(h)) = (&m.config.checkpoint, &m.checkpoint_hash) {
            if &sha256_hex(&std::fs::read(p)?) != h {
                return Err(EvalError::Config(format!("checkpoint {} changed since the run", p.display())));
            }
        }
        Ok(m)
    }
}

/// Loads the configured checkpoint, or an untrained model when none is set.
pub fn load_model(cfg: &RunConfig, env: &Environment) -> Result<PolicyModel, EvalError> {
    let catalog = env.task.catalog.clone();
    match &cfg.checkpoint {
        Some(p) => {
            let base = PolicyModel::untrained(catalog.clone(), env.task.max_turns);
            Ok(PolicyModel::load(p, base.encoder.clone(), catalog)?)
        }
        None if cfg.mode == PlannerMode::System2 && cfg.mcts.uniform_prior => {
            Ok(PolicyModel::untrained(catalog, env.task.max_turns))
        }
        None => Err(EvalError::Config("this planner mode needs a checkpoint".into())),
    }
}

/// Writes `metrics.json`, `cases.jsonl`, `episodes.jsonl`, `cost.csv`,
/// `gate_trace.csv` (dual mode) and `manifest.json` into `dir`.
pub fn write_outputs(
    dir: &Path,
    report: &MetricsReport,
    episodes: &[Option<Episode>],
    manifest: &Manifest,
) -> Result<(), EvalError> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(report)?)?;
    write_jsonl(&dir.join("cases.jsonl"), &report.records)?;
    let eps: Vec<&Episode> = episodes.iter().flatten().collect();
    write_jsonl(&dir.join("episodes.jsonl"), &eps)?;
    write_cost_csv(&[cost_report(report)], &dir.join("cost.csv"))?;
    if matches!(report.mode, PlannerMode::Dual { .. }) {
        crate::gate::write_trace_csv(&report.gate_trace, &dir.join("gate_trace.csv"))?;
    }
    manifest.save(&dir.join("manifest.json"))?;
    Ok(())
}

/// Re-runs the evaluation recorded in a manifest.
pub fn replay(manifest: &Manifest) -> Result<(MetricsReport, Vec<Option<Episode>>), EvalError> {
    let cfg = &manifest.config;
    let env = build_environment(cfg)?;
    let model = load_model(cfg, &env)?;
    run_eval(cfg, &model, &env, &eval_cases(cfg)?)
}

/// Chat with a human playing the user. The planner picks each strategy,
/// the system reply is generated by the backend and printed, and the next
/// input line is the user's reply. EOF or `/quit` ends the session.
pub fn interactive_chat<R: BufRead, W: Write>(
    mode: &PlannerMode,
    gate: Option<&mut GateState>,
    model: &PolicyModel,
    env: &Environment,
    case: Background,
    mcts: &MctsConfig,
    mut input: R,
    mut output: W,
) -> Result<Episode, EvalError> {
    let mut gate = gate;
    let (sys_name, usr_name) = crate::env::role_names(env.task.task());
    let mut state = env.initial_state(case);
    for u in &state.history {
        let who = if u.speaker == Speaker::System { sys_name } else { usr_name };
        writeln!(output, "{who}: {}", u.text)?;
    }
    let mut ep = Episode::new(env.task.task());
    ep.tag = Some("human".into());
    while state.turn < env.task.max_turns {
        let (action, source) = choose_action(mode, gate.as_deref_mut(), model, env, &state, mcts)?;
        let strategy = env
            .task
            .catalog
            .get(action)
            .ok_or(EnvError::UnknownStrategy(action))?;
        env.counter().record(Role::System, Phase::Acting);
        let text = env.backend().system_respond(&state, strategy)?;
        writeln!(output, "{sys_name} [{}]: {text}", strategy.name)?;
        write!(output, "{usr_name}: ")?;
        output.flush()?;
        let system = Utterance {
            speaker: Speaker::System,
            text,
            turn_index: state.next_turn_index(),
            strategy: Some(action),
        };
        let mut line = String::new();
        let quit = input.read_line(&mut line)? == 0 || line.trim() == "/quit";
        let user = Utterance {
            speaker: Speaker::User,
            text: if quit { String::new() } else { line.trim().to_string() },
            turn_index: state.next_turn_index() + 1,
            strategy: None,
        };
        let next = state.with_exchange(system, user);
        if quit {
            ep.push(Transition {
                state,
                action,
                reward: 0.0,
                next_state: next,
                done: true,
                verdicts: Vec::new(),
                source: Some(source),
            });
            break;
        }
        let eval = env.evaluate(&next, Phase::Acting)?;
        let done = eval.success || next.turn >= env.task.max_turns;
        writeln!(output, "(critic: {:.3})", eval.reward)?;
        ep.push(Transition {
            state,
            action,
            reward: eval.reward,
            next_state: next.clone(),
            done,
            verdicts: eval.verdicts,
            source: Some(source),
        });
        ep.success = eval.success;
        ep.deal_price = eval.deal_price;
        state = next;
        if done {
            break;
        }
    }
    Ok(ep)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sl_anchors() {
        assert_eq!(compute_sl(None, 100.0, 70.0).unwrap(), 0.0);
        assert_eq!(compute_sl(Some(70.0), 100.0, 70.0).unwrap(), 1.0);
        assert_eq!(compute_sl(Some(100.0), 100.0, 70.0).unwrap(), 0.0);
        assert_eq!(compute_sl(Some(10.0), 100.0, 70.0).unwrap(), 1.5);
        assert_eq!(compute_sl(Some(130.0), 100.0, 70.0).unwrap(), 0.0);
        assert!(compute_sl(Some(80.0), 70.0, 100.0).is_err());
    }

    fn rec(turns: usize, success: bool, error: bool) -> CaseRecord {
        CaseRecord {
            index: 0,
            case_id: None,
            turns,
            success,
            deal_price: None,
            sl: None,
            mcts_turns: 0,
            policy_turns: turns,
            calls: CallCounts::default(),
            error: error.then(|| "boom".into()),
        }
    }

    #[test]
    fn aggregates_skip_failures() {
        let a = aggregate(&[rec(2, true, false), rec(4, false, false), rec(1, true, true)]);
        assert_eq!((a.n_cases, a.n_failed), (2, 1));
        assert_eq!(a.at, 3.0);
        assert_eq!(a.sr, 0.5);
        assert_eq!(a.sl, None);
        let empty = aggregate(&[]);
        assert_eq!((empty.at, empty.sr, empty.realized_mcts_ratio), (0.0, 0.0, 0.0));
    }

    #[test]
    fn zero_case_cost_report() {
        let report = MetricsReport {
            task: TaskKind::Esconv,
            mode: PlannerMode::System1,
            metrics: aggregate(&[]),
            records: vec![],
            gate_trace: vec![],
        };
        let c = cost_report(&report);
        assert_eq!((c.units_per_case, c.units_per_turn, c.total_units), (0.0, 0.0, 0));
    }

    #[test]
    fn dual_ratio_is_validated() {
        let cfg = RunConfig::new(TaskKind::Esconv, PlannerMode::Dual { target_ratio: 1.2 });
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn llm_backend_without_key_fails_at_startup() {
        let mut cfg = RunConfig::new(TaskKind::Esconv, PlannerMode::System1);
        cfg.backend = BackendKind::Llm;
        cfg.llm.api_key_env = "DPDP_TEST_SURELY_UNSET_KEY".into();
        let err = build_environment(&cfg).unwrap_err();
        assert!(err.is_config());
    }

    #[test]
    fn chat_quit_at_first_turn() {
        let cfg = RunConfig::new(TaskKind::Esconv, PlannerMode::System1);
        let env = build_environment(&cfg).unwrap();
        let model = PolicyModel::untrained(env.task.catalog.clone(), 8);
        let case = eval_cases(&RunConfig {
            n_eval_cases: 1,
            ..cfg.clone()
        })
        .unwrap()
        .remove(0);
        let mut out = Vec::new();
        let ep = interactive_chat(&cfg.mode, None, &model, &env, case, &cfg.mcts, &b"/quit\n"[..], &mut out).unwrap();
        assert_eq!(ep.transitions.len(), 1);
        assert!(!ep.success);
        assert_eq!(ep.tag.as_deref(), Some("human"));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("chat.jsonl");
        write_jsonl(&p, std::slice::from_ref(&ep)).unwrap();
        let back: Vec<Episode> = read_jsonl(&p).unwrap();
        assert_eq!(back, vec![ep]);
    }
}
