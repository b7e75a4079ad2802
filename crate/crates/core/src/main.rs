use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use dpdp::dialogue::{read_jsonl, write_jsonl, Episode, TaskKind};
use dpdp::eval::{
    build_environment, cost_report, eval_cases, interactive_chat, load_model, replay, run_eval, write_outputs,
    BackendKind, EvalError, Manifest, PlannerMode, RunConfig,
};
use dpdp::gate::GateState;
use dpdp::policy::{PolicyModel, DEFAULT_HIDDEN};
use dpdp::pretrain::{collect_logged_episodes, run_pretraining, score_dataset, PretrainConfig, ScoredDataset};
use dpdp::selfplay::{run_selfplay_training, SelfPlayConfig, SelfPlayOutputs};
use dpdp::train::TrainError;

#[derive(Parser)]
#[command(name = "dpdp", version, about = "Dual-process dialogue planner")]
struct Cli {
    /// JSON config with optional `run`, `pretrain` and `selfplay` sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    backend: Option<BackendKind>,
    #[arg(long, global = true, value_enum)]
    mode: Option<Mode>,
    /// Target MCTS fraction for dual mode.
    #[arg(long, global = true)]
    mcts_ratio: Option<f64>,
    #[arg(long, global = true, default_value = "runs")]
    out_dir: PathBuf,
    #[arg(long, global = true)]
    task: Option<TaskKind>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    System1,
    System2,
    Dual,
}

#[derive(Subcommand)]
enum Command {
    /// Offline pretraining on scored episodes.
    Pretrain {
        /// Scored episodes (JSON-Lines).
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        validation: Option<PathBuf>,
        /// Start from this checkpoint instead of a fresh network.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// MCTS-guided self-play fine-tuning.
    Selfplay {
        #[arg(long)]
        init: Option<PathBuf>,
        /// Number of distinct training cases.
        #[arg(long, default_value_t = 100)]
        cases: usize,
    },
    /// Evaluate a planner.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        cases: Option<usize>,
        /// Replay the run recorded in this manifest.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Chat with the planner, typing the user's side.
    Chat {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        case: usize,
    },
    /// Attach critic rewards to raw episodes, or generate logged episodes
    /// from the scripted simulator.
    ScoreDataset {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        output: PathBuf,
        /// Generate this many logged episodes instead of reading `--input`.
        #[arg(long)]
        generate: Option<usize>,
        /// Probability of a random action in generated episodes.
        #[arg(long, default_value_t = 0.3)]
        epsilon: f64,
    },
}

#[derive(Deserialize, Default)]
struct FileConfig {
    run: Option<RunConfig>,
    pretrain: Option<PretrainConfig>,
    selfplay: Option<SelfPlayConfig>,
}

#[derive(Debug)]
enum Failure {
    Config(String),
    Runtime(String),
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        if e.is_config() {
            Failure::Config(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn runtime<E: std::fmt::Display>(e: E) -> Failure {
    Failure::Runtime(e.to_string())
}

struct Setup {
    run: RunConfig,
    pretrain: PretrainConfig,
    selfplay: SelfPlayConfig,
}

fn setup(cli: &Cli) -> Result<Setup, Failure> {
    let file: FileConfig = match &cli.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?
        }
        None => FileConfig::default(),
    };
    let task = cli
        .task
        .or(file.run.as_ref().map(|r| r.task))
        .unwrap_or(TaskKind::Esconv);
    let mut run = file.run.unwrap_or_else(|| RunConfig::new(task, PlannerMode::System1));
    run.task = task;
    if let Some(s) = cli.seed {
        run.seed = s;
    }
    if let Some(b) = cli.backend {
        run.backend = b;
    }
    let ratio = cli.mcts_ratio;
    match (cli.mode, ratio) {
        (Some(Mode::System1), _) => run.mode = PlannerMode::System1,
        (Some(Mode::System2), _) => run.mode = PlannerMode::System2,
        (Some(Mode::Dual), r) => run.mode = PlannerMode::Dual {
            target_ratio: r.unwrap_or(0.5),
        },
        (None, Some(r)) => run.mode = PlannerMode::Dual { target_ratio: r },
        (None, None) => {}
    }
    run.validate()?;
    let mut pretrain = file.pretrain.unwrap_or_else(|| PretrainConfig::for_task(task));
    let mut selfplay = file.selfplay.unwrap_or_else(|| SelfPlayConfig::for_task(task));
    pretrain.seed = run.seed;
    selfplay.seed = run.seed;
    Ok(Setup { run, pretrain, selfplay })
}

fn fresh_or_load(init: Option<&Path>, run: &RunConfig, env: &dpdp::Environment) -> Result<PolicyModel, Failure> {
    let catalog = env.task.catalog.clone();
    match init {
        Some(p) => {
            let base = PolicyModel::untrained(catalog.clone(), env.task.max_turns);
            PolicyModel::load(p, base.encoder.clone(), catalog).map_err(|e| Failure::Config(e.to_string()))
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
            Ok(PolicyModel::random(catalog, env.task.max_turns, DEFAULT_HIDDEN, &mut rng))
        }
    }
}

fn execute(cli: Cli) -> Result<(), Failure> {
    let Setup {
        mut run,
        pretrain,
        selfplay,
    } = setup(&cli)?;
    let out = cli.out_dir.clone();
    std::fs::create_dir_all(&out).map_err(runtime)?;
    match cli.command {
        Command::Pretrain { data, validation, init } => {
            let env = build_environment(&run)?;
            let model = fresh_or_load(init.as_deref(), &run, &env)?;
            let load = |p: &Path| -> Result<ScoredDataset, Failure> {
                let eps: Vec<Episode> = read_jsonl(p).map_err(|e| Failure::Config(e.to_string()))?;
                Ok(ScoredDataset::from_episodes(eps))
            };
            let train = load(&data)?;
            let val = validation.as_deref().map(load).transpose()?;
            let result = run_pretraining(&model, &train, val.as_ref(), &pretrain, Some(&out.join("pretrain_history.csv")))?;
            let ckpt = out.join("pretrain.json");
            result.model.save(&ckpt).map_err(runtime)?;
            println!("best epoch {} of {}; checkpoint {}", result.best_epoch, pretrain.epochs, ckpt.display());
        }
        Command::Selfplay { init, cases } => {
            let env = build_environment(&run)?;
            let model = fresh_or_load(init.as_deref(), &run, &env)?;
            run.n_eval_cases = cases;
            run.seed = run.seed.wrapping_add(1);
            let train_cases = eval_cases(&run)?;
            let outputs = SelfPlayOutputs {
                metrics_csv: Some(out.join("selfplay_metrics.csv")),
                episodes_jsonl: Some(out.join("episodes.jsonl")),
                checkpoint_dir: Some(out.clone()),
            };
            let result = run_selfplay_training(&model, &env, &train_cases, &selfplay, &outputs)?;
            for e in &result.history {
                println!("epoch {}: SR {:.3}, loss {:.4}", e.epoch, e.success_rate, e.total_loss);
            }
        }
        Command::Eval {
            checkpoint,
            cases,
            manifest,
        } => {
            let (report, episodes, manifest) = if let Some(m) = manifest {
                let manifest = Manifest::load(&m)?;
                let (r, e) = replay(&manifest)?;
                (r, e, manifest)
            } else {
                if checkpoint.is_some() {
                    run.checkpoint = checkpoint;
                }
                if let Some(n) = cases {
                    run.n_eval_cases = n;
                }
                let env = build_environment(&run)?;
                let model = load_model(&run, &env)?;
                let manifest = Manifest::new(&run)?;
                let (r, e) = run_eval(&run, &model, &env, &eval_cases(&run)?)?;
                (r, e, manifest)
            };
            write_outputs(&out, &report, &episodes, &manifest)?;
            let m = &report.metrics;
            let c = cost_report(&report);
            println!(
                "{}: AT {:.3} SR {:.3}{} | MCTS ratio {:.3} | {:.1} calls/case | {} failed",
                report.mode.label(),
                m.at,
                m.sr,
                m.sl.map(|s| format!(" SL {s:.4}")).unwrap_or_default(),
                m.realized_mcts_ratio,
                c.units_per_case,
                m.n_failed,
            );
        }
        Command::Chat { checkpoint, case } => {
            if checkpoint.is_some() {
                run.checkpoint = checkpoint;
            }
            let env = build_environment(&run)?;
            let model = load_model(&run, &env)?;
            run.n_eval_cases = case + 1;
            let bg = eval_cases(&run)?.pop().ok_or_else(|| Failure::Config("no case available".into()))?;
            let mut gate = match run.mode {
                PlannerMode::Dual { target_ratio } => Some(GateState::new(target_ratio, run.seed).map_err(runtime)?),
                _ => None,
            };
            let stdin = std::io::stdin();
            let ep = interactive_chat(&run.mode, gate.as_mut(), &model, &env, bg, &run.mcts, stdin.lock(), std::io::stdout())?;
            write_jsonl(&out.join("chat.jsonl"), &[ep]).map_err(runtime)?;
            if let Some(g) = gate {
                g.write_trace_csv(&out.join("chat_gate_trace.csv")).map_err(runtime)?;
            }
        }
        Command::ScoreDataset {
            input,
            output,
            generate,
            epsilon,
        } => {
            let env = build_environment(&run)?;
            let scored = match (generate, input) {
                (Some(n), _) => {
                    let spec = run.scripted_spec()?;
                    run.n_eval_cases = n;
                    let cases = eval_cases(&run)?;
                    let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
                    let a_n = env.task.num_actions();
                    let eps = collect_logged_episodes(&env, &cases, |s| {
                        if rng.gen_bool(epsilon.clamp(0.0, 1.0)) {
                            rng.gen_range(0..a_n)
                        } else {
                            let case = s.background.sim.unwrap_or_default();
                            spec.greedy_action(&case, s.turn)
                        }
                    })?;
                    ScoredDataset::from_episodes(eps)
                }
                (None, Some(p)) => {
                    let raw: Vec<Episode> = read_jsonl(&p).map_err(|e| Failure::Config(e.to_string()))?;
                    score_dataset(&raw, &env)
                }
                (None, None) => return Err(Failure::Config("give --input or --generate".into())),
            };
            write_jsonl(&output, &scored.episodes).map_err(runtime)?;
            println!(
                "{} episodes ({} transitions), {} skipped",
                scored.episodes.len(),
                scored.num_transitions(),
                scored.skipped
            );
            for e in &scored.errors {
                eprintln!("{e}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("config error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
