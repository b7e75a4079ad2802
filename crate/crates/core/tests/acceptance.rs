//! Acceptance suite: one line per criterion, nonzero exit if any fails.
//!
//! `ACCEPTANCE_ONLY=1,4,9` runs a subset.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::{Arc, OnceLock};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dpdp::dialogue::{
    map_verdicts_to_reward, read_jsonl, write_jsonl, Background, RewardMap, SimCase, TaskKind, TaskSpec,
};
use dpdp::env::{optimal_plan, parse_deal, Environment, Phase, ScriptedBackend, ScriptedSimSpec, VerdictBand};
use dpdp::eval::{
    compute_sl, replay, run_eval, scripted_cases, write_outputs, Manifest, MetricsReport, PlannerMode, RunConfig,
};
use dpdp::gate::{Decision, GateState};
use dpdp::mcts::{backup_edge, plan, puct_score, MctsConfig, SearchTree, UniformPrior};
use dpdp::policy::{Checkpoint, PolicyModel, PolicyParams};
use dpdp::pretrain::{
    collect_logged_episodes, pretrain_loss_bootstrapped, pretrain_policy_loss, pretrain_q_loss, run_pretraining,
    PretrainConfig, PretrainVariant, ScoredDataset,
};
use dpdp::selfplay::{run_selfplay_training, selfplay_policy_loss, selfplay_q_loss, SelfPlayConfig, SelfPlayOutputs};
use dpdp::train::{bootstrap_target, sgd_step, LossOutput, Sample};

type Outcome = Result<String, String>;
type Criterion = (u32, &'static str, fn() -> Outcome);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- 1

fn reward_maps() -> Outcome {
    let es = RewardMap::esconv();
    let ci = RewardMap::cima();
    let cases: [(&RewardMap, &str, f64); 16] = [
        (&es, "No, the Patient feels worse.", -1.0),
        (&es, "No, the Patient feels the same.", -0.5),
        (&es, "No, but the Patient feels better.", 0.1),
        (&es, "Yes, the Patient\u{2019}s issue has been solved.", 1.0),
        (&es, "feel worse", -1.0),
        (&es, "feel the same", -0.5),
        (&es, "feel better", 0.1),
        (&es, "solved", 1.0),
        (&ci, "No, the Student made an incorrect translation.", -1.0),
        (&ci, "No, the Student did not try to translate.", -0.5),
        (&ci, "No, the Student only correctly translated a part of the exercise.", 0.5),
        (&ci, "Yes, the Student correctly translated the whole sentence of the exercise.", 1.0),
        (&ci, "incorrect answer", -1.0),
        (&ci, "no answer", -0.5),
        (&ci, "partially correct answer", 0.5),
        (&ci, "correct answer", 1.0),
    ];
    for (map, v, want) in cases {
        let got = map_verdicts_to_reward(&[v], map).map_err(|e| format!("{v:?}: {e}"))?;
        if got.to_bits() != want.to_bits() {
            return Err(format!("{v:?} -> {got}, want {want}"));
        }
    }
    let mixed = [vec!["feel better"; 5], vec!["solved"; 5]].concat();
    let m = map_verdicts_to_reward(&mixed, &es).map_err(|e| e.to_string())?;
    if (m - 0.55).abs() > 1e-12 {
        return Err(format!("5 better + 5 solved -> {m}"));
    }
    let m = map_verdicts_to_reward(&["no answer"; 10], &ci).map_err(|e| e.to_string())?;
    if m != -0.5 {
        return Err(format!("10 x no answer -> {m}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..500 {
        let (map, pool) = if rng.gen_bool(0.5) { (&es, &cases[..8]) } else { (&ci, &cases[8..]) };
        let n = rng.gen_range(1..=10);
        let picks: Vec<_> = (0..n).map(|_| pool[rng.gen_range(0..pool.len())]).collect();
        let hand = picks.iter().map(|p| p.2).sum::<f64>() / n as f64;
        let verdicts: Vec<&str> = picks.iter().map(|p| p.1).collect();
        let got = map_verdicts_to_reward(&verdicts, map).map_err(|e| e.to_string())?;
        worst = worst.max((got - hand).abs());
    }
    check(worst <= 1e-12, format!("16 verdicts exact; 500 mixed lists, max error {worst:.1e}"))
}

// ---------------------------------------------------------------- 2

fn running_mean() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let q0 = rng.gen_range(-5.0..5.0);
        let a_n = rng.gen_range(2..=5);
        let cfg = MctsConfig { q0, uniform_prior: true, ..Default::default() };
        let root = dpdp::DialogueState::new(Background::default(), vec![]);
        let mut tree = SearchTree::new(root, a_n, 8, cfg);
        tree.expand(0, &UniformPrior(a_n)).map_err(|e| e.to_string())?;
        let k = rng.gen_range(1..=100);
        let mut seen: Vec<Vec<f64>> = vec![Vec::new(); a_n];
        for _ in 0..k {
            let a = rng.gen_range(0..a_n);
            let v = rng.gen_range(-1.0..1.0);
            tree.backpropagate(&[(0, a)], v);
            seen[a].push(v);
        }
        for (a, vals) in seen.iter().enumerate() {
            let root = tree.root();
            if vals.is_empty() {
                if root.q[a] != q0 || root.visits[a] != 0 {
                    return Err(format!("unvisited edge changed: Q={} N={}", root.q[a], root.visits[a]));
                }
                continue;
            }
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            if root.visits[a] as usize != vals.len() {
                return Err("visit count mismatch".into());
            }
            worst = worst.max((root.q[a] - mean).abs());
        }
    }
    let (mut n, mut q) = (0u32, 123.0);
    backup_edge(&mut n, &mut q, 0.5);
    check(worst <= 1e-9 && q == 0.5, format!("200 trees, max |Q - mean| {worst:.1e}"))
}

// ---------------------------------------------------------------- 3

fn puct() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let q: f64 = rng.gen_range(-1.0..1.0);
        let p: f64 = rng.gen_range(0.0..1.0);
        let n: u32 = rng.gen_range(0..50);
        let total: u64 = u64::from(n) + rng.gen_range(0..200);
        let c: f64 = rng.gen_range(0.0..3.0);
        let reference = q + c * p * (total as f64).powf(0.5) / (n as f64 + 1.0);
        worst = worst.max((puct_score(q, p, n, total, c) - reference).abs());
    }
    let ex = puct_score(0.5, 0.25, 3, 9, 1.0);
    check(
        worst <= 1e-12 && (ex - 0.6875).abs() <= 1e-12,
        format!("1000 tuples, max error {worst:.1e}; worked example {ex}"),
    )
}

// ---------------------------------------------------------------- 4

/// Small random simulator whose pre-success verdicts are all non-positive,
/// so the return-maximising plan is to reach success as early as possible.
fn random_spec(rng: &mut ChaCha8Rng) -> (ScriptedSimSpec, TaskSpec) {
    let a_n = rng.gen_range(2..=4);
    let t = rng.gen_range(2..=3);
    let phases = rng.gen_range(1..=2);
    let levels = [-1.0, -0.5, 0.0, 0.5, 1.0, 1.5, 2.0];
    let effects = (0..phases)
        .map(|_| (0..a_n).map(|_| levels[rng.gen_range(0..levels.len())]).collect())
        .collect();
    let solved_at: f64 = [1.5, 2.0, 2.5, 3.0][rng.gen_range(0..4)];
    let band = |m: f64, v: &str| VerdictBand { min_score: m, verdict: v.into(), user_line: String::new() };
    let spec = ScriptedSimSpec {
        num_actions: a_n,
        effects,
        phase_cues: vec![String::new(); phases],
        bands: vec![
            band(f64::NEG_INFINITY, "No, the Patient feels worse."),
            band(0.0, "No, the Patient feels the same."),
            band(solved_at, "Yes, the Patient's issue has been solved."),
        ],
        score_bounds: None,
        noise: 0.0,
        noise_seed: 0,
        initial_scores: vec![-0.5, 0.0, 0.5],
        bargain: None,
    };
    let mut task = TaskSpec::builtin(TaskKind::Esconv).expect("builtin task");
    task.catalog.strategies.truncate(a_n);
    task.max_turns = t;
    task.critic_samples = 1;
    (spec, task)
}

fn mcts_vs_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let cfg = MctsConfig { n_simulations: 50, c_p: 1.0, uniform_prior: true, ..Default::default() };
    let mut worst = (1.0f64, 0);
    for k in 0..20 {
        let (spec, task) = random_spec(&mut rng);
        let env = Environment::new(task.clone(), Arc::new(ScriptedBackend::new(spec.clone())));
        let mut hits = 0;
        for run in 0..100u64 {
            let mut crng = ChaCha8Rng::seed_from_u64(run);
            let sim = SimCase {
                initial_score: spec.initial_scores[crng.gen_range(0..spec.initial_scores.len())],
                phase_offset: crng.gen_range(0..spec.effects.len()),
            };
            let s = env.initial_state(Background { sim: Some(sim), ..Default::default() });
            let oracle = optimal_plan(&spec, &task, &s);
            let out = plan(&s, &UniformPrior(spec.num_actions), &env, &cfg).map_err(|e| e.to_string())?;
            // Any first action that attains the optimal return counts.
            if oracle.first_action_returns[out.action] >= oracle.best_return - 1e-9 {
                hits += 1;
            }
        }
        let rate = hits as f64 / 100.0;
        if rate < worst.0 {
            worst = (rate, k);
        }
    }
    check(worst.0 >= 0.95, format!("20 specs x 100 runs, worst match rate {:.2} (spec {})", worst.0, worst.1))
}

// ---------------------------------------------------------------- 5

/// Forward pass written out independently of the library.
fn ref_forward(p: &PolicyParams, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (d, h, a) = (p.input_dim, p.hidden_dim, p.num_actions);
    let hid: Vec<f64> = (0..h)
        .map(|j| (p.b1[j] + (0..d).map(|i| p.w1[j * d + i] * x[i]).sum::<f64>()).tanh())
        .collect();
    let head = |w: &[f64], b: &[f64]| -> Vec<f64> {
        (0..a).map(|k| b[k] + (0..h).map(|j| w[k * h + j] * hid[j]).sum::<f64>()).collect()
    };
    let logits = head(&p.wp, &p.bp);
    let q = head(&p.wq, &p.bq);
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    (logits.iter().map(|l| l - lse).collect(), q)
}

/// `sum c_i log pi(a_i) + w sum (Q(a_i) - y_i)^2` with fixed `c` and `y`.
fn ref_loss(p: &PolicyParams, batch: &[Sample], coef: &[f64], target: &[f64], w: f64) -> f64 {
    batch
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let (logp, q) = ref_forward(p, &s.x);
            coef[i] * logp[s.action] + w * (q[s.action] - target[i]).powi(2)
        })
        .sum()
}

fn rel_error(analytic: &PolicyParams, numeric: &[f64]) -> f64 {
    let a: Vec<f64> = analytic.iter().copied().collect();
    let diff = a.iter().zip(numeric).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(numeric.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

fn numeric_grad(p: &PolicyParams, f: &dyn Fn(&PolicyParams) -> f64) -> Vec<f64> {
    let h = 1e-5;
    (0..p.num_params())
        .map(|i| {
            let mut plus = p.clone();
            *plus.iter_mut().nth(i).unwrap() += h;
            let mut minus = p.clone();
            *minus.iter_mut().nth(i).unwrap() -= h;
            (f(&plus) - f(&minus)) / (2.0 * h)
        })
        .collect()
}

fn random_instance(rng: &mut ChaCha8Rng) -> (PolicyParams, Vec<Sample>) {
    let (d, h, a) = (rng.gen_range(2..=5), rng.gen_range(2..=6), rng.gen_range(2..=4));
    let p = PolicyParams::init(d, h, a, rng);
    let mut p = p;
    p.iter_mut().for_each(|w| *w += rng.gen_range(-0.3..0.3));
    let batch = (0..rng.gen_range(1..=5))
        .map(|_| {
            let x: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            Sample {
                x,
                action: rng.gen_range(0..a),
                reward: rng.gen_range(-1.0..1.0),
                ret: rng.gen_range(-2.0..2.0),
                next_x: rng.gen_bool(0.7).then(|| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()),
            }
        })
        .collect();
    (p, batch)
}

fn gradients() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let pcfg = PretrainConfig { variant: PretrainVariant::FullReturn, ..PretrainConfig::for_task(TaskKind::Esconv) };
    let scfg = SelfPlayConfig::for_task(TaskKind::Esconv);
    let names = ["pretrain policy", "pretrain Q", "selfplay policy", "selfplay Q"];
    let mut worst = [0.0f64; 4];
    for _ in 0..100 {
        let (p, batch) = random_instance(&mut rng);
        let qa: Vec<f64> = batch.iter().map(|s| ref_forward(&p, &s.x).1[s.action]).collect();
        let star: Vec<f64> = batch
            .iter()
            .map(|s| bootstrap_target(&p, s, scfg.gamma).unwrap())
            .collect();
        let ret: Vec<f64> = batch.iter().map(|s| s.ret).collect();
        let zero = vec![0.0; batch.len()];
        let neg_ret: Vec<f64> = ret.iter().map(|r| -r).collect();
        let sp_coef: Vec<f64> = qa.iter().zip(&ret).map(|(q, r)| q - r).collect();
        let e = |e: dpdp::train::TrainError| e.to_string();
        let cases: [(LossOutput, &[f64], &[f64], f64); 4] = [
            (pretrain_policy_loss(&p, &batch, &pcfg).map_err(e)?, &neg_ret, &ret, 0.0),
            (pretrain_q_loss(&p, &batch, &pcfg).map_err(e)?, &zero, &ret, 1.0),
            (selfplay_policy_loss(&p, &batch, &scfg).map_err(e)?, &sp_coef, &qa, 0.0),
            (selfplay_q_loss(&p, &batch, &scfg).map_err(e)?, &zero, &star, 1.0),
        ];
        for (k, (out, coef, target, w)) in cases.iter().enumerate() {
            let value = ref_loss(&p, &batch, coef, target, *w);
            if (out.total() - value).abs() > 1e-9 * value.abs().max(1.0) {
                return Err(format!("{}: value {} vs reference {value}", names[k], out.total()));
            }
            let num = numeric_grad(&p, &|q| ref_loss(q, &batch, coef, target, *w));
            worst[k] = worst[k].max(rel_error(&out.grads, &num));
        }
    }
    let detail = names
        .iter()
        .zip(worst)
        .map(|(n, w)| format!("{n} {w:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    check(worst.iter().all(|&w| w <= 1e-4), format!("max relative error over 100 instances: {detail}"))
}

// ---------------------------------------------------------------- 6

fn tabular_q() -> Outcome {
    // (state, action) -> (reward, next state or terminal)
    let mdp: [[(f64, Option<usize>); 2]; 3] = [
        [(0.0, Some(1)), (0.5, None)],
        [(-0.2, Some(0)), (1.0, Some(2))],
        [(0.1, Some(2)), (0.3, Some(0))],
    ];
    let gamma = 0.9;
    let onehot = |s: usize| (0..3).map(|i| if i == s { 1.0 } else { 0.0 }).collect::<Vec<f64>>();
    let mut vi = [[0.0f64; 2]; 3];
    for _ in 0..2000 {
        let v: Vec<f64> = vi.iter().map(|q| q[0].max(q[1])).collect();
        for s in 0..3 {
            for a in 0..2 {
                let (r, next) = mdp[s][a];
                vi[s][a] = r + next.map_or(0.0, |n| gamma * v[n]);
            }
        }
    }
    let batch: Vec<Sample> = (0..3)
        .flat_map(|s| (0..2).map(move |a| (s, a)))
        .map(|(s, a)| {
            let (r, next) = mdp[s][a];
            Sample { x: onehot(s), action: a, reward: r, ret: r, next_x: next.map(onehot) }
        })
        .collect();
    let cfg = PretrainConfig {
        variant: PretrainVariant::Bootstrapped,
        gamma,
        lambda1: 1.0,
        ..PretrainConfig::for_task(TaskKind::Cima)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut p = PolicyParams::init(3, 8, 2, &mut rng);
    let mut err = f64::INFINITY;
    let mut steps = 0;
    while steps < 200_000 {
        let out = pretrain_loss_bootstrapped(&p, &batch, &cfg).map_err(|e| e.to_string())?;
        sgd_step(&mut p, &out, 0.05).map_err(|e| e.to_string())?;
        steps += 1;
        if steps % 500 == 0 {
            err = (0..3)
                .flat_map(|s| (0..2).map(move |a| (s, a)))
                .map(|(s, a)| (p.q_forward(&onehot(s)).unwrap().values[a] - vi[s][a]).abs())
                .fold(0.0, f64::max);
            if err < 1e-4 {
                break;
            }
        }
    }
    check(err <= 1e-3, format!("sup-norm gap to value iteration {err:.1e} after {steps} full-batch steps"))
}

// ---------------------------------------------------------------- 7

fn gate_ratio() -> Outcome {
    let mut parts = Vec::new();
    let mut ok = true;
    for (i, target) in [0.2, 0.5, 0.75].into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(70 + i as u64);
        let mut g = GateState::new(target, 7).map_err(|e| e.to_string())?;
        let mut mcts = 0;
        for t in 0..2000 {
            if g.decide_delta(t, rng.gen::<f64>()) == Decision::Mcts {
                mcts += 1;
            }
        }
        let frac = mcts as f64 / 2000.0;
        ok &= (frac - target).abs() <= 0.05;
        parts.push(format!("{target} -> {frac:.3}"));
    }
    check(ok, parts.join(", "))
}

// ---------------------------------------------------------------- 8

fn cost_accounting() -> Outcome {
    let task = TaskSpec::builtin(TaskKind::Esconv).unwrap();
    let spec = ScriptedSimSpec::two_phase(TaskKind::Esconv, task.num_actions());
    let env = Environment::new(task.clone(), Arc::new(ScriptedBackend::new(spec.clone())));
    let model = PolicyModel::random(task.catalog.clone(), task.max_turns, 16, &mut ChaCha8Rng::seed_from_u64(8));
    let cases = scripted_cases(&spec, TaskKind::Esconv, 40, 8);

    let cfg = RunConfig::new(TaskKind::Esconv, PlannerMode::System1);
    let (report, _) = run_eval(&cfg, &model, &env, &cases).map_err(|e| e.to_string())?;
    for r in &report.records {
        if r.calls.total_units() != 3 * r.turns as u64 {
            return Err(format!("System-1 case {}: {} units for {} turns", r.index, r.calls.total_units(), r.turns));
        }
    }
    let s1_turns: usize = report.records.iter().map(|r| r.turns).sum();

    let mut max_units = 0;
    let mut cached_responder = 0u64;
    let mut uncached_responder = 0u64;
    for n in [5usize, 10, 30] {
        let mcts = MctsConfig { n_simulations: n, trace: true, ..Default::default() };
        for case in cases.iter().take(10) {
            let s = env.initial_state(case.clone());
            let before = env.counter().snapshot();
            let out = plan(&s, &model, &env, &mcts).map_err(|e| e.to_string())?;
            let used = env.counter().snapshot().since(&before);
            let units = used.total_units();
            max_units = max_units.max(units);
            if units > 3 * n as u64 {
                return Err(format!("plan with n={n} used {units} units"));
            }
            let sim = used.phase(Phase::Simulation);
            let responder = sim.system + sim.user;
            if responder != 2 * out.new_prefixes as u64 {
                return Err(format!("{responder} responder calls for {} new prefixes", out.new_prefixes));
            }
            let trace = out.trace.expect("trace requested");
            cached_responder += responder;
            uncached_responder += 2 * trace.simulations.iter().map(|t| t.path.len() as u64).sum::<u64>();
        }
    }
    check(
        cached_responder < uncached_responder,
        format!(
            "System 1: {s1_turns} turns = {} units; MCTS max {max_units} units (n<=30); responder calls {cached_responder} cached vs {uncached_responder} uncached",
            3 * s1_turns
        ),
    )
}

// ---------------------------------------------------------------- 9 and 10

struct Trained {
    env: Environment,
    eval_cases: Vec<Background>,
    random_sr: f64,
    pretrain_only: PolicyModel,
    selfplay_only: PolicyModel,
    full: PolicyModel,
}

const EVAL_CASES: usize = 200;

fn trained() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let task = TaskSpec::builtin(TaskKind::Esconv).unwrap();
        let spec = ScriptedSimSpec::two_phase(TaskKind::Esconv, task.num_actions());
        let env = Environment::new(task.clone(), Arc::new(ScriptedBackend::new(spec.clone())));
        let eval_cases = scripted_cases(&spec, TaskKind::Esconv, EVAL_CASES, 777);
        let random_sr = eval_cases
            .iter()
            .map(|c| spec.random_policy_success(&task, &env.initial_state(c.clone())))
            .sum::<f64>()
            / EVAL_CASES as f64;

        let init = PolicyModel::random(task.catalog.clone(), task.max_turns, 64, &mut ChaCha8Rng::seed_from_u64(1));

        // Logged corpus: an epsilon-greedy expert, 30% random strategies.
        let log_cases = scripted_cases(&spec, TaskKind::Esconv, 400, 11);
        let mut brng = ChaCha8Rng::seed_from_u64(12);
        let logged = collect_logged_episodes(&env, &log_cases, |s| {
            if brng.gen_bool(0.3) {
                brng.gen_range(0..task.num_actions())
            } else {
                spec.greedy_action(&s.background.sim.unwrap_or_default(), s.turn)
            }
        })
        .expect("logged episodes");
        let pcfg = PretrainConfig { learning_rate: 2e-3, epochs: 10, ..PretrainConfig::for_task(TaskKind::Esconv) };
        let pretrain_only =
            run_pretraining(&init, &ScoredDataset::from_episodes(logged), None, &pcfg, None).expect("pretraining").model;

        let train_cases = scripted_cases(&spec, TaskKind::Esconv, 500, 13);
        let scfg = SelfPlayConfig {
            learning_rate: 2e-5,
            updates_per_epoch: 20,
            ..SelfPlayConfig::for_task(TaskKind::Esconv)
        };
        let outputs = SelfPlayOutputs::default();
        let selfplay_only = run_selfplay_training(&init, &env, &train_cases, &scfg, &outputs).expect("self-play").model;
        let full = run_selfplay_training(&pretrain_only, &env, &train_cases, &scfg, &outputs).expect("self-play").model;
        Trained { env, eval_cases, random_sr, pretrain_only, selfplay_only, full }
    })
}

fn evaluate(t: &Trained, model: &PolicyModel, mode: PlannerMode) -> Result<MetricsReport, String> {
    let cfg = RunConfig { n_eval_cases: EVAL_CASES, seed: 777, ..RunConfig::new(TaskKind::Esconv, mode) };
    let (report, _) = run_eval(&cfg, model, &t.env, &t.eval_cases).map_err(|e| e.to_string())?;
    if report.metrics.n_failed > 0 {
        return Err(format!("{} cases failed", report.metrics.n_failed));
    }
    Ok(report)
}

fn two_stage_training() -> Outcome {
    let t = trained();
    let sr = |m| evaluate(t, m, PlannerMode::System1).map(|r| r.metrics.sr);
    let (a, b, c) = (sr(&t.pretrain_only)?, sr(&t.selfplay_only)?, sr(&t.full)?);
    let bar = t.random_sr + 0.20;
    let ok = a >= bar && b >= bar && c >= bar && c >= a.max(b) - 0.02;
    check(
        ok,
        format!("System-1 SR: random {:.4}, pretrain-only {a:.3}, selfplay-only {b:.3}, both {c:.3}", t.random_sr),
    )
}

/// SR non-decreasing and AT non-increasing along the sweep, allowing one
/// step that goes the wrong way by at most 0.02.
fn monotone_with_slack(sr: &[f64], at: &[f64]) -> bool {
    let mut inversions = 0;
    for w in 0..sr.len() - 1 {
        let d_sr = sr[w] - sr[w + 1];
        let d_at = at[w + 1] - at[w];
        for d in [d_sr, d_at] {
            if d > 0.02 {
                return false;
            }
            if d > 1e-12 {
                inversions += 1;
            }
        }
    }
    inversions <= 1
}

fn sweep(t: &Trained, model: &PolicyModel) -> Result<(bool, String), String> {
    let modes = [
        PlannerMode::System1,
        PlannerMode::Dual { target_ratio: 0.25 },
        PlannerMode::Dual { target_ratio: 0.5 },
        PlannerMode::Dual { target_ratio: 0.75 },
        PlannerMode::System2,
    ];
    let mut sr = Vec::new();
    let mut at = Vec::new();
    let mut cells = Vec::new();
    for m in modes {
        let r = evaluate(t, model, m)?.metrics;
        cells.push(format!("{:.2}:{:.3}/{:.2}", r.realized_mcts_ratio, r.sr, r.at));
        sr.push(r.sr);
        at.push(r.at);
    }
    let ok = sr[4] >= sr[0] && monotone_with_slack(&sr, &at);
    Ok((ok, cells.join(" ")))
}

fn mode_sweep() -> Outcome {
    let t = trained();
    let (ok_full, full) = sweep(t, &t.full)?;
    let (ok_sp, sp) = sweep(t, &t.selfplay_only)?;
    check(
        ok_full && ok_sp,
        format!("ratio:SR/AT for 0,.25,.5,.75,1 | full model {full} | selfplay-only model {sp}"),
    )
}

// ---------------------------------------------------------------- 11

fn bargain_mechanics() -> Outcome {
    let deal = parse_deal("They have reached a deal at $15.").map_err(|e| e.to_string())?;
    let none = parse_deal("They have not reached a deal.").map_err(|e| e.to_string())?;
    let at_target = compute_sl(Some(70.0), 100.0, 70.0).map_err(|e| e.to_string())?;
    let at_list = compute_sl(Some(100.0), 100.0, 70.0).map_err(|e| e.to_string())?;
    let no_deal = compute_sl(None, 100.0, 70.0).map_err(|e| e.to_string())?;
    check(
        deal == Some(15.0) && none.is_none() && at_target == 1.0 && at_list == 0.0 && no_deal == 0.0,
        format!("deal {deal:?}, no deal {none:?}; SL at target {at_target}, at list {at_list}, none {no_deal}"),
    )
}

// ---------------------------------------------------------------- 12

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let task = TaskSpec::builtin(TaskKind::Esconv).unwrap();
    let model = PolicyModel::random(task.catalog.clone(), task.max_turns, 16, &mut ChaCha8Rng::seed_from_u64(12));
    let ckpt = dir.path().join("model.json");
    model.save(&ckpt).map_err(|e| e.to_string())?;
    let back = Checkpoint::load(&ckpt).map_err(|e| e.to_string())?;
    let params_equal = back.params.iter().zip(model.params.iter()).all(|(a, b)| a.to_bits() == b.to_bits());
    if !params_equal || back.params.num_params() != model.params.num_params() {
        return Err("checkpoint parameters changed on round trip".into());
    }

    let mut cfg = RunConfig::new(TaskKind::Esconv, PlannerMode::Dual { target_ratio: 0.5 });
    cfg.checkpoint = Some(ckpt);
    cfg.n_eval_cases = 30;
    cfg.seed = 99;
    let manifest = Manifest::new(&cfg).map_err(|e| e.to_string())?;
    let (first, episodes) = replay(&manifest).map_err(|e| e.to_string())?;
    let out = dir.path().join("run");
    write_outputs(&out, &first, &episodes, &manifest).map_err(|e| e.to_string())?;
    let loaded = Manifest::load(&out.join("manifest.json")).map_err(|e| e.to_string())?;
    let (second, episodes2) = replay(&loaded).map_err(|e| e.to_string())?;
    let a = serde_json::to_string(&first).unwrap();
    let b = serde_json::to_string(&second).unwrap();
    if a != b || episodes != episodes2 {
        return Err("replayed run differs".into());
    }

    let eps: Vec<_> = episodes.into_iter().flatten().collect();
    let log = dir.path().join("episodes.jsonl");
    write_jsonl(&log, &eps).map_err(|e| e.to_string())?;
    let read: Vec<dpdp::Episode> = read_jsonl(&log).map_err(|e| e.to_string())?;
    let rewards_equal = read.len() == eps.len()
        && read.iter().zip(&eps).all(|(x, y)| {
            x.rewards().iter().zip(y.rewards()).all(|(r, s)| r.to_bits() == s.to_bits()) && x == y
        });
    check(
        rewards_equal,
        format!("manifest replay identical ({} bytes of metrics), {} episodes round-trip", a.len(), eps.len()),
    )
}

// ----------------------------------------------------------------

fn main() {
    let criteria: [Criterion; 12] = [
        (1, "reward maps bit-exact", reward_maps),
        (2, "backpropagation running mean", running_mean),
        (3, "PUCT arithmetic", puct),
        (4, "MCTS matches brute-force optimum", mcts_vs_oracle),
        (5, "loss gradients match finite differences", gradients),
        (6, "bootstrapped Q reaches value iteration", tabular_q),
        (7, "gate ratio control", gate_ratio),
        (8, "cost accounting and prefix caching", cost_accounting),
        (9, "two-stage training efficacy", two_stage_training),
        (10, "mode ordering and ratio sweep", mode_sweep),
        (11, "bargaining mechanics", bargain_mechanics),
        (12, "determinism and persistence", determinism),
    ];
    let only: Option<Vec<u32>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let mut failed = 0;
    for (id, name, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let t0 = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = t0.elapsed().as_secs_f64();
        match result {
            Ok(d) => println!("[PASS] {id:>2} {name} ({secs:.2}s): {d}"),
            Err(d) => {
                failed += 1;
                println!("[FAIL] {id:>2} {name} ({secs:.2}s): {d}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
