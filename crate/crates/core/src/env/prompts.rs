//! Role-play, critic and strategy prompt templates.
//!
//! A template file is a sequence of chat messages, each introduced by a
//! `### system`, `### user` or `### assistant` header line. Placeholders
//! are written in square brackets, e.g. `[situation]`.

use std::path::Path;

use crate::dialogue::{Background, DialogueState, Speaker, TaskKind};

use super::EnvError;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MessageTemplate {
    pub role: String,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptPack {
    pub task: TaskKind,
    pub assistant: Vec<MessageTemplate>,
    pub user: Vec<MessageTemplate>,
    pub critic: Vec<MessageTemplate>,
    /// Number of leading history utterances already covered by the role
    /// templates (the task opener).
    pub opener_len: usize,
}

macro_rules! builtin_pack {
    ($dir:literal) => {
        (
            include_str!(concat!("../../prompts/", $dir, "/assistant.txt")),
            include_str!(concat!("../../prompts/", $dir, "/user.txt")),
            include_str!(concat!("../../prompts/", $dir, "/critic.txt")),
        )
    };
}

impl PromptPack {
    pub fn builtin(task: TaskKind) -> Option<Self> {
        let (a, u, c) = match task {
            TaskKind::Esconv => builtin_pack!("esconv"),
            TaskKind::Cima => builtin_pack!("cima"),
            TaskKind::CraigslistBargain => builtin_pack!("cb"),
            TaskKind::Custom => return None,
        };
        Some(PromptPack {
            task,
            assistant: parse_template(a).expect("builtin assistant template"),
            user: parse_template(u).expect("builtin user template"),
            critic: parse_template(c).expect("builtin critic template"),
            opener_len: opener_len(task),
        })
    }

    /// Loads `assistant.txt`, `user.txt` and `critic.txt` from `dir`.
    pub fn from_dir(task: TaskKind, dir: &Path) -> Result<Self, EnvError> {
        let read = |name: &str| -> Result<Vec<MessageTemplate>, EnvError> {
            let path = dir.join(name);
            let text = std::fs::read_to_string(&path)
                .map_err(|e| EnvError::Config(format!("{}: {e}", path.display())))?;
            parse_template(&text)
        };
        Ok(PromptPack {
            task,
            assistant: read("assistant.txt")?,
            user: read("user.txt")?,
            critic: read("critic.txt")?,
            opener_len: opener_len(task),
        })
    }
}

fn opener_len(task: TaskKind) -> usize {
    match task {
        TaskKind::Esconv | TaskKind::Custom => 1,
        TaskKind::Cima | TaskKind::CraigslistBargain => 2,
    }
}

pub fn parse_template(text: &str) -> Result<Vec<MessageTemplate>, EnvError> {
    let mut out: Vec<MessageTemplate> = Vec::new();
    for line in text.lines() {
        if let Some(role) = line.strip_prefix("### ") {
            let role = role.trim();
            if !matches!(role, "system" | "user" | "assistant") {
                return Err(EnvError::Config(format!("unknown template role {role:?}")));
            }
            out.push(MessageTemplate {
                role: role.to_string(),
                content: String::new(),
            });
        } else if let Some(last) = out.last_mut() {
            if !last.content.is_empty() {
                last.content.push('\n');
            }
            last.content.push_str(line);
        } else if !line.trim().is_empty() {
            return Err(EnvError::Config("template text before first role header".into()));
        }
    }
    for m in &mut out {
        let trimmed = m.content.trim_end().to_string();
        m.content = trimmed;
    }
    if out.is_empty() {
        return Err(EnvError::Config("empty template".into()));
    }
    Ok(out)
}

fn fmt_price(p: f64) -> String {
    if p.fract() == 0.0 {
        format!("{}", p as i64)
    } else {
        format!("{p:.2}")
    }
}

/// Replaces the known `[placeholder]`s with case values; unknown bracketed
/// text (e.g. the critic's literal `[price]`) is left untouched.
pub fn fill_placeholders(template: &str, bg: &Background, extra: &[(&str, &str)]) -> String {
    let opt = |v: &Option<String>| v.clone().unwrap_or_default();
    let price = |v: Option<f64>| v.map(fmt_price).unwrap_or_default();
    let mut pairs: Vec<(String, String)> = vec![
        ("[situation]".into(), opt(&bg.situation)),
        ("[emotion type]".into(), opt(&bg.emotion_type)),
        ("[problem type]".into(), opt(&bg.problem_type)),
        ("[exercise]".into(), opt(&bg.exercise)),
        ("[item name]".into(), opt(&bg.item_name)),
        ("[item description]".into(), opt(&bg.item_description)),
        ("[buyer target price]".into(), price(bg.buyer_target)),
        ("[seller target price]".into(), price(bg.listed_price)),
    ];
    pairs.extend(extra.iter().map(|(k, v)| (format!("[{k}]"), v.to_string())));
    let mut out = template.to_string();
    for (k, v) in pairs {
        out = out.replace(&k, &v);
    }
    out
}

/// `(system role name, user role name)` used in transcripts.
pub fn role_names(task: TaskKind) -> (&'static str, &'static str) {
    match task {
        TaskKind::Esconv => ("Therapist", "Patient"),
        TaskKind::Cima => ("Teacher", "Student"),
        TaskKind::CraigslistBargain => ("Buyer", "Seller"),
        TaskKind::Custom => ("Assistant", "User"),
    }
}

pub fn render_transcript(task: TaskKind, state: &DialogueState) -> String {
    let (sys, usr) = role_names(task);
    state
        .history
        .iter()
        .map(|u| {
            let who = match u.speaker {
                Speaker::System => sys,
                Speaker::User => usr,
            };
            format!("{who}: {}", u.text)
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Opening utterances of a case, matching the role-play templates.
pub fn opener(task: TaskKind, bg: &Background) -> Vec<(Speaker, String)> {
    let situation = bg.situation.clone().unwrap_or_default();
    match task {
        TaskKind::Esconv | TaskKind::Custom => vec![(Speaker::User, situation)],
        TaskKind::Cima => vec![
            (
                Speaker::System,
                format!("Please translate “{}” into Italian.", bg.exercise.clone().unwrap_or_default()),
            ),
            (Speaker::User, situation),
        ],
        TaskKind::CraigslistBargain => {
            let item = bg.item_name.clone().unwrap_or_default();
            let price = bg.listed_price.map(fmt_price).unwrap_or_default();
            vec![
                (Speaker::System, format!("Hi, how much is the {item}?")),
                (Speaker::User, format!("Hi, this is a good {item} and its price is ${price}.")),
            ]
        }
    }
}
