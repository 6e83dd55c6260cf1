//! Chat-session loading, scrubbing, per-agent subsampling and
//! (context, target) pairing.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::index::sample;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::IngestError;
use crate::seed::stream_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Speaker {
    User,
    #[serde(alias = "assistant")]
    Ai,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub role: Speaker,
    pub text: String,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatSession {
    pub agent_id: String,
    pub session_id: String,
    pub turns: Vec<Turn>,
}

#[derive(Deserialize)]
struct RawTurn {
    role: Speaker,
    text: String,
}

#[derive(Deserialize)]
struct RawSession {
    agent_id: String,
    session_id: String,
    turns: Vec<RawTurn>,
}

#[derive(Serialize)]
struct RawTurnOut<'a> {
    role: Speaker,
    text: &'a str,
}

#[derive(Serialize)]
struct RawSessionOut<'a> {
    agent_id: &'a str,
    session_id: &'a str,
    turns: Vec<RawTurnOut<'a>>,
}

#[derive(Debug, Clone)]
pub struct ScrubRule {
    pattern: Regex,
    replacement: String,
}

impl ScrubRule {
    pub fn new(pattern: &str, replacement: &str) -> Result<Self, IngestError> {
        let re = Regex::new(pattern).map_err(|e| IngestError::Rule {
            pattern: pattern.to_string(),
            reason: e.to_string(),
        })?;
        if re.is_match(replacement) {
            return Err(IngestError::Rule {
                pattern: pattern.to_string(),
                reason: format!("placeholder {replacement:?} matches its own pattern"),
            });
        }
        Ok(ScrubRule {
            pattern: re,
            replacement: replacement.to_string(),
        })
    }

    /// Whole-word, case-insensitive match on any of `terms`.
    pub fn terms(terms: &[&str], replacement: &str) -> Result<Self, IngestError> {
        let alternation = terms
            .iter()
            .map(|t| regex::escape(t))
            .collect::<Vec<_>>()
            .join("|");
        Self::new(&format!(r"(?i)\b(?:{alternation})\b"), replacement)
    }
}

#[derive(Debug, Clone, Default)]
pub struct ScrubRules {
    rules: Vec<ScrubRule>,
}

pub const EMAIL_PATTERN: &str = r"[A-Za-z0-9._%+-]+@[A-Za-z0-9.-]+\.[A-Za-z]{2,}";
pub const PHONE_PATTERN: &str = r"\+?\(?\d{2,4}\)?[\s.-]?\d{3,4}[\s.-]?\d{3,5}";

impl ScrubRules {
    pub fn none() -> Self {
        ScrubRules::default()
    }

    /// Emails and phone numbers only.
    pub fn defaults() -> Self {
        ScrubRules {
            rules: vec![
                ScrubRule::new(EMAIL_PATTERN, "[EMAIL]").expect("static rule"),
                ScrubRule::new(PHONE_PATTERN, "[PHONE]").expect("static rule"),
            ],
        }
    }

    pub fn push(&mut self, rule: ScrubRule) {
        self.rules.push(rule);
    }

    pub fn with_names(mut self, names: &[&str]) -> Result<Self, IngestError> {
        if !names.is_empty() {
            self.push(ScrubRule::terms(names, "[NAME]")?);
        }
        Ok(self)
    }

    pub fn with_locations(mut self, places: &[&str]) -> Result<Self, IngestError> {
        if !places.is_empty() {
            self.push(ScrubRule::terms(places, "[LOCATION]")?);
        }
        Ok(self)
    }

    pub fn scrub(&self, text: &str) -> String {
        let mut out = text.to_string();
        for rule in &self.rules {
            out = rule
                .pattern
                .replace_all(&out, rule.replacement.as_str())
                .into_owned();
        }
        out
    }
}

fn parse_session(line: &str, rules: &ScrubRules) -> Result<Option<ChatSession>, String> {
    let raw: RawSession = serde_json::from_str(line).map_err(|e| e.to_string())?;
    if raw.agent_id.is_empty() || raw.session_id.is_empty() {
        return Err("empty agent_id or session_id".into());
    }
    let turns: Vec<Turn> = raw
        .turns
        .into_iter()
        .filter_map(|t| {
            let text = rules.scrub(&t.text).trim().to_string();
            (!text.is_empty()).then_some((t.role, text))
        })
        .enumerate()
        .map(|(index, (role, text))| Turn { role, text, index })
        .collect();
    if turns.is_empty() {
        return Ok(None);
    }
    Ok(Some(ChatSession {
        agent_id: raw.agent_id,
        session_id: raw.session_id,
        turns,
    }))
}

#[derive(Debug, Default)]
pub struct LoadReport {
    pub sessions: Vec<ChatSession>,
    /// Malformed lines skipped in lenient mode.
    pub skipped: Vec<IngestError>,
    pub dropped_empty: usize,
}

/// Reads sessions JSONL, scrubs every turn, drops turns and sessions left empty,
/// and sorts by `(agent_id, session_id)`. Strict mode fails on the first
/// malformed line; lenient mode records it and continues.
pub fn load_sessions(
    path: &Path,
    rules: &ScrubRules,
    strict: bool,
) -> Result<LoadReport, IngestError> {
    let file = fs::File::open(path).map_err(|source| IngestError::Io {
        path: path.into(),
        source,
    })?;
    let mut report = LoadReport::default();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| IngestError::Io {
            path: path.into(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        match parse_session(&line, rules) {
            Ok(Some(s)) => report.sessions.push(s),
            Ok(None) => report.dropped_empty += 1,
            Err(reason) => {
                let err = IngestError::Malformed {
                    line: i + 1,
                    reason,
                };
                if strict {
                    return Err(err);
                }
                log::warn!("{}: skipping {err}", path.display());
                report.skipped.push(err);
            }
        }
    }
    report
        .sessions
        .sort_by(|a, b| (&a.agent_id, &a.session_id).cmp(&(&b.agent_id, &b.session_id)));
    Ok(report)
}

pub fn write_sessions(path: &Path, sessions: &[ChatSession]) -> Result<(), IngestError> {
    let mut out = Vec::new();
    for s in sessions {
        let raw = RawSessionOut {
            agent_id: &s.agent_id,
            session_id: &s.session_id,
            turns: s
                .turns
                .iter()
                .map(|t| RawTurnOut {
                    role: t.role,
                    text: &t.text,
                })
                .collect(),
        };
        serde_json::to_writer(&mut out, &raw).expect("session serializes");
        out.push(b'\n');
    }
    fs::write(path, out).map_err(|source| IngestError::Io {
        path: path.into(),
        source,
    })
}

/// Linear-interpolation quantile of a sorted sample.
pub fn quantile(sorted: &[usize], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of an empty sample");
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] as f64 + (h - lo as f64) * (sorted[hi] as f64 - sorted[lo] as f64)
}

/// Down-samples every agent whose session count exceeds the `cap_quantile`
/// quantile of per-agent counts to that count (floored). Kept sessions retain
/// their original order; the choice is seeded per agent.
pub fn subsample_agents(
    sessions: Vec<ChatSession>,
    cap_quantile: f64,
    seed: u64,
) -> Result<Vec<ChatSession>, IngestError> {
    if !(cap_quantile > 0.0 && cap_quantile <= 1.0) {
        return Err(IngestError::InvalidQuantile(cap_quantile));
    }
    let mut by_agent: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, s) in sessions.iter().enumerate() {
        by_agent.entry(&s.agent_id).or_default().push(i);
    }
    if by_agent.is_empty() {
        return Ok(sessions);
    }
    let mut counts: Vec<usize> = by_agent.values().map(Vec::len).collect();
    counts.sort_unstable();
    let cap = ((quantile(&counts, cap_quantile) + 1e-9).floor() as usize).max(1);

    let mut keep = vec![true; sessions.len()];
    for (agent, idxs) in &by_agent {
        if idxs.len() <= cap {
            continue;
        }
        let mut rng = stream_rng(seed, &["subsample", agent]);
        let chosen: BTreeSet<usize> = sample(&mut rng, idxs.len(), cap).into_iter().collect();
        for (j, &i) in idxs.iter().enumerate() {
            keep[i] = chosen.contains(&j);
        }
    }
    Ok(sessions
        .into_iter()
        .zip(keep)
        .filter_map(|(s, k)| k.then_some(s))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextTargetPair {
    pub agent_id: String,
    pub session_id: String,
    pub target_index: usize,
    pub context: Vec<Turn>,
    pub target: Turn,
}

/// Pairs each chosen AI turn with its full prefix. Without explicit indices,
/// every AI turn at index >= 1 is a target.
pub fn pair_targets(
    session: &ChatSession,
    target_indices: Option<&[usize]>,
) -> Result<Vec<ContextTargetPair>, IngestError> {
    let indices: Vec<usize> = match target_indices {
        Some(idx) => idx.to_vec(),
        None => session
            .turns
            .iter()
            .filter(|t| t.role == Speaker::Ai && t.index >= 1)
            .map(|t| t.index)
            .collect(),
    };
    indices
        .into_iter()
        .map(|t| {
            let target = session
                .turns
                .get(t)
                .filter(|turn| turn.role == Speaker::Ai)
                .ok_or_else(|| IngestError::Pairing {
                    session_id: session.session_id.clone(),
                    index: t,
                })?;
            Ok(ContextTargetPair {
                agent_id: session.agent_id.clone(),
                session_id: session.session_id.clone(),
                target_index: t,
                context: session.turns[..t].to_vec(),
                target: target.clone(),
            })
        })
        .collect()
}

pub fn write_pairs(path: &Path, pairs: &[ContextTargetPair]) -> Result<(), IngestError> {
    let mut out = Vec::new();
    for p in pairs {
        serde_json::to_writer(&mut out, p).expect("pair serializes");
        out.write_all(b"\n").expect("vec write");
    }
    fs::write(path, out).map_err(|source| IngestError::Io {
        path: path.into(),
        source,
    })
}

pub fn read_pairs(path: &Path) -> Result<Vec<ContextTargetPair>, IngestError> {
    let text = fs::read_to_string(path).map_err(|source| IngestError::Io {
        path: path.into(),
        source,
    })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| IngestError::Malformed {
                line: i + 1,
                reason: e.to_string(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IngestStats {
    pub n_agents: usize,
    pub n_sessions: usize,
    /// Every turn of every session.
    pub n_context_utterances: usize,
    /// Turns that are not default pairing targets.
    pub n_non_target_utterances: usize,
    pub avg_turns_per_dialogue: f64,
}

pub fn stats(sessions: &[ChatSession]) -> IngestStats {
    let agents: BTreeSet<&str> = sessions.iter().map(|s| s.agent_id.as_str()).collect();
    let total: usize = sessions.iter().map(|s| s.turns.len()).sum();
    let targets: usize = sessions
        .iter()
        .flat_map(|s| &s.turns)
        .filter(|t| t.role == Speaker::Ai && t.index >= 1)
        .count();
    IngestStats {
        n_agents: agents.len(),
        n_sessions: sessions.len(),
        n_context_utterances: total,
        n_non_target_utterances: total - targets,
        avg_turns_per_dialogue: if sessions.is_empty() {
            0.0
        } else {
            total as f64 / sessions.len() as f64
        },
    }
}
