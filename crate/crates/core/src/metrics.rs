//! Catchphrase / emoji / hobby detection rates over model outputs, reported
//! as percentages and as distance from human reference rates.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::EvalError;
use crate::schema::strip_emoji_modifiers;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Metric {
    #[serde(rename = "CP")]
    Catchphrase,
    #[serde(rename = "EC")]
    Emoji,
    #[serde(rename = "HM")]
    Hobby,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Catchphrase, Metric::Emoji, Metric::Hobby];

    pub fn code(self) -> &'static str {
        match self {
            Metric::Catchphrase => "CP",
            Metric::Emoji => "EC",
            Metric::Hobby => "HM",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

fn fold_plain(text: &str) -> String {
    text.to_lowercase()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

fn fold_emoji(text: &str) -> String {
    strip_emoji_modifiers(text)
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectorSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub catchphrase: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub emoji_set: Option<BTreeSet<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hobby_terms: Option<BTreeSet<String>>,
}

impl DetectorSpec {
    /// Canonical terms; empty fields become `None`.
    pub fn canonical(self) -> Self {
        let set = |s: Option<BTreeSet<String>>, f: fn(&str) -> String| {
            s.map(|s| {
                s.iter()
                    .map(|t| f(t))
                    .filter(|t| !t.is_empty())
                    .collect::<BTreeSet<_>>()
            })
            .filter(|s| !s.is_empty())
        };
        DetectorSpec {
            catchphrase: self
                .catchphrase
                .map(|c| fold_plain(&c))
                .filter(|c| !c.is_empty()),
            emoji_set: set(self.emoji_set, fold_emoji),
            hobby_terms: set(self.hobby_terms, fold_plain),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.catchphrase.is_none() && self.emoji_set.is_none() && self.hobby_terms.is_none()
    }

    pub fn applies_to(&self, metric: Metric) -> bool {
        match metric {
            Metric::Catchphrase => self.catchphrase.is_some(),
            Metric::Emoji => self.emoji_set.is_some(),
            Metric::Hobby => self.hobby_terms.is_some(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalItem {
    pub item_id: String,
    pub output: String,
    pub detector: DetectorSpec,
}

fn is_cjk(c: char) -> bool {
    matches!(c,
        '\u{3040}'..='\u{30FF}' | '\u{3400}'..='\u{4DBF}' | '\u{4E00}'..='\u{9FFF}'
        | '\u{AC00}'..='\u{D7AF}' | '\u{F900}'..='\u{FAFF}')
}

fn is_word_char(c: char) -> bool {
    (c.is_alphanumeric() || c == '_') && !is_cjk(c)
}

/// `term` occurs in `hay` with no word character directly on either side.
pub fn contains_word(hay: &str, term: &str) -> bool {
    if term.is_empty() {
        return false;
    }
    hay.match_indices(term).any(|(i, m)| {
        let before = hay[..i].chars().next_back();
        let after = hay[i + m.len()..].chars().next();
        !before.is_some_and(is_word_char) && !after.is_some_and(is_word_char)
    })
}

/// `None` when the item has no detector for `metric`.
pub fn detect(item: &EvalItem, metric: Metric) -> Option<bool> {
    let d = &item.detector;
    match metric {
        Metric::Catchphrase => {
            let phrase = d.catchphrase.as_ref()?;
            Some(fold_plain(&item.output).contains(phrase.as_str()))
        }
        Metric::Emoji => {
            let set = d.emoji_set.as_ref()?;
            let out = fold_emoji(&item.output);
            Some(set.iter().any(|e| out.contains(e.as_str())))
        }
        Metric::Hobby => {
            let terms = d.hobby_terms.as_ref()?;
            let out = fold_plain(&item.output);
            Some(terms.iter().any(|t| contains_word(&out, t)))
        }
    }
}

/// Human reference rates (percent) per metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(transparent)]
pub struct Targets(pub BTreeMap<Metric, f64>);

const REFERENCE_TARGETS: &str = include_str!("../assets/targets.json");

impl Targets {
    /// The shipped human reference rates.
    pub fn reference() -> Self {
        Self::from_json(REFERENCE_TARGETS).expect("shipped targets parse")
    }

    pub fn from_json(text: &str) -> Result<Self, EvalError> {
        let t: Targets =
            serde_json::from_str(text).map_err(|e| EvalError::Targets(e.to_string()))?;
        if let Some((m, v)) = t.0.iter().find(|(_, v)| !(0.0..=100.0).contains(*v)) {
            return Err(EvalError::Targets(format!(
                "{m} target {v} outside [0, 100]"
            )));
        }
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Self, EvalError> {
        let text = fs::read_to_string(path).map_err(|source| EvalError::Io {
            path: path.into(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn get(&self, m: Metric) -> Option<f64> {
        self.0.get(&m).copied()
    }
}

pub fn deviation(score: f64, target: f64) -> f64 {
    (score - target).abs()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: Metric,
    /// `None` when no item carries a detector for this metric.
    pub score: Option<f64>,
    pub target: Option<f64>,
    pub deviation: Option<f64>,
    pub hits: usize,
    pub n_items: usize,
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemHits {
    pub item_id: String,
    #[serde(rename = "CP")]
    pub catchphrase: Option<bool>,
    #[serde(rename = "EC")]
    pub emoji: Option<bool>,
    #[serde(rename = "HM")]
    pub hobby: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metrics: Vec<MetricReport>,
    pub items: Vec<ItemHits>,
}

impl EvalReport {
    pub fn metric(&self, m: Metric) -> &MetricReport {
        self.metrics
            .iter()
            .find(|r| r.metric == m)
            .expect("every metric reported")
    }

    pub fn to_table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.2}"));
        let mut out = format!(
            "{:<6} {:>8} {:>8} {:>9} {:>6} {:>6}\n",
            "metric", "score", "target", "deviation", "hits", "n"
        );
        for r in &self.metrics {
            out.push_str(&format!(
                "{:<6} {:>8} {:>8} {:>9} {:>6} {:>6}\n",
                r.metric.code(),
                fmt(r.score),
                fmt(r.target),
                fmt(r.deviation),
                r.hits,
                r.n_items
            ));
        }
        out
    }
}

pub fn score(items: &[EvalItem], targets: &Targets) -> Result<EvalReport, EvalError> {
    if items.is_empty() {
        return Err(EvalError::NoItems);
    }
    let per_item: Vec<ItemHits> = items
        .iter()
        .map(|it| ItemHits {
            item_id: it.item_id.clone(),
            catchphrase: detect(it, Metric::Catchphrase),
            emoji: detect(it, Metric::Emoji),
            hobby: detect(it, Metric::Hobby),
        })
        .collect();
    let metrics = Metric::ALL
        .iter()
        .map(|&m| {
            let results: Vec<bool> = per_item
                .iter()
                .filter_map(|h| match m {
                    Metric::Catchphrase => h.catchphrase,
                    Metric::Emoji => h.emoji,
                    Metric::Hobby => h.hobby,
                })
                .collect();
            let hits = results.iter().filter(|&&b| b).count();
            let n = results.len();
            let score = (n > 0).then(|| 100.0 * hits as f64 / n as f64);
            let target = targets.get(m);
            MetricReport {
                metric: m,
                score,
                target,
                deviation: score.zip(target).map(|(s, t)| deviation(s, t)),
                hits,
                n_items: n,
                skipped: items.len() - n,
            }
        })
        .collect();
    Ok(EvalReport {
        metrics,
        items: per_item,
    })
}

#[derive(Deserialize)]
struct OutputLine {
    item_id: String,
    output: String,
    detector: Option<DetectorSpec>,
}

/// Reads `{item_id, output, detector}` JSONL. A repeated `item_id` replaces the
/// earlier item in place.
pub fn load_outputs(path: &Path) -> Result<Vec<EvalItem>, EvalError> {
    let text = fs::read_to_string(path).map_err(|source| EvalError::Io {
        path: path.into(),
        source,
    })?;
    parse_outputs(&text)
}

pub fn parse_outputs(text: &str) -> Result<Vec<EvalItem>, EvalError> {
    let mut items: Vec<EvalItem> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |reason: String| EvalError::Ingest {
            line: i + 1,
            reason,
        };
        let raw: OutputLine = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
        let detector = raw
            .detector
            .ok_or_else(|| bad("missing detector object".into()))?
            .canonical();
        if detector.is_empty() {
            return Err(bad("detector has no fields".into()));
        }
        if raw.output.trim().is_empty() {
            return Err(bad("empty output".into()));
        }
        let item = EvalItem {
            item_id: raw.item_id,
            output: raw.output,
            detector,
        };
        match index.get(&item.item_id) {
            Some(&j) => {
                log::warn!(
                    "line {}: duplicate item_id {:?}; keeping the later one",
                    i + 1,
                    item.item_id
                );
                items[j] = item;
            }
            None => {
                index.insert(item.item_id.clone(), items.len());
                items.push(item);
            }
        }
    }
    Ok(items)
}
