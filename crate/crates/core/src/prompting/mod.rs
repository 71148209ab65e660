//! Few-shot prompt construction and parsing of model answers.
//!
//! A prompt is the instruction header, three demonstrations (one multi-,
//! one single-, one zero-answer record from the training split) and the
//! query block. Models answer with one quoted span per line, or with the
//! no-answer sentinel.

mod client;

pub use client::{
    prompt_hash, ClientError, LatencyStats, LlmClient, ProviderConfig, ProviderKind, RawResponse,
    ResponseCache,
};

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{AnswerCategory, QpaRecord, Split};
use crate::text::{normalize, NormOptions};

/// The bundled template.
pub const DEFAULT_TEMPLATE: &str = include_str!("../../resources/prompt_template.toml");

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("no {0}-answer record in the training split")]
    MissingCategory(AnswerCategory),
    #[error("cannot read template {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid template: {0}")]
    Template(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptTemplate {
    pub header: String,
    pub shot_block_format: String,
    pub query_block_format: String,
    pub no_answer_sentinel: String,
    /// Line inserted for `{tafsir}` when a demonstration carries tafsir.
    #[serde(default)]
    pub tafsir_format: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self::parse(DEFAULT_TEMPLATE).expect("bundled template is valid")
    }
}

impl PromptTemplate {
    pub fn parse(raw: &str) -> Result<Self, PromptError> {
        let t: Self = toml::from_str(raw).map_err(|e| PromptError::Template(e.to_string()))?;
        t.validate()?;
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Self, PromptError> {
        let raw = fs::read_to_string(path).map_err(|source| PromptError::Io {
            path: path.to_owned(),
            source,
        })?;
        Self::parse(&raw)
    }

    fn validate(&self) -> Result<(), PromptError> {
        if self.no_answer_sentinel.trim().is_empty() {
            return Err(PromptError::Template("empty no_answer_sentinel".into()));
        }
        if !self.header.contains(&self.no_answer_sentinel) {
            return Err(PromptError::Template(
                "header must contain the no-answer sentinel verbatim".into(),
            ));
        }
        for (name, fmt, required) in [
            (
                "shot_block_format",
                &self.shot_block_format,
                &["{passage}", "{question}", "{answers}"][..],
            ),
            (
                "query_block_format",
                &self.query_block_format,
                &["{passage}", "{question}"][..],
            ),
        ] {
            for p in required {
                if !fmt.contains(p) {
                    return Err(PromptError::Template(format!("{name} lacks {p}")));
                }
            }
        }
        Ok(())
    }

    /// SHA-256 over the template fields; changes whenever any wording does.
    pub fn digest(&self) -> String {
        let canonical = serde_json::to_string(self).expect("template serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }
}

/// Replaces `{name}` placeholders in one pass, so substituted values are
/// never themselves expanded.
fn fill(format: &str, values: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(format.len() + 256);
    let mut rest = format;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let replaced = after.find('}').and_then(|close| {
            let name = &after[..close];
            values
                .iter()
                .find(|(n, _)| *n == name)
                .map(|(_, v)| (*v, close))
        });
        match replaced {
            Some((value, close)) => {
                out.push_str(value);
                rest = &after[close + 1..];
            }
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

/// Three demonstrations, one per answer category.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotSet {
    pub multi: QpaRecord,
    pub single: QpaRecord,
    pub zero: QpaRecord,
    pub seed: u64,
}

impl FewShotSet {
    pub fn records(&self) -> [&QpaRecord; 3] {
        [&self.multi, &self.single, &self.zero]
    }

    pub fn pq_ids(&self) -> Vec<String> {
        self.records().iter().map(|r| r.pq_id.clone()).collect()
    }

    pub fn contains(&self, pq_id: &str) -> bool {
        self.records().iter().any(|r| r.pq_id == pq_id)
    }
}

/// Draws one training record per category, uniformly under `seed`.
pub fn select_shots(train: &[QpaRecord], seed: u64) -> Result<FewShotSet, PromptError> {
    select_shots_excluding(train, seed, &[])
}

/// [`select_shots`], never picking a record whose id is in `exclude`.
pub fn select_shots_excluding(
    train: &[QpaRecord],
    seed: u64,
    exclude: &[&str],
) -> Result<FewShotSet, PromptError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pick = |cat: AnswerCategory| -> Result<QpaRecord, PromptError> {
        let pool: Vec<&QpaRecord> = train
            .iter()
            .filter(|r| r.split == Split::Train && r.category() == cat)
            .filter(|r| !exclude.contains(&r.pq_id.as_str()))
            .collect();
        if pool.is_empty() {
            return Err(PromptError::MissingCategory(cat));
        }
        // u64 keeps the draw identical across pointer widths
        let i = rng.random_range(0..pool.len() as u64) as usize;
        Ok(pool[i].clone())
    };
    Ok(FewShotSet {
        multi: pick(AnswerCategory::Multi)?,
        single: pick(AnswerCategory::Single)?,
        zero: pick(AnswerCategory::Zero)?,
        seed,
    })
}

/// The answers section of a demonstration: one quoted line per answer, or
/// the sentinel alone.
pub fn render_answers(record: &QpaRecord, template: &PromptTemplate) -> String {
    if record.answers.is_empty() {
        return template.no_answer_sentinel.clone();
    }
    record
        .answers
        .iter()
        .map(|a| {
            if a.text.contains('"') {
                format!("«{}»", a.text)
            } else {
                format!("\"{}\"", a.text)
            }
        })
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn render_shot(record: &QpaRecord, template: &PromptTemplate) -> String {
    let tafsir = match &record.tafsir {
        Some(t) if !t.trim().is_empty() => fill(&template.tafsir_format, &[("tafsir", t)]),
        _ => String::new(),
    };
    let answers = render_answers(record, template);
    fill(
        &template.shot_block_format,
        &[
            ("passage", &record.passage),
            ("question", &record.question),
            ("tafsir", &tafsir),
            ("answers", &answers),
        ],
    )
}

/// Renders the full prompt: header, the three demonstrations, then the query.
pub fn build_prompt(
    template: &PromptTemplate,
    shots: &FewShotSet,
    passage: &str,
    question: &str,
) -> String {
    let mut out = template.header.clone();
    for record in shots.records() {
        out.push_str(&render_shot(record, template));
    }
    out.push_str(&fill(
        &template.query_block_format,
        &[("passage", passage), ("question", question)],
    ));
    out
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedResponse {
    pub answers: Vec<String>,
    /// The model answered with the sentinel.
    pub no_answer: bool,
    /// Neither quoted answers nor the sentinel were found.
    pub unparseable: bool,
}

const QUOTE_PAIRS: [(&str, &str); 4] = [("''", "''"), ("\"", "\""), ("«", "»"), ("“", "”")];

fn quoted_segments(line: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut rest = line;
    loop {
        let next = QUOTE_PAIRS
            .iter()
            .filter_map(|(open, close)| rest.find(open).map(|at| (at, *open, *close)))
            .min_by_key(|(at, open, _)| (*at, std::cmp::Reverse(open.len())));
        let Some((at, open, close)) = next else { break };
        let inner = &rest[at + open.len()..];
        match inner.find(close) {
            Some(end) => {
                out.push(&inner[..end]);
                rest = &inner[end + close.len()..];
            }
            None => break,
        }
    }
    out
}

/// Extracts quoted answers, in order, from a model response.
pub fn parse_response(text: &str, sentinel: &str) -> ParsedResponse {
    let opts = NormOptions::for_candidates();
    let sentinel_norm = normalize(sentinel, &opts);
    let is_sentinel = |s: &str| !sentinel_norm.is_empty() && normalize(s, &opts) == sentinel_norm;

    let answers: Vec<String> = text
        .lines()
        .flat_map(quoted_segments)
        .map(str::trim)
        .filter(|s| !s.is_empty() && !is_sentinel(s))
        .map(str::to_owned)
        .collect();
    if !answers.is_empty() {
        return ParsedResponse {
            answers,
            ..Default::default()
        };
    }
    let has_sentinel = !sentinel_norm.is_empty() && normalize(text, &opts).contains(&sentinel_norm);
    ParsedResponse {
        answers,
        no_answer: has_sentinel,
        unparseable: !has_sentinel,
    }
}
