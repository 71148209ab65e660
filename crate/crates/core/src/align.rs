//! Mapping model answers back onto exact word spans of the passage.
//!
//! Free-text answers (parsed from LLM output) go through [`align_answer`];
//! character- or token-offset predictions from extractive models go through
//! [`load_nbest`], which snaps them to whole words.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::QpaRecord;
use crate::text::{bag_f1, match_keys, normalize, NormOptions, Token, TokenizedPassage};

pub const DEFAULT_MIN_FUZZY_F1: f64 = 0.8;
/// Fuzzy windows range over `|candidate| ± FUZZY_SLACK` tokens.
pub const FUZZY_SLACK: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Llm,
    Nbest,
}

/// A proposed answer anchored to passage tokens `start_token..=end_token`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSpan {
    pub pq_id: String,
    pub text: String,
    pub start_token: usize,
    pub end_token: usize,
    pub score: f64,
    pub origin: Origin,
}

impl CandidateSpan {
    pub fn from_tokens(
        pq_id: &str,
        passage: &TokenizedPassage,
        range: TokenRange,
        score: f64,
        origin: Origin,
    ) -> Self {
        Self {
            pq_id: pq_id.to_owned(),
            text: passage.span_text(range.start, range.end).to_owned(),
            start_token: range.start,
            end_token: range.end,
            score,
            origin,
        }
    }

    pub fn range(&self) -> TokenRange {
        TokenRange::new(self.start_token, self.end_token)
    }

    pub fn len(&self) -> usize {
        self.end_token - self.start_token + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Checks the span against its passage.
    pub fn is_valid_for(&self, passage: &TokenizedPassage) -> bool {
        self.start_token <= self.end_token
            && self.end_token < passage.len()
            && passage.span_text(self.start_token, self.end_token) == self.text
            && self.score.is_finite()
            && (self.origin == Origin::Nbest || (0.0..=1.0).contains(&self.score))
    }
}

/// Inclusive token range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TokenRange {
    pub start: usize,
    pub end: usize,
}

impl TokenRange {
    pub fn new(start: usize, end: usize) -> Self {
        debug_assert!(start <= end);
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn as_pair(&self) -> (usize, usize) {
        (self.start, self.end)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchStage {
    Exact,
    Fuzzy,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Alignment {
    pub range: TokenRange,
    pub stage: MatchStage,
    /// Bag-of-token F1 of the chosen window (1.0 for exact matches).
    pub f1: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignCounters {
    pub exact: usize,
    pub fuzzy: usize,
    pub failed: usize,
}

impl AlignCounters {
    pub fn record(&mut self, outcome: Option<&Alignment>) {
        match outcome.map(|a| a.stage) {
            Some(MatchStage::Exact) => self.exact += 1,
            Some(MatchStage::Fuzzy) => self.fuzzy += 1,
            None => self.failed += 1,
        }
    }

    pub fn merge(&mut self, other: &AlignCounters) {
        self.exact += other.exact;
        self.fuzzy += other.fuzzy;
        self.failed += other.failed;
    }
}

/// Match keys of passage tokens: the normalized form with punctuation
/// stripped, so that `الله،` in a passage matches `الله` in an answer.
fn passage_keys(tokens: &[Token]) -> Vec<String> {
    let opts = NormOptions::for_candidates();
    tokens.iter().map(|t| normalize(&t.norm, &opts)).collect()
}

/// Locates `candidate` in the passage.
///
/// Exact stage: first contiguous occurrence of the candidate's normalized
/// words. Fuzzy stage: the window of `|candidate| ± 2` words with the highest
/// bag-of-words F1 (earliest start, then shortest, on ties), accepted only if
/// that F1 reaches `min_fuzzy_f1`.
pub fn align_answer(
    candidate: &str,
    passage: &TokenizedPassage,
    min_fuzzy_f1: f64,
) -> Option<Alignment> {
    let cand = match_keys(candidate);
    if cand.is_empty() || passage.is_empty() {
        return None;
    }
    let keys = passage_keys(&passage.tokens);
    let n = keys.len();
    let m = cand.len();

    if m <= n {
        if let Some(start) = keys.windows(m).position(|w| w == cand.as_slice()) {
            return Some(Alignment {
                range: TokenRange::new(start, start + m - 1),
                stage: MatchStage::Exact,
                f1: 1.0,
            });
        }
    }

    let min_len = m.saturating_sub(FUZZY_SLACK).max(1);
    let max_len = (m + FUZZY_SLACK).min(n);
    let mut best: Option<(f64, usize, usize)> = None;
    for start in 0..n {
        for len in min_len..=max_len {
            if start + len > n {
                break;
            }
            let f1 = bag_f1(&keys[start..start + len], &cand);
            // strict improvement keeps the earliest start, then the shortest
            if best.is_none_or(|(b, _, _)| f1 > b) {
                best = Some((f1, start, len));
            }
        }
    }
    match best {
        Some((f1, start, len)) if f1 > 0.0 && f1 >= min_fuzzy_f1 => Some(Alignment {
            range: TokenRange::new(start, start + len - 1),
            stage: MatchStage::Fuzzy,
            f1,
        }),
        _ => None,
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("character range {start}..{end} overlaps no token")]
pub struct NoOverlap {
    pub start: usize,
    pub end: usize,
}

/// Expands a code-point range `[start, end)` to the words it touches.
pub fn snap_to_word_boundaries(
    start: usize,
    end: usize,
    tokens: &[Token],
) -> Result<TokenRange, NoOverlap> {
    let overlaps = |t: &&Token| t.start_char < end && t.end_char > start;
    let first = tokens.iter().find(overlaps);
    let last = tokens.iter().rev().find(overlaps);
    match (first, last) {
        (Some(f), Some(l)) if start < end => Ok(TokenRange::new(f.index, l.index)),
        _ => Err(NoOverlap { start, end }),
    }
}

#[derive(Debug, Error)]
pub enum NbestError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed n-best file {path}: {message}")]
    Malformed { path: PathBuf, message: String },
    #[error("n-best entry for unknown pq_id {0}")]
    UnknownId(String),
    #[error("{pq_id}: candidate {rank} out of passage bounds ({detail})")]
    OutOfBounds {
        pq_id: String,
        rank: usize,
        detail: String,
    },
    #[error("{pq_id}: candidate {rank}: {message}")]
    BadCandidate {
        pq_id: String,
        rank: usize,
        message: String,
    },
}

/// One n-best entry as written by an extractive model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NbestEntry {
    #[serde(default)]
    pub text: String,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start_char: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub end_char: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start_token: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub end_token: Option<usize>,
}

pub type NbestFile = BTreeMap<String, Vec<NbestEntry>>;

#[derive(Debug, Clone, Default)]
pub struct LoadedNbest {
    pub candidates: BTreeMap<String, Vec<CandidateSpan>>,
    /// Zero-width entries, which extractive heads emit for "no answer".
    pub null_entries: usize,
}

/// Reads an n-best file and converts each question's first `n` entries to
/// word-snapped candidate spans.
pub fn load_nbest(path: &Path, corpus: &[QpaRecord], n: usize) -> Result<LoadedNbest, NbestError> {
    let raw = fs::read_to_string(path).map_err(|source| NbestError::Io {
        path: path.to_owned(),
        source,
    })?;
    let file: NbestFile = serde_json::from_str(&raw).map_err(|e| NbestError::Malformed {
        path: path.to_owned(),
        message: e.to_string(),
    })?;
    let passages: HashMap<&str, TokenizedPassage> = corpus
        .iter()
        .filter(|r| file.contains_key(&r.pq_id))
        .map(|r| (r.pq_id.as_str(), TokenizedPassage::new(r.passage.as_str())))
        .collect();
    convert_nbest(file, &passages, n)
}

pub fn convert_nbest(
    file: NbestFile,
    passages: &HashMap<&str, TokenizedPassage>,
    n: usize,
) -> Result<LoadedNbest, NbestError> {
    let mut out = LoadedNbest::default();
    for (pq_id, entries) in file {
        let passage = passages
            .get(pq_id.as_str())
            .ok_or_else(|| NbestError::UnknownId(pq_id.clone()))?;
        let mut spans = Vec::with_capacity(n.min(entries.len()));
        for (i, entry) in entries.into_iter().take(n).enumerate() {
            match nbest_range(&pq_id, i + 1, &entry, passage)? {
                Some(range) => spans.push(CandidateSpan::from_tokens(
                    &pq_id,
                    passage,
                    range,
                    entry.score,
                    Origin::Nbest,
                )),
                None => out.null_entries += 1,
            }
        }
        out.candidates.insert(pq_id, spans);
    }
    Ok(out)
}

fn nbest_range(
    pq_id: &str,
    rank: usize,
    e: &NbestEntry,
    passage: &TokenizedPassage,
) -> Result<Option<TokenRange>, NbestError> {
    let bad = |message: &str| NbestError::BadCandidate {
        pq_id: pq_id.to_owned(),
        rank,
        message: message.to_owned(),
    };
    if !e.score.is_finite() {
        return Err(bad("non-finite score"));
    }
    match (e.start_char, e.end_char, e.start_token, e.end_token) {
        (Some(s), Some(t), _, _) => {
            if t > passage.char_len() {
                return Err(NbestError::OutOfBounds {
                    pq_id: pq_id.to_owned(),
                    rank,
                    detail: format!("end_char {t} > passage length {}", passage.char_len()),
                });
            }
            if s > t {
                return Err(bad("start_char after end_char"));
            }
            if s == t {
                return Ok(None);
            }
            match snap_to_word_boundaries(s, t, &passage.tokens) {
                Ok(r) => Ok(Some(r)),
                // whitespace-only selection
                Err(_) => Ok(None),
            }
        }
        (None, None, Some(s), Some(t)) => {
            if t >= passage.len() {
                return Err(NbestError::OutOfBounds {
                    pq_id: pq_id.to_owned(),
                    rank,
                    detail: format!("end_token {t} >= token count {}", passage.len()),
                });
            }
            if s > t {
                return Err(bad("start_token after end_token"));
            }
            Ok(Some(TokenRange::new(s, t)))
        }
        _ => Err(bad("needs start_char/end_char or start_token/end_token")),
    }
}

/// Score for the `rank`-th (1-based) of `m` parsed LLM answers: `(m-rank+1)/m`.
pub fn llm_rank_score(rank: usize, m: usize) -> f64 {
    debug_assert!(rank >= 1 && rank <= m);
    (m - rank + 1) as f64 / m as f64
}
