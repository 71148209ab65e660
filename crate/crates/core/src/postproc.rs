//! Candidate refinement: overlap suppression, uninformative-answer
//! filtering, re-ranking and truncation.
//!
//! Word-boundary repair happens earlier, when candidates are aligned
//! ([`crate::align`]); everything here assumes spans are already whole words.

use std::cmp::Ordering;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::align::CandidateSpan;
use crate::text::{bag_f1, match_keys, stopword_ratio, Stoplist};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{field} = {value} is out of range {range}")]
    OutOfRange {
        field: &'static str,
        value: f64,
        range: &'static str,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PostprocConfig {
    pub nms_overlap_threshold: f64,
    pub question_sim_threshold: f64,
    pub stopword_ratio_threshold: f64,
    pub k: usize,
    /// Stoplist file; the bundled list is used when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stoplist: Option<PathBuf>,
}

impl Default for PostprocConfig {
    fn default() -> Self {
        Self {
            nms_overlap_threshold: 0.5,
            question_sim_threshold: 0.6,
            stopword_ratio_threshold: 0.75,
            k: 10,
            stoplist: None,
        }
    }
}

impl PostprocConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let raw = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_owned(),
            source,
        })?;
        let cfg: Self = toml::from_str(&raw).map_err(|e| ConfigError::Parse {
            path: path.to_owned(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        for (field, value) in [
            ("nms_overlap_threshold", self.nms_overlap_threshold),
            ("question_sim_threshold", self.question_sim_threshold),
            ("stopword_ratio_threshold", self.stopword_ratio_threshold),
        ] {
            if !(0.0..=1.0).contains(&value) {
                return Err(ConfigError::OutOfRange {
                    field,
                    value,
                    range: "[0, 1]",
                });
            }
        }
        if self.k == 0 {
            return Err(ConfigError::OutOfRange {
                field: "k",
                value: 0.0,
                range: ">= 1",
            });
        }
        Ok(())
    }

    pub fn load_stoplist(&self) -> Result<Stoplist, ConfigError> {
        match &self.stoplist {
            None => Ok(Stoplist::bundled()),
            Some(path) => Stoplist::load(path).map_err(|source| ConfigError::Io {
                path: path.clone(),
                source,
            }),
        }
    }
}

/// `|A∩B| / min(|A|, |B|)` over token positions.
pub fn span_overlap(a: &CandidateSpan, b: &CandidateSpan) -> f64 {
    let lo = a.start_token.max(b.start_token);
    let hi = a.end_token.min(b.end_token);
    if lo > hi {
        return 0.0;
    }
    (hi - lo + 1) as f64 / a.len().min(b.len()) as f64
}

/// Whether `overlap` is enough for an accepted span to suppress another.
/// Disjoint spans never suppress each other, including at threshold 0.
pub fn suppresses(overlap: f64, threshold: f64) -> bool {
    overlap > 0.0 && overlap >= threshold
}

/// Ranking order: score descending, then earlier start, then shorter span.
/// Origin and text break any remaining tie so the order is total.
pub fn rank_order(a: &CandidateSpan, b: &CandidateSpan) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.start_token.cmp(&b.start_token))
        .then(a.len().cmp(&b.len()))
        .then(a.origin.cmp(&b.origin))
        .then_with(|| a.text.cmp(&b.text))
}

/// Greedy non-maximum suppression over token spans of one passage.
///
/// Spans are visited in [`rank_order`]; a span is kept unless it overlaps an
/// already kept span by at least `threshold`. Output is in acceptance order.
pub fn nms(spans: &[CandidateSpan], threshold: f64) -> Vec<CandidateSpan> {
    let mut order: Vec<&CandidateSpan> = spans.iter().collect();
    order.sort_by(|a, b| rank_order(a, b));
    let mut kept: Vec<CandidateSpan> = Vec::with_capacity(order.len());
    for span in order {
        if kept
            .iter()
            .all(|k| !suppresses(span_overlap(k, span), threshold))
        {
            kept.push(span.clone());
        }
    }
    kept
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    QuestionEcho,
    Stopwords,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dropped {
    pub span: CandidateSpan,
    pub reason: DropReason,
    pub value: f64,
}

/// Removes spans that echo the question or are mostly stop words.
/// Survivors keep their relative order.
pub fn filter_uninformative(
    spans: Vec<CandidateSpan>,
    question: &str,
    cfg: &PostprocConfig,
    stoplist: &Stoplist,
) -> (Vec<CandidateSpan>, Vec<Dropped>) {
    let q = match_keys(question);
    let mut kept = Vec::with_capacity(spans.len());
    let mut dropped = Vec::new();
    for span in spans {
        let words = match_keys(&span.text);
        let sim = bag_f1(&words, &q);
        if sim >= cfg.question_sim_threshold {
            tracing::debug!(pq_id = %span.pq_id, text = %span.text, sim, "dropping question echo");
            dropped.push(Dropped {
                span,
                reason: DropReason::QuestionEcho,
                value: sim,
            });
            continue;
        }
        let ratio = stopword_ratio(&words, stoplist);
        if ratio >= cfg.stopword_ratio_threshold {
            tracing::debug!(pq_id = %span.pq_id, text = %span.text, ratio, "dropping stopword span");
            dropped.push(Dropped {
                span,
                reason: DropReason::Stopwords,
                value: ratio,
            });
            continue;
        }
        kept.push(span);
    }
    (kept, dropped)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RankedAnswerList {
    pub pq_id: String,
    pub spans: Vec<CandidateSpan>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineCounters {
    pub nms_suppressed: usize,
    pub question_echo: usize,
    pub stopwords: usize,
    pub truncated: usize,
}

impl PipelineCounters {
    pub fn merge(&mut self, other: &PipelineCounters) {
        self.nms_suppressed += other.nms_suppressed;
        self.question_echo += other.question_echo;
        self.stopwords += other.stopwords;
        self.truncated += other.truncated;
    }
}

/// NMS, then the uninformative filter, then a stable re-rank, then the top `k`.
pub fn run_pipeline(
    pq_id: &str,
    candidates: &[CandidateSpan],
    question: &str,
    cfg: &PostprocConfig,
    stoplist: &Stoplist,
) -> (RankedAnswerList, PipelineCounters) {
    let mut counters = PipelineCounters::default();
    let kept = nms(candidates, cfg.nms_overlap_threshold);
    counters.nms_suppressed = candidates.len() - kept.len();

    let (mut kept, dropped) = filter_uninformative(kept, question, cfg, stoplist);
    for d in &dropped {
        match d.reason {
            DropReason::QuestionEcho => counters.question_echo += 1,
            DropReason::Stopwords => counters.stopwords += 1,
        }
    }

    kept.sort_by(rank_order);
    if kept.len() > cfg.k {
        counters.truncated = kept.len() - cfg.k;
        kept.truncate(cfg.k);
    }
    (
        RankedAnswerList {
            pq_id: pq_id.to_owned(),
            spans: kept,
        },
        counters,
    )
}

/// Checks every [`RankedAnswerList`] invariant; returns the first violation.
pub fn check_ranked_list(
    list: &RankedAnswerList,
    question: &str,
    cfg: &PostprocConfig,
    stoplist: &Stoplist,
) -> Result<(), String> {
    if list.spans.len() > cfg.k {
        return Err(format!("{} spans > k = {}", list.spans.len(), cfg.k));
    }
    for w in list.spans.windows(2) {
        if w[0].score < w[1].score {
            return Err(format!("scores increase: {} < {}", w[0].score, w[1].score));
        }
    }
    for (i, a) in list.spans.iter().enumerate() {
        for b in &list.spans[i + 1..] {
            if suppresses(span_overlap(a, b), cfg.nms_overlap_threshold) {
                return Err(format!("{:?} and {:?} overlap", a.range(), b.range()));
            }
        }
    }
    let q = match_keys(question);
    for s in &list.spans {
        let words = match_keys(&s.text);
        if bag_f1(&words, &q) >= cfg.question_sim_threshold {
            return Err(format!("{:?} echoes the question", s.text));
        }
        if stopword_ratio(&words, stoplist) >= cfg.stopword_ratio_threshold {
            return Err(format!("{:?} is mostly stop words", s.text));
        }
    }
    Ok(())
}
