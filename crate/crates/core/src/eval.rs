//! Partial average precision at rank k (pAP@k) and run-file scoring.
//!
//! Predictions are matched to gold spans by token-level F1. Walking the
//! ranked list, each prediction takes its best-matching unused gold; the
//! match value `m_i` contributes partial precision mass, and ranks with
//! `m_i > 0` are relevant. The score is the sum of partial precisions at
//! relevant ranks divided by the number of golds. With 0/1 matches this is
//! ordinary average precision. A question with no gold answers scores 1 for
//! an empty prediction list and 0 otherwise.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::align::{snap_to_word_boundaries, TokenRange};
use crate::corpus::{AnswerCategory, GoldAnswer, QpaRecord};
use crate::text::{range_f1, Token, TokenizedPassage};

pub const DEFAULT_K: usize = 10;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{pq_id}: {count} predictions exceed k = {k}")]
    TooManyPredictions {
        pq_id: String,
        count: usize,
        k: usize,
    },
    #[error("run references unknown pq_id {0}")]
    UnknownId(String),
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed run file: {0}")]
    Malformed(String),
    #[error("{pq_id}: gold answer at {start_char} covers no token")]
    GoldOffset { pq_id: String, start_char: usize },
}

/// How predictions claim gold answers.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GoldMatching {
    /// Each rank takes its best unused gold (lowest index on ties).
    #[default]
    Greedy,
    /// Exhaustive search for the assignment maximizing the score. For
    /// comparison only; exponential in list sizes.
    Optimal,
}

/// Maps gold answers to word ranges of the passage.
pub fn gold_ranges(
    pq_id: &str,
    golds: &[GoldAnswer],
    tokens: &[Token],
) -> Result<Vec<TokenRange>, EvalError> {
    golds
        .iter()
        .map(|g| {
            snap_to_word_boundaries(g.start_char, g.end_char(), tokens).map_err(|_| {
                EvalError::GoldOffset {
                    pq_id: pq_id.to_owned(),
                    start_char: g.start_char,
                }
            })
        })
        .collect()
}

/// Token-F1 between every prediction (rows) and gold (columns).
pub fn partial_match_matrix(preds: &[TokenRange], golds: &[TokenRange]) -> Vec<Vec<f64>> {
    preds
        .iter()
        .map(|p| {
            golds
                .iter()
                .map(|g| range_f1(p.as_pair(), g.as_pair()))
                .collect()
        })
        .collect()
}

/// pAP@k for one question. Errors if more than `k` predictions are given.
///
/// Golds are put in `(start, end)` order before matching, so a greedy tie
/// goes to the leftmost gold whatever order the caller listed them in.
pub fn pap_at_k(
    preds: &[TokenRange],
    golds: &[TokenRange],
    k: usize,
    matching: GoldMatching,
) -> Result<f64, EvalError> {
    if preds.len() > k {
        return Err(EvalError::TooManyPredictions {
            pq_id: String::new(),
            count: preds.len(),
            k,
        });
    }
    if golds.is_empty() {
        return Ok(if preds.is_empty() { 1.0 } else { 0.0 });
    }
    let mut golds = golds.to_vec();
    golds.sort_by_key(|g| g.as_pair());
    let matrix = partial_match_matrix(preds, &golds);
    Ok(match matching {
        GoldMatching::Greedy => greedy_pap(&matrix, golds.len()),
        GoldMatching::Optimal => optimal_pap(&matrix, golds.len()),
    })
}

fn greedy_pap(matrix: &[Vec<f64>], n_golds: usize) -> f64 {
    let mut used = vec![false; n_golds];
    let mut cumulative = 0.0;
    let mut total = 0.0;
    for (i, row) in matrix.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (j, &m) in row.iter().enumerate() {
            if !used[j] && m > best.map_or(0.0, |(_, b)| b) {
                best = Some((j, m));
            }
        }
        if let Some((j, m)) = best {
            used[j] = true;
            cumulative += m;
            total += cumulative / (i + 1) as f64;
        }
    }
    total / n_golds as f64
}

fn optimal_pap(matrix: &[Vec<f64>], n_golds: usize) -> f64 {
    fn search(
        matrix: &[Vec<f64>],
        rank: usize,
        used: &mut Vec<bool>,
        cumulative: f64,
        total: f64,
    ) -> f64 {
        if rank == matrix.len() {
            return total;
        }
        // leaving this rank unmatched
        let mut best = search(matrix, rank + 1, used, cumulative, total);
        for j in 0..used.len() {
            let m = matrix[rank][j];
            if used[j] || m <= 0.0 {
                continue;
            }
            used[j] = true;
            let c = cumulative + m;
            let score = search(matrix, rank + 1, used, c, total + c / (rank + 1) as f64);
            used[j] = false;
            if score > best {
                best = score;
            }
        }
        best
    }
    let mut used = vec![false; n_golds];
    search(matrix, 0, &mut used, 0.0, 0.0) / n_golds as f64
}

/// One ranked answer in a run file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEntry {
    pub answer: String,
    pub rank: usize,
    pub score: f64,
    pub start_token: usize,
    pub end_token: usize,
}

/// `pq_id` → ranked answers; an empty list means "no answer".
pub type RunFile = BTreeMap<String, Vec<RunEntry>>;

pub fn load_run(path: &Path) -> Result<RunFile, EvalError> {
    let raw = fs::read_to_string(path).map_err(|source| EvalError::Io {
        path: path.to_owned(),
        source,
    })?;
    parse_run(&raw)
}

pub fn parse_run(raw: &str) -> Result<RunFile, EvalError> {
    serde_json::from_str(raw).map_err(|e| EvalError::Malformed(e.to_string()))
}

/// Pretty JSON with sorted keys and a trailing newline.
pub fn render_run(run: &RunFile) -> String {
    let mut s = serde_json::to_string_pretty(run).expect("run file serializes");
    s.push('\n');
    s
}

/// Builds a run file reproducing every record's gold answers in order,
/// keeping at most `k` per question.
pub fn gold_run(records: &[QpaRecord], k: usize) -> Result<RunFile, EvalError> {
    let mut run = RunFile::new();
    for r in records {
        let passage = TokenizedPassage::new(r.passage.as_str());
        let ranges = gold_ranges(&r.pq_id, &r.answers, &passage.tokens)?;
        let entries = ranges
            .iter()
            .take(k)
            .enumerate()
            .map(|(i, g)| RunEntry {
                answer: passage.span_text(g.start, g.end).to_owned(),
                rank: i + 1,
                score: 1.0,
                start_token: g.start,
                end_token: g.end,
            })
            .collect();
        run.insert(r.pq_id.clone(), entries);
    }
    Ok(run)
}

fn entry_ranges(
    pq_id: &str,
    entries: &[RunEntry],
    n_tokens: usize,
) -> Result<Vec<TokenRange>, EvalError> {
    let mut sorted: Vec<&RunEntry> = entries.iter().collect();
    sorted.sort_by_key(|e| e.rank);
    let mut out = Vec::with_capacity(sorted.len());
    for (i, e) in sorted.into_iter().enumerate() {
        if e.rank != i + 1 {
            return Err(EvalError::Malformed(format!(
                "{pq_id}: ranks must be 1..={}, found {}",
                entries.len(),
                e.rank
            )));
        }
        if e.start_token > e.end_token || e.end_token >= n_tokens {
            return Err(EvalError::Malformed(format!(
                "{pq_id}: rank {} token range {}..={} outside passage of {n_tokens} tokens",
                e.rank, e.start_token, e.end_token
            )));
        }
        out.push(TokenRange::new(e.start_token, e.end_token));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_question: BTreeMap<String, f64>,
    pub macro_pap: f64,
    pub by_category: BTreeMap<AnswerCategory, f64>,
    pub k: usize,
    pub matching: GoldMatching,
    #[serde(default)]
    pub drop_counts: BTreeMap<String, u64>,
}

/// Scores `run` over every record in `corpus`. Questions missing from the
/// run count as empty predictions.
pub fn evaluate_run(
    run: &RunFile,
    corpus: &[QpaRecord],
    k: usize,
    matching: GoldMatching,
) -> Result<EvalReport, EvalError> {
    let by_id: HashMap<&str, &QpaRecord> = corpus.iter().map(|r| (r.pq_id.as_str(), r)).collect();
    if let Some(unknown) = run.keys().find(|id| !by_id.contains_key(id.as_str())) {
        return Err(EvalError::UnknownId(unknown.clone()));
    }

    let mut per_question = BTreeMap::new();
    let mut sums: BTreeMap<AnswerCategory, (f64, usize)> = BTreeMap::new();
    for r in corpus {
        let passage = TokenizedPassage::new(r.passage.as_str());
        let golds = gold_ranges(&r.pq_id, &r.answers, &passage.tokens)?;
        let preds = match run.get(&r.pq_id) {
            Some(entries) => entry_ranges(&r.pq_id, entries, passage.len())?,
            None => Vec::new(),
        };
        let score = pap_at_k(&preds, &golds, k, matching).map_err(|e| match e {
            EvalError::TooManyPredictions { count, k, .. } => EvalError::TooManyPredictions {
                pq_id: r.pq_id.clone(),
                count,
                k,
            },
            other => other,
        })?;
        let slot = sums.entry(r.category()).or_default();
        slot.0 += score;
        slot.1 += 1;
        per_question.insert(r.pq_id.clone(), score);
    }

    let macro_pap = if per_question.is_empty() {
        0.0
    } else {
        per_question.values().sum::<f64>() / per_question.len() as f64
    };
    let by_category = sums
        .into_iter()
        .map(|(c, (sum, n))| (c, sum / n as f64))
        .collect();
    Ok(EvalReport {
        per_question,
        macro_pap,
        by_category,
        k,
        matching,
        drop_counts: BTreeMap::new(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Table,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "table" => Ok(ReportFormat::Table),
            other => Err(format!("unknown format {other:?} (json|table)")),
        }
    }
}

/// Renders a report. `system` and `kind` fill the first two table columns.
pub fn render_report(
    report: &EvalReport,
    format: ReportFormat,
    system: &str,
    kind: &str,
) -> String {
    match format {
        ReportFormat::Json => {
            // serde_json::Value maps are ordered by key
            let value = serde_json::to_value(report).expect("report serializes");
            let mut s = serde_json::to_string_pretty(&value).expect("value serializes");
            s.push('\n');
            s
        }
        ReportFormat::Table => {
            let metric = format!("pAP@{}", report.k);
            let mut out = String::new();
            if report.per_question.is_empty() {
                out.push_str("warning: no questions scored\n");
            }
            out.push_str(&format!("{:<32} {:<16} {:>8}\n", "System", "Type", metric));
            out.push_str(&format!(
                "{:<32} {:<16} {:>8.3}\n",
                system, kind, report.macro_pap
            ));
            for (cat, v) in &report.by_category {
                out.push_str(&format!(
                    "{:<32} {:<16} {:>8.3}\n",
                    format!("  {cat}-answer"),
                    "",
                    v
                ));
            }
            out.push_str(&format!("questions: {}\n", report.per_question.len()));
            for (name, n) in &report.drop_counts {
                out.push_str(&format!("{name}: {n}\n"));
            }
            out
        }
    }
}

/// Side-by-side comparison of a run against a baseline.
pub fn render_comparison(report: &EvalReport, baseline: &EvalReport) -> String {
    let mut out = format!("{:<16} {:>9} {:>9} {:>9}\n", "", "run", "baseline", "delta");
    let mut row = |name: &str, a: f64, b: f64| {
        out.push_str(&format!(
            "{:<16} {:>9.3} {:>9.3} {:>+9.3}\n",
            name,
            a,
            b,
            a - b
        ));
    };
    row("macro", report.macro_pap, baseline.macro_pap);
    for cat in AnswerCategory::ALL {
        if let (Some(a), Some(b)) = (report.by_category.get(&cat), baseline.by_category.get(&cat)) {
            row(&format!("{cat}-answer"), *a, *b);
        }
    }
    let mut better = 0;
    let mut worse = 0;
    for (id, a) in &report.per_question {
        if let Some(b) = baseline.per_question.get(id) {
            if a > b {
                better += 1;
            } else if a < b {
                worse += 1;
            }
        }
    }
    out.push_str(&format!(
        "questions improved: {better}, regressed: {worse}\n"
    ));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn r(s: usize, e: usize) -> TokenRange {
        TokenRange::new(s, e)
    }

    fn pap(preds: &[TokenRange], golds: &[TokenRange]) -> f64 {
        pap_at_k(preds, golds, 10, GoldMatching::Greedy).unwrap()
    }

    #[test]
    fn matrix_entries() {
        let m = partial_match_matrix(&[r(0, 3), r(5, 6), r(0, 1)], &[r(0, 3)]);
        assert_eq!(m[0][0], 1.0);
        assert_eq!(m[1][0], 0.0);
        assert!((m[2][0] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn single_gold_cases() {
        assert_eq!(pap(&[r(2, 4)], &[r(2, 4)]), 1.0);
        assert_eq!(pap(&[r(7, 8), r(2, 4)], &[r(2, 4)]), 0.5);
        assert_eq!(pap(&[r(2, 4), r(6, 7)], &[r(2, 4), r(6, 7)]), 1.0);
    }

    #[test]
    fn zero_answer_all_or_nothing() {
        assert_eq!(pap(&[], &[]), 1.0);
        assert_eq!(pap(&[r(0, 0)], &[]), 0.0);
        assert_eq!(pap(&[], &[r(0, 0)]), 0.0);
    }

    #[test]
    fn partial_credit() {
        // half of a four-word gold at rank 1: m = 2/3
        let v = pap(&[r(0, 1)], &[r(0, 3)]);
        assert!((v - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn greedy_consumes_golds() {
        // the duplicate at rank 2 finds no unused gold
        let v = pap(&[r(0, 1), r(0, 1)], &[r(0, 1)]);
        assert_eq!(v, 1.0);
        let v = pap(&[r(0, 1), r(0, 1)], &[r(0, 1), r(5, 5)]);
        assert_eq!(v, 0.5);
    }

    #[test]
    fn optimal_never_below_greedy() {
        // rank 1 ties on both golds; greedy takes gold 0, which rank 2 matches exactly
        let preds = [r(0, 4), r(0, 3)];
        let golds = [r(0, 3), r(1, 4)];
        let g = pap_at_k(&preds, &golds, 10, GoldMatching::Greedy).unwrap();
        let o = pap_at_k(&preds, &golds, 10, GoldMatching::Optimal).unwrap();
        assert!(o >= g - 1e-12);
        assert!(o > g);
    }

    #[test]
    fn over_k_is_an_error() {
        let preds: Vec<_> = (0..11).map(|i| r(i, i)).collect();
        assert!(matches!(
            pap_at_k(&preds, &[r(0, 0)], 10, GoldMatching::Greedy),
            Err(EvalError::TooManyPredictions { count: 11, .. })
        ));
    }

    #[test]
    fn report_rendering() {
        let empty = EvalReport {
            per_question: BTreeMap::new(),
            macro_pap: 0.0,
            by_category: BTreeMap::new(),
            k: 10,
            matching: GoldMatching::Greedy,
            drop_counts: BTreeMap::new(),
        };
        let table = render_report(&empty, ReportFormat::Table, "sys", "Few-shot LLM");
        assert!(table.contains("0.000"));
        assert!(table.starts_with("warning"));

        let mut rep = empty.clone();
        rep.per_question.insert("a".into(), 0.637);
        rep.macro_pap = 0.637;
        rep.by_category.insert(AnswerCategory::Single, 0.637);
        let table = render_report(&rep, ReportFormat::Table, "sys", "Few-shot LLM");
        assert!(table.contains("0.637"));
        let json = render_report(&rep, ReportFormat::Json, "", "");
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, rep);
        assert!(render_comparison(&rep, &empty).contains("+0.637"));
    }
}
