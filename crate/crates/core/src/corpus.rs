//! Unified question/passage/answer records: loading, validation, adapters
//! for external SQuAD-style corpora, merging, and split statistics.
//!
//! The on-disk format is JSON Lines, one record per line. Answer offsets are
//! Unicode code-point offsets into the passage and are verified on load.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("record {pq_id}: answer {text:?} not found at start_char {start_char}")]
    OffsetMismatch {
        pq_id: String,
        text: String,
        start_char: usize,
    },
    #[error("record {pq_id}: empty answer text")]
    EmptyAnswer { pq_id: String },
    #[error("duplicate pq_id {0}")]
    DuplicateId(String),
    #[error("record {pq_id}: no split label in file and none given")]
    MissingSplit { pq_id: String },
    #[error("unknown adapter {0:?} (expected squad_style)")]
    UnknownAdapter(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

/// Which corpus a record came from. Unrecognized tags are kept verbatim.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "String", into = "String")]
pub enum Source {
    Qrcd,
    Quqa,
    Arcd,
    Other(String),
}

impl Source {
    pub fn tag(&self) -> &str {
        match self {
            Source::Qrcd => "qrcd",
            Source::Quqa => "quqa",
            Source::Arcd => "arcd",
            Source::Other(s) => s,
        }
    }
}

impl From<String> for Source {
    fn from(s: String) -> Self {
        match s.as_str() {
            "qrcd" => Source::Qrcd,
            "quqa" => Source::Quqa,
            "arcd" => Source::Arcd,
            _ => Source::Other(s),
        }
    }
}

impl From<Source> for String {
    fn from(s: Source) -> Self {
        s.tag().to_owned()
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnswerCategory {
    Multi,
    Single,
    Zero,
}

impl AnswerCategory {
    pub const ALL: [AnswerCategory; 3] = [
        AnswerCategory::Multi,
        AnswerCategory::Single,
        AnswerCategory::Zero,
    ];

    pub fn of_count(n: usize) -> Self {
        match n {
            0 => AnswerCategory::Zero,
            1 => AnswerCategory::Single,
            _ => AnswerCategory::Multi,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AnswerCategory::Multi => "multi",
            AnswerCategory::Single => "single",
            AnswerCategory::Zero => "zero",
        }
    }
}

impl fmt::Display for AnswerCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldAnswer {
    pub text: String,
    /// Code-point offset into the passage.
    pub start_char: usize,
}

impl GoldAnswer {
    pub fn end_char(&self) -> usize {
        self.start_char + self.text.chars().count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QpaRecord {
    pub pq_id: String,
    pub passage: String,
    pub question: String,
    pub answers: Vec<GoldAnswer>,
    pub split: Split,
    pub source: Source,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tafsir: Option<String>,
}

impl QpaRecord {
    pub fn category(&self) -> AnswerCategory {
        AnswerCategory::of_count(self.answers.len())
    }

    /// Checks every answer against the passage.
    pub fn validate(&self) -> Result<(), CorpusError> {
        for a in &self.answers {
            if a.text.is_empty() {
                return Err(CorpusError::EmptyAnswer {
                    pq_id: self.pq_id.clone(),
                });
            }
            if !substring_at(&self.passage, a.start_char, &a.text) {
                return Err(CorpusError::OffsetMismatch {
                    pq_id: self.pq_id.clone(),
                    text: a.text.clone(),
                    start_char: a.start_char,
                });
            }
        }
        Ok(())
    }
}

/// True if `needle` occurs in `haystack` starting at code point `start`.
pub fn substring_at(haystack: &str, start: usize, needle: &str) -> bool {
    match haystack.char_indices().nth(start) {
        Some((byte, _)) => haystack[byte..].starts_with(needle),
        None => start == haystack.chars().count() && needle.is_empty(),
    }
}

/// Line shape accepted by [`load_corpus`]: the unified schema, with `split`
/// and `source` optional so the original per-split QRCD files (which also
/// carry `surah` and `verses`) load directly.
#[derive(Deserialize)]
struct RawRecord {
    pq_id: String,
    passage: String,
    question: String,
    #[serde(default)]
    answers: Vec<GoldAnswer>,
    #[serde(default)]
    split: Option<Split>,
    #[serde(default)]
    source: Option<Source>,
    #[serde(default)]
    tafsir: Option<String>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.to_owned(),
        source,
    }
}

/// Loads a unified JSONL corpus.
///
/// With `split = Some(s)` every record is labelled `s`; with `None` each line
/// must carry its own `split`. Records without a `source` are tagged `qrcd`.
pub fn load_corpus(path: &Path, split: Option<Split>) -> Result<Vec<QpaRecord>, CorpusError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let reader = BufReader::new(file);
    let mut seen = HashSet::new();
    let mut records = Vec::new();

    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        let line = line.trim_start_matches('\u{feff}');
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(line).map_err(|e| CorpusError::Parse {
            path: path.to_owned(),
            line: i + 1,
            message: e.to_string(),
        })?;
        let split = match split.or(raw.split) {
            Some(s) => s,
            None => return Err(CorpusError::MissingSplit { pq_id: raw.pq_id }),
        };
        let record = QpaRecord {
            pq_id: raw.pq_id,
            passage: raw.passage,
            question: raw.question,
            answers: raw.answers,
            split,
            source: raw.source.unwrap_or(Source::Qrcd),
            tafsir: raw.tafsir,
        };
        record.validate()?;
        if !seen.insert(record.pq_id.clone()) {
            return Err(CorpusError::DuplicateId(record.pq_id));
        }
        records.push(record);
    }
    Ok(records)
}

/// Serializes records as unified JSONL.
pub fn write_corpus<W: Write>(mut w: W, records: &[QpaRecord]) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_corpus(path: &Path, records: &[QpaRecord]) -> Result<(), CorpusError> {
    let mut buf = Vec::new();
    write_corpus(&mut buf, records).map_err(io_err(path))?;
    fs::write(path, buf).map_err(io_err(path))
}

/// Input formats [`reformat_external`] understands.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Adapter {
    /// `{"data": [{"paragraphs": [{"context", "qas": [{"id", "question", "answers": [{"text", "answer_start"}]}]}]}]}`
    SquadStyle,
}

impl FromStr for Adapter {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "squad_style" | "squad" => Ok(Adapter::SquadStyle),
            other => Err(CorpusError::UnknownAdapter(other.to_owned())),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Reformatted {
    pub records: Vec<QpaRecord>,
    /// Questions dropped because an answer offset did not verify.
    pub dropped: usize,
}

#[derive(Deserialize)]
struct SquadFile {
    data: Vec<SquadArticle>,
}

#[derive(Deserialize)]
struct SquadArticle {
    #[serde(default)]
    paragraphs: Vec<SquadParagraph>,
}

#[derive(Deserialize)]
struct SquadParagraph {
    context: String,
    #[serde(default)]
    qas: Vec<SquadQa>,
}

#[derive(Deserialize)]
struct SquadQa {
    id: serde_json::Value,
    question: String,
    #[serde(default)]
    answers: Vec<SquadAnswer>,
}

#[derive(Deserialize)]
struct SquadAnswer {
    text: String,
    answer_start: usize,
}

/// Converts an external corpus into unified records tagged with `source`.
///
/// Annotator duplicates (same text at the same offset) collapse to one
/// answer. A question with any unverifiable answer is dropped and counted.
pub fn reformat_external(
    path: &Path,
    adapter: Adapter,
    source: Source,
    split: Split,
) -> Result<Reformatted, CorpusError> {
    let contents = fs::read_to_string(path).map_err(io_err(path))?;
    match adapter {
        Adapter::SquadStyle => {
            let file: SquadFile = serde_json::from_str(contents.trim_start_matches('\u{feff}'))
                .map_err(|e| CorpusError::Parse {
                    path: path.to_owned(),
                    line: e.line(),
                    message: e.to_string(),
                })?;
            Ok(reformat_squad(file, source, split))
        }
    }
}

fn reformat_squad(file: SquadFile, source: Source, split: Split) -> Reformatted {
    let mut out = Reformatted::default();
    let mut seen = HashSet::new();
    for para in file.data.into_iter().flat_map(|a| a.paragraphs) {
        for qa in para.qas {
            let pq_id = match qa.id {
                serde_json::Value::String(s) => s,
                other => other.to_string(),
            };
            let mut answers: Vec<GoldAnswer> = Vec::new();
            let mut ok = !qa.question.trim().is_empty();
            for a in qa.answers {
                let ans = GoldAnswer {
                    text: a.text,
                    start_char: a.answer_start,
                };
                if ans.text.is_empty() || !substring_at(&para.context, ans.start_char, &ans.text) {
                    ok = false;
                    break;
                }
                if !answers.contains(&ans) {
                    answers.push(ans);
                }
            }
            if !ok || !seen.insert(pq_id.clone()) {
                tracing::debug!(%pq_id, "dropping unverifiable external record");
                out.dropped += 1;
                continue;
            }
            out.records.push(QpaRecord {
                pq_id,
                passage: para.context.clone(),
                question: qa.question,
                answers,
                split,
                source: source.clone(),
                tafsir: None,
            });
        }
    }
    out
}

/// Concatenates corpora in order. A colliding `pq_id` is prefixed with its
/// record's source tag (`arcd/1:1`); a numeric suffix is added if that still
/// collides.
pub fn merge_corpora(corpora: Vec<Vec<QpaRecord>>) -> Vec<QpaRecord> {
    let mut seen: HashSet<String> = HashSet::new();
    let mut merged = Vec::with_capacity(corpora.iter().map(Vec::len).sum());
    for mut record in corpora.into_iter().flatten() {
        if seen.contains(&record.pq_id) {
            let base = format!("{}/{}", record.source.tag(), record.pq_id);
            let mut candidate = base.clone();
            let mut n = 2;
            while seen.contains(&candidate) {
                candidate = format!("{base}#{n}");
                n += 1;
            }
            record.pq_id = candidate;
        }
        seen.insert(record.pq_id.clone());
        merged.push(record);
    }
    merged
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryCounts {
    pub multi: usize,
    pub single: usize,
    pub zero: usize,
}

impl CategoryCounts {
    pub fn total(&self) -> usize {
        self.multi + self.single + self.zero
    }

    pub fn get(&self, c: AnswerCategory) -> usize {
        match c {
            AnswerCategory::Multi => self.multi,
            AnswerCategory::Single => self.single,
            AnswerCategory::Zero => self.zero,
        }
    }

    fn bump(&mut self, c: AnswerCategory) {
        match c {
            AnswerCategory::Multi => self.multi += 1,
            AnswerCategory::Single => self.single += 1,
            AnswerCategory::Zero => self.zero += 1,
        }
    }

    fn add(&mut self, other: &CategoryCounts) {
        self.multi += other.multi;
        self.single += other.single;
        self.zero += other.zero;
    }
}

/// Per-split, per-category question counts plus answer-triplet totals.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitStats {
    pub by_split: BTreeMap<Split, CategoryCounts>,
    /// Answer triplets per category; a zero-answer question counts once.
    pub qpa_by_category: CategoryCounts,
    pub qp_total: usize,
    pub qpa_total: usize,
}

impl SplitStats {
    pub fn all(&self) -> CategoryCounts {
        let mut all = CategoryCounts::default();
        for c in self.by_split.values() {
            all.add(c);
        }
        all
    }

    pub fn split(&self, s: Split) -> CategoryCounts {
        self.by_split.get(&s).copied().unwrap_or_default()
    }

    /// Renders the split × category table with integer percentages.
    pub fn render_table(&self) -> String {
        let mut cols: Vec<(String, CategoryCounts)> = self
            .by_split
            .iter()
            .map(|(s, c)| (s.to_string(), *c))
            .collect();
        cols.push(("all".to_owned(), self.all()));
        cols.push(("qpa".to_owned(), self.qpa_by_category));

        let mut out = format!("{:<8}", "type");
        for (name, _) in &cols {
            out.push_str(&format!(" {:>14}", name));
        }
        out.push('\n');
        for cat in AnswerCategory::ALL {
            out.push_str(&format!("{:<8}", cat.as_str()));
            for (_, counts) in &cols {
                let n = counts.get(cat);
                let cell = format!("{} ({}%)", n, percent(n, counts.total()));
                out.push_str(&format!(" {:>14}", cell));
            }
            out.push('\n');
        }
        out.push_str(&format!("{:<8}", "total"));
        for (_, counts) in &cols {
            out.push_str(&format!(" {:>14}", counts.total()));
        }
        out.push('\n');
        out
    }
}

/// Integer percentage, rounded half away from zero.
pub fn percent(n: usize, total: usize) -> usize {
    if total == 0 {
        0
    } else {
        (n * 200 + total) / (2 * total)
    }
}

pub fn split_stats(records: &[QpaRecord]) -> SplitStats {
    let mut stats = SplitStats::default();
    for r in records {
        let cat = r.category();
        stats.by_split.entry(r.split).or_default().bump(cat);
        let triplets = r.answers.len().max(1);
        match cat {
            AnswerCategory::Multi => stats.qpa_by_category.multi += triplets,
            AnswerCategory::Single => stats.qpa_by_category.single += triplets,
            AnswerCategory::Zero => stats.qpa_by_category.zero += triplets,
        }
        stats.qp_total += 1;
        stats.qpa_total += triplets;
    }
    stats
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, source: Source, answers: usize) -> QpaRecord {
        let passage = "قل هو الله أحد الله الصمد".to_owned();
        let answers = (0..answers)
            .map(|i| GoldAnswer {
                text: "الله".into(),
                start_char: if i == 0 { 6 } else { 15 },
            })
            .collect();
        QpaRecord {
            pq_id: id.into(),
            passage,
            question: "من هو؟".into(),
            answers,
            split: Split::Train,
            source,
            tafsir: None,
        }
    }

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn offsets_are_code_points() {
        assert!(substring_at("قل هو الله", 6, "الله"));
        assert!(!substring_at("قل هو الله", 5, "الله"));
        assert!(!substring_at("abc", 7, "x"));
        assert!(rec("a", Source::Qrcd, 2).validate().is_ok());
    }

    #[test]
    fn empty_file_loads_empty() {
        let f = write_tmp("");
        assert!(load_corpus(f.path(), Some(Split::Dev)).unwrap().is_empty());
    }

    #[test]
    fn qrcd_native_line_loads_with_given_split() {
        let line = r#"{"pq_id":"2:1-5_1","passage":"قل هو الله أحد","surah":112,"verses":"1-4","question":"س","answers":[]}"#;
        let f = write_tmp(line);
        let recs = load_corpus(f.path(), Some(Split::Test)).unwrap();
        assert_eq!(recs[0].split, Split::Test);
        assert_eq!(recs[0].source, Source::Qrcd);
        assert_eq!(recs[0].category(), AnswerCategory::Zero);
    }

    #[test]
    fn load_errors() {
        let f = write_tmp(
            "{\"pq_id\":\"a\",\"passage\":\"x\",\"question\":\"q\",\"answers\":[]}\nnot json\n",
        );
        match load_corpus(f.path(), Some(Split::Train)) {
            Err(CorpusError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }

        let f = write_tmp(
            r#"{"pq_id":"bad","passage":"abc def","question":"q","answers":[{"text":"def","start_char":3}]}"#,
        );
        match load_corpus(f.path(), Some(Split::Train)) {
            Err(CorpusError::OffsetMismatch { pq_id, .. }) => assert_eq!(pq_id, "bad"),
            other => panic!("{other:?}"),
        }

        let line = r#"{"pq_id":"a","passage":"x","question":"q","answers":[]}"#;
        let f = write_tmp(&format!("{line}\n{line}\n"));
        assert!(matches!(
            load_corpus(f.path(), Some(Split::Train)),
            Err(CorpusError::DuplicateId(id)) if id == "a"
        ));
        assert!(matches!(
            load_corpus(f.path(), None),
            Err(CorpusError::MissingSplit { .. })
        ));
    }

    #[test]
    fn squad_adapter_verifies_offsets() {
        let squad = r#"{"data":[{"title":"t","paragraphs":[{"context":"ذهب الولد إلى المدرسة","qas":[
            {"id":"ok","question":"أين ذهب؟","answers":[{"text":"المدرسة","answer_start":14},{"text":"المدرسة","answer_start":14}]},
            {"id":"bad","question":"من؟","answers":[{"text":"الولد","answer_start":0}]},
            {"id":7,"question":"ماذا؟","answers":[]}
        ]}]}]}"#;
        let f = write_tmp(squad);
        let out =
            reformat_external(f.path(), Adapter::SquadStyle, Source::Arcd, Split::Train).unwrap();
        assert_eq!(out.dropped, 1);
        assert_eq!(out.records.len(), 2);
        assert_eq!(out.records[0].answers.len(), 1);
        assert_eq!(out.records[0].category(), AnswerCategory::Single);
        assert_eq!(out.records[0].source, Source::Arcd);
        assert_eq!(out.records[1].pq_id, "7");
        assert!("bogus".parse::<Adapter>().is_err());
    }

    #[test]
    fn merge_prefixes_collisions() {
        let a = rec("1:1", Source::Qrcd, 1);
        assert_eq!(
            merge_corpora(vec![vec![a.clone()], vec![]]),
            vec![a.clone()]
        );
        let b = rec("1:1", Source::Arcd, 1);
        let c = rec("1:1", Source::Arcd, 0);
        let merged = merge_corpora(vec![vec![a], vec![b, c]]);
        let ids: Vec<_> = merged.iter().map(|r| r.pq_id.as_str()).collect();
        assert_eq!(ids, ["1:1", "arcd/1:1", "arcd/1:1#2"]);
    }

    #[test]
    fn stats_partition() {
        assert_eq!(split_stats(&[]), SplitStats::default());
        let mut recs = vec![
            rec("a", Source::Qrcd, 2),
            rec("b", Source::Qrcd, 1),
            rec("c", Source::Qrcd, 0),
        ];
        recs[2].split = Split::Test;
        let s = split_stats(&recs);
        assert_eq!(s.qp_total, 3);
        assert_eq!(s.qpa_total, 4);
        assert_eq!(
            s.split(Split::Train),
            CategoryCounts {
                multi: 1,
                single: 1,
                zero: 0
            }
        );
        assert_eq!(s.split(Split::Test).zero, 1);
        assert!(s.render_table().contains("total"));
    }

    #[test]
    fn percentages_round_half_up() {
        assert_eq!(percent(134, 992), 14);
        assert_eq!(percent(806, 992), 81);
        assert_eq!(percent(552, 1889), 29);
        assert_eq!(percent(1, 2), 50);
        assert_eq!(percent(0, 0), 0);
    }
}
