//! Test support: reference scorers written independently of `qqa-core`,
//! and seeded synthetic corpora in the unified JSONL schema.
//!
//! Nothing here calls into the library under test. Spans are inclusive
//! `(start, end)` token pairs and overlap is computed on explicit sets.

use std::collections::BTreeSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

pub type Span = (usize, usize);

fn positions(s: Span) -> BTreeSet<usize> {
    (s.0..=s.1).collect()
}

/// Token F1 over explicit position sets.
pub fn set_f1(a: Span, b: Span) -> f64 {
    let (a, b) = (positions(a), positions(b));
    let common = a.intersection(&b).count() as f64;
    if common == 0.0 {
        return 0.0;
    }
    let p = common / a.len() as f64;
    let r = common / b.len() as f64;
    2.0 * p * r / (p + r)
}

/// Best pAP over every way of assigning predictions to distinct golds
/// (or to nothing). Exponential; meant for small instances.
pub fn brute_force_pap(preds: &[Span], golds: &[Span]) -> f64 {
    if golds.is_empty() {
        return if preds.is_empty() { 1.0 } else { 0.0 };
    }
    let mut best = 0.0f64;
    let mut assignment: Vec<Option<usize>> = vec![None; preds.len()];
    enumerate(preds, golds, 0, &mut assignment, &mut best);
    best
}

fn enumerate(
    preds: &[Span],
    golds: &[Span],
    i: usize,
    assignment: &mut Vec<Option<usize>>,
    best: &mut f64,
) {
    if i == preds.len() {
        let mut mass = 0.0;
        let mut sum = 0.0;
        for (rank, a) in assignment.iter().enumerate() {
            let m = a.map_or(0.0, |g| set_f1(preds[rank], golds[g]));
            mass += m;
            if m > 0.0 {
                sum += mass / (rank + 1) as f64;
            }
        }
        *best = best.max(sum / golds.len() as f64);
        return;
    }
    assignment[i] = None;
    enumerate(preds, golds, i + 1, assignment, best);
    for g in 0..golds.len() {
        if assignment[..i].contains(&Some(g)) {
            continue;
        }
        assignment[i] = Some(g);
        enumerate(preds, golds, i + 1, assignment, best);
    }
    assignment[i] = None;
}

/// Classical average precision with binary relevance: a prediction is
/// relevant if it equals a gold not already retrieved.
pub fn textbook_ap(preds: &[Span], golds: &[Span]) -> f64 {
    if golds.is_empty() {
        return if preds.is_empty() { 1.0 } else { 0.0 };
    }
    let mut found: BTreeSet<Span> = BTreeSet::new();
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, p) in preds.iter().enumerate() {
        if golds.contains(p) && found.insert(*p) {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    sum / golds.len() as f64
}

/// `|A∩B| / min(|A|,|B|)`.
pub fn containment_overlap(a: Span, b: Span) -> f64 {
    let (a, b) = (positions(a), positions(b));
    a.intersection(&b).count() as f64 / a.len().min(b.len()) as f64
}

/// Suppression-flag NMS. Returns indices into `spans` in keep order.
/// Order: score desc, start asc, length asc, then input index.
pub fn reference_nms(spans: &[(Span, f64)], threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..spans.len()).collect();
    order.sort_by(|&i, &j| {
        let (a, sa) = spans[i];
        let (b, sb) = spans[j];
        sb.partial_cmp(&sa)
            .unwrap()
            .then(a.0.cmp(&b.0))
            .then((a.1 - a.0).cmp(&(b.1 - b.0)))
            .then(i.cmp(&j))
    });
    let mut suppressed = vec![false; spans.len()];
    let mut keep = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        for &j in &order[pos + 1..] {
            let o = containment_overlap(spans[i].0, spans[j].0);
            if o > 0.0 && o >= threshold {
                suppressed[j] = true;
            }
        }
    }
    keep
}

// ---------------------------------------------------------------------------
// Synthetic corpora
// ---------------------------------------------------------------------------

const WORDS: &[&str] = &[
    "الصلاة",
    "الزكاة",
    "الصيام",
    "الحج",
    "الجنة",
    "النار",
    "الرحمة",
    "العذاب",
    "الكتاب",
    "الحكمة",
    "الصبر",
    "الشكر",
    "التوبة",
    "المغفرة",
    "الإيمان",
    "العمل",
    "الصالح",
    "الناس",
    "المؤمنين",
    "الكافرين",
    "الأرض",
    "السماء",
    "الشمس",
    "القمر",
    "البحر",
    "الماء",
    "الرزق",
    "الأموال",
    "الأولاد",
    "اليتامى",
    "المساكين",
    "الفقراء",
    "الربا",
    "البيع",
    "العدل",
    "الإحسان",
    "الظلم",
    "الحق",
    "الباطل",
    "الهدى",
    "يعلمون",
    "يؤمنون",
    "ينفقون",
    "أقيموا",
    "آتوا",
    "اتقوا",
    "اذكروا",
    "جزاء",
    "عظيم",
    "أليم",
    "كريم",
    "رحيم",
    "غفور",
    "عليم",
    "حكيم",
    "قدير",
    "بصير",
    "خبير",
    "مبين",
    "قريب",
];

const FILLER: &[&str] = &[
    "في",
    "من",
    "إلى",
    "على",
    "إن",
    "ما",
    "لا",
    "الذين",
    "هو",
    "ثم",
];

const MARKS: &[char] = &[
    '\u{064E}', '\u{064F}', '\u{0650}', '\u{0651}', '\u{0652}', '\u{064B}',
];

/// One synthetic record; answers are `(text, start_char)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthRecord {
    pub pq_id: String,
    pub passage: String,
    pub question: String,
    pub answers: Vec<(String, usize)>,
    pub split: &'static str,
}

impl SynthRecord {
    pub fn to_json(&self) -> serde_json::Value {
        json!({
            "pq_id": self.pq_id,
            "passage": self.passage,
            "question": self.question,
            "answers": self.answers.iter().map(|(t, s)| json!({"text": t, "start_char": s})).collect::<Vec<_>>(),
            "split": self.split,
            "source": "qrcd",
        })
    }
}

/// Question counts per split: `(split, multi, single, zero)`.
pub type SplitShape = (&'static str, usize, usize, usize);

/// The per-split category counts of the QRCD v1.2 release.
pub const QRCD_V12_SHAPE: [SplitShape; 3] = [
    ("train", 134, 806, 52),
    ("dev", 29, 124, 10),
    ("test", 62, 331, 14),
];

fn word(rng: &mut ChaCha8Rng, diacritize: bool) -> String {
    let base = if rng.random_bool(0.2) {
        FILLER.choose(rng).unwrap()
    } else {
        WORDS.choose(rng).unwrap()
    };
    if !diacritize {
        return (*base).to_owned();
    }
    let mut out = String::new();
    for ch in base.chars() {
        out.push(ch);
        if rng.random_bool(0.4) {
            out.push(*MARKS.choose(rng).unwrap());
        }
    }
    out
}

/// Generates a corpus with exactly the requested category counts.
///
/// Passages are 20-60 words (diacritized when `diacritize`), answers are
/// disjoint word spans of 1-6 words, multi-answer records have 2-4 answers.
pub fn synth_corpus(seed: u64, shape: &[SplitShape], diacritize: bool) -> Vec<SynthRecord> {
    build(seed, shape, None, diacritize)
}

/// Like [`synth_corpus`] on [`QRCD_V12_SHAPE`], with multi-answer questions
/// carrying 552 answers in total so answer-triplet counts match as well.
pub fn synth_qrcd_mirror(seed: u64, diacritize: bool) -> Vec<SynthRecord> {
    build(seed, &QRCD_V12_SHAPE, Some(552), diacritize)
}

fn build(
    seed: u64,
    shape: &[SplitShape],
    multi_total: Option<usize>,
    diacritize: bool,
) -> Vec<SynthRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut plans: Vec<(&'static str, Vec<usize>)> = Vec::new();
    for &(split, multi, single, zero) in shape {
        let mut counts: Vec<usize> = std::iter::repeat_n(0, zero)
            .chain(std::iter::repeat_n(1, single))
            .chain(std::iter::repeat_n(2, multi))
            .collect();
        counts.shuffle(&mut rng);
        plans.push((split, counts));
    }
    let slots: Vec<(usize, usize)> = plans
        .iter()
        .enumerate()
        .flat_map(|(p, (_, c))| {
            c.iter()
                .enumerate()
                .filter(|(_, &n)| n == 2)
                .map(move |(i, _)| (p, i))
        })
        .collect();
    match multi_total {
        Some(total) => {
            assert!(total >= 2 * slots.len() && total <= 4 * slots.len());
            let mut extra = total - 2 * slots.len();
            while extra > 0 {
                let (p, i) = slots[rng.random_range(0..slots.len())];
                if plans[p].1[i] < 4 {
                    plans[p].1[i] += 1;
                    extra -= 1;
                }
            }
        }
        None => {
            for &(p, i) in &slots {
                plans[p].1[i] = rng.random_range(2..=4);
            }
        }
    }
    let mut out = Vec::new();
    for (split, counts) in plans {
        for (i, n) in counts.into_iter().enumerate() {
            out.push(synth_record(
                &mut rng,
                format!("{split}-{i}"),
                split,
                n,
                diacritize,
            ));
        }
    }
    out
}

fn synth_record(
    rng: &mut ChaCha8Rng,
    pq_id: String,
    split: &'static str,
    n_answers: usize,
    diacritize: bool,
) -> SynthRecord {
    let len = rng.random_range(20..=60);
    let words: Vec<String> = (0..len).map(|_| word(rng, diacritize)).collect();

    // word start offsets in code points, single spaces between words
    let mut starts = Vec::with_capacity(len);
    let mut pos = 0;
    for w in &words {
        starts.push(pos);
        pos += w.chars().count() + 1;
    }
    let passage = words.join(" ");

    let mut answers = Vec::new();
    let mut taken = vec![false; len];
    let mut guard = 0;
    while answers.len() < n_answers && guard < 1000 {
        guard += 1;
        let span_len = rng.random_range(1..=6usize).min(len);
        let start = rng.random_range(0..=len - span_len);
        if taken[start..start + span_len].iter().any(|&t| t) {
            continue;
        }
        taken[start..start + span_len]
            .iter_mut()
            .for_each(|t| *t = true);
        let text = words[start..start + span_len].join(" ");
        answers.push((text, starts[start]));
    }
    let q_len = rng.random_range(3..=7);
    let question = (0..q_len)
        .map(|_| WORDS.choose(rng).unwrap().to_string())
        .collect::<Vec<_>>()
        .join(" ")
        + "؟";
    SynthRecord {
        pq_id,
        passage,
        question,
        answers,
        split,
    }
}

pub fn to_jsonl(records: &[SynthRecord]) -> String {
    records
        .iter()
        .map(|r| r.to_json().to_string() + "\n")
        .collect()
}

/// Random inclusive span inside `0..n_tokens`.
pub fn random_span(rng: &mut impl Rng, n_tokens: usize, max_len: usize) -> Span {
    let len = rng.random_range(1..=max_len.min(n_tokens));
    let start = rng.random_range(0..=n_tokens - len);
    (start, start + len - 1)
}
