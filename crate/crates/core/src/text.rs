//! Arabic-aware normalization and offset-preserving word tokenization.
//!
//! Tokens are whitespace-delimited words of the *original* text. Every token
//! carries both code-point offsets (the unit used by corpus files) and byte
//! offsets (for slicing), plus its normalized form. Word tokens are the
//! coordinate system shared by alignment, post-processing and scoring.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

/// Bundled default stoplist, one pre-normalized word per line.
pub const DEFAULT_STOPWORDS: &str = include_str!("../resources/stopwords_ar.txt");

const TATWEEL: char = '\u{0640}';
const BARE_ALEF: char = '\u{0627}';

/// Tashkeel: fathatan..sukun, plus the superscript alef.
pub fn is_diacritic(ch: char) -> bool {
    matches!(ch, '\u{064B}'..='\u{0652}' | '\u{0670}')
}

fn is_alef_variant(ch: char) -> bool {
    // hamza above, hamza below, madda, wasla
    matches!(ch, '\u{0623}' | '\u{0625}' | '\u{0622}' | '\u{0671}')
}

fn is_quote_or_punct(ch: char) -> bool {
    ch.is_ascii_punctuation()
        || matches!(
            ch,
            '\u{060C}' // arabic comma
                | '\u{061B}' // arabic semicolon
                | '\u{061F}' // arabic question mark
                | '\u{06D4}' // arabic full stop
                | '\u{066A}'..='\u{066D}'
                | '\u{00AB}' // «
                | '\u{00BB}' // »
                | '\u{2018}'..='\u{201F}'
                | '\u{2026}'
                | '\u{FD3E}' // ornate parens
                | '\u{FD3F}'
        )
}

/// Normalization switches. All flags are independent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct NormOptions {
    pub strip_diacritics: bool,
    pub unify_alef: bool,
    /// Folds alef maqsura to ya and ta marbuta to ha.
    pub unify_ya_and_ta_marbuta: bool,
    pub strip_tatweel: bool,
    pub collapse_whitespace: bool,
    /// Only meant for candidate answers and questions, never passages.
    pub strip_quotes_punct: bool,
}

impl Default for NormOptions {
    fn default() -> Self {
        Self {
            strip_diacritics: true,
            unify_alef: true,
            unify_ya_and_ta_marbuta: true,
            strip_tatweel: true,
            collapse_whitespace: true,
            strip_quotes_punct: false,
        }
    }
}

impl NormOptions {
    /// Defaults plus quote/punctuation stripping, for model output and questions.
    pub fn for_candidates() -> Self {
        Self {
            strip_quotes_punct: true,
            ..Self::default()
        }
    }

    fn map_char(&self, ch: char) -> Option<char> {
        if self.strip_diacritics && is_diacritic(ch) {
            return None;
        }
        if self.strip_tatweel && ch == TATWEEL {
            return None;
        }
        if self.strip_quotes_punct && is_quote_or_punct(ch) {
            return None;
        }
        if self.unify_alef && is_alef_variant(ch) {
            return Some(BARE_ALEF);
        }
        if self.unify_ya_and_ta_marbuta {
            match ch {
                '\u{0649}' => return Some('\u{064A}'),
                '\u{0629}' => return Some('\u{0647}'),
                _ => {}
            }
        }
        Some(ch)
    }
}

/// Normalizes `text` according to `opts`.
///
/// Character folding runs first, whitespace collapsing last, so the result
/// is a fixed point of `normalize` under the same options.
pub fn normalize(text: &str, opts: &NormOptions) -> String {
    let mapped: String = text.chars().filter_map(|c| opts.map_char(c)).collect();
    if opts.collapse_whitespace {
        let mut out = String::with_capacity(mapped.len());
        for word in mapped.split_whitespace() {
            if !out.is_empty() {
                out.push(' ');
            }
            out.push_str(word);
        }
        out
    } else {
        mapped
    }
}

/// A whitespace-delimited word of some original text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub index: usize,
    pub surface: String,
    pub norm: String,
    /// Code-point offset of the first character.
    pub start_char: usize,
    /// Code-point offset one past the last character.
    pub end_char: usize,
    pub start_byte: usize,
    pub end_byte: usize,
}

/// Splits `text` on Unicode whitespace, keeping offsets into the original.
pub fn tokenize(text: &str, opts: &NormOptions) -> Vec<Token> {
    let mut tokens = Vec::new();
    let mut current: Option<(usize, usize)> = None; // (start_byte, start_char)
    let mut char_pos = 0;

    let push = |tokens: &mut Vec<Token>, sb: usize, sc: usize, eb: usize, ec: usize| {
        let surface = &text[sb..eb];
        tokens.push(Token {
            index: tokens.len(),
            surface: surface.to_owned(),
            norm: normalize(surface, opts),
            start_char: sc,
            end_char: ec,
            start_byte: sb,
            end_byte: eb,
        });
    };

    for (byte, ch) in text.char_indices() {
        if ch.is_whitespace() {
            if let Some((sb, sc)) = current.take() {
                push(&mut tokens, sb, sc, byte, char_pos);
            }
        } else if current.is_none() {
            current = Some((byte, char_pos));
        }
        char_pos += 1;
    }
    if let Some((sb, sc)) = current {
        push(&mut tokens, sb, sc, text.len(), char_pos);
    }
    tokens
}

/// A passage together with its word tokenization.
#[derive(Debug, Clone)]
pub struct TokenizedPassage {
    pub text: String,
    pub tokens: Vec<Token>,
    char_len: usize,
}

impl TokenizedPassage {
    pub fn new(text: impl Into<String>) -> Self {
        let text = text.into();
        let tokens = tokenize(&text, &NormOptions::default());
        let char_len = text.chars().count();
        Self {
            text,
            tokens,
            char_len,
        }
    }

    pub fn char_len(&self) -> usize {
        self.char_len
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Original text covered by tokens `start..=end`.
    ///
    /// Panics if the range is out of bounds.
    pub fn span_text(&self, start: usize, end: usize) -> &str {
        &self.text[self.tokens[start].start_byte..self.tokens[end].end_byte]
    }
}

/// Harmonic mean of precision `|a∩b|/|a|` and recall `|a∩b|/|b|` over token
/// index sets. Empty inputs score 0.
pub fn token_f1(a: &BTreeSet<usize>, b: &BTreeSet<usize>) -> f64 {
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let common = a.intersection(b).count();
    f1_from_counts(common, a.len(), b.len())
}

/// [`token_f1`] for two inclusive token ranges, without building sets.
pub fn range_f1(a: (usize, usize), b: (usize, usize)) -> f64 {
    let common = range_intersection(a, b);
    f1_from_counts(common, a.1 - a.0 + 1, b.1 - b.0 + 1)
}

/// Number of token positions shared by two inclusive ranges.
pub fn range_intersection(a: (usize, usize), b: (usize, usize)) -> usize {
    let lo = a.0.max(b.0);
    let hi = a.1.min(b.1);
    if lo > hi {
        0
    } else {
        hi - lo + 1
    }
}

fn f1_from_counts(common: usize, len_a: usize, len_b: usize) -> f64 {
    if common == 0 || len_a == 0 || len_b == 0 {
        return 0.0;
    }
    let p = common as f64 / len_a as f64;
    let r = common as f64 / len_b as f64;
    2.0 * p * r / (p + r)
}

/// Multiset (bag-of-words) F1 between two token sequences.
pub fn bag_f1<S: AsRef<str>>(a: &[S], b: &[S]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in b {
        *counts.entry(t.as_ref()).or_default() += 1;
    }
    let mut common = 0;
    for t in a {
        if let Some(c) = counts.get_mut(t.as_ref()) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    f1_from_counts(common, a.len(), b.len())
}

/// Normalized word keys of free text (questions, model answers): punctuation
/// and quotes stripped, empty words dropped.
pub fn match_keys(text: &str) -> Vec<String> {
    normalize(text, &NormOptions::for_candidates())
        .split(' ')
        .filter(|w| !w.is_empty())
        .map(str::to_owned)
        .collect()
}

/// A set of normalized stop words.
#[derive(Debug, Clone, Default)]
pub struct Stoplist {
    words: HashSet<String>,
}

impl Stoplist {
    /// Parses the plain-text stoplist format: one word per line, `#` comments.
    /// Entries are normalized on the way in.
    pub fn parse(contents: &str) -> Self {
        let opts = NormOptions::for_candidates();
        let words = contents
            .lines()
            .map(|line| line.split('#').next().unwrap_or("").trim())
            .filter(|w| !w.is_empty())
            .map(|w| normalize(w, &opts))
            .filter(|w| !w.is_empty())
            .collect();
        Self { words }
    }

    pub fn load(path: &Path) -> io::Result<Self> {
        Ok(Self::parse(&fs::read_to_string(path)?))
    }

    pub fn bundled() -> Self {
        Self::parse(DEFAULT_STOPWORDS)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.words.contains(word)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

impl<S: Into<String>> FromIterator<S> for Stoplist {
    fn from_iter<I: IntoIterator<Item = S>>(iter: I) -> Self {
        Self {
            words: iter.into_iter().map(Into::into).collect(),
        }
    }
}

/// Fraction of `words` found in `stoplist`. An empty sequence counts as
/// fully uninformative (1.0).
pub fn stopword_ratio<S: AsRef<str>>(words: &[S], stoplist: &Stoplist) -> f64 {
    if words.is_empty() {
        return 1.0;
    }
    let hits = words
        .iter()
        .filter(|w| stoplist.contains(w.as_ref()))
        .count();
    hits as f64 / words.len() as f64
}

/// [`stopword_ratio`] over tokens, using each token's normalized form.
pub fn token_stopword_ratio(tokens: &[Token], stoplist: &Stoplist) -> f64 {
    let norms: Vec<&str> = tokens.iter().map(|t| t.norm.as_str()).collect();
    stopword_ratio(&norms, stoplist)
}
