//! Extractive question answering over classical Arabic passages.
//!
//! The crate covers the whole span-extraction pipeline except model
//! training: corpus loading and merging ([`corpus`]), normalization and word
//! tokenization ([`text`]), few-shot prompting of hosted LLMs
//! ([`prompting`]), alignment of model answers to passage words ([`align`]),
//! candidate refinement ([`postproc`]) and pAP@k scoring ([`eval`]).

pub mod align;
pub mod corpus;
pub mod eval;
pub mod postproc;
pub mod prompting;
pub mod text;

pub use align::{
    align_answer, load_nbest, snap_to_word_boundaries, CandidateSpan, Origin, TokenRange,
};
pub use corpus::{
    load_corpus, merge_corpora, reformat_external, split_stats, AnswerCategory, GoldAnswer,
    QpaRecord, Source, Split, SplitStats,
};
pub use eval::{evaluate_run, pap_at_k, EvalReport, GoldMatching, RunEntry, RunFile};
pub use postproc::{nms, run_pipeline, PostprocConfig, RankedAnswerList};
pub use prompting::{build_prompt, parse_response, select_shots, FewShotSet, PromptTemplate};
pub use text::{normalize, tokenize, NormOptions, Stoplist, Token, TokenizedPassage};
