use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use qqa_core::align::AlignCounters;
use qqa_core::postproc::PipelineCounters;
use qqa_core::prompting::{LatencyStats, ProviderConfig};
use qqa_core::PostprocConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Per-run diagnostics. Summed over questions.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunCounters {
    pub questions: u64,
    pub no_answer_responses: u64,
    pub parse_failures: u64,
    pub answers_parsed: u64,
    pub aligned_exact: u64,
    pub aligned_fuzzy: u64,
    pub align_failed: u64,
    pub nbest_null_entries: u64,
    pub nms_suppressed: u64,
    pub question_echo: u64,
    pub stopwords: u64,
    pub truncated: u64,
}

impl RunCounters {
    pub fn merge(&mut self, o: &RunCounters) {
        self.questions += o.questions;
        self.no_answer_responses += o.no_answer_responses;
        self.parse_failures += o.parse_failures;
        self.answers_parsed += o.answers_parsed;
        self.aligned_exact += o.aligned_exact;
        self.aligned_fuzzy += o.aligned_fuzzy;
        self.align_failed += o.align_failed;
        self.nbest_null_entries += o.nbest_null_entries;
        self.nms_suppressed += o.nms_suppressed;
        self.question_echo += o.question_echo;
        self.stopwords += o.stopwords;
        self.truncated += o.truncated;
    }

    pub fn add_alignment(&mut self, a: &AlignCounters) {
        self.aligned_exact += a.exact as u64;
        self.aligned_fuzzy += a.fuzzy as u64;
        self.align_failed += a.failed as u64;
    }

    pub fn add_pipeline(&mut self, p: &PipelineCounters) {
        self.nms_suppressed += p.nms_suppressed as u64;
        self.question_echo += p.question_echo as u64;
        self.stopwords += p.stopwords as u64;
        self.truncated += p.truncated as u64;
    }

    /// Flat name → count view used for evaluation reports.
    pub fn as_map(&self) -> BTreeMap<String, u64> {
        serde_json::from_value(serde_json::to_value(self).expect("counters serialize"))
            .expect("counters are a flat map of integers")
    }
}

/// Everything that determines a run file's contents, written next to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    pub corpus_digest: String,
    pub split: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_digest: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template_digest: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub shot_pq_ids: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provider: Option<ProviderConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_fuzzy_f1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nbest_digest: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nbest_top_n: Option<usize>,
    pub postproc: PostprocConfig,
    pub stoplist_digest: String,
    pub k: usize,
    pub counters: RunCounters,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency: Option<LatencyStats>,
}

impl RunManifest {
    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        fs::write(path, s)
    }

    pub fn read(path: &Path) -> Result<Self, String> {
        let raw = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        serde_json::from_str(&raw).map_err(|e| format!("{}: {e}", path.display()))
    }
}

/// `<run>.manifest.json`
pub fn manifest_path(run: &Path) -> PathBuf {
    let mut s = OsString::from(run.as_os_str());
    s.push(".manifest.json");
    PathBuf::from(s)
}

pub fn digest_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_digest(path: &Path) -> std::io::Result<String> {
    fs::read(path).map(|b| digest_bytes(&b))
}
