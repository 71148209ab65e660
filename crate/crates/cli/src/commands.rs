use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::Args;
use qqa_core::align::{align_answer, llm_rank_score, AlignCounters, DEFAULT_MIN_FUZZY_F1};
use qqa_core::corpus::{save_corpus, Adapter};
use qqa_core::eval::{load_run, render_comparison, render_report, ReportFormat, DEFAULT_K};
use qqa_core::prompting::{ClientError, LlmClient, ProviderConfig, ResponseCache};
use qqa_core::text::DEFAULT_STOPWORDS;
use qqa_core::{
    build_prompt, evaluate_run, load_corpus, load_nbest, merge_corpora, parse_response,
    reformat_external, run_pipeline, select_shots, split_stats, CandidateSpan, FewShotSet,
    GoldMatching, Origin, PostprocConfig, PromptTemplate, QpaRecord, RankedAnswerList, RunEntry,
    RunFile, Source, Split, Stoplist, TokenizedPassage,
};
use rayon::prelude::*;

use crate::manifest::{digest_bytes, file_digest, manifest_path, RunCounters, RunManifest};
use crate::CliError;

const DEFAULT_SEED: u64 = 109;

fn io_data(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Data(format!("{}: {e}", path.display()))
}

fn emit(stdout: &mut dyn Write, text: &str) -> Result<(), CliError> {
    stdout
        .write_all(text.as_bytes())
        .map_err(|e| CliError::Data(format!("writing output: {e}")))
}

fn parse_unified(s: &str) -> Result<(Option<Split>, PathBuf), String> {
    if let Some((split, path)) = s.split_once('=') {
        if let Ok(split) = split.parse::<Split>() {
            return Ok((Some(split), PathBuf::from(path)));
        }
    }
    Ok((None, PathBuf::from(s)))
}

fn parse_squad(s: &str) -> Result<(Source, Split, PathBuf), String> {
    let (head, path) = s
        .split_once('=')
        .ok_or_else(|| format!("expected SOURCE:SPLIT=PATH, got {s:?}"))?;
    let (source, split) = head
        .split_once(':')
        .ok_or_else(|| format!("expected SOURCE:SPLIT=PATH, got {s:?}"))?;
    Ok((
        Source::from(source.to_owned()),
        split.parse()?,
        PathBuf::from(path),
    ))
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    /// JSONL corpus as SPLIT=PATH (labels every line) or PATH (lines carry
    /// their own split). Raw QRCD files load directly.
    #[arg(long = "unified", value_name = "[SPLIT=]PATH", value_parser = parse_unified)]
    pub unified: Vec<(Option<Split>, PathBuf)>,
    /// SQuAD-style JSON as SOURCE:SPLIT=PATH.
    #[arg(long = "squad", value_name = "SOURCE:SPLIT=PATH", value_parser = parse_squad)]
    pub squad: Vec<(Source, Split, PathBuf)>,
    /// Unified JSONL output.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn prepare(a: &PrepareArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    if a.unified.is_empty() && a.squad.is_empty() {
        return Err(CliError::Usage(
            "prepare needs at least one --unified or --squad input".into(),
        ));
    }
    let mut corpora = Vec::new();
    for (split, path) in &a.unified {
        corpora.push(load_corpus(path, *split)?);
    }
    for (source, split, path) in &a.squad {
        let r = reformat_external(path, Adapter::SquadStyle, source.clone(), *split)?;
        if r.dropped > 0 {
            tracing::warn!(path = %path.display(), dropped = r.dropped, "dropped questions with unverifiable offsets");
        }
        corpora.push(r.records);
    }
    let merged = merge_corpora(corpora);
    save_corpus(&a.out, &merged)?;
    emit(stdout, &split_stats(&merged).render_table())
}

/// Post-processing settings: an optional TOML file, then flag overrides.
#[derive(Debug, Clone, Default, Args)]
pub struct PostprocArgs {
    /// TOML file with post-processing settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Answers kept per question.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long = "nms-threshold")]
    pub nms_threshold: Option<f64>,
    #[arg(long = "qsim-threshold")]
    pub qsim_threshold: Option<f64>,
    #[arg(long = "stopword-threshold")]
    pub stopword_threshold: Option<f64>,
    /// Stopword list, one word per line.
    #[arg(long)]
    pub stopwords: Option<PathBuf>,
}

impl PostprocArgs {
    pub fn resolve(&self) -> Result<PostprocConfig, CliError> {
        let mut cfg = match &self.config {
            Some(p) => PostprocConfig::load(p)?,
            None => PostprocConfig::default(),
        };
        if let Some(k) = self.k {
            cfg.k = k;
        }
        if let Some(v) = self.nms_threshold {
            cfg.nms_overlap_threshold = v;
        }
        if let Some(v) = self.qsim_threshold {
            cfg.question_sim_threshold = v;
        }
        if let Some(v) = self.stopword_threshold {
            cfg.stopword_ratio_threshold = v;
        }
        if let Some(p) = &self.stopwords {
            cfg.stoplist = Some(p.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn stoplist_with_digest(cfg: &PostprocConfig) -> Result<(Stoplist, String), CliError> {
    let stoplist = cfg.load_stoplist()?;
    let digest = match &cfg.stoplist {
        Some(p) => file_digest(p).map_err(io_data(p))?,
        None => digest_bytes(DEFAULT_STOPWORDS.as_bytes()),
    };
    Ok((stoplist, digest))
}

fn to_entries(list: &RankedAnswerList) -> Vec<RunEntry> {
    list.spans
        .iter()
        .enumerate()
        .map(|(i, s)| RunEntry {
            answer: s.text.clone(),
            rank: i + 1,
            score: s.score,
            start_token: s.start_token,
            end_token: s.end_token,
        })
        .collect()
}

fn write_run(out: &Path, run: &RunFile, manifest: &RunManifest) -> Result<(), CliError> {
    std::fs::write(out, qqa_core::eval::render_run(run)).map_err(io_data(out))?;
    let mpath = manifest_path(out);
    manifest.write(&mpath).map_err(io_data(&mpath))
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Unified JSONL corpus.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Split to answer.
    #[arg(long, default_value = "test")]
    pub split: Split,
    /// Corpus to draw shots from; defaults to the train split of --corpus.
    #[arg(long)]
    pub train: Option<PathBuf>,
    /// Provider config (TOML).
    #[arg(long)]
    pub provider: PathBuf,
    /// Overrides the model named in the provider config.
    #[arg(long)]
    pub model: Option<String>,
    /// Prompt template (TOML); the bundled Arabic template by default.
    #[arg(long)]
    pub template: Option<PathBuf>,
    /// Seed for shot selection.
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    /// Never contact the provider; a cache miss is an error.
    #[arg(long)]
    pub offline: bool,
    #[arg(long = "cache-dir", default_value = ".qqa-cache")]
    pub cache_dir: PathBuf,
    /// Worker threads; defaults to the number of processors.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Minimum F1 for fuzzy alignment of model answers.
    #[arg(long = "min-fuzzy-f1", default_value_t = DEFAULT_MIN_FUZZY_F1)]
    pub min_fuzzy_f1: f64,
    #[command(flatten)]
    pub postproc: PostprocArgs,
    /// Run file to write; the manifest goes to `<out>.manifest.json`.
    #[arg(long)]
    pub out: PathBuf,
}

struct PredictCtx<'a> {
    template: &'a PromptTemplate,
    shots: &'a FewShotSet,
    client: &'a LlmClient,
    cfg: &'a PostprocConfig,
    stoplist: &'a Stoplist,
    min_fuzzy_f1: f64,
}

fn predict_one(
    r: &QpaRecord,
    ctx: &PredictCtx,
) -> Result<(Vec<RunEntry>, RunCounters), ClientError> {
    let prompt = build_prompt(ctx.template, ctx.shots, &r.passage, &r.question);
    let resp = ctx.client.query(&prompt)?;
    let parsed = parse_response(&resp.text, &ctx.template.no_answer_sentinel);

    let mut counters = RunCounters {
        questions: 1,
        no_answer_responses: parsed.no_answer as u64,
        parse_failures: parsed.unparseable as u64,
        answers_parsed: parsed.answers.len() as u64,
        ..Default::default()
    };
    let passage = TokenizedPassage::new(r.passage.as_str());
    let m = parsed.answers.len();
    let mut align = AlignCounters::default();
    let mut candidates: Vec<CandidateSpan> = Vec::with_capacity(m);
    for (i, answer) in parsed.answers.iter().enumerate() {
        let a = align_answer(answer, &passage, ctx.min_fuzzy_f1);
        align.record(a.as_ref());
        if let Some(a) = a {
            candidates.push(CandidateSpan::from_tokens(
                &r.pq_id,
                &passage,
                a.range,
                llm_rank_score(i + 1, m),
                Origin::Llm,
            ));
        }
    }
    counters.add_alignment(&align);
    let (list, pc) = run_pipeline(&r.pq_id, &candidates, &r.question, ctx.cfg, ctx.stoplist);
    counters.add_pipeline(&pc);
    Ok((to_entries(&list), counters))
}

fn thread_pool(workers: Option<usize>) -> Result<rayon::ThreadPool, CliError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.unwrap_or(0))
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start worker pool: {e}")))
}

pub fn predict(a: &PredictArgs, _stdout: &mut dyn Write) -> Result<(), CliError> {
    let cfg = a.postproc.resolve()?;
    let (stoplist, stoplist_digest) = stoplist_with_digest(&cfg)?;
    if !(0.0..=1.0).contains(&a.min_fuzzy_f1) {
        return Err(CliError::Usage("--min-fuzzy-f1 must be in [0, 1]".into()));
    }

    let corpus = load_corpus(&a.corpus, None)?;
    let (train, train_digest) = match &a.train {
        Some(p) => (
            load_corpus(p, Some(Split::Train))?,
            Some(file_digest(p).map_err(io_data(p))?),
        ),
        None => (
            corpus
                .iter()
                .filter(|r| r.split == Split::Train)
                .cloned()
                .collect(),
            None,
        ),
    };
    let template = match &a.template {
        Some(p) => PromptTemplate::load(p)?,
        None => PromptTemplate::default(),
    };
    let shots = select_shots(&train, a.seed)?;

    let mut queries: Vec<&QpaRecord> = corpus
        .iter()
        .filter(|r| r.split == a.split && !shots.contains(&r.pq_id))
        .collect();
    queries.sort_by(|x, y| x.pq_id.cmp(&y.pq_id));

    let mut provider = ProviderConfig::load(&a.provider)?;
    if let Some(m) = &a.model {
        provider.model = m.clone();
    }
    let client = LlmClient::new(
        provider.clone(),
        ResponseCache::new(&a.cache_dir),
        template.digest(),
        a.offline,
    )?;
    let ctx = PredictCtx {
        template: &template,
        shots: &shots,
        client: &client,
        cfg: &cfg,
        stoplist: &stoplist,
        min_fuzzy_f1: a.min_fuzzy_f1,
    };
    let pool = thread_pool(a.workers)?;
    let results: Vec<(&str, Result<_, ClientError>)> = pool.install(|| {
        queries
            .par_iter()
            .map(|r| (r.pq_id.as_str(), predict_one(r, &ctx)))
            .collect()
    });

    let missing: Vec<&str> = results
        .iter()
        .filter(|(_, r)| matches!(r, Err(ClientError::OfflineCacheMiss(_))))
        .map(|(id, _)| *id)
        .collect();
    if !missing.is_empty() {
        return Err(CliError::Provider(format!(
            "offline cache miss for {} of {} question(s): {}",
            missing.len(),
            results.len(),
            missing.join(", ")
        )));
    }

    let mut run = RunFile::new();
    let mut counters = RunCounters::default();
    for (id, result) in results {
        let (entries, c) = result?;
        counters.merge(&c);
        run.insert(id.to_owned(), entries);
    }
    let stats = client.stats();
    tracing::info!(
        questions = counters.questions,
        cache_hits = stats.cache_hits,
        requests = stats.requests,
        "prediction finished"
    );

    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_owned(),
        command: "predict".into(),
        corpus_digest: file_digest(&a.corpus).map_err(io_data(&a.corpus))?,
        split: a.split.to_string(),
        train_digest,
        template_digest: Some(template.digest()),
        shot_pq_ids: shots.pq_ids(),
        provider: Some(provider),
        seed: Some(a.seed),
        min_fuzzy_f1: Some(a.min_fuzzy_f1),
        nbest_digest: None,
        nbest_top_n: None,
        k: cfg.k,
        postproc: cfg,
        stoplist_digest,
        counters,
        latency: Some(stats),
    };
    write_run(&a.out, &run, &manifest)
}

#[derive(Debug, Args)]
pub struct PostprocessArgs {
    /// N-best JSON: pq_id → ranked candidate spans.
    #[arg(long)]
    pub nbest: PathBuf,
    /// Unified JSONL corpus.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Restrict to one split.
    #[arg(long)]
    pub split: Option<Split>,
    /// Candidates read per question.
    #[arg(long = "top-n", default_value_t = 20)]
    pub top_n: usize,
    #[command(flatten)]
    pub postproc: PostprocArgs,
    /// Run file to write; the manifest goes to `<out>.manifest.json`.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn postprocess(a: &PostprocessArgs, _stdout: &mut dyn Write) -> Result<(), CliError> {
    let cfg = a.postproc.resolve()?;
    let (stoplist, stoplist_digest) = stoplist_with_digest(&cfg)?;
    let records: Vec<QpaRecord> = load_corpus(&a.corpus, None)?
        .into_iter()
        .filter(|r| a.split.is_none_or(|s| r.split == s))
        .collect();
    let loaded = load_nbest(&a.nbest, &records, a.top_n)?;
    let questions: HashMap<&str, &str> = records
        .iter()
        .map(|r| (r.pq_id.as_str(), r.question.as_str()))
        .collect();

    let mut run = RunFile::new();
    let mut counters = RunCounters {
        nbest_null_entries: loaded.null_entries as u64,
        ..Default::default()
    };
    for (pq_id, candidates) in &loaded.candidates {
        let (list, pc) = run_pipeline(
            pq_id,
            candidates,
            questions[pq_id.as_str()],
            &cfg,
            &stoplist,
        );
        counters.questions += 1;
        counters.add_pipeline(&pc);
        run.insert(pq_id.clone(), to_entries(&list));
    }

    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_owned(),
        command: "postprocess".into(),
        corpus_digest: file_digest(&a.corpus).map_err(io_data(&a.corpus))?,
        split: a.split.map_or_else(|| "all".to_owned(), |s| s.to_string()),
        train_digest: None,
        template_digest: None,
        shot_pq_ids: Vec::new(),
        provider: None,
        seed: None,
        min_fuzzy_f1: None,
        nbest_digest: Some(file_digest(&a.nbest).map_err(io_data(&a.nbest))?),
        nbest_top_n: Some(a.top_n),
        k: cfg.k,
        postproc: cfg,
        stoplist_digest,
        counters,
        latency: None,
    };
    write_run(&a.out, &run, &manifest)
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Run file to score.
    #[arg(long)]
    pub run: PathBuf,
    /// Unified JSONL corpus.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Split to score; its questions missing from the run count as empty.
    #[arg(long, default_value = "test")]
    pub split: Split,
    #[arg(long, default_value_t = DEFAULT_K)]
    pub k: usize,
    /// `table` or `json`.
    #[arg(long, default_value = "table")]
    pub format: ReportFormat,
    /// Second run to compare against.
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    /// Name shown in the table; defaults to the run file name.
    #[arg(long)]
    pub system: Option<String>,
    /// Score with the best gold assignment instead of greedy consumption.
    #[arg(long)]
    pub optimal_matching: bool,
    /// Write the report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn score_run(
    path: &Path,
    records: &[QpaRecord],
    k: usize,
    matching: GoldMatching,
) -> Result<(qqa_core::EvalReport, Option<RunManifest>), CliError> {
    let run = load_run(path)?;
    let mut report = evaluate_run(&run, records, k, matching)?;
    let mpath = manifest_path(path);
    let manifest = if mpath.exists() {
        let m = RunManifest::read(&mpath).map_err(CliError::Data)?;
        report.drop_counts = m.counters.as_map();
        Some(m)
    } else {
        None
    };
    Ok((report, manifest))
}

pub fn evaluate(a: &EvaluateArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    if a.k == 0 {
        return Err(CliError::Usage("--k must be at least 1".into()));
    }
    let records: Vec<QpaRecord> = load_corpus(&a.corpus, None)?
        .into_iter()
        .filter(|r| r.split == a.split)
        .collect();
    let matching = if a.optimal_matching {
        GoldMatching::Optimal
    } else {
        GoldMatching::Greedy
    };
    let (report, manifest) = score_run(&a.run, &records, a.k, matching)?;
    let system = a.system.clone().unwrap_or_else(|| {
        a.run
            .file_name()
            .map_or_else(|| "run".to_owned(), |n| n.to_string_lossy().into_owned())
    });
    let kind = match manifest.as_ref().map(|m| m.command.as_str()) {
        Some("predict") => manifest
            .as_ref()
            .and_then(|m| m.provider.as_ref())
            .map_or_else(|| "llm".to_owned(), |p| p.model_id()),
        Some("postprocess") => "n-best".to_owned(),
        _ => "-".to_owned(),
    };

    let mut text = render_report(&report, a.format, &system, &kind);
    if let Some(b) = &a.baseline {
        let (base, _) = score_run(b, &records, a.k, matching)?;
        match a.format {
            ReportFormat::Table => {
                text.push('\n');
                text.push_str(&render_comparison(&report, &base));
            }
            ReportFormat::Json => {
                let value = serde_json::json!({
                    "run": report,
                    "baseline": base,
                    "delta_macro_pap": report.macro_pap - base.macro_pap,
                });
                text = serde_json::to_string_pretty(&value).expect("report serializes") + "\n";
            }
        }
    }
    match &a.out {
        Some(p) => std::fs::write(p, text).map_err(io_data(p)),
        None => emit(stdout, &text),
    }
}
