mod common;

use std::fs;
use std::path::Path;

use common::{qqa, qqa_bin, replay_dir, replay_predict, s};
use qqa_core::eval::{parse_run, render_run, RunEntry};
use qqa_core::prompting::{prompt_hash, RawResponse, ResponseCache};
use qqa_core::{
    build_prompt, load_corpus, normalize, select_shots, NormOptions, PromptTemplate, Split,
};
use qqa_testkit::{synth_corpus, synth_qrcd_mirror, to_jsonl, SynthRecord};

const FIXTURE_MODEL: &str = "fixture-model";

fn write(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p
}

fn mirror_corpus(dir: &Path) -> std::path::PathBuf {
    write(dir, "corpus.jsonl", &to_jsonl(&synth_qrcd_mirror(17, true)))
}

#[test]
fn offline_replay_is_byte_identical_and_matches_golden() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a.json");
    let b = tmp.path().join("b.json");
    assert_eq!(replay_predict(&a).0, 0);
    assert_eq!(replay_predict(&b).0, 0);
    let ra = fs::read(&a).unwrap();
    assert_eq!(ra, fs::read(&b).unwrap());
    assert_eq!(ra, fs::read(replay_dir().join("golden_run.json")).unwrap());

    let manifest = qqa_cli::RunManifest::read(&qqa_cli::manifest_path(&a)).unwrap();
    assert_eq!(manifest.shot_pq_ids.len(), 3);
    assert_eq!(manifest.seed, Some(109));
    assert_eq!(
        manifest.latency.unwrap().cache_hits,
        manifest.counters.questions
    );

    let (code, out) = qqa(&[
        "evaluate",
        "--run",
        s(&a),
        "--corpus",
        s(&replay_dir().join("corpus.jsonl")),
    ]);
    assert_eq!(code, 0);
    assert!(out.contains("pAP@10"), "{out}");
    assert!(out.contains("align_failed"), "{out}");
}

#[test]
fn replay_run_covers_response_shapes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run.json");
    assert_eq!(replay_predict(&out).0, 0);
    let run = parse_run(&fs::read_to_string(&out).unwrap()).unwrap();
    let manifest = qqa_cli::RunManifest::read(&qqa_cli::manifest_path(&out)).unwrap();
    let c = manifest.counters;
    assert!(c.no_answer_responses > 0);
    assert!(c.parse_failures > 0);
    assert!(c.aligned_fuzzy > 0);
    assert!(c.align_failed > 0);
    assert!(c.nms_suppressed > 0);
    // sentinel and unparseable answers come out as empty lists
    let empty = run.values().filter(|v| v.is_empty()).count() as u64;
    assert!(empty >= c.no_answer_responses);
    for entries in run.values() {
        assert!(entries.len() <= 10);
        for (i, e) in entries.iter().enumerate() {
            assert_eq!(e.rank, i + 1);
        }
    }
}

#[test]
fn offline_cache_miss_lists_questions_and_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = replay_dir();
    let out = qqa_bin(&[
        "predict",
        "--corpus",
        s(&dir.join("corpus.jsonl")),
        "--provider",
        s(&dir.join("provider.toml")),
        "--cache-dir",
        s(tmp.path()),
        "--offline",
        "--out",
        s(&tmp.path().join("run.json")),
    ]);
    assert_eq!(out.status.code(), Some(3));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("offline cache miss"), "{stderr}");
    assert!(stderr.contains("test-0"), "{stderr}");
    assert!(out.stdout.is_empty());
    assert!(!tmp.path().join("run.json").exists());
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(qqa_bin(&[]).status.code(), Some(1));
    assert_eq!(qqa_bin(&["evaluate", "--run"]).status.code(), Some(1));
    let tmp = tempfile::tempdir().unwrap();
    let out = qqa_bin(&["prepare", "--out", s(&tmp.path().join("u.jsonl"))]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(qqa_bin(&["--help"]).status.code(), Some(0));
}

#[test]
fn data_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = write(tmp.path(), "bad.jsonl", "{not json\n");
    let out = qqa_bin(&["evaluate", "--run", s(&bad), "--corpus", s(&bad)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.jsonl"));
}

#[test]
fn prepare_merges_and_tags_collisions() {
    let tmp = tempfile::tempdir().unwrap();
    let line = |source: &str| {
        format!(
            "{{\"pq_id\":\"q1\",\"passage\":\"قل هو الله أحد\",\"question\":\"من؟\",\"answers\":[{{\"text\":\"الله\",\"start_char\":6}}],\"source\":\"{source}\"}}\n"
        )
    };
    let a = write(tmp.path(), "a.jsonl", &line("qrcd"));
    let b = write(tmp.path(), "b.jsonl", &line("quqa"));
    let out = tmp.path().join("u.jsonl");
    let (code, table) = qqa(&[
        "prepare",
        "--unified",
        &format!("train={}", s(&a)),
        "--unified",
        &format!("train={}", s(&b)),
        "--out",
        s(&out),
    ]);
    assert_eq!(code, 0);
    assert!(table.contains("single"));
    let merged = load_corpus(&out, None).unwrap();
    let ids: Vec<_> = merged.iter().map(|r| r.pq_id.as_str()).collect();
    assert_eq!(ids.len(), 2);
    assert!(ids.contains(&"q1"));
    assert!(ids.contains(&"quqa/q1"));
}

#[test]
fn prepare_reproduces_mirror_statistics() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = mirror_corpus(tmp.path());
    let out = tmp.path().join("u.jsonl");
    let (code, table) = qqa(&["prepare", "--unified", s(&corpus), "--out", s(&out)]);
    assert_eq!(code, 0);
    let rows: Vec<&str> = table.lines().collect();
    assert!(
        rows[1].contains("134 (14%)")
            && rows[1].contains("225 (14%)")
            && rows[1].contains("552 (29%)")
    );
    assert!(rows[2].contains("806 (81%)") && rows[2].contains("1261 (81%)"));
    assert!(
        rows[3].contains("14 (3%)") && rows[3].contains("76 (5%)") && rows[3].contains("76 (4%)")
    );
    assert!(rows[4].contains("1562") && rows[4].contains("1889"));
}

#[test]
fn evaluate_degenerate_runs_and_baseline() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = mirror_corpus(tmp.path());
    let records = load_corpus(&corpus, None).unwrap();
    let test: Vec<_> = records
        .into_iter()
        .filter(|r| r.split == Split::Test)
        .collect();
    let gold = write(
        tmp.path(),
        "gold.json",
        &render_run(&qqa_core::eval::gold_run(&test, 10).unwrap()),
    );
    let empty = write(tmp.path(), "empty.json", "{}");

    let (code, out) = qqa(&[
        "evaluate",
        "--run",
        s(&gold),
        "--corpus",
        s(&corpus),
        "--format",
        "json",
    ]);
    assert_eq!(code, 0);
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["macro_pap"], 1.0);

    let (code, out) = qqa(&[
        "evaluate",
        "--run",
        s(&empty),
        "--corpus",
        s(&corpus),
        "--format",
        "json",
    ]);
    assert_eq!(code, 0);
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert!((v["macro_pap"].as_f64().unwrap() - 14.0 / 407.0).abs() < 1e-12);

    let (code, out) = qqa(&[
        "evaluate",
        "--run",
        s(&gold),
        "--corpus",
        s(&corpus),
        "--baseline",
        s(&empty),
        "--system",
        "oracle",
    ]);
    assert_eq!(code, 0);
    assert!(out.contains("oracle"));
    let macro_row = out.lines().find(|l| l.starts_with("macro")).unwrap();
    assert!(
        macro_row.contains("1.000") && macro_row.contains("0.034") && macro_row.contains("+0.966"),
        "{macro_row}"
    );
}

fn nbest_entry(start_char: usize, end_char: usize, score: f64) -> serde_json::Value {
    serde_json::json!({"text": "", "score": score, "start_char": start_char, "end_char": end_char})
}

#[test]
fn postprocess_caps_snaps_and_evaluates() {
    let tmp = tempfile::tempdir().unwrap();
    let records = synth_corpus(23, &[("test", 3, 10, 2)], false);
    let corpus = write(tmp.path(), "corpus.jsonl", &to_jsonl(&records));

    // 20 candidates per question with offsets that cut words in half
    let mut nbest = serde_json::Map::new();
    for (qi, r) in records.iter().enumerate() {
        let n = r.passage.chars().count();
        let entries: Vec<_> = (0..20)
            .map(|i| {
                let start = (i * 7 + qi) % (n - 5);
                let end = (start + 3 + i % 9).min(n);
                nbest_entry(start, end, 1.0 - i as f64 / 20.0)
            })
            .collect();
        nbest.insert(r.pq_id.clone(), serde_json::Value::Array(entries));
    }
    let nbest_path = write(
        tmp.path(),
        "nbest.json",
        &serde_json::Value::Object(nbest).to_string(),
    );
    let out = tmp.path().join("run.json");
    let (code, _) = qqa(&[
        "postprocess",
        "--nbest",
        s(&nbest_path),
        "--corpus",
        s(&corpus),
        "--out",
        s(&out),
    ]);
    assert_eq!(code, 0);
    let run = parse_run(&fs::read_to_string(&out).unwrap()).unwrap();
    for r in &records {
        let entries = &run[&r.pq_id];
        assert!(entries.len() <= 10);
        for e in entries {
            assert!(r.passage.contains(&e.answer));
            assert_eq!(e.answer.trim(), e.answer);
            assert_whole_words(&r.passage, &e.answer);
        }
    }
    let (code, _) = qqa(&["evaluate", "--run", s(&out), "--corpus", s(&corpus)]);
    assert_eq!(code, 0);
}

fn assert_whole_words(passage: &str, answer: &str) {
    let words: Vec<&str> = passage.split(' ').collect();
    let ans: Vec<&str> = answer.split(' ').collect();
    assert!(
        words.windows(ans.len()).any(|w| w == ans.as_slice()),
        "{answer:?} is not a run of whole words"
    );
}

#[test]
fn postprocess_keeps_clean_nbest_order() {
    let tmp = tempfile::tempdir().unwrap();
    let passage = "الحمد لله رب العالمين الرحمن الرحيم مالك يوم الدين إياك نعبد وإياك نستعين اهدنا الصراط المستقيم";
    let corpus = write(
        tmp.path(),
        "c.jsonl",
        &format!(
            "{{\"pq_id\":\"q\",\"passage\":\"{passage}\",\"question\":\"ما هو الصراط؟\",\"answers\":[],\"split\":\"test\"}}\n"
        ),
    );
    // disjoint, informative, already sorted; 12 of them so truncation applies
    let toks: Vec<_> = (0..12)
        .map(|i| serde_json::json!({"text": "", "score": 1.0 - i as f64 / 100.0, "start_token": i, "end_token": i}))
        .collect();
    let nbest = write(
        tmp.path(),
        "n.json",
        &serde_json::json!({"q": toks}).to_string(),
    );
    let out = tmp.path().join("run.json");
    let (code, _) = qqa(&[
        "postprocess",
        "--nbest",
        s(&nbest),
        "--corpus",
        s(&corpus),
        "--stopword-threshold",
        "1.0",
        "--out",
        s(&out),
    ]);
    assert_eq!(code, 0);
    let run = parse_run(&fs::read_to_string(&out).unwrap()).unwrap();
    let starts: Vec<usize> = run["q"].iter().map(|e: &RunEntry| e.start_token).collect();
    assert_eq!(starts, (0..10).collect::<Vec<_>>());
}

// ---------------------------------------------------------------------------
// Fixture generation
// ---------------------------------------------------------------------------

const PROVIDER_TOML: &str = r#"provider = "openai"
model = "fixture-model"
endpoint = "http://127.0.0.1:9/v1/chat/completions"
api_key_env = "QQA_FIXTURE_KEY"
temperature = 0.0
"#;

fn words_of(passage: &str) -> Vec<&str> {
    passage.split(' ').collect()
}

fn word_index(passage: &str, start_char: usize) -> usize {
    passage
        .chars()
        .take(start_char)
        .filter(|&c| c == ' ')
        .count()
}

fn response_for(i: usize, r: &SynthRecord, sentinel: &str) -> String {
    let bare = |t: &str| normalize(t, &NormOptions::default());
    if r.answers.is_empty() {
        return format!("الإجابات:\n''{sentinel}''\n");
    }
    let (g0, start) = &r.answers[0];
    match i % 7 {
        0 => {
            let mut s = String::from("الإجابات:\n");
            for (n, (t, _)) in r.answers.iter().enumerate() {
                s.push_str(&format!("{}. ''{t}''\n", n + 1));
            }
            s
        }
        1 => format!("''{sentinel}''"),
        2 => format!("الإجابة هي «{}»", bare(g0)),
        3 => format!("\"{g0}\"\n\"هذا النص غير موجود في المقطع أبدا\"\n"),
        4 => {
            // an inserted word; single-word answers then fail to align
            let mut w: Vec<&str> = g0.split(' ').collect();
            w.insert(1.min(w.len()), "حقا");
            format!("- “{}”", w.join(" "))
        }
        5 => "لا أستطيع تحديد ذلك بدقة.".to_owned(),
        _ => {
            let words = words_of(&r.passage);
            let first = word_index(&r.passage, *start);
            let n = g0.split(' ').count();
            let lo = first.saturating_sub(1);
            let wider = words[lo..first + n].join(" ");
            format!("''{g0}''\n''{wider}''\n")
        }
    }
}

#[test]
#[ignore = "rewrites the committed replay fixture"]
fn regenerate_replay_fixture() {
    let dir = replay_dir();
    let cache_dir = dir.join("cache");
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&cache_dir).unwrap();

    let records = synth_corpus(2024, &[("train", 2, 3, 1), ("test", 3, 8, 1)], true);
    let corpus_path = write(&dir, "corpus.jsonl", &to_jsonl(&records));
    write(&dir, "provider.toml", PROVIDER_TOML);

    let corpus = load_corpus(&corpus_path, None).unwrap();
    let train: Vec<_> = corpus
        .iter()
        .filter(|r| r.split == Split::Train)
        .cloned()
        .collect();
    let template = PromptTemplate::default();
    let shots = select_shots(&train, 109).unwrap();
    let cache = ResponseCache::new(&cache_dir);
    let mut n = 0;
    for (i, (rec, synth)) in corpus.iter().zip(&records).enumerate() {
        if rec.split != Split::Test || shots.contains(&rec.pq_id) {
            continue;
        }
        let prompt = build_prompt(&template, &shots, &rec.passage, &rec.question);
        let hash = prompt_hash("openai", FIXTURE_MODEL, &template.digest(), &prompt);
        cache
            .put(&RawResponse {
                provider: "openai".into(),
                model: FIXTURE_MODEL.into(),
                prompt_hash: hash,
                text: response_for(i, synth, &template.no_answer_sentinel),
                timestamp: "2026-01-01T00:00:00Z".into(),
                from_cache: false,
            })
            .unwrap();
        n += 1;
    }
    assert!(n >= 10);

    let golden = dir.join("golden_run.json");
    assert_eq!(replay_predict(&golden).0, 0);
    fs::remove_file(qqa_cli::manifest_path(&golden)).unwrap();
}

#[test]
fn bundled_configs_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in ["gemini.toml", "deepseek.toml"] {
        qqa_core::prompting::ProviderConfig::load(&root.join(name)).unwrap();
    }
    let cfg = qqa_core::PostprocConfig::load(&root.join("postproc.toml")).unwrap();
    assert_eq!(cfg, qqa_core::PostprocConfig::default());
}
