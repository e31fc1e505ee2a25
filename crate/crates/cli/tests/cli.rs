use std::path::{Path, PathBuf};

use persona_mtl::checkpoint;
use persona_mtl::corpus::{Vocab, EOS};
use persona_mtl::decoding::{self, DecodeConfig, NBestRecord};
use persona_mtl::eval;
use persona_mtl::shard;
use persona_mtl::synth::{self, SynthConfig};
use persona_mtl_cli::artifacts::EvalOutput;

struct Run {
    code: i32,
    stdout: String,
}

fn cli_with_input(args: &[&str], input: &str) -> Run {
    let mut argv = vec!["persona-mtl"];
    argv.extend_from_slice(args);
    let mut out = Vec::new();
    let mut input = input.as_bytes();
    let code = persona_mtl_cli::main_with_args(argv, &mut input, &mut out);
    Run { code, stdout: String::from_utf8(out).unwrap() }
}

fn cli(args: &[&str]) -> Run {
    cli_with_input(args, "")
}

fn ok(args: &[&str]) -> String {
    let r = cli(args);
    assert_eq!(r.code, 0, "{args:?}: {}", r.stdout);
    r.stdout
}

fn write_jsonl<T: serde::Serialize>(path: &Path, rows: &[T]) {
    let text: String = rows.iter().map(|r| serde_json::to_string(r).unwrap() + "\n").collect();
    std::fs::write(path, text).unwrap();
}

const SETTINGS: &str = "hidden = 12\nmax_epochs = 3\npatience = 2\nbatch_size = 8\nbeam = 3\nmax_len = 8\n";

/// Small synthetic corpus plus a settings file under `dir`.
fn corpus(dir: &Path) -> PathBuf {
    let c = synth::generate(&SynthConfig {
        general_speakers: 5,
        triples_per_speaker: 10,
        posts_per_persona: 20,
        dev_per_persona: 5,
        test_per_persona: 5,
        styled_rate: 0.08,
        seed: 11,
    });
    write_jsonl(&dir.join("train.jsonl"), &c.train);
    write_jsonl(&dir.join("dev.jsonl"), &c.dev);
    write_jsonl(&dir.join("test.jsonl"), &c.test);
    write_jsonl(&dir.join("posts.jsonl"), &c.posts);
    std::fs::write(dir.join("settings.conf"), SETTINGS).unwrap();
    dir.join("settings.conf")
}

fn s(p: &Path) -> String {
    p.display().to_string()
}

fn prep(dir: &Path, out: &str) -> String {
    let conf = corpus(dir);
    ok(&[
        "prep",
        "--train",
        &s(&dir.join("train.jsonl")),
        "--dev",
        &s(&dir.join("dev.jsonl")),
        "--test",
        &s(&dir.join("test.jsonl")),
        "--posts",
        &s(&dir.join("posts.jsonl")),
        "--out",
        &s(&dir.join(out)),
        "--config",
        &s(&conf),
    ])
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(cli(&["--help"]).code, 0);
    assert_eq!(cli(&["--version"]).code, 0);
    assert_eq!(cli(&["train", "--help"]).code, 0);
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(cli(&[]).code, 1);
    assert_eq!(cli(&["frobnicate"]).code, 1);
    assert_eq!(cli(&["prep", "--train", "x"]).code, 1);
    let dir = tempfile::tempdir().unwrap();
    corpus(dir.path());
    let base = |extra: &str| {
        cli(&[
            "prep",
            "--train",
            &s(&dir.path().join("train.jsonl")),
            "--dev",
            &s(&dir.path().join("dev.jsonl")),
            "--posts",
            &s(&dir.path().join("posts.jsonl")),
            "--out",
            &s(&dir.path().join("out")),
            extra,
        ])
        .code
    };
    assert_eq!(base("hiddn=3"), 1, "unknown key");
    assert_eq!(base("hidden=x"), 1, "bad value");
    assert_eq!(base("hidden"), 1, "missing =");
    let bad_conf = dir.path().join("bad.conf");
    std::fs::write(&bad_conf, "# comment\nbeem = 3\n").unwrap();
    assert_eq!(cli(&["prep", "--train", "a", "--dev", "b", "--posts", "c", "--out", "d", "--config", &s(&bad_conf)]).code, 1);
}

#[test]
fn data_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = s(&dir.path().join("missing.jsonl"));
    let out = s(&dir.path().join("out"));
    assert_eq!(cli(&["prep", "--train", &missing, "--dev", &missing, "--posts", &missing, "--out", &out]).code, 2);
    assert_eq!(cli(&["train", "--data", &out, "--out", &out]).code, 2);
    let empty = dir.path().join("empty.jsonl");
    std::fs::write(&empty, "").unwrap();
    let e = s(&empty);
    assert_eq!(cli(&["prep", "--train", &e, "--dev", &e, "--posts", &e, "--out", &out]).code, 2, "empty corpus");
}

#[test]
fn prep_reports_counts_and_is_byte_identical_on_rerun() {
    let dir = tempfile::tempdir().unwrap();
    let first = prep(dir.path(), "a");
    assert!(first.contains("train: 50 triples, 0 skipped"), "{first}");
    assert!(first.contains("posts by sports_fan: 20"), "{first}");
    let second = prep(dir.path(), "b");
    assert_eq!(first, second);
    for name in ["vocab.txt", "train.shard", "dev.shard", "test.shard", "posts.shard"] {
        let a = std::fs::read(dir.path().join("a").join(name)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(name)).unwrap();
        assert_eq!(a, b, "{name}");
    }
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("a/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "prep");
    assert_eq!(manifest["outputs"].as_array().unwrap().len(), 5);
    assert_eq!(manifest["settings"]["hidden"], "12");
}

#[test]
fn lenient_prep_counts_corrupt_lines_and_strict_rejects_them() {
    let dir = tempfile::tempdir().unwrap();
    corpus(dir.path());
    let train = dir.path().join("train.jsonl");
    let mut text = std::fs::read_to_string(&train).unwrap();
    text.push_str("{not json\n{\"message\": \"hi\", \"speaker_id\": \"x\"}\n");
    std::fs::write(&train, text).unwrap();
    let args = |strict: &str| {
        cli(&[
            "prep",
            "--train",
            &s(&train),
            "--dev",
            &s(&dir.path().join("dev.jsonl")),
            "--posts",
            &s(&dir.path().join("posts.jsonl")),
            "--out",
            &s(&dir.path().join("out")),
            strict,
        ])
    };
    let lenient = args("strict=false");
    assert_eq!(lenient.code, 0);
    assert!(lenient.stdout.contains("train: 50 triples, 2 skipped"), "{}", lenient.stdout);
    assert_eq!(args("strict=true").code, 2);
}

/// prep → train (MTask-S, one user) → train-reverse under `dir`.
fn trained(dir: &Path) -> (String, String, String, String) {
    prep(dir, "data");
    let conf = s(&dir.join("settings.conf"));
    let data = s(&dir.join("data"));
    let out = s(&dir.join("s"));
    let stdout = ok(&["train", "--data", &data, "--out", &out, "--variant", "mtask-s", "--user", synth::TECH_SUPPORT, "--config", &conf]);
    assert!(stdout.contains("tech_support: best round"), "{stdout}");
    ok(&["train-reverse", "--data", &data, "--out", &s(&dir.join("rev")), "--config", &conf]);
    let model = format!("{out}/mtask-s.{}.ckpt", synth::TECH_SUPPORT);
    (data, model, s(&dir.join("rev/reverse.ckpt")), conf)
}

#[test]
fn library_calls_reproduce_cli_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let (data, model_path, reverse_path, conf) = trained(dir.path());
    let user = synth::TECH_SUPPORT;
    let nbest_dir = s(&dir.path().join("nbest"));
    ok(&["decode", "--data", &data, "--model", &model_path, "--reverse", &reverse_path, "--split", "test", "--user", user, "--out", &nbest_dir, "--config", &conf]);
    let eval_dir = dir.path().join("eval");
    ok(&["eval", "--data", &data, "--model", &model_path, "--user", user, "--out", &s(&eval_dir), "--config", &conf]);

    let vocab = Vocab::load(&dir.path().join("data/vocab.txt")).unwrap();
    let model = checkpoint::load(Path::new(&model_path), Some(&vocab.hash())).unwrap();
    let reverse = checkpoint::load(Path::new(&reverse_path), Some(&vocab.hash())).unwrap();
    let triples: Vec<_> =
        shard::load_triples(&dir.path().join("data/test.shard")).unwrap().into_iter().filter(|t| t.speaker_id == user).collect();
    let cfg = DecodeConfig { beam: 3, max_len: 8, ..DecodeConfig::default() };
    let records = decoding::read_nbest(&dir.path().join("nbest/nbest.jsonl")).unwrap();
    assert_eq!(records.len(), triples.len());
    for (t, record) in triples.iter().zip(&records) {
        let source = t.forward(None).source_ids;
        let list = decoding::beam_search(&model, &source, &cfg).unwrap();
        let mut expected = decoding::to_candidates(&list, &vocab);
        let message = t.reverse().target_ids;
        for (c, h) in expected.iter_mut().zip(&list.hypotheses) {
            c.logp_rev = Some(decoding::score_reverse(&reverse, &message[..message.len() - 1], &h.token_ids).unwrap());
        }
        let response = t.forward(None).target_ids;
        let want = NBestRecord {
            source: vocab.decode(&source).join(" "),
            candidates: expected,
            reference: Some(vocab.decode(&response[..response.len() - 1]).join(" ")),
            speaker_id: Some(user.to_string()),
        };
        assert_eq!(record, &want);
    }

    let report: EvalOutput = serde_json::from_slice(&std::fs::read(eval_dir.join("eval.json")).unwrap()).unwrap();
    let examples: Vec<_> = triples.iter().map(|t| t.forward(None)).collect();
    assert_eq!(report.report.perplexity, Some(eval::perplexity(&model, &examples).unwrap()));
}

#[test]
fn tune_rerank_and_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (data, model, reverse, conf) = trained(dir.path());
    let user = synth::TECH_SUPPORT;
    let p = |n: &str| s(&dir.path().join(n));
    ok(&["decode", "--data", &data, "--model", &model, "--reverse", &reverse, "--split", "dev", "--user", user, "--out", &p("dev"), "--config", &conf]);
    let tuned = ok(&["tune", "--nbest", &p("dev/nbest.jsonl"), "--out", &p("tune"), "lambda_step=0.5", "gamma_step=0.5", "refinements=0"]);
    assert!(tuned.contains("(9 grid points)"), "{tuned}");
    ok(&["decode", "--data", &data, "--model", &model, "--split", "test", "--user", user, "--out", &p("test"), "--config", &conf]);
    // no reverse scores: λ must be zero
    assert_eq!(cli(&["rerank", "--nbest", &p("test/nbest.jsonl"), "--out", &p("rr"), "lambda=0.5"]).code, 2);
    ok(&["rerank", "--nbest", &p("test/nbest.jsonl"), "--out", &p("rr"), "--gamma", "0.1"]);
    let judges = dir.path().join("judges.csv");
    let mut csv = String::from("judge,item,score\n");
    for j in 0..3 {
        for i in 0..4 {
            csv.push_str(&format!("j{j},i{i},{}\n", 1 + (i + j) % 5));
        }
    }
    std::fs::write(&judges, csv).unwrap();
    let out = ok(&["eval", "--responses", &p("rr/responses.jsonl"), "--judges", &s(&judges), "--out", &p("eval")]);
    assert!(out.contains("BLEU:") && out.contains("judges: kept 3 of 3"), "{out}");
    let report: EvalOutput = serde_json::from_slice(&std::fs::read(dir.path().join("eval/eval.json")).unwrap()).unwrap();
    assert_eq!(report.report.sentences, 5);
    assert!(report.report.perplexity.is_none());
    assert_eq!(report.judges.unwrap().upper_bins.len(), 2);
    assert_eq!(cli(&["eval", "--out", &p("eval")]).code, 1);
}

#[test]
fn chat_keeps_one_turn_of_context_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (data, model_path, reverse, conf) = trained(dir.path());
    let input = "my printer is broken\nthanks\n";
    let args = ["chat", "--data", &data, "--model", &model_path, "--config", &conf];
    let a = cli_with_input(&args, input);
    assert_eq!(a.code, 0, "{}", a.stdout);
    assert_eq!(a.stdout.lines().count(), 2);
    assert_eq!(cli_with_input(&args, input).stdout, a.stdout);

    // the first reply is the beam 1-best for EOS ++ message
    let vocab = Vocab::load(&dir.path().join("data/vocab.txt")).unwrap();
    let model = checkpoint::load(Path::new(&model_path), Some(&vocab.hash())).unwrap();
    let mut source = vec![EOS];
    source.extend(vocab.encode_text("my printer is broken"));
    let list = decoding::beam_search(&model, &source, &DecodeConfig { beam: 3, max_len: 8, ..DecodeConfig::default() }).unwrap();
    let first = decoding::to_candidates(&list, &vocab)[0].words().join(" ");
    assert_eq!(a.stdout.lines().next().unwrap(), first);

    let mmi = cli_with_input(&["chat", "--data", &data, "--model", &model_path, "--reverse", &reverse, "--show-nbest", "2", "--lambda", "0.5", "--config", &conf], "hello\n");
    assert_eq!(mmi.code, 0);
    let lines: Vec<&str> = mmi.stdout.lines().collect();
    assert_eq!(lines.len(), 3, "{}", mmi.stdout);
    assert!(lines[1].starts_with("  1. ") && lines[2].starts_with("  2. "));
    assert_eq!(cli_with_input(&args, "").stdout, "");
}
