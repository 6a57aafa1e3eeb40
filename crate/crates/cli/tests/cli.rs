use std::io::BufReader;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use aded_core::corpus::{tokenize, TokenizerMode, Vocabulary};
use aded_core::target::serve_connection;
use aded_core::{OracleModel, OracleModelSpec, TokenId, TrigramMatrix};
use tempfile::TempDir;

const CORPUS: &str = "the cat sat on the mat\nthe dog sat on the rug\nthe cat ran to the dog\nthe cat sat on the rug\n";

fn aded(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aded")).args(args).env("ADED_LOG", "warn").output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = aded(args);
    assert!(out.status.success(), "aded {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn setup(corpus: &str) -> (TempDir, PathBuf, PathBuf) {
    let dir = TempDir::new().unwrap();
    let text = dir.path().join("corpus.txt");
    std::fs::write(&text, corpus).unwrap();
    let matrix = dir.path().join("m.ad3g");
    ok(&["build", s(&text), "-o", s(&matrix)]);
    (dir, text, matrix)
}

fn metrics_line(stdout: &str) -> serde_json::Value {
    serde_json::from_str(stdout.lines().last().unwrap()).unwrap()
}

#[test]
fn build_reports_counts_for_a_tiny_corpus() {
    let (_dir, _, matrix) = setup("a b c a b d\n");
    let m = TrigramMatrix::load_path(&matrix).unwrap();
    assert_eq!(m.entry_count(), 4);
    let (_dir2, text, _) = setup("a b c a b d\n");
    let out = ok(&["build", s(&text), "-o", s(&text.with_extension("ad3g"))]);
    assert!(out.contains("distinct trigrams  4"), "{out}");
    assert!(text.with_extension("ad3g.vocab.json").exists());
}

#[test]
fn threshold_above_every_count_warns_and_writes_an_empty_matrix() {
    let (dir, text, _) = setup(CORPUS);
    let out_path = dir.path().join("empty.ad3g");
    let out = aded(&["build", s(&text), "-t", "50", "-o", s(&out_path)]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("matrix is empty"));
    assert!(TrigramMatrix::load_path(&out_path).unwrap().is_empty());
}

#[test]
fn doubling_the_corpus_keeps_every_conditional() {
    let (dir, text, once) = setup(CORPUS);
    let doubled_text = dir.path().join("doubled.txt");
    std::fs::write(&doubled_text, format!("{CORPUS}{CORPUS}")).unwrap();
    let twice = dir.path().join("twice.ad3g");
    let doubled = dir.path().join("doubled.ad3g");
    ok(&["build", s(&text), s(&text), "-o", s(&twice)]);
    ok(&["build", s(&doubled_text), "-o", s(&doubled)]);
    let (a, b, c) = (
        TrigramMatrix::load_path(&once).unwrap(),
        TrigramMatrix::load_path(&twice).unwrap(),
        TrigramMatrix::load_path(&doubled).unwrap(),
    );
    assert_eq!(b.len(), a.len());
    for (ctx, _) in a.contexts() {
        let p = a.conditional(*ctx);
        for other in [&b, &c] {
            let q = other.conditional(*ctx);
            assert_eq!(p.len(), q.len());
            for &(t, pr) in p.entries() {
                assert!((pr - q.prob(t)).abs() < 1e-12);
            }
        }
    }
}

fn script(dir: &Path) -> PathBuf {
    let mut vocab = Vocabulary::new();
    tokenize(CORPUS, &mut vocab, TokenizerMode::WhitespaceWord).unwrap();
    let id = |w: &str| vocab.id(w).unwrap().0;
    let json = serde_json::json!({
        "rules": [
            {"suffix": [id("cat")], "reply": [[id("sat"), 0.7], [id("ran"), 0.3]]},
            {"suffix": [id("sat")], "reply": [[id("on"), 1.0]]},
            {"suffix": [id("on")], "reply": [[id("the"), 1.0]]},
            {"suffix": [id("on"), id("the")], "reply": [[id("mat"), 0.6], [id("rug"), 0.4]]}
        ],
        "default": [[id("the"), 0.5], [id("cat"), 0.5]]
    });
    let path = dir.join("script.json");
    std::fs::write(&path, json.to_string()).unwrap();
    path
}

#[test]
fn scripted_decode_is_byte_identical_across_runs() {
    let (dir, _, matrix) = setup(CORPUS);
    let target = format!("scripted:{}", s(&script(dir.path())));
    let args = ["decode", "-m", s(&matrix), "--target", &target, "-p", "the cat", "--max-new-tokens", "20", "--seed", "5"];
    let first = ok(&args);
    assert_eq!(first, ok(&args));
    assert!(first.starts_with("sat on the mat"), "{first}");
    let m = metrics_line(&first);
    assert_eq!(m["metrics"]["emitted_tokens"], 20);

    let sampled = [&args[..], &["--temperature", "0.8", "--top-p", "0.9"]].concat();
    assert_eq!(ok(&sampled), ok(&sampled));
}

#[test]
fn autoregressive_reports_exactly_one() {
    let (_dir, text, matrix) = setup(CORPUS);
    let out = ok(&[
        "decode", "-m", s(&matrix), "--target-corpus", s(&text), "-p", "the dog", "--strategy", "autoregressive",
        "--max-new-tokens", "9",
    ]);
    let m = metrics_line(&out);
    assert_eq!(m["metrics"]["accept_length_avg"].as_f64(), Some(1.0));
    assert_eq!(m["metrics"]["forward_passes"], 9);
    assert!(m["metrics"].get("wall_clock_ms").is_none());
}

#[test]
fn decoding_never_rewrites_the_matrix_file() {
    let (dir, text, matrix) = setup(CORPUS);
    let before = std::fs::read(&matrix).unwrap();
    for adaptive in ["off", "on"] {
        ok(&[
            "decode", "-m", s(&matrix), "--target-corpus", s(&text), "-p", "the cat", "--adaptive", adaptive,
        ]);
        assert_eq!(std::fs::read(&matrix).unwrap(), before);
    }
    let saved = dir.path().join("adapted.ad3g");
    ok(&["decode", "-m", s(&matrix), "--target-corpus", s(&text), "-p", "the cat", "--save-adapted", s(&saved)]);
    assert_eq!(std::fs::read(&matrix).unwrap(), before);
    assert_ne!(std::fs::read(&saved).unwrap(), before);
    assert!(ok(&["inspect", s(&saved)]).contains("contexts"));
}

#[test]
fn remote_target_matches_the_local_oracle() {
    let (_dir, text, matrix) = setup(CORPUS);
    let mut vocab = Vocabulary::new();
    let docs: Vec<Vec<TokenId>> = CORPUS
        .lines()
        .map(|l| tokenize(l, &mut vocab, TokenizerMode::WhitespaceWord).unwrap())
        .collect();
    let oracle = OracleModel::build(OracleModelSpec::new(3), &docs);
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    std::thread::spawn(move || {
        for stream in listener.incoming().flatten() {
            let reader = BufReader::new(stream.try_clone().unwrap());
            let _ = serve_connection(reader, stream, &oracle);
        }
    });
    let common = ["-m", s(&matrix), "-p", "the cat", "--max-new-tokens", "16"];
    let remote = ok(&[&["decode", "--target", &format!("remote:{addr}")][..], &common].concat());
    let local = ok(&[&["decode", "--target-corpus", s(&text)][..], &common].concat());
    assert_eq!(remote.lines().next(), local.lines().next());
}

#[test]
fn unreachable_remote_is_an_error() {
    let (_dir, _, matrix) = setup(CORPUS);
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let out = aded(&["decode", "-m", s(&matrix), "--target", &format!("remote:127.0.0.1:{port}"), "-p", "the cat"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}

#[test]
fn bench_writes_a_reproducible_report() {
    let dir = TempDir::new().unwrap();
    let sc = dir.path().join("s.txt");
    std::fs::write(
        &sc,
        "name = cli\nsynthetic.vocab = 40\nsynthetic.docs = 30\nsynthetic.doc_len = 50\nprompts = 3\nmax_new_tokens = 10\niterations = 20\n[sweep]\naxis = iterations\nvalues = 5, 20\n",
    )
    .unwrap();
    let json = dir.path().join("r.json");
    let table = ok(&["bench", s(&sc), "--json", s(&json)]);
    assert!(table.lines().next().unwrap().starts_with("axis"));
    assert_eq!(table.lines().count(), 5);
    let first = std::fs::read(&json).unwrap();
    ok(&["bench", s(&sc), "--json", s(&json), "--workers", "1"]);
    assert_eq!(std::fs::read(&json).unwrap(), first);
    let report: serde_json::Value = serde_json::from_slice(&first).unwrap();
    assert_eq!(report["series"]["iterations"]["aded"].as_array().unwrap().len(), 2);

    std::fs::write(&sc, "iterations = lots\n").unwrap();
    let bad = aded(&["bench", s(&sc)]);
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("line 1"));
}

#[test]
fn inspect_shows_a_context() {
    let (_dir, _, matrix) = setup(CORPUS);
    let out = ok(&["inspect", s(&matrix), "--context", "the cat"]);
    assert!(out.contains("sat"), "{out}");
    assert!(!aded(&["inspect", s(&matrix), "--context", "the"]).status.success());
}
