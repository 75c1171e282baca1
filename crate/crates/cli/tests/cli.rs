use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fluentcap::corpus::{load_captions, Language};

const BIN: &str = env!("CARGO_BIN_EXE_fluentcap");

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .current_dir(dir)
        .env_remove("FLUENTCAP_DATA")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

const SYNTH: &[&str] = &[
    "synth", "--out", "data", "--images", "40", "--rho", "0.4", "--seed", "1",
];
const CLASSIFIER: &[&str] = &[
    "train-classifier",
    "--captions",
    "data/captions.jsonl",
    "--splits",
    "data/splits.json",
    "--out",
    "clf",
    "--epochs",
    "2",
    "--embed-dim",
    "8",
    "--hidden-dim",
    "8",
];
const SCORE: &[&str] = &[
    "score",
    "--captions",
    "data/captions.jsonl",
    "--classifier",
    "clf",
    "--out",
    "data/scored.jsonl",
];
const CAPTIONER: &[&str] = &[
    "train-captioner",
    "--captions",
    "data/scored.jsonl",
    "--features",
    "data/features.txt",
    "--splits",
    "data/splits.json",
    "--strategy",
    "rejection-sampling",
    "--out",
    "cap",
    "--epochs",
    "2",
    "--embed-dim",
    "8",
    "--hidden-dim",
    "8",
    "--lr",
    "0.5",
    "--clip",
    "5",
];
const CAPTION: &[&str] = &[
    "caption",
    "--features",
    "data/features.txt",
    "--model",
    "cap",
    "--splits",
    "data/splits.json",
    "--split",
    "test",
    "--beam",
    "3",
    "--topk",
    "2",
    "--out",
    "caps.jsonl",
];

fn files(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

#[test]
fn pipeline_produces_scored_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for stage in [SYNTH, CLASSIFIER, SCORE] {
        ok(d, stage);
    }
    let scored = load_captions(&d.join("data/scored.jsonl")).unwrap();
    let targets: Vec<_> = scored
        .iter()
        .filter(|r| r.language == Language::Target)
        .collect();
    assert_eq!(targets.len(), 200);
    for r in targets {
        let f = r.fluency.expect("every target sentence is scored");
        assert!((0.0..=1.0).contains(&f), "{f}");
    }
    assert!(d.join("clf/run.json").exists());
    assert!(d.join("data/scored.jsonl.run.json").exists());
    assert!(d.join("clf/evaluation.json").exists());
}

#[test]
fn weighted_loss_without_scores_names_the_missing_field() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, SYNTH);
    let out = run(
        d,
        &[
            "train-captioner",
            "--captions",
            "data/captions.jsonl",
            "--features",
            "data/features.txt",
            "--strategy",
            "weighted-loss",
            "--out",
            "cap",
            "--epochs",
            "1",
        ],
    );
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("fluency"), "{err}");
    assert!(!d.join("cap").exists());
}

#[test]
fn identical_invocations_give_identical_artifacts() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [a.path(), b.path()] {
        for stage in [SYNTH, CLASSIFIER, SCORE, CAPTIONER, CAPTION] {
            ok(d, stage);
        }
    }
    let fa = files(a.path());
    assert_eq!(fa, files(b.path()));
    assert!(fa.len() > 20, "{fa:?}");
    for f in fa {
        assert_eq!(
            fs::read(a.path().join(&f)).unwrap(),
            fs::read(b.path().join(&f)).unwrap(),
            "{}",
            f.display()
        );
    }
}

#[test]
fn generated_captions_can_be_reranked_and_evaluated() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for stage in [SYNTH, CLASSIFIER, SCORE, CAPTIONER, CAPTION] {
        ok(d, stage);
    }
    let stdout = ok(
        d,
        &[
            "rerank",
            "--candidates",
            "caps.jsonl",
            "--classifier",
            "clf",
            "--lexicon",
            "data/lexicon.tsv",
            "--out",
            "rr.jsonl",
        ],
    );
    assert!(stdout.contains("reranked 8 candidates"), "{stdout}");
    let stdout = ok(
        d,
        &[
            "evaluate",
            "--candidates",
            "rr.jsonl",
            "--references",
            "data/captions.jsonl",
            "--report",
            "eval.json",
        ],
    );
    assert!(
        stdout.contains("BLEU-4") && stdout.contains("CIDEr"),
        "{stdout}"
    );
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("eval.json")).unwrap()).unwrap();
    assert_eq!(report["images"], 4);
    assert_eq!(report["per_image"].as_array().unwrap().len(), 4);
}

#[test]
fn references_scored_against_themselves_are_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, SYNTH);
    let refs = load_captions(&d.join("data/captions.jsonl")).unwrap();
    let mut lines = String::new();
    let mut seen = std::collections::HashSet::new();
    for r in refs.iter().filter(|r| r.language == Language::Target) {
        if seen.insert(r.image_id.clone()) {
            lines.push_str(
                &serde_json::json!({"image_id": r.image_id, "rank": 1, "tokens": r.tokens})
                    .to_string(),
            );
            lines.push('\n');
        }
    }
    fs::write(d.join("self.jsonl"), lines).unwrap();
    let stdout = ok(
        d,
        &[
            "evaluate",
            "--candidates",
            "self.jsonl",
            "--references",
            "data/captions.jsonl",
        ],
    );
    assert!(stdout.contains("BLEU-4  100.00"), "{stdout}");
    assert!(stdout.contains("ROUGE-L 100.00"), "{stdout}");
}

#[test]
fn usage_and_io_errors() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = run(d, &["synth", "--out", "x", "--colour", "red"]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(
        d,
        &[
            "score",
            "--captions",
            "missing.jsonl",
            "--classifier",
            "clf",
            "--out",
            "o.jsonl",
        ],
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.jsonl"));
    let out = run(
        d,
        &[
            "train-captioner",
            "--captions",
            "c",
            "--features",
            "f",
            "--out",
            "o",
            "--strategy",
            "sometimes",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn config_file_defaults_and_data_root() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::create_dir(d.join("root")).unwrap();
    fs::write(
        d.join("exp.conf"),
        "# synthetic corpus\nout = corpus\nimages = 12\nsynth.rho = 1.0\n",
    )
    .unwrap();
    let out = Command::new(BIN)
        .args(["synth", "--config", "exp.conf", "--images", "10"])
        .current_dir(d)
        .env("FLUENTCAP_DATA", d.join("root"))
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let recs = load_captions(&d.join("root/corpus/captions.jsonl")).unwrap();
    let targets: Vec<_> = recs
        .iter()
        .filter(|r| r.language == Language::Target)
        .collect();
    assert_eq!(targets.len(), 50);
    assert!(targets.iter().all(|r| r.tokens.iter().any(|t| t == "@@")));
    let manifest = fs::read_to_string(d.join("root/corpus/run.json")).unwrap();
    assert!(manifest.contains("\"images\": 10"), "{manifest}");
}

#[test]
fn gradcheck_subcommand_passes() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(dir.path(), &["gradcheck", "--threads", "2"]);
    assert_eq!(stdout.matches(" ok").count(), 2, "{stdout}");
}

fn http_get(addr: &str, path: &str) -> std::io::Result<String> {
    use std::io::{Read, Write};
    let mut s = std::net::TcpStream::connect(addr)?;
    write!(
        s,
        "GET {path} HTTP/1.1\r\nHost: {addr}\r\nConnection: close\r\n\r\n"
    )?;
    let mut out = String::new();
    s.read_to_string(&mut out)?;
    Ok(out)
}

#[test]
fn serve_answers_over_http() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for stage in [SYNTH, CLASSIFIER, SCORE, CAPTIONER, CAPTION] {
        ok(d, stage);
    }
    fs::copy(d.join("caps.jsonl"), d.join("other.jsonl")).unwrap();
    let port = std::net::TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port();
    let addr = format!("127.0.0.1:{port}");
    let mut child = Command::new(BIN)
        .args([
            "serve",
            "--captions",
            "data/captions.jsonl",
            "--annotators",
            "a,b",
            "--systems",
            "one=caps.jsonl,two=other.jsonl",
            "--images",
            "data/images.jsonl",
            "--raters",
            "r",
            "--state-dir",
            "state",
            "--addr",
            &addr,
        ])
        .current_dir(d)
        .env_remove("FLUENTCAP_DATA")
        .stdout(std::process::Stdio::null())
        .spawn()
        .unwrap();
    let mut reply = None;
    for _ in 0..100 {
        if let Ok(r) = http_get(&addr, "/api/progress") {
            reply = Some(r);
            break;
        }
        std::thread::sleep(std::time::Duration::from_millis(50));
    }
    let item = http_get(&addr, "/api/eval/item?rater=r");
    child.kill().unwrap();
    child.wait().unwrap();
    let reply = reply.expect("server came up");
    assert!(reply.starts_with("HTTP/1.1 200"), "{reply}");
    let body = &reply[reply.find("\r\n\r\n").unwrap() + 4..];
    let v: serde_json::Value = serde_json::from_str(body).unwrap();
    assert_eq!(v["grading"]["sentences"], 200);
    assert_eq!(v["eval"]["images"], 4);
    let item = item.unwrap();
    assert!(item.contains("\"description\""), "{item}");
    assert!(
        !item.contains("\"one\"") && !item.contains("\"two\""),
        "{item}"
    );
    assert!(d.join("state/events.jsonl").exists());
}
