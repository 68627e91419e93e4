use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use tempfile::TempDir;

const TINY: &[&str] = &[
    "z_dim=4",
    "gru_hidden=8",
    "gru_layers=1",
    "encoder_hidden=8",
    "decoder_hidden=8",
    "conv_widths=2",
    "conv_channels=4",
    "batch=16",
];

fn gvae(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gvae"))
        .args(args)
        .env_remove("GVAE_GRAMMAR_DIR")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        Fixture {
            dir: TempDir::new().unwrap(),
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn data(&self, n: usize) -> PathBuf {
        let d = self.path("data.txt");
        let o = gvae(&[
            "gen-data",
            "--n",
            &n.to_string(),
            "--seed",
            "3",
            "--out",
            p(&d),
        ]);
        assert!(o.status.success());
        d
    }

    fn train(&self, data: &Path, model: &str, epochs: usize, extra: &[&str]) -> Output {
        let m = self.path(model);
        let e = format!("epochs={epochs}");
        let mut args = vec![
            "--threads",
            "1",
            "train",
            "--data",
            p(data),
            "--model",
            p(&m),
            "--set",
            &e,
        ];
        for kv in TINY {
            args.extend(["--set", kv]);
        }
        args.extend(extra);
        gvae(&args)
    }

    fn model(&self) -> PathBuf {
        let data = self.data(60);
        assert!(self.train(&data, "m.bin", 2, &[]).status.success());
        self.path("m.bin")
    }
}

fn json_lines(s: &str) -> Vec<serde_json::Value> {
    s.lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn parse_valid_and_invalid() {
    let o = gvae(&["--grammar", "smiles", "parse", "c1ccccc1"]);
    assert_eq!(o.status.code(), Some(0));
    let v = json_lines(&stdout(&o));
    assert_eq!(v[0]["valid"], true);
    assert!(v[0]["rules"].as_array().unwrap().len() > 1);

    let o = gvae(&["parse", "2*1+exp3)+exp(2)"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(json_lines(&stdout(&o))[0]["valid"], false);
}

#[test]
fn parse_empty_input_file() {
    let f = Fixture::new();
    let empty = f.path("empty.txt");
    std::fs::write(&empty, "").unwrap();
    let o = gvae(&["parse", "--input", p(&empty)]);
    assert_eq!(o.status.code(), Some(0));
    assert!(o.stdout.is_empty());
}

#[test]
fn usage_errors() {
    assert_eq!(gvae(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(
        gvae(&["--grammar", "nope", "parse", "x"]).status.code(),
        Some(2)
    );
    assert_eq!(
        gvae(&["parse", "--input", "/definitely/not/here"])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn grammar_directory_variable() {
    let f = Fixture::new();
    std::fs::write(f.path("tiny.cfg"), "S -> 'a' S | 'b'\n").unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_gvae"))
        .args(["--grammar", "tiny", "parse", "aab"])
        .env("GVAE_GRAMMAR_DIR", f.dir.path())
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(
        json_lines(&stdout(&o))[0]["rules"],
        serde_json::json!([0, 0, 1])
    );
}

#[test]
fn bad_config_key_is_named() {
    let f = Fixture::new();
    let data = f.data(10);
    let o = f.train(&data, "m.bin", 1, &["--set", "learning_rate=0.1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rate"));
}

#[test]
fn train_writes_artifacts_and_resume_matches() {
    let f = Fixture::new();
    let data = f.data(60);
    assert!(f.train(&data, "full.bin", 3, &[]).status.success());
    let loss = std::fs::read_to_string(f.path("full.bin.loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 4);
    assert!(f.path("full.bin.json").exists());

    assert!(f.train(&data, "part.bin", 1, &[]).status.success());
    let ckpt = f.path("part.bin.ckpt");
    let o = f.train(&data, "resumed.bin", 3, &["--resume", p(&ckpt)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        std::fs::read(f.path("full.bin")).unwrap(),
        std::fs::read(f.path("resumed.bin")).unwrap()
    );
    assert_eq!(
        loss,
        std::fs::read_to_string(f.path("resumed.bin.loss.csv")).unwrap()
    );
}

#[test]
fn decoding_reports() {
    let f = Fixture::new();
    let m = f.model();
    let m = p(&m);

    let o = gvae(&[
        "interpolate",
        "--model",
        m,
        "--from",
        "x*x",
        "--to",
        "sin(x)+1",
        "--steps",
        "4",
    ]);
    assert!(o.status.success());
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.first(), Some(&"**x*x**"));
    assert_eq!(lines.last(), Some(&"**sin(x)+1**"));
    assert_eq!(lines.len(), 7);

    let o = gvae(&[
        "prior-valid",
        "--model",
        m,
        "--points",
        "10",
        "--decodes",
        "5",
    ]);
    let v = &json_lines(&stdout(&o))[0];
    let frac = v["fraction"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&frac));
    assert_eq!(v["malformed"], 0);

    let out = f.path("grid.csv");
    let o = gvae(&[
        "grid",
        "--model",
        m,
        "--string",
        "x+1",
        "--grid-n",
        "5",
        "--decodes",
        "3",
        "--out",
        p(&out),
    ]);
    assert!(o.status.success());
    assert_eq!(
        std::fs::read_to_string(&out).unwrap().lines().count(),
        1 + 25
    );
    assert_eq!(
        gvae(&["grid", "--model", m, "--string", "x", "--grid-n", "4"])
            .status
            .code(),
        Some(2)
    );

    let o = gvae(&["sample", "--model", m, "--n", "4", "--seed", "2"]);
    assert_eq!(json_lines(&stdout(&o)).len(), 4);
    assert_eq!(
        o.stdout,
        gvae(&[
            "--threads",
            "1",
            "sample",
            "--model",
            m,
            "--n",
            "4",
            "--seed",
            "2"
        ])
        .stdout
    );

    let o = gvae(&["reconstruct", "--model", m, "x+1", "x+"]);
    assert_eq!(o.status.code(), Some(1));
    let v = json_lines(&stdout(&o));
    assert!(v[0]["exact"].is_boolean());
    assert!(v[1]["error"].is_string());

    let data = f.path("data.txt");
    let o = gvae(&[
        "recon-acc",
        "--model",
        m,
        "--data",
        p(&data),
        "--limit",
        "5",
        "--n-encode",
        "2",
        "--n-decode",
        "2",
    ]);
    let acc = json_lines(&stdout(&o))[0]["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));

    let o = gvae(&["scatter", "--model", m, "--data", p(&data)]);
    let text = stdout(&o);
    assert!(text.starts_with("z1,z2,z3,z4,property"));
    assert!(text.lines().count() > 10);

    let o = gvae(&[
        "gp-metrics",
        "--model",
        m,
        "--data",
        p(&data),
        "--gp-iterations",
        "20",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v = &json_lines(&stdout(&o))[0];
    assert!(v["rmse"].as_f64().unwrap() >= 0.0);
}

#[test]
fn bo_expression_smoke_is_reproducible() {
    let f = Fixture::new();
    let m = f.model();
    let data = f.path("data.txt");
    let run = |log: &str, threads: &str| {
        let log = f.path(log);
        let start = Instant::now();
        let o = gvae(&[
            "--threads",
            threads,
            "bo",
            "--model",
            p(&m),
            "--data",
            p(&data),
            "--iterations",
            "2",
            "--batch",
            "10",
            "--seed",
            "4",
            "--gp-iterations",
            "30",
            "--log",
            p(&log),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        assert!(start.elapsed() < Duration::from_secs(300));
        (stdout(&o), std::fs::read_to_string(log).unwrap())
    };
    let (summary, log) = run("a.csv", "1");
    assert!(summary.contains("initial best"));
    assert_eq!(
        log.lines()
            .filter(|l| !l.starts_with("0,") && !l.starts_with("iteration"))
            .count(),
        20
    );
    assert_eq!(run("b.csv", "1"), (summary.clone(), log.clone()));
    assert_eq!(run("c.csv", "4"), (summary, log));
}

#[test]
fn bo_external_stub_imputes_invalid() {
    let f = Fixture::new();
    let m = f.model();
    let data = f.path("data.txt");
    let log = f.path("log.csv");
    let counter = f.path("calls");
    // Scores the ten initial strings, then rejects everything.
    let scorer = format!(
        "read s; n=$(cat {c} 2>/dev/null || echo 0); n=$((n+1)); echo $n > {c}; \
         if [ $n -le 10 ]; then echo $n; else echo INVALID; fi",
        c = p(&counter)
    );
    let o = gvae(&[
        "--threads",
        "1",
        "bo",
        "--model",
        p(&m),
        "--data",
        p(&data),
        "--init",
        "10",
        "--task",
        "external",
        "--scorer",
        &scorer,
        "--iterations",
        "2",
        "--batch",
        "3",
        "--gp-iterations",
        "20",
        "--log",
        p(&log),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&log).unwrap();
    let header: Vec<&str> = text.lines().next().unwrap().split(',').collect();
    assert_eq!(
        header,
        [
            "iteration",
            "z",
            "text",
            "valid",
            "raw_score",
            "imputed",
            "score"
        ]
    );
    let rows: Vec<Vec<&str>> = text
        .lines()
        .skip(1)
        .map(|l| l.rsplitn(4, ',').collect())
        .collect();
    assert_eq!(rows.len(), 16);
    // rsplitn yields score, imputed, raw_score, rest.
    for r in &rows[..10] {
        assert_eq!((r[1], r[0]), ("false", r[2]));
    }
    for r in &rows[10..] {
        assert_eq!((r[1], r[2], r[0]), ("true", "", "1"));
    }
    let o = gvae(&[
        "bo",
        "--model",
        p(&m),
        "--data",
        p(&data),
        "--task",
        "external",
    ]);
    assert_eq!(o.status.code(), Some(2));
}
