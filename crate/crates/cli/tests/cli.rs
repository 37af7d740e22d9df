use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
[synth]
n_source = 6
n_target = 6
n_target_test = 3
image_size = 32

[data]
crop_size = 32

[train]
batch_size = 2
total_iterations = 10
checkpoint_every = 5

[train.backbone]
input_size = 32
depth = 2
base_channels = 4

[train.disc_enc]
width = 8
strided_layers = 1

[train.disc_dec]
width = 4
"#;

fn cfea(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cfea"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = cfea(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
        Self { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn s(&self, rel: &str) -> String {
        self.path(rel).to_string_lossy().into_owned()
    }

    fn synth(&self, out: &str) {
        ok(&["--config", &self.s("tiny.toml"), "synth", "--out", &self.s(out)]);
    }

    fn train(&self, data: &str, out: &str, extra: &[&str]) -> Output {
        let mut args = vec![
            "--config".to_string(),
            self.s("tiny.toml"),
            "train".into(),
            "--data".into(),
            self.s(data),
            "--out".into(),
            self.s(out),
        ];
        args.extend(extra.iter().map(|s| s.to_string()));
        cfea(&args.iter().map(String::as_str).collect::<Vec<_>>())
    }
}

fn log_rows(dir: &Path) -> Vec<Vec<f64>> {
    fs::read_to_string(dir.join("metrics.csv"))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect()
}

fn tree_bytes(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn print_config_emits_a_loadable_document() {
    let text = ok(&["--print-config"]);
    let f = Fixture::new();
    fs::write(f.path("dumped.toml"), &text).unwrap();
    let again = ok(&["--config", &f.s("dumped.toml"), "--print-config"]);
    assert_eq!(text, again);
    let seeded = ok(&["--seed", "9", "--print-config"]);
    assert!(seeded.contains("seed = 9"));
}

#[test]
fn synth_is_deterministic_and_validated() {
    let f = Fixture::new();
    f.synth("a");
    f.synth("b");
    for split in ["source", "target", "target_test"] {
        assert!(f.path("a").join(split).join("manifest.jsonl").exists());
    }
    assert_eq!(tree_bytes(&f.path("a")), tree_bytes(&f.path("b")));

    fs::write(f.path("bad.toml"), "[synth]\nn_source = 0\n").unwrap();
    let out = cfea(&["--config", &f.s("bad.toml"), "synth", "--out", &f.s("c")]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("n_source"));
}

#[test]
fn train_smoke_run_and_source_only_columns() {
    let f = Fixture::new();
    f.synth("data");
    let out = f.train("data", "run", &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(f.path("run/final.cfea").exists());
    assert!(f.path("run/checkpoints/ckpt_00000005.cfea").exists());
    assert_eq!(log_rows(&f.path("run")).len(), 10);

    let out = f.train("data", "so", &["--mode", "source-only"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = log_rows(&f.path("so"));
    assert_eq!(rows.len(), 10);
    for r in rows {
        assert!(r[1] > 0.0);
        assert!(r[2..8].iter().all(|&v| v == 0.0), "{r:?}");
    }
}

#[test]
fn resume_reproduces_the_straight_run() {
    let f = Fixture::new();
    f.synth("data");
    assert!(f.train("data", "straight", &[]).status.success());
    assert!(f.train("data", "part", &["--iterations", "5"]).status.success());
    let ckpt = f.s("part/final.cfea");
    let out = f.train("data", "part", &["--resume", &ckpt, "--strict"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(
        fs::read(f.path("straight/final.cfea")).unwrap(),
        fs::read(f.path("part/final.cfea")).unwrap()
    );
    assert_eq!(
        fs::read(f.path("straight/metrics.csv")).unwrap(),
        fs::read(f.path("part/metrics.csv")).unwrap()
    );
}

#[test]
fn strict_resume_refuses_a_different_config() {
    let f = Fixture::new();
    f.synth("data");
    assert!(f.train("data", "part", &["--iterations", "5"]).status.success());
    let ckpt = f.s("part/final.cfea");
    let other = f.s("other.toml");
    fs::write(&other, TINY.replace("checkpoint_every = 5", "checkpoint_every = 5\nlr_seg = 0.01"))
        .unwrap();
    let (data, out) = (f.s("data"), f.s("resumed"));
    let run = |strict: bool| {
        let mut args = vec![
            "--config", other.as_str(), "train", "--data", data.as_str(), "--out", out.as_str(),
            "--resume", ckpt.as_str(),
        ];
        if strict {
            args.push("--strict");
        }
        cfea(&args)
    };
    let refused = run(true);
    assert!(!refused.status.success());
    assert!(String::from_utf8_lossy(&refused.stderr).contains("config hash"));
    assert!(run(false).status.success());
}

#[test]
fn eval_writes_a_record_matching_the_table() {
    let f = Fixture::new();
    f.synth("data");
    assert!(f.train("data", "run", &[]).status.success());
    let printed = ok(&[
        "--config", &f.s("tiny.toml"), "eval", "--checkpoint", &f.s("run/final.cfea"),
        "--test", &f.s("data/target_test"), "--out", &f.s("eval/report.json"),
    ]);
    let rec: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(f.path("eval/report.json")).unwrap()).unwrap();
    let cup = rec["cup_dice"].as_f64().unwrap();
    let disc = rec["disc_dice"].as_f64().unwrap();
    assert!(printed.contains(&format!("{cup:.4}")));
    assert!(printed.contains(&format!("{disc:.4}")));
    assert_eq!(rec["n_samples"].as_u64(), Some(3));
    assert_eq!(fs::read_to_string(f.path("eval/report.txt")).unwrap(), printed);
}

#[test]
fn eval_errors_exit_nonzero() {
    let f = Fixture::new();
    f.synth("data");
    let missing = cfea(&[
        "eval", "--checkpoint", &f.s("nope.cfea"), "--test", &f.s("data/target_test"),
        "--out", &f.s("r.json"),
    ]);
    assert!(!missing.status.success());

    assert!(f.train("data", "run", &[]).status.success());
    fs::remove_dir_all(f.path("data/target_test/masks")).unwrap();
    let unlabeled = cfea(&[
        "--config", &f.s("tiny.toml"), "eval", "--checkpoint", &f.s("run/final.cfea"),
        "--test", &f.s("data/target_test"), "--out", &f.s("r.json"),
    ]);
    assert!(!unlabeled.status.success());
    assert!(!f.path("r.json").exists());
}

#[test]
fn report_compares_two_records() {
    let f = Fixture::new();
    let a = r#"{"cup_dice":0.70,"disc_dice":0.85,"cdr_mae":0.08,"n_samples":100,"n_cdr_excluded":0}"#;
    let b = r#"{"cup_dice":0.80,"disc_dice":0.90,"cdr_mae":0.05,"n_samples":100,"n_cdr_excluded":0}"#;
    fs::write(f.path("a.json"), a).unwrap();
    fs::write(f.path("b.json"), b).unwrap();

    let same = ok(&["report", "--source-only", &f.s("a.json"), "--cfea", &f.s("a.json"), "--out", &f.s("same")]);
    let rows: Vec<&str> = same.lines().skip(1).take(3).collect();
    assert!(rows[0].starts_with("Optic Cup"));
    assert!(rows[1].starts_with("Optic Disk"));
    assert!(rows[2].starts_with("CDR"));
    assert!(rows.iter().all(|r| r.contains("+0.0000") && !r.ends_with('*')));

    let better = ok(&["report", "--source-only", &f.s("a.json"), "--cfea", &f.s("b.json"), "--out", &f.s("cmp")]);
    let rows: Vec<&str> = better.lines().skip(1).take(3).collect();
    assert!(rows.iter().all(|r| r.ends_with('*')), "{better}");
    assert!(rows[0].contains("+0.1000"));
    assert!(rows[2].contains("-0.0300"));
    let svg = fs::read_to_string(f.path("cmp/comparison.svg")).unwrap();
    assert!(svg.starts_with("<svg"));
    assert_eq!(fs::read_to_string(f.path("cmp/comparison.txt")).unwrap(), better);

    fs::write(f.path("bad.json"), "{\"cup_dice\": 2}").unwrap();
    let out = cfea(&["report", "--source-only", &f.s("bad.json"), "--cfea", &f.s("a.json"), "--out", &f.s("x")]);
    assert!(!out.status.success());
}
