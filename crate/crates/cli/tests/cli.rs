use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_flowdistill");

fn tiny_config(out: &Path) -> String {
    format!(
        r#"{{"name":"tiny","out_dir":{out:?},"model":{{"hidden":16,"blocks":2}},
  "teacher":{{"iterations":200,"batch_size":256,"lr":0.003}},
  "store":{{"count":64,"steps":10}},
  "distill":{{"n":10,"rounds":6,"batch_size":32,"queue_capacity":64}},
  "analysis":{{"mismatches":[0,1],"seeds":2,"eval_samples":100,
    "useless":{{"samples":200}},"kd":{{"iterations":20,"pool_size":64,"windows":2}}}}}}"#
    )
}

struct Run {
    dir: TempDir,
    config: PathBuf,
}

impl Run {
    fn new() -> Self {
        Self::with_config(|s| s)
    }

    fn with_config(edit: impl FnOnce(String) -> String) -> Self {
        let dir = TempDir::new().unwrap();
        let config = dir.path().join("run.json");
        fs::write(&config, edit(tiny_config(&dir.path().join("out")))).unwrap();
        Self { dir, config }
    }

    fn out(&self) -> PathBuf {
        self.dir.path().join("out")
    }

    fn cmd(&self, args: &[&str]) -> Output {
        Command::new(BIN)
            .arg("--config")
            .arg(&self.config)
            .args(["--threads", "2"])
            .args(args)
            .env("RUST_LOG", "warn")
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> Output {
        let out = self.cmd(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        out
    }

    fn read(&self, name: &str) -> Vec<u8> {
        fs::read(self.out().join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
    }

    fn pipeline(&self) {
        self.ok(&["train-teacher"]);
        self.ok(&["synth"]);
        let inputs = (self.read("teacher.json"), self.read("store.jsonl"));
        self.ok(&["distill"]);
        self.ok(&["kd-baseline", "--mismatch", "1"]);
        self.ok(&["analyze-mismatch"]);
        let student = self.out().join("student.json");
        let trained = self.read("student.json");
        self.ok(&[
            "sample",
            "--model",
            student.to_str().unwrap(),
            "--count",
            "50",
            "--steps",
            "5",
        ]);
        self.ok(&[
            "eval",
            "--model",
            student.to_str().unwrap(),
            "--count",
            "50",
            "--steps",
            "5",
            "--label",
            "student",
        ]);
        // inputs are read, never rewritten
        assert!((self.read("teacher.json"), self.read("store.jsonl")) == inputs);
        assert!(self.read("student.json") == trained);
    }
}

const ARTIFACTS: &[&str] = &[
    "teacher.json",
    "teacher_loss.csv",
    "store.jsonl",
    "student.json",
    "heads/head_0.json",
    "distill_metrics.csv",
    "kd_student.json",
    "kd_loss.csv",
    "sweep.csv",
    "samples.csv",
    "eval.csv",
];

#[test]
fn full_pipeline_is_byte_reproducible() {
    let a = Run::new();
    let b = Run::new();
    a.pipeline();
    b.pipeline();
    for name in ARTIFACTS {
        assert!(a.read(name) == b.read(name), "{name} differs between reruns");
    }

    let samples = String::from_utf8(a.read("samples.csv")).unwrap();
    let mut lines = samples.lines();
    assert_eq!(lines.next(), Some("# nfe=5"));
    assert_eq!(lines.next(), Some("x0"));
    assert_eq!(lines.count(), 50);

    let sweep = String::from_utf8(a.read("sweep.csv")).unwrap();
    assert!(sweep.starts_with("M,seed,useless_frequency,kd_W1,accvideo_W1,endpoint_error\n"));
    assert_eq!(sweep.lines().count(), 1 + 2 * 2);

    // a different root seed changes the teacher
    let c = Run::new();
    c.ok(&["--seed", "7", "train-teacher"]);
    assert!(c.read("teacher.json") != a.read("teacher.json"));
}

#[test]
fn no_adv_flag_matches_zero_lambda_config() {
    let flag = Run::new();
    flag.ok(&["train-teacher"]);
    flag.ok(&["synth"]);
    let zero = Run::with_config(|s| s.replace(r#""rounds":6"#, r#""rounds":6,"lambda_adv":0.0"#));
    fs::create_dir_all(zero.out()).unwrap();
    for f in ["teacher.json", "store.jsonl"] {
        fs::copy(flag.out().join(f), zero.out().join(f)).unwrap();
    }
    flag.ok(&["distill", "--no-adv"]);
    zero.ok(&["distill"]);
    assert!(flag.read("student.json") == zero.read("student.json"));
    assert!(flag.read("distill_metrics.csv") == zero.read("distill_metrics.csv"));
}

#[test]
fn resumed_distillation_matches_uninterrupted_run() {
    let whole = Run::new();
    whole.ok(&["train-teacher"]);
    whole.ok(&["synth"]);
    let split = Run::new();
    fs::create_dir_all(split.out()).unwrap();
    for f in ["teacher.json", "store.jsonl"] {
        fs::copy(whole.out().join(f), split.out().join(f)).unwrap();
    }
    whole.ok(&["distill", "--checkpoint-every", "2"]);
    split.ok(&["distill", "--checkpoint-every", "2", "--halt-after", "3"]);
    assert!(!split.out().join("student.json").exists());
    assert!(split.out().join("distill_checkpoint.json").exists());
    split.ok(&["distill", "--checkpoint-every", "2", "--resume"]);
    for name in ["student.json", "heads/head_0.json", "distill_metrics.csv"] {
        assert!(whole.read(name) == split.read(name), "{name} differs after resume");
    }

    // a checkpoint from another seed is refused
    let other = split.cmd(&["--seed", "9", "distill", "--resume"]);
    assert!(!other.status.success());
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn bad_inputs_exit_nonzero_with_a_message() {
    let run = Run::new();
    let missing = run.cmd(&["sample", "--model", "/definitely/not/here.json"]);
    assert!(!missing.status.success());
    assert!(stderr(&missing).contains("not/here.json"));

    run.ok(&["train-teacher"]);
    let teacher = run.out().join("teacher.json");
    let zero = run.cmd(&["sample", "--model", teacher.to_str().unwrap(), "--count", "0"]);
    assert!(!zero.status.success());
    assert!(stderr(&zero).contains("--count"));

    let no_store = run.cmd(&["distill"]);
    assert!(!no_store.status.success());
    assert!(stderr(&no_store).contains("store.jsonl"));
}

#[test]
fn malformed_configs_name_the_offending_field() {
    let typo = Run::with_config(|s| s.replace(r#""steps":10"#, r#""stepz":10"#));
    let out = typo.cmd(&["config"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("stepz"), "{}", stderr(&out));

    let seeded = Run::with_config(|s| s.replace(r#""rounds":6"#, r#""rounds":6,"seed":3"#));
    let out = seeded.cmd(&["config"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("seed"));

    let empty = Run::with_config(|s| s.replace("[0,1]", "[]"));
    let out = empty.cmd(&["config"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("mismatch"), "{}", stderr(&out));

    let mismatched = Run::with_config(|s| s.replace(r#""n":10"#, r#""n":20"#));
    assert!(!mismatched.cmd(&["config"]).status.success());

    let fine = Run::new();
    let out = fine.ok(&["config"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains(r#""name": "tiny""#));
}
