use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use intentkd::checkpoint::load_checkpoint;
use intentkd::encoder::init_model;
use tempfile::TempDir;

const SMALL_MODEL: &str = "d_model = 16\nn_layers = 1\nn_heads = 2\nd_ff = 32\nvocab_size = 300\n";

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_intentkd"))
        .args(args)
        .output()
        .expect("spawn intentkd")
}

fn ok(args: &[&str]) -> Output {
    let o = run(args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    o
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn lines(path: &Path) -> Vec<String> {
    fs::read_to_string(path).unwrap().lines().map(String::from).collect()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    /// Synthetic data plus a small-model config file.
    fn new(gen_config: &str) -> Self {
        let dir = TempDir::new().unwrap();
        fs::write(dir.path().join("gen.toml"), gen_config).unwrap();
        fs::write(dir.path().join("model.toml"), SMALL_MODEL).unwrap();
        let f = Fixture { dir };
        ok(&[
            "gen-data",
            "--config",
            p(&f.path("gen.toml")),
            "--out",
            p(&f.path("data")),
        ]);
        f
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn pretrain(&self, out: &str, extra: &[&str]) -> PathBuf {
        let (data, model, par, o) = (
            self.path("data/lang_a.jsonl"),
            self.path("model.toml"),
            self.path("data/parallel.jsonl"),
            self.path(out),
        );
        let mut args = vec![
            "pretrain",
            "--data",
            p(&data),
            "--config",
            p(&model),
            "--out",
            p(&o),
            "--vocab-corpus",
            p(&par),
        ];
        args.extend_from_slice(extra);
        ok(&args);
        o
    }
}

const FOUR_INTENTS: &str = "n_intents = 4\ntemplates_per_intent = 5\nsamples_per_intent = 50\nseed = 3\n";

#[test]
fn gen_data_writes_three_files_and_a_manifest() {
    let f = Fixture::new(FOUR_INTENTS);
    let mut names: Vec<String> = fs::read_dir(f.path("data"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(
        names,
        ["lang_a.jsonl", "lang_b.jsonl", "manifest.json", "parallel.jsonl"]
    );
    assert_eq!(lines(&f.path("data/lang_a.jsonl")).len(), 200);
    assert_eq!(lines(&f.path("data/lang_b.jsonl")).len(), 200);
    // Header line carrying the language tags, then one line per pair.
    assert_eq!(lines(&f.path("data/parallel.jsonl")).len(), 201);
    let m = json(&f.path("data/manifest.json"));
    assert_eq!(m["subcommand"], "gen-data");
    assert_eq!(m["seed"], 3);
    assert_eq!(m["config"]["n_intents"], 4);
    assert_eq!(m["inputs"][0]["sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn gen_data_rerun_is_byte_identical() {
    let f = Fixture::new(FOUR_INTENTS);
    ok(&[
        "gen-data",
        "--config",
        p(&f.path("gen.toml")),
        "--out",
        p(&f.path("again")),
    ]);
    for name in ["lang_a.jsonl", "lang_b.jsonl", "parallel.jsonl", "manifest.json"] {
        let a = fs::read(f.path("data").join(name)).unwrap();
        let b = fs::read(f.path("again").join(name)).unwrap();
        if name == "manifest.json" {
            // Output paths differ; everything else must match.
            let strip = |s: &[u8]| String::from_utf8_lossy(s).replace("/again/", "/data/");
            assert_eq!(strip(&a), strip(&b));
        } else {
            assert_eq!(a, b, "{name}");
        }
    }
}

#[test]
fn seed_flag_overrides_the_config_file() {
    let f = Fixture::new(FOUR_INTENTS);
    ok(&[
        "gen-data",
        "--config",
        p(&f.path("gen.toml")),
        "--out",
        p(&f.path("s9")),
        "--seed",
        "9",
    ]);
    assert_eq!(json(&f.path("s9/manifest.json"))["seed"], 9);
    assert_ne!(
        fs::read(f.path("s9/lang_a.jsonl")).unwrap(),
        fs::read(f.path("data/lang_a.jsonl")).unwrap()
    );
}

#[test]
fn missing_config_exits_3_naming_the_path() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("absent.toml");
    let o = run(&["gen-data", "--config", p(&missing), "--out", p(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains(p(&missing)));
}

#[test]
fn invalid_config_exits_2() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "n_intnets = 4\n").unwrap();
    let o = run(&["gen-data", "--config", p(&cfg), "--out", p(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
    fs::write(&cfg, "n_intents = 1\n").unwrap();
    let o = run(&["gen-data", "--config", p(&cfg), "--out", p(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_data_file_exits_3() {
    let dir = TempDir::new().unwrap();
    let o = run(&[
        "pretrain",
        "--data",
        p(&dir.path().join("none.jsonl")),
        "--out",
        p(&dir.path().join("o")),
    ]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn lambda_changes_only_the_regularizer_plumbing() {
    let f = Fixture::new(FOUR_INTENTS);
    let a = f.pretrain("l0", &["--lambda", "0", "--epochs", "2"]);
    let b = f.pretrain("l1", &["--lambda", "0.1", "--epochs", "2"]);
    let reg = |dir: &Path| -> Vec<f64> {
        lines(&dir.join("metrics.jsonl"))
            .iter()
            .map(|l| {
                serde_json::from_str::<serde_json::Value>(l).unwrap()["reg_loss"]
                    .as_f64()
                    .unwrap()
            })
            .collect()
    };
    // L_reg is logged in both runs; only its weight in the objective differs.
    let (ra, rb) = (reg(&a), reg(&b));
    assert_eq!((ra.len(), rb.len()), (2, 2));
    assert_ne!(ra, rb);
    assert!(ra.iter().chain(&rb).all(|&r| r > 0.0));
    assert_ne!(
        fs::read(a.join("teacher.ikd")).unwrap(),
        fs::read(b.join("teacher.ikd")).unwrap()
    );
    assert_eq!(json(&b.join("manifest.json"))["config"]["train"]["lambda"], 0.1);
}

#[test]
fn zero_epochs_checkpoint_is_the_initialization() {
    let f = Fixture::new(FOUR_INTENTS);
    let dir = f.pretrain("e0", &["--epochs", "0", "--seed", "4"]);
    let (model, _) = load_checkpoint(&dir.join("teacher.ikd")).unwrap();
    let init = init_model(&model.config).unwrap();
    assert_eq!(model.config.seed, 4);
    assert_eq!(model.parameters(), init.parameters());
    assert_eq!(lines(&dir.join("metrics.jsonl")).len(), 0);
}

#[test]
fn four_intent_training_fits_the_train_set() {
    let f = Fixture::new(FOUR_INTENTS);
    let dir = f.pretrain("t", &["--epochs", "6"]);
    let last = lines(&dir.join("metrics.jsonl")).pop().unwrap();
    let acc = serde_json::from_str::<serde_json::Value>(&last).unwrap()["train_accuracy"]
        .as_f64()
        .unwrap();
    assert!(acc > 0.9, "train accuracy {acc}");
}

#[test]
fn flag_beats_file_for_epochs() {
    let f = Fixture::new(FOUR_INTENTS);
    fs::write(f.path("model.toml"), format!("{SMALL_MODEL}epochs = 1\n")).unwrap();
    let one = f.pretrain("one", &[]);
    let two = f.pretrain("two", &["--epochs", "2"]);
    assert_eq!(lines(&one.join("metrics.jsonl")).len(), 1);
    assert_eq!(lines(&two.join("metrics.jsonl")).len(), 2);
}

#[test]
fn distill_reports_cosines_and_is_deterministic() {
    let f = Fixture::new(FOUR_INTENTS);
    let t = f.pretrain("t", &["--epochs", "2"]);
    let teacher = t.join("teacher.ikd");
    let teacher_bytes = fs::read(&teacher).unwrap();
    let par = f.path("data/parallel.jsonl");
    let mut outs = Vec::new();
    for name in ["s1", "s2"] {
        let out = f.path(name);
        ok(&[
            "distill",
            "--teacher",
            p(&teacher),
            "--parallel",
            p(&par),
            "--out",
            p(&out),
            "--epochs",
            "3",
            "--seed",
            "2",
        ]);
        outs.push(out);
    }
    let metrics = lines(&outs[0].join("metrics.jsonl"));
    assert_eq!(metrics.len(), 3);
    for l in &metrics {
        let v: serde_json::Value = serde_json::from_str(l).unwrap();
        assert!(v["heldout_cosine"].is_f64());
    }
    let (a, b) = (json(&outs[0].join("summary.json")), json(&outs[1].join("summary.json")));
    assert_eq!(a["student_checksum"], b["student_checksum"]);
    assert_eq!(
        fs::read(outs[0].join("student.ikd")).unwrap(),
        fs::read(outs[1].join("student.ikd")).unwrap()
    );
    assert_eq!(fs::read(&teacher).unwrap(), teacher_bytes);
}

#[test]
fn mismatched_student_width_exits_2_with_both_dims() {
    let f = Fixture::new(FOUR_INTENTS);
    let t = f.pretrain("t", &["--epochs", "0"]);
    let o = run(&[
        "distill",
        "--teacher",
        p(&t.join("teacher.ikd")),
        "--parallel",
        p(&f.path("data/parallel.jsonl")),
        "--out",
        p(&f.path("s")),
        "--student-d-model",
        "24",
    ]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("24") && err.contains("16"), "{err}");
}

#[test]
fn eval_nshot_shapes_and_errors() {
    let f = Fixture::new(FOUR_INTENTS);
    let t = f.pretrain("t", &["--epochs", "1"]);
    let ckpt = t.join("teacher.ikd");
    let data = f.path("data/lang_a.jsonl");
    let out = f.path("e");
    ok(&[
        "eval-nshot",
        "--checkpoint",
        p(&ckpt),
        "--data",
        p(&data),
        "--out",
        p(&out),
        "--n-shot",
        "5",
        "--episodes",
        "50",
    ]);
    let r = json(&out.join("eval.json"));
    assert_eq!(r["accuracies"].as_array().unwrap().len(), 50);
    assert_eq!(r["n_shot"], 5);

    let o = run(&[
        "eval-nshot",
        "--checkpoint",
        p(&ckpt),
        "--data",
        p(&data),
        "--out",
        p(&f.path("e2")),
        "--n-shot",
        "60",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("[50, 50, 50, 50]"));

    let o = run(&[
        "eval-nshot",
        "--checkpoint",
        p(&ckpt),
        "--data",
        p(&data),
        "--out",
        p(&f.path("e3")),
        "--classifier",
        "tree",
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn isotropy_and_embed_outputs() {
    let f = Fixture::new(FOUR_INTENTS);
    let before = f.pretrain("t0", &["--epochs", "0"]).join("teacher.ikd");
    let after = f.pretrain("t2", &["--epochs", "2"]).join("teacher.ikd");
    let data = f.path("data/lang_b.jsonl");

    ok(&[
        "isotropy",
        "--checkpoint",
        p(&after),
        "--before",
        p(&before),
        "--data",
        p(&data),
        "--out",
        p(&f.path("iso")),
    ]);
    let r = json(&f.path("iso/isotropy.json"));
    let delta = r["delta"].as_f64().unwrap();
    assert!((delta - (r["after"]["score"].as_f64().unwrap() - r["before"]["score"].as_f64().unwrap())).abs() < 1e-15);

    ok(&[
        "isotropy",
        "--checkpoint",
        p(&after),
        "--data",
        p(&data),
        "--out",
        p(&f.path("iso1")),
    ]);
    assert!(json(&f.path("iso1/isotropy.json"))["score"].is_f64());

    ok(&[
        "embed",
        "--checkpoint",
        p(&after),
        "--data",
        p(&data),
        "--out",
        p(&f.path("emb")),
    ]);
    let emb = lines(&f.path("emb/embeddings.csv"));
    let proj = lines(&f.path("emb/projection.csv"));
    assert_eq!(emb.len() - 1, lines(&data).len());
    assert_eq!(proj.len() - 1, lines(&data).len());
    assert_eq!(proj[0], "x,y,label,language");
    assert_eq!(emb[0].split(',').count(), 2 + 16);
    assert!(proj[1].ends_with(",b"));
}

#[test]
fn unlabeled_utterances_embed_with_empty_labels() {
    let f = Fixture::new(FOUR_INTENTS);
    let ckpt = f.pretrain("t", &["--epochs", "0"]).join("teacher.ikd");
    let data = f.path("free.jsonl");
    fs::write(
        &data,
        "{\"text\": \"alpha beta\"}\n{\"text\": \"gamma\", \"lang\": \"a\"}\n{\"text\": \"delta\"}\n",
    )
    .unwrap();
    ok(&[
        "embed",
        "--checkpoint",
        p(&ckpt),
        "--data",
        p(&data),
        "--out",
        p(&f.path("emb")),
    ]);
    let proj = lines(&f.path("emb/projection.csv"));
    assert_eq!(proj.len(), 4);
    assert!(proj[2].ends_with(",,a"));
}

#[test]
fn outputs_never_overwrite_inputs() {
    let f = Fixture::new(FOUR_INTENTS);
    let ckpt = f.pretrain("t", &["--epochs", "0"]).join("teacher.ikd");
    fs::copy(f.path("data/lang_a.jsonl"), f.path("t/embeddings.csv")).unwrap();
    let before = fs::read(f.path("t/embeddings.csv")).unwrap();
    let o = run(&[
        "embed",
        "--checkpoint",
        p(&ckpt),
        "--data",
        p(&f.path("t/embeddings.csv")),
        "--out",
        p(&f.path("t")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(fs::read(f.path("t/embeddings.csv")).unwrap(), before);
}
