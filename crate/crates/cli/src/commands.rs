use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::Serialize;

use intentkd::checkpoint::{load_checkpoint, save_checkpoint};
use intentkd::data::{
    load_labeled_jsonl, load_parallel_jsonl, load_utterances_jsonl, write_labeled_jsonl, write_parallel_jsonl,
    Utterance,
};
use intentkd::distill::{train_distill, DistillConfig};
use intentkd::encoder::{init_model, EmbeddingBatch, EncoderConfig, EncoderModel};
use intentkd::fewshot::{evaluate_nshot, ClassifierConfig, ClassifierKind, EvalConfig, DEFAULT_EPISODES};
use intentkd::isotropy::{compare_isotropy, isotropy_report, projection_2d};
use intentkd::pretrain::{train_supervised, PretrainConfig};
use intentkd::synth::{generate_synthetic_corpus, SyntheticConfig, LANG_A, LANG_B};
use intentkd::tokenizer::{build_vocab, tokenize_batch, Vocab, DEFAULT_MAX_LEN};
use intentkd::Tensor;

use crate::config::{self, pick};
use crate::manifest::{prepare_out_dir, RunManifest};
use crate::{CliError, CliResult, OutDir};

const DEFAULT_VOCAB_SIZE: usize = 600;

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> CliResult<()> {
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

fn to_json<T: Serialize>(v: &T) -> CliResult<String> {
    let mut s = serde_json::to_string_pretty(v).map_err(|e| CliError::Validation(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

/// Refuses output locations that would overwrite an input.
fn guard_inputs(out: &Path, outputs: &[&str], inputs: &[&Path]) -> CliResult<()> {
    let inputs: Vec<PathBuf> = inputs.iter().filter_map(|p| fs::canonicalize(p).ok()).collect();
    for name in outputs.iter().copied().chain([crate::manifest::FILE_NAME]) {
        if let Ok(target) = fs::canonicalize(out.join(name)) {
            if inputs.contains(&target) {
                return Err(CliError::Validation(format!(
                    "output {} would overwrite an input file",
                    target.display()
                )));
            }
        }
    }
    Ok(())
}

/// Validates the output location and writes the manifest.
fn start_run<C: Serialize>(
    subcommand: &str,
    seed: u64,
    config: &C,
    inputs: &[&Path],
    out: &Path,
    outputs: &[&str],
) -> CliResult<()> {
    guard_inputs(out, outputs, inputs)?;
    prepare_out_dir(out)?;
    let paths: Vec<String> = outputs.iter().map(|o| out.join(o).display().to_string()).collect();
    let names: Vec<&str> = paths.iter().map(String::as_str).collect();
    RunManifest::new(subcommand, seed, config, inputs, &names)?.write(out)?;
    Ok(())
}

fn load_model(path: &Path) -> CliResult<(EncoderModel, Vocab)> {
    Ok(load_checkpoint(path)?)
}

fn embed_utterances(model: &EncoderModel, vocab: &Vocab, utterances: &[Utterance]) -> CliResult<EmbeddingBatch> {
    let texts: Vec<&str> = utterances.iter().map(|u| u.text.as_str()).collect();
    let seqs = tokenize_batch(&texts, vocab, model.config.max_len);
    let e = model.encode(&seqs)?;
    Ok(EmbeddingBatch::new(
        e,
        utterances.iter().map(|u| u.label.clone()).collect(),
        utterances.iter().map(|u| u.lang.clone()).collect(),
    )?)
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// TOML file with generator settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub out: OutDir,
    #[arg(long)]
    pub seed: Option<u64>,
}

pub fn gen_data(a: GenDataArgs) -> CliResult<()> {
    let f: config::GenDataFile = config::load(a.config.as_deref())?;
    let d = SyntheticConfig::default();
    let cfg = SyntheticConfig {
        n_intents: pick(None, f.n_intents, d.n_intents),
        templates_per_intent: pick(None, f.templates_per_intent, d.templates_per_intent),
        vocab_size_per_language: pick(None, f.vocab_size_per_language, d.vocab_size_per_language),
        samples_per_intent: pick(None, f.samples_per_intent, d.samples_per_intent),
        permute_word_order: pick(None, f.permute_word_order, d.permute_word_order),
        seed: pick(a.seed, f.seed, d.seed),
        keywords_per_intent: pick(None, f.keywords_per_intent, d.keywords_per_intent),
        keyword_confusion: pick(None, f.keyword_confusion, d.keyword_confusion),
        min_template_len: pick(None, f.min_template_len, d.min_template_len),
        max_template_len: pick(None, f.max_template_len, d.max_template_len),
    };
    cfg.validate()?;
    let inputs: Vec<&Path> = a.config.as_deref().into_iter().collect();
    let outputs = ["lang_a.jsonl", "lang_b.jsonl", "parallel.jsonl"];
    let out = &a.out.out;
    start_run("gen-data", cfg.seed, &cfg, &inputs, out, &outputs)?;

    let corpus = generate_synthetic_corpus(&cfg)?;
    let mut buf = Vec::new();
    write_labeled_jsonl(&mut buf, &corpus.lang_a.utterances).expect("write to vec");
    write_bytes(&out.join(outputs[0]), &buf)?;
    buf.clear();
    write_labeled_jsonl(&mut buf, &corpus.lang_b.utterances).expect("write to vec");
    write_bytes(&out.join(outputs[1]), &buf)?;
    buf.clear();
    write_parallel_jsonl(&mut buf, &corpus.parallel).expect("write to vec");
    write_bytes(&out.join(outputs[2]), &buf)?;
    Ok(())
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    /// Labeled JSONL training set.
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub out: OutDir,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Weight of the correlation regularizer.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub vocab_size: Option<usize>,
    /// Extra JSONL files whose `text`, `src` and `tgt` fields join the
    /// vocabulary corpus. Students reuse the teacher vocabulary, so pass the
    /// parallel data here before distilling.
    #[arg(long, num_args = 1..)]
    pub vocab_corpus: Vec<PathBuf>,
}

#[derive(Serialize)]
struct PretrainResolved {
    train: PretrainConfig,
    encoder: EncoderConfig,
    vocab_size_limit: usize,
}

fn corpus_texts(path: &Path) -> CliResult<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v: serde_json::Value = serde_json::from_str(line)
            .map_err(|e| CliError::Validation(format!("{}:{}: {e}", path.display(), i + 1)))?;
        for key in ["text", "src", "tgt"] {
            if let Some(s) = v.get(key).and_then(|s| s.as_str()) {
                out.push(s.to_string());
            }
        }
    }
    Ok(out)
}

pub fn pretrain(a: PretrainArgs) -> CliResult<()> {
    let f: config::PretrainFile = config::load(a.config.as_deref())?;
    let d = PretrainConfig::default();
    let seed = pick(a.seed, f.seed, d.seed);
    let train = PretrainConfig {
        lambda: pick(a.lambda, f.lambda, d.lambda),
        learning_rate: pick(a.learning_rate, f.learning_rate, d.learning_rate),
        batch_size: pick(a.batch_size, f.batch_size, d.batch_size),
        epochs: pick(a.epochs, f.epochs, d.epochs),
        seed,
        adam: d.adam,
    };
    train.validate()?;
    let vocab_size_limit = pick(a.vocab_size, f.vocab_size, DEFAULT_VOCAB_SIZE);
    let max_len = f.max_len.unwrap_or(DEFAULT_MAX_LEN);

    let mut inputs: Vec<&Path> = vec![a.data.as_path()];
    inputs.extend(a.config.as_deref());
    inputs.extend(a.vocab_corpus.iter().map(PathBuf::as_path));

    let data = load_labeled_jsonl(&a.data)?;
    let mut texts: Vec<String> = data.texts().iter().map(|s| s.to_string()).collect();
    for p in &a.vocab_corpus {
        texts.extend(corpus_texts(p)?);
    }
    let vocab = build_vocab(&texts, vocab_size_limit)?;
    let t = EncoderConfig::teacher(vocab.len(), max_len, seed);
    let encoder = EncoderConfig {
        d_model: f.d_model.unwrap_or(t.d_model),
        n_layers: f.n_layers.unwrap_or(t.n_layers),
        n_heads: f.n_heads.unwrap_or(t.n_heads),
        d_ff: f.d_ff.unwrap_or(t.d_ff),
        ..t
    };
    encoder.validate()?;

    let outputs = ["teacher.ikd", "metrics.jsonl"];
    let out = &a.out.out;
    let resolved = PretrainResolved {
        train: train.clone(),
        encoder: encoder.clone(),
        vocab_size_limit,
    };
    start_run("pretrain", seed, &resolved, &inputs, out, &outputs)?;

    let init = init_model(&encoder)?;
    let seqs = tokenize_batch(&data.texts(), &vocab, max_len);
    let (model, _head, report) = train_supervised(&init, &seqs, &data.labels, &train)?;
    save_checkpoint(&model, &vocab, &out.join(outputs[0]))?;
    write_bytes(&out.join(outputs[1]), report.to_jsonl().as_bytes())?;
    if let Some(last) = report.last() {
        eprintln!(
            "pretrain: {} epochs, train accuracy {:.3}, isotropy {:.4}",
            report.epochs.len(),
            last.train_accuracy,
            last.isotropy
        );
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct DistillArgs {
    /// Teacher checkpoint.
    #[arg(long)]
    pub teacher: PathBuf,
    /// Parallel JSONL with `src` and `tgt` fields.
    #[arg(long)]
    pub parallel: PathBuf,
    #[command(flatten)]
    pub out: OutDir,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub student_layers: Option<usize>,
    #[arg(long)]
    pub student_d_model: Option<usize>,
    #[arg(long)]
    pub student_heads: Option<usize>,
}

#[derive(Serialize)]
struct DistillSummary {
    pairs: usize,
    initial_heldout_cosine: f64,
    final_heldout_cosine: f64,
    teacher_heldout_cosine: f64,
    initial_loss: f64,
    final_loss: f64,
    teacher_checksum: String,
    student_checksum: String,
}

pub fn distill(a: DistillArgs) -> CliResult<()> {
    let f: config::DistillFile = config::load(a.config.as_deref())?;
    let (teacher, vocab) = load_model(&a.teacher)?;
    let seed = pick(a.seed, f.seed, 0);
    let d = DistillConfig::for_teacher(&teacher.config, seed);
    let student = EncoderConfig {
        n_layers: pick(a.student_layers, f.student_layers, d.student.n_layers),
        d_model: pick(a.student_d_model, f.student_d_model, d.student.d_model),
        n_heads: pick(a.student_heads, f.student_heads, d.student.n_heads),
        d_ff: f.student_d_ff.unwrap_or(d.student.d_ff),
        ..d.student.clone()
    };
    let cfg = DistillConfig {
        learning_rate: pick(a.learning_rate, f.learning_rate, d.learning_rate),
        batch_size: pick(a.batch_size, f.batch_size, d.batch_size),
        epochs: pick(a.epochs, f.epochs, d.epochs),
        seed,
        student,
        adam: d.adam,
    };
    if cfg.student.d_model != teacher.d_model() {
        return Err(CliError::Validation(format!(
            "student d_model {} does not match teacher d_model {}",
            cfg.student.d_model,
            teacher.d_model()
        )));
    }
    cfg.student.validate()?;
    let source_lang = f.source_lang.clone().unwrap_or_else(|| LANG_A.into());
    let target_lang = f.target_lang.clone().unwrap_or_else(|| LANG_B.into());

    let mut inputs: Vec<&Path> = vec![a.teacher.as_path(), a.parallel.as_path()];
    inputs.extend(a.config.as_deref());
    let outputs = ["student.ikd", "metrics.jsonl", "summary.json"];
    let out = &a.out.out;
    start_run("distill", seed, &cfg, &inputs, out, &outputs)?;

    let corpus = load_parallel_jsonl(&a.parallel, (&source_lang, &target_lang))?;
    let (student, report) = train_distill(&teacher, &vocab, &corpus, &cfg)?;
    save_checkpoint(&student, &vocab, &out.join(outputs[0]))?;
    write_bytes(&out.join(outputs[1]), report.to_jsonl().as_bytes())?;
    let last = report.epochs.last();
    let summary = DistillSummary {
        pairs: corpus.len(),
        initial_heldout_cosine: report.initial_heldout_cosine,
        final_heldout_cosine: last.map_or(report.initial_heldout_cosine, |e| e.heldout_cosine),
        teacher_heldout_cosine: report.teacher_heldout_cosine,
        initial_loss: report.initial_loss,
        final_loss: last.map_or(report.initial_loss, |e| e.loss),
        teacher_checksum: format!("{:016x}", teacher.checksum()),
        student_checksum: format!("{:016x}", student.checksum()),
    };
    write_bytes(&out.join(outputs[2]), to_json(&summary)?.as_bytes())?;
    eprintln!(
        "distill: held-out cosine {:.4} -> {:.4} (teacher {:.4})",
        summary.initial_heldout_cosine, summary.final_heldout_cosine, summary.teacher_heldout_cosine
    );
    Ok(())
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Labeled JSONL evaluation set.
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub out: OutDir,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub n_shot: Option<usize>,
    #[arg(long)]
    pub episodes: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// `logistic` or `hinge`.
    #[arg(long)]
    pub classifier: Option<String>,
}

#[derive(Serialize)]
struct EvalResolved<'a> {
    n_shot: usize,
    episodes: usize,
    seed: u64,
    classifier: &'a ClassifierConfig,
}

pub fn eval_nshot(a: EvalArgs) -> CliResult<()> {
    let f: config::EvalFile = config::load(a.config.as_deref())?;
    let kind: ClassifierKind = match a.classifier.or(f.classifier) {
        Some(s) => s
            .parse()
            .map_err(|e: intentkd::Error| CliError::Validation(e.to_string()))?,
        None => ClassifierKind::default(),
    };
    let base = match kind {
        ClassifierKind::Hinge => ClassifierConfig::hinge(),
        ClassifierKind::Logistic => ClassifierConfig::default(),
    };
    let classifier = ClassifierConfig {
        kind,
        epochs: f.classifier_epochs.unwrap_or(base.epochs),
        learning_rate: f.classifier_learning_rate.unwrap_or(base.learning_rate),
        l2: f.l2.unwrap_or(base.l2),
    };
    let d = EvalConfig::default();
    let cfg = EvalConfig {
        n_shot: pick(a.n_shot, f.n_shot, d.n_shot),
        episodes: pick(a.episodes, f.episodes, DEFAULT_EPISODES),
        seed: pick(a.seed, f.seed, d.seed),
        classifier,
        execution: d.execution,
    };
    if cfg.n_shot == 0 || cfg.episodes == 0 {
        return Err(CliError::Validation("n_shot and episodes must be >= 1".into()));
    }

    let mut inputs: Vec<&Path> = vec![a.checkpoint.as_path(), a.data.as_path()];
    inputs.extend(a.config.as_deref());
    let outputs = ["eval.json"];
    let out = &a.out.out;
    let resolved = EvalResolved {
        n_shot: cfg.n_shot,
        episodes: cfg.episodes,
        seed: cfg.seed,
        classifier: &cfg.classifier,
    };
    start_run("eval-nshot", cfg.seed, &resolved, &inputs, out, &outputs)?;

    let (model, vocab) = load_model(&a.checkpoint)?;
    let data = load_labeled_jsonl(&a.data)?;
    let result = evaluate_nshot(&model, &vocab, &data, &cfg)?;
    write_bytes(&out.join(outputs[0]), to_json(&result)?.as_bytes())?;
    eprintln!(
        "eval-nshot: {}-shot mean accuracy {:.4} ± {:.4} over {} episodes",
        cfg.n_shot, result.mean, result.std, result.episodes
    );
    Ok(())
}

#[derive(Args, Debug)]
pub struct IsotropyArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// JSONL utterances; labels optional.
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub out: OutDir,
    /// Earlier checkpoint to compare against; adds a `delta` field.
    #[arg(long)]
    pub before: Option<PathBuf>,
}

#[derive(Serialize)]
struct NoConfig {}

pub fn isotropy(a: IsotropyArgs) -> CliResult<()> {
    let mut inputs: Vec<&Path> = vec![a.checkpoint.as_path(), a.data.as_path()];
    inputs.extend(a.before.as_deref());
    let outputs = ["isotropy.json"];
    let out = &a.out.out;
    start_run("isotropy", 0, &NoConfig {}, &inputs, out, &outputs)?;

    let utterances = load_utterances_jsonl(&a.data)?;
    let (model, vocab) = load_model(&a.checkpoint)?;
    let after = embed_utterances(&model, &vocab, &utterances)?;
    let json = match &a.before {
        Some(p) => {
            let (m, v) = load_model(p)?;
            let before = embed_utterances(&m, &v, &utterances)?;
            let c = compare_isotropy(&before, &after)?;
            eprintln!(
                "isotropy: {:.4} -> {:.4} (delta {:+.4})",
                c.before.score, c.after.score, c.delta
            );
            to_json(&c)?
        }
        None => {
            let r = isotropy_report(&after.embeddings)?;
            eprintln!("isotropy: {:.4}", r.score);
            to_json(&r)?
        }
    };
    write_bytes(&out.join(outputs[0]), json.as_bytes())
}

#[derive(Args, Debug)]
pub struct EmbedArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// JSONL utterances; labels optional.
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub out: OutDir,
}

fn csv_bytes(header: Vec<String>, rows: impl Iterator<Item = Vec<String>>) -> CliResult<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let e = |e: csv::Error| CliError::Validation(e.to_string());
    w.write_record(&header).map_err(e)?;
    for r in rows {
        w.write_record(&r).map_err(e)?;
    }
    w.into_inner().map_err(|e| CliError::Validation(e.to_string()))
}

fn row_strings(t: &Tensor, i: usize) -> impl Iterator<Item = String> + '_ {
    t.row(i).iter().map(|v| v.to_string())
}

pub fn embed(a: EmbedArgs) -> CliResult<()> {
    let inputs: Vec<&Path> = vec![a.checkpoint.as_path(), a.data.as_path()];
    let outputs = ["embeddings.csv", "projection.csv"];
    let out = &a.out.out;
    start_run("embed", 0, &NoConfig {}, &inputs, out, &outputs)?;

    let utterances = load_utterances_jsonl(&a.data)?;
    let (model, vocab) = load_model(&a.checkpoint)?;
    let batch = embed_utterances(&model, &vocab, &utterances)?;
    let proj = projection_2d(&batch.embeddings)?;
    let label = |i: usize| batch.labels[i].clone().unwrap_or_default();

    let mut header = vec!["label".to_string(), "language".to_string()];
    header.extend((0..batch.dim()).map(|k| format!("e{k}")));
    let rows = (0..batch.len()).map(|i| {
        let mut r = vec![label(i), batch.langs[i].clone()];
        r.extend(row_strings(&batch.embeddings, i));
        r
    });
    write_bytes(&out.join(outputs[0]), &csv_bytes(header, rows)?)?;

    let header = ["x", "y", "label", "language"].map(String::from).to_vec();
    let rows = (0..batch.len()).map(|i| {
        let mut r: Vec<String> = row_strings(&proj, i).collect();
        r.extend([label(i), batch.langs[i].clone()]);
        r
    });
    write_bytes(&out.join(outputs[1]), &csv_bytes(header, rows)?)?;
    eprintln!("embed: {} rows of dimension {}", batch.len(), batch.dim());
    Ok(())
}
