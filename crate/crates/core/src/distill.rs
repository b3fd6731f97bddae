//! Teacher→student embedding distillation over parallel sentence pairs.
//!
//! Per batch the frozen teacher embeds the source sentences; the student
//! embeds both sides and is pulled toward the teacher's source embedding on
//! each: `mean_j [ mse(T(s_j), S(s_j)) + mse(T(s_j), S(t_j)) ]`, with `mse`
//! averaging over dimensions.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::data::{ParallelCorpus, ParallelPair};
use crate::encoder::{init_model, EncoderConfig, EncoderModel};
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::seed;
use crate::tensor::Tensor;
use crate::tokenizer::{tokenize, TokenSequence, Vocab};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub student: EncoderConfig,
    #[serde(default)]
    pub adam: AdamConfig,
}

impl DistillConfig {
    /// Defaults with a one-layer student shaped like `teacher`.
    pub fn for_teacher(teacher: &EncoderConfig, seed: u64) -> Self {
        DistillConfig {
            learning_rate: 1e-3,
            batch_size: 16,
            epochs: 12,
            seed,
            student: EncoderConfig {
                n_layers: 1,
                seed,
                ..teacher.clone()
            },
            adam: AdamConfig::default(),
        }
    }
}

/// Graph form of the distillation objective; `teacher_src` should be a
/// constant node.
pub fn distillation_loss(g: &mut Graph, teacher_src: Var, student_src: Var, student_tgt: Var) -> Result<Var> {
    let ds = g.sub(teacher_src, student_src)?;
    let ds = g.square(ds)?;
    let ms = g.mean(ds)?;
    let dt = g.sub(teacher_src, student_tgt)?;
    let dt = g.square(dt)?;
    let mt = g.mean(dt)?;
    g.add(ms, mt)
}

pub fn distillation_loss_value(teacher_src: &Tensor, student_src: &Tensor, student_tgt: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let t = g.constant(teacher_src.clone());
    let s = g.constant(student_src.clone());
    let u = g.constant(student_tgt.clone());
    let l = distillation_loss(&mut g, t, s, u)?;
    Ok(g.value(l).item())
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Mean cosine between each pair's source and target embedding.
pub fn mean_parallel_cosine(model: &EncoderModel, vocab: &Vocab, pairs: &[ParallelPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::InvalidData("no pairs to measure".into()));
    }
    let max_len = model.config.max_len;
    let src: Vec<TokenSequence> = pairs.iter().map(|p| tokenize(&p.src, vocab, max_len)).collect();
    let tgt: Vec<TokenSequence> = pairs.iter().map(|p| tokenize(&p.tgt, vocab, max_len)).collect();
    let es = model.encode(&src)?;
    let et = model.encode(&tgt)?;
    Ok((0..pairs.len()).map(|i| cosine(es.row(i), et.row(i))).sum::<f64>() / pairs.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub heldout_cosine: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DistillReport {
    pub epochs: Vec<DistillEpoch>,
    /// Held-out parallel cosine of the freshly initialized student.
    pub initial_heldout_cosine: f64,
    /// Held-out parallel cosine of the teacher.
    pub teacher_heldout_cosine: f64,
    /// Distillation loss of the initialized student over the training pairs.
    pub initial_loss: f64,
}

impl DistillReport {
    pub fn to_jsonl(&self) -> String {
        self.epochs
            .iter()
            .map(|e| serde_json::to_string(e).expect("metrics serialize") + "\n")
            .collect()
    }
}

struct Tokenized {
    src: Vec<TokenSequence>,
    tgt: Vec<TokenSequence>,
}

fn tokenize_pairs(pairs: &[ParallelPair], vocab: &Vocab, max_len: usize) -> Tokenized {
    Tokenized {
        src: pairs.iter().map(|p| tokenize(&p.src, vocab, max_len)).collect(),
        tgt: pairs.iter().map(|p| tokenize(&p.tgt, vocab, max_len)).collect(),
    }
}

/// Mean loss over all training pairs without updating the student.
fn full_loss(student: &EncoderModel, teacher_emb: &Tensor, data: &Tokenized) -> Result<f64> {
    let s = student.encode(&data.src)?;
    let t = student.encode(&data.tgt)?;
    distillation_loss_value(teacher_emb, &s, &t)
}

pub fn train_distill(
    teacher: &EncoderModel,
    vocab: &Vocab,
    corpus: &ParallelCorpus,
    config: &DistillConfig,
) -> Result<(EncoderModel, DistillReport)> {
    if config.student.d_model != teacher.d_model() {
        return Err(Error::InvalidConfig(format!(
            "student d_model {} must equal teacher d_model {}",
            config.student.d_model,
            teacher.d_model()
        )));
    }
    if config.student.vocab_size != vocab.len() || teacher.config.vocab_size != vocab.len() {
        return Err(Error::InvalidConfig(format!(
            "teacher ({}) and student ({}) must share the {}-entry vocabulary",
            teacher.config.vocab_size,
            config.student.vocab_size,
            vocab.len()
        )));
    }
    if config.batch_size == 0 || !(config.learning_rate > 0.0) {
        return Err(Error::InvalidConfig(
            "batch_size and learning_rate must be positive".into(),
        ));
    }
    let mut student = init_model(&config.student)?;
    let (train_pairs, held_pairs) = corpus.split_heldout();
    let held = if held_pairs.is_empty() { train_pairs } else { held_pairs };

    let teacher_cos = mean_parallel_cosine(teacher, vocab, held)?;
    let initial_cos = mean_parallel_cosine(&student, vocab, held)?;
    let mut report = DistillReport {
        epochs: Vec::new(),
        initial_heldout_cosine: initial_cos,
        teacher_heldout_cosine: teacher_cos,
        initial_loss: 0.0,
    };
    if config.epochs == 0 {
        return Ok((student, report));
    }

    let data = tokenize_pairs(train_pairs, vocab, config.student.max_len);
    if teacher.config.max_len != config.student.max_len {
        return Err(Error::InvalidConfig("teacher and student max_len differ".into()));
    }
    let teacher_emb = teacher.encode(&data.src)?;
    report.initial_loss = full_loss(&student, &teacher_emb, &data)?;

    let slots: Vec<&Tensor> = student.parameters().iter().collect();
    let mut opt = Adam::new(config.learning_rate, config.adam.clone(), &slots);
    let n = data.src.len();
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut seed::indexed_stream(config.seed, "distill-shuffle", epoch as u64));
        let mut total = 0.0;
        let mut batches = 0;
        for (bi, idx) in order.chunks(config.batch_size).enumerate() {
            let mut batch: Vec<TokenSequence> = idx.iter().map(|&i| data.src[i].clone()).collect();
            batch.extend(idx.iter().map(|&i| data.tgt[i].clone()));
            let target = teacher_emb.select_rows(idx);

            let mut g = Graph::new();
            let bound = student.bind(&mut g);
            let out = student.forward(&mut g, &bound, &batch)?;
            let m = idx.len();
            let src_rows: Vec<usize> = (0..m).collect();
            let tgt_rows: Vec<usize> = (m..2 * m).collect();
            let ss = g.gather(out, &src_rows)?;
            let st = g.gather(out, &tgt_rows)?;
            let t = g.constant(target);
            let loss = distillation_loss(&mut g, t, ss, st).map_err(|e| match e {
                Error::NumericalInstability { op } => Error::NumericalInstability {
                    op: format!("{op} at epoch {epoch}, batch {bi}"),
                },
                other => other,
            })?;
            total += g.value(loss).item();
            batches += 1;
            let grads = g.backward(loss)?;
            let gr: Vec<Tensor> = bound
                .vars()
                .iter()
                .zip(student.parameters())
                .map(|(v, p)| grads.get_or_zeros(*v, p))
                .collect();
            let mut params: Vec<&mut Tensor> = student.parameters_mut().iter_mut().collect();
            opt.step(&mut params, &gr)?;
        }
        report.epochs.push(DistillEpoch {
            epoch,
            loss: total / batches as f64,
            heldout_cosine: mean_parallel_cosine(&student, vocab, held)?,
        });
    }
    Ok((student, report))
}

/// Loss of `student` against `teacher` over every pair of `corpus`.
pub fn corpus_distillation_loss(
    teacher: &EncoderModel,
    student: &EncoderModel,
    vocab: &Vocab,
    pairs: &[ParallelPair],
) -> Result<f64> {
    let data = tokenize_pairs(pairs, vocab, student.config.max_len);
    let t = teacher.encode(&data.src)?;
    full_loss(student, &t, &data)
}
