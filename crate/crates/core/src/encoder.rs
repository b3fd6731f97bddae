//! Pre-LN transformer sentence encoder with [CLS] pooling.
//!
//! Positions past a sequence's attention length take no part in the
//! computation, which is equivalent to masking them out of attention: the
//! [CLS] output never depends on pad ids.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::seed;
use crate::tensor::Tensor;
use crate::tokenizer::TokenSequence;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl EncoderConfig {
    /// Two-layer teacher shape.
    pub fn teacher(vocab_size: usize, max_len: usize, seed: u64) -> Self {
        EncoderConfig {
            vocab_size,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 128,
            max_len,
            seed,
        }
    }

    /// Same width as [`EncoderConfig::teacher`], half the depth.
    pub fn student(vocab_size: usize, max_len: usize, seed: u64) -> Self {
        EncoderConfig {
            n_layers: 1,
            ..EncoderConfig::teacher(vocab_size, max_len, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_len", self.max_len),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConfig(format!("{name} must be >= 1")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "d_model ({}) must be divisible by n_heads ({})",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size < 4 {
            return Err(Error::InvalidConfig(
                "vocab_size must cover the 4 special tokens".into(),
            ));
        }
        if self.max_len < 3 {
            return Err(Error::InvalidConfig("max_len must be >= 3".into()));
        }
        Ok(())
    }

    /// Closed-form number of scalar parameters.
    pub fn parameter_count(&self) -> usize {
        let d = self.d_model;
        let per_layer = 2 * d + 4 * (d * d + d) + 2 * d + (d * self.d_ff + self.d_ff) + (self.d_ff * d + d);
        self.vocab_size * d + self.max_len * d + self.n_layers * per_layer + 2 * d
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderModel {
    pub config: EncoderConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
}

/// Parameter positions within [`EncoderModel`]'s flat list.
#[derive(Clone, Copy, Debug)]
struct LayerIdx {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

const TOK_EMB: usize = 0;
const POS_EMB: usize = 1;
const PER_LAYER: usize = 16;

fn layer_idx(l: usize) -> LayerIdx {
    let o = 2 + l * PER_LAYER;
    LayerIdx {
        ln1_g: o,
        ln1_b: o + 1,
        wq: o + 2,
        bq: o + 3,
        wk: o + 4,
        bk: o + 5,
        wv: o + 6,
        bv: o + 7,
        wo: o + 8,
        bo: o + 9,
        ln2_g: o + 10,
        ln2_b: o + 11,
        w1: o + 12,
        b1: o + 13,
        w2: o + 14,
        b2: o + 15,
    }
}

const EMBED_STD: f64 = 0.02;

/// Parameter names and shapes in storage order.
pub fn parameter_layout(c: &EncoderConfig) -> Vec<(String, Vec<usize>)> {
    let (d, f) = (c.d_model, c.d_ff);
    let mut out = vec![
        ("tok_emb".to_string(), vec![c.vocab_size, d]),
        ("pos_emb".to_string(), vec![c.max_len, d]),
    ];
    for l in 0..c.n_layers {
        let p = |s: &str| format!("layers.{l}.{s}");
        out.extend([
            (p("ln1.gain"), vec![d]),
            (p("ln1.bias"), vec![d]),
            (p("attn.wq"), vec![d, d]),
            (p("attn.bq"), vec![d]),
            (p("attn.wk"), vec![d, d]),
            (p("attn.bk"), vec![d]),
            (p("attn.wv"), vec![d, d]),
            (p("attn.bv"), vec![d]),
            (p("attn.wo"), vec![d, d]),
            (p("attn.bo"), vec![d]),
            (p("ln2.gain"), vec![d]),
            (p("ln2.bias"), vec![d]),
            (p("ffn.w1"), vec![d, f]),
            (p("ffn.b1"), vec![f]),
            (p("ffn.w2"), vec![f, d]),
            (p("ffn.b2"), vec![d]),
        ]);
    }
    out.push(("final_ln.gain".into(), vec![d]));
    out.push(("final_ln.bias".into(), vec![d]));
    out
}

/// Seeded scaled-normal initialization.
pub fn init_model(config: &EncoderConfig) -> Result<EncoderModel> {
    config.validate()?;
    let mut rng = seed::stream(config.seed, "encoder-init");
    let residual_scale = 1.0 / (2.0 * config.n_layers as f64).sqrt();
    let layout = parameter_layout(config);
    let mut names = Vec::with_capacity(layout.len());
    let mut params = Vec::with_capacity(layout.len());
    for (name, shape) in layout {
        let t = if name.ends_with("gain") {
            let mut t = Tensor::zeros(&shape);
            t.data_mut().iter_mut().for_each(|v| *v = 1.0);
            t
        } else if shape.len() == 1 {
            Tensor::zeros(&shape)
        } else if name.ends_with("emb") {
            Tensor::randn(&shape, EMBED_STD, &mut rng)
        } else {
            let mut std = 1.0 / (shape[0] as f64).sqrt();
            if name.ends_with("wo") || name.ends_with("w2") {
                std *= residual_scale;
            }
            Tensor::randn(&shape, std, &mut rng)
        };
        names.push(name);
        params.push(t);
    }
    Ok(EncoderModel {
        config: config.clone(),
        names,
        params,
    })
}

/// Graph handles for a model's parameters.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl EncoderModel {
    pub fn from_parameters(config: EncoderConfig, params: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let layout = parameter_layout(&config);
        if layout.len() != params.len() {
            return Err(Error::InvalidData(format!(
                "expected {} parameter tensors, got {}",
                layout.len(),
                params.len()
            )));
        }
        for ((name, shape), (pname, t)) in layout.iter().zip(&params) {
            if name != pname || shape.as_slice() != t.shape() {
                return Err(Error::InvalidData(format!(
                    "parameter {pname} {:?} does not match expected {name} {shape:?}",
                    t.shape()
                )));
            }
            if !t.is_finite() {
                return Err(Error::NumericalInstability {
                    op: format!("parameter {pname}"),
                });
            }
        }
        let (names, params) = params.into_iter().unzip();
        Ok(EncoderModel { config, names, params })
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn parameters(&self) -> &[Tensor] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// FNV-1a over the little-endian parameter bytes.
    pub fn checksum(&self) -> u64 {
        let mut h = crate::checkpoint::Fnv64::new();
        for t in &self.params {
            for v in t.data() {
                h.update(&v.to_le_bytes());
            }
        }
        h.finish()
    }

    /// Inserts parameters as gradient-receiving leaves.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound {
            vars: self.params.iter().map(|t| g.param(t.clone())).collect(),
        }
    }

    /// Uses existing graph nodes as this model's parameters, in layout order.
    pub fn bind_vars(&self, vars: &[Var]) -> Result<Bound> {
        if vars.len() != self.params.len() {
            return Err(Error::shape(
                "bind_vars",
                format!("{} vars for {} parameters", vars.len(), self.params.len()),
            ));
        }
        Ok(Bound { vars: vars.to_vec() })
    }

    /// Inserts parameters as constants.
    pub fn bind_frozen(&self, g: &mut Graph) -> Bound {
        Bound {
            vars: self.params.iter().map(|t| g.constant(t.clone())).collect(),
        }
    }

    fn check_batch(&self, batch: &[TokenSequence]) -> Result<()> {
        for (i, s) in batch.iter().enumerate() {
            if s.ids.len() != self.config.max_len {
                return Err(Error::shape(
                    "encode_batch",
                    format!(
                        "sequence {i} has length {}, model expects {}",
                        s.ids.len(),
                        self.config.max_len
                    ),
                ));
            }
            if s.len == 0 || s.len > s.ids.len() {
                return Err(Error::shape(
                    "encode_batch",
                    format!("sequence {i} has attention length {}", s.len),
                ));
            }
            if let Some(bad) = s.active().iter().find(|&&id| id as usize >= self.config.vocab_size) {
                return Err(Error::shape(
                    "encode_batch",
                    format!("token id {bad} outside vocabulary of {}", self.config.vocab_size),
                ));
            }
        }
        Ok(())
    }

    /// Records the forward pass for `batch` and returns the n×d [CLS] states.
    pub fn forward(&self, g: &mut Graph, bound: &Bound, batch: &[TokenSequence]) -> Result<Var> {
        self.check_batch(batch)?;
        if batch.is_empty() {
            return Err(Error::shape("encode_batch", "empty batch"));
        }
        let p = |i: usize| bound.vars[i];
        let c = &self.config;
        let dh = c.d_model / c.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let mut tok_ids = Vec::new();
        let mut pos_ids = Vec::new();
        let mut spans = Vec::with_capacity(batch.len());
        for s in batch {
            spans.push((tok_ids.len(), s.len));
            tok_ids.extend(s.active().iter().map(|&id| id as usize));
            pos_ids.extend(0..s.len);
        }
        let cls_rows: Vec<usize> = spans.iter().map(|&(o, _)| o).collect();

        let te = g.embedding_lookup(p(TOK_EMB), &tok_ids)?;
        let pe = g.embedding_lookup(p(POS_EMB), &pos_ids)?;
        let mut x = g.add(te, pe)?;

        for l in 0..c.n_layers {
            let li = layer_idx(l);
            let last = l + 1 == c.n_layers;
            let h = g.layer_norm(x, p(li.ln1_g), p(li.ln1_b))?;
            let k = g.matmul(h, p(li.wk))?;
            let k = g.add_row(k, p(li.bk))?;
            let v = g.matmul(h, p(li.wv))?;
            let v = g.add_row(v, p(li.bv))?;
            // Only the [CLS] rows feed the output after the last layer.
            let hq = if last { g.gather(h, &cls_rows)? } else { h };
            let q = g.matmul(hq, p(li.wq))?;
            let q = g.add_row(q, p(li.bq))?;

            let mut per_seq = Vec::with_capacity(batch.len());
            for (si, &(off, len)) in spans.iter().enumerate() {
                let rows: Vec<usize> = (off..off + len).collect();
                let qs = if last { g.gather(q, &[si])? } else { g.gather(q, &rows)? };
                let ks = g.gather(k, &rows)?;
                let vs = g.gather(v, &rows)?;
                let mut heads = Vec::with_capacity(c.n_heads);
                for hd in 0..c.n_heads {
                    let (a, b) = (hd * dh, (hd + 1) * dh);
                    let qh = g.slice_cols(qs, a, b)?;
                    let kh = g.slice_cols(ks, a, b)?;
                    let vh = g.slice_cols(vs, a, b)?;
                    let scores = g.matmul_nt(qh, kh)?;
                    let scores = g.scale(scores, scale)?;
                    let attn = g.softmax_rows(scores)?;
                    heads.push(g.matmul(attn, vh)?);
                }
                per_seq.push(if heads.len() == 1 {
                    heads[0]
                } else {
                    g.concat_cols(&heads)?
                });
            }
            let attn = if per_seq.len() == 1 {
                per_seq[0]
            } else {
                g.concat_rows(&per_seq)?
            };
            let o = g.matmul(attn, p(li.wo))?;
            let o = g.add_row(o, p(li.bo))?;
            let resid = if last { g.gather(x, &cls_rows)? } else { x };
            x = g.add(resid, o)?;

            let h2 = g.layer_norm(x, p(li.ln2_g), p(li.ln2_b))?;
            let f = g.matmul(h2, p(li.w1))?;
            let f = g.add_row(f, p(li.b1))?;
            let f = g.gelu(f)?;
            let f = g.matmul(f, p(li.w2))?;
            let f = g.add_row(f, p(li.b2))?;
            x = g.add(x, f)?;
        }
        let n = self.params.len();
        g.layer_norm(x, p(n - 2), p(n - 1))
    }

    /// Inference-only embeddings, chunked across the executor.
    pub fn encode_with(&self, batch: &[TokenSequence], exec: Execution) -> Result<Tensor> {
        self.check_batch(batch)?;
        let d = self.config.d_model;
        if batch.is_empty() {
            return Ok(Tensor::zeros(&[0, d]));
        }
        const CHUNK: usize = 16;
        let chunks: Vec<&[TokenSequence]> = batch.chunks(CHUNK).collect();
        let parts = exec.try_map(&chunks, |_, chunk| {
            let mut g = Graph::new();
            let bound = self.bind_frozen(&mut g);
            let out = self.forward(&mut g, &bound, chunk)?;
            Ok::<_, Error>(g.value(out).data().to_vec())
        })?;
        let data: Vec<f64> = parts.into_iter().flatten().collect();
        Tensor::matrix(batch.len(), d, data)
    }

    pub fn encode(&self, batch: &[TokenSequence]) -> Result<Tensor> {
        self.encode_with(batch, Execution::default())
    }
}

/// Output of [`encode_batch`]: either a detached matrix or a graph node.
pub enum Encoded {
    Values(Tensor),
    Recorded { graph: Graph, bound: Bound, output: Var },
}

/// Encodes a batch; with `record_graph` the result lives in a fresh graph
/// whose parameter leaves receive gradients.
pub fn encode_batch(model: &EncoderModel, batch: &[TokenSequence], record_graph: bool) -> Result<Encoded> {
    if record_graph {
        let mut graph = Graph::new();
        let bound = model.bind(&mut graph);
        let output = model.forward(&mut graph, &bound, batch)?;
        Ok(Encoded::Recorded { graph, bound, output })
    } else {
        model.encode(batch).map(Encoded::Values)
    }
}

/// Sentence embeddings with row-aligned provenance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingBatch {
    pub embeddings: Tensor,
    pub labels: Vec<Option<String>>,
    pub langs: Vec<String>,
}

impl EmbeddingBatch {
    pub fn new(embeddings: Tensor, labels: Vec<Option<String>>, langs: Vec<String>) -> Result<Self> {
        let n = embeddings.rows();
        if labels.len() != n || langs.len() != n {
            return Err(Error::shape(
                "embedding_batch",
                format!("{n} rows, {} labels, {} langs", labels.len(), langs.len()),
            ));
        }
        Ok(EmbeddingBatch {
            embeddings,
            labels,
            langs,
        })
    }

    pub fn len(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }
}
