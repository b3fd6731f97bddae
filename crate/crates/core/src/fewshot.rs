//! N-shot episodic evaluation of a frozen embedder with a linear classifier
//! fit on each episode's support set.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::encoder::EncoderModel;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::pretrain::argmax_rows;
use crate::seed;
use crate::tensor::Tensor;
use crate::tokenizer::{tokenize_batch, Vocab};

pub const DEFAULT_EPISODES: usize = 50;

/// One sampled task. Indices point into the dataset the episode was drawn
/// from; labels are the remapped episode-local class ids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    pub n_shot: usize,
    pub support: Vec<(usize, usize)>,
    pub query: Vec<(usize, usize)>,
    /// `classes[k]` is the dataset label of episode class `k`.
    pub classes: Vec<usize>,
    /// Dataset labels dropped for having fewer than `n_shot + 1` examples.
    pub excluded: Vec<usize>,
}

impl Episode {
    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }
}

/// Samples an episode from dense labels `0..K`.
pub fn sample_episode_labels(labels: &[usize], n_shot: usize, seed: u64) -> Result<Episode> {
    if n_shot == 0 {
        return Err(Error::InvalidConfig("n_shot must be at least 1".into()));
    }
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut rng = seed::stream(seed, "episode");
    let mut ep = Episode {
        n_shot,
        support: Vec::new(),
        query: Vec::new(),
        classes: Vec::new(),
        excluded: Vec::new(),
    };
    for (label, mut members) in by_class.into_iter().enumerate() {
        if members.len() < n_shot + 1 {
            if !members.is_empty() {
                ep.excluded.push(label);
            }
            continue;
        }
        let local = ep.classes.len();
        ep.classes.push(label);
        members.shuffle(&mut rng);
        ep.support.extend(members[..n_shot].iter().map(|&i| (i, local)));
        ep.query.extend(members[n_shot..].iter().map(|&i| (i, local)));
    }
    if ep.classes.is_empty() {
        let mut counts = vec![0usize; k];
        labels.iter().for_each(|&l| counts[l] += 1);
        return Err(Error::InvalidData(format!(
            "no class has the {} examples a {n_shot}-shot episode needs; per-class counts {counts:?}",
            n_shot + 1
        )));
    }
    Ok(ep)
}

pub fn sample_episode(dataset: &LabeledDataset, n_shot: usize, seed: u64) -> Result<Episode> {
    sample_episode_labels(&dataset.labels, n_shot, seed)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassifierKind {
    #[default]
    Logistic,
    Hinge,
}

impl std::str::FromStr for ClassifierKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logistic" => Ok(ClassifierKind::Logistic),
            "hinge" | "svm" => Ok(ClassifierKind::Hinge),
            other => Err(Error::InvalidConfig(format!("unknown classifier kind {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub kind: ClassifierKind,
    pub epochs: usize,
    pub learning_rate: f64,
    pub l2: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            kind: ClassifierKind::Logistic,
            epochs: 200,
            learning_rate: 0.5,
            l2: 1e-3,
        }
    }
}

impl ClassifierConfig {
    pub fn hinge() -> Self {
        ClassifierConfig {
            kind: ClassifierKind::Hinge,
            learning_rate: 0.1,
            ..Default::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearClassifier {
    pub kind: ClassifierKind,
    /// K×d.
    pub weight: Tensor,
    /// K.
    pub bias: Tensor,
    pub config: ClassifierConfig,
}

impl LinearClassifier {
    pub fn n_classes(&self) -> usize {
        self.weight.rows()
    }

    /// m×K decision scores.
    pub fn scores(&self, e: &Tensor) -> Result<Tensor> {
        if e.cols() != self.weight.cols() {
            return Err(Error::shape(
                "LinearClassifier::scores",
                format!("embedding dim {} vs weight dim {}", e.cols(), self.weight.cols()),
            ));
        }
        let (m, d, k) = (e.rows(), e.cols(), self.n_classes());
        let mut out = vec![0.0; m * k];
        crate::tensor::matmul_nt_into(e.data(), self.weight.data(), &mut out, m, d, k);
        for r in out.chunks_mut(k) {
            r.iter_mut().zip(self.bias.data()).for_each(|(o, b)| *o += b);
        }
        Tensor::matrix(m, k, out)
    }

    pub fn predict(&self, e: &Tensor) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.scores(e)?))
    }
}

/// Fits on `support` (m×d) with labels in `0..K`. Inputs are divided by
/// their RMS row norm during fitting and the scale is folded back into the
/// weights, so rescaling every embedding by one constant leaves predictions
/// unchanged.
pub fn fit_linear_classifier(
    support: &Tensor,
    labels: &[usize],
    config: &ClassifierConfig,
) -> Result<LinearClassifier> {
    let (m, d) = (support.rows(), support.cols());
    if labels.len() != m {
        return Err(Error::shape(
            "fit_linear_classifier",
            format!("{m} rows but {} labels", labels.len()),
        ));
    }
    let k = labels.iter().max().map_or(0, |x| x + 1);
    if k < 2 || labels.iter().collect::<std::collections::BTreeSet<_>>().len() < 2 {
        return Err(Error::InvalidData(
            "classifier needs at least 2 classes in the support set".into(),
        ));
    }
    if !(config.learning_rate > 0.0) || !(config.l2 >= 0.0) {
        return Err(Error::InvalidConfig(
            "learning_rate must be positive and l2 non-negative".into(),
        ));
    }
    let ms = support.data().iter().map(|v| v * v).sum::<f64>() / m as f64;
    let scale = if ms > 0.0 { ms.sqrt() } else { 1.0 };
    let x: Vec<f64> = support.data().iter().map(|v| v / scale).collect();

    let mut w = vec![0.0; k * d];
    let mut b = vec![0.0; k];
    let mut s = vec![0.0; m * k];
    let mut gs = vec![0.0; m * k];
    let lr = config.learning_rate;
    for _ in 0..config.epochs {
        crate::tensor::matmul_nt_into(&x, &w, &mut s, m, d, k);
        for r in s.chunks_mut(k) {
            r.iter_mut().zip(&b).for_each(|(o, bb)| *o += bb);
        }
        match config.kind {
            ClassifierKind::Logistic => {
                for (i, r) in s.chunks(k).enumerate() {
                    let mx = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = r.iter().map(|v| (v - mx).exp()).sum();
                    for c in 0..k {
                        let p = (r[c] - mx).exp() / z;
                        gs[i * k + c] = (p - if labels[i] == c { 1.0 } else { 0.0 }) / m as f64;
                    }
                }
            }
            ClassifierKind::Hinge => {
                for (i, r) in s.chunks(k).enumerate() {
                    for c in 0..k {
                        let y = if labels[i] == c { 1.0 } else { -1.0 };
                        gs[i * k + c] = if y * r[c] < 1.0 { -y / m as f64 } else { 0.0 };
                    }
                }
            }
        }
        let mut gw = vec![0.0; k * d];
        crate::tensor::matmul_tn_acc(&gs, &x, &mut gw, m, k, d);
        for (wi, gi) in w.iter_mut().zip(&gw) {
            *wi -= lr * (gi + 2.0 * config.l2 * *wi);
        }
        for c in 0..k {
            let gb: f64 = (0..m).map(|i| gs[i * k + c]).sum();
            b[c] -= lr * gb;
        }
    }
    w.iter_mut().for_each(|v| *v /= scale);
    if w.iter().chain(&b).any(|v| !v.is_finite()) {
        return Err(Error::NumericalInstability {
            op: "fit_linear_classifier".into(),
        });
    }
    Ok(LinearClassifier {
        kind: config.kind,
        weight: Tensor::matrix(k, d, w)?,
        bias: Tensor::new(vec![k], b)?,
        config: config.clone(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub n_shot: usize,
    pub episodes: usize,
    pub seed: u64,
    pub classifier: ClassifierConfig,
    #[serde(skip)]
    pub execution: Execution,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_shot: 5,
            episodes: DEFAULT_EPISODES,
            seed: 0,
            classifier: ClassifierConfig::default(),
            execution: Execution::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub accuracies: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation of `accuracies`.
    pub std: f64,
    pub n_shot: usize,
    pub episodes: usize,
    pub seed: u64,
}

impl EvalResult {
    pub fn from_accuracies(accuracies: Vec<f64>, n_shot: usize, seed: u64) -> Self {
        let n = accuracies.len().max(1) as f64;
        let mean = accuracies.iter().sum::<f64>() / n;
        let var = accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
        EvalResult {
            episodes: accuracies.len(),
            accuracies,
            mean,
            std: var.sqrt(),
            n_shot,
            seed,
        }
    }
}

/// Query accuracy of one episode over precomputed embeddings.
pub fn run_episode(embeddings: &Tensor, episode: &Episode, classifier: &ClassifierConfig) -> Result<f64> {
    let (si, sl): (Vec<usize>, Vec<usize>) = episode.support.iter().cloned().unzip();
    let (qi, ql): (Vec<usize>, Vec<usize>) = episode.query.iter().cloned().unzip();
    let clf = fit_linear_classifier(&embeddings.select_rows(&si), &sl, classifier)?;
    let pred = clf.predict(&embeddings.select_rows(&qi))?;
    let hits = pred.iter().zip(&ql).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / ql.len() as f64)
}

/// Episode `i` is sampled with seed `config.seed + i`.
pub fn evaluate_embeddings(embeddings: &Tensor, labels: &[usize], config: &EvalConfig) -> Result<EvalResult> {
    if embeddings.rows() != labels.len() {
        return Err(Error::shape(
            "evaluate_embeddings",
            format!("{} embeddings but {} labels", embeddings.rows(), labels.len()),
        ));
    }
    if config.episodes == 0 {
        return Err(Error::InvalidConfig("episodes must be at least 1".into()));
    }
    let idx: Vec<u64> = (0..config.episodes as u64).collect();
    let accs = config.execution.try_map(&idx, |_, &i| {
        let ep = sample_episode_labels(labels, config.n_shot, config.seed.wrapping_add(i))?;
        run_episode(embeddings, &ep, &config.classifier)
    })?;
    Ok(EvalResult::from_accuracies(accs, config.n_shot, config.seed))
}

/// Embeds `dataset` once with the frozen `embedder`, then runs the episodes.
pub fn evaluate_nshot(
    embedder: &EncoderModel,
    vocab: &Vocab,
    dataset: &LabeledDataset,
    config: &EvalConfig,
) -> Result<EvalResult> {
    let seqs = tokenize_batch(&dataset.texts(), vocab, embedder.config.max_len);
    let e = embedder.encode_with(&seqs, config.execution)?;
    evaluate_embeddings(&e, &dataset.labels, config)
}
