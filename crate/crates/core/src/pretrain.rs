//! Supervised fine-tuning of an encoder plus linear softmax head on the joint
//! objective `L_ce + λ·‖Σ − I‖_F`, with Σ the per-batch Pearson correlation
//! of the [CLS] embeddings.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::encoder::EncoderModel;
use crate::error::{Error, Result};
use crate::isotropy;
use crate::optim::{Adam, AdamConfig};
use crate::seed;
use crate::stats;
use crate::tensor::Tensor;
use crate::tokenizer::TokenSequence;

/// Learning rate used for fine-tuning pretrained checkpoints; training from
/// random initialization uses [`PretrainConfig::default`]'s larger rate.
pub const PRETRAINED_LEARNING_RATE: f64 = 2e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierHead {
    /// N×d.
    pub weight: Tensor,
    /// N.
    pub bias: Tensor,
}

impl ClassifierHead {
    pub fn init(n_classes: usize, d: usize, seed: u64) -> Result<Self> {
        if n_classes < 2 {
            return Err(Error::InvalidData(format!(
                "classifier head needs at least 2 classes, got {n_classes}"
            )));
        }
        let mut rng = seed::stream(seed, "head-init");
        Ok(ClassifierHead {
            weight: Tensor::randn(&[n_classes, d], 1.0 / (d as f64).sqrt(), &mut rng),
            bias: Tensor::zeros(&[n_classes]),
        })
    }

    pub fn n_classes(&self) -> usize {
        self.weight.rows()
    }

    /// `E·Wᵀ + b`.
    pub fn logits(&self, e: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let (ev, w, b) = (
            g.constant(e.clone()),
            g.constant(self.weight.clone()),
            g.constant(self.bias.clone()),
        );
        let out = head_logits(&mut g, ev, w, b)?;
        Ok(g.value(out).clone())
    }

    pub fn predict(&self, e: &Tensor) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.logits(e)?))
    }
}

pub(crate) fn head_logits(g: &mut Graph, e: Var, w: Var, b: Var) -> Result<Var> {
    let z = g.matmul_nt(e, w)?;
    g.add_row(z, b)
}

/// Index of the largest entry per row; ties go to the lowest index.
pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    (0..t.rows())
        .map(|i| {
            let row = t.row(i);
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

pub fn cross_entropy_loss(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    g.cross_entropy(logits, labels)
}

pub fn cor_reg_loss(g: &mut Graph, e: Var) -> Result<Var> {
    let sigma = g.pearson_correlation(e)?;
    g.frobenius_distance_to_identity(sigma)
}

/// `L_ce + λ·L_reg`; with λ = 0 the cross-entropy node itself is returned.
pub fn joint_loss(g: &mut Graph, logits: Var, labels: &[usize], e: Var, lambda: f64) -> Result<Var> {
    let ce = cross_entropy_loss(g, logits, labels)?;
    if lambda == 0.0 {
        return Ok(ce);
    }
    let reg = cor_reg_loss(g, e)?;
    let reg = g.scale(reg, lambda)?;
    g.add(ce, reg)
}

/// Detached value helpers.
pub fn cross_entropy_value(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut g = Graph::new();
    let z = g.constant(logits.clone());
    let l = cross_entropy_loss(&mut g, z, labels)?;
    Ok(g.value(l).item())
}

pub fn cor_reg_value(e: &Tensor) -> Result<f64> {
    stats::frobenius_distance_to_identity(&stats::pearson_correlation(e)?)
}

pub fn joint_loss_value(logits: &Tensor, labels: &[usize], e: &Tensor, lambda: f64) -> Result<f64> {
    let mut g = Graph::new();
    let (z, ev) = (g.constant(logits.clone()), g.constant(e.clone()));
    let l = joint_loss(&mut g, z, labels, ev, lambda)?;
    Ok(g.value(l).item())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub lambda: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            lambda: 0.1,
            learning_rate: 1e-3,
            batch_size: 16,
            epochs: 12,
            seed: 0,
            adam: AdamConfig::default(),
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 || (self.lambda > 0.0 && self.batch_size < 2) {
            return Err(Error::InvalidConfig(format!(
                "batch_size must be >= 2 when lambda > 0, got {}",
                self.batch_size
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub ce_loss: f64,
    pub reg_loss: f64,
    pub joint_loss: f64,
    pub train_accuracy: f64,
    pub isotropy: f64,
    pub mean_abs_correlation: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub epochs: Vec<EpochMetrics>,
}

impl TrainingReport {
    /// One JSON object per epoch.
    pub fn to_jsonl(&self) -> String {
        self.epochs
            .iter()
            .map(|e| serde_json::to_string(e).expect("metrics serialize") + "\n")
            .collect()
    }

    pub fn last(&self) -> Option<&EpochMetrics> {
        self.epochs.last()
    }
}

/// Number of classes implied by dense labels; errors on gaps.
pub fn dense_class_count(labels: &[usize]) -> Result<usize> {
    let n = labels.iter().max().map_or(0, |m| m + 1);
    let mut seen = vec![false; n];
    labels.iter().for_each(|&l| seen[l] = true);
    if let Some(gap) = seen.iter().position(|s| !s) {
        return Err(Error::InvalidData(format!(
            "label ids must be dense 0..{n}; id {gap} is unused"
        )));
    }
    Ok(n)
}

/// Shuffled mini-batches for one epoch. A trailing batch of one row is
/// dropped when the correlation term needs two.
fn epoch_batches(n: usize, batch_size: usize, lambda: f64, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::indexed_stream(seed, "pretrain-shuffle", epoch as u64));
    order
        .chunks(batch_size)
        .filter(|c| !(lambda > 0.0 && c.len() < 2))
        .map(<[usize]>::to_vec)
        .collect()
}

struct StepLosses {
    ce: f64,
    reg: Option<f64>,
    joint: f64,
}

fn train_step(
    encoder: &mut EncoderModel,
    head: &mut ClassifierHead,
    opt: &mut Adam,
    batch: &[TokenSequence],
    labels: &[usize],
    lambda: f64,
) -> Result<StepLosses> {
    let mut g = Graph::new();
    let bound = encoder.bind(&mut g);
    let w = g.param(head.weight.clone());
    let b = g.param(head.bias.clone());
    let e = encoder.forward(&mut g, &bound, batch)?;
    let logits = head_logits(&mut g, e, w, b)?;
    let loss = joint_loss(&mut g, logits, labels, e, lambda)?;
    let ce = if lambda == 0.0 {
        g.value(loss).item()
    } else {
        cross_entropy_value(g.value(logits), labels)?
    };
    let reg = if batch.len() >= 2 {
        Some(cor_reg_value(g.value(e))?)
    } else {
        None
    };
    let joint = g.value(loss).item();

    let grads = g.backward(loss)?;
    let mut gr: Vec<Tensor> = bound
        .vars()
        .iter()
        .zip(encoder.parameters())
        .map(|(v, p)| grads.get_or_zeros(*v, p))
        .collect();
    gr.push(grads.get_or_zeros(w, &head.weight));
    gr.push(grads.get_or_zeros(b, &head.bias));

    let mut params: Vec<&mut Tensor> = encoder.parameters_mut().iter_mut().collect();
    params.push(&mut head.weight);
    params.push(&mut head.bias);
    opt.step(&mut params, &gr)?;
    Ok(StepLosses { ce, reg, joint })
}

fn epoch_summary(
    encoder: &EncoderModel,
    head: &ClassifierHead,
    data: &[TokenSequence],
    labels: &[usize],
) -> Result<(f64, f64, f64)> {
    let e = encoder.encode(data)?;
    let pred = head.predict(&e)?;
    let acc = pred.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64;
    let rep = isotropy::isotropy_report(&e)?;
    Ok((acc, rep.score, rep.mean_abs_correlation))
}

/// Fine-tunes `encoder` and a fresh head on `(data, labels)`.
pub fn train_supervised(
    encoder: &EncoderModel,
    data: &[TokenSequence],
    labels: &[usize],
    config: &PretrainConfig,
) -> Result<(EncoderModel, ClassifierHead, TrainingReport)> {
    config.validate()?;
    if data.len() != labels.len() {
        return Err(Error::shape(
            "train_supervised",
            format!("{} sequences, {} labels", data.len(), labels.len()),
        ));
    }
    let n_classes = dense_class_count(labels)?;
    if n_classes < 2 {
        return Err(Error::InvalidData(format!(
            "supervised training needs at least 2 classes, got {n_classes}"
        )));
    }
    if data.len() < config.batch_size {
        return Err(Error::InvalidData(format!(
            "dataset of {} is smaller than batch_size {}",
            data.len(),
            config.batch_size
        )));
    }
    let mut encoder = encoder.clone();
    let mut head = ClassifierHead::init(n_classes, encoder.d_model(), config.seed)?;
    let mut report = TrainingReport::default();
    if config.epochs == 0 {
        return Ok((encoder, head, report));
    }

    let mut slots: Vec<&Tensor> = encoder.parameters().iter().collect();
    slots.push(&head.weight);
    slots.push(&head.bias);
    let mut opt = Adam::new(config.learning_rate, config.adam.clone(), &slots);

    for epoch in 0..config.epochs {
        let batches = epoch_batches(data.len(), config.batch_size, config.lambda, config.seed, epoch);
        let (mut ce, mut reg, mut joint, mut reg_batches) = (0.0, 0.0, 0.0, 0usize);
        for (bi, idx) in batches.iter().enumerate() {
            let seqs: Vec<TokenSequence> = idx.iter().map(|&i| data[i].clone()).collect();
            let ys: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let step =
                train_step(&mut encoder, &mut head, &mut opt, &seqs, &ys, config.lambda).map_err(|e| match e {
                    Error::NumericalInstability { op } => Error::NumericalInstability {
                        op: format!("{op} at epoch {epoch}, batch {bi}"),
                    },
                    other => other,
                })?;
            ce += step.ce;
            joint += step.joint;
            if let Some(r) = step.reg {
                reg += r;
                reg_batches += 1;
            }
        }
        let nb = batches.len().max(1) as f64;
        let (train_accuracy, iso, mac) = epoch_summary(&encoder, &head, data, labels)?;
        report.epochs.push(EpochMetrics {
            epoch,
            ce_loss: ce / nb,
            reg_loss: if reg_batches > 0 { reg / reg_batches as f64 } else { 0.0 },
            joint_loss: joint / nb,
            train_accuracy,
            isotropy: iso,
            mean_abs_correlation: mac,
        });
    }
    Ok((encoder, head, report))
}

/// Mean joint loss over consecutive batches without updating anything.
pub fn evaluate_objective(
    encoder: &EncoderModel,
    head: &ClassifierHead,
    data: &[TokenSequence],
    labels: &[usize],
    lambda: f64,
    batch_size: usize,
) -> Result<f64> {
    let e = encoder.encode(data)?;
    let mut total = 0.0;
    let mut count = 0;
    for start in (0..data.len()).step_by(batch_size.max(1)) {
        let end = (start + batch_size).min(data.len());
        if lambda > 0.0 && end - start < 2 {
            continue;
        }
        let idx: Vec<usize> = (start..end).collect();
        let eb = e.select_rows(&idx);
        let logits = head.logits(&eb)?;
        total += joint_loss_value(&logits, &labels[start..end], &eb, lambda)?;
        count += 1;
    }
    Ok(total / count.max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_ln_n() {
        let v = cross_entropy_value(&Tensor::zeros(&[3, 4]), &[0, 1, 3]).unwrap();
        assert!((v - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_is_near_zero() {
        let z = Tensor::matrix(1, 2, vec![10.0, -10.0]).unwrap();
        let v = cross_entropy_value(&z, &[0]).unwrap();
        assert!(v > 0.0 && (v - 2.061e-9).abs() < 1e-11, "{v}");
    }

    #[test]
    fn cor_reg_cases() {
        let perfect = Tensor::from_rows(&[vec![1., 1.], vec![2., 2.], vec![3., 3.]]).unwrap();
        assert!((cor_reg_value(&perfect).unwrap() - 2f64.sqrt()).abs() < 1e-12);
        let uncorrelated = Tensor::from_rows(&[vec![1., 1.], vec![1., -1.], vec![-1., 1.], vec![-1., -1.]]).unwrap();
        assert!(cor_reg_value(&uncorrelated).unwrap().abs() < 1e-12);
        assert!(matches!(
            cor_reg_value(&Tensor::zeros(&[1, 2])),
            Err(Error::BatchTooSmall { .. })
        ));
    }

    #[test]
    fn joint_loss_reductions() {
        let z = Tensor::matrix(4, 2, vec![0.3, -0.2, 1.0, 0.5, -0.7, 0.1, 0.0, 0.9]).unwrap();
        let labels = [0, 1, 1, 0];
        let dec = Tensor::from_rows(&[vec![1., 1.], vec![1., -1.], vec![-1., 1.], vec![-1., -1.]]).unwrap();
        let ce = cross_entropy_value(&z, &labels).unwrap();
        assert_eq!(
            joint_loss_value(&z, &labels, &dec, 0.0).unwrap().to_bits(),
            ce.to_bits()
        );
        assert!((joint_loss_value(&z, &labels, &dec, 1.0).unwrap() - ce).abs() < 1e-12);
    }

    #[test]
    fn softmax_head_argmax_is_shift_invariant() {
        let z = Tensor::matrix(2, 3, vec![0.1, 2.0, -1.0, 3.0, 3.0, 0.5]).unwrap();
        let shifted = Tensor::matrix(2, 3, z.data().iter().map(|v| v + 17.0).collect()).unwrap();
        assert_eq!(argmax_rows(&z), argmax_rows(&shifted));
    }

    #[test]
    fn label_gaps_are_rejected() {
        assert_eq!(dense_class_count(&[0, 2, 1, 1]).unwrap(), 3);
        assert!(dense_class_count(&[0, 2]).is_err());
    }

    #[test]
    fn lambda_requires_batches_of_two() {
        let cfg = PretrainConfig {
            batch_size: 1,
            ..PretrainConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = PretrainConfig {
            batch_size: 1,
            lambda: 0.0,
            ..PretrainConfig::default()
        };
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn trailing_singleton_batch_is_dropped_only_with_lambda() {
        let with = epoch_batches(5, 2, 0.1, 0, 0);
        assert_eq!(with.len(), 2);
        let without = epoch_batches(5, 2, 0.0, 0, 0);
        assert_eq!(without.len(), 3);
    }
}
