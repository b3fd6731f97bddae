#![allow(dead_code)]

use intentkd::encoder::{parameter_layout, EncoderConfig, EncoderModel};
use intentkd::tensor::Tensor;
use intentkd::tokenizer::{build_vocab, tokenize, TokenSequence, Vocab};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut r = rng(seed);
    Tensor::matrix(
        rows,
        cols,
        (0..rows * cols).map(|_| r.random_range(-2.0..2.0)).collect(),
    )
    .unwrap()
}

/// Model with every parameter (gains and biases included) drawn at random.
pub fn random_model(config: &EncoderConfig, scale: f64, seed: u64) -> EncoderModel {
    let mut r = rng(seed);
    let params = parameter_layout(config)
        .into_iter()
        .map(|(name, shape)| {
            let n: usize = shape.iter().product();
            let base = if name.ends_with("gain") { 1.0 } else { 0.0 };
            let data = (0..n).map(|_| base + scale * r.random_range(-1.0..1.0)).collect();
            (name, Tensor::new(shape, data).unwrap())
        })
        .collect();
    EncoderModel::from_parameters(config.clone(), params).unwrap()
}

pub fn tiny_config(
    vocab_size: usize,
    d: usize,
    layers: usize,
    heads: usize,
    max_len: usize,
    seed: u64,
) -> EncoderConfig {
    EncoderConfig {
        vocab_size,
        d_model: d,
        n_layers: layers,
        n_heads: heads,
        d_ff: 2 * d,
        max_len,
        seed,
    }
}

pub const TINY_CORPUS: &[&str] = &[
    "book a table for two",
    "cancel my order please",
    "where is my parcel",
    "play some jazz music",
    "reserva una mesa para dos",
    "cancela mi pedido",
    "dónde está mi paquete",
    "pon música de jazz",
];

pub fn tiny_vocab() -> Vocab {
    build_vocab(TINY_CORPUS, 64).unwrap()
}

pub fn tiny_batch(vocab: &Vocab, max_len: usize, n: usize) -> Vec<TokenSequence> {
    TINY_CORPUS
        .iter()
        .cycle()
        .take(n)
        .map(|t| tokenize(t, vocab, max_len))
        .collect()
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns
/// eigenvalues descending with matching unit eigenvectors.
pub fn jacobi_eigen(m: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = m.len();
    let mut a: Vec<Vec<f64>> = m.to_vec();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        if off < 1e-26 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let (vp, vq) = (row[p], row[q]);
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j][j].partial_cmp(&a[i][i]).unwrap());
    let values = order.iter().map(|&i| a[i][i]).collect();
    let vectors = order.iter().map(|&i| (0..n).map(|k| v[k][i]).collect()).collect();
    (values, vectors)
}

/// Textbook covariance with the 1/n estimator.
pub fn covariance_oracle(e: &Tensor) -> Vec<Vec<f64>> {
    let (n, d) = (e.rows(), e.cols());
    let mean: Vec<f64> = (0..d)
        .map(|j| (0..n).map(|i| e.get(i, j)).sum::<f64>() / n as f64)
        .collect();
    (0..d)
        .map(|a| {
            (0..d)
                .map(|b| {
                    (0..n)
                        .map(|i| (e.get(i, a) - mean[a]) * (e.get(i, b) - mean[b]))
                        .sum::<f64>()
                        / n as f64
                })
                .collect()
        })
        .collect()
}

fn ln(row: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = row.len() as f64;
    let mu = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / n;
    row.iter()
        .enumerate()
        .map(|(j, x)| (x - mu) / (var + 1e-5).sqrt() * g[j] + b[j])
        .collect()
}

fn affine(x: &[f64], w: &Tensor, b: &[f64]) -> Vec<f64> {
    let (din, dout) = (w.rows(), w.cols());
    (0..dout)
        .map(|o| b[o] + (0..din).map(|i| x[i] * w.get(i, o)).sum::<f64>())
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// Straight-line pre-LN transformer over every position of one sequence;
/// returns the final-normalized [CLS] state.
pub fn naive_forward(model: &EncoderModel, seq: &TokenSequence) -> Vec<f64> {
    let c = &model.config;
    let get = |name: &str| -> &Tensor {
        let i = model.names().iter().position(|n| n == name).unwrap();
        &model.parameters()[i]
    };
    let len = seq.len;
    let d = c.d_model;
    let dh = d / c.n_heads;
    let mut x: Vec<Vec<f64>> = (0..len)
        .map(|t| {
            let tok = get("tok_emb").row(seq.ids[t] as usize);
            let pos = get("pos_emb").row(t);
            tok.iter().zip(pos).map(|(a, b)| a + b).collect()
        })
        .collect();
    for l in 0..c.n_layers {
        let p = |s: &str| format!("layers.{l}.{s}");
        let h: Vec<Vec<f64>> = x
            .iter()
            .map(|r| ln(r, get(&p("ln1.gain")).data(), get(&p("ln1.bias")).data()))
            .collect();
        let proj = |w: &str, b: &str| -> Vec<Vec<f64>> {
            h.iter().map(|r| affine(r, get(&p(w)), get(&p(b)).data())).collect()
        };
        let (q, k, v) = (
            proj("attn.wq", "attn.bq"),
            proj("attn.wk", "attn.bk"),
            proj("attn.wv", "attn.bv"),
        );
        let mut ctx = vec![vec![0.0; d]; len];
        for hd in 0..c.n_heads {
            for i in 0..len {
                let scores: Vec<f64> = (0..len)
                    .map(|j| (0..dh).map(|u| q[i][hd * dh + u] * k[j][hd * dh + u]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s - mx).exp()).sum();
                for j in 0..len {
                    let a = (scores[j] - mx).exp() / z;
                    for u in 0..dh {
                        ctx[i][hd * dh + u] += a * v[j][hd * dh + u];
                    }
                }
            }
        }
        for i in 0..len {
            let o = affine(&ctx[i], get(&p("attn.wo")), get(&p("attn.bo")).data());
            x[i].iter_mut().zip(&o).for_each(|(a, b)| *a += b);
            let h2 = ln(&x[i], get(&p("ln2.gain")).data(), get(&p("ln2.bias")).data());
            let f: Vec<f64> = affine(&h2, get(&p("ffn.w1")), get(&p("ffn.b1")).data())
                .into_iter()
                .map(gelu)
                .collect();
            let f = affine(&f, get(&p("ffn.w2")), get(&p("ffn.b2")).data());
            x[i].iter_mut().zip(&f).for_each(|(a, b)| *a += b);
        }
    }
    ln(&x[0], get("final_ln.gain").data(), get("final_ln.bias").data())
}
