mod common;

use intentkd::fewshot::{
    evaluate_embeddings, fit_linear_classifier, sample_episode_labels, ClassifierConfig, EvalConfig, EvalResult,
};
use intentkd::stats::pearson_correlation;
use intentkd::tensor::Tensor;
use intentkd::tokenizer::{build_vocab, detokenize, normalize, tokenize, CLS_ID, PAD_ID, SEP_ID};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-10.0f64..10.0, rows * cols).prop_map(move |v| Tensor::matrix(rows, cols, v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn pearson_is_affine_invariant(e in matrix(8, 4), scale in prop::collection::vec(0.1f64..5.0, 4), shift in prop::collection::vec(-3.0f64..3.0, 4)) {
        let mut f = e.clone();
        for row in f.data_mut().chunks_mut(4) {
            for k in 0..4 {
                row[k] = row[k] * scale[k] + shift[k];
            }
        }
        let a = pearson_correlation(&e).unwrap();
        let b = pearson_correlation(&f).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn pearson_is_row_permutation_invariant(e in matrix(7, 3), perm in Just((0..7usize).collect::<Vec<_>>()).prop_shuffle()) {
        let a = pearson_correlation(&e).unwrap();
        let b = pearson_correlation(&e.select_rows(&perm)).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn pearson_entries_are_bounded_with_unit_diagonal(e in matrix(5, 5)) {
        let s = pearson_correlation(&e).unwrap();
        for i in 0..5 {
            prop_assert_eq!(s.get(i, i), 1.0);
            for j in 0..5 {
                prop_assert!(s.get(i, j).abs() <= 1.0);
                prop_assert_eq!(s.get(i, j), s.get(j, i));
            }
        }
    }

    #[test]
    fn tokenizer_framing(words in prop::collection::vec("[a-zé]{1,8}", 1..12), max_len in 3usize..20) {
        let text = words.join(" ");
        let vocab = build_vocab(&[text.as_str(), "extra words here"], 40).unwrap();
        let seq = tokenize(&text, &vocab, max_len);
        prop_assert_eq!(seq.ids.len(), max_len);
        prop_assert_eq!(seq.ids[0], CLS_ID);
        prop_assert_eq!(seq.ids[seq.len - 1], SEP_ID);
        prop_assert!(seq.ids[seq.len..].iter().all(|&i| i == PAD_ID));
        prop_assert!(seq.active()[1..seq.len - 1].iter().all(|&i| i != PAD_ID && i != CLS_ID && i != SEP_ID));
    }

    #[test]
    fn tokenizer_round_trips_covered_text(words in prop::collection::vec("[a-z]{1,6}", 1..6)) {
        let text = words.join(" ");
        let vocab = build_vocab(&[text.as_str()], 400).unwrap();
        let seq = tokenize(&text, &vocab, 64);
        prop_assert_eq!(detokenize(&seq, &vocab), normalize(&text));
    }

    #[test]
    fn episodes_are_disjoint_and_dense(labels in prop::collection::vec(0usize..5, 2..60), n_shot in 1usize..4, seed in any::<u64>()) {
        match sample_episode_labels(&labels, n_shot, seed) {
            Ok(ep) => {
                let mut seen = std::collections::HashSet::new();
                for &(i, l) in ep.support.iter().chain(&ep.query) {
                    prop_assert!(seen.insert(i));
                    prop_assert!(l < ep.classes.len());
                    prop_assert_eq!(labels[i], ep.classes[l]);
                }
                for k in 0..ep.classes.len() {
                    prop_assert_eq!(ep.support.iter().filter(|p| p.1 == k).count(), n_shot);
                    prop_assert!(ep.query.iter().any(|p| p.1 == k));
                }
            }
            Err(_) => {
                let mut counts = [0usize; 5];
                labels.iter().for_each(|&l| counts[l] += 1);
                prop_assert!(counts.iter().all(|&c| c < n_shot + 1));
            }
        }
    }
}

fn blobs(scale: f64) -> (Tensor, Vec<usize>) {
    let centers = [[4.0, 0.0, 0.0], [0.0, 4.0, 0.0], [0.0, 0.0, 4.0]];
    let mut r = common::rng(5);
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (k, c) in centers.iter().enumerate() {
        for _ in 0..6 {
            use rand::Rng;
            rows.push(
                c.iter()
                    .map(|v| scale * (v + r.random_range(-0.5..0.5)))
                    .collect::<Vec<_>>(),
            );
            labels.push(k);
        }
    }
    (Tensor::from_rows(&rows).unwrap(), labels)
}

#[test]
fn separable_blobs_are_fit_exactly() {
    let (x, y) = blobs(1.0);
    for cfg in [ClassifierConfig::default(), ClassifierConfig::hinge()] {
        let c = fit_linear_classifier(&x, &y, &cfg).unwrap();
        assert_eq!(c.predict(&x).unwrap(), y, "{:?}", cfg.kind);
    }
}

#[test]
fn predictions_ignore_a_global_rescale() {
    let (x, y) = blobs(1.0);
    let (big, _) = blobs(250.0);
    let probe = Tensor::from_rows(&[vec![1.0, 1.2, 0.0], vec![0.1, 0.0, 3.0], vec![2.0, 1.9, 2.1]]).unwrap();
    let mut probe_big = probe.clone();
    probe_big.data_mut().iter_mut().for_each(|v| *v *= 250.0);
    for cfg in [ClassifierConfig::default(), ClassifierConfig::hinge()] {
        let a = fit_linear_classifier(&x, &y, &cfg).unwrap();
        let b = fit_linear_classifier(&big, &y, &cfg).unwrap();
        assert_eq!(a.predict(&probe).unwrap(), b.predict(&probe_big).unwrap());
        assert_eq!(b.predict(&big).unwrap(), y);
    }
}

#[test]
fn class_separated_embeddings_score_perfectly() {
    let (x, y) = blobs(1.0);
    let r = evaluate_embeddings(
        &x,
        &y,
        &EvalConfig {
            n_shot: 2,
            episodes: 10,
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(r.mean, 1.0);
    assert_eq!(r.accuracies.len(), 10);
}

#[test]
fn eval_result_round_trips_through_json() {
    let r = EvalResult::from_accuracies(vec![0.25, 0.5, 1.0], 5, 3);
    let back: EvalResult = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
    assert_eq!(r, back);
}
