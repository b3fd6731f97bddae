mod common;

use intentkd::encoder::EmbeddingBatch;
use intentkd::isotropy::{compare_isotropy, isotropy_report, isotropy_score, projection_2d};
use intentkd::tensor::Tensor;
use rand_distr::{Distribution, StandardNormal};

fn gaussian(n: usize, d: usize, seed: u64) -> Tensor {
    let mut r = common::rng(seed);
    Tensor::matrix(n, d, (0..n * d).map(|_| StandardNormal.sample(&mut r)).collect()).unwrap()
}

fn batch(e: Tensor) -> EmbeddingBatch {
    let n = e.rows();
    EmbeddingBatch::new(e, vec![None; n], vec!["a".into(); n]).unwrap()
}

/// Rank-one cloud: every row is a multiple of one direction plus a tiny jitter.
fn rank_one(n: usize, d: usize, seed: u64) -> Tensor {
    let noise = gaussian(n, d, seed ^ 0x55);
    let coef = gaussian(n, 1, seed);
    let dir: Vec<f64> = (0..d).map(|k| 1.0 + k as f64 * 0.3).collect();
    let data = (0..n)
        .flat_map(|i| (0..d).map(move |k| (i, k)))
        .map(|(i, k)| coef.get(i, 0) * dir[k] + 1e-3 * noise.get(i, k))
        .collect();
    Tensor::matrix(n, d, data).unwrap()
}

#[test]
fn jittered_copies_score_below_a_gaussian_cloud() {
    let base: Vec<f64> = (0..8).map(|k| (k as f64 - 3.5) * 0.7).collect();
    let noise = gaussian(50, 8, 11);
    let copies = Tensor::matrix(
        50,
        8,
        (0..400).map(|j| 3.0 + base[j % 8] + 0.01 * noise.data()[j]).collect(),
    )
    .unwrap();
    let cloud = gaussian(50, 8, 12);
    let (c, g) = (isotropy_score(&copies).unwrap(), isotropy_score(&cloud).unwrap());
    assert!(c < g, "copies {c} vs cloud {g}");
}

#[test]
fn gaussian_beats_rank_one_across_seeds() {
    for seed in 0..5 {
        let g = isotropy_score(&gaussian(60, 6, seed)).unwrap();
        let r = isotropy_score(&rank_one(60, 6, seed)).unwrap();
        assert!(g > r, "seed {seed}: {g} vs {r}");
        assert!((0.0..=1.0).contains(&g) && (0.0..=1.0).contains(&r));
    }
}

#[test]
fn report_marks_rank_deficiency() {
    let full = isotropy_report(&gaussian(40, 8, 1)).unwrap();
    assert!(!full.rank_deficient);
    assert_eq!(full.spectrum.len(), 8);
    assert!(full.spectrum.windows(2).all(|w| w[0] >= w[1]));
    let thin = isotropy_report(&gaussian(4, 8, 1)).unwrap();
    assert!(thin.rank_deficient);
}

#[test]
fn comparison_delta_and_projection_shapes() {
    let cloud = gaussian(40, 8, 3);
    let same = compare_isotropy(&batch(cloud.clone()), &batch(cloud.clone())).unwrap();
    assert_eq!(same.delta, 0.0);
    let up = compare_isotropy(&batch(rank_one(40, 8, 3)), &batch(cloud)).unwrap();
    assert!(up.delta > 0.0);
    assert_eq!(up.before_projection.as_ref().unwrap().shape(), &[40, 2]);
    assert_eq!(up.after_projection.as_ref().unwrap().shape(), &[40, 2]);
    let json = serde_json::to_value(&up).unwrap();
    assert!(json["delta"].is_f64());
}

#[test]
fn comparison_rejects_mismatched_dims() {
    assert!(compare_isotropy(&batch(gaussian(10, 4, 0)), &batch(gaussian(10, 5, 0))).is_err());
}

#[test]
fn projection_of_constant_rows_is_zero() {
    let e = Tensor::matrix(5, 3, vec![1.5; 15]).unwrap();
    let p = projection_2d(&e).unwrap();
    assert_eq!(p.shape(), &[5, 2]);
    assert!(p.data().iter().all(|&v| v == 0.0));
}

#[test]
fn too_few_rows_is_a_shape_error() {
    assert!(isotropy_score(&gaussian(1, 4, 0)).is_err());
}
