//! Isotropy of embedding sets.
//!
//! The score is the partition-function ratio `min_c Z(c) / max_c Z(c)` with
//! `Z(c) = Σ_i exp(cᵀ v_i)`, where `c` ranges over the unit eigenvectors
//! (both signs) of the covariance of the mean-centered set. Vectors are
//! divided by the RMS radius of the centered set first, so the score does not
//! depend on the overall scale while a shared offset (a narrow cone) still
//! lowers it.

use serde::{Deserialize, Serialize};

use crate::autodiff::log_sum_exp;
use crate::encoder::EmbeddingBatch;
use crate::error::{Error, Result};
use crate::stats::{self, covariance, numerical_rank, symmetric_eigen};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IsotropyReport {
    pub score: f64,
    pub n: usize,
    pub d: usize,
    /// Eigenvalues of the centered covariance, descending.
    pub spectrum: Vec<f64>,
    pub mean_abs_correlation: f64,
    /// Set when the centered set spans fewer than `d` dimensions.
    pub rank_deficient: bool,
}

fn check(e: &Tensor) -> Result<()> {
    if e.rows() < 2 || e.cols() < 2 {
        return Err(Error::shape(
            "isotropy_score",
            format!("need n >= 2 and d >= 2, got {}x{}", e.rows(), e.cols()),
        ));
    }
    Ok(())
}

fn score_from(e: &Tensor, eigvecs: &[Vec<f64>]) -> f64 {
    let centered = stats::center(e);
    let n = e.rows();
    let ms: f64 = centered.data().iter().map(|v| v * v).sum::<f64>() / n as f64;
    let radius = if ms > 0.0 { ms.sqrt() } else { 1.0 };
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    let mut proj = vec![0.0; n];
    for c in eigvecs {
        for (i, p) in proj.iter_mut().enumerate() {
            *p = e.row(i).iter().zip(c).map(|(x, y)| x * y).sum::<f64>() / radius;
        }
        let pos = log_sum_exp(&proj);
        proj.iter_mut().for_each(|p| *p = -*p);
        let neg = log_sum_exp(&proj);
        lo = lo.min(pos.min(neg));
        hi = hi.max(pos.max(neg));
    }
    (lo - hi).exp()
}

pub fn isotropy_score(e: &Tensor) -> Result<f64> {
    Ok(isotropy_report(e)?.score)
}

pub fn isotropy_report(e: &Tensor) -> Result<IsotropyReport> {
    check(e)?;
    let (values, vectors) = symmetric_eigen(&covariance(e))?;
    let rank = numerical_rank(&values);
    let corr = stats::pearson_correlation(e)?;
    Ok(IsotropyReport {
        score: score_from(e, &vectors),
        n: e.rows(),
        d: e.cols(),
        spectrum: values.iter().map(|v| v.max(0.0)).collect(),
        mean_abs_correlation: stats::mean_abs_off_diagonal(&corr),
        rank_deficient: rank < e.cols(),
    })
}

/// n×2 PCA coordinates; components beyond the data's rank are zero-filled.
pub fn projection_2d(e: &Tensor) -> Result<Tensor> {
    let n = e.rows();
    let k = 2.min(e.cols()).min(n).max(1);
    let p = match stats::pca_project(e, k) {
        Ok(p) => p.coords,
        Err(Error::DegenerateRank { achieved: 0, .. }) => Tensor::zeros(&[n, 0]),
        Err(Error::DegenerateRank { achieved, .. }) => stats::pca_project(e, achieved)?.coords,
        Err(other) => return Err(other),
    };
    let mut out = vec![0.0; n * 2];
    for i in 0..n {
        for j in 0..p.cols().min(2) {
            out[i * 2 + j] = p.get(i, j);
        }
    }
    Tensor::matrix(n, 2, out)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IsotropyComparison {
    pub before: IsotropyReport,
    pub after: IsotropyReport,
    /// `after.score - before.score`.
    pub delta: f64,
    pub mean_abs_correlation_delta: f64,
    #[serde(skip)]
    pub before_projection: Option<Tensor>,
    #[serde(skip)]
    pub after_projection: Option<Tensor>,
}

pub fn compare_isotropy(before: &EmbeddingBatch, after: &EmbeddingBatch) -> Result<IsotropyComparison> {
    if before.dim() != after.dim() {
        return Err(Error::shape(
            "compare_isotropy",
            format!("dimension {} vs {}", before.dim(), after.dim()),
        ));
    }
    let b = isotropy_report(&before.embeddings)?;
    let a = isotropy_report(&after.embeddings)?;
    Ok(IsotropyComparison {
        delta: a.score - b.score,
        mean_abs_correlation_delta: a.mean_abs_correlation - b.mean_abs_correlation,
        before: b,
        after: a,
        before_projection: Some(projection_2d(&before.embeddings)?),
        after_projection: Some(projection_2d(&after.embeddings)?),
    })
}
