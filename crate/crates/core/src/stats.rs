//! Statistical kernels: Pearson correlation, Frobenius distances, symmetric
//! eigendecomposition and PCA.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Variance below which a dimension is treated as constant. Such dimensions
/// use `sqrt(VAR_FLOOR)` as their standard deviation.
pub const VAR_FLOOR: f64 = 1e-8;

/// Forward results kept for the backward pass.
#[derive(Clone, Debug)]
pub struct PearsonParts {
    pub sigma: Tensor,
    z: Vec<f64>,
    std: Vec<f64>,
    floored: Vec<bool>,
    n: usize,
    d: usize,
}

pub(crate) fn pearson_parts(e: &Tensor) -> Result<PearsonParts> {
    let (n, d) = (e.rows(), e.cols());
    if n < 2 {
        return Err(Error::BatchTooSmall {
            op: "pearson_correlation",
            rows: n,
        });
    }
    let x = e.data();
    let mut mean = vec![0.0; d];
    for row in x.chunks(d) {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let mut var = vec![0.0; d];
    for row in x.chunks(d) {
        for j in 0..d {
            let c = row[j] - mean[j];
            var[j] += c * c;
        }
    }
    var.iter_mut().for_each(|v| *v /= n as f64);
    let floored: Vec<bool> = var.iter().map(|&v| v < VAR_FLOOR).collect();
    let std: Vec<f64> = var.iter().map(|&v| v.max(VAR_FLOOR).sqrt()).collect();

    let mut z = vec![0.0; n * d];
    for i in 0..n {
        for j in 0..d {
            z[i * d + j] = (x[i * d + j] - mean[j]) / std[j];
        }
    }

    let mut sigma = vec![0.0; d * d];
    for a in 0..d {
        for b in a..d {
            let s: f64 = (0..n).map(|i| z[i * d + a] * z[i * d + b]).sum::<f64>() / n as f64;
            let s = s.clamp(-1.0, 1.0);
            sigma[a * d + b] = s;
            sigma[b * d + a] = s;
        }
        if !floored[a] {
            sigma[a * d + a] = 1.0;
        }
    }

    Ok(PearsonParts {
        sigma: Tensor::from_parts(vec![d, d], sigma),
        z,
        std,
        floored,
        n,
        d,
    })
}

/// Gradient w.r.t. the input batch given the upstream gradient on Σ.
pub(crate) fn pearson_backward(p: &PearsonParts, upstream: &[f64]) -> Vec<f64> {
    let (n, d) = (p.n, p.d);
    // Non-degenerate diagonal entries are identically one.
    let mut gs = vec![0.0; d * d];
    for a in 0..d {
        for b in 0..d {
            if a == b && !p.floored[a] {
                continue;
            }
            gs[a * d + b] = upstream[a * d + b] + upstream[b * d + a];
        }
    }
    let mut dz = vec![0.0; n * d];
    crate::tensor::matmul_into(&p.z, &gs, &mut dz, n, d, d);
    dz.iter_mut().for_each(|v| *v /= n as f64);

    let mut dc = vec![0.0; n * d];
    for j in 0..d {
        let a: f64 = if p.floored[j] {
            0.0
        } else {
            (0..n).map(|i| dz[i * d + j] * p.z[i * d + j]).sum()
        };
        for i in 0..n {
            dc[i * d + j] = (dz[i * d + j] - a * p.z[i * d + j] / n as f64) / p.std[j];
        }
    }
    let mut colmean = vec![0.0; d];
    for row in dc.chunks(d) {
        colmean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
    }
    colmean.iter_mut().for_each(|m| *m /= n as f64);
    for row in dc.chunks_mut(d) {
        row.iter_mut().zip(&colmean).for_each(|(v, m)| *v -= m);
    }
    dc
}

/// d×d Pearson correlation matrix of the columns of an n×d batch, using the
/// biased (1/n) variance estimator.
pub fn pearson_correlation(e: &Tensor) -> Result<Tensor> {
    Ok(pearson_parts(e)?.sigma)
}

/// `‖S − I‖_F` for a square matrix.
pub fn frobenius_distance_to_identity(s: &Tensor) -> Result<f64> {
    if !s.is_matrix() || s.rows() != s.cols() {
        return Err(Error::shape(
            "frobenius_distance_to_identity",
            format!("expected a square matrix, got {:?}", s.shape()),
        ));
    }
    let n = s.rows();
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n {
            let v = s.get(i, j) - if i == j { 1.0 } else { 0.0 };
            acc += v * v;
        }
    }
    Ok(acc.sqrt())
}

/// Mean absolute value of the off-diagonal entries of a square matrix.
pub fn mean_abs_off_diagonal(s: &Tensor) -> f64 {
    let n = s.rows();
    if n < 2 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                acc += s.get(i, j).abs();
            }
        }
    }
    acc / (n * (n - 1)) as f64
}

pub fn column_means(e: &Tensor) -> Vec<f64> {
    let (n, d) = (e.rows(), e.cols());
    let mut mean = vec![0.0; d];
    for row in e.data().chunks(d) {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    mean
}

pub fn center(e: &Tensor) -> Tensor {
    let d = e.cols();
    let mean = column_means(e);
    let mut out = e.data().to_vec();
    for row in out.chunks_mut(d) {
        row.iter_mut().zip(&mean).for_each(|(v, m)| *v -= m);
    }
    Tensor::from_parts(vec![e.rows(), d], out)
}

/// Biased (1/n) covariance of the columns.
pub fn covariance(e: &Tensor) -> Tensor {
    let (n, d) = (e.rows(), e.cols());
    let c = center(e);
    let mut cov = vec![0.0; d * d];
    crate::tensor::matmul_tn_acc(c.data(), c.data(), &mut cov, n, d, d);
    cov.iter_mut().for_each(|v| *v /= n as f64);
    Tensor::from_parts(vec![d, d], cov)
}

/// Eigenpairs of a symmetric matrix sorted by descending eigenvalue.
/// Eigenvectors are returned as rows, each with its largest-magnitude
/// coordinate made positive.
pub fn symmetric_eigen(m: &Tensor) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    if !m.is_matrix() || m.rows() != m.cols() {
        return Err(Error::shape("symmetric_eigen", format!("{:?}", m.shape())));
    }
    let d = m.rows();
    let mat = DMatrix::from_row_slice(d, d, m.data());
    let eig = SymmetricEigen::new(mat);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = order
        .iter()
        .map(|&i| {
            let mut v: Vec<f64> = eig.eigenvectors.column(i).iter().copied().collect();
            fix_sign(&mut v);
            v
        })
        .collect();
    Ok((values, vectors))
}

pub(crate) fn fix_sign(v: &mut [f64]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v.get(best).is_some_and(|x| *x < 0.0) {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Number of eigenvalues above a relative tolerance of the largest one.
pub fn numerical_rank(eigenvalues: &[f64]) -> usize {
    let max = eigenvalues.iter().copied().fold(0.0_f64, f64::max);
    if max <= 0.0 {
        return 0;
    }
    eigenvalues.iter().filter(|&&v| v > max * 1e-10).count()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Projection {
    /// n×k coordinates.
    pub coords: Tensor,
    /// k×d unit-norm principal axes.
    pub components: Tensor,
    /// Full covariance spectrum, descending.
    pub eigenvalues: Vec<f64>,
}

/// Projects mean-centered rows onto the top-`k` principal components.
pub fn pca_project(e: &Tensor, k: usize) -> Result<Projection> {
    let (n, d) = (e.rows(), e.cols());
    if k == 0 || n < k || d < k {
        return Err(Error::shape(
            "pca_project",
            format!("need n >= k >= 1 and d >= k, got n={n}, d={d}, k={k}"),
        ));
    }
    let (values, vectors) = symmetric_eigen(&covariance(e))?;
    let rank = numerical_rank(&values);
    if rank < k {
        return Err(Error::DegenerateRank {
            requested: k,
            achieved: rank,
        });
    }
    let components: Vec<f64> = vectors[..k].iter().flatten().copied().collect();
    let components = Tensor::from_parts(vec![k, d], components);
    let centered = center(e);
    let mut coords = vec![0.0; n * k];
    crate::tensor::matmul_nt_into(centered.data(), components.data(), &mut coords, n, d, k);
    Ok(Projection {
        coords: Tensor::from_parts(vec![n, k], coords),
        components,
        eigenvalues: values,
    })
}
