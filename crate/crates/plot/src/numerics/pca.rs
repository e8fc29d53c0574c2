use crate::error::{Error, Result};
use crate::numerics::matrix::Matrix;

/// Centered full-rank PCA fit.
#[derive(Debug, Clone)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// d x d rotation; columns are principal directions, descending variance.
    pub rotation: Matrix,
    pub explained_variance: Vec<f64>,
}

/// Fit PCA by eigendecomposition of the sample covariance.
///
/// `samples` is T x d (rows are observations). The rotation always has full
/// rank d: a degenerate covariance still yields a complete orthonormal basis
/// (the Jacobi sweep returns one). Sign convention: the first entry of each
/// column with magnitude above 1e-12 is made positive.
pub fn pca_fit(samples: &Matrix) -> Result<Pca> {
    let t = samples.rows;
    let d = samples.cols;
    if t < 2 {
        return Err(Error::InvalidArgument("pca_fit needs at least 2 samples".into()));
    }
    let mut mean = vec![0.0; d];
    for i in 0..t {
        for (m, &v) in mean.iter_mut().zip(samples.row(i)) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= t as f64;
    }
    let mut cov = Matrix::zeros(d, d);
    for i in 0..t {
        let row = samples.row(i);
        for a in 0..d {
            let ca = row[a] - mean[a];
            for b in a..d {
                cov.data[a * d + b] += ca * (row[b] - mean[b]);
            }
        }
    }
    let norm = 1.0 / (t as f64 - 1.0);
    for a in 0..d {
        for b in a..d {
            let v = cov.get(a, b) * norm;
            cov.set(a, b, v);
            cov.set(b, a, v);
        }
    }
    let (mut eigvals, mut vecs) = jacobi_eigen(&cov);

    // Sort by descending eigenvalue; stable order for ties.
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eigvals[b].partial_cmp(&eigvals[a]).unwrap().then(a.cmp(&b)));
    let mut rotation = Matrix::zeros(d, d);
    let mut sorted_vals = vec![0.0; d];
    for (new_j, &old_j) in order.iter().enumerate() {
        sorted_vals[new_j] = eigvals[old_j];
        for i in 0..d {
            rotation.set(i, new_j, vecs.get(i, old_j));
        }
    }
    eigvals = sorted_vals;

    for j in 0..d {
        let mut sign = 1.0;
        for i in 0..d {
            let v = rotation.get(i, j);
            if v.abs() > 1e-12 {
                if v < 0.0 {
                    sign = -1.0;
                }
                break;
            }
        }
        if sign < 0.0 {
            for i in 0..d {
                let v = rotation.get(i, j);
                rotation.set(i, j, -v);
            }
        }
    }
    vecs = rotation;

    Ok(Pca { mean, rotation: vecs, explained_variance: eigvals })
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
/// Returns (eigenvalues, eigenvector columns).
fn jacobi_eigen(sym: &Matrix) -> (Vec<f64>, Matrix) {
    let n = sym.rows;
    let mut a = sym.clone();
    let mut v = Matrix::identity(n);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                off += a.get(p, q) * a.get(p, q);
            }
        }
        if off < 1e-24 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a.get(p, q);
                if apq.abs() < 1e-30 {
                    continue;
                }
                let app = a.get(p, p);
                let aqq = a.get(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a.get(k, p);
                    let akq = a.get(k, q);
                    a.set(k, p, c * akp - s * akq);
                    a.set(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let apk = a.get(p, k);
                    let aqk = a.get(q, k);
                    a.set(p, k, c * apk - s * aqk);
                    a.set(q, k, s * apk + c * aqk);
                }
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    let vals = (0..n).map(|i| a.get(i, i)).collect();
    (vals, v)
}
