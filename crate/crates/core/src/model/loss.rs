//! PEDCC-Loss terms, the linear-independence penalty, and the cosine head
//! that maps `f_n` to class cosines.

use crate::centroids::CentroidSet;
use crate::error::{Error, Result};
use crate::linalg;

/// Norm below which a feature vector is treated as degenerate.
pub const DEGENERATE_NORM: f64 = 1e-12;

fn check_finite(what: &str, xs: &[f64]) -> Result<()> {
    if xs.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

fn check_labels(labels: &[usize], rows: usize, classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::ShapeMismatch(format!(
            "{} labels for {rows} samples",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::InvalidParameter(format!(
            "label {bad} outside [0, {classes})"
        )));
    }
    Ok(())
}

/// Additive-margin softmax over centroid cosines, averaged over the batch.
///
/// `cos_theta` is `N x c` row-major. The true-class logit is
/// `s (cos_y - margin)`, the others `s cos_j`. Returns the loss and its
/// gradient with respect to `cos_theta`.
pub fn loss_am(cos_theta: &[f64], labels: &[usize], classes: usize, scale: f64, margin: f64) -> Result<(f64, Vec<f64>)> {
    check_finite("cosines", cos_theta)?;
    if classes == 0 || cos_theta.len() % classes != 0 {
        return Err(Error::ShapeMismatch("cosine matrix is not N x c".into()));
    }
    let n = cos_theta.len() / classes;
    check_labels(labels, n, classes)?;
    if n == 0 {
        return Ok((0.0, Vec::new()));
    }
    let mut loss = 0.0;
    let mut grad = vec![0.0; cos_theta.len()];
    let mut logits = vec![0.0; classes];
    for (i, &y) in labels.iter().enumerate() {
        let row = &cos_theta[i * classes..(i + 1) * classes];
        for j in 0..classes {
            logits[j] = scale * if j == y { row[j] - margin } else { row[j] };
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = logits.iter().map(|z| (z - max).exp()).sum();
        let lse = max + sum.ln();
        loss += lse - logits[y];
        for j in 0..classes {
            let p = (logits[j] - lse).exp();
            let target = if j == y { 1.0 } else { 0.0 };
            grad[i * classes + j] = scale * (p - target) / n as f64;
        }
    }
    Ok((loss / n as f64, grad))
}

/// Mean squared distance of each `f_n` to its class centroid.
pub fn loss_mse(features: &[f64], labels: &[usize], centroids: &CentroidSet) -> Result<(f64, Vec<f64>)> {
    check_finite("features", features)?;
    let dim = centroids.feature_dim();
    if features.len() % dim != 0 {
        return Err(Error::ShapeMismatch("feature matrix is not N x n".into()));
    }
    let n = features.len() / dim;
    check_labels(labels, n, centroids.class_count())?;
    if n == 0 {
        return Ok((0.0, Vec::new()));
    }
    let mut loss = 0.0;
    let mut grad = vec![0.0; features.len()];
    for (i, &y) in labels.iter().enumerate() {
        let a = centroids.row(y);
        for k in 0..dim {
            let d = features[i * dim + k] - a[k];
            loss += d * d;
            grad[i * dim + k] = 2.0 * d / n as f64;
        }
    }
    Ok((loss / n as f64, grad))
}

/// Mean squared off-diagonal entry of the Gram matrix of the unit-normalised
/// columns of `weight` (`rows x cols`, row-major, column `j` = `w_j`).
/// Zero exactly when the columns are pairwise orthogonal.
pub fn loss_lin_ind(weight: &[f64], rows: usize, cols: usize) -> Result<(f64, Vec<f64>)> {
    check_finite("weights", weight)?;
    if weight.len() != rows * cols {
        return Err(Error::ShapeMismatch(format!(
            "weight has {} entries, expected {rows} x {cols}",
            weight.len()
        )));
    }
    let columns: Vec<Vec<f64>> = (0..cols)
        .map(|j| (0..rows).map(|i| weight[i * cols + j]).collect())
        .collect();
    let norms: Vec<f64> = columns.iter().map(|c| linalg::norm(c)).collect();
    if let Some(j) = norms.iter().position(|&nrm| nrm == 0.0) {
        return Err(Error::ZeroColumn(j));
    }
    if cols < 2 {
        return Ok((0.0, vec![0.0; weight.len()]));
    }
    let unit: Vec<Vec<f64>> = columns
        .iter()
        .zip(&norms)
        .map(|(c, &nrm)| c.iter().map(|v| v / nrm).collect())
        .collect();
    let pairs = (cols * (cols - 1)) as f64;
    let mut gram = vec![0.0; cols * cols];
    let mut loss = 0.0;
    for i in 0..cols {
        for j in 0..cols {
            if i != j {
                let g = linalg::dot(&unit[i], &unit[j]);
                gram[i * cols + j] = g;
                loss += g * g;
            }
        }
    }
    loss /= pairs;

    // dL/du_i = (4 / pairs) sum_{j != i} G_ij u_j, then through u = w / |w|.
    let mut grad = vec![0.0; weight.len()];
    for i in 0..cols {
        let mut gu = vec![0.0; rows];
        for j in 0..cols {
            if i != j {
                linalg::axpy(4.0 * gram[i * cols + j] / pairs, &unit[j], &mut gu);
            }
        }
        let radial = linalg::dot(&unit[i], &gu);
        for r in 0..rows {
            grad[r * cols + i] = (gu[r] - radial * unit[i][r]) / norms[i];
        }
    }
    Ok((loss, grad))
}

/// Cosines between each `f_n` row and every centroid (`N x c`), and a flag
/// per sample marking zero-norm features whose cosines are set to 0.
pub fn cosine_head(features: &[f64], centroids: &CentroidSet) -> (Vec<f64>, Vec<bool>) {
    let dim = centroids.feature_dim();
    let c = centroids.class_count();
    let n = features.len() / dim;
    let mut cos = vec![0.0; n * c];
    let mut degenerate = vec![false; n];
    for s in 0..n {
        let f = &features[s * dim..(s + 1) * dim];
        let norm = linalg::norm(f);
        if norm < DEGENERATE_NORM {
            degenerate[s] = true;
            continue;
        }
        for (j, a) in centroids.rows().enumerate() {
            cos[s * c + j] = (linalg::dot(f, a) / norm).clamp(-1.0, 1.0);
        }
    }
    (cos, degenerate)
}

/// Chains `dL/dcos` back to `dL/df_n`; centroids are unit vectors so
/// `d cos_j / d f = a_j / |f| - cos_j f / |f|^2`.
pub fn cosine_head_backward(features: &[f64], cos: &[f64], grad_cos: &[f64], centroids: &CentroidSet) -> Vec<f64> {
    let dim = centroids.feature_dim();
    let c = centroids.class_count();
    let n = features.len() / dim;
    let mut grad = vec![0.0; features.len()];
    for s in 0..n {
        let f = &features[s * dim..(s + 1) * dim];
        let norm = linalg::norm(f);
        if norm < DEGENERATE_NORM {
            continue;
        }
        let g = &mut grad[s * dim..(s + 1) * dim];
        let mut radial = 0.0;
        for (j, a) in centroids.rows().enumerate() {
            let gc = grad_cos[s * c + j];
            linalg::axpy(gc / norm, a, g);
            radial += gc * cos[s * c + j];
        }
        linalg::axpy(-radial / (norm * norm), f, g);
    }
    grad
}
