//! Small dense vector helpers and a rank-revealing Gram-Schmidt.

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Orthonormal basis for the span of `vectors` (each of length `dim`).
///
/// Modified Gram-Schmidt with one reorthogonalisation pass. A vector whose
/// residual norm falls below `drop_tol` times its original norm (or below
/// `drop_tol` absolutely) is treated as linearly dependent and skipped.
/// Returns the basis vectors in input order of the kept columns.
pub fn orthonormal_basis(vectors: &[Vec<f64>], dim: usize, drop_tol: f64) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for v in vectors {
        debug_assert_eq!(v.len(), dim);
        let original = norm(v);
        if original < drop_tol {
            continue;
        }
        let mut r = v.clone();
        for _ in 0..2 {
            for q in &basis {
                let proj = dot(q, &r);
                axpy(-proj, q, &mut r);
            }
        }
        let residual = norm(&r);
        if residual < drop_tol || residual < drop_tol * original {
            continue;
        }
        r.iter_mut().for_each(|x| *x /= residual);
        basis.push(r);
    }
    basis
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn basis_drops_dependent_columns() {
        let vs = vec![vec![1.0, 0.0, 0.0], vec![2.0, 0.0, 0.0], vec![1.0, 1.0, 0.0]];
        let q = orthonormal_basis(&vs, 3, 1e-10);
        assert_eq!(q.len(), 2);
        assert!((dot(&q[0], &q[1])).abs() < 1e-15);
        assert!((q[1][1].abs() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn zero_vectors_yield_empty_basis() {
        let vs = vec![vec![0.0; 4], vec![0.0; 4]];
        assert!(orthonormal_basis(&vs, 4, 1e-10).is_empty());
    }
}
