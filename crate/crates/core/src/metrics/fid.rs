use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{shape_err, Result};

/// Added to covariance diagonals when a set has no more samples than dimensions.
pub const COV_REGULARIZATION: f64 = 1e-6;

fn moments(set: &[Vec<f64>], dim: usize) -> (DVector<f64>, DMatrix<f64>) {
    let n = set.len();
    let mut mu = DVector::zeros(dim);
    for v in set {
        mu += DVector::from_column_slice(v);
    }
    mu /= n as f64;
    let mut cov = DMatrix::zeros(dim, dim);
    for v in set {
        let d = DVector::from_column_slice(v) - &mu;
        cov += &d * d.transpose();
    }
    cov /= (n.max(2) - 1) as f64;
    if n <= dim {
        for i in 0..dim {
            cov[(i, i)] += COV_REGULARIZATION;
        }
    }
    (mu, cov)
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussian fits of two feature sets.
/// `Tr((Σa·Σb)^½)` is taken as `Tr((Σa^½ Σb Σa^½)^½)`, whose argument is
/// symmetric PSD; negative eigenvalues from round-off are clamped to zero, and
/// so is the final value.
pub fn fid(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let dim = a.first().map(Vec::len).ok_or_else(|| shape_err!("fid needs non-empty feature sets"))?;
    if b.is_empty() {
        return Err(shape_err!("fid needs non-empty feature sets"));
    }
    if let Some(v) = a.iter().chain(b).find(|v| v.len() != dim) {
        return Err(shape_err!("feature dimension mismatch: {} vs {dim}", v.len()));
    }
    let (mu_a, cov_a) = moments(a, dim);
    let (mu_b, cov_b) = moments(b, dim);
    let ra = sym_sqrt(&cov_a);
    let inner = &ra * &cov_b * &ra;
    let inner = (&inner + inner.transpose()) * 0.5;
    let tr_cross: f64 = SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|l| l.max(0.0).sqrt())
        .sum();
    let mean_term = (&mu_a - &mu_b).norm_squared();
    let d = mean_term + cov_a.trace() + cov_b.trace() - 2.0 * tr_cross;
    Ok(d.max(0.0))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    use super::*;

    fn gauss(n: usize, dim: usize, shift: f64, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| (0..dim).map(|_| Distribution::<f64>::sample(&StandardNormal, &mut rng) + shift).collect::<Vec<f64>>())
            .collect()
    }

    #[test]
    fn zero_on_identical_and_symmetric() {
        let a = gauss(50, 4, 0.0, 1);
        let b = gauss(60, 4, 0.5, 2);
        assert!(fid(&a, &a).unwrap().abs() < 1e-6);
        assert!((fid(&a, &b).unwrap() - fid(&b, &a).unwrap()).abs() < 1e-6);
    }

    #[test]
    fn diagonal_closed_form() {
        // two fixed sets with diagonal covariances: Σa = diag(1, 4), Σb = diag(4, 1)
        let a = vec![vec![1.0, 2.0], vec![-1.0, -2.0], vec![1.0, -2.0], vec![-1.0, 2.0]];
        let b: Vec<Vec<f64>> = a.iter().map(|v| vec![v[1] + 3.0, v[0]]).collect();
        let scale = 4.0 / 3.0;
        let (va, vb): ([f64; 2], [f64; 2]) = ([scale, 4.0 * scale], [4.0 * scale, scale]);
        let mut expect = 9.0;
        for i in 0..2 {
            expect += va[i] + vb[i] - 2.0 * (va[i] * vb[i]).sqrt();
        }
        assert!((fid(&a, &b).unwrap() - expect).abs() < 1e-9);
    }

    #[test]
    fn single_sample_is_regularized() {
        let a = vec![vec![0.1, 0.2, 0.3]];
        let b = vec![vec![0.1, 0.2, 0.4]];
        let d = fid(&a, &b).unwrap();
        assert!(d.is_finite() && (d - 0.01).abs() < 1e-9);
        assert!(fid(&a, &[vec![1.0]]).is_err());
    }
}
