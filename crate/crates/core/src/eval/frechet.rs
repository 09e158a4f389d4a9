//! Fréchet distance between Gaussian fits of two feature sets.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Eigenvalues below this are treated as a broken covariance, not round-off.
pub const NEGATIVE_EIGEN_TOLERANCE: f64 = 1e-8;

/// Sample mean and unbiased covariance of `rows` (each of equal length).
pub fn moments(rows: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = rows.len();
    let dim = rows.first().map(Vec::len).unwrap_or(0);
    if dim == 0 {
        return Err(Error::Domain("feature set is empty".into()));
    }
    if n < 2 {
        return Err(Error::Domain(format!("need at least 2 samples, got {n}")));
    }
    if let Some(r) = rows.iter().find(|r| r.len() != dim) {
        return Err(Error::Shape(format!("feature length {} differs from {dim}", r.len())));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite feature value".into()));
    }
    let mut mean = DVector::zeros(dim);
    for r in rows {
        mean += DVector::from_column_slice(r);
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(dim, dim);
    for r in rows {
        let c = DVector::from_column_slice(r) - &mean;
        cov += &c * c.transpose();
    }
    cov /= (n - 1) as f64;
    Ok((mean, cov))
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

fn clamped_eigen(m: &DMatrix<f64>, what: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let mut eig = SymmetricEigen::new(symmetrize(m));
    if let Some(&bad) = eig
        .eigenvalues
        .iter()
        .find(|&&l| l < -NEGATIVE_EIGEN_TOLERANCE || !l.is_finite())
    {
        return Err(Error::Numeric(format!(
            "{what} is not positive semi-definite: eigenvalue {bad:e}"
        )));
    }
    eig.eigenvalues.iter_mut().for_each(|l| *l = l.max(0.0));
    Ok(eig)
}

/// Principal square root of a symmetric PSD matrix by eigendecomposition.
pub fn sqrtm_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !m.is_square() {
        return Err(Error::Shape(format!("sqrtm of a {}x{} matrix", m.nrows(), m.ncols())));
    }
    let eig = clamped_eigen(m, "matrix")?;
    let roots = eig.eigenvalues.map(f64::sqrt);
    let v = &eig.eigenvectors;
    Ok(v * DMatrix::from_diagonal(&roots) * v.transpose())
}

/// Fréchet distance between Gaussians `(μ_a, Σ_a)` and `(μ_b, Σ_b)`.
pub fn frechet_from_moments(
    mean_a: &DVector<f64>,
    cov_a: &DMatrix<f64>,
    mean_b: &DVector<f64>,
    cov_b: &DMatrix<f64>,
) -> Result<f64> {
    let root_a = sqrtm_psd(cov_a)?;
    let inner = &root_a * cov_b * &root_a;
    let cross = clamped_eigen(&inner, "cross covariance")?
        .eigenvalues
        .iter()
        .map(|l| l.sqrt())
        .sum::<f64>();
    let d = (mean_a - mean_b).norm_squared() + cov_a.trace() + cov_b.trace() - 2.0 * cross;
    Ok(d.max(0.0))
}

/// Fréchet distance between two feature sets. Each needs more samples than
/// feature dimensions.
pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let dim = a.first().map(Vec::len).unwrap_or(0);
    if b.first().map(Vec::len).unwrap_or(0) != dim {
        return Err(Error::Shape("feature sets differ in feature length".into()));
    }
    for (name, set) in [("first", a), ("second", b)] {
        if set.len() < dim + 1 {
            return Err(Error::Domain(format!(
                "{name} feature set has {} samples; {} dimensions need at least {}",
                set.len(),
                dim,
                dim + 1
            )));
        }
    }
    let (ma, ca) = moments(a)?;
    let (mb, cb) = moments(b)?;
    frechet_from_moments(&ma, &ca, &mb, &cb)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_moments_give_zero() {
        let m = DVector::from_vec(vec![1.0, -2.0]);
        let c = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        assert!(frechet_from_moments(&m, &c, &m, &c).unwrap() < 1e-12);
    }

    #[test]
    fn diagonal_closed_form() {
        // Commuting covariances: Σ (√a − √b)² per axis.
        let z = DVector::zeros(2);
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 1.0]));
        let b = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 9.0]));
        let d = frechet_from_moments(&z, &a, &z, &b).unwrap();
        assert!((d - (1.0 + 4.0)).abs() < 1e-12, "{d}");
    }

    #[test]
    fn indefinite_matrix_is_rejected() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(sqrtm_psd(&m), Err(Error::Numeric(_))));
    }

    #[test]
    fn sample_deficit_is_named() {
        let a = vec![vec![0.0, 1.0]; 2];
        let err = frechet_distance(&a, &a).unwrap_err().to_string();
        assert!(err.contains("at least 3"), "{err}");
    }
}
