use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::features::FeatureSet;
use crate::error::{Error, Result};

/// Relative tolerance for negative eigenvalues caused by round-off.
const PSD_TOL: f64 = 1e-8;

/// Sample mean and unbiased covariance of the rows.
pub fn mean_cov(set: &FeatureSet) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = set.len();
    if n < 2 {
        return Err(Error::validation("features", "need at least two rows"));
    }
    let d = set.dim();
    let x = DMatrix::from_fn(n, d, |i, j| set.features[i][j]);
    let mean = DVector::from_fn(d, |j, _| x.column(j).mean());
    let mut centered = x;
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centered.transpose() * &centered / (n - 1) as f64;
    Ok((mean, cov))
}

fn check_psd(s: &DMatrix<f64>, name: &'static str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    if !s.is_square() {
        return Err(Error::validation(name, "covariance must be square"));
    }
    let scale = s.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let asym = (s - s.transpose()).abs().max();
    if asym > PSD_TOL * scale {
        return Err(Error::validation(
            name,
            format!("not symmetric (max |S - Sᵀ| = {asym:e})"),
        ));
    }
    let eig = SymmetricEigen::new((s + s.transpose()) * 0.5);
    let min = eig.eigenvalues.min();
    if min < -PSD_TOL * scale {
        return Err(Error::validation(
            name,
            format!("not positive semidefinite (smallest eigenvalue {min:e})"),
        ));
    }
    Ok(eig)
}

fn psd_sqrt(eig: &SymmetricEigen<f64, nalgebra::Dyn>) -> DMatrix<f64> {
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `‖μ₁ − μ₂‖² + Tr(S₁ + S₂ − 2 (S₁S₂)^{1/2})`.
///
/// The trace of the product root is taken as `Tr((√S₁ S₂ √S₁)^{1/2})`, which
/// has the same eigenvalues and keeps the problem symmetric.
pub fn frechet_distance(mu1: &DVector<f64>, s1: &DMatrix<f64>, mu2: &DVector<f64>, s2: &DMatrix<f64>) -> Result<f64> {
    let d = mu1.len();
    if mu2.len() != d || s1.shape() != (d, d) || s2.shape() != (d, d) {
        return Err(Error::validation("frechet", "dimension mismatch"));
    }
    let e1 = check_psd(s1, "S1")?;
    check_psd(s2, "S2")?;
    let r1 = psd_sqrt(&e1);
    let m = &r1 * s2 * &r1;
    let m = (&m + m.transpose()) * 0.5;
    let tr_root: f64 = SymmetricEigen::new(m)
        .eigenvalues
        .iter()
        .map(|l| l.max(0.0).sqrt())
        .sum();
    let diff = mu1 - mu2;
    let fd = diff.dot(&diff) + s1.trace() + s2.trace() - 2.0 * tr_root;
    Ok(fd.max(0.0))
}

fn same_space(a: &FeatureSet, b: &FeatureSet) -> Result<()> {
    if a.extractor_id != b.extractor_id {
        return Err(Error::validation(
            "features",
            format!("extractors differ: {} vs {}", a.extractor_id, b.extractor_id),
        ));
    }
    if a.dim() != b.dim() {
        return Err(Error::validation("features", "feature widths differ"));
    }
    Ok(())
}

pub fn fid(real: &FeatureSet, generated: &FeatureSet) -> Result<f64> {
    same_space(real, generated)?;
    let (m1, s1) = mean_cov(real)?;
    let (m2, s2) = mean_cov(generated)?;
    frechet_distance(&m1, &s1, &m2, &s2)
}

/// Polynomial kernel `(xᵀy / d + 1)^degree`.
pub fn poly_kernel(x: &[f64], y: &[f64], degree: i32) -> f64 {
    let d = x.len().max(1) as f64;
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    (dot / d + 1.0).powi(degree)
}

/// Unbiased squared MMD between two feature sets under [`poly_kernel`].
/// Reported unscaled.
pub fn kid(x: &FeatureSet, y: &FeatureSet, degree: i32) -> Result<f64> {
    same_space(x, y)?;
    let (m, n) = (x.len(), y.len());
    if m < 2 || n < 2 {
        return Err(Error::validation("features", "KID needs at least two rows per set"));
    }
    let d = x.dim() as f64;
    let to_mat = |s: &FeatureSet| DMatrix::from_fn(s.len(), s.dim(), |i, j| s.features[i][j]);
    let (xm, ym) = (to_mat(x), to_mat(y));
    let k = |g: DMatrix<f64>| g.map(|v| (v / d + 1.0).powi(degree));
    let kxx = k(&xm * xm.transpose());
    let kyy = k(&ym * ym.transpose());
    let kxy = k(&xm * ym.transpose());
    let off = |g: &DMatrix<f64>| g.sum() - g.trace();
    let (mf, nf) = (m as f64, n as f64);
    Ok(off(&kxx) / (mf * (mf - 1.0)) + off(&kyy) / (nf * (nf - 1.0)) - 2.0 * kxy.sum() / (mf * nf))
}
