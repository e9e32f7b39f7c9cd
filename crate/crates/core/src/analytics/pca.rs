use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Labelled vectors of a common width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingSet {
    pub ids: Vec<String>,
    pub labels: Vec<String>,
    pub vectors: Vec<Vec<f64>>,
}

impl EmbeddingSet {
    pub fn new(ids: Vec<String>, labels: Vec<String>, vectors: Vec<Vec<f64>>) -> Result<Self> {
        if ids.len() != vectors.len() || labels.len() != vectors.len() {
            return Err(Error::validation(
                "embeddings",
                "ids, labels and vectors differ in length",
            ));
        }
        let d = vectors.first().map_or(0, Vec::len);
        if vectors.iter().any(|v| v.len() != d) {
            return Err(Error::validation("embeddings", "vectors differ in width"));
        }
        if vectors.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::validation("embeddings", "non-finite entry"));
        }
        Ok(Self { ids, labels, vectors })
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.first().map_or(0, Vec::len)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// `k` orthonormal rows of width `d`; the largest-magnitude entry of each
    /// row is positive.
    pub components: Vec<Vec<f64>>,
    /// Variance along each component (n − 1 denominator), non-increasing.
    pub explained_variance: Vec<f64>,
    /// Sum of per-coordinate variances of the fitted data.
    pub total_variance: f64,
}

/// Centred PCA through the thin SVD of the data matrix.
pub fn pca_fit(vectors: &[Vec<f64>], k: usize) -> Result<PcaModel> {
    let n = vectors.len();
    let d = vectors.first().map_or(0, Vec::len);
    if n < 2 || d == 0 {
        return Err(Error::validation("vectors", "need at least two non-empty vectors"));
    }
    if vectors.iter().any(|v| v.len() != d) {
        return Err(Error::validation("vectors", "vectors differ in width"));
    }
    if k == 0 || k > n.min(d) {
        return Err(Error::validation("k", format!("must be in 1..={}", n.min(d))));
    }
    let mean: Vec<f64> = (0..d)
        .map(|j| vectors.iter().map(|v| v[j]).sum::<f64>() / n as f64)
        .collect();
    let x = DMatrix::from_fn(n, d, |i, j| vectors[i][j] - mean[j]);
    let total_variance = x.iter().map(|v| v * v).sum::<f64>() / (n - 1) as f64;
    let svd = x.svd(false, true);
    let vt = svd
        .v_t
        .ok_or_else(|| Error::validation("pca", "decomposition failed"))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let mut components = Vec::with_capacity(k);
    let mut explained_variance = Vec::with_capacity(k);
    for &i in order.iter().take(k) {
        let mut row: Vec<f64> = vt.row(i).iter().copied().collect();
        let lead = row
            .iter()
            .copied()
            .fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
        if lead < 0.0 {
            row.iter_mut().for_each(|v| *v = -*v);
        }
        components.push(row);
        explained_variance.push(svd.singular_values[i].powi(2) / (n - 1) as f64);
    }
    Ok(PcaModel {
        mean,
        components,
        explained_variance,
        total_variance,
    })
}

impl PcaModel {
    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn explained_ratio(&self) -> Vec<f64> {
        self.explained_variance
            .iter()
            .map(|v| {
                if self.total_variance > 0.0 {
                    v / self.total_variance
                } else {
                    0.0
                }
            })
            .collect()
    }

    pub fn transform(&self, vectors: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        vectors
            .iter()
            .map(|v| {
                if v.len() != self.dim() {
                    return Err(Error::validation("vectors", "width differs from the fitted model"));
                }
                Ok(self
                    .components
                    .iter()
                    .map(|c| c.iter().zip(v).zip(&self.mean).map(|((c, x), m)| c * (x - m)).sum())
                    .collect())
            })
            .collect()
    }

    pub fn inverse_transform(&self, projected: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        projected
            .iter()
            .map(|p| {
                if p.len() != self.k() {
                    return Err(Error::validation("projection", "width differs from k"));
                }
                let mut out = self.mean.clone();
                for (coef, c) in p.iter().zip(&self.components) {
                    for (o, ci) in out.iter_mut().zip(c) {
                        *o += coef * ci;
                    }
                }
                Ok(out)
            })
            .collect()
    }
}

/// Sidecar written next to the projection CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionInfo {
    pub n: usize,
    pub d: usize,
    pub k: usize,
    pub explained_variance: Vec<f64>,
    pub explained_ratio: Vec<f64>,
    pub total_variance: f64,
}

/// Writes `id,label,pc1,pc2` rows to `csv_path` and a JSON sidecar with the
/// same stem.
pub fn export_projection(model: &PcaModel, set: &EmbeddingSet, csv_path: &Path) -> Result<ProjectionInfo> {
    if model.k() < 2 {
        return Err(Error::validation("k", "a 2-D projection needs at least two components"));
    }
    let proj = model.transform(&set.vectors)?;
    let mut w = csv::Writer::from_path(csv_path)?;
    w.write_record(["id", "label", "pc1", "pc2"])?;
    for ((id, label), p) in set.ids.iter().zip(&set.labels).zip(&proj) {
        w.write_record([id.as_str(), label.as_str(), &p[0].to_string(), &p[1].to_string()])?;
    }
    w.flush().map_err(|e| Error::io(csv_path, e))?;
    let info = ProjectionInfo {
        n: set.len(),
        d: set.dim(),
        k: model.k(),
        explained_variance: model.explained_variance.clone(),
        explained_ratio: model.explained_ratio(),
        total_variance: model.total_variance,
    };
    let side = csv_path.with_extension("json");
    let json = serde_json::to_string_pretty(&info)?;
    std::fs::write(&side, json + "\n").map_err(|e| Error::io(&side, e))?;
    Ok(info)
}
