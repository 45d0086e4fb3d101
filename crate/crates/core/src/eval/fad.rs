use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance (relative to the spectrum scale) below which negative
/// eigenvalues are treated as rounding noise and clamped to zero.
const NEG_EIG_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovarianceMode {
    /// Divide by n - 1.
    #[default]
    Unbiased,
    /// Divide by n.
    Biased,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub mean: Array1<f64>,
    pub cov: Array2<f64>,
    pub n: usize,
}

impl GaussianStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

pub fn fit_gaussian(vectors: &[Vec<f64>]) -> Result<GaussianStats> {
    fit_gaussian_with(vectors, CovarianceMode::Unbiased)
}

pub fn fit_gaussian_with(vectors: &[Vec<f64>], mode: CovarianceMode) -> Result<GaussianStats> {
    let n = vectors.len();
    if n < 2 {
        return Err(Error::InsufficientData(format!("a Gaussian fit needs at least 2 vectors, got {n}")));
    }
    let d = vectors[0].len();
    if d == 0 || vectors.iter().any(|v| v.len() != d) {
        return Err(Error::Shape("embedding vectors must share one non-zero width".into()));
    }
    if vectors.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite embedding value".into()));
    }
    let x = Array2::from_shape_fn((n, d), |(i, j)| vectors[i][j]);
    let mean = x.sum_axis(ndarray::Axis(0)) / n as f64;
    let c = &x - &mean;
    let denom = match mode {
        CovarianceMode::Unbiased => (n - 1) as f64,
        CovarianceMode::Biased => n as f64,
    };
    let raw = c.t().dot(&c) / denom;
    let cov = (&raw + &raw.t()) * 0.5;
    Ok(GaussianStats { mean, cov, n })
}

fn to_dmatrix(a: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| 0.5 * (a[[i, j]] + a[[j, i]]))
}

/// Eigen-decomposition of a symmetric PSD matrix. Small negatives and values
/// below the decomposition's resolution (`d * eps * max|lambda|`) become zero,
/// otherwise their square roots accumulate when `n < d`.
fn clamped_eigen(m: DMatrix<f64>, what: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let d = m.nrows() as f64;
    let mut eig = SymmetricEigen::new(m);
    let scale = eig.eigenvalues.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    let resolution = d * f64::EPSILON * scale;
    for v in eig.eigenvalues.iter_mut() {
        if *v < -NEG_EIG_TOL * scale {
            return Err(Error::Numerical(format!("{what} has eigenvalue {v}, not positive semi-definite")));
        }
        if *v <= resolution {
            *v = 0.0;
        }
    }
    Ok(eig)
}

/// `|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^{1/2})`, with the trace of
/// the square root taken from the symmetric matrix `S_a^{1/2} S_b S_a^{1/2}`.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.dim() != b.dim() || a.cov.dim() != (a.dim(), a.dim()) || b.cov.dim() != (b.dim(), b.dim()) {
        return Err(Error::Shape(format!("Gaussian widths {} and {} differ", a.dim(), b.dim())));
    }
    let finite = |g: &GaussianStats| g.mean.iter().chain(g.cov.iter()).all(|v| v.is_finite());
    if !finite(a) || !finite(b) {
        return Err(Error::Numerical("non-finite Gaussian statistics".into()));
    }
    let ea = clamped_eigen(to_dmatrix(&a.cov), "first covariance")?;
    let sqrt_a = &ea.eigenvectors
        * DMatrix::from_diagonal(&ea.eigenvalues.map(f64::sqrt))
        * ea.eigenvectors.transpose();
    let m = &sqrt_a * to_dmatrix(&b.cov) * &sqrt_a;
    let m = (&m + m.transpose()) * 0.5;
    let em = clamped_eigen(m, "covariance product")?;
    let tr_sqrt: f64 = em.eigenvalues.iter().map(|v| v.sqrt()).sum();
    let diff = &a.mean - &b.mean;
    let d = diff.dot(&diff) + a.cov.diag().sum() + b.cov.diag().sum() - 2.0 * tr_sqrt;
    Ok(d.max(0.0))
}

/// Fréchet distance between two embedding sets.
pub fn fad(a: &[Vec<f64>], b: &[Vec<f64>], mode: CovarianceMode) -> Result<f64> {
    frechet_distance(&fit_gaussian_with(a, mode)?, &fit_gaussian_with(b, mode)?)
}

/// Divide every distance by the maximum. The flag is set when every
/// distance is zero, in which case the zeros are returned unchanged.
pub fn normalize_fad<K: Ord + Clone>(raw: &BTreeMap<K, f64>) -> Result<(BTreeMap<K, f64>, bool)> {
    if raw.is_empty() {
        return Err(Error::InvalidArgument("no distances to normalize".into()));
    }
    if raw.values().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Numerical("distances must be finite and non-negative".into()));
    }
    let max = raw.values().fold(0.0f64, |a, &b| a.max(b));
    if max == 0.0 {
        return Ok((raw.clone(), true));
    }
    Ok((raw.iter().map(|(k, v)| (k.clone(), v / max)).collect(), false))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FadEntry {
    pub set_a: String,
    pub set_b: String,
    pub raw: f64,
    pub normalized: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FadReport {
    pub embedding: String,
    pub entries: Vec<FadEntry>,
    pub degenerate: bool,
    /// Reference distance between disjoint samples of the target set, when
    /// one was computed.
    pub baseline: Option<f64>,
}

impl FadReport {
    /// Distances for every unordered pair of named embedding sets.
    pub fn pairwise(embedding: &str, sets: &[(String, Vec<Vec<f64>>)], mode: CovarianceMode) -> Result<Self> {
        let stats = sets
            .iter()
            .map(|(name, v)| Ok((name.clone(), fit_gaussian_with(v, mode)?)))
            .collect::<Result<Vec<_>>>()?;
        let mut raw = BTreeMap::new();
        for i in 0..stats.len() {
            for j in i + 1..stats.len() {
                raw.insert((stats[i].0.clone(), stats[j].0.clone()), frechet_distance(&stats[i].1, &stats[j].1)?);
            }
        }
        Self::from_raw(embedding, raw, None)
    }

    pub fn from_raw(embedding: &str, raw: BTreeMap<(String, String), f64>, baseline: Option<f64>) -> Result<Self> {
        let (norm, degenerate) = normalize_fad(&raw)?;
        let entries = raw
            .iter()
            .map(|((a, b), &r)| FadEntry { set_a: a.clone(), set_b: b.clone(), raw: r, normalized: norm[&(a.clone(), b.clone())] })
            .collect();
        Ok(Self { embedding: embedding.into(), entries, degenerate, baseline })
    }

    pub fn raw(&self, a: &str, b: &str) -> Option<f64> {
        self.entries
            .iter()
            .find(|e| (e.set_a == a && e.set_b == b) || (e.set_a == b && e.set_b == a))
            .map(|e| e.raw)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        w.write_record(["embedding", "set_a", "set_b", "raw", "normalized"]).map_err(csv_err)?;
        for e in &self.entries {
            w.write_record([&self.embedding, &e.set_a, &e.set_b, &e.raw.to_string(), &e.normalized.to_string()])
                .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::InvalidArgument(format!("csv: {other:?}")),
    }
}
