use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, Axis};

use crate::audio::Waveform;
use crate::error::{Error, Result};

/// Linear frame analysis / synthesis pair.
///
/// Column `t` of a grid covers samples `[t * hop, t * hop + frame_len)`.
/// Analysis projects a mean-removed frame onto the top principal axes and
/// divides by one global scale; synthesis is the exact pseudo-inverse.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameTransform {
    pub frame_len: usize,
    pub hop: usize,
    pub sample_rate: u32,
    pub mean: Array1<f64>,
    /// dim x frame_len
    pub analysis: Array2<f64>,
    /// frame_len x dim
    pub synthesis: Array2<f64>,
}

impl FrameTransform {
    pub fn dim(&self) -> usize {
        self.analysis.nrows()
    }

    /// Fit by PCA of the rows of `frames` (N x frame_len).
    pub fn fit(frames: &Array2<f64>, dim: usize, hop: usize, sample_rate: u32) -> Result<Self> {
        let (n, frame_len) = frames.dim();
        if dim == 0 || dim > frame_len {
            return Err(Error::InvalidArgument(format!("feature width {dim} must be in 1..={frame_len}")));
        }
        if n < 2 {
            return Err(Error::InsufficientData("PCA needs at least two frames".into()));
        }
        if frames.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite frame values".into()));
        }
        let mean = frames.mean_axis(Axis(0)).expect("n >= 2");
        let centered = frames - &mean;
        let cov = centered.t().dot(&centered) / n as f64;
        let m = DMatrix::from_fn(frame_len, frame_len, |i, j| 0.5 * (cov[[i, j]] + cov[[j, i]]));
        let eig = SymmetricEigen::new(m);
        let mut order: Vec<usize> = (0..frame_len).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
        let top = &order[..dim];
        let energy = top.iter().map(|&i| eig.eigenvalues[i].max(0.0)).sum::<f64>() / dim as f64;
        let scale = if energy > 1e-30 { energy.sqrt() } else { 1.0 };
        let mut basis = Array2::zeros((frame_len, dim));
        for (c, &i) in top.iter().enumerate() {
            let v = eig.eigenvectors.column(i);
            // sign convention: largest-magnitude component positive
            let pivot = (0..frame_len).max_by(|&a, &b| v[a].abs().total_cmp(&v[b].abs())).unwrap();
            let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
            for r in 0..frame_len {
                basis[[r, c]] = sign * v[r];
            }
        }
        Ok(Self {
            frame_len,
            hop,
            sample_rate,
            mean,
            analysis: basis.t().as_standard_layout().to_owned() / scale,
            synthesis: basis * scale,
        })
    }

    /// Number of grid columns for a signal of `len` samples.
    pub fn columns_for(&self, len: usize) -> usize {
        len.div_ceil(self.hop)
    }

    /// Zero-padded frames, one row per column.
    pub fn frames(&self, w: &Waveform) -> Array2<f64> {
        let cols = self.columns_for(w.len());
        let mut out = Array2::zeros((cols, self.frame_len));
        for t in 0..cols {
            let start = t * self.hop;
            let end = (start + self.frame_len).min(w.len());
            for (i, s) in w.samples[start..end].iter().enumerate() {
                out[[t, i]] = *s;
            }
        }
        out
    }

    /// N x frame_len -> N x dim
    pub fn encode(&self, frames: &Array2<f64>) -> Array2<f64> {
        (frames - &self.mean).dot(&self.analysis.t())
    }

    /// N x dim -> N x frame_len
    pub fn decode(&self, features: &Array2<f64>) -> Array2<f64> {
        features.dot(&self.synthesis.t()) + &self.mean
    }

    /// Overlap-add frames into `L * hop` samples, averaging overlaps.
    pub fn overlap_add(&self, frames: &Array2<f64>) -> Vec<f64> {
        let cols = frames.nrows();
        let len = cols * self.hop;
        let mut out = vec![0.0; len];
        let mut count = vec![0u32; len];
        for t in 0..cols {
            let start = t * self.hop;
            for i in 0..self.frame_len {
                let idx = start + i;
                if idx >= len {
                    break;
                }
                out[idx] += frames[[t, i]];
                count[idx] += 1;
            }
        }
        for (o, c) in out.iter_mut().zip(count) {
            if c > 1 {
                *o /= c as f64;
            }
        }
        out
    }
}
