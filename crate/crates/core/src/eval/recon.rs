use std::path::Path;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::fad::csv_err;
use crate::audio::Waveform;
use crate::codec::Codec;
use crate::error::{Error, Result};

pub const RECON_EPSILON: f64 = 1e-12;

/// Anything that maps audio to a reconstruction of itself.
pub trait Reconstructor {
    fn reconstruct(&self, w: &Waveform) -> Result<Waveform>;
}

impl Reconstructor for Codec {
    fn reconstruct(&self, w: &Waveform) -> Result<Waveform> {
        self.detokenize(&self.tokenize(w)?)
    }
}

/// Returns its input.
pub struct IdentityStub;

impl Reconstructor for IdentityStub {
    fn reconstruct(&self, w: &Waveform) -> Result<Waveform> {
        Ok(w.clone())
    }
}

/// Returns silence.
pub struct ZeroStub;

impl Reconstructor for ZeroStub {
    fn reconstruct(&self, w: &Waveform) -> Result<Waveform> {
        Ok(Waveform::zeros(w.len(), w.sample_rate))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconStudy {
    pub chunk_ms: f64,
    pub chunk_len: usize,
    pub sample_rate: u32,
    pub frequencies: Vec<f64>,
    /// Mean normalized error per bin; 0 where `counts` is 0.
    pub errors: Vec<f64>,
    /// Chunks contributing to each bin (those with energy above epsilon).
    pub counts: Vec<usize>,
}

/// Chunk length in samples: `round(ms * sr / 1000)` rounded up to even, so
/// the one-sided spectrum has `ceil(C / 2) + 1` bins.
pub fn chunk_len(chunk_ms: f64, sample_rate: u32) -> usize {
    let c = (chunk_ms * sample_rate as f64 / 1000.0).round() as usize;
    c + c % 2
}

/// Average of `(|X| - |X_hat|)^2 / |X|^2` over all non-overlapping chunks of
/// every recording, per frequency bin. Bins with `|X|^2 <= eps` are skipped.
pub fn recon_error_study(rec: &dyn Reconstructor, corpus: &[Waveform], chunk_ms: f64) -> Result<ReconStudy> {
    let first = corpus.first().ok_or_else(|| Error::InsufficientData("empty corpus".into()))?;
    let sr = first.sample_rate;
    if corpus.iter().any(|w| w.sample_rate != sr) {
        return Err(Error::InvalidArgument("recordings must share one sample rate".into()));
    }
    let c = chunk_len(chunk_ms, sr);
    if !(chunk_ms.is_finite() && chunk_ms > 0.0) || c < 4 {
        return Err(Error::InvalidArgument(format!("chunk of {chunk_ms} ms is shorter than 4 samples")));
    }
    let bins = c / 2 + 1;
    let fft = FftPlanner::new().plan_fft_forward(c);
    let spectrum = |s: &[f64]| -> Vec<f64> {
        let mut buf: Vec<Complex64> = s.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        fft.process(&mut buf);
        buf[..bins].iter().map(|z| z.norm()).collect()
    };
    let mut sums = vec![0.0; bins];
    let mut counts = vec![0usize; bins];
    for w in corpus {
        let mut y = rec.reconstruct(w)?.samples;
        y.resize(w.len(), 0.0);
        for (xc, yc) in w.samples.chunks_exact(c).zip(y.chunks_exact(c)) {
            let (xs, ys) = (spectrum(xc), spectrum(yc));
            for b in 0..bins {
                let e = xs[b] * xs[b];
                if e > RECON_EPSILON {
                    sums[b] += (xs[b] - ys[b]).powi(2) / e;
                    counts[b] += 1;
                }
            }
        }
    }
    let errors = sums.iter().zip(&counts).map(|(s, &n)| if n > 0 { s / n as f64 } else { 0.0 }).collect();
    Ok(ReconStudy {
        chunk_ms,
        chunk_len: c,
        sample_rate: sr,
        frequencies: (0..bins).map(|b| b as f64 * sr as f64 / c as f64).collect(),
        errors,
        counts,
    })
}

impl ReconStudy {
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        w.write_record(["chunk_ms", "bin", "frequency_hz", "error", "count"]).map_err(csv_err)?;
        for b in 0..self.errors.len() {
            w.write_record([
                self.chunk_ms.to_string(),
                b.to_string(),
                self.frequencies[b].to_string(),
                self.errors[b].to_string(),
                self.counts[b].to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}
