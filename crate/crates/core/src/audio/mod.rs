//! Audio primitives shared by every other stage.

mod denoise;
mod onset;
mod resample;
mod stft;
mod wav;

pub use denoise::{estimate_noise_profile, spectral_subtract, NoiseProfile, DEFAULT_SPECTRAL_FLOOR};
pub use onset::{detect_onsets, OnsetParams};
pub use resample::{resample, sinc, kaiser};
pub use stft::{hann, istft, stft, Spectrogram};
pub use wav::{load_wav, save_wav, SampleFormat};

use crate::error::{Error, Result};

/// Mono sample buffer with its sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidArgument("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::Numerical(format!("non-finite sample at index {i}")));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn zeros(len: usize, sample_rate: u32) -> Self {
        Self { samples: vec![0.0; len], sample_rate }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn rms(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        (self.samples.iter().map(|s| s * s).sum::<f64>() / self.samples.len() as f64).sqrt()
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0f64, |m, s| m.max(s.abs()))
    }
}

/// Standardize to zero mean and unit population variance.
pub fn normalize(w: &Waveform) -> Result<Waveform> {
    let n = w.samples.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("normalize needs at least 2 samples, got {n}")));
    }
    let mean = w.samples.iter().sum::<f64>() / n as f64;
    let var = w.samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n as f64;
    // below this the rescale amplifies rounding noise rather than signal
    if !(var > 1e-24) {
        return Err(Error::DegenerateSignal("zero-variance input cannot be normalized".into()));
    }
    let inv = 1.0 / var.sqrt();
    Ok(Waveform {
        samples: w.samples.iter().map(|s| (s - mean) * inv).collect(),
        sample_rate: w.sample_rate,
    })
}
