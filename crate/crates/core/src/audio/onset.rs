use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use super::{hann, Waveform};
use crate::error::{Error, Result};

/// Frames on each side of the rolling-median window.
const MEDIAN_HALF_WINDOW: usize = 16;
/// Novelty below this fraction of the strongest peak is treated as silence.
const RELATIVE_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OnsetParams {
    pub frame: usize,
    pub hop: usize,
    pub threshold: f64,
}

impl Default for OnsetParams {
    fn default() -> Self {
        Self { frame: 256, hop: 32, threshold: 3.0 }
    }
}

impl OnsetParams {
    pub fn detect(&self, w: &Waveform) -> Result<Vec<usize>> {
        detect_onsets(w, self.frame, self.hop, self.threshold)
    }
}

/// Half-wave-rectified spectral flux of centred Hann frames.
fn spectral_flux(w: &Waveform, frame: usize, hop: usize) -> Vec<f64> {
    let half = frame / 2;
    let mut padded = vec![0.0; half];
    padded.extend_from_slice(&w.samples);
    padded.resize(padded.len().max(frame) + half, 0.0);
    let frames = 1 + (padded.len() - frame) / hop;
    let window = hann(frame);
    let fft = FftPlanner::new().plan_fft_forward(frame);
    let nbins = frame / 2 + 1;
    let mut prev = vec![0.0; nbins];
    let mut buf = vec![Complex64::new(0.0, 0.0); frame];
    let mut flux = Vec::with_capacity(frames);
    for m in 0..frames {
        let start = m * hop;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = Complex64::new(padded[start + i] * window[i], 0.0);
        }
        fft.process(&mut buf);
        let mut f = 0.0;
        for (k, p) in prev.iter_mut().enumerate() {
            let mag = buf[k].norm();
            f += (mag - *p).max(0.0);
            *p = mag;
        }
        flux.push(f);
    }
    flux
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Spectral-flux onset detector.
///
/// A frame is an onset when its novelty is a local maximum, exceeds
/// `threshold` times the rolling median, and lies at least `frame` samples
/// after the previous onset. Returned indices are sample positions.
pub fn detect_onsets(w: &Waveform, frame: usize, hop: usize, threshold: f64) -> Result<Vec<usize>> {
    if frame < 32 {
        return Err(Error::InvalidArgument(format!("onset frame {frame} shorter than 32")));
    }
    if hop == 0 {
        return Err(Error::InvalidArgument("onset hop must be positive".into()));
    }
    if w.is_empty() {
        return Ok(Vec::new());
    }
    let flux = spectral_flux(w, frame, hop);
    let peak = flux.iter().cloned().fold(0.0, f64::max);
    if peak <= 0.0 {
        return Ok(Vec::new());
    }
    let floor = RELATIVE_FLOOR * peak;
    let mut onsets: Vec<usize> = Vec::new();
    let mut scratch = Vec::with_capacity(2 * MEDIAN_HALF_WINDOW + 1);
    for m in 0..flux.len() {
        let f = flux[m];
        if f <= floor {
            continue;
        }
        let left = if m > 0 { flux[m - 1] } else { 0.0 };
        let right = flux.get(m + 1).copied().unwrap_or(0.0);
        if f < left || f <= right {
            continue;
        }
        scratch.clear();
        scratch.extend_from_slice(
            &flux[m.saturating_sub(MEDIAN_HALF_WINDOW)..(m + MEDIAN_HALF_WINDOW + 1).min(flux.len())],
        );
        if f <= threshold * median(&mut scratch) {
            continue;
        }
        // the flux of a Hann frame rises fastest when the transient sits a
        // quarter window ahead of the frame centre
        let pos = (m * hop + frame / 4).min(w.len() - 1);
        if onsets.last().is_some_and(|&last| pos < last + frame) {
            continue;
        }
        onsets.push(pos);
    }
    Ok(onsets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn silence_has_no_onsets() {
        assert!(detect_onsets(&Waveform::zeros(16000, 16000), 256, 32, 3.0).unwrap().is_empty());
    }

    #[test]
    fn single_impulse() {
        let mut w = Waveform::zeros(16000, 16000);
        w.samples[8000] = 1.0;
        let on = detect_onsets(&w, 256, 32, 3.0).unwrap();
        assert_eq!(on.len(), 1, "{on:?}");
        assert!((on[0] as i64 - 8000).abs() <= 256);
    }

    #[test]
    fn two_impulses_quarter_second_apart() {
        let mut w = Waveform::zeros(16000, 16000);
        w.samples[4000] = 1.0;
        w.samples[8000] = 1.0;
        let on = detect_onsets(&w, 256, 32, 3.0).unwrap();
        assert_eq!(on.len(), 2, "{on:?}");
        assert!((on[1] as i64 - on[0] as i64 - 4000).abs() <= 32);
    }

    #[test]
    fn impulse_at_start_is_found() {
        let mut w = Waveform::zeros(4000, 16000);
        w.samples[0] = 1.0;
        let on = detect_onsets(&w, 256, 32, 3.0).unwrap();
        assert_eq!(on.len(), 1);
        assert!(on[0] <= 80);
    }

    #[test]
    fn short_frame_rejected() {
        assert!(detect_onsets(&Waveform::zeros(100, 16000), 16, 8, 3.0).is_err());
    }

    proptest! {
        #[test]
        fn onsets_sorted_and_in_range(seed in 0u64..1000, n in 1usize..6) {
            let mut rng = crate::rng::rng_from(seed);
            let mut w = Waveform::zeros(12000, 16000);
            for _ in 0..n {
                use rand::Rng;
                let i = rng.random_range(0..w.len());
                w.samples[i] = rng.random_range(-1.0..1.0);
            }
            let on = detect_onsets(&w, 128, 32, 3.0).unwrap();
            prop_assert!(on.windows(2).all(|p| p[0] < p[1]));
            prop_assert!(on.iter().all(|&i| i < w.len()));
        }
    }
}
