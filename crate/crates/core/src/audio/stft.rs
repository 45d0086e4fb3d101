use std::f64::consts::PI;

use ndarray::Array2;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use super::Waveform;
use crate::error::{Error, Result};

/// Complex short-time spectrum. `bins` has shape (frames, window_len / 2 + 1).
#[derive(Debug, Clone)]
pub struct Spectrogram {
    pub bins: Array2<Complex64>,
    pub window_len: usize,
    pub hop: usize,
    pub sample_rate: u32,
    /// Length of the analysed signal, restored by [`istft`].
    pub signal_len: usize,
}

impl Spectrogram {
    pub fn num_frames(&self) -> usize {
        self.bins.nrows()
    }

    pub fn num_bins(&self) -> usize {
        self.bins.ncols()
    }
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect()
}

/// Hann-windowed STFT without padding: `1 + (len - window_len) / hop` frames.
pub fn stft(w: &Waveform, window_len: usize, hop: usize) -> Result<Spectrogram> {
    if window_len < 2 {
        return Err(Error::InvalidArgument("window must be at least 2 samples".into()));
    }
    if hop == 0 {
        return Err(Error::InvalidArgument("hop must be positive".into()));
    }
    if window_len > w.len() {
        return Err(Error::InvalidArgument(format!(
            "window of {window_len} samples exceeds signal of {}",
            w.len()
        )));
    }
    let frames = 1 + (w.len() - window_len) / hop;
    let nbins = window_len / 2 + 1;
    let window = hann(window_len);
    let fft = FftPlanner::new().plan_fft_forward(window_len);
    let mut bins = Array2::zeros((frames, nbins));
    let mut buf = vec![Complex64::new(0.0, 0.0); window_len];
    for m in 0..frames {
        let start = m * hop;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = Complex64::new(w.samples[start + i] * window[i], 0.0);
        }
        fft.process(&mut buf);
        for (k, v) in buf[..nbins].iter().enumerate() {
            bins[[m, k]] = *v;
        }
    }
    Ok(Spectrogram { bins, window_len, hop, sample_rate: w.sample_rate, signal_len: w.len() })
}

/// Weighted overlap-add inverse (least-squares ISTFT).
///
/// Requires `hop <= window_len / 2`. Samples not covered by any frame are 0.
pub fn istft(s: &Spectrogram) -> Result<Waveform> {
    let n = s.window_len;
    if s.hop == 0 || s.hop > n / 2 {
        return Err(Error::InvalidArgument(format!(
            "hop {} violates the overlap-add condition for window {n}",
            s.hop
        )));
    }
    if s.num_bins() != n / 2 + 1 {
        return Err(Error::Shape(format!("{} bins for window {n}", s.num_bins())));
    }
    let window = hann(n);
    let ifft = FftPlanner::new().plan_fft_inverse(n);
    let mut out = vec![0.0; s.signal_len];
    let mut norm = vec![0.0; s.signal_len];
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for m in 0..s.num_frames() {
        let row = s.bins.row(m);
        for k in 0..n {
            buf[k] = if k < row.len() { row[k] } else { row[n - k].conj() };
        }
        // imaginary parts of DC / Nyquist bins carry no real-signal content
        buf[0].im = 0.0;
        if n % 2 == 0 {
            buf[n / 2].im = 0.0;
        }
        ifft.process(&mut buf);
        let start = m * s.hop;
        for i in 0..n {
            let t = start + i;
            if t >= s.signal_len {
                break;
            }
            out[t] += buf[i].re / n as f64 * window[i];
            norm[t] += window[i] * window[i];
        }
    }
    for (o, d) in out.iter_mut().zip(&norm) {
        *o = if *d > 1e-10 { *o / d } else { 0.0 };
    }
    Waveform::new(out, s.sample_rate)
}
