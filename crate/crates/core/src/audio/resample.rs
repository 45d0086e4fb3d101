use std::f64::consts::PI;

use super::Waveform;
use crate::error::{Error, Result};

/// Half-width of the interpolation kernel, in input samples at unit cutoff.
const HALF_TAPS: f64 = 48.0;
const KAISER_BETA: f64 = 10.0;
/// Cutoff as a fraction of the lower Nyquist frequency.
const ROLLOFF: f64 = 0.94;

/// Normalized sinc, sin(pi x) / (pi x).
pub fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        let px = PI * x;
        px.sin() / px
    }
}

fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..64 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

/// Kaiser window evaluated at `t` in [-1, 1]; zero outside.
pub fn kaiser(t: f64, beta: f64) -> f64 {
    if t.abs() > 1.0 {
        return 0.0;
    }
    bessel_i0(beta * (1.0 - t * t).sqrt()) / bessel_i0(beta)
}

/// Band-limited resampling with a Kaiser-windowed sinc kernel.
///
/// Output length is `round(len * target / rate)`. The kernel cutoff tracks
/// the lower of the two Nyquist frequencies so downsampling is anti-aliased.
pub fn resample(w: &Waveform, target: u32) -> Result<Waveform> {
    if target == 0 {
        return Err(Error::InvalidArgument("target sample rate must be positive".into()));
    }
    if target == w.sample_rate {
        return Ok(w.clone());
    }
    let ratio = target as f64 / w.sample_rate as f64;
    let out_len = (w.len() as f64 * ratio).round() as usize;
    let cutoff = ROLLOFF * ratio.min(1.0);
    let radius = HALF_TAPS / cutoff;
    let n = w.len() as isize;
    let x = &w.samples;
    let samples = (0..out_len)
        .map(|i| {
            let t = i as f64 / ratio;
            let lo = ((t - radius).ceil() as isize).max(0);
            let hi = ((t + radius).floor() as isize).min(n - 1);
            let mut acc = 0.0;
            for j in lo..=hi {
                let d = t - j as f64;
                acc += x[j as usize] * cutoff * sinc(cutoff * d) * kaiser(d / radius, KAISER_BETA);
            }
            acc
        })
        .collect();
    Ok(Waveform { samples, sample_rate: target })
}
