use rustfft::num_complex::Complex64;

use super::{istft, stft, Spectrogram, Waveform};
use crate::error::{Error, Result};

pub const DEFAULT_SPECTRAL_FLOOR: f64 = 0.02;

/// Mean magnitude spectrum of noise-only frames.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseProfile {
    pub magnitude: Vec<f64>,
    pub window_len: usize,
    pub hop: usize,
    pub sample_rate: u32,
}

/// Average |STFT| over frames lying wholly outside every `[start, end)` range.
pub fn estimate_noise_profile(
    w: &Waveform,
    exclusions: &[(usize, usize)],
    window_len: usize,
    hop: usize,
) -> Result<NoiseProfile> {
    let spec = stft(w, window_len, hop)?;
    let mut magnitude = vec![0.0; spec.num_bins()];
    let mut used = 0usize;
    for m in 0..spec.num_frames() {
        let (lo, hi) = (m * hop, m * hop + window_len);
        if exclusions.iter().any(|&(s, e)| s < hi && lo < e) {
            continue;
        }
        for (acc, c) in magnitude.iter_mut().zip(spec.bins.row(m)) {
            *acc += c.norm();
        }
        used += 1;
    }
    if used == 0 {
        return Err(Error::InsufficientData("no frame lies outside the exclusion ranges".into()));
    }
    magnitude.iter_mut().for_each(|m| *m /= used as f64);
    Ok(NoiseProfile { magnitude, window_len, hop, sample_rate: w.sample_rate })
}

/// Magnitude spectral subtraction with a spectral floor, keeping phase.
///
/// Each bin becomes `max(|X| - noise, floor * |X|)`. The signal is zero-padded
/// by one window on each side so every original sample is fully covered.
pub fn spectral_subtract(w: &Waveform, p: &NoiseProfile, floor: f64) -> Result<Waveform> {
    if !(0.0..=1.0).contains(&floor) {
        return Err(Error::InvalidArgument(format!("spectral floor {floor} outside [0, 1]")));
    }
    if p.sample_rate != w.sample_rate || p.magnitude.len() != p.window_len / 2 + 1 {
        return Err(Error::Shape(format!(
            "noise profile ({} bins, window {}, {} Hz) does not match signal at {} Hz",
            p.magnitude.len(),
            p.window_len,
            p.sample_rate,
            w.sample_rate
        )));
    }
    let pad = p.window_len;
    let mut padded = vec![0.0; pad];
    padded.extend_from_slice(&w.samples);
    padded.extend(std::iter::repeat_n(0.0, pad + p.hop));
    let padded = Waveform { samples: padded, sample_rate: w.sample_rate };
    let mut spec = stft(&padded, p.window_len, p.hop)?;
    subtract_magnitudes(&mut spec, &p.magnitude, floor);
    let out = istft(&spec)?;
    Waveform::new(out.samples[pad..pad + w.len()].to_vec(), w.sample_rate)
}

fn subtract_magnitudes(spec: &mut Spectrogram, noise: &[f64], floor: f64) {
    for mut row in spec.bins.rows_mut() {
        for (c, &n) in row.iter_mut().zip(noise) {
            let mag = c.norm();
            if mag == 0.0 {
                continue;
            }
            *c = Complex64::from_polar((mag - n).max(floor * mag), c.arg());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal, rng_from};

    fn white(len: usize, seed: u64, scale: f64) -> Waveform {
        let mut rng = rng_from(seed);
        Waveform::new((0..len).map(|_| scale * normal(&mut rng)).collect(), 16000).unwrap()
    }

    #[test]
    fn white_noise_profile_is_flat() {
        let w = white(64000, 1, 0.1);
        let p = estimate_noise_profile(&w, &[], 512, 256).unwrap();
        let mean = p.magnitude.iter().sum::<f64>() / p.magnitude.len() as f64;
        for (k, m) in p.magnitude.iter().enumerate() {
            assert!((m / mean - 1.0).abs() < 0.2, "bin {k}: {m} vs mean {mean}");
        }
    }

    #[test]
    fn all_frames_excluded_is_error() {
        let w = white(4000, 2, 1.0);
        assert!(estimate_noise_profile(&w, &[(0, 4000)], 512, 256).is_err());
    }

    #[test]
    fn silence_profile_is_zero() {
        let p = estimate_noise_profile(&Waveform::zeros(4000, 16000), &[], 256, 128).unwrap();
        assert!(p.magnitude.iter().all(|&m| m == 0.0));
    }

    #[test]
    fn excluded_frames_are_skipped() {
        let mut w = white(8000, 3, 0.01);
        for s in &mut w.samples[4000..4100] {
            *s += 5.0;
        }
        let clean = estimate_noise_profile(&w, &[(4000, 4100)], 256, 128).unwrap();
        let dirty = estimate_noise_profile(&w, &[], 256, 128).unwrap();
        assert!(clean.magnitude[0] < dirty.magnitude[0] / 5.0);
    }

    /// Residual power fraction E[(R - mu)_+^2] / E[R^2] for a Rayleigh
    /// magnitude R with mean mu, by Simpson quadrature.
    fn rayleigh_residual_db() -> f64 {
        let mu = (std::f64::consts::PI / 2.0).sqrt();
        let f = |r: f64| (r - mu).powi(2) * r * (-r * r / 2.0).exp();
        let (a, b, n) = (mu, mu + 15.0, 20_000);
        let h = (b - a) / n as f64;
        let mut s = f(a) + f(b);
        for i in 1..n {
            s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        10.0 * (s * h / 3.0 / 2.0).log10()
    }

    #[test]
    fn self_profiled_noise_reduction_matches_rayleigh_bound() {
        let analytic = rayleigh_residual_db();
        assert!((analytic + 9.0).abs() < 0.01, "{analytic}");
        let w = white(64000, 4, 0.3);
        let p = estimate_noise_profile(&w, &[], 512, 256).unwrap();
        let out = spectral_subtract(&w, &p, DEFAULT_SPECTRAL_FLOOR).unwrap();
        let db = 20.0 * (out.rms() / w.rms()).log10();
        // overlap-add of the modified frames only removes more energy
        assert!(db <= analytic + 0.1, "reduction only {db:.2} dB vs {analytic:.2} dB");
        assert!(db >= analytic - 2.0, "{db:.2} dB");
    }

    #[test]
    fn zero_profile_is_identity() {
        let w = white(6000, 5, 1.0);
        let p = NoiseProfile { magnitude: vec![0.0; 257], window_len: 512, hop: 256, sample_rate: 16000 };
        let out = spectral_subtract(&w, &p, 0.02).unwrap();
        let err = out.samples.iter().zip(&w.samples).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn unit_floor_is_identity() {
        let w = white(6000, 6, 1.0);
        let p = estimate_noise_profile(&w, &[], 512, 256).unwrap();
        let out = spectral_subtract(&w, &p, 1.0).unwrap();
        let err = out.samples.iter().zip(&w.samples).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-9, "{err}");
    }

    proptest::proptest! {
        #[test]
        fn subtracted_frames_respect_floor(seed in 0u64..500, floor in 0.0f64..1.0, level in 0.0f64..3.0) {
            let w = white(2048, seed, 1.0);
            let p = estimate_noise_profile(&w, &[], 256, 128).unwrap();
            let noise: Vec<f64> = p.magnitude.iter().map(|m| m * level).collect();
            let before = stft(&w, 256, 128).unwrap();
            let mut after = before.clone();
            subtract_magnitudes(&mut after, &noise, floor);
            for (a, b) in after.bins.iter().zip(before.bins.iter()) {
                proptest::prop_assert!(a.norm().is_finite());
                proptest::prop_assert!(a.norm() >= floor * b.norm() - 1e-12);
            }
            let out = spectral_subtract(&w, &NoiseProfile { magnitude: noise, ..p }, floor).unwrap();
            proptest::prop_assert!(out.samples.iter().all(|s| s.is_finite()));
        }
    }

    #[test]
    fn geometry_mismatch() {
        let w = white(4000, 8, 1.0);
        let p = NoiseProfile { magnitude: vec![0.0; 10], window_len: 512, hop: 256, sample_rate: 16000 };
        assert!(matches!(spectral_subtract(&w, &p, 0.02), Err(Error::Shape(_))));
        let p = NoiseProfile { magnitude: vec![0.0; 257], window_len: 512, hop: 256, sample_rate: 8000 };
        assert!(matches!(spectral_subtract(&w, &p, 0.02), Err(Error::Shape(_))));
    }
}
