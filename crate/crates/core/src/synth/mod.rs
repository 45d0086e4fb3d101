//! Parametric click-train synthesis standing in for field recordings.
//!
//! Clicks are multi-pulse noise bursts: a broadband attack followed by
//! decaying copies spaced by the inter-pulse interval. Codas arrange clicks
//! by a rhythm (inter-click intervals); echolocation trains space them
//! evenly; beeps are isolated unit samples in silence.

mod corpus;

pub use corpus::{
    build_corpus, generate_corpus, CorpusConfig, CorpusItem, DatasetManifest, ManifestEntry,
    NO_LABEL, RhythmClass, Split, UnitClass, VowelClass, TASKS,
};

use rand::seq::index;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::audio::{kaiser, sinc, Waveform};
use crate::error::{Error, Result};
use crate::rng::rng_from;

/// Maximum coda duration in seconds (exclusive).
pub const MAX_CODA_SECONDS: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClickParams {
    pub num_pulses: usize,
    /// Inter-pulse interval in seconds.
    pub ipi: f64,
    /// Amplitude ratio between consecutive pulses, in (0, 1].
    pub decay: f64,
    /// Pulse length in seconds.
    pub pulse_width: f64,
    #[serde(default)]
    pub lowpass_hz: Option<f64>,
    /// Seed of the noise burst shared by all pulses of the click.
    #[serde(default)]
    pub seed: u64,
}

impl Default for ClickParams {
    fn default() -> Self {
        Self { num_pulses: 4, ipi: 0.0035, decay: 0.5, pulse_width: 0.001, lowpass_hz: None, seed: 0 }
    }
}

impl ClickParams {
    pub fn validate(&self, sr: u32) -> Result<()> {
        if self.num_pulses == 0 {
            return Err(Error::InvalidArgument("click needs at least one pulse".into()));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::InvalidArgument(format!("pulse decay {} outside (0, 1]", self.decay)));
        }
        if !(self.pulse_width > 0.0) || !(self.ipi > self.pulse_width) {
            return Err(Error::InvalidArgument(format!(
                "inter-pulse interval {} must exceed pulse width {}",
                self.ipi, self.pulse_width
            )));
        }
        if self.ipi * (sr as f64) < 2.0 {
            return Err(Error::InvalidArgument(format!(
                "inter-pulse interval {} s is below two samples at {sr} Hz",
                self.ipi
            )));
        }
        if let Some(f) = self.lowpass_hz {
            if !(f > 0.0) {
                return Err(Error::InvalidArgument(format!("lowpass cutoff {f} must be positive")));
            }
        }
        Ok(())
    }

    pub fn pulse_spacing(&self, sr: u32) -> usize {
        (self.ipi * sr as f64).round() as usize
    }

    pub fn pulse_len(&self, sr: u32) -> usize {
        ((self.pulse_width * sr as f64).round() as usize).max(1)
    }

    /// Samples spanned by one click.
    pub fn click_len(&self, sr: u32) -> usize {
        (self.num_pulses - 1) * self.pulse_spacing(sr) + self.pulse_len(sr)
    }
}

fn lowpass_fir(x: &[f64], cutoff_hz: f64, sr: u32) -> Vec<f64> {
    let fc = (2.0 * cutoff_hz / sr as f64).min(1.0);
    if fc >= 1.0 {
        return x.to_vec();
    }
    let half = 24isize;
    let taps: Vec<f64> = (-half..=half)
        .map(|i| fc * sinc(fc * i as f64) * kaiser(i as f64 / (half + 1) as f64, 6.0))
        .collect();
    let n = x.len() as isize;
    (0..n)
        .map(|t| {
            taps.iter()
                .enumerate()
                .map(|(j, h)| {
                    let idx = t + j as isize - half;
                    if (0..n).contains(&idx) { h * x[idx as usize] } else { 0.0 }
                })
                .sum()
        })
        .collect()
}

/// One pulse: sample 0 is the unit peak; the tail is an enveloped,
/// optionally low-passed noise burst kept strictly below the peak.
fn pulse_shape(p: &ClickParams, sr: u32) -> Vec<f64> {
    let len = p.pulse_len(sr);
    let mut rng = rng_from(p.seed);
    let guard = 64;
    let noise: Vec<f64> = (0..len + 2 * guard).map(|_| rng.random_range(-1.0..1.0)).collect();
    let filtered = match p.lowpass_hz {
        Some(f) => lowpass_fir(&noise, f, sr),
        None => noise,
    };
    let mut burst: Vec<f64> = filtered[guard..guard + len]
        .iter()
        .enumerate()
        .map(|(i, v)| v * (-4.0 * i as f64 / len as f64).exp())
        .collect();
    let tail_peak = burst.iter().skip(1).fold(0.0f64, |m, v| m.max(v.abs()));
    if tail_peak > 0.0 {
        burst.iter_mut().skip(1).for_each(|v| *v *= 0.9 / tail_peak);
    }
    burst[0] = 1.0;
    burst
}

/// Multi-pulse click; pulse `k` peaks at `k * round(ipi * sr)` with amplitude `decay^k`.
pub fn synth_click(p: &ClickParams, sr: u32) -> Result<Waveform> {
    p.validate(sr)?;
    let shape = pulse_shape(p, sr);
    let spacing = p.pulse_spacing(sr);
    let mut out = vec![0.0; p.click_len(sr)];
    let mut amp = 1.0;
    for k in 0..p.num_pulses {
        for (i, v) in shape.iter().enumerate() {
            out[k * spacing + i] += amp * v;
        }
        amp *= p.decay;
    }
    Waveform::new(out, sr)
}

fn place_clicks(click: &Waveform, onsets: &[usize], sr: u32) -> Result<Waveform> {
    let len = onsets.last().map_or(0, |&o| o + click.len());
    let mut out = vec![0.0; len];
    for &o in onsets {
        for (i, v) in click.samples.iter().enumerate() {
            out[o + i] += v;
        }
    }
    Waveform::new(out, sr)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodaSpec {
    /// Inter-click intervals in seconds; one fewer than the number of clicks.
    pub icis: Vec<f64>,
    pub click: ClickParams,
    pub label: String,
}

/// Render a coda; returns the waveform and the sample index of each click.
pub fn synth_coda(c: &CodaSpec, sr: u32) -> Result<(Waveform, Vec<usize>)> {
    let click = synth_click(&c.click, sr)?;
    let mut onsets = vec![0usize];
    for &ici in &c.icis {
        if !(ici > 0.0) {
            return Err(Error::InvalidArgument(format!("inter-click interval {ici} must be positive")));
        }
        let step = (ici * sr as f64).round() as usize;
        if step < click.len() {
            return Err(Error::InvalidArgument(format!(
                "inter-click interval {ici} s is shorter than the {} sample click",
                click.len()
            )));
        }
        onsets.push(onsets.last().unwrap() + step);
    }
    let total = (onsets.last().unwrap() + click.len()) as f64 / sr as f64;
    if total >= MAX_CODA_SECONDS {
        return Err(Error::InvalidArgument(format!(
            "coda lasts {total:.3} s, codas must be shorter than {MAX_CODA_SECONDS} s"
        )));
    }
    Ok((place_clicks(&click, &onsets, sr)?, onsets))
}

/// Evenly spaced click train.
pub fn synth_echolocation(n: usize, ici: f64, p: &ClickParams, sr: u32) -> Result<Waveform> {
    if n == 0 {
        return Err(Error::InvalidArgument("echolocation train needs at least one click".into()));
    }
    if !(ici > 0.0) {
        return Err(Error::InvalidArgument(format!("inter-click interval {ici} must be positive")));
    }
    let click = synth_click(p, sr)?;
    let step = (ici * sr as f64).round() as usize;
    if n > 1 && step < click.len() {
        return Err(Error::InvalidArgument("clicks would overlap".into()));
    }
    let onsets: Vec<usize> = (0..n).map(|i| i * step).collect();
    place_clicks(&click, &onsets, sr)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BeepSpec {
    pub n_clicks: usize,
    pub duration: f64,
    pub seed: u64,
}

pub const BEEP_SAMPLE_RATE: u32 = 44_100;

/// Silence with `n_clicks` unit samples at seeded positions (drawn without replacement).
pub fn synth_beeps(b: &BeepSpec, sr: u32) -> Result<Waveform> {
    if !(b.duration > 0.0) {
        return Err(Error::InvalidArgument(format!("beep duration {} must be positive", b.duration)));
    }
    let len = (b.duration * sr as f64).round() as usize;
    if b.n_clicks > len {
        return Err(Error::InvalidArgument(format!(
            "{} clicks do not fit in {len} samples",
            b.n_clicks
        )));
    }
    let mut out = vec![0.0; len];
    let mut rng = rng_from(b.seed);
    for i in index::sample(&mut rng, len, b.n_clicks) {
        out[i] = 1.0;
    }
    Waveform::new(out, sr)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pulse_peaks(w: &Waveform, spacing: usize, n: usize) -> Vec<(usize, f64)> {
        (0..n)
            .map(|k| {
                let lo = k * spacing;
                let hi = ((k + 1) * spacing).min(w.len());
                let (i, v) = w.samples[lo..hi]
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
                    .unwrap();
                (lo + i, v.abs())
            })
            .collect()
    }

    #[test]
    fn click_pulse_positions() {
        let p = ClickParams { num_pulses: 3, ipi: 0.0035, ..Default::default() };
        let w = synth_click(&p, 16000).unwrap();
        let peaks = pulse_peaks(&w, 56, 3);
        assert_eq!(peaks.iter().map(|p| p.0).collect::<Vec<_>>(), vec![0, 56, 112]);
    }

    #[test]
    fn single_pulse_duration() {
        let p = ClickParams { num_pulses: 1, pulse_width: 0.002, ..Default::default() };
        let w = synth_click(&p, 16000).unwrap();
        assert_eq!(w.len(), 32);
    }

    #[test]
    fn geometric_decay() {
        let p = ClickParams { num_pulses: 3, decay: 0.5, lowpass_hz: Some(4000.0), ..Default::default() };
        let w = synth_click(&p, 16000).unwrap();
        let peaks = pulse_peaks(&w, p.pulse_spacing(16000), 3);
        assert!((peaks[1].1 / peaks[0].1 - 0.5).abs() < 0.025);
        assert!((peaks[2].1 / peaks[0].1 - 0.25).abs() < 0.0125);
        assert!(w.peak() <= 1.0);
    }

    #[test]
    fn ipi_too_small() {
        let p = ClickParams { ipi: 0.0001, pulse_width: 0.00005, ..Default::default() };
        assert!(synth_click(&p, 16000).is_err());
    }

    #[test]
    fn one_one_three_coda() {
        let c = CodaSpec { icis: vec![0.35, 0.35, 0.15, 0.15], click: ClickParams::default(), label: "1+1+3".into() };
        let (w, onsets) = synth_coda(&c, 16000).unwrap();
        assert_eq!(onsets, vec![0, 5600, 11200, 13600, 16000]);
        assert_eq!(onsets.last().unwrap() - onsets[0], 16000);
        // every reported onset is the envelope maximum of its click
        for &o in &onsets {
            let lo = o.saturating_sub(20);
            let hi = (o + 200).min(w.len());
            let argmax = (lo..hi).max_by(|&a, &b| w.samples[a].abs().total_cmp(&w.samples[b].abs())).unwrap();
            assert!((argmax as i64 - o as i64).abs() <= 1);
        }
    }

    #[test]
    fn single_click_coda_and_duration_limit() {
        let c = CodaSpec { icis: vec![], click: ClickParams::default(), label: "1".into() };
        assert_eq!(synth_coda(&c, 16000).unwrap().1, vec![0]);
        let long = CodaSpec { icis: vec![0.5; 5], ..c };
        assert!(synth_coda(&long, 16000).is_err());
    }

    #[test]
    fn echolocation_spacing() {
        let p = ClickParams { decay: 0.2, ..Default::default() };
        let w = synth_echolocation(5, 0.4, &p, 16000).unwrap();
        for k in 0..5 {
            assert_eq!(w.samples[k * 6400], 1.0);
        }
        assert_eq!(w.len(), 25600 + p.click_len(16000));
        assert_eq!(synth_echolocation(1, 0.4, &p, 16000).unwrap(), synth_click(&p, 16000).unwrap());
        assert!(synth_echolocation(3, 0.0, &p, 16000).is_err());
    }

    #[test]
    fn beeps_exact_count_and_determinism() {
        let b = BeepSpec { n_clicks: 5, duration: 2.0, seed: 7 };
        let w = synth_beeps(&b, BEEP_SAMPLE_RATE).unwrap();
        assert_eq!(w.len(), 88200);
        assert_eq!(w.samples.iter().filter(|&&s| s == 1.0).count(), 5);
        assert_eq!(w.samples.iter().filter(|&&s| s == 0.0).count(), 88195);
        assert_eq!(synth_beeps(&b, BEEP_SAMPLE_RATE).unwrap(), w);
        let z = synth_beeps(&BeepSpec { n_clicks: 0, ..b.clone() }, BEEP_SAMPLE_RATE).unwrap();
        assert!(z.samples.iter().all(|&s| s == 0.0));
        assert!(synth_beeps(&BeepSpec { n_clicks: 100, duration: 0.001, seed: 1 }, BEEP_SAMPLE_RATE).is_err());
    }
}
