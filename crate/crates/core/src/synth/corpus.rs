use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{synth_coda, ClickParams, CodaSpec};
use crate::audio::{save_wav, SampleFormat, Waveform};
use crate::error::{Error, Result};
use crate::rng::{derive, named_rng, normal, rng_from};

/// Label keys present on every manifest entry.
pub const TASKS: [&str; 4] = ["detection", "rhythm", "unit", "vowel"];
pub const NO_LABEL: &str = "none";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RhythmClass {
    pub name: String,
    pub icis: Vec<f64>,
}

/// Social-unit stand-in: a click timbre.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnitClass {
    pub name: String,
    pub click: ClickParams,
}

/// Vowel stand-in: a spectral band applied to every click.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VowelClass {
    pub name: String,
    pub lowpass_hz: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub sample_rate: u32,
    pub clip_seconds: f64,
    /// Codas generated per rhythm class.
    pub per_class: usize,
    /// Noise-only clips (negative detection examples).
    pub negatives: usize,
    pub rhythms: Vec<RhythmClass>,
    pub units: Vec<UnitClass>,
    pub vowels: Vec<VowelClass>,
    /// Peak amplitude of the first pulse of each click.
    pub click_amplitude: f64,
    /// RMS of additive white background noise.
    pub noise_rms: f64,
    /// Relative jitter applied to each inter-click interval.
    pub ici_jitter: f64,
    /// Range of silence before the first click, in seconds. `None` places the coda anywhere in the clip.
    pub lead_seconds: Option<[f64; 2]>,
    pub test_fraction: f64,
    pub seed: u64,
}

fn rhythm(name: &str, icis: &[f64]) -> RhythmClass {
    RhythmClass { name: name.into(), icis: icis.to_vec() }
}

impl Default for CorpusConfig {
    fn default() -> Self {
        let unit = |name: &str, num_pulses, ipi, decay, pulse_width, seed| UnitClass {
            name: name.into(),
            click: ClickParams { num_pulses, ipi, decay, pulse_width, lowpass_hz: None, seed },
        };
        Self {
            sample_rate: 16_000,
            clip_seconds: 2.0,
            per_class: 40,
            negatives: 40,
            // five-click rhythms: equal click counts so that only timing differs
            rhythms: vec![
                rhythm("1+1+3", &[0.35, 0.35, 0.15, 0.15]),
                rhythm("5R1", &[0.2, 0.2, 0.2, 0.2]),
                rhythm("5R3", &[0.3, 0.3, 0.3, 0.3]),
                rhythm("4+1", &[0.15, 0.15, 0.15, 0.4]),
                rhythm("2+3", &[0.15, 0.4, 0.15, 0.15]),
            ],
            units: vec![
                unit("EC1-A", 4, 0.0035, 0.5, 0.001, 11),
                unit("EC1-B", 3, 0.0030, 0.65, 0.0008, 23),
                unit("EC2-C", 5, 0.0040, 0.45, 0.0012, 37),
            ],
            vowels: vec![
                VowelClass { name: "a".into(), lowpass_hz: 2500.0 },
                VowelClass { name: "i".into(), lowpass_hz: 6000.0 },
            ],
            click_amplitude: 0.8,
            noise_rms: 0.005,
            ici_jitter: 0.03,
            lead_seconds: Some([0.05, 0.15]),
            test_fraction: 0.2,
            seed: 0,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 || !(self.clip_seconds > 0.0) {
            return Err(Error::InvalidArgument("sample rate and clip length must be positive".into()));
        }
        for (task, n) in [("rhythm", self.rhythms.len()), ("unit", self.units.len()), ("vowel", self.vowels.len())] {
            if n < 2 {
                return Err(Error::InvalidArgument(format!("task {task} needs at least 2 classes, got {n}")));
            }
        }
        if self.per_class == 0 {
            return Err(Error::InvalidArgument("per-class count must be at least 1".into()));
        }
        let names: HashSet<&str> = self.rhythms.iter().map(|r| r.name.as_str()).collect();
        if names.len() != self.rhythms.len() || names.contains(NO_LABEL) {
            return Err(Error::InvalidArgument("rhythm class names must be unique and not 'none'".into()));
        }
        if let Some([lo, hi]) = self.lead_seconds {
            if !(lo >= 0.0 && hi >= lo) {
                return Err(Error::InvalidArgument("lead range must satisfy 0 <= lo <= hi".into()));
            }
        }
        if !(0.0..1.0).contains(&self.test_fraction) || !(0.0..1.0).contains(&self.ici_jitter) {
            return Err(Error::InvalidArgument("test fraction and jitter must lie in [0, 1)".into()));
        }
        for u in &self.units {
            u.click.validate(self.sample_rate)?;
        }
        Ok(())
    }

    pub fn clip_len(&self) -> usize {
        (self.clip_seconds * self.sample_rate as f64).round() as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub path: String,
    pub labels: BTreeMap<String, String>,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub sample_rate: u32,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let m: Self = serde_json::from_slice(&std::fs::read(path)?)?;
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.path.as_str()) {
                return Err(Error::InvalidArgument(format!("duplicate manifest path {}", e.path)));
            }
        }
        if let Some(first) = self.entries.first() {
            let keys: Vec<&String> = first.labels.keys().collect();
            if let Some(bad) = self.entries.iter().find(|e| e.labels.keys().collect::<Vec<_>>() != keys) {
                return Err(Error::InvalidArgument(format!("entry {} has a different task set", bad.path)));
            }
        }
        Ok(())
    }
}

/// One generated clip with its ground truth.
#[derive(Debug, Clone)]
pub struct CorpusItem {
    pub entry: ManifestEntry,
    pub waveform: Waveform,
    /// Absolute sample index of every click (empty for noise-only clips).
    pub onsets: Vec<usize>,
    /// Samples spanned by each click, for exclusion ranges.
    pub click_len: usize,
}

fn entry_path(index: usize) -> String {
    format!("audio/{index:05}.wav")
}

fn render_coda(cfg: &CorpusConfig, index: usize, r: &RhythmClass, u: &UnitClass, v: &VowelClass) -> Result<(Waveform, Vec<usize>, usize)> {
    let mut rng = rng_from(derive(cfg.seed, &[index as u64]));
    let icis: Vec<f64> = r
        .icis
        .iter()
        .map(|ici| ici * (1.0 + cfg.ici_jitter * rng.random_range(-1.0..=1.0)))
        .collect();
    let click = ClickParams { lowpass_hz: Some(v.lowpass_hz), ..u.click.clone() };
    let spec = CodaSpec { icis, click: click.clone(), label: r.name.clone() };
    let (coda, rel) = synth_coda(&spec, cfg.sample_rate)?;
    let clip_len = cfg.clip_len();
    if coda.len() > clip_len {
        return Err(Error::InvalidArgument(format!("rhythm {} does not fit in the clip", r.name)));
    }
    let slack = clip_len - coda.len();
    let offset = match cfg.lead_seconds {
        None => rng.random_range(0..=slack),
        Some([lo, hi]) => {
            let lo = ((lo * cfg.sample_rate as f64).round() as usize).min(slack);
            let hi = ((hi * cfg.sample_rate as f64).round() as usize).clamp(lo, slack);
            rng.random_range(lo..=hi)
        }
    };
    let mut samples: Vec<f64> = (0..clip_len).map(|_| cfg.noise_rms * normal(&mut rng)).collect();
    for (i, s) in coda.samples.iter().enumerate() {
        samples[offset + i] += cfg.click_amplitude * s;
    }
    limit_peak(&mut samples);
    let onsets = rel.iter().map(|o| o + offset).collect();
    Ok((Waveform::new(samples, cfg.sample_rate)?, onsets, click.click_len(cfg.sample_rate)))
}

fn limit_peak(samples: &mut [f64]) {
    let peak = samples.iter().fold(0.0f64, |m, s| m.max(s.abs()));
    if peak > 1.0 {
        samples.iter_mut().for_each(|s| *s /= peak);
    }
}

/// Generate the corpus in memory. Pure function of the config.
pub fn generate_corpus(cfg: &CorpusConfig) -> Result<Vec<CorpusItem>> {
    cfg.validate()?;
    let mut items = Vec::new();
    let mut index = 0usize;
    for r in &cfg.rhythms {
        for i in 0..cfg.per_class {
            let u = &cfg.units[i % cfg.units.len()];
            let v = &cfg.vowels[(i / cfg.units.len()) % cfg.vowels.len()];
            let (waveform, onsets, click_len) = render_coda(cfg, index, r, u, v)?;
            let labels = BTreeMap::from([
                ("detection".to_string(), "coda".to_string()),
                ("rhythm".to_string(), r.name.clone()),
                ("unit".to_string(), u.name.clone()),
                ("vowel".to_string(), v.name.clone()),
            ]);
            items.push(CorpusItem {
                entry: ManifestEntry { path: entry_path(index), labels, split: Split::Train },
                waveform,
                onsets,
                click_len,
            });
            index += 1;
        }
    }
    for _ in 0..cfg.negatives {
        let mut rng = rng_from(derive(cfg.seed, &[index as u64]));
        let mut samples: Vec<f64> = (0..cfg.clip_len()).map(|_| cfg.noise_rms * normal(&mut rng)).collect();
        limit_peak(&mut samples);
        let labels = TASKS
            .iter()
            .map(|t| (t.to_string(), if *t == "detection" { "noise" } else { NO_LABEL }.to_string()))
            .collect();
        items.push(CorpusItem {
            entry: ManifestEntry { path: entry_path(index), labels, split: Split::Train },
            waveform: Waveform::new(samples, cfg.sample_rate)?,
            onsets: Vec::new(),
            click_len: 0,
        });
        index += 1;
    }
    assign_splits(cfg, &mut items);
    Ok(items)
}

/// Stratified by rhythm label (noise-only clips form their own stratum).
fn assign_splits(cfg: &CorpusConfig, items: &mut [CorpusItem]) {
    let mut strata: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, it) in items.iter().enumerate() {
        strata.entry(it.entry.labels["rhythm"].clone()).or_default().push(i);
    }
    let mut rng = named_rng(cfg.seed, "split");
    for idx in strata.values_mut() {
        idx.shuffle(&mut rng);
        let n_test = (idx.len() as f64 * cfg.test_fraction).round() as usize;
        for &i in &idx[..n_test] {
            items[i].entry.split = Split::Test;
        }
    }
}

#[derive(Serialize)]
struct Annotation<'a> {
    path: &'a str,
    onsets: &'a [usize],
    click_len: usize,
}

/// Write the corpus (float WAVs, `manifest.json`, `annotations.json`) under `out_dir`.
pub fn build_corpus(cfg: &CorpusConfig, out_dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    let out_dir = out_dir.as_ref();
    let items = generate_corpus(cfg)?;
    std::fs::create_dir_all(out_dir.join("audio"))?;
    for it in &items {
        save_wav(out_dir.join(&it.entry.path), &it.waveform, SampleFormat::Float32)?;
    }
    let manifest = DatasetManifest {
        sample_rate: cfg.sample_rate,
        entries: items.iter().map(|it| it.entry.clone()).collect(),
    };
    std::fs::write(out_dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    let ann: Vec<Annotation> = items
        .iter()
        .map(|it| Annotation { path: &it.entry.path, onsets: &it.onsets, click_len: it.click_len })
        .collect();
    std::fs::write(out_dir.join("annotations.json"), serde_json::to_vec_pretty(&ann)?)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::detect_onsets;

    fn small() -> CorpusConfig {
        CorpusConfig { per_class: 40, negatives: 0, ..Default::default() }
    }

    #[test]
    fn counts_and_stratification() {
        let items = generate_corpus(&small()).unwrap();
        assert_eq!(items.len(), 200);
        let mut per: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
        for it in &items {
            let e = per.entry(it.entry.labels["rhythm"].as_str()).or_default();
            match it.entry.split {
                Split::Train => e.0 += 1,
                Split::Test => e.1 += 1,
            }
            assert_eq!(it.entry.labels.len(), TASKS.len());
            assert!(it.waveform.peak() <= 1.0);
        }
        assert_eq!(per.len(), 5);
        assert!(per.values().all(|&c| c == (32, 8)));
    }

    #[test]
    fn single_rhythm_rejected() {
        let mut cfg = small();
        cfg.rhythms.truncate(1);
        assert!(generate_corpus(&cfg).is_err());
    }

    #[test]
    fn byte_reproducible() {
        let cfg = CorpusConfig { per_class: 3, negatives: 2, ..Default::default() };
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let ma = build_corpus(&cfg, a.path()).unwrap();
        let mb = build_corpus(&cfg, b.path()).unwrap();
        assert_eq!(ma, mb);
        for e in &ma.entries {
            assert_eq!(std::fs::read(a.path().join(&e.path)).unwrap(), std::fs::read(b.path().join(&e.path)).unwrap());
        }
        assert_eq!(
            std::fs::read(a.path().join("manifest.json")).unwrap(),
            std::fs::read(b.path().join("manifest.json")).unwrap()
        );
        let loaded = DatasetManifest::load(a.path().join("manifest.json")).unwrap();
        assert_eq!(loaded, ma);
    }

    #[test]
    fn onset_detector_recovers_clean_codas() {
        let cfg = CorpusConfig { per_class: 4, negatives: 0, noise_rms: 0.0, ..Default::default() };
        let items = generate_corpus(&cfg).unwrap();
        let tol = (0.005 * cfg.sample_rate as f64) as i64;
        let (mut hit, mut total) = (0, 0);
        for it in &items {
            let found = detect_onsets(&it.waveform, 256, 32, 3.0).unwrap();
            for &o in &it.onsets {
                total += 1;
                if found.iter().any(|&f| (f as i64 - o as i64).abs() <= tol) {
                    hit += 1;
                }
            }
        }
        assert!(hit as f64 >= 0.9 * total as f64, "{hit}/{total}");
    }

    #[test]
    fn negatives_are_noise_only() {
        let cfg = CorpusConfig { per_class: 1, negatives: 3, ..Default::default() };
        let items = generate_corpus(&cfg).unwrap();
        let negs: Vec<_> = items.iter().filter(|i| i.entry.labels["detection"] == "noise").collect();
        assert_eq!(negs.len(), 3);
        assert!(negs.iter().all(|n| n.onsets.is_empty() && n.entry.labels["rhythm"] == NO_LABEL));
    }

    #[test]
    fn lead_range() {
        let cfg = CorpusConfig { per_class: 6, negatives: 0, ..Default::default() };
        for it in generate_corpus(&cfg).unwrap() {
            assert!((800..=2400).contains(&it.onsets[0]), "{}", it.onsets[0]);
        }
        let anywhere = CorpusConfig { lead_seconds: None, ..cfg.clone() };
        let firsts: Vec<usize> = generate_corpus(&anywhere).unwrap().iter().map(|i| i.onsets[0]).collect();
        assert!(firsts.iter().any(|&o| o > 2400));
        assert!(CorpusConfig { lead_seconds: Some([0.2, 0.1]), ..cfg }.validate().is_err());
    }
}
