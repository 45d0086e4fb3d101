//! Prompt masks and iterative parallel decoding.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::Axis;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::{normalize, resample, OnsetParams, Waveform};
use crate::codec::{Codec, TokenGrid, MASK};
use crate::error::{Error, Result};
use crate::matm::{forward, Model};
use crate::rng::{derive, open_unit, rng_from};

const PRESETS_JSON: &str = include_str!("presets.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptSettings {
    /// Keep every Nth column; 0 disables.
    pub periodic_prompt: usize,
    /// Columns kept around each onset, centred on it.
    pub onset_mask_width: usize,
    pub steps: usize,
    pub typical_mass: f64,
    pub sample_cutoff: f64,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_temperature() -> f64 {
    1.0
}

impl PromptSettings {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| v > 0.0 && v <= 1.0;
        if self.steps == 0 {
            return Err(Error::InvalidArgument("steps must be at least 1".into()));
        }
        if !unit(self.typical_mass) || !unit(self.sample_cutoff) {
            return Err(Error::InvalidArgument(format!(
                "typical_mass {} and sample_cutoff {} must lie in (0, 1]",
                self.typical_mass, self.sample_cutoff
            )));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::InvalidArgument(format!("temperature {} must be positive", self.temperature)));
        }
        Ok(())
    }

    /// Named settings for a source type, e.g. `codas`, `beeps`, `orca`.
    pub fn preset(name: &str) -> Result<Self> {
        presets()
            .remove(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown prompt preset {name:?}")))
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

/// All built-in presets keyed by source name.
pub fn presets() -> BTreeMap<String, PromptSettings> {
    serde_json::from_str(PRESETS_JSON).expect("bundled presets parse")
}

/// Load presets from a JSON object keyed by source name.
pub fn load_presets(path: impl AsRef<std::path::Path>) -> Result<BTreeMap<String, PromptSettings>> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.display().to_string()));
    }
    let map: BTreeMap<String, PromptSettings> = serde_json::from_slice(&std::fs::read(path)?)?;
    for s in map.values() {
        s.validate()?;
    }
    Ok(map)
}

/// Columns left unmasked: every `periodic_prompt`-th column plus a window of
/// `onset_mask_width` columns centred on each onset.
pub fn build_prompt_mask(len: usize, onsets: &[usize], s: &PromptSettings) -> BTreeSet<usize> {
    let mut keep = BTreeSet::new();
    if s.periodic_prompt > 0 {
        keep.extend((0..len).step_by(s.periodic_prompt));
    }
    if s.onset_mask_width > 0 {
        let half = s.onset_mask_width / 2;
        for &o in onsets.iter().filter(|&&o| o < len) {
            keep.extend(o.saturating_sub(half)..=(o + half).min(len - 1));
        }
    }
    keep
}

/// Locally typical filtering to mass `typical_mass`, then nucleus
/// truncation of the kept set at `sample_cutoff`, then renormalization.
pub fn filter_logits(probs: &[f64], typical_mass: f64, sample_cutoff: f64) -> Result<Vec<f64>> {
    let total: f64 = probs.iter().sum();
    if !(total.is_finite() && total > 0.0) || probs.iter().any(|&p| p < 0.0 || !p.is_finite()) {
        return Err(Error::Numerical("degenerate token distribution".into()));
    }
    let q: Vec<f64> = probs.iter().map(|p| p / total).collect();
    let entropy: f64 = q.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum();
    let mut by_typicality: Vec<usize> = (0..q.len()).filter(|&i| q[i] > 0.0).collect();
    let score = |i: usize| (-q[i].ln() - entropy).abs();
    by_typicality.sort_by(|&a, &b| score(a).total_cmp(&score(b)).then(a.cmp(&b)));
    let mut kept = Vec::new();
    let mut mass = 0.0;
    for i in by_typicality {
        kept.push(i);
        mass += q[i];
        if mass >= typical_mass - 1e-12 {
            break;
        }
    }
    kept.sort_by(|&a, &b| q[b].total_cmp(&q[a]).then(a.cmp(&b)));
    let mut nucleus = Vec::new();
    let mut cum = 0.0;
    for &i in &kept {
        nucleus.push(i);
        cum += q[i] / mass;
        if cum >= sample_cutoff - 1e-12 {
            break;
        }
    }
    let z: f64 = nucleus.iter().map(|&i| q[i]).sum();
    let mut out = vec![0.0; q.len()];
    for i in nucleus {
        out[i] = q[i] / z;
    }
    Ok(out)
}

/// Number of entries still masked after step `step` of `steps`.
pub fn schedule_remaining(initial: usize, step: usize, steps: usize) -> usize {
    if step + 1 >= steps {
        return 0;
    }
    let frac = (std::f64::consts::FRAC_PI_2 * (step + 1) as f64 / steps as f64).cos();
    (initial as f64 * frac).ceil() as usize
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub grid: TokenGrid,
    /// (codebook, column, sampled token, confidence) for each position that
    /// was masked on entry, in (column, codebook) order.
    pub candidates: Vec<(usize, usize, u32, f64)>,
    pub committed: usize,
}

/// One decoding pass: sample every masked position, commit the most
/// confident ones so the masked count follows the cosine schedule
/// (strictly decreasing, zero after the last step), re-mask the rest.
pub fn decode_step(model: &Model, g: &TokenGrid, s: &PromptSettings, step: usize, initial_masked: usize) -> Result<StepResult> {
    s.validate()?;
    let current = g.mask_count();
    if current == 0 {
        return Err(Error::InvalidArgument("decode step on a grid without MASK entries".into()));
    }
    let logits = forward(model, g)?;
    let positions: Vec<(usize, usize)> =
        (0..g.len()).flat_map(|t| (0..g.codebooks()).map(move |k| (k, t))).filter(|&(k, t)| g.is_masked(k, t)).collect();
    let noise_scale = 1.0 - (step + 1) as f64 / s.steps as f64;
    let candidates = positions
        .par_iter()
        .map(|&(k, t)| {
            let lane = logits.index_axis(Axis(0), k);
            let row = lane.row(t);
            let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut probs: Vec<f64> = row.iter().map(|v| ((v - max) / s.temperature).exp()).collect();
            let z: f64 = probs.iter().sum();
            probs.iter_mut().for_each(|p| *p /= z);
            let filtered = filter_logits(&probs, s.typical_mass, s.sample_cutoff)?;
            let mut rng = rng_from(derive(s.seed, &[step as u64, k as u64, t as u64]));
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut token = filtered.iter().rposition(|&p| p > 0.0).expect("non-empty support");
            for (i, &p) in filtered.iter().enumerate() {
                acc += p;
                if p > 0.0 && u < acc {
                    token = i;
                    break;
                }
            }
            let gumbel = -(-open_unit(&mut rng).ln()).ln();
            Ok((k, t, token as u32, probs[token].ln() + noise_scale * gumbel))
        })
        .collect::<Result<Vec<_>>>()?;
    let remaining = schedule_remaining(initial_masked.max(current), step, s.steps).min(current - 1);
    let commit = current - remaining;
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| {
        let (ka, ta, _, ca) = candidates[a];
        let (kb, tb, _, cb) = candidates[b];
        cb.total_cmp(&ca).then(ta.cmp(&tb)).then(ka.cmp(&kb))
    });
    let mut grid = g.clone();
    for &i in &order[..commit] {
        let (k, t, tok, _) = candidates[i];
        grid.set(k, t, tok);
    }
    Ok(StepResult { grid, candidates, committed: commit })
}

/// Run the decoding schedule until no MASK remains. Returns the decoded
/// grid and the MASK count after each step.
pub fn iterative_decode_traced(model: &Model, g: &TokenGrid, s: &PromptSettings) -> Result<(TokenGrid, Vec<usize>)> {
    s.validate()?;
    let initial = g.mask_count();
    let mut grid = g.clone();
    let mut counts = Vec::new();
    for step in 0..s.steps {
        if !grid.has_mask() {
            break;
        }
        grid = decode_step(model, &grid, s, step, initial)?.grid;
        counts.push(grid.mask_count());
    }
    debug_assert!(!grid.has_mask());
    Ok((grid, counts))
}

pub fn iterative_decode(model: &Model, g: &TokenGrid, s: &PromptSettings) -> Result<TokenGrid> {
    Ok(iterative_decode_traced(model, g, s)?.0)
}

#[derive(Debug, Clone)]
pub struct Translation {
    pub input_grid: TokenGrid,
    pub keep: BTreeSet<usize>,
    pub output_grid: TokenGrid,
    pub waveform: Waveform,
}

/// Resample, normalize, tokenize, keep onset/periodic columns, regenerate
/// the rest, detokenize.
pub fn translate_detailed(codec: &Codec, model: &Model, w: &Waveform, s: &PromptSettings) -> Result<Translation> {
    s.validate()?;
    let w = normalize(&resample(w, codec.sample_rate())?)?;
    let input_grid = codec.tokenize(&w)?;
    let hop = codec.hop();
    let onset_cols: Vec<usize> = OnsetParams::default().detect(&w)?.into_iter().map(|o| o / hop).collect();
    let keep = build_prompt_mask(input_grid.len(), &onset_cols, s);
    let mut masked = input_grid.clone();
    for t in (0..masked.len()).filter(|t| !keep.contains(t)) {
        masked.mask_column(t);
    }
    let output_grid = iterative_decode(model, &masked, s)?;
    let waveform = codec.detokenize(&output_grid)?;
    Ok(Translation { input_grid, keep, output_grid, waveform })
}

pub fn translate(codec: &Codec, model: &Model, w: &Waveform, s: &PromptSettings) -> Result<Waveform> {
    Ok(translate_detailed(codec, model, w, s)?.waveform)
}

/// Positions of `a` that are not MASK and differ in `b`.
pub fn changed_prompt_entries(a: &TokenGrid, b: &TokenGrid) -> usize {
    a.tokens().iter().zip(b.tokens()).filter(|(&x, &y)| x != MASK && x != y).count()
}
