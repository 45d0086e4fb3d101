use std::sync::Arc;

use ndarray::{Array1, Array2, Axis};
use rayon::prelude::*;

use crate::audio::{normalize, resample, stft, Waveform};
use crate::codec::Codec;
use crate::error::{Error, Result};
use crate::matm::{hidden_states, LoraAdapter, MatmWeights, Model};
use crate::rng::{mix64, normal, rng_from};

/// Maps a waveform to a fixed-length vector.
pub trait EmbeddingModel: Send + Sync {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn embed(&self, w: &Waveform) -> Result<Vec<f64>>;
}

/// Embed every waveform (in parallel, output order preserved).
pub fn embed_all(model: &dyn EmbeddingModel, ws: &[Waveform]) -> Result<Vec<Vec<f64>>> {
    ws.par_iter().map(|w| model.embed(w)).collect()
}

/// Resample and scale to zero mean / unit variance; silent input stays zero.
fn prepare(w: &Waveform, sample_rate: u32) -> Result<Waveform> {
    let r = resample(w, sample_rate)?;
    match normalize(&r) {
        Ok(n) => Ok(n),
        Err(Error::DegenerateSignal(_)) => Ok(Waveform::zeros(r.len(), sample_rate)),
        Err(e) => Err(e),
    }
}

/// Mean-pooled hidden states of the token model at one layer.
pub struct MatmPooled {
    pub codec: Arc<Codec>,
    pub weights: Arc<MatmWeights>,
    pub adapter: Option<Arc<LoraAdapter>>,
    pub layer: usize,
    name: String,
}

impl MatmPooled {
    /// `layer` defaults to the final block.
    pub fn new(codec: Arc<Codec>, weights: Arc<MatmWeights>, adapter: Option<Arc<LoraAdapter>>, layer: Option<usize>) -> Result<Self> {
        let layer = layer.unwrap_or(weights.config.layers);
        if layer > weights.config.layers {
            return Err(Error::InvalidArgument(format!("layer {layer} outside 0..={}", weights.config.layers)));
        }
        if codec.num_codebooks() != weights.config.codebooks || codec.vocab() != weights.config.vocab {
            return Err(Error::Shape("codec and token model disagree on grid geometry".into()));
        }
        if let Some(a) = &adapter {
            a.check_compatible(&weights.config)?;
        }
        Ok(Self { codec, weights, adapter, layer, name: "matm-pooled".into() })
    }
}

impl EmbeddingModel for MatmPooled {
    fn name(&self) -> &str {
        &self.name
    }

    fn dim(&self) -> usize {
        self.weights.config.model_dim
    }

    /// Grids longer than the model's context are split into windows; the
    /// result is the mean over all columns.
    fn embed(&self, w: &Waveform) -> Result<Vec<f64>> {
        let grid = self.codec.tokenize(&prepare(w, self.codec.sample_rate())?)?;
        let model = Model { weights: &self.weights, adapter: self.adapter.as_deref() };
        let max_len = self.weights.config.max_len;
        let mut sum = Array1::zeros(self.dim());
        let mut start = 0;
        while start < grid.len() {
            let end = (start + max_len).min(grid.len());
            let h = hidden_states(&model, &grid.slice_columns(start, end)?)?;
            sum += &h[self.layer].sum_axis(Axis(0));
            start = end;
        }
        Ok((sum / grid.len() as f64).to_vec())
    }
}

/// Per-codebook token histogram, hashed into a fixed number of buckets and
/// divided by the number of columns.
pub struct TokenHistogram {
    pub codec: Arc<Codec>,
    pub buckets: usize,
}

impl TokenHistogram {
    pub const DEFAULT_BUCKETS: usize = 2048;

    pub fn new(codec: Arc<Codec>) -> Self {
        Self { codec, buckets: Self::DEFAULT_BUCKETS }
    }
}

impl EmbeddingModel for TokenHistogram {
    fn name(&self) -> &str {
        "tokenizer"
    }

    fn dim(&self) -> usize {
        self.buckets
    }

    fn embed(&self, w: &Waveform) -> Result<Vec<f64>> {
        let grid = self.codec.tokenize(&prepare(w, self.codec.sample_rate())?)?;
        let mut out = vec![0.0; self.buckets];
        for k in 0..grid.codebooks() {
            for t in 0..grid.len() {
                let key = ((k as u64) << 32) | grid.get(k, t) as u64;
                out[(mix64(key) % self.buckets as u64) as usize] += 1.0;
            }
        }
        let l = grid.len() as f64;
        out.iter_mut().for_each(|v| *v /= l);
        Ok(out)
    }
}

/// Triangular mel filterbank, `n_mels x (n_fft / 2 + 1)`.
pub fn mel_filterbank(sample_rate: u32, n_fft: usize, n_mels: usize) -> Array2<f64> {
    let hz_to_mel = |f: f64| 2595.0 * (1.0 + f / 700.0).log10();
    let mel_to_hz = |m: f64| 700.0 * (10f64.powf(m / 2595.0) - 1.0);
    let bins = n_fft / 2 + 1;
    let top = hz_to_mel(sample_rate as f64 / 2.0);
    let edges: Vec<f64> = (0..n_mels + 2).map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64)).collect();
    let freq = |b: usize| b as f64 * sample_rate as f64 / n_fft as f64;
    Array2::from_shape_fn((n_mels, bins), |(m, b)| {
        let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        let f = freq(b);
        if f <= lo || f >= hi {
            0.0
        } else if f <= mid {
            (f - lo) / (mid - lo)
        } else {
            (hi - f) / (hi - mid)
        }
    })
}

/// Fixed seeded random linear map of log-mel frames, mean-pooled over time.
pub struct RandomProjection {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub hop: usize,
    filters: Array2<f64>,
    projection: Array2<f64>,
}

impl RandomProjection {
    pub fn new(sample_rate: u32, n_mels: usize, dim: usize, seed: u64) -> Self {
        let n_fft = 512;
        let mut rng = rng_from(seed);
        let scale = 1.0 / (n_mels as f64).sqrt();
        Self {
            sample_rate,
            n_fft,
            hop: 256,
            filters: mel_filterbank(sample_rate, n_fft, n_mels),
            projection: Array2::from_shape_simple_fn((n_mels, dim), || scale * normal(&mut rng)),
        }
    }
}

impl EmbeddingModel for RandomProjection {
    fn name(&self) -> &str {
        "random-projection"
    }

    fn dim(&self) -> usize {
        self.projection.ncols()
    }

    fn embed(&self, w: &Waveform) -> Result<Vec<f64>> {
        let mut x = prepare(w, self.sample_rate)?;
        if x.len() < self.n_fft {
            x.samples.resize(self.n_fft, 0.0);
        }
        let spec = stft(&x, self.n_fft, self.hop)?;
        let power = spec.bins.mapv(|c| c.norm_sqr());
        let logmel = power.dot(&self.filters.t()).mapv(|v| (v + 1e-6).ln());
        Ok(logmel.dot(&self.projection).mean_axis(Axis(0)).expect("frames").to_vec())
    }
}

/// Inter-onset-interval statistics: count, mean, std, min, max, median (s).
///
/// Clicks are picked from a short-time energy envelope: local maxima above
/// `median + threshold * MAD` of the envelope, at least `refractory` apart.
pub struct OnsetFeatures {
    /// Envelope window in seconds.
    pub window: f64,
    pub refractory: f64,
    pub threshold: f64,
}

impl Default for OnsetFeatures {
    fn default() -> Self {
        Self { window: 0.002, refractory: 0.03, threshold: 16.0 }
    }
}

fn median_of(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) }
}

impl OnsetFeatures {
    /// Sample positions of detected clicks.
    pub fn detect(&self, x: &Waveform) -> Result<Vec<usize>> {
        if !(self.window > 0.0 && self.refractory >= 0.0 && self.threshold > 0.0) {
            return Err(Error::InvalidArgument("onset features need a positive window and threshold".into()));
        }
        let sr = x.sample_rate as f64;
        let win = ((self.window * sr).round() as usize).max(1);
        let hop = (win / 4).max(1);
        if x.len() < win {
            return Ok(Vec::new());
        }
        let mut cum = vec![0.0; x.len() + 1];
        for (i, v) in x.samples.iter().enumerate() {
            cum[i + 1] = cum[i] + v * v;
        }
        let env: Vec<f64> = (0..=(x.len() - win) / hop).map(|m| (cum[m * hop + win] - cum[m * hop]) / win as f64).collect();
        let peak = env.iter().cloned().fold(0.0, f64::max);
        let mut scratch = env.clone();
        let level = median_of(&mut scratch);
        let mut dev: Vec<f64> = env.iter().map(|e| (e - level).abs()).collect();
        let mad = median_of(&mut dev);
        let cut = (level + self.threshold * mad).max(1e-3 * peak);
        let gap = (self.refractory * sr).round() as usize;
        let mut onsets: Vec<usize> = Vec::new();
        for m in 0..env.len() {
            let e = env[m];
            let left = if m > 0 { env[m - 1] } else { 0.0 };
            let right = env.get(m + 1).copied().unwrap_or(0.0);
            if e <= cut || e < left || e <= right {
                continue;
            }
            let pos = m * hop;
            if onsets.last().is_some_and(|&last| pos < last + gap) {
                continue;
            }
            onsets.push(pos);
        }
        Ok(onsets)
    }
}

impl EmbeddingModel for OnsetFeatures {
    fn name(&self) -> &str {
        "onset"
    }

    fn dim(&self) -> usize {
        6
    }

    fn embed(&self, w: &Waveform) -> Result<Vec<f64>> {
        let x = prepare(w, w.sample_rate)?;
        let onsets = self.detect(&x)?;
        let sr = w.sample_rate as f64;
        let mut ioi: Vec<f64> = onsets.windows(2).map(|p| (p[1] - p[0]) as f64 / sr).collect();
        if ioi.is_empty() {
            return Ok(vec![onsets.len() as f64, 0.0, 0.0, 0.0, 0.0, 0.0]);
        }
        let n = ioi.len() as f64;
        let mean = ioi.iter().sum::<f64>() / n;
        let std = (ioi.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        let median = median_of(&mut ioi);
        Ok(vec![onsets.len() as f64, mean, std, ioi[0], ioi[ioi.len() - 1], median])
    }
}

/// Total signal energy of the raw waveform (no normalization).
pub struct EnergyEmbedding;

impl EmbeddingModel for EnergyEmbedding {
    fn name(&self) -> &str {
        "energy"
    }

    fn dim(&self) -> usize {
        1
    }

    fn embed(&self, w: &Waveform) -> Result<Vec<f64>> {
        Ok(vec![w.samples.iter().map(|v| v * v).sum()])
    }
}

pub const BUILTIN_NAMES: [&str; 5] = ["matm-pooled", "tokenizer", "random-projection", "onset", "energy"];

/// Default seed and size of the random-projection baseline.
pub const RANDOM_PROJECTION_SEED: u64 = 0x5EED;
pub const RANDOM_PROJECTION_DIM: usize = 64;
pub const RANDOM_PROJECTION_MELS: usize = 40;

/// Build a built-in embedding by name. `matm-pooled` needs both a codec and
/// token-model weights; `tokenizer` needs a codec.
pub fn builtin_embedding(
    name: &str,
    codec: Option<&Arc<Codec>>,
    matm: Option<(&Arc<MatmWeights>, Option<&Arc<LoraAdapter>>)>,
) -> Result<Box<dyn EmbeddingModel>> {
    let need_codec = || codec.cloned().ok_or_else(|| Error::InvalidArgument(format!("embedding {name} needs a trained codec")));
    Ok(match name {
        "matm-pooled" => {
            let (w, a) = matm.ok_or_else(|| Error::InvalidArgument("matm-pooled embedding needs a trained token model".into()))?;
            Box::new(MatmPooled::new(need_codec()?, w.clone(), a.cloned(), None)?)
        }
        "tokenizer" => Box::new(TokenHistogram::new(need_codec()?)),
        "random-projection" => {
            let sr = codec.map_or(16_000, |c| c.sample_rate());
            Box::new(RandomProjection::new(sr, RANDOM_PROJECTION_MELS, RANDOM_PROJECTION_DIM, RANDOM_PROJECTION_SEED))
        }
        "onset" => Box::new(OnsetFeatures::default()),
        "energy" => Box::new(EnergyEmbedding),
        other => return Err(Error::InvalidArgument(format!("unknown embedding {other:?}; expected one of {BUILTIN_NAMES:?}"))),
    })
}

/// Every built-in embedding.
pub fn builtin_embeddings(
    codec: &Arc<Codec>,
    weights: &Arc<MatmWeights>,
    adapter: Option<&Arc<LoraAdapter>>,
) -> Result<Vec<Box<dyn EmbeddingModel>>> {
    BUILTIN_NAMES.iter().map(|n| builtin_embedding(n, Some(codec), Some((weights, adapter)))).collect()
}
