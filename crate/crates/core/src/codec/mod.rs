//! Acoustic tokenizer: a linear frame transform followed by a residual
//! vector quantizer. Turns a waveform into a K x L token grid and back.

mod grid;
mod rvq;
mod transform;

use std::path::Path;

use ndarray::Array2;
use rand::seq::index;
use serde::{Deserialize, Serialize};

pub use grid::{TokenGrid, MASK};
pub use rvq::{residual_norms, residual_quantize, CodebookSet};
pub use transform::FrameTransform;

use crate::audio::Waveform;
use crate::checkpoint::{round_to_f32, Checkpoint};
use crate::error::{Error, Result};
use crate::rng::named_rng;

/// Columns spanned by a 2-second snippet at the default hop.
pub const COLUMNS_PER_TWO_SECONDS: usize = 120;

/// Default hop: `round(2 * sr / 120)` samples.
pub fn default_hop(sample_rate: u32) -> usize {
    ((2.0 * sample_rate as f64) / COLUMNS_PER_TWO_SECONDS as f64).round() as usize
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodecConfig {
    pub sample_rate: u32,
    pub codebooks: usize,
    pub vocab: usize,
    pub dim: usize,
    /// Defaults to the hop.
    pub frame_len: Option<usize>,
    /// Defaults to [`default_hop`].
    pub hop: Option<usize>,
    pub epochs: usize,
    /// Training frames are subsampled to at most this many.
    pub max_frames: usize,
    pub seed: u64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            codebooks: 14,
            vocab: 1024,
            dim: 128,
            frame_len: None,
            hop: None,
            epochs: 10,
            max_frames: 20_000,
            seed: 0,
        }
    }
}

impl CodecConfig {
    pub fn hop(&self) -> usize {
        self.hop.unwrap_or_else(|| default_hop(self.sample_rate))
    }

    pub fn frame_len(&self) -> usize {
        self.frame_len.unwrap_or_else(|| self.hop())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.sample_rate == 0 {
            return bad("sample rate must be positive".into());
        }
        if self.codebooks == 0 {
            return bad("at least one codebook required".into());
        }
        if self.vocab < 2 {
            return bad(format!("vocabulary {} must be at least 2", self.vocab));
        }
        let (hop, frame_len) = (self.hop(), self.frame_len());
        if hop == 0 || frame_len < hop {
            return bad(format!("frame_len {frame_len} must be >= hop {hop} > 0"));
        }
        if self.dim == 0 || self.dim > frame_len {
            return bad(format!("feature width {} must be in 1..={frame_len}", self.dim));
        }
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        Ok(())
    }
}

/// Per-stage mean squared quantization error after each epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodecReport {
    pub frames: usize,
    pub stage_curves: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Codec {
    pub transform: FrameTransform,
    pub codebooks: CodebookSet,
}

impl Codec {
    pub fn new(transform: FrameTransform, codebooks: CodebookSet) -> Result<Self> {
        if transform.dim() != codebooks.dim() {
            return Err(Error::Shape(format!(
                "transform width {} vs codebook width {}",
                transform.dim(),
                codebooks.dim()
            )));
        }
        Ok(Self { transform, codebooks })
    }

    pub fn sample_rate(&self) -> u32 {
        self.transform.sample_rate
    }

    pub fn hop(&self) -> usize {
        self.transform.hop
    }

    pub fn num_codebooks(&self) -> usize {
        self.codebooks.num_codebooks()
    }

    pub fn vocab(&self) -> usize {
        self.codebooks.vocab()
    }

    fn check_rate(&self, w: &Waveform) -> Result<()> {
        if w.sample_rate != self.sample_rate() {
            return Err(Error::InvalidArgument(format!(
                "waveform at {} Hz, codec expects {} Hz",
                w.sample_rate,
                self.sample_rate()
            )));
        }
        if w.is_empty() {
            return Err(Error::InvalidArgument("empty waveform".into()));
        }
        Ok(())
    }

    /// Continuous features (L x d) before quantization.
    pub fn features(&self, w: &Waveform) -> Result<Array2<f64>> {
        self.check_rate(w)?;
        Ok(self.transform.encode(&self.transform.frames(w)))
    }

    pub fn tokenize(&self, w: &Waveform) -> Result<TokenGrid> {
        let features = self.features(w)?;
        let (tokens, _) = self.codebooks.quantize_batch(&features);
        let (l, k) = tokens.dim();
        let data = tokens.t().iter().copied().collect();
        TokenGrid::new(k, l, self.vocab() as u32, data, self.hop(), self.sample_rate())
    }

    /// Summed codebook vectors per column (L x d).
    pub fn grid_features(&self, g: &TokenGrid) -> Result<Array2<f64>> {
        if g.has_mask() {
            return Err(Error::MaskedGrid);
        }
        if g.codebooks() != self.num_codebooks() || g.vocab() as usize != self.vocab() {
            return Err(Error::Shape(format!(
                "grid has {} codebooks over {} tokens, codec has {} over {}",
                g.codebooks(),
                g.vocab(),
                self.num_codebooks(),
                self.vocab()
            )));
        }
        let tokens = Array2::from_shape_vec((g.codebooks(), g.len()), g.tokens().to_vec())
            .expect("grid shape")
            .reversed_axes();
        Ok(self.codebooks.lookup(&tokens.as_standard_layout().to_owned()))
    }

    pub fn detokenize(&self, g: &TokenGrid) -> Result<Waveform> {
        let frames = self.transform.decode(&self.grid_features(g)?);
        Waveform::new(self.transform.overlap_add(&frames), self.sample_rate())
    }

    /// Squared quantization error of each row of `features`.
    pub fn quantization_errors(&self, features: &Array2<f64>) -> Vec<f64> {
        let (_, recon) = self.codebooks.quantize_batch(features);
        (features - &recon).rows().into_iter().map(|r| r.dot(&r)).collect()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let t = &self.transform;
        let mut c = Checkpoint::new(
            "codec",
            serde_json::json!({
                "sample_rate": t.sample_rate,
                "frame_len": t.frame_len,
                "hop": t.hop,
                "dim": t.dim(),
                "codebooks": self.num_codebooks(),
                "vocab": self.vocab(),
            }),
        );
        c.insert("mean", vec![t.frame_len], t.mean.as_slice().expect("contiguous"));
        c.insert("analysis", vec![t.dim(), t.frame_len], &t.analysis.iter().copied().collect::<Vec<_>>());
        c.insert("synthesis", vec![t.frame_len, t.dim()], &t.synthesis.iter().copied().collect::<Vec<_>>());
        for (k, b) in self.codebooks.books.iter().enumerate() {
            c.insert(format!("codebook_{k:02}"), vec![b.nrows(), b.ncols()], &b.iter().copied().collect::<Vec<_>>());
        }
        c
    }

    pub fn from_checkpoint(mut c: Checkpoint) -> Result<Self> {
        c.expect_kind("codec")?;
        let hp = c.manifest.hyperparameters.clone();
        let get = |key: &str| -> Result<usize> {
            hp.get(key)
                .and_then(|v| v.as_u64())
                .map(|v| v as usize)
                .ok_or_else(|| Error::Checkpoint(format!("missing hyperparameter {key}")))
        };
        let (sr, frame_len, hop, dim, k, vocab) =
            (get("sample_rate")?, get("frame_len")?, get("hop")?, get("dim")?, get("codebooks")?, get("vocab")?);
        let shape = |r: usize, c: usize, v: Vec<f64>| Array2::from_shape_vec((r, c), v).expect("checked shape");
        let transform = FrameTransform {
            frame_len,
            hop,
            sample_rate: sr as u32,
            mean: c.take("mean", &[frame_len])?.into(),
            analysis: shape(dim, frame_len, c.take("analysis", &[dim, frame_len])?),
            synthesis: shape(frame_len, dim, c.take("synthesis", &[frame_len, dim])?),
        };
        let books = (0..k)
            .map(|i| Ok(shape(vocab, dim, c.take(&format!("codebook_{i:02}"), &[vocab, dim])?)))
            .collect::<Result<Vec<_>>>()?;
        Codec::new(transform, CodebookSet::new(books)?)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint().save(dir)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(Checkpoint::load(dir)?)
    }
}

/// Fit the frame transform and codebooks on a corpus.
///
/// Parameters are rounded to `f32` so a saved and reloaded codec tokenizes
/// identically to the in-memory one.
pub fn train_codec(corpus: &[Waveform], cfg: &CodecConfig) -> Result<(Codec, CodecReport)> {
    cfg.validate()?;
    let (hop, frame_len) = (cfg.hop(), cfg.frame_len());
    if let Some(w) = corpus.iter().find(|w| w.sample_rate != cfg.sample_rate) {
        return Err(Error::InvalidArgument(format!(
            "corpus clip at {} Hz, codec configured for {} Hz",
            w.sample_rate, cfg.sample_rate
        )));
    }
    let total: usize = corpus.iter().map(|w| w.len().div_ceil(hop)).sum();
    if total < cfg.vocab {
        return Err(Error::InsufficientData(format!("{total} frames for a vocabulary of {}", cfg.vocab)));
    }
    let mut rng = named_rng(cfg.seed, "codec");
    let keep: Vec<(usize, usize)> = {
        let all: Vec<(usize, usize)> =
            corpus.iter().enumerate().flat_map(|(i, w)| (0..w.len().div_ceil(hop)).map(move |t| (i, t))).collect();
        if all.len() <= cfg.max_frames.max(cfg.vocab) {
            all
        } else {
            let mut idx = index::sample(&mut rng, all.len(), cfg.max_frames.max(cfg.vocab)).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| all[i]).collect()
        }
    };
    let mut frames = Array2::zeros((keep.len(), frame_len));
    for (r, &(i, t)) in keep.iter().enumerate() {
        let s = &corpus[i].samples;
        let start = t * hop;
        let end = (start + frame_len).min(s.len());
        for (j, v) in s[start..end].iter().enumerate() {
            frames[[r, j]] = *v;
        }
    }
    let mut transform = FrameTransform::fit(&frames, cfg.dim, hop, cfg.sample_rate)?;
    for m in [&mut transform.analysis, &mut transform.synthesis] {
        round_to_f32(m.as_slice_mut().expect("contiguous"));
    }
    round_to_f32(transform.mean.as_slice_mut().expect("contiguous"));
    let features = transform.encode(&frames);
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite features".into()));
    }
    let (mut codebooks, stage_curves) =
        rvq::train_codebooks(&features, cfg.codebooks, cfg.vocab, cfg.epochs, &mut rng);
    for b in &mut codebooks.books {
        round_to_f32(b.as_slice_mut().expect("contiguous"));
    }
    let report = CodecReport { frames: keep.len(), stage_curves };
    Ok((Codec::new(transform, codebooks)?, report))
}
