use rand::seq::index;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::lora::{LoraAdapter, LoraConfig};
use super::model::{apply_lora, column_loss, Grads, LossStats, Model};
use super::weights::{MatmWeights, ParamMut, ParamRef};
use crate::codec::TokenGrid;
use crate::error::{Error, Result};
use crate::rng::{derive, derive_named, named_rng, rng_from, Rng};

/// Distribution of the per-grid fraction of masked columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskRate {
    /// `cos(pi/2 * u)`, u ~ U(0, 1)
    Cosine,
    Uniform,
    Fixed(f64),
}

impl MaskRate {
    pub fn sample(&self, rng: &mut Rng) -> f64 {
        match self {
            MaskRate::Cosine => (std::f64::consts::FRAC_PI_2 * rng.random::<f64>()).cos(),
            MaskRate::Uniform => rng.random::<f64>(),
            MaskRate::Fixed(r) => *r,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay, applied to matrices only.
    pub weight_decay: f64,
    pub batch_size: usize,
    pub grad_clip_norm: f64,
    pub iterations: usize,
    pub mask_rate: MaskRate,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            batch_size: 6,
            grad_clip_norm: 1.0,
            iterations: 1000,
            mask_rate: MaskRate::Cosine,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::InvalidArgument(format!("learning rate {} must be positive", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidArgument("betas must lie in [0, 1)".into()));
        }
        if let MaskRate::Fixed(r) = self.mask_rate {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::InvalidArgument(format!("mask rate {r} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Mask `ceil(rate * L)` distinct columns chosen uniformly.
/// Returns the masked grid and the sorted masked column indices.
pub fn mask_random_columns(g: &TokenGrid, rate: f64, rng: &mut Rng) -> Result<(TokenGrid, Vec<usize>)> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!("mask rate {rate} outside [0, 1]")));
    }
    let n = ((rate * g.len() as f64).ceil() as usize).min(g.len());
    let mut cols = index::sample(rng, g.len(), n).into_vec();
    cols.sort_unstable();
    let mut out = g.clone();
    for &c in &cols {
        out.mask_column(c);
    }
    Ok((out, cols))
}

#[derive(Debug, Clone, Default)]
pub struct AdamW {
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new() -> Self {
        Self::default()
    }

    /// Clip gradients to the global norm, then apply one update.
    /// Returns the pre-clipping gradient norm.
    pub fn update(&mut self, params: Vec<ParamMut<'_>>, grads: Vec<ParamRef<'_>>, tc: &TrainConfig) -> f64 {
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.data.len()]).collect();
            self.v = self.m.clone();
        }
        let norm = grads.iter().flat_map(|g| g.data.iter()).map(|v| v * v).sum::<f64>().sqrt();
        let clip = if tc.grad_clip_norm > 0.0 && norm > tc.grad_clip_norm { tc.grad_clip_norm / norm } else { 1.0 };
        self.step += 1;
        let bc1 = 1.0 - tc.beta1.powi(self.step as i32);
        let bc2 = 1.0 - tc.beta2.powi(self.step as i32);
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let decay = if p.shape.len() == 2 { tc.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.data.len() {
                let gj = g.data[j] * clip;
                m[j] = tc.beta1 * m[j] + (1.0 - tc.beta1) * gj;
                v[j] = tc.beta2 * v[j] + (1.0 - tc.beta2) * gj * gj;
                let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + tc.eps);
                p.data[j] -= tc.lr * (update + decay * p.data[j]);
            }
        }
        norm
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    /// Mean masked-position cross-entropy before the update (NaN if skipped).
    pub loss: f64,
    pub accuracy: f64,
    pub masked_positions: usize,
    /// True when no position in the batch was masked; nothing was updated.
    pub skipped: bool,
    pub grad_norm: f64,
}

fn batch_grads(model: &Model, batch: &[TokenGrid], tc: &TrainConfig, rng: &mut Rng, train_base: bool) -> Result<(Grads, LossStats)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let mut jobs = Vec::with_capacity(batch.len());
    for g in batch {
        let rate = tc.mask_rate.sample(rng).clamp(0.0, 1.0);
        let (masked, cols) = mask_random_columns(g, rate, rng)?;
        let dropout_seed: u64 = rng.random();
        jobs.push((masked, cols, dropout_seed));
    }
    let total: usize = jobs.iter().zip(batch).map(|((_, c, _), g)| c.len() * g.codebooks()).sum();
    let mut grads = Grads::for_model(model, train_base);
    let mut stats = LossStats::default();
    if total == 0 {
        return Ok((grads, stats));
    }
    for ((masked, cols, seed), target) in jobs.iter().zip(batch) {
        let mut drop = rng_from(*seed);
        let s = column_loss(model, masked, target, cols, 1.0 / total as f64, Some(&mut grads), Some(&mut drop))?;
        stats.add(s);
    }
    Ok((grads, stats))
}

fn stats_of(s: LossStats, grad_norm: f64) -> StepStats {
    StepStats {
        loss: s.mean_loss(),
        accuracy: s.accuracy(),
        masked_positions: s.count,
        skipped: s.count == 0,
        grad_norm,
    }
}

/// One optimizer step on the full model.
pub fn train_step(weights: &mut MatmWeights, opt: &mut AdamW, batch: &[TokenGrid], tc: &TrainConfig, rng: &mut Rng) -> Result<StepStats> {
    let (grads, stats) = batch_grads(&Model::base(weights), batch, tc, rng, true)?;
    if stats.count == 0 {
        return Ok(stats_of(stats, 0.0));
    }
    let g = grads.base.expect("base gradients");
    let norm = opt.update(weights.params_mut(), g.params(), tc);
    if !weights.is_finite() {
        return Err(Error::Numerical("non-finite weights after update".into()));
    }
    Ok(stats_of(stats, norm))
}

/// One optimizer step on the adapter only; `base` is read-only.
pub fn adapter_step(
    base: &MatmWeights,
    adapter: &mut LoraAdapter,
    opt: &mut AdamW,
    batch: &[TokenGrid],
    tc: &TrainConfig,
    rng: &mut Rng,
) -> Result<StepStats> {
    let (grads, stats) = batch_grads(&apply_lora(base, adapter)?, batch, tc, rng, false)?;
    if stats.count == 0 {
        return Ok(stats_of(stats, 0.0));
    }
    let g = grads.lora.expect("adapter gradients");
    let norm = opt.update(adapter.params_mut(), g.params(), tc);
    Ok(stats_of(stats, norm))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub losses: Vec<f64>,
    pub accuracies: Vec<f64>,
}

fn sample_batch(corpus: &[TokenGrid], max_len: usize, batch: usize, rng: &mut Rng) -> Result<Vec<TokenGrid>> {
    (0..batch)
        .map(|_| {
            let g = &corpus[rng.random_range(0..corpus.len())];
            if g.len() > max_len {
                let start = rng.random_range(0..=g.len() - max_len);
                g.slice_columns(start, start + max_len)
            } else {
                Ok(g.clone())
            }
        })
        .collect()
}

fn check_corpus(corpus: &[TokenGrid]) -> Result<()> {
    if corpus.is_empty() {
        return Err(Error::InsufficientData("empty training corpus".into()));
    }
    if corpus.iter().any(|g| g.has_mask()) {
        return Err(Error::MaskedGrid);
    }
    Ok(())
}

/// Train all weights for `tc.iterations` steps; weights end rounded to f32.
pub fn train(weights: &mut MatmWeights, corpus: &[TokenGrid], tc: &TrainConfig) -> Result<TrainReport> {
    tc.validate()?;
    check_corpus(corpus)?;
    let mut rng = named_rng(tc.seed, "matm-train");
    let mut opt = AdamW::new();
    let mut report = TrainReport::default();
    for _ in 0..tc.iterations {
        let batch = sample_batch(corpus, weights.config.max_len, tc.batch_size, &mut rng)?;
        let s = train_step(weights, &mut opt, &batch, tc, &mut rng)?;
        report.losses.push(s.loss);
        report.accuracies.push(s.accuracy);
    }
    weights.round_to_f32();
    Ok(report)
}

/// Train a fresh LoRA adapter against frozen `base`.
///
/// For two-phase adaptation, merge the first adapter with
/// [`merge_lora`](super::merge_lora) and finetune again on the merged weights.
pub fn finetune(base: &MatmWeights, corpus: &[TokenGrid], lora: &LoraConfig, tc: &TrainConfig) -> Result<(LoraAdapter, TrainReport)> {
    tc.validate()?;
    check_corpus(corpus)?;
    let mut adapter = LoraAdapter::new(lora, &base.config, derive_named(tc.seed, "lora-init"))?;
    adapter.base_hash = Some(base.content_hash());
    let mut rng = named_rng(tc.seed, "lora-train");
    let mut opt = AdamW::new();
    let mut report = TrainReport::default();
    for _ in 0..tc.iterations {
        let batch = sample_batch(corpus, base.config.max_len, tc.batch_size, &mut rng)?;
        let s = adapter_step(base, &mut adapter, &mut opt, &batch, tc, &mut rng)?;
        report.losses.push(s.loss);
        report.accuracies.push(s.accuracy);
    }
    for p in adapter.params_mut() {
        crate::checkpoint::round_to_f32(p.data);
    }
    Ok((adapter, report))
}

/// Masked-token cross-entropy and top-1 accuracy at a fixed mask rate.
/// Masks depend only on `seed` and the grid index, so different models are
/// compared on identical inputs. Grids longer than the model are cropped
/// to their first `max_len` columns.
pub fn evaluate(model: &Model, grids: &[TokenGrid], rate: f64, seed: u64) -> Result<LossStats> {
    let mut total = LossStats::default();
    let max_len = model.config().max_len;
    for (i, g) in grids.iter().enumerate() {
        let g = if g.len() > max_len { g.slice_columns(0, max_len)? } else { g.clone() };
        let mut rng = rng_from(derive(seed, &[i as u64]));
        let (masked, cols) = mask_random_columns(&g, rate, &mut rng)?;
        total.add(column_loss(model, &masked, &g, &cols, 1.0, None, None)?);
    }
    Ok(total)
}
