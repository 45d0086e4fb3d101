use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::weights::{MatmConfig, MatmWeights, ParamMut, ParamRef};
use crate::checkpoint::{round_to_f32, Checkpoint};
use crate::error::{Error, Result};
use crate::rng::{normal, rng_from};

/// Attention projection that can carry a low-rank delta.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Projection {
    Q,
    K,
    V,
    O,
}

impl Projection {
    fn tag(self) -> &'static str {
        match self {
            Projection::Q => "q",
            Projection::K => "k",
            Projection::V => "v",
            Projection::O => "o",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub targets: Vec<Projection>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self { rank: 8, alpha: 16.0, targets: vec![Projection::Q, Projection::V] }
    }
}

/// `A` is rank x model_dim, `B` is model_dim x rank; the projection acts as
/// `W + (alpha / rank) * B A` in output x input orientation.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraPair {
    pub a: Array2<f64>,
    pub b: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub rank: usize,
    pub alpha: f64,
    pub targets: Vec<Projection>,
    /// layers x targets
    pub pairs: Vec<Vec<LoraPair>>,
    /// Content hash of the weights this adapter was trained against.
    pub base_hash: Option<String>,
}

impl LoraAdapter {
    /// Fresh adapter: `A` Gaussian with std 1/sqrt(model_dim), `B` zero.
    pub fn new(cfg: &LoraConfig, model: &MatmConfig, seed: u64) -> Result<Self> {
        let d = model.model_dim;
        if cfg.rank == 0 || cfg.rank > d {
            return Err(Error::Shape(format!("LoRA rank {} must be in 1..={d}", cfg.rank)));
        }
        if !(cfg.alpha.is_finite() && cfg.alpha > 0.0) {
            return Err(Error::InvalidArgument(format!("LoRA alpha {} must be positive", cfg.alpha)));
        }
        let mut targets = cfg.targets.clone();
        targets.dedup();
        if targets.is_empty() {
            return Err(Error::InvalidArgument("LoRA needs at least one target projection".into()));
        }
        let mut rng = rng_from(seed);
        let std = 1.0 / (d as f64).sqrt();
        let pairs = (0..model.layers)
            .map(|_| {
                targets
                    .iter()
                    .map(|_| LoraPair {
                        a: Array2::from_shape_simple_fn((cfg.rank, d), || std * normal(&mut rng)),
                        b: Array2::zeros((d, cfg.rank)),
                    })
                    .collect()
            })
            .collect();
        let mut adapter = Self { rank: cfg.rank, alpha: cfg.alpha, targets, pairs, base_hash: None };
        for p in adapter.params_mut() {
            round_to_f32(p.data);
        }
        Ok(adapter)
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn pair(&self, layer: usize, proj: Projection) -> Option<&LoraPair> {
        let i = self.targets.iter().position(|&t| t == proj)?;
        Some(&self.pairs[layer][i])
    }

    pub fn pair_mut(&mut self, layer: usize, proj: Projection) -> Option<&mut LoraPair> {
        let i = self.targets.iter().position(|&t| t == proj)?;
        Some(&mut self.pairs[layer][i])
    }

    pub fn check_compatible(&self, model: &MatmConfig) -> Result<()> {
        let d = model.model_dim;
        let ok = self.pairs.len() == model.layers
            && self.pairs.iter().flatten().all(|p| p.a.dim() == (self.rank, d) && p.b.dim() == (d, self.rank));
        if !ok || self.rank > d {
            return Err(Error::Shape(format!(
                "adapter (rank {}, {} layers) does not fit a {}-layer model of width {d}",
                self.rank,
                self.pairs.len(),
                model.layers
            )));
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for p in z.params_mut() {
            p.data.fill(0.0);
        }
        z
    }

    pub fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        let targets = self.targets.clone();
        let mut out = Vec::new();
        for (i, layer) in self.pairs.iter_mut().enumerate() {
            for (t, p) in targets.iter().zip(layer.iter_mut()) {
                for (suffix, m) in [("a", &mut p.a), ("b", &mut p.b)] {
                    let shape = m.shape().to_vec();
                    out.push(ParamMut {
                        name: format!("layer.{i:02}.{}.{suffix}", t.tag()),
                        shape,
                        data: m.as_slice_mut().expect("standard layout"),
                    });
                }
            }
        }
        out
    }

    pub fn params(&self) -> Vec<ParamRef<'_>> {
        let mut out = Vec::new();
        for (i, layer) in self.pairs.iter().enumerate() {
            for (t, p) in self.targets.iter().zip(layer.iter()) {
                for (suffix, m) in [("a", &p.a), ("b", &p.b)] {
                    out.push(ParamRef {
                        name: format!("layer.{i:02}.{}.{suffix}", t.tag()),
                        shape: m.shape().to_vec(),
                        data: m.as_slice().expect("standard layout"),
                    });
                }
            }
        }
        out
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new(
            "lora",
            serde_json::json!({
                "rank": self.rank,
                "alpha": self.alpha,
                "targets": self.targets,
                "layers": self.pairs.len(),
                "model_dim": self.pairs.first().and_then(|l| l.first()).map_or(0, |p| p.a.ncols()),
            }),
        );
        c.manifest.base_hash = self.base_hash.clone();
        for p in self.params() {
            c.insert(p.name, p.shape, p.data);
        }
        c
    }

    pub fn from_checkpoint(mut c: Checkpoint) -> Result<Self> {
        c.expect_kind("lora")?;
        let hp = c.manifest.hyperparameters.clone();
        let num = |k: &str| hp.get(k).and_then(|v| v.as_u64()).map(|v| v as usize);
        let missing = || Error::Checkpoint("incomplete LoRA hyperparameters".into());
        let (rank, layers, d) = (num("rank").ok_or_else(missing)?, num("layers").ok_or_else(missing)?, num("model_dim").ok_or_else(missing)?);
        let alpha = hp.get("alpha").and_then(|v| v.as_f64()).ok_or_else(missing)?;
        let targets: Vec<Projection> = serde_json::from_value(hp.get("targets").cloned().ok_or_else(missing)?)?;
        let mut adapter = Self {
            rank,
            alpha,
            pairs: (0..layers)
                .map(|_| targets.iter().map(|_| LoraPair { a: Array2::zeros((rank, d)), b: Array2::zeros((d, rank)) }).collect())
                .collect(),
            targets,
            base_hash: c.manifest.base_hash.clone(),
        };
        for p in adapter.params_mut() {
            let data = c.take(&p.name, &p.shape)?;
            p.data.copy_from_slice(&data);
        }
        Ok(adapter)
    }

    pub fn save(&self, dir: impl AsRef<std::path::Path>) -> Result<()> {
        self.to_checkpoint().save(dir)
    }

    /// Load and check that the adapter was trained against `base`.
    pub fn load_for(dir: impl AsRef<std::path::Path>, base: &MatmWeights) -> Result<Self> {
        let adapter = Self::from_checkpoint(Checkpoint::load(dir)?)?;
        adapter.check_compatible(&base.config)?;
        if let Some(h) = &adapter.base_hash {
            let actual = base.content_hash();
            if *h != actual {
                return Err(Error::Checkpoint(format!("adapter expects base weights {h}, got {actual}")));
            }
        }
        Ok(adapter)
    }
}

/// Fold an adapter into a copy of the weights: `W + s * A^T B^T` in the
/// stored input x output orientation.
pub fn merge_lora(weights: &MatmWeights, adapter: &LoraAdapter) -> Result<MatmWeights> {
    adapter.check_compatible(&weights.config)?;
    let mut merged = weights.clone();
    let s = adapter.scale();
    for (i, layer) in merged.layers.iter_mut().enumerate() {
        for (&t, p) in adapter.targets.iter().zip(&adapter.pairs[i]) {
            let w = match t {
                Projection::Q => &mut layer.wq,
                Projection::K => &mut layer.wk,
                Projection::V => &mut layer.wv,
                Projection::O => &mut layer.wo,
            };
            w.scaled_add(s, &p.a.t().dot(&p.b.t()));
        }
    }
    Ok(merged)
}
