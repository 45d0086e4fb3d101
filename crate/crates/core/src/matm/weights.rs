use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{hash_tensors, round_to_f32, Checkpoint};
use crate::error::{Error, Result};
use crate::rng::{normal, rng_from, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatmConfig {
    pub layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub max_len: usize,
    pub vocab: usize,
    pub codebooks: usize,
    pub dropout: f64,
}

impl Default for MatmConfig {
    fn default() -> Self {
        Self { layers: 4, model_dim: 128, heads: 4, ff_dim: 512, max_len: 120, vocab: 1024, codebooks: 14, dropout: 0.0 }
    }
}

impl MatmConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.model_dim == 0 || self.heads == 0 || self.model_dim % self.heads != 0 {
            return bad(format!("model_dim {} must be a positive multiple of heads {}", self.model_dim, self.heads));
        }
        if self.ff_dim == 0 || self.max_len == 0 || self.vocab < 2 || self.codebooks == 0 {
            return bad("ff_dim, max_len, codebooks must be positive and vocab >= 2".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }
}

/// A named, mutable view of one parameter tensor.
pub struct ParamMut<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a mut [f64],
}

pub struct ParamRef<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

fn mat_mut<'a>(name: String, a: &'a mut Array2<f64>) -> ParamMut<'a> {
    let shape = a.shape().to_vec();
    ParamMut { name, shape, data: a.as_slice_mut().expect("standard layout") }
}

fn vec_mut<'a>(name: String, a: &'a mut Array1<f64>) -> ParamMut<'a> {
    let shape = vec![a.len()];
    ParamMut { name, shape, data: a.as_slice_mut().expect("contiguous") }
}

fn mat_ref<'a>(name: String, a: &'a Array2<f64>) -> ParamRef<'a> {
    ParamRef { name, shape: a.shape().to_vec(), data: a.as_slice().expect("standard layout") }
}

fn vec_ref<'a>(name: String, a: &'a Array1<f64>) -> ParamRef<'a> {
    ParamRef { name, shape: vec![a.len()], data: a.as_slice().expect("contiguous") }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub ln1_g: Array1<f64>,
    pub ln1_b: Array1<f64>,
    pub wq: Array2<f64>,
    pub bq: Array1<f64>,
    pub wk: Array2<f64>,
    pub bk: Array1<f64>,
    pub wv: Array2<f64>,
    pub bv: Array1<f64>,
    pub wo: Array2<f64>,
    pub bo: Array1<f64>,
    pub ln2_g: Array1<f64>,
    pub ln2_b: Array1<f64>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

/// Transformer parameters. Matrices are stored input x output (`y = x W`).
#[derive(Debug, Clone, PartialEq)]
pub struct MatmWeights {
    pub config: MatmConfig,
    /// Per codebook, (vocab + 1) x model_dim; the last row embeds MASK.
    pub tok_emb: Vec<Array2<f64>>,
    /// max_len x model_dim
    pub pos_emb: Array2<f64>,
    pub layers: Vec<LayerWeights>,
    pub lnf_g: Array1<f64>,
    pub lnf_b: Array1<f64>,
    /// Per codebook, model_dim x vocab.
    pub head_w: Vec<Array2<f64>>,
    pub head_b: Vec<Array1<f64>>,
}

impl MatmWeights {
    /// All-zero parameters (layer-norm gains included); used for gradients.
    pub fn zeros(config: &MatmConfig) -> Self {
        let (d, f, v) = (config.model_dim, config.ff_dim, config.vocab);
        let m = |r, c| Array2::zeros((r, c));
        let z = |n| Array1::zeros(n);
        Self {
            config: config.clone(),
            tok_emb: (0..config.codebooks).map(|_| m(v + 1, d)).collect(),
            pos_emb: m(config.max_len, d),
            layers: (0..config.layers)
                .map(|_| LayerWeights {
                    ln1_g: z(d),
                    ln1_b: z(d),
                    wq: m(d, d),
                    bq: z(d),
                    wk: m(d, d),
                    bk: z(d),
                    wv: m(d, d),
                    bv: z(d),
                    wo: m(d, d),
                    bo: z(d),
                    ln2_g: z(d),
                    ln2_b: z(d),
                    w1: m(d, f),
                    b1: z(f),
                    w2: m(f, d),
                    b2: z(d),
                })
                .collect(),
            lnf_g: z(d),
            lnf_b: z(d),
            head_w: (0..config.codebooks).map(|_| m(d, v)).collect(),
            head_b: (0..config.codebooks).map(|_| z(v)).collect(),
        }
    }

    /// Random initialization with standard deviation `std` for matrices
    /// (residual output projections scaled down by depth).
    pub fn init_with_std(config: &MatmConfig, seed: u64, std: f64) -> Result<Self> {
        config.validate()?;
        let mut w = Self::zeros(config);
        let mut rng = rng_from(seed);
        let out_std = std / (2.0 * config.layers.max(1) as f64).sqrt();
        let fill = |a: &mut Array2<f64>, s: f64, rng: &mut Rng| a.iter_mut().for_each(|v| *v = s * normal(rng));
        for e in &mut w.tok_emb {
            fill(e, std, &mut rng);
        }
        fill(&mut w.pos_emb, std, &mut rng);
        for l in &mut w.layers {
            l.ln1_g.fill(1.0);
            l.ln2_g.fill(1.0);
            fill(&mut l.wq, std, &mut rng);
            fill(&mut l.wk, std, &mut rng);
            fill(&mut l.wv, std, &mut rng);
            fill(&mut l.wo, out_std, &mut rng);
            fill(&mut l.w1, std, &mut rng);
            fill(&mut l.w2, out_std, &mut rng);
        }
        w.lnf_g.fill(1.0);
        for h in &mut w.head_w {
            fill(h, std, &mut rng);
        }
        Ok(w)
    }

    pub fn init(config: &MatmConfig, seed: u64) -> Result<Self> {
        Self::init_with_std(config, seed, 0.02)
    }

    pub fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        let mut out = Vec::new();
        for (k, e) in self.tok_emb.iter_mut().enumerate() {
            out.push(mat_mut(format!("tok_emb.{k:02}"), e));
        }
        out.push(mat_mut("pos_emb".into(), &mut self.pos_emb));
        for (i, l) in self.layers.iter_mut().enumerate() {
            let n = |s: &str| format!("layer.{i:02}.{s}");
            out.push(vec_mut(n("ln1_g"), &mut l.ln1_g));
            out.push(vec_mut(n("ln1_b"), &mut l.ln1_b));
            out.push(mat_mut(n("wq"), &mut l.wq));
            out.push(vec_mut(n("bq"), &mut l.bq));
            out.push(mat_mut(n("wk"), &mut l.wk));
            out.push(vec_mut(n("bk"), &mut l.bk));
            out.push(mat_mut(n("wv"), &mut l.wv));
            out.push(vec_mut(n("bv"), &mut l.bv));
            out.push(mat_mut(n("wo"), &mut l.wo));
            out.push(vec_mut(n("bo"), &mut l.bo));
            out.push(vec_mut(n("ln2_g"), &mut l.ln2_g));
            out.push(vec_mut(n("ln2_b"), &mut l.ln2_b));
            out.push(mat_mut(n("w1"), &mut l.w1));
            out.push(vec_mut(n("b1"), &mut l.b1));
            out.push(mat_mut(n("w2"), &mut l.w2));
            out.push(vec_mut(n("b2"), &mut l.b2));
        }
        out.push(vec_mut("lnf_g".into(), &mut self.lnf_g));
        out.push(vec_mut("lnf_b".into(), &mut self.lnf_b));
        for (k, (w, b)) in self.head_w.iter_mut().zip(self.head_b.iter_mut()).enumerate() {
            out.push(mat_mut(format!("head.{k:02}.w"), w));
            out.push(vec_mut(format!("head.{k:02}.b"), b));
        }
        out
    }

    pub fn params(&self) -> Vec<ParamRef<'_>> {
        let mut out = Vec::new();
        for (k, e) in self.tok_emb.iter().enumerate() {
            out.push(mat_ref(format!("tok_emb.{k:02}"), e));
        }
        out.push(mat_ref("pos_emb".into(), &self.pos_emb));
        for (i, l) in self.layers.iter().enumerate() {
            let n = |s: &str| format!("layer.{i:02}.{s}");
            out.push(vec_ref(n("ln1_g"), &l.ln1_g));
            out.push(vec_ref(n("ln1_b"), &l.ln1_b));
            out.push(mat_ref(n("wq"), &l.wq));
            out.push(vec_ref(n("bq"), &l.bq));
            out.push(mat_ref(n("wk"), &l.wk));
            out.push(vec_ref(n("bk"), &l.bk));
            out.push(mat_ref(n("wv"), &l.wv));
            out.push(vec_ref(n("bv"), &l.bv));
            out.push(mat_ref(n("wo"), &l.wo));
            out.push(vec_ref(n("bo"), &l.bo));
            out.push(vec_ref(n("ln2_g"), &l.ln2_g));
            out.push(vec_ref(n("ln2_b"), &l.ln2_b));
            out.push(mat_ref(n("w1"), &l.w1));
            out.push(vec_ref(n("b1"), &l.b1));
            out.push(mat_ref(n("w2"), &l.w2));
            out.push(vec_ref(n("b2"), &l.b2));
        }
        out.push(vec_ref("lnf_g".into(), &self.lnf_g));
        out.push(vec_ref("lnf_b".into(), &self.lnf_b));
        for (k, (w, b)) in self.head_w.iter().zip(self.head_b.iter()).enumerate() {
            out.push(mat_ref(format!("head.{k:02}.w"), w));
            out.push(vec_ref(format!("head.{k:02}.b"), b));
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.data.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|p| p.data.iter().all(|v| v.is_finite()))
    }

    /// SHA-256 over every parameter's exact bits.
    pub fn content_hash(&self) -> String {
        hash_tensors(self.params().into_iter().map(|p| (p.name, p.data)))
    }

    pub fn round_to_f32(&mut self) {
        for p in self.params_mut() {
            round_to_f32(p.data);
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new("matm", serde_json::to_value(&self.config).expect("serializable"));
        for p in self.params() {
            c.insert(p.name, p.shape, p.data);
        }
        c
    }

    pub fn from_checkpoint(mut c: Checkpoint) -> Result<Self> {
        c.expect_kind("matm")?;
        let config: MatmConfig = serde_json::from_value(c.manifest.hyperparameters.clone())?;
        config.validate()?;
        let mut w = Self::zeros(&config);
        for p in w.params_mut() {
            let data = c.take(&p.name, &p.shape)?;
            p.data.copy_from_slice(&data);
        }
        if !w.is_finite() {
            return Err(Error::Numerical("non-finite weights in checkpoint".into()));
        }
        Ok(w)
    }

    pub fn save(&self, dir: impl AsRef<std::path::Path>) -> Result<()> {
        self.to_checkpoint().save(dir)
    }

    pub fn load(dir: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_checkpoint(Checkpoint::load(dir)?)
    }
}
