use ndarray::{s, Array1, Array2, Array3, Axis, Zip};
use rand::Rng as _;

use super::lora::{LoraAdapter, LoraPair, Projection};
use super::weights::{MatmConfig, MatmWeights};
use crate::codec::{TokenGrid, MASK};
use crate::error::{Error, Result};
use crate::rng::Rng;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Base weights plus an optional low-rank adapter applied on the fly.
#[derive(Debug, Clone, Copy)]
pub struct Model<'a> {
    pub weights: &'a MatmWeights,
    pub adapter: Option<&'a LoraAdapter>,
}

impl<'a> Model<'a> {
    pub fn base(weights: &'a MatmWeights) -> Self {
        Self { weights, adapter: None }
    }

    pub fn config(&self) -> &MatmConfig {
        &self.weights.config
    }

    fn lora(&self, layer: usize, proj: Projection) -> Option<(&'a LoraPair, f64)> {
        self.adapter.and_then(|a| a.pair(layer, proj).map(|p| (p, a.scale())))
    }
}

/// Adapted view: each target projection behaves as `W + (alpha/r) B A`.
/// The base weights are only borrowed.
pub fn apply_lora<'a>(weights: &'a MatmWeights, adapter: &'a LoraAdapter) -> Result<Model<'a>> {
    adapter.check_compatible(&weights.config)?;
    Ok(Model { weights, adapter: Some(adapter) })
}

/// Gradient accumulators. `base` is `None` when the base model is frozen.
pub struct Grads {
    pub base: Option<MatmWeights>,
    pub lora: Option<LoraAdapter>,
}

impl Grads {
    pub fn for_model(model: &Model, train_base: bool) -> Self {
        Self {
            base: train_base.then(|| MatmWeights::zeros(model.config())),
            lora: model.adapter.map(|a| a.zeros_like()),
        }
    }
}

struct LnCache {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
}

fn layer_norm(x: &Array2<f64>, g: &Array1<f64>, b: &Array1<f64>) -> (Array2<f64>, LnCache) {
    let d = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
        let mean = row.sum() / d;
        row -= mean;
        let var = row.dot(&row) / d;
        *r = 1.0 / (var + LN_EPS).sqrt();
        row *= *r;
    }
    let y = &xhat * g + b;
    (y, LnCache { xhat, rstd })
}

fn layer_norm_back(
    c: &LnCache,
    g: &Array1<f64>,
    dy: &Array2<f64>,
    grads: Option<(&mut Array1<f64>, &mut Array1<f64>)>,
) -> Array2<f64> {
    if let Some((dg, db)) = grads {
        *dg += &(dy * &c.xhat).sum_axis(Axis(0));
        *db += &dy.sum_axis(Axis(0));
    }
    let d = dy.ncols() as f64;
    let mut dx = dy * g;
    for ((mut row, xh), &r) in dx.rows_mut().into_iter().zip(c.xhat.rows()).zip(c.rstd.iter()) {
        let sum = row.sum();
        let dot = row.dot(&xh);
        Zip::from(&mut row).and(&xh).for_each(|v, &x| *v = r / d * (d * *v - sum - x * dot));
    }
    dx
}

fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + GELU_A * u * u * u)).tanh())
}

fn gelu_grad(u: f64) -> f64 {
    let t = (GELU_C * (u + GELU_A * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * u * u)
}

fn project(h: &Array2<f64>, w: &Array2<f64>, b: &Array1<f64>, lora: Option<(&LoraPair, f64)>) -> (Array2<f64>, Option<Array2<f64>>) {
    let mut y = h.dot(w) + b;
    let ha = lora.map(|(p, s)| {
        let ha = h.dot(&p.a.t());
        y.scaled_add(s, &ha.dot(&p.b.t()));
        ha
    });
    (y, ha)
}

fn project_back(
    h: &Array2<f64>,
    dy: &Array2<f64>,
    w: &Array2<f64>,
    lora: Option<(&LoraPair, f64)>,
    ha: Option<&Array2<f64>>,
    gw: Option<(&mut Array2<f64>, &mut Array1<f64>)>,
    glora: Option<&mut LoraPair>,
) -> Array2<f64> {
    if let Some((dw, db)) = gw {
        *dw += &h.t().dot(dy);
        *db += &dy.sum_axis(Axis(0));
    }
    let mut dh = dy.dot(&w.t());
    if let Some((p, s)) = lora {
        let dyb = dy.dot(&p.b);
        dh.scaled_add(s, &dyb.dot(&p.a));
        if let Some(g) = glora {
            g.a.scaled_add(s, &dyb.t().dot(h));
            g.b.scaled_add(s, &dy.t().dot(ha.expect("adapter cache")));
        }
    }
    dh
}

fn softmax_rows(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

fn dropout_mask(rows: usize, cols: usize, p: f64, rng: &mut Rng) -> Array2<f64> {
    let keep = 1.0 / (1.0 - p);
    Array2::from_shape_simple_fn((rows, cols), || if rng.random::<f64>() < p { 0.0 } else { keep })
}

struct LayerTrace {
    ln1: LnCache,
    h: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    ha: [Option<Array2<f64>>; 4],
    probs: Vec<Array2<f64>>,
    o: Array2<f64>,
    drop1: Option<Array2<f64>>,
    ln2: LnCache,
    h2: Array2<f64>,
    u: Array2<f64>,
    f: Array2<f64>,
    drop2: Option<Array2<f64>>,
}

pub(crate) struct Trace {
    rows: Vec<Vec<usize>>,
    layers: Vec<LayerTrace>,
    lnf: LnCache,
    /// Residual stream: input embedding, then the output of each block.
    pub hidden: Vec<Array2<f64>>,
    /// Final normalized states, L x model_dim.
    pub hf: Array2<f64>,
}

fn check_grid(cfg: &MatmConfig, g: &TokenGrid) -> Result<()> {
    if g.codebooks() != cfg.codebooks || g.vocab() as usize != cfg.vocab {
        return Err(Error::Shape(format!(
            "grid {} codebooks / vocab {} vs model {} / {}",
            g.codebooks(),
            g.vocab(),
            cfg.codebooks,
            cfg.vocab
        )));
    }
    if g.len() > cfg.max_len {
        return Err(Error::InvalidArgument(format!("grid of {} columns exceeds max_len {}", g.len(), cfg.max_len)));
    }
    Ok(())
}

/// Sum of token (or MASK) embeddings over codebooks plus positions.
pub(crate) fn embed(w: &MatmWeights, g: &TokenGrid, with_positions: bool) -> (Array2<f64>, Vec<Vec<usize>>) {
    let cfg = &w.config;
    let (l, d) = (g.len(), cfg.model_dim);
    let mut x = if with_positions { w.pos_emb.slice(s![..l, ..]).to_owned() } else { Array2::zeros((l, d)) };
    let rows: Vec<Vec<usize>> = (0..cfg.codebooks)
        .map(|k| (0..l).map(|t| if g.get(k, t) == MASK { cfg.vocab } else { g.get(k, t) as usize }).collect())
        .collect();
    for (k, rk) in rows.iter().enumerate() {
        for (t, &r) in rk.iter().enumerate() {
            x.row_mut(t).scaled_add(1.0, &w.tok_emb[k].row(r));
        }
    }
    (x, rows)
}

pub(crate) fn forward_trace(model: &Model, g: &TokenGrid, mut dropout: Option<&mut Rng>) -> Result<Trace> {
    let w = model.weights;
    let cfg = &w.config;
    check_grid(cfg, g)?;
    let (l, d) = (g.len(), cfg.model_dim);
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let p = cfg.dropout;
    let (mut x, rows) = embed(w, g, true);
    let mut hidden = vec![x.clone()];
    let mut layers = Vec::with_capacity(cfg.layers);
    for (i, lw) in w.layers.iter().enumerate() {
        let (h, ln1) = layer_norm(&x, &lw.ln1_g, &lw.ln1_b);
        let (q, ha_q) = project(&h, &lw.wq, &lw.bq, model.lora(i, Projection::Q));
        let (k, ha_k) = project(&h, &lw.wk, &lw.bk, model.lora(i, Projection::K));
        let (v, ha_v) = project(&h, &lw.wv, &lw.bv, model.lora(i, Projection::V));
        let mut o = Array2::zeros((l, d));
        let mut probs = Vec::with_capacity(cfg.heads);
        for head in 0..cfg.heads {
            let cols = s![.., head * dh..(head + 1) * dh];
            let mut sc = q.slice(cols).dot(&k.slice(cols).t()) * scale;
            softmax_rows(&mut sc);
            o.slice_mut(cols).assign(&sc.dot(&v.slice(cols)));
            probs.push(sc);
        }
        let (mut a, ha_o) = project(&o, &lw.wo, &lw.bo, model.lora(i, Projection::O));
        let drop1 = match dropout.as_deref_mut() {
            Some(r) if p > 0.0 => Some(dropout_mask(l, d, p, r)),
            _ => None,
        };
        if let Some(m) = &drop1 {
            a *= m;
        }
        let x_mid = &x + &a;
        let (h2, ln2) = layer_norm(&x_mid, &lw.ln2_g, &lw.ln2_b);
        let u = h2.dot(&lw.w1) + &lw.b1;
        let f = u.mapv(gelu);
        let mut m2 = f.dot(&lw.w2) + &lw.b2;
        let drop2 = match dropout.as_deref_mut() {
            Some(r) if p > 0.0 => Some(dropout_mask(l, d, p, r)),
            _ => None,
        };
        if let Some(m) = &drop2 {
            m2 *= m;
        }
        x = x_mid + m2;
        hidden.push(x.clone());
        layers.push(LayerTrace { ln1, h, q, k, v, ha: [ha_q, ha_k, ha_v, ha_o], probs, o, drop1, ln2, h2, u, f, drop2 });
    }
    let (hf, lnf) = layer_norm(&x, &w.lnf_g, &w.lnf_b);
    Ok(Trace { rows, layers, lnf, hidden, hf })
}

/// Backpropagate `dhf` (gradient w.r.t. the final normalized states).
pub(crate) fn backward(model: &Model, trace: &Trace, dhf: &Array2<f64>, grads: &mut Grads) {
    let w = model.weights;
    let cfg = &w.config;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let l = dhf.nrows();
    let mut dx = match grads.base.as_mut() {
        Some(gb) => layer_norm_back(&trace.lnf, &w.lnf_g, dhf, Some((&mut gb.lnf_g, &mut gb.lnf_b))),
        None => layer_norm_back(&trace.lnf, &w.lnf_g, dhf, None),
    };
    for (i, (lw, tr)) in w.layers.iter().zip(&trace.layers).enumerate().rev() {
        let mut gl = grads.base.as_mut().map(|gb| &mut gb.layers[i]);
        let mut lora_g = grads.lora.as_mut();
        macro_rules! lg {
            ($proj:expr) => {
                lora_g.as_deref_mut().and_then(|a| a.pair_mut(i, $proj))
            };
        }
        // feed-forward branch
        let mut dm2 = dx.clone();
        if let Some(m) = &tr.drop2 {
            dm2 *= m;
        }
        let df = project_back(
            &tr.f,
            &dm2,
            &lw.w2,
            None,
            None,
            gl.as_deref_mut().map(|g| (&mut g.w2, &mut g.b2)),
            None,
        );
        let du = df * &tr.u.mapv(gelu_grad);
        let dh2 = project_back(&tr.h2, &du, &lw.w1, None, None, gl.as_deref_mut().map(|g| (&mut g.w1, &mut g.b1)), None);
        let dln2 = layer_norm_back(&tr.ln2, &lw.ln2_g, &dh2, gl.as_deref_mut().map(|g| (&mut g.ln2_g, &mut g.ln2_b)));
        dx += &dln2;
        // attention branch
        let mut da = dx.clone();
        if let Some(m) = &tr.drop1 {
            da *= m;
        }
        let d_o = project_back(
            &tr.o,
            &da,
            &lw.wo,
            model.lora(i, Projection::O),
            tr.ha[3].as_ref(),
            gl.as_deref_mut().map(|g| (&mut g.wo, &mut g.bo)),
            lg!(Projection::O),
        );
        let mut dq = Array2::zeros((l, cfg.model_dim));
        let mut dk = Array2::zeros((l, cfg.model_dim));
        let mut dv = Array2::zeros((l, cfg.model_dim));
        for head in 0..cfg.heads {
            let cols = s![.., head * dh..(head + 1) * dh];
            let p = &tr.probs[head];
            let doh = d_o.slice(cols);
            let dp = doh.dot(&tr.v.slice(cols).t());
            dv.slice_mut(cols).assign(&p.t().dot(&doh));
            let mut ds = &dp * p;
            for (mut row, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
                let sum = row.sum();
                Zip::from(&mut row).and(&prow).for_each(|v, &pv| *v -= pv * sum);
            }
            dq.slice_mut(cols).assign(&(ds.dot(&tr.k.slice(cols)) * scale));
            dk.slice_mut(cols).assign(&(ds.t().dot(&tr.q.slice(cols)) * scale));
        }
        let mut dh_ = project_back(
            &tr.h,
            &dq,
            &lw.wq,
            model.lora(i, Projection::Q),
            tr.ha[0].as_ref(),
            gl.as_deref_mut().map(|g| (&mut g.wq, &mut g.bq)),
            lg!(Projection::Q),
        );
        dh_ += &project_back(
            &tr.h,
            &dk,
            &lw.wk,
            model.lora(i, Projection::K),
            tr.ha[1].as_ref(),
            gl.as_deref_mut().map(|g| (&mut g.wk, &mut g.bk)),
            lg!(Projection::K),
        );
        dh_ += &project_back(
            &tr.h,
            &dv,
            &lw.wv,
            model.lora(i, Projection::V),
            tr.ha[2].as_ref(),
            gl.as_deref_mut().map(|g| (&mut g.wv, &mut g.bv)),
            lg!(Projection::V),
        );
        dx += &layer_norm_back(&tr.ln1, &lw.ln1_g, &dh_, gl.as_deref_mut().map(|g| (&mut g.ln1_g, &mut g.ln1_b)));
    }
    if let Some(gb) = grads.base.as_mut() {
        let l = dx.nrows();
        gb.pos_emb.slice_mut(s![..l, ..]).scaled_add(1.0, &dx);
        for (k, rk) in trace.rows.iter().enumerate() {
            for (t, &r) in rk.iter().enumerate() {
                gb.tok_emb[k].row_mut(r).scaled_add(1.0, &dx.row(t));
            }
        }
    }
}

/// Logits of codebook `k` for the given rows of final states.
fn head_logits(w: &MatmWeights, hf: &Array2<f64>, k: usize) -> Array2<f64> {
    hf.dot(&w.head_w[k]) + &w.head_b[k]
}

/// Logits, K x L x vocab.
pub fn forward(model: &Model, g: &TokenGrid) -> Result<Array3<f64>> {
    let trace = forward_trace(model, g, None)?;
    let cfg = model.config();
    let mut out = Array3::zeros((cfg.codebooks, g.len(), cfg.vocab));
    for k in 0..cfg.codebooks {
        out.index_axis_mut(Axis(0), k).assign(&head_logits(model.weights, &trace.hf, k));
    }
    Ok(out)
}

/// Softmax over the last axis.
pub fn softmax_logits(logits: &Array3<f64>) -> Array3<f64> {
    let mut p = logits.clone();
    for mut lane in p.lanes_mut(Axis(2)) {
        let max = lane.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        lane.mapv_inplace(|v| (v - max).exp());
        let sum = lane.sum();
        lane /= sum;
    }
    p
}

/// Residual-stream states for layers 0 (input embedding) through `layers`.
pub fn hidden_states(model: &Model, g: &TokenGrid) -> Result<Vec<Array2<f64>>> {
    Ok(forward_trace(model, g, None)?.hidden)
}

/// Mean over columns of the hidden state at `layer` (0 = input embedding).
/// The last layer is read after the output LayerNorm.
pub fn extract_embedding(model: &Model, g: &TokenGrid, layer: usize) -> Result<Vec<f64>> {
    if layer > model.config().layers {
        return Err(Error::InvalidArgument(format!("layer {layer} outside 0..={}", model.config().layers)));
    }
    let trace = forward_trace(model, g, None)?;
    let h = if layer == model.config().layers { &trace.hf } else { &trace.hidden[layer] };
    Ok(h.mean_axis(Axis(0)).expect("L >= 1").to_vec())
}

/// Summed token embeddings without positions, mean over columns.
pub fn token_embedding_pool(weights: &MatmWeights, g: &TokenGrid) -> Result<Vec<f64>> {
    check_grid(&weights.config, g)?;
    let (x, _) = embed(weights, g, false);
    Ok(x.mean_axis(Axis(0)).expect("L >= 1").to_vec())
}

/// Cross-entropy statistics over a set of predicted positions.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossStats {
    pub loss_sum: f64,
    pub correct: usize,
    pub count: usize,
}

impl LossStats {
    pub fn add(&mut self, o: LossStats) {
        self.loss_sum += o.loss_sum;
        self.correct += o.correct;
        self.count += o.count;
    }

    pub fn mean_loss(&self) -> f64 {
        if self.count == 0 { f64::NAN } else { self.loss_sum / self.count as f64 }
    }

    pub fn accuracy(&self) -> f64 {
        if self.count == 0 { f64::NAN } else { self.correct as f64 / self.count as f64 }
    }
}

/// Mean cross-entropy over the codebook entries of `cols`. With `grads`,
/// the gradient of that mean is accumulated into it.
pub fn masked_loss(model: &Model, input: &TokenGrid, target: &TokenGrid, cols: &[usize], grads: Option<&mut Grads>) -> Result<f64> {
    if cols.is_empty() {
        return Err(Error::InvalidArgument("no columns to score".into()));
    }
    let n = (cols.len() * model.config().codebooks) as f64;
    Ok(column_loss(model, input, target, cols, 1.0 / n, grads, None)?.loss_sum / n)
}

pub(crate) fn column_loss(
    model: &Model,
    input: &TokenGrid,
    target: &TokenGrid,
    cols: &[usize],
    grad_scale: f64,
    grads: Option<&mut Grads>,
    dropout: Option<&mut Rng>,
) -> Result<LossStats> {
    if cols.is_empty() {
        return Ok(LossStats::default());
    }
    let trace = forward_trace(model, input, dropout)?;
    let w = model.weights;
    let cfg = &w.config;
    let hs = trace.hf.select(Axis(0), cols);
    let mut stats = LossStats::default();
    let mut dhs = grads.is_some().then(|| Array2::<f64>::zeros(hs.dim()));
    let mut head_grads = Vec::new();
    for k in 0..cfg.codebooks {
        let mut p = head_logits(w, &hs, k);
        let logits = p.clone();
        softmax_rows(&mut p);
        for (r, &t) in cols.iter().enumerate() {
            let y = target.get(k, t) as usize;
            let row = logits.row(r);
            let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            stats.loss_sum += lse - row[y];
            let argmax = row.iter().enumerate().fold(0, |best, (j, &v)| if v > row[best] { j } else { best });
            stats.correct += usize::from(argmax == y);
            stats.count += 1;
            p[[r, y]] -= 1.0;
        }
        if let Some(d) = dhs.as_mut() {
            p *= grad_scale;
            d.scaled_add(1.0, &p.dot(&w.head_w[k].t()));
            head_grads.push(p);
        }
    }
    if let (Some(g), Some(dhs)) = (grads, dhs) {
        if let Some(gb) = g.base.as_mut() {
            for (k, dl) in head_grads.iter().enumerate() {
                gb.head_w[k] += &hs.t().dot(dl);
                gb.head_b[k] += &dl.sum_axis(Axis(0));
            }
        }
        let mut dhf = Array2::zeros(trace.hf.dim());
        for (r, &t) in cols.iter().enumerate() {
            dhf.row_mut(t).scaled_add(1.0, &dhs.row(r));
        }
        backward(model, &trace, &dhf, g);
    }
    Ok(stats)
}
