use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_named, rng_from, Rng};

/// How the reported epoch is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EpochSelection {
    /// Best epoch on a held-out slice of the training split.
    #[default]
    Validation,
    /// Best epoch on the test split itself (optimistic).
    TestLeak,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub hidden: usize,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    /// Training share of the stratified split.
    pub split: f64,
    /// Share of the training split held out for epoch selection.
    pub validation: f64,
    pub selection: EpochSelection,
    pub seeds: Vec<u64>,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            lr: 1e-4,
            batch: 32,
            epochs: 10,
            split: 0.8,
            validation: 0.125,
            selection: EpochSelection::Validation,
            seeds: vec![0, 1, 2],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub accuracies: Vec<f64>,
    pub mean: f64,
    /// Standard error of the mean over seeds.
    pub stderr: f64,
    /// Frequency of the most common class.
    pub majority: f64,
}

/// Largest class frequency.
pub fn majority_baseline(labels: &[usize]) -> f64 {
    let mut counts = BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_insert(0usize) += 1;
    }
    counts.values().copied().max().unwrap_or(0) as f64 / labels.len().max(1) as f64
}

/// Map string labels to dense class indices (sorted order).
pub fn encode_labels<S: AsRef<str>>(labels: &[S]) -> (Vec<usize>, Vec<String>) {
    let mut names: Vec<String> = labels.iter().map(|s| s.as_ref().to_string()).collect();
    names.sort();
    names.dedup();
    let idx = labels.iter().map(|s| names.binary_search_by(|n| n.as_str().cmp(s.as_ref())).unwrap()).collect();
    (idx, names)
}

/// Per class, shuffle and send `round((1 - frac) * n)` (at least one) items to
/// the second part.
fn stratified_split(indices: &[usize], labels: &[usize], frac: f64, rng: &mut Rng) -> (Vec<usize>, Vec<usize>) {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &i in indices {
        by_class.entry(labels[i]).or_default().push(i);
    }
    let (mut first, mut second) = (Vec::new(), Vec::new());
    for (_, mut items) in by_class {
        items.shuffle(rng);
        let n = items.len();
        let n2 = (((1.0 - frac) * n as f64).round() as usize).clamp(usize::from(n >= 2), n.saturating_sub(1));
        second.extend_from_slice(&items[..n2]);
        first.extend_from_slice(&items[n2..]);
    }
    first.sort_unstable();
    second.sort_unstable();
    (first, second)
}

struct Mlp {
    w1: Array2<f64>,
    b1: Array1<f64>,
    w2: Array2<f64>,
    b2: Array1<f64>,
}

impl Mlp {
    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases.
    fn new(d: usize, h: usize, c: usize, rng: &mut Rng) -> Self {
        let mut u = |fan: usize, shape: (usize, usize)| {
            let a = 1.0 / (fan as f64).sqrt();
            Array2::from_shape_simple_fn(shape, || rng.random_range(-a..a))
        };
        let w1 = u(d, (d, h));
        let b1 = u(d, (1, h)).remove_axis(Axis(0));
        let w2 = u(h, (h, c));
        let b2 = u(h, (1, c)).remove_axis(Axis(0));
        Self { w1, b1, w2, b2 }
    }

    fn logits(&self, x: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
        let hidden = (x.dot(&self.w1) + &self.b1).mapv(|v| v.max(0.0));
        let out = hidden.dot(&self.w2) + &self.b2;
        (hidden, out)
    }

    fn accuracy(&self, x: &Array2<f64>, y: &[usize]) -> f64 {
        if y.is_empty() {
            return f64::NAN;
        }
        let (_, out) = self.logits(x);
        let correct = out
            .rows()
            .into_iter()
            .zip(y)
            .filter(|(r, &t)| r.iter().enumerate().fold(0, |b, (j, &v)| if v > r[b] { j } else { b }) == t)
            .count();
        correct as f64 / y.len() as f64
    }
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    fn step(&mut self, params: [&mut [f64]; 4], grads: [&[f64]; 4], lr: f64) {
        let (b1, b2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
        self.t += 1;
        let (c1, c2) = (1.0 - b1.powi(self.t), 1.0 - b2.powi(self.t));
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            for j in 0..p.len() {
                self.m[i][j] = b1 * self.m[i][j] + (1.0 - b1) * g[j];
                self.v[i][j] = b2 * self.v[i][j] + (1.0 - b2) * g[j] * g[j];
                p[j] -= lr * (self.m[i][j] / c1) / ((self.v[i][j] / c2).sqrt() + eps);
            }
        }
    }
}

fn rows(x: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
    x.select(Axis(0), idx)
}

fn run_seed(x: &Array2<f64>, labels: &[usize], classes: usize, pc: &ProbeConfig, seed: u64) -> f64 {
    let mut rng = rng_from(derive_named(seed, "probe"));
    let all: Vec<usize> = (0..labels.len()).collect();
    let (train_all, test) = stratified_split(&all, labels, pc.split, &mut rng);
    let (train, val) = match pc.selection {
        EpochSelection::Validation => stratified_split(&train_all, labels, 1.0 - pc.validation, &mut rng),
        EpochSelection::TestLeak => (train_all, Vec::new()),
    };
    // standardize with training statistics
    let xt = rows(x, &train);
    let mean = xt.mean_axis(Axis(0)).expect("non-empty");
    let std = xt.var_axis(Axis(0), 0.0).mapv(|v| if v > 1e-12 { v.sqrt() } else { 1.0 });
    let z = (x - &mean) / &std;
    let (x_train, x_val, x_test) = (rows(&z, &train), rows(&z, &val), rows(&z, &test));
    let y_of = |idx: &[usize]| idx.iter().map(|&i| labels[i]).collect::<Vec<_>>();
    let (y_train, y_val, y_test) = (y_of(&train), y_of(&val), y_of(&test));

    let mut net = Mlp::new(x.ncols(), pc.hidden, classes, &mut rng);
    let sizes = [net.w1.len(), net.b1.len(), net.w2.len(), net.b2.len()];
    let mut adam = Adam { m: sizes.iter().map(|&n| vec![0.0; n]).collect(), v: sizes.iter().map(|&n| vec![0.0; n]).collect(), t: 0 };
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best = (f64::NEG_INFINITY, 0.0);
    for _ in 0..pc.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(pc.batch) {
            let xb = rows(&x_train, batch);
            let (hidden, out) = net.logits(&xb);
            let mut d = out;
            for (mut r, &i) in d.rows_mut().into_iter().zip(batch) {
                let max = r.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                r.mapv_inplace(|v| (v - max).exp());
                let s = r.sum();
                r /= s;
                r[y_train[i]] -= 1.0;
            }
            d /= batch.len() as f64;
            let gw2 = hidden.t().dot(&d);
            let gb2 = d.sum_axis(Axis(0));
            let mut dh = d.dot(&net.w2.t());
            dh.zip_mut_with(&hidden, |g, &h| {
                if h <= 0.0 {
                    *g = 0.0
                }
            });
            let gw1 = xb.t().dot(&dh);
            let gb1 = dh.sum_axis(Axis(0));
            adam.step(
                [
                    net.w1.as_slice_mut().unwrap(),
                    net.b1.as_slice_mut().unwrap(),
                    net.w2.as_slice_mut().unwrap(),
                    net.b2.as_slice_mut().unwrap(),
                ],
                [gw1.as_slice().unwrap(), gb1.as_slice().unwrap(), gw2.as_slice().unwrap(), gb2.as_slice().unwrap()],
                pc.lr,
            );
        }
        let test_acc = net.accuracy(&x_test, &y_test);
        let score = match pc.selection {
            EpochSelection::Validation => net.accuracy(&x_val, &y_val),
            EpochSelection::TestLeak => test_acc,
        };
        if score > best.0 {
            best = (score, test_acc);
        }
    }
    best.1
}

/// Two-layer ReLU probe on fixed embeddings, one run per seed.
pub fn train_probe(embeddings: &[Vec<f64>], labels: &[usize], pc: &ProbeConfig) -> Result<ProbeResult> {
    if embeddings.len() != labels.len() || embeddings.is_empty() {
        return Err(Error::Shape(format!("{} embeddings for {} labels", embeddings.len(), labels.len())));
    }
    let d = embeddings[0].len();
    if d == 0 || embeddings.iter().any(|e| e.len() != d) {
        return Err(Error::Shape("embeddings must share one non-zero width".into()));
    }
    if embeddings.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite embedding value".into()));
    }
    if pc.seeds.is_empty() || pc.batch == 0 || pc.epochs == 0 || pc.hidden == 0 {
        return Err(Error::InvalidArgument("probe needs seeds, a batch size, epochs and hidden units".into()));
    }
    if !(pc.split > 0.0 && pc.split < 1.0) || !(pc.validation > 0.0 && pc.validation < 1.0) {
        return Err(Error::InvalidArgument("split and validation fractions must lie in (0, 1)".into()));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut counts = vec![0usize; classes];
    labels.iter().for_each(|&l| counts[l] += 1);
    let present = counts.iter().filter(|&&c| c > 0).count();
    if present < 2 {
        return Err(Error::InsufficientData("probe needs at least two classes".into()));
    }
    let min_needed = match pc.selection {
        EpochSelection::Validation => 3,
        EpochSelection::TestLeak => 2,
    };
    if let Some(c) = counts.iter().position(|&c| c > 0 && c < min_needed) {
        return Err(Error::InsufficientData(format!("class {c} has {} samples; cannot stratify", counts[c])));
    }
    let x = Array2::from_shape_fn((embeddings.len(), d), |(i, j)| embeddings[i][j]);
    let accuracies: Vec<f64> = pc.seeds.iter().map(|&s| run_seed(&x, labels, classes, pc, s)).collect();
    let n = accuracies.len() as f64;
    let mean = accuracies.iter().sum::<f64>() / n;
    let stderr = if accuracies.len() > 1 {
        (accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() / n.sqrt()
    } else {
        0.0
    };
    Ok(ProbeResult { accuracies, mean, stderr, majority: majority_baseline(labels) })
}
