use ndarray::{s, Array1, Array2, ArrayView2};
use rand::Rng as _;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::Rng;

const ASSIGN_CHUNK: usize = 1024;

/// K codebooks of `vocab` vectors each. The last entry of every codebook is
/// pinned to the zero vector, so a quantization stage can always leave its
/// residual unchanged and residual norms never grow across stages.
#[derive(Debug, Clone, PartialEq)]
pub struct CodebookSet {
    /// Each vocab x dim.
    pub books: Vec<Array2<f64>>,
}

impl CodebookSet {
    pub fn new(books: Vec<Array2<f64>>) -> Result<Self> {
        let first = books.first().ok_or_else(|| Error::Shape("at least one codebook required".into()))?;
        let shape = first.dim();
        if books.iter().any(|b| b.dim() != shape) {
            return Err(Error::Shape("codebooks must share vocab and width".into()));
        }
        if books.iter().any(|b| b.iter().any(|v| !v.is_finite())) {
            return Err(Error::Numerical("non-finite codebook entry".into()));
        }
        Ok(Self { books })
    }

    pub fn num_codebooks(&self) -> usize {
        self.books.len()
    }

    pub fn vocab(&self) -> usize {
        self.books[0].nrows()
    }

    pub fn dim(&self) -> usize {
        self.books[0].ncols()
    }

    /// Quantize every row of `features` (N x dim).
    /// Returns token indices (N x K) and reconstructions (N x dim).
    pub fn quantize_batch(&self, features: &Array2<f64>) -> (Array2<u32>, Array2<f64>) {
        let n = features.nrows();
        let mut residual = features.clone();
        let mut recon = Array2::zeros(features.dim());
        let mut tokens = Array2::zeros((n, self.num_codebooks()));
        for (k, book) in self.books.iter().enumerate() {
            let assign = nearest_codes(residual.view(), book);
            for (i, &a) in assign.iter().enumerate() {
                tokens[[i, k]] = a as u32;
                let code = book.row(a);
                residual.row_mut(i).scaled_add(-1.0, &code);
                recon.row_mut(i).scaled_add(1.0, &code);
            }
        }
        (tokens, recon)
    }

    /// Sum of the selected vectors for each row of `tokens` (N x K).
    pub fn lookup(&self, tokens: &Array2<u32>) -> Array2<f64> {
        let mut out = Array2::zeros((tokens.nrows(), self.dim()));
        for (i, row) in tokens.rows().into_iter().enumerate() {
            for (k, &t) in row.iter().enumerate() {
                out.row_mut(i).scaled_add(1.0, &self.books[k].row(t as usize));
            }
        }
        out
    }
}

/// Residual vector quantization of one feature vector.
pub fn residual_quantize(feature: &[f64], cb: &CodebookSet) -> Result<(Vec<u32>, Vec<f64>)> {
    if feature.len() != cb.dim() {
        return Err(Error::Shape(format!("feature of width {} for codebooks of width {}", feature.len(), cb.dim())));
    }
    let x = Array2::from_shape_vec((1, feature.len()), feature.to_vec()).expect("shape");
    let (tokens, recon) = cb.quantize_batch(&x);
    Ok((tokens.row(0).to_vec(), recon.row(0).to_vec()))
}

/// Index of the nearest codebook row for each input row (ties: lowest index).
pub(crate) fn nearest_codes(x: ArrayView2<f64>, book: &Array2<f64>) -> Vec<usize> {
    let norms: Array1<f64> = book.rows().into_iter().map(|r| r.dot(&r)).collect();
    let starts: Vec<usize> = (0..x.nrows()).step_by(ASSIGN_CHUNK).collect();
    let chunks: Vec<Vec<usize>> = starts
        .into_par_iter()
        .map(|start| {
            let end = (start + ASSIGN_CHUNK).min(x.nrows());
            let scores = x.slice(s![start..end, ..]).dot(&book.t());
            scores
                .rows()
                .into_iter()
                .map(|row| {
                    let mut best = 0;
                    let mut best_d = f64::INFINITY;
                    for (j, s) in row.iter().enumerate() {
                        let d = norms[j] - 2.0 * s;
                        if d < best_d {
                            best_d = d;
                            best = j;
                        }
                    }
                    best
                })
                .collect()
        })
        .collect();
    chunks.concat()
}

fn squared_errors(x: &Array2<f64>, book: &Array2<f64>, assign: &[usize]) -> Vec<f64> {
    assign
        .iter()
        .enumerate()
        .map(|(i, &a)| {
            let d = &x.row(i) - &book.row(a);
            d.dot(&d)
        })
        .collect()
}

/// k-means++ seeding. Distances start from the pinned zero code, so frames
/// already quantized exactly are never drawn; rows left over stay zero.
fn seed_codebook(x: &Array2<f64>, count: usize, rng: &mut Rng) -> Array2<f64> {
    let (n, dim) = x.dim();
    let mut book = Array2::zeros((count, dim));
    let mut d2: Vec<f64> = x.rows().into_iter().map(|r| r.dot(&r)).collect();
    let mut cumulative = vec![0.0; n];
    for c in 0..count {
        let mut total = 0.0;
        for (acc, d) in cumulative.iter_mut().zip(&d2) {
            total += d;
            *acc = total;
        }
        if !(total > 0.0) {
            break;
        }
        let u = rng.random::<f64>() * total;
        let pick = cumulative.partition_point(|&v| v <= u).min(n - 1);
        book.row_mut(c).assign(&x.row(pick));
        let centre = x.row(pick);
        d2.par_iter_mut().enumerate().for_each(|(i, d)| {
            let diff = &x.row(i) - &centre;
            *d = d.min(diff.dot(&diff));
        });
    }
    book
}

/// Fit one stage with Lloyd iterations. Returns the codebook and the mean
/// squared quantization error after each epoch (non-increasing).
///
/// Codes left unused by an epoch are moved onto the worst-quantized frames.
pub(crate) fn train_stage(x: &Array2<f64>, vocab: usize, epochs: usize, rng: &mut Rng) -> (Array2<f64>, Vec<f64>) {
    let (n, dim) = x.dim();
    let zero = vocab - 1;
    let book_init = seed_codebook(x, zero, rng);
    let mut book = Array2::zeros((vocab, dim));
    book.slice_mut(s![..zero, ..]).assign(&book_init);
    let mut assign = nearest_codes(x.view(), &book);
    let mut errors = squared_errors(x, &book, &assign);
    let mut curve = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        let mut sums = Array2::<f64>::zeros((vocab, dim));
        let mut counts = vec![0usize; vocab];
        for (i, &a) in assign.iter().enumerate() {
            sums.row_mut(a).scaled_add(1.0, &x.row(i));
            counts[a] += 1;
        }
        let mut dead = Vec::new();
        for c in 0..zero {
            if counts[c] > 0 {
                let mean = &sums.row(c) / counts[c] as f64;
                book.row_mut(c).assign(&mean);
            } else {
                dead.push(c);
            }
        }
        if !dead.is_empty() {
            let mut worst: Vec<usize> = (0..n).collect();
            worst.sort_by(|&a, &b| errors[b].total_cmp(&errors[a]).then(a.cmp(&b)));
            for (c, &i) in dead.iter().zip(worst.iter().filter(|&&i| errors[i] > 0.0)) {
                book.row_mut(*c).assign(&x.row(i));
            }
        }
        assign = nearest_codes(x.view(), &book);
        errors = squared_errors(x, &book, &assign);
        curve.push(errors.iter().sum::<f64>() / n as f64);
    }
    (book, curve)
}

/// Train all stages on successive residuals.
pub(crate) fn train_codebooks(
    features: &Array2<f64>,
    codebooks: usize,
    vocab: usize,
    epochs: usize,
    rng: &mut Rng,
) -> (CodebookSet, Vec<Vec<f64>>) {
    let mut residual = features.clone();
    let mut books = Vec::with_capacity(codebooks);
    let mut curves = Vec::with_capacity(codebooks);
    for _ in 0..codebooks {
        let (book, curve) = train_stage(&residual, vocab, epochs, rng);
        let assign = nearest_codes(residual.view(), &book);
        for (i, &a) in assign.iter().enumerate() {
            residual.row_mut(i).scaled_add(-1.0, &book.row(a));
        }
        books.push(book);
        curves.push(curve);
    }
    (CodebookSet { books }, curves)
}

/// Residual norms after each stage, for diagnostics and tests.
pub fn residual_norms(feature: &[f64], cb: &CodebookSet) -> Result<Vec<f64>> {
    let (tokens, _) = residual_quantize(feature, cb)?;
    let mut r = Array1::from(feature.to_vec());
    let mut norms = Vec::with_capacity(tokens.len());
    for (k, &t) in tokens.iter().enumerate() {
        r -= &cb.books[k].slice(s![t as usize, ..]);
        norms.push(r.dot(&r).sqrt());
    }
    Ok(norms)
}
