//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! `ACCEPTANCE_ONLY=4,9` restricts the run to the listed criteria.

#[path = "../../core/tests/support/dd.rs"]
mod dd;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use codavamp_core::audio::{estimate_noise_profile, normalize, spectral_subtract, DEFAULT_SPECTRAL_FLOOR};
use codavamp_core::codec::{train_codec, CodecConfig};
use codavamp_core::eval::{
    builtin_embedding, calibrate_embeddings, calibration_ratio, embed_all, encode_labels, fad, fit_gaussian,
    fleiss_kappa, frechet_distance, normalize_fad, recon_error_study, train_probe, CovarianceMode, EnergyEmbedding,
    EmbeddingModel, GaussianStats, IdentityStub, OnsetFeatures, ProbeConfig, ProbeResult, RatingsMatrix, ZeroStub,
};
use codavamp_core::matm::{
    apply_lora, evaluate, finetune, forward, masked_loss, merge_lora, train, Grads, LoraAdapter, LoraConfig, MatmConfig,
    MatmWeights, Model, TrainConfig,
};
use codavamp_core::rng::{normal, rng_from};
use codavamp_core::synth::{generate_corpus, synth_beeps, BeepSpec, CorpusConfig, BEEP_SAMPLE_RATE};
use codavamp_core::vamp::{build_prompt_mask, iterative_decode_traced, translate, PromptSettings};
use codavamp_core::{Codec, TokenGrid, Waveform, MASK};
use ndarray::{Array1, Array2};
use rand::Rng as _;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond { Ok(()) } else { Err(msg()) }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn random_grid(k: usize, l: usize, vocab: u32, seed: u64) -> TokenGrid {
    let mut rng = rng_from(seed);
    let toks = (0..k * l).map(|_| rng.random_range(0..vocab)).collect();
    TokenGrid::new(k, l, vocab, toks, 267, 16_000).unwrap()
}

fn gaussian(mean: Array1<f64>, cov: Array2<f64>) -> GaussianStats {
    GaussianStats { mean, cov, n: 0 }
}

fn rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

/// X X^T / cols, plus `ridge` on the diagonal. Rank-deficient when cols < d and ridge is 0.
fn random_psd(d: usize, cols: usize, ridge: f64, seed: u64) -> Array2<f64> {
    let mut rng = rng_from(seed);
    let x = Array2::from_shape_simple_fn((d, cols), || normal(&mut rng));
    x.dot(&x.t()) / cols as f64 + Array2::<f64>::eye(d) * ridge
}

fn grid_shape() -> Outcome {
    let items = generate_corpus(&CorpusConfig { per_class: 2, negatives: 0, ..Default::default() }).map_err(err)?;
    let waves: Vec<Waveform> = items.into_iter().map(|i| i.waveform).collect();
    let (codec, _) = train_codec(&waves, &CodecConfig { epochs: 1, ..Default::default() }).map_err(err)?;
    let snippet = &waves[3];
    ensure(snippet.len() == 32_000 && snippet.sample_rate == 16_000, || "snippet is not 2.0 s at 16 kHz".into())?;
    let t = Instant::now();
    let g = codec.tokenize(snippet).map_err(err)?;
    let took = t.elapsed();
    ensure((g.codebooks(), g.len()) == (14, 120), || format!("grid {}x{}", g.codebooks(), g.len()))?;
    ensure(took < Duration::from_secs(1), || format!("tokenizing took {took:?}"))?;
    Ok(format!("grid 14x120, tokenized in {took:.2?}"))
}

fn frechet_oracle() -> Outcome {
    let mut worst_analytic = 0.0f64;
    for d in [1usize, 2, 3, 8, 16, 32, 64] {
        let mu = Array1::from_shape_fn(d, |i| 0.25 * i as f64 - 1.5);
        let eye = Array2::<f64>::eye(d);
        let shift = frechet_distance(&gaussian(Array1::zeros(d), eye.clone()), &gaussian(mu.clone(), eye.clone())).map_err(err)?;
        let scale = frechet_distance(&gaussian(Array1::zeros(d), eye.clone()), &gaussian(Array1::zeros(d), eye * 4.0)).map_err(err)?;
        worst_analytic = worst_analytic.max((shift - mu.dot(&mu)).abs()).max((scale - d as f64).abs());
    }
    ensure(worst_analytic <= 1e-9, || format!("analytic error {worst_analytic:e}"))?;
    let mut worst_rel = 0.0f64;
    let mut pairs = 0;
    for (i, d) in [2usize, 3, 5, 8, 12, 16, 24, 32].into_iter().enumerate() {
        for variant in 0..3u64 {
            let seed = 1000 * i as u64 + 10 * variant;
            let mut rng = rng_from(seed);
            let ma = Array1::from_shape_simple_fn(d, || normal(&mut rng));
            let mb = Array1::from_shape_simple_fn(d, || normal(&mut rng));
            let ca = random_psd(d, 2 * d, 0.05, seed + 1);
            // variant 2 pairs a positive-definite matrix with a singular one
            let cb = if variant == 2 { random_psd(d, d.div_ceil(2), 0.0, seed + 2) } else { random_psd(d, d + 3, 0.01, seed + 2) };
            let got = frechet_distance(&gaussian(ma.clone(), ca.clone()), &gaussian(mb.clone(), cb.clone())).map_err(err)?;
            let want = dd::frechet_oracle(ma.as_slice().unwrap(), &rows(&ca), mb.as_slice().unwrap(), &rows(&cb));
            worst_rel = worst_rel.max((got - want).abs() / want.abs().max(1e-12));
            pairs += 1;
        }
    }
    ensure(worst_rel <= 1e-6, || format!("oracle relative error {worst_rel:e}"))?;
    Ok(format!("analytic max error {worst_analytic:.1e}; {pairs} PSD pairs, max relative error {worst_rel:.1e}"))
}

fn fad_self_and_normalization() -> Outcome {
    let mut worst = 0.0f64;
    for (seed, (n, d)) in [(50usize, 4usize), (200, 16), (500, 64)].into_iter().enumerate() {
        let mut rng = rng_from(seed as u64);
        let x: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| 3.0 * normal(&mut rng) + 1.0).collect()).collect();
        for mode in [CovarianceMode::Unbiased, CovarianceMode::Biased] {
            worst = worst.max(fad(&x, &x, mode).map_err(err)?.abs());
        }
        let g = fit_gaussian(&x).map_err(err)?;
        worst = worst.max(frechet_distance(&g, &g).map_err(err)?.abs());
    }
    ensure(worst <= 1e-9, || format!("self-distance {worst:e}"))?;
    let maps = 200;
    for seed in 0..maps {
        let mut rng = rng_from(50_000 + seed);
        let n = rng.random_range(1..30);
        let raw: BTreeMap<usize, f64> = (0..n).map(|i| (i, rng.random_range(0.0..100.0))).collect();
        let (norm, degenerate) = normalize_fad(&raw).map_err(err)?;
        ensure(!degenerate, || format!("map {seed} flagged degenerate"))?;
        let max = norm.values().cloned().fold(f64::NEG_INFINITY, f64::max);
        ensure(max == 1.0, || format!("map {seed}: max {max}"))?;
        for a in 0..n {
            for b in 0..n {
                ensure((raw[&a] < raw[&b]) == (norm[&a] < norm[&b]), || format!("map {seed}: order changed"))?;
            }
        }
    }
    Ok(format!("max |FAD(X,X)| {worst:.1e}; {maps} maps normalized with max 1.0 and order kept"))
}

/// Five-point central difference of the masked loss with respect to every
/// base and adapter parameter.
fn gradients() -> Outcome {
    let cfg = MatmConfig { layers: 2, model_dim: 16, heads: 2, ff_dim: 32, max_len: 12, vocab: 8, codebooks: 2, dropout: 0.0 };
    let weights = MatmWeights::init_with_std(&cfg, 3, 0.3).map_err(err)?;
    let mut adapter = LoraAdapter::new(&LoraConfig { rank: 2, alpha: 4.0, ..Default::default() }, &cfg, 4).map_err(err)?;
    let mut rng = rng_from(5);
    for p in adapter.params_mut() {
        p.data.iter_mut().for_each(|v| *v = 0.3 * normal(&mut rng));
    }
    let target = random_grid(cfg.codebooks, 12, cfg.vocab as u32, 6);
    let cols = [1usize, 4, 5, 9, 11];
    let mut input = target.clone();
    for &c in &cols {
        input.mask_column(c);
    }
    let loss = |w: &MatmWeights, a: &LoraAdapter| -> f64 {
        masked_loss(&apply_lora(w, a).unwrap(), &input, &target, &cols, None).unwrap()
    };
    let model = apply_lora(&weights, &adapter).map_err(err)?;
    let mut grads = Grads::for_model(&model, true);
    masked_loss(&model, &input, &target, &cols, Some(&mut grads)).map_err(err)?;
    let base_grads = grads.base.take().ok_or("no base gradients")?;
    let lora_grads = grads.lora.take().ok_or("no adapter gradients")?;

    let h = 1e-3;
    let stencil = |f: &mut dyn FnMut(f64) -> f64| (-f(2.0 * h) + 8.0 * f(h) - 8.0 * f(-h) + f(-2.0 * h)) / (12.0 * h);
    let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
    let mut worst = (0.0f64, String::new());
    let mut checked = 0usize;
    let base_params: Vec<(String, Vec<f64>)> = base_grads.params().into_iter().map(|p| (p.name, p.data.to_vec())).collect();
    for (pi, (name, analytic)) in base_params.iter().enumerate() {
        for (j, &a) in analytic.iter().enumerate() {
            let n = stencil(&mut |delta| {
                let mut w = weights.clone();
                w.params_mut()[pi].data[j] += delta;
                loss(&w, &adapter)
            });
            let r = rel(a, n);
            if r > worst.0 {
                worst = (r, format!("{name}[{j}]"));
            }
            checked += 1;
        }
    }
    let lora_params: Vec<(String, Vec<f64>)> = lora_grads.params().into_iter().map(|p| (p.name, p.data.to_vec())).collect();
    for (pi, (name, analytic)) in lora_params.iter().enumerate() {
        for (j, &a) in analytic.iter().enumerate() {
            let n = stencil(&mut |delta| {
                let mut ad = adapter.clone();
                ad.params_mut()[pi].data[j] += delta;
                loss(&weights, &ad)
            });
            let r = rel(a, n);
            if r > worst.0 {
                worst = (r, format!("lora {name}[{j}]"));
            }
            checked += 1;
        }
    }
    ensure(worst.0 < 1e-4, || format!("max relative error {:.2e} at {}", worst.0, worst.1))?;
    Ok(format!("{checked} parameters, max relative error {:.2e} ({})", worst.0, worst.1))
}

fn lora_equivalence() -> Outcome {
    let cfg = MatmConfig { layers: 2, model_dim: 32, heads: 4, ff_dim: 64, max_len: 24, vocab: 16, codebooks: 3, dropout: 0.0 };
    let weights = MatmWeights::init_with_std(&cfg, 11, 0.1).map_err(err)?;
    let lc = LoraConfig { rank: 4, alpha: 8.0, ..Default::default() };
    let grids: Vec<TokenGrid> = (0..8).map(|i| random_grid(3, 24, 16, 100 + i)).collect();
    let fresh = LoraAdapter::new(&lc, &cfg, 12).map_err(err)?;
    for g in &grids {
        let base = forward(&Model::base(&weights), g).map_err(err)?;
        let with = forward(&apply_lora(&weights, &fresh).map_err(err)?, g).map_err(err)?;
        ensure(base.iter().zip(with.iter()).all(|(a, b)| a.to_bits() == b.to_bits()), || "zero-init adapter changed logits".into())?;
    }
    let before = weights.content_hash();
    let tc = TrainConfig { lr: 1e-2, iterations: 30, batch_size: 4, ..Default::default() };
    let (adapter, _) = finetune(&weights, &grids, &lc, &tc).map_err(err)?;
    ensure(weights.content_hash() == before, || "finetune changed the base weights".into())?;
    ensure(adapter.params().iter().any(|p| p.name.ends_with(".b") && p.data.iter().any(|&v| v != 0.0)), || "adapter did not move".into())?;
    let merged = merge_lora(&weights, &adapter).map_err(err)?;
    let mut worst = 0.0f64;
    for g in &grids {
        let applied = forward(&apply_lora(&weights, &adapter).map_err(err)?, g).map_err(err)?;
        let m = forward(&Model::base(&merged), g).map_err(err)?;
        worst = worst.max(applied.iter().zip(m.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
    }
    ensure(worst <= 1e-6, || format!("merged vs applied differ by {worst:e}"))?;
    Ok(format!("zero-init logits bit-equal; merged vs applied max diff {worst:.1e}; base hash unchanged"))
}

fn overfit() -> Outcome {
    let cfg = MatmConfig { layers: 2, model_dim: 64, heads: 4, ff_dim: 256, max_len: 32, vocab: 32, codebooks: 2, dropout: 0.0 };
    let grids: Vec<TokenGrid> = (0..10).map(|i| random_grid(2, 32, 32, 700 + i)).collect();
    let mut w = MatmWeights::init(&cfg, 1).map_err(err)?;
    let tc = TrainConfig { lr: 3e-3, iterations: 2000, batch_size: 10, weight_decay: 0.0, ..Default::default() };
    train(&mut w, &grids, &tc).map_err(err)?;
    let mut accs = Vec::new();
    for rate in [0.1, 0.5, 0.9] {
        accs.push(evaluate(&Model::base(&w), &grids, rate, 5).map_err(err)?.accuracy());
    }
    // at 0.9 only ~3 columns are visible, reported but not gated
    ensure(accs[..2].iter().all(|&a| a > 0.95), || format!("accuracy at mask rates 0.1/0.5/0.9: {accs:.3?}"))?;
    Ok(format!("2000 steps; accuracy at mask rates 0.1/0.5 (gated) /0.9: {accs:.3?}"))
}

fn decoding_invariants() -> Outcome {
    let s = PromptSettings::preset("codas").map_err(err)?;
    ensure(s.steps == 50, || format!("codas preset has {} steps", s.steps))?;
    let cfg = MatmConfig { layers: 2, model_dim: 32, heads: 4, ff_dim: 64, max_len: 120, vocab: 16, codebooks: 2, dropout: 0.0 };
    let w = MatmWeights::init_with_std(&cfg, 21, 0.2).map_err(err)?;
    let model = Model::base(&w);
    let mut partial = 0;
    for i in 0..100u64 {
        let g = random_grid(2, 120, 16, 9000 + i);
        let mut rng = rng_from(i);
        let keep = if i % 2 == 0 {
            Default::default()
        } else {
            partial += 1;
            let onsets: Vec<usize> = (0..rng.random_range(0..4)).map(|_| rng.random_range(0..120)).collect();
            build_prompt_mask(120, &onsets, &s)
        };
        let mut masked = g.clone();
        for t in (0..120).filter(|t| !keep.contains(t)) {
            masked.mask_column(t);
        }
        let initial = masked.mask_count();
        let (out, counts) = iterative_decode_traced(&model, &masked, &s.clone().with_seed(i)).map_err(err)?;
        ensure(counts.len() == s.steps, || format!("grid {i}: {} steps", counts.len()))?;
        ensure(counts.last() == Some(&0), || format!("grid {i}: {:?} left", counts.last()))?;
        let mut prev = initial;
        for &c in &counts {
            ensure(c < prev, || format!("grid {i}: count {c} after {prev}"))?;
            prev = c;
        }
        ensure(out.tokens().iter().all(|&t| t != MASK), || format!("grid {i}: MASK in output"))?;
        for &t in &keep {
            for k in 0..2 {
                ensure(out.get(k, t) == g.get(k, t), || format!("grid {i}: kept column {t} changed"))?;
            }
        }
    }
    Ok(format!("100 grids ({partial} prompted, {} fully masked), 50 strictly decreasing steps each", 100 - partial))
}

/// Models shared by the translation and probe criteria.
struct CodaModels {
    waves: Vec<Waveform>,
    rhythm: Vec<String>,
    codec: Arc<Codec>,
    weights: Arc<MatmWeights>,
}

const CODA_ITERATIONS: usize = 10_000;

fn train_coda_models() -> Result<CodaModels, String> {
    let items = generate_corpus(&CorpusConfig { per_class: 200, negatives: 0, ..Default::default() }).map_err(err)?;
    let rhythm = items.iter().map(|i| i.entry.labels["rhythm"].clone()).collect();
    let waves: Vec<Waveform> = items.iter().map(|i| normalize(&i.waveform)).collect::<Result<_, _>>().map_err(err)?;
    let (codec, _) =
        train_codec(&waves, &CodecConfig { codebooks: 2, vocab: 128, dim: 64, epochs: 10, ..Default::default() }).map_err(err)?;
    let grids: Vec<TokenGrid> = waves.iter().map(|w| codec.tokenize(w)).collect::<Result<_, _>>().map_err(err)?;
    let cfg = MatmConfig { layers: 2, model_dim: 64, heads: 4, ff_dim: 256, vocab: 128, codebooks: 2, ..Default::default() };
    let mut weights = MatmWeights::init(&cfg, 0).map_err(err)?;
    train(&mut weights, &grids, &TrainConfig { lr: 1e-3, iterations: CODA_ITERATIONS, ..Default::default() }).map_err(err)?;
    Ok(CodaModels { waves, rhythm, codec: Arc::new(codec), weights: Arc::new(weights) })
}

fn translation_direction(m: &CodaModels) -> Outcome {
    let emb = builtin_embedding("matm-pooled", Some(&m.codec), Some((&m.weights, None))).map_err(err)?;
    let reference: Vec<Waveform> = m.waves.iter().step_by(2).cloned().collect();
    let ref_e = embed_all(emb.as_ref(), &reference).map_err(err)?;
    let model = Model::base(&m.weights);
    let mut lines = Vec::new();
    let mut wins = 0;
    for run in 0..5u64 {
        let beeps: Vec<Waveform> = (0..30u64)
            .map(|i| synth_beeps(&BeepSpec { n_clicks: 3 + (i % 6) as usize, duration: 2.0, seed: run * 1000 + i }, BEEP_SAMPLE_RATE))
            .collect::<Result<_, _>>()
            .map_err(err)?;
        let s = PromptSettings::preset("beeps").map_err(err)?.with_seed(run);
        let translated: Vec<Waveform> = beeps.iter().map(|b| translate(&m.codec, &model, b, &s)).collect::<Result<_, _>>().map_err(err)?;
        let raw = fad(&embed_all(emb.as_ref(), &beeps).map_err(err)?, &ref_e, CovarianceMode::Unbiased).map_err(err)?;
        let tr = fad(&embed_all(emb.as_ref(), &translated).map_err(err)?, &ref_e, CovarianceMode::Unbiased).map_err(err)?;
        wins += usize::from(tr < raw);
        lines.push(format!("{raw:.3}->{tr:.3}"));
    }
    let detail = format!("{wins}/5 runs closer after translation (raw->translated: {})", lines.join(", "));
    ensure(wins >= 4, || detail.clone())?;
    Ok(detail)
}

fn probe_separation(m: &CodaModels) -> Outcome {
    let (labels, classes) = encode_labels(&m.rhythm.iter().map(String::as_str).collect::<Vec<_>>());
    ensure(classes.len() == 5, || format!("{} rhythm classes", classes.len()))?;
    let pc = ProbeConfig::default();
    let mut results: BTreeMap<&str, ProbeResult> = BTreeMap::new();
    for name in ["matm-pooled", "tokenizer", "random-projection"] {
        let emb = builtin_embedding(name, Some(&m.codec), Some((&m.weights, None))).map_err(err)?;
        let e = embed_all(emb.as_ref(), &m.waves).map_err(err)?;
        results.insert(name, train_probe(&e, &labels, &pc).map_err(err)?);
    }
    let (full, tok, rp) = (&results["matm-pooled"], &results["tokenizer"], &results["random-projection"]);
    let maj = full.majority;
    let detail = format!(
        "majority {maj:.3}; matm-pooled {:.3}±{:.3}; tokenizer {:.3}±{:.3}; random-projection {:.3}±{:.3}",
        full.mean, full.stderr, tok.mean, tok.stderr, rp.mean, rp.stderr
    );
    ensure(full.mean - maj >= 0.15, || format!("matm-pooled margin too small: {detail}"))?;
    ensure((rp.mean - maj).abs() <= 0.05, || format!("random projection off chance: {detail}"))?;
    // between chance and the full model, and significantly below the latter
    let gap = full.mean - tok.mean;
    ensure(tok.mean >= maj - 0.05 && gap > 2.0 * (full.stderr.powi(2) + tok.stderr.powi(2)).sqrt(), || {
        format!("tokenizer not between: {detail}")
    })?;
    Ok(detail)
}

fn recon_study() -> Outcome {
    let items = generate_corpus(&CorpusConfig { per_class: 4, negatives: 2, ..Default::default() }).map_err(err)?;
    let waves: Vec<Waveform> = items.into_iter().map(|i| i.waveform).collect();
    let mut parts = Vec::new();
    for ms in [2.27, 22.7] {
        let id = recon_error_study(&IdentityStub, &waves, ms).map_err(err)?;
        ensure(id.errors.iter().all(|&e| e == 0.0), || format!("{ms} ms: identity error not zero"))?;
        let zero = recon_error_study(&ZeroStub, &waves, ms).map_err(err)?;
        let energetic: Vec<f64> = zero.errors.iter().zip(&zero.counts).filter(|(_, &n)| n > 0).map(|(&e, _)| e).collect();
        ensure(!energetic.is_empty(), || format!("{ms} ms: no energetic bins"))?;
        let dev = energetic.iter().map(|e| (e - 1.0).abs()).fold(0.0, f64::max);
        ensure(dev <= 1e-6, || format!("{ms} ms: zero-stub error deviates from 1 by {dev:e}"))?;
        parts.push(format!("{ms} ms: {} bins, zero-stub max |E-1| {dev:.1e}", energetic.len()));
    }
    Ok(format!("identity E = 0; {}", parts.join("; ")))
}

fn calibration() -> Outcome {
    let (ratio, degenerate) = calibration_ratio(16.7817, 22.4761);
    ensure(!degenerate && format!("{ratio:.4}") == "1.3393", || format!("reference ratio {ratio}"))?;
    let cc = CorpusConfig { per_class: 20, negatives: 0, noise_rms: 0.1, ..Default::default() };
    let items = generate_corpus(&cc).map_err(err)?;
    let mut codas = Vec::new();
    let mut denoised = Vec::new();
    for it in &items {
        let spans: Vec<(usize, usize)> = it.onsets.iter().map(|&o| (o, o + it.click_len)).collect();
        let profile = estimate_noise_profile(&it.waveform, &spans, 512, 128).map_err(err)?;
        denoised.push(spectral_subtract(&it.waveform, &profile, DEFAULT_SPECTRAL_FLOOR).map_err(err)?);
        codas.push(it.waveform.clone());
    }
    let models: Vec<Box<dyn EmbeddingModel>> = vec![Box::new(EnergyEmbedding), Box::new(OnsetFeatures::default())];
    let rows = calibrate_embeddings(&codas, &denoised, &models, CovarianceMode::Unbiased).map_err(err)?;
    let get = |n: &str| rows.iter().find(|r| r.model == n).map(|r| r.ratio).unwrap_or(f64::NAN);
    let (energy, onset) = (get("energy"), get("onset"));
    let detail = format!("reference 1.3393; energy ratio {energy:.3}; onset ratio {onset:.3}");
    ensure(energy < 1.0 && onset > 1.0, || detail.clone())?;
    Ok(detail)
}

fn kappa() -> Outcome {
    let perfect = RatingsMatrix::new(vec![vec![4, 0, 0], vec![0, 4, 0], vec![0, 0, 4], vec![4, 0, 0]]).map_err(err)?;
    let k1 = fleiss_kappa(&perfect);
    ensure(k1 == 1.0, || format!("perfect agreement gives {k1}"))?;
    let split = RatingsMatrix::new(vec![vec![1, 1], vec![1, 1]]).map_err(err)?;
    let k2 = fleiss_kappa(&split);
    ensure((k2 + 1.0).abs() <= 1e-12, || format!("[[1,1],[1,1]] gives {k2}"))?;
    let mut worst = 0.0f64;
    for seed in 0..100u64 {
        let mut rng = rng_from(77_000 + seed);
        let (items, cats, raters) = (rng.random_range(2..15), rng.random_range(2..7), rng.random_range(2..12u32));
        let counts: Vec<Vec<u32>> = (0..items)
            .map(|_| {
                let mut row = vec![0u32; cats];
                for _ in 0..raters {
                    row[rng.random_range(0..cats)] += 1;
                }
                row
            })
            .collect();
        let mut perm: Vec<usize> = (0..cats).collect();
        for i in (1..cats).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let permuted: Vec<Vec<u32>> = counts.iter().map(|r| perm.iter().map(|&j| r[j]).collect()).collect();
        let a = fleiss_kappa(&RatingsMatrix::new(counts).map_err(err)?);
        let b = fleiss_kappa(&RatingsMatrix::new(permuted).map_err(err)?);
        worst = worst.max((a - b).abs());
    }
    ensure(worst <= 1e-12, || format!("permutation changed kappa by {worst:e}"))?;
    Ok(format!("perfect 1, split {k2}, 100 permutations max change {worst:.1e}"))
}

const SMOKE_CONFIG: &str = r#"{
  "seed": 7,
  "corpus": {"per_class": 6, "negatives": 3},
  "codec": {"codebooks": 2, "vocab": 32, "dim": 16, "epochs": 3},
  "matm": {"layers": 1, "model_dim": 16, "heads": 2, "ff_dim": 32},
  "train": {"iterations": 20, "lr": 0.001},
  "finetune": {"iterations": 10, "lr": 0.001},
  "lora": {"rank": 2},
  "prompts": {"codas": {"periodic_prompt": 12, "onset_mask_width": 21, "steps": 6, "typical_mass": 0.102, "sample_cutoff": 0.17}},
  "probe": {"classifier": {"epochs": 3}}
}"#;

fn smoke_pipeline(dir: &Path) -> Result<(), String> {
    std::fs::write(dir.join("smoke.json"), SMOKE_CONFIG).map_err(err)?;
    let steps: [&[&str]; 11] = [
        &["synth"],
        &["train-codec"],
        &["train-matm"],
        &["finetune", "--phase", "domain"],
        &["finetune", "--phase", "species"],
        &["translate", "--input", "out/corpus/audio", "--source", "codas"],
        &["eval-fad", "--set", "codas=out/corpus/audio", "--set", "translated=out/translated/codas"],
        &["calibrate"],
        &["eval-recon"],
        &["eval-probe", "--task", "rhythm"],
        &["kappa", "--ratings", "ratings.csv"],
    ];
    std::fs::write(dir.join("ratings.csv"), "a,b,c\n2,1,0\n0,3,0\n1,1,1\n").map_err(err)?;
    for args in steps {
        let out = Command::new(env!("CARGO_BIN_EXE_codavamp"))
            .current_dir(dir)
            .args(["--config", "smoke.json", "--out-dir", "out", "--threads", "1"])
            .args(args)
            .output()
            .map_err(err)?;
        ensure(out.status.success(), || format!("{args:?} failed: {}", String::from_utf8_lossy(&out.stderr)))?;
    }
    Ok(())
}

fn files_under(root: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).map_err(err)? {
            let p = e.map_err(err)?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&p).map_err(err)?);
            }
        }
    }
    Ok(out)
}

fn determinism() -> Outcome {
    let (a, b) = (tempfile::tempdir().map_err(err)?, tempfile::tempdir().map_err(err)?);
    smoke_pipeline(a.path())?;
    smoke_pipeline(b.path())?;
    let (fa, fb) = (files_under(&a.path().join("out"))?, files_under(&b.path().join("out"))?);
    ensure(fa.keys().eq(fb.keys()), || "runs produced different file sets".into())?;
    let differing: Vec<&String> = fa.iter().filter(|(k, v)| fb[*k] != **v).map(|(k, _)| k).collect();
    ensure(differing.is_empty(), || format!("differing files: {differing:?}"))?;
    let count = |ext: &str| fa.keys().filter(|k| k.ends_with(ext)).count();
    let (wav, ckpt, csv) = (count(".wav"), count(".f32"), count(".csv"));
    ensure(wav > 0 && ckpt > 0 && csv > 0, || format!("missing artefacts: {wav} wav, {ckpt} tensors, {csv} csv"))?;
    Ok(format!("{} files identical ({wav} wav, {ckpt} checkpoint tensors, {csv} csv)", fa.len()))
}

struct Criterion {
    id: u32,
    name: &'static str,
    /// `None` when the check times its own critical section.
    limit: Option<Duration>,
}

const fn criterion(id: u32, name: &'static str, secs: u64) -> Criterion {
    Criterion { id, name, limit: Some(Duration::from_secs(secs)) }
}

const CRITERIA: [Criterion; 13] = [
    Criterion { id: 1, name: "token-grid geometry", limit: None },
    criterion(2, "frechet analytic and oracle", 5),
    criterion(3, "fad self-distance and normalization", 5),
    criterion(4, "gradient correctness", 120),
    criterion(5, "lora identity and merge", 60),
    criterion(6, "overfit sanity", 600),
    criterion(7, "decoding invariants", 120),
    criterion(8, "translation direction", 1800),
    criterion(9, "probe separation", 1200),
    criterion(10, "reconstruction study", 60),
    criterion(11, "calibration harness", 300),
    criterion(12, "fleiss kappa", 5),
    criterion(13, "determinism", 1800),
];

fn main() {
    let only: Option<Vec<u32>> =
        std::env::var("ACCEPTANCE_ONLY").ok().map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let selected = |id: u32| only.as_ref().is_none_or(|o| o.contains(&id));
    let mut coda: Option<(Result<CodaModels, String>, Duration)> = None;
    let mut failed = 0;
    let mut ran = 0;
    for c in CRITERIA.iter().filter(|c| selected(c.id)) {
        let mut setup = Duration::ZERO;
        if matches!(c.id, 8 | 9) && coda.is_none() {
            let t = Instant::now();
            let m = catch_unwind(train_coda_models).unwrap_or_else(|_| Err("training panicked".into()));
            coda = Some((m, t.elapsed()));
        }
        if matches!(c.id, 8 | 9) {
            setup = coda.as_ref().unwrap().1;
        }
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(|| match c.id {
            1 => grid_shape(),
            2 => frechet_oracle(),
            3 => fad_self_and_normalization(),
            4 => gradients(),
            5 => lora_equivalence(),
            6 => overfit(),
            7 => decoding_invariants(),
            8 | 9 => match &coda.as_ref().unwrap().0 {
                Ok(m) if c.id == 8 => translation_direction(m),
                Ok(m) => probe_separation(m),
                Err(e) => Err(format!("model training failed: {e}")),
            },
            10 => recon_study(),
            11 => calibration(),
            12 => kappa(),
            13 => determinism(),
            _ => unreachable!(),
        }))
        .unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let took = t.elapsed() + setup;
        let outcome = match outcome {
            Ok(d) if c.limit.is_some_and(|l| took > l) => Err(format!("{d}; took {took:.1?}, limit {:?}", c.limit.unwrap())),
            o => o,
        };
        ran += 1;
        let timing = if setup.is_zero() { format!("{took:.1?}") } else { format!("{took:.1?} incl. {setup:.1?} shared training") };
        match outcome {
            Ok(d) => println!("PASS {:>2} {}: {d} [{timing}]", c.id, c.name),
            Err(d) => {
                failed += 1;
                println!("FAIL {:>2} {}: {d} [{timing}]", c.id, c.name);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
