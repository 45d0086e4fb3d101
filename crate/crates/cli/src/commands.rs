use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use codavamp_core::audio::{estimate_noise_profile, normalize, resample, spectral_subtract, OnsetParams, Waveform};
use codavamp_core::codec::{train_codec, Codec};
use codavamp_core::eval::{
    builtin_embedding, calibrate_embeddings, embed_all, encode_labels, recon_error_study, train_probe,
    write_calibration_csv, fleiss_kappa, EmbeddingModel, FadReport, IdentityStub, MatmPooled, RatingsMatrix, Reconstructor, ZeroStub,
    BUILTIN_NAMES,
};
use codavamp_core::matm::{finetune, merge_lora, train, LoraAdapter, MatmWeights, Model, TrainReport};
use codavamp_core::rng::{derive, derive_named};
use codavamp_core::synth::{build_corpus, Split, NO_LABEL};
use codavamp_core::vamp::translate;
use codavamp_core::TokenGrid;
use serde::Serialize;

use crate::config::RunConfig;
use crate::data::{load_click_spans, load_set, write_json, write_wav, Clip};
use crate::{CliError, Command, Phase};

type Res<T = ()> = Result<T, CliError>;

/// Artifact locations under the output root.
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn corpus(&self) -> PathBuf {
        self.root.join("corpus")
    }
    pub fn codec(&self) -> PathBuf {
        self.root.join("codec")
    }
    pub fn matm(&self) -> PathBuf {
        self.root.join("matm")
    }
    pub fn adapter(&self, phase: Phase) -> PathBuf {
        self.root.join("adapters").join(phase.name())
    }
    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }
    pub fn logs(&self) -> PathBuf {
        self.root.join("logs")
    }
}

#[derive(Serialize)]
struct Resolved<'a> {
    command: &'a Command,
    config: &'a RunConfig,
}

pub fn dispatch(mut cfg: RunConfig, cmd: &Command) -> Res {
    let layout = Layout { root: cfg.out_dir.clone() };
    std::fs::create_dir_all(&layout.root)?;
    // flags win over the config file
    match cmd {
        Command::EvalFad { embedding: Some(e), .. } => cfg.fad.embedding = e.clone(),
        Command::EvalRecon { chunk_ms, reconstructor, .. } => {
            if !chunk_ms.is_empty() {
                cfg.recon.chunk_ms = chunk_ms.clone();
            }
            if let Some(r) = reconstructor {
                cfg.recon.reconstructor = r.clone();
            }
        }
        Command::EvalProbe { task, variants, .. } => {
            if let Some(t) = task {
                cfg.probe.task = t.clone();
            }
            if !variants.is_empty() {
                cfg.probe.variants = variants.clone();
            }
        }
        _ => {}
    }
    if matches!(cmd, Command::TrainMatm { .. } | Command::Finetune { .. }) {
        adopt_codec_geometry(&mut cfg, &layout)?;
    }
    write_json(&layout.root.join(format!("resolved_config.{}.json", cmd.name())), &Resolved { command: cmd, config: &cfg })?;
    let data = |d: &Option<PathBuf>| d.clone().unwrap_or_else(|| layout.corpus());
    match cmd {
        Command::Synth => synth(&cfg, &layout),
        Command::TrainCodec { data: d } => train_codec_cmd(&cfg, &layout, &data(d)),
        Command::TrainMatm { data: d } => train_matm(&cfg, &layout, &data(d)),
        Command::Finetune { phase, data: d } => finetune_cmd(&cfg, &layout, *phase, &data(d)),
        Command::Translate { input, source, output, no_adapters } => {
            translate_cmd(&cfg, &layout, input, source, output.as_deref(), *no_adapters)
        }
        Command::EvalFad { sets, .. } => eval_fad(&cfg, &layout, sets),
        Command::Calibrate { data: d } => calibrate(&cfg, &layout, &data(d)),
        Command::EvalRecon { data: d, .. } => eval_recon(&cfg, &layout, &data(d)),
        Command::EvalProbe { data: d, .. } => eval_probe(&cfg, &layout, &data(d)),
        Command::Kappa { ratings } => kappa(&layout, ratings),
    }
}

fn adopt_codec_geometry(cfg: &mut RunConfig, layout: &Layout) -> Res {
    let codec = load_codec(layout)?;
    cfg.matm.codebooks = codec.num_codebooks();
    cfg.matm.vocab = codec.vocab();
    Ok(())
}

fn load_codec(layout: &Layout) -> Res<Codec> {
    let dir = layout.codec();
    if !dir.join("manifest.json").exists() {
        return Err(CliError::config(format!("no codec at {}; run train-codec first", dir.display())));
    }
    Ok(Codec::load(dir)?)
}

fn load_base(layout: &Layout) -> Res<MatmWeights> {
    let dir = layout.matm();
    if !dir.join("manifest.json").exists() {
        return Err(CliError::config(format!("no token model at {}; run train-matm first", dir.display())));
    }
    Ok(MatmWeights::load(dir)?)
}

/// Base weights with the domain adapter merged in (when present) and the
/// species adapter (when present) applied on top.
fn load_model(layout: &Layout, adapters: bool) -> Res<(MatmWeights, Option<LoraAdapter>)> {
    let base = load_base(layout)?;
    if !adapters || !layout.adapter(Phase::Domain).join("manifest.json").exists() {
        return Ok((base, None));
    }
    let domain = LoraAdapter::load_for(layout.adapter(Phase::Domain), &base)?;
    let merged = merge_lora(&base, &domain)?;
    let species_dir = layout.adapter(Phase::Species);
    let species = if species_dir.join("manifest.json").exists() { Some(LoraAdapter::load_for(species_dir, &merged)?) } else { None };
    Ok((merged, species))
}

/// Resample to the codec rate and scale to unit variance.
fn prepare(w: &Waveform, sample_rate: u32) -> Res<Waveform> {
    Ok(normalize(&resample(w, sample_rate)?)?)
}

fn training_split(path: &Path) -> Res<Vec<Clip>> {
    let split = path.join("manifest.json").exists().then_some(Split::Train);
    load_set(path, split)
}

fn tokenize_set(codec: &Codec, path: &Path) -> Res<Vec<TokenGrid>> {
    training_split(path)?
        .iter()
        .map(|c| Ok(codec.tokenize(&prepare(&c.waveform, codec.sample_rate())?)?))
        .collect()
}

fn write_rows(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Res {
    if let Some(p) = path.parent() {
        std::fs::create_dir_all(p)?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::data(e.to_string()))?;
    w.write_record(header).map_err(|e| CliError::data(e.to_string()))?;
    for r in rows {
        w.write_record(&r).map_err(|e| CliError::data(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

fn write_train_log(path: &Path, report: &TrainReport) -> Res {
    let rows = report
        .losses
        .iter()
        .zip(&report.accuracies)
        .enumerate()
        .map(|(i, (l, a))| vec![i.to_string(), l.to_string(), a.to_string()]);
    write_rows(path, &["iteration", "loss", "accuracy"], rows)
}

fn tail_mean(v: &[f64]) -> f64 {
    let n = v.len().min(50).max(1);
    v[v.len().saturating_sub(n)..].iter().sum::<f64>() / n as f64
}

fn synth(cfg: &RunConfig, layout: &Layout) -> Res {
    let m = build_corpus(&cfg.corpus, layout.corpus())?;
    println!("wrote {} clips to {}", m.entries.len(), layout.corpus().display());
    Ok(())
}

fn train_codec_cmd(cfg: &RunConfig, layout: &Layout, data: &Path) -> Res {
    let clips = training_split(data)?;
    let waves = clips.iter().map(|c| prepare(&c.waveform, cfg.codec.sample_rate)).collect::<Res<Vec<_>>>()?;
    let (codec, report) = train_codec(&waves, &cfg.codec)?;
    codec.save(layout.codec())?;
    let rows = report
        .stage_curves
        .iter()
        .enumerate()
        .flat_map(|(k, curve)| curve.iter().enumerate().map(move |(e, v)| vec![k.to_string(), e.to_string(), v.to_string()]));
    write_rows(&layout.logs().join("train-codec.csv"), &["codebook", "epoch", "mean_sq_error"], rows)?;
    println!(
        "codec: {} codebooks x {} codes, hop {} ({} training frames)",
        codec.num_codebooks(),
        codec.vocab(),
        codec.hop(),
        report.frames
    );
    Ok(())
}

fn train_matm(cfg: &RunConfig, layout: &Layout, data: &Path) -> Res {
    let codec = load_codec(layout)?;
    let grids = tokenize_set(&codec, data)?;
    let mut w = MatmWeights::init(&cfg.matm, derive_named(cfg.seed, "matm-init"))?;
    let report = train(&mut w, &grids, &cfg.train)?;
    w.save(layout.matm())?;
    write_train_log(&layout.logs().join("train-matm.csv"), &report)?;
    println!(
        "token model: {} parameters, final loss {:.4}, masked accuracy {:.3}",
        w.num_params(),
        tail_mean(&report.losses),
        tail_mean(&report.accuracies)
    );
    Ok(())
}

fn finetune_cmd(cfg: &RunConfig, layout: &Layout, phase: Phase, data: &Path) -> Res {
    let codec = load_codec(layout)?;
    let grids = tokenize_set(&codec, data)?;
    let base = load_base(layout)?;
    let base = match phase {
        Phase::Domain => base,
        Phase::Species => {
            let dir = layout.adapter(Phase::Domain);
            if !dir.join("manifest.json").exists() {
                return Err(CliError::config("species finetuning needs a domain adapter; run --phase domain first"));
            }
            merge_lora(&base, &LoraAdapter::load_for(dir, &base)?)?
        }
    };
    let mut tc = cfg.finetune.clone();
    tc.seed = derive_named(tc.seed, phase.name());
    let (adapter, report) = finetune(&base, &grids, &cfg.lora, &tc)?;
    adapter.save(layout.adapter(phase))?;
    write_train_log(&layout.logs().join(format!("finetune-{}.csv", phase.name())), &report)?;
    println!("{} adapter: final loss {:.4}", phase.name(), tail_mean(&report.losses));
    Ok(())
}

fn translate_cmd(cfg: &RunConfig, layout: &Layout, input: &Path, source: &str, output: Option<&Path>, no_adapters: bool) -> Res {
    let settings = cfg.prompt(source)?;
    let codec = load_codec(layout)?;
    let (weights, adapter) = load_model(layout, !no_adapters)?;
    let model = Model { weights: &weights, adapter: adapter.as_ref() };
    let clips = load_set(input, None)?;
    let seed = derive_named(cfg.seed, "translate");
    let single = input.is_file();
    let out_root = output.map(Path::to_path_buf).unwrap_or_else(|| {
        let dir = layout.root.join("translated").join(source);
        if single {
            dir.join(input.file_name().unwrap_or_default())
        } else {
            dir
        }
    });
    println!(
        "source {source}: periodic_prompt={} onset_mask_width={} steps={} typical_mass={} sample_cutoff={}",
        settings.periodic_prompt, settings.onset_mask_width, settings.steps, settings.typical_mass, settings.sample_cutoff
    );
    for (i, c) in clips.iter().enumerate() {
        let s = settings.clone().with_seed(derive(seed, &[i as u64]));
        let out = translate(&codec, &model, &c.waveform, &s)?;
        let path = if single { out_root.clone() } else { out_root.join(&c.name) };
        write_wav(&path, &out)?;
    }
    println!("translated {} file(s) to {}", clips.len(), out_root.display());
    Ok(())
}

fn embedding_by_name(name: &str, layout: &Layout) -> Res<Box<dyn EmbeddingModel>> {
    if !BUILTIN_NAMES.contains(&name) {
        return Err(CliError::config(format!("unknown embedding {name:?}; expected one of {BUILTIN_NAMES:?}")));
    }
    let codec = match name {
        "matm-pooled" | "tokenizer" => Some(Arc::new(load_codec(layout)?)),
        _ => None,
    };
    let model = if name == "matm-pooled" {
        let (w, a) = load_model(layout, true)?;
        Some((Arc::new(w), a.map(Arc::new)))
    } else {
        None
    };
    Ok(builtin_embedding(name, codec.as_ref(), model.as_ref().map(|(w, a)| (w, a.as_ref())))?)
}

fn eval_fad(cfg: &RunConfig, layout: &Layout, sets: &[String]) -> Res {
    if sets.len() < 2 {
        return Err(CliError::config("eval-fad needs at least two --set values"));
    }
    let mut named = Vec::new();
    for s in sets {
        let (name, dir) = match s.split_once('=') {
            Some((n, d)) => (n.to_string(), PathBuf::from(d)),
            None => {
                let p = PathBuf::from(s);
                (p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| s.clone()), p)
            }
        };
        if named.iter().any(|(n, _): &(String, PathBuf)| *n == name) {
            return Err(CliError::config(format!("duplicate set name {name:?}; use NAME=DIR")));
        }
        named.push((name, dir));
    }
    let model = embedding_by_name(&cfg.fad.embedding, layout)?;
    let mut embedded = Vec::new();
    for (name, dir) in &named {
        let waves: Vec<Waveform> = load_set(dir, None)?.into_iter().map(|c| c.waveform).collect();
        embedded.push((name.clone(), embed_all(model.as_ref(), &waves)?));
    }
    let report = FadReport::pairwise(model.name(), &embedded, cfg.fad.covariance)?;
    let stem = layout.reports().join(format!("fad_{}", model.name()));
    std::fs::create_dir_all(layout.reports())?;
    report.write_csv(stem.with_extension("csv"))?;
    report.write_json(stem.with_extension("json"))?;
    for e in &report.entries {
        println!("{} vs {}: raw {:.6} normalized {:.4}", e.set_a, e.set_b, e.raw, e.normalized);
    }
    Ok(())
}

fn calibrate(cfg: &RunConfig, layout: &Layout, data: &Path) -> Res {
    let c = &cfg.calibration;
    let clips: Vec<Clip> = load_set(data, None)?
        .into_iter()
        .filter(|c| c.labels.get("detection").is_none_or(|d| d == "coda"))
        .collect();
    let spans = load_click_spans(data)?;
    let mut codas = Vec::new();
    let mut denoised = Vec::new();
    for clip in &clips {
        let excl: Vec<(usize, usize)> = match spans.as_ref().and_then(|s| s.get(&clip.name)) {
            Some(s) => s.clone(),
            None => {
                let onsets = OnsetParams::default().detect(&normalize(&clip.waveform)?)?;
                onsets.into_iter().map(|o| (o.saturating_sub(c.window), o + c.window)).collect()
            }
        };
        let profile = estimate_noise_profile(&clip.waveform, &excl, c.window, c.hop)?;
        denoised.push(spectral_subtract(&clip.waveform, &profile, c.floor)?);
        codas.push(clip.waveform.clone());
    }
    let names: Vec<String> = if c.embeddings.is_empty() {
        let have_codec = layout.codec().join("manifest.json").exists();
        let have_matm = layout.matm().join("manifest.json").exists();
        BUILTIN_NAMES
            .iter()
            .filter(|n| match **n {
                "matm-pooled" => have_codec && have_matm,
                "tokenizer" => have_codec,
                _ => true,
            })
            .map(|n| n.to_string())
            .collect()
    } else {
        c.embeddings.clone()
    };
    let models = names.iter().map(|n| embedding_by_name(n, layout)).collect::<Res<Vec<_>>>()?;
    let rows = calibrate_embeddings(&codas, &denoised, &models, c.covariance)?;
    std::fs::create_dir_all(layout.reports())?;
    write_calibration_csv(&rows, layout.reports().join("calibration.csv"))?;
    for r in &rows {
        println!("{}: d1 {:.6} d2 {:.6} ratio {:.4}", r.model, r.d1, r.d2, r.ratio);
    }
    Ok(())
}

fn eval_recon(cfg: &RunConfig, layout: &Layout, data: &Path) -> Res {
    let clips = load_set(data, None)?;
    let codec = if cfg.recon.reconstructor == "codec" { Some(load_codec(layout)?) } else { None };
    let rec: &dyn Reconstructor = match (cfg.recon.reconstructor.as_str(), &codec) {
        ("codec", Some(c)) => c,
        ("identity", _) => &IdentityStub,
        ("zero", _) => &ZeroStub,
        (other, _) => return Err(CliError::config(format!("unknown reconstructor {other:?}; expected codec, identity or zero"))),
    };
    let rate = codec.as_ref().map(Codec::sample_rate);
    let waves = clips
        .iter()
        .map(|c| match rate {
            Some(sr) => prepare(&c.waveform, sr),
            None => Ok(c.waveform.clone()),
        })
        .collect::<Res<Vec<_>>>()?;
    std::fs::create_dir_all(layout.reports())?;
    for &ms in &cfg.recon.chunk_ms {
        let study = recon_error_study(rec, &waves, ms)?;
        let path = layout.reports().join(format!("recon_{}_{ms}ms.csv", cfg.recon.reconstructor));
        study.write_csv(&path)?;
        let (sum, n) = study.errors.iter().zip(&study.counts).filter(|(_, &c)| c > 0).fold((0.0, 0), |(s, n), (e, _)| (s + e, n + 1));
        println!("chunk {ms} ms ({} samples): mean error {:.4} over {n} bins -> {}", study.chunk_len, sum / n.max(1) as f64, path.display());
    }
    Ok(())
}

fn probe_embedding(variant: &str, cfg: &RunConfig, layout: &Layout) -> Res<Box<dyn EmbeddingModel>> {
    let matm = |weights: MatmWeights, adapter: Option<LoraAdapter>| -> Res<Box<dyn EmbeddingModel>> {
        let codec = Arc::new(load_codec(layout)?);
        Ok(Box::new(MatmPooled::new(codec, Arc::new(weights), adapter.map(Arc::new), None)?))
    };
    match variant {
        "full" => {
            let (w, a) = load_model(layout, true)?;
            matm(w, a)
        }
        "no-finetune" => matm(load_base(layout)?, None),
        "base" => {
            let codec = load_codec(layout)?;
            let mut mc = cfg.matm.clone();
            mc.codebooks = codec.num_codebooks();
            mc.vocab = codec.vocab();
            matm(MatmWeights::init(&mc, derive_named(cfg.seed, "probe-random-init"))?, None)
        }
        other => embedding_by_name(other, layout),
    }
}

#[derive(Serialize)]
struct ProbeRow {
    variant: String,
    mean: f64,
    stderr: f64,
    majority: f64,
    accuracies: Vec<f64>,
}

fn eval_probe(cfg: &RunConfig, layout: &Layout, data: &Path) -> Res {
    let task = &cfg.probe.task;
    let clips: Vec<Clip> = load_set(data, None)?
        .into_iter()
        .filter(|c| c.labels.get(task).is_some_and(|l| l != NO_LABEL))
        .collect();
    if clips.is_empty() {
        return Err(CliError::data(format!("no clips carry a {task:?} label")));
    }
    let labels: Vec<&str> = clips.iter().map(|c| c.labels[task].as_str()).collect();
    let (y, classes) = encode_labels(&labels);
    let waves: Vec<Waveform> = clips.into_iter().map(|c| c.waveform).collect();
    let mut rows = Vec::new();
    for v in &cfg.probe.variants {
        let model = probe_embedding(v, cfg, layout)?;
        let x = embed_all(model.as_ref(), &waves)?;
        let r = train_probe(&x, &y, &cfg.probe.classifier)?;
        println!("{task} / {v}: {:.4} +- {:.4} (majority {:.4})", r.mean, r.stderr, r.majority);
        rows.push(ProbeRow { variant: v.clone(), mean: r.mean, stderr: r.stderr, majority: r.majority, accuracies: r.accuracies });
    }
    let n_seeds = cfg.probe.classifier.seeds.len();
    let mut header = vec!["variant".to_string(), "mean".into(), "stderr".into(), "majority".into()];
    header.extend((0..n_seeds).map(|i| format!("seed{i}")));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let csv_rows = rows.iter().map(|r| {
        let mut v = vec![r.variant.clone(), r.mean.to_string(), r.stderr.to_string(), r.majority.to_string()];
        v.extend(r.accuracies.iter().map(|a| a.to_string()));
        v
    });
    write_rows(&layout.reports().join(format!("probe_{task}.csv")), &header, csv_rows)?;
    let summary: BTreeMap<&str, serde_json::Value> = BTreeMap::from([
        ("task", serde_json::json!(task)),
        ("classes", serde_json::json!(classes)),
        ("results", serde_json::to_value(&rows).map_err(codavamp_core::Error::from)?),
    ]);
    write_json(&layout.reports().join(format!("probe_{task}.json")), &summary)
}

fn kappa(layout: &Layout, ratings: &Path) -> Res {
    let r = RatingsMatrix::from_csv(ratings)?;
    let k = fleiss_kappa(&r);
    println!("kappa {k:.6}");
    let summary = serde_json::json!({
        "kappa": k,
        "items": r.counts().len(),
        "categories": r.counts()[0].len(),
        "raters": r.raters(),
    });
    write_json(&layout.reports().join("kappa.json"), &summary)
}
