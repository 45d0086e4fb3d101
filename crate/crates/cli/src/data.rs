use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use codavamp_core::audio::{load_wav, save_wav, SampleFormat, Waveform};
use codavamp_core::synth::{DatasetManifest, Split};
use serde::Deserialize;

use crate::CliError;

/// One audio file of an input set.
#[derive(Debug, Clone)]
pub struct Clip {
    /// Path relative to the set root, `/`-separated.
    pub name: String,
    pub labels: BTreeMap<String, String>,
    pub waveform: Waveform,
}

fn collect_wavs(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    for e in std::fs::read_dir(dir)? {
        let p = e?.path();
        if p.is_dir() {
            collect_wavs(root, &p, out)?;
        } else if p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")) {
            out.push(p);
        }
    }
    Ok(())
}

/// Load a single WAV, a corpus directory with `manifest.json` (optionally
/// one split only), or every WAV below a directory in sorted order.
pub fn load_set(path: &Path, split: Option<Split>) -> Result<Vec<Clip>, CliError> {
    if !path.exists() {
        return Err(CliError::data(format!("input {} does not exist", path.display())));
    }
    if path.is_file() {
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        return Ok(vec![Clip { name, labels: BTreeMap::new(), waveform: load_wav(path)? }]);
    }
    let manifest = path.join("manifest.json");
    let clips: Vec<Clip> = if manifest.exists() {
        let m = DatasetManifest::load(&manifest)?;
        m.entries
            .into_iter()
            .filter(|e| split.is_none_or(|s| e.split == s))
            .map(|e| Ok(Clip { waveform: load_wav(path.join(&e.path))?, name: e.path, labels: e.labels }))
            .collect::<Result<_, CliError>>()?
    } else {
        let mut files = Vec::new();
        collect_wavs(path, path, &mut files)?;
        let mut named: Vec<(String, PathBuf)> = files
            .into_iter()
            .map(|p| {
                let rel = p.strip_prefix(path).unwrap_or(&p);
                (rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/"), p)
            })
            .collect();
        named.sort();
        named
            .into_iter()
            .map(|(name, p)| Ok(Clip { name, labels: BTreeMap::new(), waveform: load_wav(p)? }))
            .collect::<Result<_, CliError>>()?
    };
    if clips.is_empty() {
        return Err(CliError::data(format!("no audio found in {}", path.display())));
    }
    Ok(clips)
}

#[derive(Deserialize)]
struct Annotation {
    path: String,
    onsets: Vec<usize>,
    click_len: usize,
}

/// Click spans `(start, end)` per clip from a corpus `annotations.json`.
pub fn load_click_spans(dir: &Path) -> Result<Option<BTreeMap<String, Vec<(usize, usize)>>>, CliError> {
    let p = dir.join("annotations.json");
    if !p.exists() {
        return Ok(None);
    }
    let ann: Vec<Annotation> = serde_json::from_slice(&std::fs::read(&p)?).map_err(|e| CliError::data(format!("{}: {e}", p.display())))?;
    Ok(Some(
        ann.into_iter()
            .map(|a| (a.path, a.onsets.iter().map(|&o| (o, o + a.click_len)).collect()))
            .collect(),
    ))
}

pub fn write_wav(path: &Path, w: &Waveform) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    save_wav(path, w, SampleFormat::Float32)?;
    Ok(())
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut bytes = serde_json::to_vec_pretty(value).map_err(codavamp_core::Error::from)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes)?;
    Ok(())
}
