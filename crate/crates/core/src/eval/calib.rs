use std::path::Path;

use serde::{Deserialize, Serialize};

use super::embed::{embed_all, EmbeddingModel};
use super::fad::{csv_err, fad, CovarianceMode};
use crate::audio::Waveform;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRow {
    pub model: String,
    /// FAD(codas, denoised codas)
    pub d1: f64,
    /// FAD(codas, noise residuals)
    pub d2: f64,
    /// `d2 / d1`; infinite (or NaN for 0/0) when `d1 = 0`.
    pub ratio: f64,
    pub degenerate: bool,
}

/// `(d2 / d1, degenerate)`.
pub fn calibration_ratio(d1: f64, d2: f64) -> (f64, bool) {
    if d1 == 0.0 {
        (if d2 > 0.0 { f64::INFINITY } else { f64::NAN }, true)
    } else {
        (d2 / d1, false)
    }
}

/// Noise residuals `x - x_hat` for parallel clean/denoised lists.
pub fn noise_components(codas: &[Waveform], denoised: &[Waveform]) -> Result<Vec<Waveform>> {
    if codas.len() != denoised.len() {
        return Err(Error::Shape(format!("{} recordings but {} denoised versions", codas.len(), denoised.len())));
    }
    codas
        .iter()
        .zip(denoised)
        .map(|(x, y)| {
            if x.len() != y.len() || x.sample_rate != y.sample_rate {
                return Err(Error::Shape("denoised recording differs in length or rate".into()));
            }
            Waveform::new(x.samples.iter().zip(&y.samples).map(|(a, b)| a - b).collect(), x.sample_rate)
        })
        .collect()
}

/// How strongly each embedding reacts to background noise relative to
/// temporal structure. Rows are ranked by descending ratio.
pub fn calibrate_embeddings(
    codas: &[Waveform],
    denoised: &[Waveform],
    models: &[Box<dyn EmbeddingModel>],
    mode: CovarianceMode,
) -> Result<Vec<CalibrationRow>> {
    let noise = noise_components(codas, denoised)?;
    let mut rows = models
        .iter()
        .map(|m| {
            let x = embed_all(m.as_ref(), codas)?;
            let d1 = fad(&x, &embed_all(m.as_ref(), denoised)?, mode)?;
            let d2 = fad(&x, &embed_all(m.as_ref(), &noise)?, mode)?;
            let (ratio, degenerate) = calibration_ratio(d1, d2);
            Ok(CalibrationRow { model: m.name().to_string(), d1, d2, ratio, degenerate })
        })
        .collect::<Result<Vec<_>>>()?;
    rows.sort_by(|a, b| b.ratio.total_cmp(&a.ratio).then_with(|| a.model.cmp(&b.model)));
    Ok(rows)
}

pub fn write_calibration_csv(rows: &[CalibrationRow], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["model", "d1", "d2", "ratio", "degenerate"]).map_err(csv_err)?;
    for r in rows {
        w.write_record([&r.model, &r.d1.to_string(), &r.d2.to_string(), &r.ratio.to_string(), &r.degenerate.to_string()])
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}
