use std::path::Path;

use super::fad::csv_err;
use crate::error::{Error, Result};

/// Items x categories; entry (i, j) is the number of raters who put item i
/// in category j. Every row sums to the same rater count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RatingsMatrix {
    counts: Vec<Vec<u32>>,
    raters: u32,
}

impl RatingsMatrix {
    pub fn new(counts: Vec<Vec<u32>>) -> Result<Self> {
        let first = counts.first().ok_or_else(|| Error::InsufficientData("no rated items".into()))?;
        let k = first.len();
        if k == 0 || counts.iter().any(|r| r.len() != k) {
            return Err(Error::Shape("every item needs the same number of categories".into()));
        }
        let raters: u32 = first.iter().sum();
        if raters < 2 {
            return Err(Error::InvalidArgument("each item needs at least two ratings".into()));
        }
        if let Some(i) = counts.iter().position(|r| r.iter().sum::<u32>() != raters) {
            return Err(Error::InvalidArgument(format!("item {i} has a different number of ratings than item 0")));
        }
        Ok(Self { counts, raters })
    }

    pub fn counts(&self) -> &[Vec<u32>] {
        &self.counts
    }

    pub fn raters(&self) -> u32 {
        self.raters
    }

    /// CSV of non-negative integer counts, one item per row. A non-numeric
    /// first row is treated as a header.
    pub fn from_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingFile(path.display().to_string()));
        }
        let mut rdr = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_path(path).map_err(csv_err)?;
        let mut counts = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(csv_err)?;
            let parsed: std::result::Result<Vec<u32>, _> = rec.iter().map(str::parse::<u32>).collect();
            match parsed {
                Ok(row) => counts.push(row),
                Err(_) if i == 0 => continue,
                Err(e) => return Err(Error::InvalidArgument(format!("row {i}: {e}"))),
            }
        }
        Self::new(counts)
    }
}

/// Fleiss's kappa. When every rating falls in one category the chance
/// agreement is 1 and kappa is defined as 1.
pub fn fleiss_kappa(r: &RatingsMatrix) -> f64 {
    let n = r.raters as f64;
    let items = r.counts.len() as f64;
    let k = r.counts[0].len();
    let mut p_j = vec![0.0; k];
    let mut p_bar = 0.0;
    for row in &r.counts {
        let mut sq = 0.0;
        for (j, &c) in row.iter().enumerate() {
            p_j[j] += c as f64;
            sq += (c as f64) * (c as f64);
        }
        p_bar += (sq - n) / (n * (n - 1.0));
    }
    p_bar /= items;
    let p_e: f64 = p_j.iter().map(|s| (s / (items * n)).powi(2)).sum();
    if p_e >= 1.0 {
        return 1.0;
    }
    (p_bar - p_e) / (1.0 - p_e)
}
