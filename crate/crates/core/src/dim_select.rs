//! Task-specific reduction of SSL embedding dimensions.
//!
//! Each parallel (speech, singing) pair is averaged over time and compared
//! per dimension. Dimensions whose median gap across the corpus sits at
//! least one standard deviation above the mean median gap are kept.

use crate::error::{Error, Result};
use crate::io_formats::{Matrix, SelectionMask};

pub const DEFAULT_Z_THRESHOLD: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct PairDiff {
    pub speaker_id: String,
    pub diff: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionReport {
    pub medians: Vec<f64>,
    pub zscores: Vec<f64>,
    pub mask: SelectionMask,
    pub reduction_ratio: f64,
}

impl SelectionReport {
    /// TSV with columns `dim, median, zscore, selected`.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("dim\tmedian\tzscore\tselected\n");
        let mut selected = self.mask.indices().iter().peekable();
        for (d, (m, z)) in self.medians.iter().zip(&self.zscores).enumerate() {
            let on = selected.next_if(|&&i| i == d).is_some();
            out.push_str(&format!("{d}\t{m:.9e}\t{z:.9e}\t{}\n", on as u8));
        }
        out
    }
}

pub fn time_average(emb: &Matrix) -> Result<Vec<f64>> {
    if emb.rows() == 0 {
        return Err(Error::EmptySequence);
    }
    let mut acc = vec![0.0f64; emb.cols()];
    for t in 0..emb.rows() {
        for (a, &x) in acc.iter_mut().zip(emb.row(t)) {
            *a += x as f64;
        }
    }
    let n = emb.rows() as f64;
    Ok(acc.into_iter().map(|a| a / n).collect())
}

pub fn pair_diff(speech_avg: &[f64], singing_avg: &[f64]) -> Result<Vec<f64>> {
    if speech_avg.len() != singing_avg.len() {
        return Err(Error::DimMismatch {
            expected: speech_avg.len(),
            found: singing_avg.len(),
        });
    }
    Ok(speech_avg
        .iter()
        .zip(singing_avg)
        .map(|(a, b)| (a - b).abs())
        .collect())
}

/// Median with the mean-of-central-pair convention for even counts.
pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

pub fn select_dims(diffs: &[PairDiff]) -> Result<SelectionReport> {
    select_dims_with_threshold(diffs, DEFAULT_Z_THRESHOLD)
}

pub fn select_dims_with_threshold(diffs: &[PairDiff], threshold: f64) -> Result<SelectionReport> {
    let first = diffs.first().ok_or(Error::EmptySequence)?;
    let dim = first.diff.len();
    if let Some(bad) = diffs.iter().find(|p| p.diff.len() != dim) {
        return Err(Error::DimMismatch {
            expected: dim,
            found: bad.diff.len(),
        });
    }
    let mut column = vec![0.0; diffs.len()];
    let medians: Vec<f64> = (0..dim)
        .map(|d| {
            for (c, p) in column.iter_mut().zip(diffs) {
                *c = p.diff[d];
            }
            median(&mut column)
        })
        .collect();

    // summing in sorted order keeps the statistics independent of dimension order
    let mut sorted = medians.clone();
    sorted.sort_by(f64::total_cmp);
    let n = dim as f64;
    let mean = sorted.iter().sum::<f64>() / n;
    let var = sorted.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std == 0.0 || !std.is_finite() {
        return Err(Error::ZeroVariance);
    }
    let zscores: Vec<f64> = medians.iter().map(|m| (m - mean) / std).collect();
    let indices = zscores
        .iter()
        .enumerate()
        .filter(|(_, &z)| z >= threshold)
        .map(|(d, _)| d)
        .collect();
    let mask = SelectionMask::new(dim, indices)?;
    let reduction_ratio = 1.0 - mask.len() as f64 / n;
    Ok(SelectionReport {
        medians,
        zscores,
        mask,
        reduction_ratio,
    })
}

pub fn apply_mask(emb: &Matrix, mask: &SelectionMask) -> Result<Matrix> {
    if let Some(&bad) = mask.indices().iter().find(|&&i| i >= emb.cols()) {
        return Err(Error::IndexOutOfRange {
            index: bad,
            dim: emb.cols(),
        });
    }
    let mut data = Vec::with_capacity(emb.rows() * mask.len());
    for t in 0..emb.rows() {
        let row = emb.row(t);
        data.extend(mask.indices().iter().map(|&i| row[i]));
    }
    Matrix::new(emb.rows(), mask.len(), data)
}

/// Runs the full rule over (speaker, speech embedding, singing embedding) triples.
pub fn select_from_pairs<'a, I>(pairs: I, threshold: f64) -> Result<SelectionReport>
where
    I: IntoIterator<Item = (&'a str, &'a Matrix, &'a Matrix)>,
{
    let diffs = pairs
        .into_iter()
        .map(|(spk, speech, singing)| {
            Ok(PairDiff {
                speaker_id: spk.to_string(),
                diff: pair_diff(&time_average(speech)?, &time_average(singing)?)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    select_dims_with_threshold(&diffs, threshold)
}
