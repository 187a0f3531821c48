//! Turning the chi-square statistic into a binary change mask.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{read_change_mask, ChangeMask, GeoTransform, MaskFlag, MaskProvenance, RasterStack};

/// Linear-interpolation quantile of sorted finite values (`p` in percent).
pub fn percentile_of_sorted(sorted: &[f64], p: f64) -> f64 {
    let pos = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

fn check_z_raster(z: &RasterStack) -> Result<()> {
    if z.n_bands() != 1 {
        return Err(Error::InvalidArgument(format!(
            "change statistic raster must have one band, has {}",
            z.n_bands()
        )));
    }
    Ok(())
}

/// Marks pixels whose statistic exceeds `threshold` as changed.
pub fn apply_threshold(
    z: &[f64],
    width: usize,
    height: usize,
    transform: GeoTransform,
    threshold: f64,
    provenance: MaskProvenance,
) -> Result<ChangeMask> {
    let flags = z
        .iter()
        .map(|&v| {
            if v.is_nan() {
                MaskFlag::Nodata
            } else if v > threshold {
                MaskFlag::Changed
            } else {
                MaskFlag::Stable
            }
        })
        .collect();
    ChangeMask::new(width, height, transform, flags, provenance, Some(threshold))
}

/// Threshold at the given empirical percentile of valid pixels; strictly
/// greater values are changed.
pub fn threshold_percentile(z: &RasterStack, percentile: f64) -> Result<ChangeMask> {
    check_z_raster(z)?;
    if !(percentile > 0.0 && percentile < 100.0) {
        return Err(Error::InvalidArgument(format!(
            "percentile must lie in (0, 100), got {percentile}"
        )));
    }
    let values: Vec<f64> = z.band(0).iter().map(|&v| v as f64).collect();
    let mut sorted: Vec<f64> = values.iter().copied().filter(|v| !v.is_nan()).collect();
    if sorted.is_empty() {
        return Err(Error::NoValidPixels);
    }
    sorted.sort_by(f64::total_cmp);
    let t = percentile_of_sorted(&sorted, percentile);
    apply_threshold(
        &values,
        z.width(),
        z.height(),
        *z.transform(),
        t,
        MaskProvenance::IrmadPercentile,
    )
}

/// Fixed-value threshold over a statistic raster.
pub fn threshold_value(z: &RasterStack, threshold: f64, provenance: MaskProvenance) -> Result<ChangeMask> {
    check_z_raster(z)?;
    let values: Vec<f64> = z.band(0).iter().map(|&v| v as f64).collect();
    apply_threshold(&values, z.width(), z.height(), *z.transform(), threshold, provenance)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrOperatingPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Sweeps every distinct statistic value as a threshold (changed iff
/// `z > θ`) and keeps the one with the best change-class F1; ties go to the
/// larger threshold.
pub fn threshold_pr_optimal(z: &[f64], changed: &[bool]) -> Result<PrOperatingPoint> {
    if z.len() != changed.len() {
        return Err(Error::DimensionMismatch {
            expected: z.len(),
            got: changed.len(),
        });
    }
    let mut pairs: Vec<(f64, bool)> = z
        .iter()
        .zip(changed)
        .filter(|(v, _)| !v.is_nan())
        .map(|(&v, &c)| (v, c))
        .collect();
    let positives = pairs.iter().filter(|(_, c)| *c).count();
    if positives == 0 || positives == pairs.len() {
        return Err(Error::DegenerateLabels(format!(
            "need both changed and stable examples, got {positives} changed of {}",
            pairs.len()
        )));
    }
    // Descending by z: after consuming a run of equal values, everything
    // consumed so far is exactly the set with z >= run value, i.e. the set
    // predicted changed by the next smaller candidate threshold.
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut best: Option<PrOperatingPoint> = None;
    let mut consider = |theta: f64, tp: usize, fp: usize| {
        let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
        let recall = tp as f64 / positives as f64;
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        // Candidates arrive in descending θ, so strict improvement keeps the
        // larger threshold on ties.
        if best.is_none_or(|b| f1 > b.f1) {
            best = Some(PrOperatingPoint {
                threshold: theta,
                precision,
                recall,
                f1,
            });
        }
    };
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    // Largest value as threshold predicts nothing changed.
    consider(pairs[0].0, 0, 0);
    while i < pairs.len() {
        let v = pairs[i].0;
        while i < pairs.len() && pairs[i].0 == v {
            if pairs[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        if i < pairs.len() {
            consider(pairs[i].0, tp, fp);
        }
    }
    Ok(best.expect("at least one candidate"))
}

/// Loads an externally produced u8 change mask.
pub fn load_external_mask(path: impl AsRef<Path>) -> Result<ChangeMask> {
    let mut mask = read_change_mask(path)?;
    mask.provenance = MaskProvenance::External;
    Ok(mask)
}
