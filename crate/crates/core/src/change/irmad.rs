//! Iteratively reweighted MAD: repeated weighted CCA where each pixel's
//! weight is its no-change probability under the previous fit.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::cca::{check_pair, weighted_cca, BandMatrix, MadStep};
use super::chi2::chi2_survival;
use crate::error::Result;
use crate::raster::{BandSpec, RasterStack};

/// Lower clamp on MAD variances.
pub const SIGMA2_FLOOR: f64 = 1e-12;

/// Components with `1 - rho` at or below this are numerically identical
/// images; their MAD variates are pure round-off and are left out of Z.
pub const DEGENERATE_GAP: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct ChiSquare {
    /// Per-pixel statistic; NaN where either image is nodata.
    pub z: Vec<f64>,
    pub degenerate_components: usize,
}

/// Z = Σ M_i² / σ²_i for every pixel valid in both images.
pub fn chi_square(x: &BandMatrix, y: &BandMatrix, step: &MadStep) -> Result<ChiSquare> {
    check_pair(x, y)?;
    let n = step.n_bands();
    let active: Vec<bool> = step.rho.iter().map(|r| 1.0 - r > DEGENERATE_GAP).collect();
    let degenerate = active.iter().filter(|a| !**a).count();
    if degenerate > 0 {
        log::warn!(
            "{degenerate} of {n} canonical components have correlation ~1 (identical images?); \
             they contribute nothing to the change statistic"
        );
    }
    let sigma2: Vec<f64> = step.sigma2_mad.iter().map(|s| s.max(SIGMA2_FLOOR)).collect();
    let z = (0..x.n_pixels())
        .into_par_iter()
        .map(|p| {
            if !(x.is_valid(p) && y.is_valid(p)) {
                return f64::NAN;
            }
            step.mad_variates(x.pixel(p), y.pixel(p))
                .iter()
                .zip(&sigma2)
                .zip(&active)
                .filter(|(_, on)| **on)
                .map(|((m, s), _)| m * m / s)
                .sum()
        })
        .collect();
    Ok(ChiSquare {
        z,
        degenerate_components: degenerate,
    })
}

/// Single-band raster of the chi-square statistic over the geometry of `template`.
pub fn chi_square_image(x: &RasterStack, y: &RasterStack, step: &MadStep) -> Result<RasterStack> {
    let bx = BandMatrix::from_stack(x);
    let by = BandMatrix::from_stack(y);
    let cs = chi_square(&bx, &by, step)?;
    z_to_raster(&cs.z, x)
}

pub(crate) fn z_to_raster(z: &[f64], template: &RasterStack) -> Result<RasterStack> {
    RasterStack::new(
        template.width(),
        template.height(),
        vec![BandSpec::named("chi2")],
        z.iter().map(|&v| v as f32).collect(),
        *template.transform(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IrmadOptions {
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for IrmadOptions {
    fn default() -> Self {
        IrmadOptions {
            max_iter: 50,
            tol: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IrmadResult {
    pub final_step: MadStep,
    /// Chi-square statistic of the final step; NaN at nodata.
    pub z: Vec<f64>,
    pub iterations: usize,
    /// Canonical correlations (descending) after each iteration.
    pub rho_history: Vec<Vec<f64>>,
    pub converged: bool,
    pub df: u32,
    pub degenerate: bool,
}

impl IrmadResult {
    pub fn z_raster(&self, template: &RasterStack) -> Result<RasterStack> {
        z_to_raster(&self.z, template)
    }
}

/// Runs IRMAD from unit weights. Iteration stops once the largest change in
/// any canonical correlation drops below `tol` (the first iteration is
/// compared against all-zero correlations) or after `max_iter` passes.
pub fn irmad(x: &BandMatrix, y: &BandMatrix, opts: IrmadOptions) -> Result<IrmadResult> {
    check_pair(x, y)?;
    let df = x.n_bands() as u32;
    let max_iter = opts.max_iter.max(1);
    let mut weights = vec![1.0; x.n_pixels()];
    let mut prev = vec![0.0; x.n_bands()];
    let mut history = Vec::new();
    let mut converged = false;
    let mut last: Option<(MadStep, ChiSquare)> = None;
    for _ in 0..max_iter {
        let step = weighted_cca(x, y, &weights)?;
        let cs = chi_square(x, y, &step)?;
        let delta = step
            .rho
            .iter()
            .zip(&prev)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        prev.clone_from(&step.rho);
        history.push(step.rho.clone());
        weights = cs
            .z
            .iter()
            .map(|&z| {
                if z.is_nan() {
                    0.0
                } else {
                    chi2_survival(z, df).expect("z is non-negative")
                }
            })
            .collect();
        last = Some((step, cs));
        if delta < opts.tol {
            converged = true;
            break;
        }
    }
    let (final_step, cs) = last.expect("at least one iteration runs");
    Ok(IrmadResult {
        iterations: history.len(),
        rho_history: history,
        converged,
        df,
        degenerate: cs.degenerate_components > 0,
        z: cs.z,
        final_step,
    })
}

/// IRMAD over two rasters; fails with both shapes named when they differ.
pub fn irmad_stacks(x: &RasterStack, y: &RasterStack, opts: IrmadOptions) -> Result<IrmadResult> {
    if x.width() != y.width() || x.height() != y.height() || x.n_bands() != y.n_bands() {
        return Err(crate::Error::ShapeMismatch {
            left: x.shape_string(),
            right: y.shape_string(),
        });
    }
    irmad(&BandMatrix::from_stack(x), &BandMatrix::from_stack(y), opts)
}
