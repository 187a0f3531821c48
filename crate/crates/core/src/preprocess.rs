//! Spectral preprocessing: brightness normalization, Gaussian band
//! resampling between sensors, band dropping and masked median compositing.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::raster::{BandSpec, RasterStack};

/// Divides a spectrum by its Euclidean norm. Returns `None` for zero-norm or
/// non-finite input.
pub fn l2_normalize_vector(x: &[f64]) -> Option<Vec<f64>> {
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !norm.is_finite() || norm == 0.0 {
        return None;
    }
    Some(x.iter().map(|v| v / norm).collect())
}

#[derive(Debug, Clone)]
pub struct Normalized {
    pub stack: RasterStack,
    /// Pixels that were valid on input but had a zero norm.
    pub zero_norm_count: usize,
}

/// Per-pixel L2 normalization of a stack. Zero-norm pixels become nodata.
pub fn l2_normalize(stack: &RasterStack) -> Normalized {
    let n = stack.n_pixels();
    let nb = stack.n_bands();
    let src = stack.data();
    let mut out = vec![f32::NAN; src.len()];
    let mut mask = stack.nodata_mask().to_vec();
    let mut zero = 0;
    let mut buf = vec![0.0f64; nb];
    for p in 0..n {
        if mask[p] {
            continue;
        }
        for (b, slot) in buf.iter_mut().enumerate() {
            *slot = src[b * n + p] as f64;
        }
        match l2_normalize_vector(&buf) {
            Some(v) => {
                for (b, val) in v.into_iter().enumerate() {
                    out[b * n + p] = val as f32;
                }
            }
            None => {
                mask[p] = true;
                zero += 1;
            }
        }
    }
    if zero > 0 {
        log::warn!("{zero} zero-norm pixel(s) set to nodata during L2 normalization");
    }
    let stack = RasterStack::with_mask(
        stack.width(),
        stack.height(),
        stack.bands().to_vec(),
        out,
        Some(mask),
        *stack.transform(),
    )
    .expect("geometry unchanged");
    Normalized {
        stack,
        zero_norm_count: zero,
    }
}

/// Row-normalized Gaussian response weights mapping source bands onto
/// target bands.
#[derive(Debug, Clone, PartialEq)]
pub struct ResamplingPlan {
    /// One sparse row per target band: `(source index, weight)`.
    rows: Vec<Vec<(usize, f64)>>,
    covered: Vec<bool>,
    n_source: usize,
}

/// `fwhm / (2 sqrt(2 ln 2))`.
pub fn fwhm_to_sigma(fwhm: f64) -> f64 {
    fwhm / (2.0 * (2.0 * std::f64::consts::LN_2).sqrt())
}

const COVERAGE_FLOOR: f64 = 1e-6;

/// Samples each target band's Gaussian response at the source band centers.
/// Sources farther than two FWHM from a target center do not contribute; a
/// target whose raw weights sum to at most 1e-6 is uncovered.
pub fn build_resampling_plan(source: &[BandSpec], target: &[BandSpec]) -> Result<ResamplingPlan> {
    let centers = source
        .iter()
        .map(|b| {
            b.center_nm.ok_or_else(|| {
                Error::InvalidBand(format!("source band {:?} lacks center_nm", b.name))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::with_capacity(target.len());
    let mut covered = Vec::with_capacity(target.len());
    for t in target {
        t.validate()?;
        let (center, fwhm) = match (t.center_nm, t.fwhm_nm) {
            (Some(c), Some(f)) => (c, f),
            _ => {
                return Err(Error::InvalidBand(format!(
                    "target band {:?} needs center_nm and fwhm_nm",
                    t.name
                )))
            }
        };
        let sigma = fwhm_to_sigma(fwhm);
        let mut row: Vec<(usize, f64)> = centers
            .iter()
            .enumerate()
            .filter(|(_, &c)| (c - center).abs() <= 2.0 * fwhm)
            .map(|(i, &c)| (i, (-(c - center).powi(2) / (2.0 * sigma * sigma)).exp()))
            .collect();
        let total: f64 = row.iter().map(|(_, w)| w).sum();
        if total > COVERAGE_FLOOR {
            for (_, w) in row.iter_mut() {
                *w /= total;
            }
            covered.push(true);
        } else {
            row.clear();
            covered.push(false);
        }
        rows.push(row);
    }
    Ok(ResamplingPlan {
        rows,
        covered,
        n_source: source.len(),
    })
}

impl ResamplingPlan {
    pub fn n_source(&self) -> usize {
        self.n_source
    }

    pub fn n_target(&self) -> usize {
        self.rows.len()
    }

    pub fn covered(&self) -> &[bool] {
        &self.covered
    }

    pub fn uncovered_count(&self) -> usize {
        self.covered.iter().filter(|c| !**c).count()
    }

    /// Dense weight `W[target][source]`.
    pub fn weight(&self, target: usize, source: usize) -> f64 {
        self.rows[target]
            .iter()
            .find(|(i, _)| *i == source)
            .map_or(0.0, |(_, w)| *w)
    }

    pub fn row(&self, target: usize) -> &[(usize, f64)] {
        &self.rows[target]
    }
}

/// Resamples one spectrum. Uncovered target bands, and targets with a NaN
/// among their contributing sources, come out NaN.
pub fn apply_resampling(plan: &ResamplingPlan, spectrum: &[f64]) -> Result<Vec<f64>> {
    if spectrum.len() != plan.n_source {
        return Err(Error::DimensionMismatch {
            expected: plan.n_source,
            got: spectrum.len(),
        });
    }
    Ok(plan
        .rows
        .iter()
        .zip(&plan.covered)
        .map(|(row, &cov)| {
            if !cov {
                return f64::NAN;
            }
            row.iter().map(|&(i, w)| w * spectrum[i]).sum()
        })
        .collect())
}

/// Resamples a whole stack onto the covered target bands. Uncovered target
/// bands are omitted from the output stack, since an all-NaN band would mark
/// every pixel nodata.
pub fn resample_stack(
    plan: &ResamplingPlan,
    stack: &RasterStack,
    target: &[BandSpec],
) -> Result<RasterStack> {
    if stack.n_bands() != plan.n_source {
        return Err(Error::DimensionMismatch {
            expected: plan.n_source,
            got: stack.n_bands(),
        });
    }
    if target.len() != plan.n_target() {
        return Err(Error::DimensionMismatch {
            expected: plan.n_target(),
            got: target.len(),
        });
    }
    let n = stack.n_pixels();
    let keep: Vec<usize> = (0..plan.n_target()).filter(|&j| plan.covered[j]).collect();
    if keep.is_empty() {
        return Err(Error::InvalidArgument(
            "no target band overlaps the source bands".into(),
        ));
    }
    let src = stack.data();
    let mut data = Vec::with_capacity(keep.len() * n);
    for &j in &keep {
        for p in 0..n {
            let v: f64 = plan.rows[j]
                .iter()
                .map(|&(i, w)| w * src[i * n + p] as f64)
                .sum();
            data.push(v as f32);
        }
    }
    RasterStack::with_mask(
        stack.width(),
        stack.height(),
        keep.iter().map(|&j| target[j].clone()).collect(),
        data,
        Some(stack.nodata_mask().to_vec()),
        *stack.transform(),
    )
}

/// Per-pixel, per-band median over the stacks' valid values. Even counts
/// take the mean of the two middle values; pixels with no valid value in
/// any stack are nodata.
pub fn masked_median_composite(stacks: &[RasterStack]) -> Result<RasterStack> {
    let first = stacks
        .first()
        .ok_or_else(|| Error::InvalidArgument("composite needs at least one stack".into()))?;
    for s in &stacks[1..] {
        if !s.same_geometry(first) || s.n_bands() != first.n_bands() {
            return Err(Error::ShapeMismatch {
                left: first.shape_string(),
                right: s.shape_string(),
            });
        }
    }
    let n = first.n_pixels();
    let nb = first.n_bands();
    let mut data = vec![f32::NAN; n * nb];
    let mut vals: Vec<f32> = Vec::with_capacity(stacks.len());
    for p in 0..n {
        for b in 0..nb {
            vals.clear();
            vals.extend(
                stacks
                    .iter()
                    .filter(|s| !s.is_nodata(p))
                    .map(|s| s.data()[b * n + p]),
            );
            if vals.is_empty() {
                continue;
            }
            vals.sort_by(f32::total_cmp);
            let m = vals.len();
            data[b * n + p] = if m % 2 == 1 {
                vals[m / 2]
            } else {
                ((vals[m / 2 - 1] as f64 + vals[m / 2] as f64) / 2.0) as f32
            };
        }
    }
    RasterStack::new(
        first.width(),
        first.height(),
        first.bands().to_vec(),
        data,
        *first.transform(),
    )
}

/// Removes the given 0-based band indices, keeping the rest in order.
pub fn drop_bands(stack: &RasterStack, indices: &[usize]) -> Result<RasterStack> {
    let nb = stack.n_bands();
    let drop: BTreeSet<usize> = indices.iter().copied().collect();
    if let Some(&bad) = drop.iter().find(|&&i| i >= nb) {
        return Err(Error::BandIndex {
            index: bad,
            bands: nb,
        });
    }
    if drop.len() == nb {
        return Err(Error::InvalidArgument(
            "dropping every band would leave an empty raster".into(),
        ));
    }
    let keep: Vec<usize> = (0..nb).filter(|b| !drop.contains(b)).collect();
    let mut data = Vec::with_capacity(keep.len() * stack.n_pixels());
    for &b in &keep {
        data.extend_from_slice(stack.band(b));
    }
    RasterStack::with_mask(
        stack.width(),
        stack.height(),
        keep.iter().map(|&b| stack.bands()[b].clone()).collect(),
        data,
        Some(stack.nodata_mask().to_vec()),
        *stack.transform(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::GeoTransform;
    use proptest::prelude::*;

    fn one_pixel(values: &[f32]) -> RasterStack {
        let bands = (0..values.len()).map(|i| BandSpec::named(format!("b{i}"))).collect();
        RasterStack::new(1, 1, bands, values.to_vec(), GeoTransform::identity()).unwrap()
    }

    fn band(center: f64, fwhm: Option<f64>) -> BandSpec {
        BandSpec {
            name: format!("{center}"),
            center_nm: Some(center),
            fwhm_nm: fwhm,
        }
    }

    #[test]
    fn three_four_five() {
        let out = l2_normalize(&one_pixel(&[3.0, 4.0]));
        assert_eq!(out.stack.pixel(0), vec![0.6, 0.8]);
        assert_eq!(out.zero_norm_count, 0);
    }

    #[test]
    fn zero_pixel_becomes_nodata() {
        let out = l2_normalize(&one_pixel(&[0.0, 0.0]));
        assert!(out.stack.is_nodata(0));
        assert_eq!(out.zero_norm_count, 1);
    }

    #[test]
    fn random_ten_band_pixel_has_unit_norm() {
        let v: Vec<f32> = (0..10).map(|i| ((i * 37 % 11) as f32 + 0.5) * 0.013).collect();
        let out = l2_normalize(&one_pixel(&v));
        let norm: f64 = out.stack.pixel(0).iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
    }

    #[test]
    fn symmetric_sources_split_evenly() {
        let plan = build_resampling_plan(
            &[band(500.0, None), band(510.0, None)],
            &[band(505.0, Some(10.0))],
        )
        .unwrap();
        assert!((plan.weight(0, 0) - 0.5).abs() < 1e-12);
        assert!((plan.weight(0, 1) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn distant_target_is_uncovered() {
        let sources: Vec<_> = (0..=62).map(|i| band(380.0 + 10.0 * i as f64, None)).collect();
        let plan = build_resampling_plan(&sources, &[band(2000.0, Some(5.0))]).unwrap();
        assert_eq!(plan.covered(), &[false]);
        assert!(plan.row(0).is_empty());
        assert!(apply_resampling(&plan, &vec![0.2; sources.len()]).unwrap()[0].is_nan());
    }

    #[test]
    fn asymmetric_weights_follow_gaussian() {
        let plan = build_resampling_plan(
            &[band(500.0, None), band(508.0, None)],
            &[band(505.0, Some(10.0))],
        )
        .unwrap();
        let sigma: f64 = 10.0 / 2.3548200450309493;
        let w0 = (-25.0 / (2.0 * sigma * sigma)).exp();
        let w1 = (-9.0 / (2.0 * sigma * sigma)).exp();
        assert!((plan.weight(0, 0) - w0 / (w0 + w1)).abs() < 1e-12);
        assert!((plan.weight(0, 1) - w1 / (w0 + w1)).abs() < 1e-12);
    }

    #[test]
    fn target_missing_fwhm_is_an_error() {
        assert!(build_resampling_plan(&[band(500.0, None)], &[band(505.0, None)]).is_err());
        assert!(build_resampling_plan(&[BandSpec::named("x")], &[band(505.0, Some(5.0))]).is_err());
    }

    #[test]
    fn nan_source_poisons_target() {
        let plan = build_resampling_plan(
            &[band(500.0, None), band(510.0, None), band(700.0, None)],
            &[band(505.0, Some(10.0)), band(700.0, Some(10.0))],
        )
        .unwrap();
        let out = apply_resampling(&plan, &[f64::NAN, 0.3, 0.4]).unwrap();
        assert!(out[0].is_nan());
        assert!((out[1] - 0.4).abs() < 1e-12);
        assert!(apply_resampling(&plan, &[0.1, 0.2]).is_err());
    }

    #[test]
    fn hyperspectral_coverage_fraction() {
        // 425 target bands at 5 nm spacing from 380 nm, 5 nm FWHM; source
        // bands stop at 1835 nm, leaving the 131 longest targets without
        // support.
        let target: Vec<_> = (0..425).map(|i| band(380.0 + 5.0 * i as f64, Some(5.0))).collect();
        let source: Vec<_> = (0..=291).map(|i| band(380.0 + 5.0 * i as f64, None)).collect();
        let plan = build_resampling_plan(&source, &target).unwrap();
        assert_eq!(plan.uncovered_count(), 131);
        let frac = plan.uncovered_count() as f64 / 425.0;
        assert!((frac * 100.0 - 30.8).abs() < 0.05);
        let out = apply_resampling(&plan, &vec![0.2; source.len()]).unwrap();
        assert_eq!(out.iter().filter(|v| v.is_nan()).count(), 131);
        assert!(out.iter().filter(|v| !v.is_nan()).all(|v| (v - 0.2).abs() < 1e-12));
    }

    #[test]
    fn stack_resampling_drops_uncovered_bands() {
        let source = vec![band(500.0, None), band(510.0, None)];
        let target = vec![band(505.0, Some(10.0)), band(900.0, Some(10.0))];
        let plan = build_resampling_plan(&source, &target).unwrap();
        let stack = RasterStack::new(1, 2, source, vec![1.0, 2.0, 3.0, 4.0], GeoTransform::identity()).unwrap();
        let out = resample_stack(&plan, &stack, &target).unwrap();
        assert_eq!(out.n_bands(), 1);
        assert_eq!(out.band(0), &[2.0, 3.0]);
    }

    fn stack_of(values: &[f32]) -> RasterStack {
        RasterStack::new(1, 1, vec![BandSpec::named("a")], values.to_vec(), GeoTransform::identity())
            .unwrap()
    }

    #[test]
    fn median_conventions() {
        let odd = [stack_of(&[1.0]), stack_of(&[5.0]), stack_of(&[100.0])];
        assert_eq!(masked_median_composite(&odd).unwrap().pixel(0), vec![5.0]);
        let even = [stack_of(&[1.0]), stack_of(&[3.0])];
        assert_eq!(masked_median_composite(&even).unwrap().pixel(0), vec![2.0]);
        let masked = [stack_of(&[f32::NAN]), stack_of(&[4.0]), stack_of(&[6.0])];
        assert_eq!(masked_median_composite(&masked).unwrap().pixel(0), vec![5.0]);
        let empty = [stack_of(&[f32::NAN]), stack_of(&[f32::NAN])];
        assert!(masked_median_composite(&empty).unwrap().is_nodata(0));
    }

    #[test]
    fn composite_shape_mismatch() {
        let a = stack_of(&[1.0]);
        let b = RasterStack::new(2, 1, vec![BandSpec::named("a")], vec![1.0, 2.0], GeoTransform::identity()).unwrap();
        assert!(matches!(masked_median_composite(&[a, b]), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn drop_band_rules() {
        let bands: Vec<_> = (0..13).map(|i| BandSpec::named(format!("B{}", i + 1))).collect();
        let s = RasterStack::filled(2, 2, bands, 0.5, GeoTransform::identity()).unwrap();
        let kept = drop_bands(&s, &[0, 8, 9]).unwrap();
        assert_eq!(kept.n_bands(), 10);
        assert_eq!(kept.bands()[0].name, "B2");
        assert_eq!(kept.bands()[6].name, "B8");
        assert_eq!(kept.bands()[7].name, "B11");
        assert_eq!(drop_bands(&s, &[]).unwrap(), s);
        assert!(matches!(drop_bands(&s, &[13]), Err(Error::BandIndex { .. })));
        assert!(drop_bands(&stack_of(&[1.0]), &[0]).is_err());
    }

    proptest! {
        #[test]
        fn normalization_idempotent_and_scale_invariant(
            v in proptest::collection::vec(0.01f64..10.0, 1..12),
            alpha in 0.01f64..100.0,
        ) {
            let once = l2_normalize_vector(&v).unwrap();
            let twice = l2_normalize_vector(&once).unwrap();
            let scaled: Vec<f64> = v.iter().map(|x| x * alpha).collect();
            let scaled = l2_normalize_vector(&scaled).unwrap();
            for i in 0..v.len() {
                prop_assert!((once[i] - twice[i]).abs() < 1e-6);
                prop_assert!((once[i] - scaled[i]).abs() < 1e-6);
            }
        }

        #[test]
        fn resampling_is_a_convex_combination(
            centers in proptest::collection::vec(400f64..900.0, 1..20),
            values in proptest::collection::vec(-1f64..1.0, 20),
            constant in -5f64..5.0,
            tcenter in 380f64..920.0,
            tfwhm in 2f64..60.0,
        ) {
            let source: Vec<_> = centers.iter().map(|&c| band(c, None)).collect();
            let plan = build_resampling_plan(&source, &[band(tcenter, Some(tfwhm))]).unwrap();
            if plan.covered()[0] {
                let s: f64 = plan.row(0).iter().map(|(_, w)| w).sum();
                prop_assert!((s - 1.0).abs() < 1e-9);
                prop_assert!(plan.row(0).iter().all(|(_, w)| *w >= 0.0));
                let flat = apply_resampling(&plan, &vec![constant; centers.len()]).unwrap();
                prop_assert!((flat[0] - constant).abs() < 1e-9);
                let spectrum = &values[..centers.len()];
                let out = apply_resampling(&plan, spectrum).unwrap()[0];
                let lo = spectrum.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = spectrum.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(out >= lo - 1e-12 && out <= hi + 1e-12);
            } else {
                prop_assert!(plan.row(0).is_empty());
            }
        }

        #[test]
        fn median_bounded_and_order_free(
            values in proptest::collection::vec(proptest::option::weighted(0.8, -100f32..100.0), 1..8),
            rot in 0usize..8,
        ) {
            let stacks: Vec<_> = values.iter().map(|v| stack_of(&[v.unwrap_or(f32::NAN)])).collect();
            let out = masked_median_composite(&stacks).unwrap();
            let mut rotated = stacks.clone();
            rotated.rotate_left(rot % stacks.len());
            prop_assert_eq!(masked_median_composite(&rotated).unwrap().pixel(0)[0].to_bits(),
                            out.pixel(0)[0].to_bits());
            let valid: Vec<f32> = values.iter().flatten().cloned().collect();
            if valid.is_empty() {
                prop_assert!(out.is_nodata(0));
            } else {
                let lo = valid.iter().cloned().fold(f32::INFINITY, f32::min);
                let hi = valid.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                let m = out.pixel(0)[0];
                prop_assert!(m >= lo && m <= hi);
            }
        }
    }
}
