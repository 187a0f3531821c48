//! Raster data model: multiband float stacks, change masks and class maps,
//! all sharing one affine geotransform convention.

mod io;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{
    read_change_mask, read_class_map, read_raster, sidecar_paths, write_change_mask,
    write_class_map, write_raster, MASK_CHANGED, MASK_NODATA, MASK_STABLE,
};

/// Class legend: class id to human-readable name.
pub type Legend = BTreeMap<u32, String>;

/// Spectral band description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct BandSpec {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub center_nm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fwhm_nm: Option<f64>,
}

impl BandSpec {
    pub fn named(name: impl Into<String>) -> Self {
        BandSpec {
            name: name.into(),
            center_nm: None,
            fwhm_nm: None,
        }
    }

    pub fn gaussian(name: impl Into<String>, center_nm: f64, fwhm_nm: f64) -> Result<Self> {
        let band = BandSpec {
            name: name.into(),
            center_nm: Some(center_nm),
            fwhm_nm: Some(fwhm_nm),
        };
        band.validate()?;
        Ok(band)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(c) = self.center_nm {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::InvalidBand(format!(
                    "band {:?}: center_nm must be positive, got {c}",
                    self.name
                )));
            }
        }
        if let Some(f) = self.fwhm_nm {
            if self.center_nm.is_none() {
                return Err(Error::InvalidBand(format!(
                    "band {:?}: fwhm_nm given without center_nm",
                    self.name
                )));
            }
            if !(f.is_finite() && f > 0.0) {
                return Err(Error::InvalidBand(format!(
                    "band {:?}: fwhm_nm must be positive, got {f}",
                    self.name
                )));
            }
        }
        Ok(())
    }
}

/// Affine map from pixel indices to planar map coordinates (meters).
///
/// Pixel `(col, row)` covers `[origin_x + col*px, origin_x + (col+1)*px)`
/// horizontally and likewise vertically with `py` (usually negative).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoTransform {
    pub origin_x: f64,
    pub origin_y: f64,
    pub pixel_size_x: f64,
    pub pixel_size_y: f64,
}

impl GeoTransform {
    pub fn new(origin_x: f64, origin_y: f64, pixel_size_x: f64, pixel_size_y: f64) -> Result<Self> {
        let t = GeoTransform {
            origin_x,
            origin_y,
            pixel_size_x,
            pixel_size_y,
        };
        t.validate()?;
        Ok(t)
    }

    /// Unit pixels, origin at (0, 0), rows growing downward in map y.
    pub fn identity() -> Self {
        GeoTransform {
            origin_x: 0.0,
            origin_y: 0.0,
            pixel_size_x: 1.0,
            pixel_size_y: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.origin_x,
            self.origin_y,
            self.pixel_size_x,
            self.pixel_size_y,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite || self.pixel_size_x <= 0.0 || self.pixel_size_y == 0.0 {
            return Err(Error::InvalidRaster(format!(
                "bad geotransform {:?}: need pixel_size_x > 0 and pixel_size_y != 0",
                self.as_array()
            )));
        }
        Ok(())
    }

    pub fn as_array(&self) -> [f64; 4] {
        [
            self.origin_x,
            self.origin_y,
            self.pixel_size_x,
            self.pixel_size_y,
        ]
    }

    /// Map coordinates of a fractional pixel position.
    pub fn forward(&self, col: f64, row: f64) -> (f64, f64) {
        (
            self.origin_x + col * self.pixel_size_x,
            self.origin_y + row * self.pixel_size_y,
        )
    }

    /// Fractional pixel position of map coordinates.
    pub fn inverse(&self, x: f64, y: f64) -> (f64, f64) {
        (
            (x - self.origin_x) / self.pixel_size_x,
            (y - self.origin_y) / self.pixel_size_y,
        )
    }

    pub fn pixel_center(&self, col: usize, row: usize) -> (f64, f64) {
        self.forward(col as f64 + 0.5, row as f64 + 0.5)
    }

    /// Pixel containing `(x, y)` (floor of the fractional index), if it lies
    /// inside a `width` x `height` grid.
    pub fn pixel_of(&self, x: f64, y: f64, width: usize, height: usize) -> Option<(usize, usize)> {
        let (c, r) = self.inverse(x, y);
        let (c, r) = (c.floor(), r.floor());
        if c >= 0.0 && r >= 0.0 && c < width as f64 && r < height as f64 {
            Some((c as usize, r as usize))
        } else {
            None
        }
    }
}

/// Multiband float32 image, band-sequential, with a per-pixel nodata mask.
///
/// Nodata pixels are stored as NaN in every band, so the mask and the
/// payload never disagree.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterStack {
    width: usize,
    height: usize,
    bands: Vec<BandSpec>,
    data: Vec<f32>,
    nodata: Vec<bool>,
    transform: GeoTransform,
}

impl RasterStack {
    /// Builds a stack; any pixel with a NaN in some band becomes nodata.
    pub fn new(
        width: usize,
        height: usize,
        bands: Vec<BandSpec>,
        data: Vec<f32>,
        transform: GeoTransform,
    ) -> Result<Self> {
        Self::with_mask(width, height, bands, data, None, transform)
    }

    pub fn with_mask(
        width: usize,
        height: usize,
        bands: Vec<BandSpec>,
        mut data: Vec<f32>,
        mask: Option<Vec<bool>>,
        transform: GeoTransform,
    ) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidRaster(format!(
                "dimensions must be positive, got {width}x{height}"
            )));
        }
        if bands.is_empty() {
            return Err(Error::InvalidRaster("raster must have at least one band".into()));
        }
        for b in &bands {
            b.validate()?;
        }
        transform.validate()?;
        let n = width * height;
        if data.len() != n * bands.len() {
            return Err(Error::InvalidRaster(format!(
                "data length {} != {width} x {height} x {} bands",
                data.len(),
                bands.len()
            )));
        }
        let mut nodata = match mask {
            Some(m) if m.len() != n => {
                return Err(Error::InvalidRaster(format!(
                    "mask length {} != pixel count {n}",
                    m.len()
                )))
            }
            Some(m) => m,
            None => vec![false; n],
        };
        for plane in data.chunks_exact(n) {
            for (flag, v) in nodata.iter_mut().zip(plane) {
                *flag |= v.is_nan();
            }
        }
        for plane in data.chunks_exact_mut(n) {
            for (v, &flag) in plane.iter_mut().zip(&nodata) {
                if flag {
                    *v = f32::NAN;
                }
            }
        }
        Ok(RasterStack {
            width,
            height,
            bands,
            data,
            nodata,
            transform,
        })
    }

    /// Stack filled with one value; handy for tests and fixtures.
    pub fn filled(
        width: usize,
        height: usize,
        bands: Vec<BandSpec>,
        value: f32,
        transform: GeoTransform,
    ) -> Result<Self> {
        let len = width * height * bands.len();
        Self::new(width, height, bands, vec![value; len], transform)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn n_pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn n_bands(&self) -> usize {
        self.bands.len()
    }

    pub fn bands(&self) -> &[BandSpec] {
        &self.bands
    }

    pub fn transform(&self) -> &GeoTransform {
        &self.transform
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn nodata_mask(&self) -> &[bool] {
        &self.nodata
    }

    pub fn is_nodata(&self, pixel: usize) -> bool {
        self.nodata[pixel]
    }

    pub fn valid_count(&self) -> usize {
        self.nodata.iter().filter(|&&m| !m).count()
    }

    pub fn band(&self, band: usize) -> &[f32] {
        let n = self.n_pixels();
        &self.data[band * n..(band + 1) * n]
    }

    pub fn value(&self, band: usize, col: usize, row: usize) -> f32 {
        self.data[band * self.n_pixels() + row * self.width + col]
    }

    /// Band vector of one pixel (linear index).
    pub fn pixel(&self, pixel: usize) -> Vec<f32> {
        let n = self.n_pixels();
        (0..self.n_bands()).map(|b| self.data[b * n + pixel]).collect()
    }

    pub fn pixel_index(&self, col: usize, row: usize) -> usize {
        row * self.width + col
    }

    pub fn same_geometry(&self, other: &RasterStack) -> bool {
        self.width == other.width
            && self.height == other.height
            && self.transform == other.transform
    }

    /// Human-readable shape, e.g. `128x128x6`.
    pub fn shape_string(&self) -> String {
        format!("{}x{}x{}", self.width, self.height, self.n_bands())
    }

    pub fn into_parts(self) -> (Vec<BandSpec>, Vec<f32>, GeoTransform) {
        (self.bands, self.data, self.transform)
    }
}

/// Per-pixel state of a change mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MaskFlag {
    Stable,
    Changed,
    Nodata,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskProvenance {
    IrmadPercentile,
    IrmadPr,
    External,
    Manual,
}

/// Binary stable/changed layer with nodata.
#[derive(Debug, Clone, PartialEq)]
pub struct ChangeMask {
    pub width: usize,
    pub height: usize,
    pub transform: GeoTransform,
    pub flags: Vec<MaskFlag>,
    pub provenance: MaskProvenance,
    pub threshold: Option<f64>,
}

impl ChangeMask {
    pub fn new(
        width: usize,
        height: usize,
        transform: GeoTransform,
        flags: Vec<MaskFlag>,
        provenance: MaskProvenance,
        threshold: Option<f64>,
    ) -> Result<Self> {
        transform.validate()?;
        if width == 0 || height == 0 || flags.len() != width * height {
            return Err(Error::InvalidRaster(format!(
                "change mask {width}x{height} has {} flags",
                flags.len()
            )));
        }
        Ok(ChangeMask {
            width,
            height,
            transform,
            flags,
            provenance,
            threshold,
        })
    }

    /// Flag at map coordinates by nearest-pixel lookup; outside the extent
    /// reads as nodata.
    pub fn flag_at(&self, x: f64, y: f64) -> MaskFlag {
        match self.transform.pixel_of(x, y, self.width, self.height) {
            Some((c, r)) => self.flags[r * self.width + c],
            None => MaskFlag::Nodata,
        }
    }

    pub fn count(&self, flag: MaskFlag) -> usize {
        self.flags.iter().filter(|&&f| f == flag).count()
    }

    pub fn matches(&self, stack: &RasterStack) -> bool {
        self.width == stack.width() && self.height == stack.height()
    }
}

/// Per-pixel class ids with a legend; `None` is nodata.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassMap {
    pub width: usize,
    pub height: usize,
    pub transform: GeoTransform,
    pub classes: Vec<Option<u32>>,
    pub legend: Legend,
}

impl ClassMap {
    pub fn new(
        width: usize,
        height: usize,
        transform: GeoTransform,
        classes: Vec<Option<u32>>,
        legend: Legend,
    ) -> Result<Self> {
        transform.validate()?;
        if width == 0 || height == 0 || classes.len() != width * height {
            return Err(Error::InvalidRaster(format!(
                "class map {width}x{height} has {} cells",
                classes.len()
            )));
        }
        if let Some(bad) = classes.iter().flatten().find(|c| !legend.contains_key(c)) {
            return Err(Error::InvalidRaster(format!(
                "class id {bad} not present in legend"
            )));
        }
        Ok(ClassMap {
            width,
            height,
            transform,
            classes,
            legend,
        })
    }

    pub fn get(&self, col: usize, row: usize) -> Option<u32> {
        self.classes[row * self.width + col]
    }

    pub fn class_at(&self, x: f64, y: f64) -> Option<u32> {
        self.transform
            .pixel_of(x, y, self.width, self.height)
            .and_then(|(c, r)| self.get(c, r))
    }

    /// Pixel counts per class id (nodata excluded).
    pub fn class_counts(&self) -> BTreeMap<u32, usize> {
        let mut counts = BTreeMap::new();
        for c in self.classes.iter().flatten() {
            *counts.entry(*c).or_insert(0) += 1;
        }
        counts
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn band_spec_invariants() {
        assert!(BandSpec::gaussian("b", 500.0, 10.0).is_ok());
        let orphan = BandSpec {
            name: "x".into(),
            center_nm: None,
            fwhm_nm: Some(5.0),
        };
        assert!(orphan.validate().is_err());
        assert!(BandSpec::gaussian("b", 500.0, 0.0).is_err());
    }

    #[test]
    fn nan_marks_pixel_nodata_across_bands() {
        let bands = vec![BandSpec::named("a"), BandSpec::named("b")];
        let data = vec![f32::NAN, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0];
        let s = RasterStack::new(2, 2, bands, data, GeoTransform::identity()).unwrap();
        assert!(s.is_nodata(0));
        assert!(s.value(1, 0, 0).is_nan());
        assert_eq!(s.valid_count(), 3);
    }

    #[test]
    fn rejects_bad_transform_and_lengths() {
        assert!(GeoTransform::new(0.0, 0.0, 0.0, 1.0).is_err());
        assert!(GeoTransform::new(0.0, 0.0, 1.0, 0.0).is_err());
        let r = RasterStack::new(
            2,
            2,
            vec![BandSpec::named("a")],
            vec![0.0; 3],
            GeoTransform::identity(),
        );
        assert!(r.is_err());
    }

    #[test]
    fn pixel_center_roundtrip() {
        let t = GeoTransform::new(1000.0, 2000.0, 30.0, -30.0).unwrap();
        for (c, r) in [(0usize, 0usize), (3, 2), (17, 41)] {
            let (x, y) = t.pixel_center(c, r);
            let (fc, fr) = t.inverse(x, y);
            let (x2, y2) = t.forward(fc, fr);
            assert!((x - x2).abs() < 1e-9 && (y - y2).abs() < 1e-9);
            assert_eq!(t.pixel_of(x, y, 100, 100), Some((c, r)));
        }
        assert_eq!(t.pixel_of(999.0, 1990.0, 100, 100), None);
    }
}
