//! BSQ1 format: a JSON sidecar `<name>.json` plus a raw little-endian
//! band-sequential payload `<name>.bsq`.
//!
//! Float rasters use dtype `f32` with NaN as nodata. Change masks and class
//! maps use dtype `u8` with 255 as nodata; mask codes are 0 = stable,
//! 1 = changed.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{
    BandSpec, ChangeMask, ClassMap, GeoTransform, Legend, MaskFlag, MaskProvenance, RasterStack,
};
use crate::error::{Error, Result};
use crate::fsio::{read_bytes, read_string, write_atomic};

pub const MASK_STABLE: u8 = 0;
pub const MASK_CHANGED: u8 = 1;
pub const MASK_NODATA: u8 = 255;

const FORMAT: &str = "BSQ1";

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    format: String,
    width: usize,
    height: usize,
    bands: Vec<BandSpec>,
    nodata: Value,
    transform: [f64; 4],
    #[serde(default = "default_dtype")]
    dtype: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<MaskProvenance>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    threshold: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    legend: Option<Legend>,
}

fn default_dtype() -> String {
    "f32".to_string()
}

/// Resolves `foo`, `foo.json` or `foo.bsq` to the `(sidecar, payload)` pair.
pub fn sidecar_paths(path: &Path) -> (PathBuf, PathBuf) {
    let base = match path.extension().and_then(|e| e.to_str()) {
        Some("json") | Some("bsq") => path.with_extension(""),
        _ => path.to_path_buf(),
    };
    let with = |ext: &str| {
        let mut s: OsString = base.clone().into_os_string();
        s.push(ext);
        PathBuf::from(s)
    };
    (with(".json"), with(".bsq"))
}

fn malformed(path: &Path, reason: impl Into<String>) -> Error {
    Error::MalformedHeader {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn read_sidecar(json_path: &Path, dtype: &str) -> Result<(Sidecar, GeoTransform)> {
    let text = read_string(json_path)?;
    let header: Sidecar =
        serde_json::from_str(&text).map_err(|e| malformed(json_path, e.to_string()))?;
    if header.format != FORMAT {
        return Err(malformed(
            json_path,
            format!("format {:?}, expected {FORMAT:?}", header.format),
        ));
    }
    if header.dtype != dtype {
        return Err(malformed(
            json_path,
            format!("dtype {:?}, expected {dtype:?}", header.dtype),
        ));
    }
    if header.width == 0 || header.height == 0 || header.bands.is_empty() {
        return Err(malformed(json_path, "empty dimensions or band list"));
    }
    let [ox, oy, px, py] = header.transform;
    let transform =
        GeoTransform::new(ox, oy, px, py).map_err(|e| malformed(json_path, e.to_string()))?;
    Ok((header, transform))
}

fn write_sidecar(json_path: &Path, header: &Sidecar) -> Result<()> {
    let mut text =
        serde_json::to_string_pretty(header).map_err(|e| malformed(json_path, e.to_string()))?;
    text.push('\n');
    write_atomic(json_path, text.as_bytes())
}

fn check_payload(path: &Path, payload: &[u8], expected: usize) -> Result<()> {
    if payload.len() != expected {
        return Err(Error::SizeMismatch {
            path: path.to_path_buf(),
            expected: expected as u64,
            found: payload.len() as u64,
        });
    }
    Ok(())
}

pub fn read_raster(path: impl AsRef<Path>) -> Result<RasterStack> {
    let (json_path, bsq_path) = sidecar_paths(path.as_ref());
    let (header, transform) = read_sidecar(&json_path, "f32")?;
    if header.nodata != Value::String("nan".into()) {
        return Err(malformed(&json_path, "f32 rasters must declare nodata \"nan\""));
    }
    let payload = read_bytes(&bsq_path)?;
    let n = header.width * header.height * header.bands.len();
    check_payload(&bsq_path, &payload, n * 4)?;
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    RasterStack::new(header.width, header.height, header.bands, data, transform)
        .map_err(|e| malformed(&json_path, e.to_string()))
}

pub fn write_raster(stack: &RasterStack, path: impl AsRef<Path>) -> Result<()> {
    let (json_path, bsq_path) = sidecar_paths(path.as_ref());
    let mut payload = Vec::with_capacity(stack.data().len() * 4);
    for v in stack.data() {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    write_atomic(&bsq_path, &payload)?;
    let header = Sidecar {
        format: FORMAT.into(),
        width: stack.width(),
        height: stack.height(),
        bands: stack.bands().to_vec(),
        nodata: Value::String("nan".into()),
        transform: stack.transform().as_array(),
        dtype: "f32".into(),
        provenance: None,
        threshold: None,
        legend: None,
    };
    write_sidecar(&json_path, &header)
}

fn read_u8(path: &Path, band_name: &str) -> Result<(Sidecar, GeoTransform, Vec<u8>)> {
    let (json_path, bsq_path) = sidecar_paths(path);
    let (header, transform) = read_sidecar(&json_path, "u8")?;
    if header.bands.len() != 1 {
        return Err(malformed(
            &json_path,
            format!("{band_name} raster must have exactly one band"),
        ));
    }
    let payload = read_bytes(&bsq_path)?;
    check_payload(&bsq_path, &payload, header.width * header.height)?;
    Ok((header, transform, payload))
}

fn write_u8(path: &Path, header: Sidecar, payload: &[u8]) -> Result<()> {
    let (json_path, bsq_path) = sidecar_paths(path);
    write_atomic(&bsq_path, payload)?;
    write_sidecar(&json_path, &header)
}

/// Reads a u8 change mask. Codes other than 0, 1 and 255 are rejected with
/// the first offending pixel index. Provenance defaults to `external` when
/// the sidecar does not record one.
pub fn read_change_mask(path: impl AsRef<Path>) -> Result<ChangeMask> {
    let (header, transform, payload) = read_u8(path.as_ref(), "change mask")?;
    let flags = payload
        .iter()
        .enumerate()
        .map(|(index, &code)| match code {
            MASK_STABLE => Ok(MaskFlag::Stable),
            MASK_CHANGED => Ok(MaskFlag::Changed),
            MASK_NODATA => Ok(MaskFlag::Nodata),
            _ => Err(Error::IllegalMaskCode { code, index }),
        })
        .collect::<Result<Vec<_>>>()?;
    ChangeMask::new(
        header.width,
        header.height,
        transform,
        flags,
        header.provenance.unwrap_or(MaskProvenance::External),
        header.threshold,
    )
}

pub fn write_change_mask(mask: &ChangeMask, path: impl AsRef<Path>) -> Result<()> {
    let payload: Vec<u8> = mask
        .flags
        .iter()
        .map(|f| match f {
            MaskFlag::Stable => MASK_STABLE,
            MaskFlag::Changed => MASK_CHANGED,
            MaskFlag::Nodata => MASK_NODATA,
        })
        .collect();
    let header = Sidecar {
        format: FORMAT.into(),
        width: mask.width,
        height: mask.height,
        bands: vec![BandSpec::named("change")],
        nodata: Value::from(MASK_NODATA),
        transform: mask.transform.as_array(),
        dtype: "u8".into(),
        provenance: Some(mask.provenance),
        threshold: mask.threshold,
        legend: None,
    };
    write_u8(path.as_ref(), header, &payload)
}

pub fn read_class_map(path: impl AsRef<Path>) -> Result<ClassMap> {
    let (header, transform, payload) = read_u8(path.as_ref(), "class map")?;
    let classes = payload
        .iter()
        .map(|&c| (c != MASK_NODATA).then_some(c as u32))
        .collect();
    let legend = header.legend.unwrap_or_default();
    ClassMap::new(header.width, header.height, transform, classes, legend)
}

pub fn write_class_map(map: &ClassMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let payload = map
        .classes
        .iter()
        .map(|c| match c {
            None => Ok(MASK_NODATA),
            Some(id) if *id < MASK_NODATA as u32 => Ok(*id as u8),
            Some(id) => Err(Error::InvalidArgument(format!(
                "class id {id} does not fit the u8 class map encoding (max 254)"
            ))),
        })
        .collect::<Result<Vec<u8>>>()?;
    let header = Sidecar {
        format: FORMAT.into(),
        width: map.width,
        height: map.height,
        bands: vec![BandSpec::named("class")],
        nodata: Value::from(MASK_NODATA),
        transform: map.transform.as_array(),
        dtype: "u8".into(),
        provenance: None,
        threshold: None,
        legend: Some(map.legend.clone()),
    };
    write_u8(path, header, &payload)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stack_2x2(values: [f32; 4]) -> RasterStack {
        RasterStack::new(
            2,
            2,
            vec![BandSpec::named("b0")],
            values.to_vec(),
            GeoTransform::new(10.0, 20.0, 1.0, -1.0).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn roundtrip_small_stack() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img");
        let s = stack_2x2([0.0, 1.0, 2.0, 3.0]);
        write_raster(&s, &path).unwrap();
        let back = read_raster(&path).unwrap();
        assert_eq!(back, s);
        assert_eq!(read_raster(dir.path().join("img.json")).unwrap(), s);
    }

    #[test]
    fn header_band_count_larger_than_payload() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img");
        write_raster(&stack_2x2([0.0, 1.0, 2.0, 3.0]), &path).unwrap();
        let (json, _) = sidecar_paths(&path);
        let mut header: Value = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
        header["bands"] = serde_json::json!([{"name": "a"}, {"name": "b"}, {"name": "c"}]);
        std::fs::write(&json, header.to_string()).unwrap();
        assert!(matches!(read_raster(&path), Err(Error::SizeMismatch { .. })));
    }

    #[test]
    fn nan_becomes_nodata_on_read() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img");
        write_raster(&stack_2x2([f32::NAN, 1.0, 2.0, 3.0]), &path).unwrap();
        let back = read_raster(&path).unwrap();
        assert!(back.is_nodata(0));
        assert!(!back.is_nodata(1));
    }

    #[test]
    fn malformed_header_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad");
        std::fs::write(dir.path().join("bad.json"), "{\"format\": \"TIFF\"}").unwrap();
        std::fs::write(dir.path().join("bad.bsq"), []).unwrap();
        assert!(matches!(read_raster(&path), Err(Error::MalformedHeader { .. })));
        assert!(matches!(
            read_raster(dir.path().join("missing")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn mask_codes_roundtrip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mask");
        let t = GeoTransform::identity();
        let flags = vec![
            MaskFlag::Stable,
            MaskFlag::Changed,
            MaskFlag::Nodata,
            MaskFlag::Stable,
        ];
        let mask =
            ChangeMask::new(2, 2, t, flags, MaskProvenance::IrmadPr, Some(95.811)).unwrap();
        write_change_mask(&mask, &path).unwrap();
        assert_eq!(read_change_mask(&path).unwrap(), mask);

        let (_, bsq) = sidecar_paths(&path);
        std::fs::write(&bsq, [0u8, 1, 2, 255]).unwrap();
        match read_change_mask(&path) {
            Err(Error::IllegalMaskCode { code: 2, index: 2 }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn class_map_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("map");
        let legend: Legend = [(0, "water".to_string()), (3, "forest".to_string())].into();
        let map = ClassMap::new(
            2,
            1,
            GeoTransform::identity(),
            vec![Some(3), None],
            legend,
        )
        .unwrap();
        write_class_map(&map, &path).unwrap();
        assert_eq!(read_class_map(&path).unwrap(), map);
    }
}
