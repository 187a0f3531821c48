//! Geolocated reference points with labels and per-epoch feature vectors.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsio::{read_string, write_atomic};
use crate::raster::{Legend, RasterStack};

/// The two epochs of a bi-temporal pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Timestep {
    T0,
    T1,
}

impl fmt::Display for Timestep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Timestep::T0 => "t0",
            Timestep::T1 => "t1",
        })
    }
}

impl FromStr for Timestep {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "t0" | "0" => Ok(Timestep::T0),
            "t1" | "1" => Ok(Timestep::T1),
            other => Err(Error::InvalidArgument(format!("unknown timestep {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChangeFlag {
    Stable,
    Changed,
    Unknown,
}

impl ChangeFlag {
    /// Anything other than `stable`/`changed` reads as unknown.
    pub fn parse_lenient(s: &str) -> Self {
        match s.trim().to_ascii_lowercase().as_str() {
            "stable" => ChangeFlag::Stable,
            "changed" => ChangeFlag::Changed,
            _ => ChangeFlag::Unknown,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            ChangeFlag::Stable => "stable",
            ChangeFlag::Changed => "changed",
            ChangeFlag::Unknown => "unknown",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplePoint {
    pub id: String,
    pub x: f64,
    pub y: f64,
    pub label_t0: u32,
    pub label_t1: Option<u32>,
    pub change_flag: ChangeFlag,
    pub features_t0: Option<Vec<f64>>,
    pub features_t1: Option<Vec<f64>>,
}

impl SamplePoint {
    pub fn new(id: impl Into<String>, x: f64, y: f64, label_t0: u32) -> Self {
        SamplePoint {
            id: id.into(),
            x,
            y,
            label_t0,
            label_t1: None,
            change_flag: ChangeFlag::Unknown,
            features_t0: None,
            features_t1: None,
        }
    }

    pub fn features(&self, t: Timestep) -> Option<&[f64]> {
        match t {
            Timestep::T0 => self.features_t0.as_deref(),
            Timestep::T1 => self.features_t1.as_deref(),
        }
    }

    pub fn set_features(&mut self, t: Timestep, f: Option<Vec<f64>>) {
        match t {
            Timestep::T0 => self.features_t0 = f,
            Timestep::T1 => self.features_t1 = f,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.x.is_finite() && self.y.is_finite()) {
            return Err(Error::InvariantViolation {
                id: self.id.clone(),
                reason: "non-finite coordinate".into(),
            });
        }
        if self.change_flag == ChangeFlag::Stable {
            if let Some(l1) = self.label_t1 {
                if l1 != self.label_t0 {
                    return Err(Error::InvariantViolation {
                        id: self.id.clone(),
                        reason: format!(
                            "flagged stable but label_t0 = {} and label_t1 = {l1}",
                            self.label_t0
                        ),
                    });
                }
            }
        }
        Ok(())
    }
}

/// Validated collection of sample points sharing a legend.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    points: Vec<SamplePoint>,
    legend: Legend,
    feature_dim_t0: Option<usize>,
    feature_dim_t1: Option<usize>,
}

impl SampleSet {
    pub fn new(points: Vec<SamplePoint>, legend: Legend) -> Result<Self> {
        let mut ids = HashSet::with_capacity(points.len());
        let mut dims = [None, None];
        for p in &points {
            if !ids.insert(p.id.as_str()) {
                return Err(Error::DuplicateId(p.id.clone()));
            }
            p.validate()?;
            for label in std::iter::once(p.label_t0).chain(p.label_t1) {
                if !legend.contains_key(&label) {
                    return Err(Error::LabelOutsideLegend {
                        id: p.id.clone(),
                        label,
                    });
                }
            }
            for (slot, t) in dims.iter_mut().zip([Timestep::T0, Timestep::T1]) {
                if let Some(f) = p.features(t) {
                    match *slot {
                        None => *slot = Some(f.len()),
                        Some(d) if d != f.len() => {
                            return Err(Error::InvariantViolation {
                                id: p.id.clone(),
                                reason: format!(
                                    "{t} feature length {} differs from {d}",
                                    f.len()
                                ),
                            })
                        }
                        Some(_) => {}
                    }
                }
            }
        }
        Ok(SampleSet {
            points,
            legend,
            feature_dim_t0: dims[0],
            feature_dim_t1: dims[1],
        })
    }

    pub fn empty(legend: Legend) -> Self {
        SampleSet {
            points: Vec::new(),
            legend,
            feature_dim_t0: None,
            feature_dim_t1: None,
        }
    }

    pub fn points(&self) -> &[SamplePoint] {
        &self.points
    }

    pub fn legend(&self) -> &Legend {
        &self.legend
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn feature_dim(&self, t: Timestep) -> Option<usize> {
        match t {
            Timestep::T0 => self.feature_dim_t0,
            Timestep::T1 => self.feature_dim_t1,
        }
    }

    pub fn into_points(self) -> Vec<SamplePoint> {
        self.points
    }

    /// Subset keeping points for which `keep` is true, in original order.
    pub fn filter(&self, mut keep: impl FnMut(&SamplePoint) -> bool) -> SampleSet {
        let points: Vec<_> = self.points.iter().filter(|p| keep(p)).cloned().collect();
        SampleSet::new(points, self.legend.clone()).expect("subset of a valid set is valid")
    }

    /// Applies `f` to every point and revalidates.
    pub fn map_points(&self, f: impl FnMut(SamplePoint) -> SamplePoint) -> Result<SampleSet> {
        SampleSet::new(self.points.iter().cloned().map(f).collect(), self.legend.clone())
    }
}

/// Companion legend path: `samples.csv` -> `samples.legend.json`.
pub fn legend_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("legend.json")
}

pub fn read_legend(path: &Path) -> Result<Legend> {
    let text = read_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Samples(format!("{}: {e}", path.display())))
}

pub fn write_legend(legend: &Legend, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(legend)
        .map_err(|e| Error::Samples(e.to_string()))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

const FIXED_COLUMNS: [&str; 6] = ["id", "x", "y", "label_t0", "label_t1", "change_flag"];

fn parse_feature_column(name: &str) -> Option<(usize, Timestep)> {
    let rest = name.strip_prefix('f')?;
    let (idx, t) = rest.split_once('_')?;
    let t = match t {
        "t0" => Timestep::T0,
        "t1" => Timestep::T1,
        _ => return None,
    };
    Some((idx.parse().ok()?, t))
}

/// Reads the sample CSV and its companion legend.
pub fn read_samples(path: impl AsRef<Path>) -> Result<SampleSet> {
    let path = path.as_ref();
    let legend = read_legend(&legend_path(path))?;
    let text = read_string(path)?;
    parse_samples(&text, legend)
}

/// Parses sample CSV text against a legend.
pub fn parse_samples(text: &str, legend: Legend) -> Result<SampleSet> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| Error::Samples(e.to_string()))?
        .clone();
    if headers.len() < FIXED_COLUMNS.len()
        || headers.iter().zip(FIXED_COLUMNS).any(|(h, want)| h != want)
    {
        return Err(Error::Samples(format!(
            "header must start with {}",
            FIXED_COLUMNS.join(",")
        )));
    }
    let mut t0_cols = Vec::new();
    let mut t1_cols = Vec::new();
    for (col, name) in headers.iter().enumerate().skip(FIXED_COLUMNS.len()) {
        match parse_feature_column(name) {
            Some((i, Timestep::T0)) => t0_cols.push((i, col)),
            Some((i, Timestep::T1)) => t1_cols.push((i, col)),
            None => return Err(Error::Samples(format!("unrecognised column {name:?}"))),
        }
    }
    for cols in [&mut t0_cols, &mut t1_cols] {
        cols.sort_unstable();
        if cols.iter().enumerate().any(|(k, (i, _))| k != *i) {
            return Err(Error::Samples("feature columns must be numbered 0..d".into()));
        }
    }

    let mut points = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Samples(format!("row {}: {e}", row + 1)))?;
        let id = record[0].to_string();
        let coord = |k: usize| -> Result<f64> {
            record[k].parse::<f64>().map_err(|_| {
                Error::Samples(format!(
                    "sample {id:?}: non-numeric coordinate {:?}",
                    &record[k]
                ))
            })
        };
        let label = |k: usize| -> Result<u32> {
            record[k].parse::<u32>().map_err(|_| {
                Error::Samples(format!("sample {id:?}: bad label {:?}", &record[k]))
            })
        };
        let features = |cols: &[(usize, usize)]| -> Result<Option<Vec<f64>>> {
            if cols.is_empty() || cols.iter().all(|&(_, c)| record[c].is_empty()) {
                return Ok(None);
            }
            cols.iter()
                .map(|&(_, c)| {
                    record[c].parse::<f64>().map_err(|_| {
                        Error::Samples(format!("sample {id:?}: bad feature {:?}", &record[c]))
                    })
                })
                .collect::<Result<Vec<_>>>()
                .map(Some)
        };
        points.push(SamplePoint {
            x: coord(1)?,
            y: coord(2)?,
            label_t0: label(3)?,
            label_t1: if record[4].is_empty() {
                None
            } else {
                Some(label(4)?)
            },
            change_flag: ChangeFlag::parse_lenient(&record[5]),
            features_t0: features(&t0_cols)?,
            features_t1: features(&t1_cols)?,
            id,
        });
    }
    SampleSet::new(points, legend)
}

/// Renders the sample CSV (without the legend).
pub fn format_samples(set: &SampleSet) -> Result<String> {
    let d0 = set.feature_dim(Timestep::T0).unwrap_or(0);
    let d1 = set.feature_dim(Timestep::T1).unwrap_or(0);
    let mut writer = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = FIXED_COLUMNS.iter().map(|s| s.to_string()).collect();
    header.extend((0..d0).map(|i| format!("f{i}_t0")));
    header.extend((0..d1).map(|i| format!("f{i}_t1")));
    writer
        .write_record(&header)
        .map_err(|e| Error::Samples(e.to_string()))?;
    for p in set.points() {
        let mut row = vec![
            p.id.clone(),
            p.x.to_string(),
            p.y.to_string(),
            p.label_t0.to_string(),
            p.label_t1.map(|l| l.to_string()).unwrap_or_default(),
            p.change_flag.as_str().to_string(),
        ];
        for (t, d) in [(Timestep::T0, d0), (Timestep::T1, d1)] {
            match p.features(t) {
                Some(f) => row.extend(f.iter().map(|v| v.to_string())),
                None => row.extend(std::iter::repeat_n(String::new(), d)),
            }
        }
        writer
            .write_record(&row)
            .map_err(|e| Error::Samples(e.to_string()))?;
    }
    let bytes = writer
        .into_inner()
        .map_err(|e| Error::Samples(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Writes the sample CSV and its companion legend.
pub fn write_samples(set: &SampleSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    write_atomic(path, format_samples(set)?.as_bytes())?;
    write_legend(set.legend(), &legend_path(path))
}

/// Result of sampling raster values at point locations.
#[derive(Debug, Clone)]
pub struct Extraction {
    pub samples: SampleSet,
    /// Ids of points that fell on nodata pixels and were dropped.
    pub excluded_nodata: Vec<String>,
}

/// Attaches the band vector of the pixel containing each point as that
/// point's features for `timestep`. Points on nodata pixels are dropped and
/// reported; points outside the raster are an error.
pub fn extract_features(
    stack: &RasterStack,
    samples: &SampleSet,
    timestep: Timestep,
) -> Result<Extraction> {
    let mut outside = Vec::new();
    let mut excluded = Vec::new();
    let mut points = Vec::with_capacity(samples.len());
    for p in samples.points() {
        match stack
            .transform()
            .pixel_of(p.x, p.y, stack.width(), stack.height())
        {
            None => outside.push(p.id.clone()),
            Some((c, r)) => {
                let idx = stack.pixel_index(c, r);
                if stack.is_nodata(idx) {
                    excluded.push(p.id.clone());
                } else {
                    let mut q = p.clone();
                    q.set_features(
                        timestep,
                        Some(stack.pixel(idx).into_iter().map(f64::from).collect()),
                    );
                    points.push(q);
                }
            }
        }
    }
    if !outside.is_empty() {
        return Err(Error::OutsideExtent(outside));
    }
    if !excluded.is_empty() {
        log::warn!(
            "{} sample(s) on nodata pixels excluded from {timestep} extraction",
            excluded.len()
        );
    }
    Ok(Extraction {
        samples: SampleSet::new(points, samples.legend().clone())?,
        excluded_nodata: excluded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::{BandSpec, GeoTransform};

    fn legend() -> Legend {
        (0..4).map(|i| (i, format!("c{i}"))).collect()
    }

    const HEADER: &str = "id,x,y,label_t0,label_t1,change_flag\n";

    #[test]
    fn parses_stable_row() {
        let set = parse_samples(&format!("{HEADER}p1,10.0,20.0,2,2,stable\n"), legend()).unwrap();
        let p = &set.points()[0];
        assert_eq!((p.label_t0, p.label_t1, p.change_flag), (2, Some(2), ChangeFlag::Stable));
        assert_eq!((p.x, p.y), (10.0, 20.0));
    }

    #[test]
    fn empty_label_t1_is_absent() {
        let set = parse_samples(&format!("{HEADER}p1,10.0,20.0,2,,changed\n"), legend()).unwrap();
        assert_eq!(set.points()[0].label_t1, None);
        assert_eq!(set.points()[0].change_flag, ChangeFlag::Changed);
    }

    #[test]
    fn stable_with_differing_labels_is_rejected() {
        let r = parse_samples(&format!("{HEADER}p1,10.0,20.0,2,3,stable\n"), legend());
        assert!(matches!(r, Err(Error::InvariantViolation { .. })));
    }

    #[test]
    fn unknown_flag_text_parses_as_unknown() {
        let set = parse_samples(&format!("{HEADER}p1,0,0,1,,maybe\n"), legend()).unwrap();
        assert_eq!(set.points()[0].change_flag, ChangeFlag::Unknown);
    }

    #[test]
    fn table_errors() {
        let dup = format!("{HEADER}p1,0,0,1,,stable\np1,1,1,1,,stable\n");
        assert!(matches!(parse_samples(&dup, legend()), Err(Error::DuplicateId(_))));
        let outside = format!("{HEADER}p1,0,0,9,,stable\n");
        assert!(matches!(
            parse_samples(&outside, legend()),
            Err(Error::LabelOutsideLegend { label: 9, .. })
        ));
        let coord = format!("{HEADER}p1,abc,0,1,,stable\n");
        assert!(matches!(parse_samples(&coord, legend()), Err(Error::Samples(_))));
    }

    #[test]
    fn roundtrip_with_features() {
        let text = "id,x,y,label_t0,label_t1,change_flag,f0_t0,f1_t0,f0_t1,f1_t1\n\
             a,1.5,2.5,0,1,changed,0.1,0.2,0.30000000000000004,1e-7\n\
             b,3,4,1,,unknown,,,5,6\n";
        let set = parse_samples(text, legend()).unwrap();
        assert_eq!(set.feature_dim(Timestep::T0), Some(2));
        assert_eq!(set.points()[1].features_t0, None);
        let again = parse_samples(&format_samples(&set).unwrap(), legend()).unwrap();
        assert_eq!(again, set);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.csv");
        write_samples(&set, &path).unwrap();
        assert!(dir.path().join("s.legend.json").exists());
        assert_eq!(read_samples(&path).unwrap(), set);
    }

    fn ramp_stack() -> RasterStack {
        // 4 columns x 3 rows, 2 bands; band b value at (c, r) = 100*b + 10*r + c.
        let (w, h) = (4, 3);
        let mut data = Vec::new();
        for b in 0..2 {
            for r in 0..h {
                for c in 0..w {
                    data.push((100 * b + 10 * r + c) as f32);
                }
            }
        }
        RasterStack::new(
            w,
            h,
            vec![BandSpec::named("a"), BandSpec::named("b")],
            data,
            GeoTransform::new(500.0, 900.0, 10.0, -10.0).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn feature_at_origin_and_pixel_center() {
        let single = RasterStack::new(
            1,
            1,
            vec![BandSpec::named("a")],
            vec![7.0],
            GeoTransform::identity(),
        )
        .unwrap();
        let set = SampleSet::new(vec![SamplePoint::new("o", 0.0, 0.0, 0)], legend()).unwrap();
        let ex = extract_features(&single, &set, Timestep::T0).unwrap();
        assert_eq!(ex.samples.points()[0].features_t0, Some(vec![7.0]));

        // Center of pixel (3, 2) by hand: x = 500 + 3.5*10, y = 900 - 2.5*10.
        let stack = ramp_stack();
        let set = SampleSet::new(vec![SamplePoint::new("c", 535.0, 875.0, 0)], legend()).unwrap();
        let ex = extract_features(&stack, &set, Timestep::T1).unwrap();
        assert_eq!(ex.samples.points()[0].features_t1, Some(vec![23.0, 123.0]));
    }

    #[test]
    fn nodata_points_excluded_and_outside_points_error() {
        let mut data = ramp_stack().into_parts().1;
        data[0] = f32::NAN;
        let stack = RasterStack::new(
            4,
            3,
            vec![BandSpec::named("a"), BandSpec::named("b")],
            data,
            GeoTransform::new(500.0, 900.0, 10.0, -10.0).unwrap(),
        )
        .unwrap();
        let set = SampleSet::new(
            vec![
                SamplePoint::new("nd", 501.0, 899.0, 0),
                SamplePoint::new("ok", 515.0, 895.0, 0),
            ],
            legend(),
        )
        .unwrap();
        let ex = extract_features(&stack, &set, Timestep::T0).unwrap();
        assert_eq!(ex.excluded_nodata, vec!["nd".to_string()]);
        assert_eq!(ex.samples.len(), 1);

        let far = SampleSet::new(vec![SamplePoint::new("far", 0.0, 0.0, 0)], legend()).unwrap();
        match extract_features(&stack, &far, Timestep::T0) {
            Err(Error::OutsideExtent(ids)) => assert_eq!(ids, vec!["far".to_string()]),
            other => panic!("unexpected {other:?}"),
        }
    }
}
