//! The experiment ladder: building a t1 training set from t0 reference
//! labels, with or without change information and pseudo-labels.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forest::{predict_raster, Classifier, FeatureMatrix, ForestConfig, ProbabilisticClassifier};
use crate::fsio::write_atomic;
use crate::preprocess::l2_normalize;
use crate::raster::{ChangeMask, ClassMap, MaskFlag, RasterStack};
use crate::samples::{ChangeFlag, SamplePoint, SampleSet, Timestep};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Experiment {
    E1Gold,
    E2_1Naive,
    E2_2NaiveNorm,
    E3Wessels,
    E4_1StableManual,
    E4_2StableAuto,
    E5_1SslManual,
    E5_2SslAuto,
}

impl Experiment {
    pub const ALL: [Experiment; 8] = [
        Experiment::E1Gold,
        Experiment::E2_1Naive,
        Experiment::E2_2NaiveNorm,
        Experiment::E3Wessels,
        Experiment::E4_1StableManual,
        Experiment::E4_2StableAuto,
        Experiment::E5_1SslManual,
        Experiment::E5_2SslAuto,
    ];

    pub fn code(&self) -> &'static str {
        match self {
            Experiment::E1Gold => "1",
            Experiment::E2_1Naive => "2.1",
            Experiment::E2_2NaiveNorm => "2.2",
            Experiment::E3Wessels => "3",
            Experiment::E4_1StableManual => "4.1",
            Experiment::E4_2StableAuto => "4.2",
            Experiment::E5_1SslManual => "5.1",
            Experiment::E5_2SslAuto => "5.2",
        }
    }

    pub fn description(&self) -> &'static str {
        match self {
            Experiment::E1Gold => "Gold standard (full t1 relabelling)",
            Experiment::E2_1Naive => "Naive transfer",
            Experiment::E2_2NaiveNorm => "Naive transfer + L2 normalisation",
            Experiment::E3Wessels => "Stable-area sampling from t0 map",
            Experiment::E4_1StableManual => "t0 + stable t1 (manual flags)",
            Experiment::E4_2StableAuto => "t0 + stable t1 (IRMAD mask)",
            Experiment::E5_1SslManual => "Two-stage SSL (manual flags)",
            Experiment::E5_2SslAuto => "Two-stage SSL (IRMAD mask)",
        }
    }

    /// Where stability information comes from, if the experiment uses any.
    pub fn change_source(&self) -> Option<ChangeSource> {
        match self {
            Experiment::E1Gold | Experiment::E2_1Naive | Experiment::E2_2NaiveNorm => None,
            Experiment::E4_1StableManual | Experiment::E5_1SslManual => Some(ChangeSource::ManualFlags),
            Experiment::E3Wessels | Experiment::E4_2StableAuto | Experiment::E5_2SslAuto => {
                Some(ChangeSource::Mask)
            }
        }
    }

    pub fn default_normalization(&self) -> bool {
        !matches!(self, Experiment::E1Gold | Experiment::E2_1Naive | Experiment::E3Wessels)
    }

    fn is_stable_union(&self) -> bool {
        matches!(self, Experiment::E4_1StableManual | Experiment::E4_2StableAuto)
    }

    fn is_ssl(&self) -> bool {
        matches!(self, Experiment::E5_1SslManual | Experiment::E5_2SslAuto)
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for Experiment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let code = s.trim().trim_start_matches(['E', 'e']);
        Experiment::ALL
            .into_iter()
            .find(|e| e.code() == code)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown experiment {s:?}")))
    }
}

impl From<Experiment> for String {
    fn from(e: Experiment) -> String {
        e.code().to_string()
    }
}

impl TryFrom<String> for Experiment {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChangeSource {
    ManualFlags,
    Mask,
}

/// Sampling targets for stable-area sampling from the t0 map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapSampling {
    /// Total target as a fraction of stable pixels.
    pub fraction: f64,
    pub min_per_class: usize,
}

impl Default for MapSampling {
    fn default() -> Self {
        MapSampling {
            fraction: 1e-4,
            min_per_class: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub experiment: Experiment,
    pub change_source: Option<ChangeSource>,
    pub normalization: bool,
    pub forest: ForestConfig,
    pub seed: u64,
    /// Pseudo-labels whose top vote fraction is below this are dropped.
    pub confidence_floor: Option<f64>,
    pub map_sampling: MapSampling,
}

impl ExperimentSpec {
    pub fn new(experiment: Experiment, seed: u64) -> Self {
        ExperimentSpec {
            experiment,
            change_source: experiment.change_source(),
            normalization: experiment.default_normalization(),
            forest: ForestConfig::with_seed(seed),
            seed,
            confidence_floor: None,
            map_sampling: MapSampling::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.change_source != self.experiment.change_source() {
            return Err(Error::InvalidArgument(format!(
                "experiment {} needs change source {:?}, got {:?}",
                self.experiment,
                self.experiment.change_source(),
                self.change_source
            )));
        }
        if let Some(f) = self.confidence_floor {
            if !f.is_finite() || f < 0.0 {
                return Err(Error::InvalidArgument(format!("confidence floor {f} must be >= 0")));
            }
        }
        let ms = &self.map_sampling;
        if !(ms.fraction > 0.0 && ms.fraction <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "map sampling fraction {} must lie in (0, 1]",
                ms.fraction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    T0Reference,
    /// Relabelled t1 reference points (gold standard only).
    T1Reference,
    T1Stable,
    T1Pseudo,
    MapSample,
}

impl Provenance {
    pub fn as_str(&self) -> &'static str {
        match self {
            Provenance::T0Reference => "t0_reference",
            Provenance::T1Reference => "t1_reference",
            Provenance::T1Stable => "t1_stable",
            Provenance::T1Pseudo => "t1_pseudo",
            Provenance::MapSample => "map_sample",
        }
    }
}

/// The exact rows a model was fitted on.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingBundle {
    pub row_ids: Vec<String>,
    pub coords: Vec<(f64, f64)>,
    pub rows: Vec<Vec<f64>>,
    pub labels: Vec<u32>,
    pub provenance: Vec<Provenance>,
    pub weights: Vec<f64>,
}

impl TrainingBundle {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn push(&mut self, id: String, coord: (f64, f64), row: &[f64], label: u32, prov: Provenance) {
        self.row_ids.push(id);
        self.coords.push(coord);
        self.rows.push(row.to_vec());
        self.labels.push(label);
        self.provenance.push(prov);
        self.weights.push(1.0);
    }

    /// Appends every point of `set` that has features at `t`.
    fn extend(&mut self, set: &SampleSet, t: Timestep, label: impl Fn(&SamplePoint) -> u32, prov: Provenance) {
        for p in set.points() {
            if let Some(f) = p.features(t) {
                self.push(row_id(&p.id, t), (p.x, p.y), f, label(p), prov);
            }
        }
    }

    pub fn counts(&self) -> BTreeMap<Provenance, usize> {
        let mut out = BTreeMap::new();
        for p in &self.provenance {
            *out.entry(*p).or_insert(0) += 1;
        }
        out
    }

    pub fn count(&self, prov: Provenance) -> usize {
        self.provenance.iter().filter(|p| **p == prov).count()
    }

    pub fn features(&self) -> Result<FeatureMatrix> {
        if self.rows.is_empty() {
            return Err(Error::Training("training bundle is empty".into()));
        }
        FeatureMatrix::from_rows(&self.rows)
    }

    /// CSV with columns `row_id,provenance,label,weight`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::Samples(e.to_string());
        w.write_record(["row_id", "provenance", "label", "weight"]).map_err(csv_err)?;
        for i in 0..self.len() {
            w.write_record([
                self.row_ids[i].as_str(),
                self.provenance[i].as_str(),
                &self.labels[i].to_string(),
                &self.weights[i].to_string(),
            ])
            .map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Samples(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), self.to_csv()?.as_bytes())
    }
}

/// Bundle row id: the sample id tagged with its epoch.
pub fn row_id(sample_id: &str, t: Timestep) -> String {
    format!("{sample_id}@{t}")
}

/// Both epochs' rasters after the experiment's preprocessing. Every stage of
/// one run reads features from the same store.
#[derive(Debug, Clone)]
pub struct FeatureStore {
    t0: RasterStack,
    t1: RasterStack,
    normalized: bool,
}

impl FeatureStore {
    pub fn new(t0: &RasterStack, t1: &RasterStack, normalize: bool) -> Result<Self> {
        if t0.n_bands() != t1.n_bands() {
            return Err(Error::ShapeMismatch {
                left: t0.shape_string(),
                right: t1.shape_string(),
            });
        }
        let prep = |s: &RasterStack, t: Timestep| {
            if !normalize {
                return s.clone();
            }
            let n = l2_normalize(s);
            if n.zero_norm_count > 0 {
                log::warn!("{} zero-norm pixel(s) at {t} set to nodata", n.zero_norm_count);
            }
            n.stack
        };
        Ok(FeatureStore {
            t0: prep(t0, Timestep::T0),
            t1: prep(t1, Timestep::T1),
            normalized: normalize,
        })
    }

    pub fn raster(&self, t: Timestep) -> &RasterStack {
        match t {
            Timestep::T0 => &self.t0,
            Timestep::T1 => &self.t1,
        }
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    /// Sets both epochs' features of every point from the store. A point on
    /// a nodata pixel gets no features for that epoch; points outside either
    /// raster are an error.
    pub fn attach(&self, samples: &SampleSet) -> Result<SampleSet> {
        let mut outside = Vec::new();
        let mut points = Vec::with_capacity(samples.len());
        for p in samples.points() {
            let mut q = p.clone();
            for t in [Timestep::T0, Timestep::T1] {
                let s = self.raster(t);
                match s.transform().pixel_of(p.x, p.y, s.width(), s.height()) {
                    None => {
                        if outside.last() != Some(&p.id) {
                            outside.push(p.id.clone());
                        }
                    }
                    Some((c, r)) => {
                        let idx = s.pixel_index(c, r);
                        let f = (!s.is_nodata(idx))
                            .then(|| s.pixel(idx).into_iter().map(f64::from).collect());
                        q.set_features(t, f);
                    }
                }
            }
            points.push(q);
        }
        if !outside.is_empty() {
            return Err(Error::OutsideExtent(outside));
        }
        SampleSet::new(points, samples.legend().clone())
    }
}

/// Stable/changed partition of a sample set.
#[derive(Debug, Clone)]
pub struct StableSplit {
    /// Stable points, with `label_t1` set to `label_t0`.
    pub stable: SampleSet,
    pub changed: SampleSet,
    /// Points without usable change information.
    pub unknown: Vec<String>,
}

/// Where a split reads its change information from.
#[derive(Debug, Clone, Copy)]
pub enum ChangeInfo<'a> {
    ManualFlags,
    Mask(&'a ChangeMask),
}

pub fn filter_stable(samples: &SampleSet, change: ChangeInfo<'_>) -> Result<StableSplit> {
    let mut stable = Vec::new();
    let mut changed = Vec::new();
    let mut unknown = Vec::new();
    for p in samples.points() {
        let flag = match change {
            ChangeInfo::ManualFlags => p.change_flag,
            ChangeInfo::Mask(mask) => match mask.flag_at(p.x, p.y) {
                MaskFlag::Stable => ChangeFlag::Stable,
                MaskFlag::Changed => ChangeFlag::Changed,
                MaskFlag::Nodata => ChangeFlag::Unknown,
            },
        };
        let mut q = p.clone();
        q.change_flag = flag;
        match flag {
            ChangeFlag::Stable => {
                q.label_t1 = Some(q.label_t0);
                stable.push(q);
            }
            ChangeFlag::Changed => changed.push(q),
            ChangeFlag::Unknown => unknown.push(p.id.clone()),
        }
    }
    if !unknown.is_empty() {
        log::warn!("{} sample(s) without change information excluded", unknown.len());
    }
    Ok(StableSplit {
        stable: SampleSet::new(stable, samples.legend().clone())?,
        changed: SampleSet::new(changed, samples.legend().clone())?,
        unknown,
    })
}

/// Per-class quotas proportional to area, floored at `min_per_class`.
///
/// Quotas are rounded by largest remainder so they sum to `total_target`
/// before the floor is applied; equal remainders favour the later class.
/// The floor is applied afterwards without renormalising, so the sum may
/// exceed the target.
pub fn area_weighted_allocation(
    class_areas: &BTreeMap<u32, usize>,
    total_target: usize,
    min_per_class: usize,
) -> Result<BTreeMap<u32, usize>> {
    if class_areas.is_empty() {
        return Err(Error::InvalidArgument("no classes to allocate".into()));
    }
    if total_target < class_areas.len() {
        return Err(Error::InvalidArgument(format!(
            "total target {total_target} is smaller than the class count {}",
            class_areas.len()
        )));
    }
    let area_sum: u128 = class_areas.values().map(|&a| a as u128).sum();
    if area_sum == 0 {
        return Err(Error::InvalidArgument("all class areas are zero".into()));
    }
    let total = total_target as u128;
    let mut quotas: Vec<(u32, u128, u128)> = class_areas
        .iter()
        .map(|(&c, &a)| {
            let num = total * a as u128;
            (c, num / area_sum, num % area_sum)
        })
        .collect();
    let assigned: u128 = quotas.iter().map(|q| q.1).sum();
    let mut order: Vec<usize> = (0..quotas.len()).collect();
    order.sort_by(|&i, &j| quotas[j].2.cmp(&quotas[i].2).then(j.cmp(&i)));
    for &i in order.iter().take((total - assigned) as usize) {
        quotas[i].1 += 1;
    }
    Ok(quotas
        .into_iter()
        .map(|(c, n, _)| (c, (n as usize).max(min_per_class)))
        .collect())
}

#[derive(Debug, Clone)]
pub struct MapSample {
    /// One point per sampled pixel at its centre, labelled with the map class
    /// at both epochs and flagged stable.
    pub samples: SampleSet,
    /// Allocated minus drawn, for strata that ran out of pixels.
    pub shortfalls: BTreeMap<u32, usize>,
}

/// Uniform sampling without replacement inside each class-and-stable
/// stratum of `class_map`. The mask is consulted through map coordinates,
/// so it may have a different grid.
pub fn stratified_sample_from_map(
    class_map: &ClassMap,
    stable_mask: &ChangeMask,
    allocation: &BTreeMap<u32, usize>,
    seed: u64,
) -> Result<MapSample> {
    let strata = stable_strata(class_map, stable_mask);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::new();
    let mut shortfalls = BTreeMap::new();
    for (&class, &want) in allocation {
        let pixels = strata.get(&class).map(Vec::as_slice).unwrap_or(&[]);
        let take = want.min(pixels.len());
        if take < want {
            log::warn!(
                "class {class}: {} stable pixel(s) available, {want} allocated",
                pixels.len()
            );
            shortfalls.insert(class, want - take);
        }
        let mut chosen: Vec<usize> = index::sample(&mut rng, pixels.len(), take)
            .into_iter()
            .map(|i| pixels[i])
            .collect();
        chosen.sort_unstable();
        for p in chosen {
            let (col, row) = (p % class_map.width, p / class_map.width);
            let (x, y) = class_map.transform.pixel_center(col, row);
            let mut s = SamplePoint::new(format!("map{p}"), x, y, class);
            s.label_t1 = Some(class);
            s.change_flag = ChangeFlag::Stable;
            points.push(s);
        }
    }
    Ok(MapSample {
        samples: SampleSet::new(points, class_map.legend.clone())?,
        shortfalls,
    })
}

/// Pixel indices of each class restricted to stable mask pixels.
fn stable_strata(class_map: &ClassMap, mask: &ChangeMask) -> BTreeMap<u32, Vec<usize>> {
    let same_grid = mask.width == class_map.width
        && mask.height == class_map.height
        && mask.transform == class_map.transform;
    let mut strata: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (p, class) in class_map.classes.iter().enumerate() {
        let Some(class) = class else { continue };
        let flag = if same_grid {
            mask.flags[p]
        } else {
            let (x, y) = class_map
                .transform
                .pixel_center(p % class_map.width, p / class_map.width);
            mask.flag_at(x, y)
        };
        if flag == MaskFlag::Stable {
            strata.entry(*class).or_default().push(p);
        }
    }
    strata
}

#[derive(Debug, Clone)]
pub struct PseudoLabels {
    pub samples: SampleSet,
    /// Ids dropped by the confidence floor.
    pub dropped: Vec<String>,
}

/// Labels changed samples at t1 with `model`'s predictions.
pub fn pseudo_label<M: ProbabilisticClassifier + ?Sized>(
    model: &M,
    changed: &SampleSet,
    confidence_floor: Option<f64>,
) -> Result<PseudoLabels> {
    let mut points = Vec::with_capacity(changed.len());
    let mut dropped = Vec::new();
    for p in changed.points() {
        let f = p
            .features(Timestep::T1)
            .ok_or_else(|| Error::MissingInput(format!("t1 features of sample {:?}", p.id)))?;
        model.check_dim(f.len())?;
        let proba = model.predict_proba_row(f);
        let best = crate::forest::argmax(&proba);
        if confidence_floor.is_some_and(|floor| proba[best] < floor) {
            dropped.push(p.id.clone());
            continue;
        }
        let mut q = p.clone();
        q.label_t1 = Some(model.classes()[best]);
        q.change_flag = ChangeFlag::Changed;
        points.push(q);
    }
    if !dropped.is_empty() {
        log::info!("{} pseudo-label(s) below the confidence floor dropped", dropped.len());
    }
    Ok(PseudoLabels {
        samples: SampleSet::new(points, changed.legend().clone())?,
        dropped,
    })
}

/// Bookkeeping of one training run beyond the bundle itself.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RunLog {
    pub unknown_change: Vec<String>,
    pub pseudo_dropped: Vec<String>,
    pub allocation: Option<BTreeMap<u32, usize>>,
    pub shortfalls: BTreeMap<u32, usize>,
}

#[derive(Debug, Clone)]
pub struct Trained<M> {
    pub model: M,
    pub bundle: TrainingBundle,
    /// Stage-1 model of the two-stage experiments.
    pub stage1: Option<M>,
    pub log: RunLog,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput<M> {
    pub trained: Trained<M>,
    pub t1_map: ClassMap,
}

fn fit_bundle<C: Classifier>(classifier: &C, bundle: &TrainingBundle) -> Result<C::Model> {
    classifier.fit(&bundle.features()?, &bundle.labels)
}

fn change_info<'a>(spec: &ExperimentSpec, mask: Option<&'a ChangeMask>) -> Result<ChangeInfo<'a>> {
    match spec.change_source {
        Some(ChangeSource::ManualFlags) => Ok(ChangeInfo::ManualFlags),
        Some(ChangeSource::Mask) => mask
            .map(ChangeInfo::Mask)
            .ok_or_else(|| Error::MissingInput(format!("experiment {} needs a change mask", spec.experiment))),
        None => Err(Error::InvalidArgument(format!(
            "experiment {} uses no change information",
            spec.experiment
        ))),
    }
}

/// t0 rows plus stable t1 rows carrying their t0 label.
fn stable_union(samples: &SampleSet, split: &StableSplit) -> TrainingBundle {
    let mut b = TrainingBundle::default();
    b.extend(samples, Timestep::T0, |p| p.label_t0, Provenance::T0Reference);
    b.extend(&split.stable, Timestep::T1, |p| p.label_t0, Provenance::T1Stable);
    b
}

/// Fits the experiment's model on `samples` (features taken from `store`)
/// without mapping t1. `mask` is required by mask-based experiments.
pub fn train_experiment<C: Classifier>(
    spec: &ExperimentSpec,
    store: &FeatureStore,
    samples: &SampleSet,
    mask: Option<&ChangeMask>,
    classifier: &C,
) -> Result<Trained<C::Model>> {
    spec.validate()?;
    if store.is_normalized() != spec.normalization {
        return Err(Error::InvalidArgument(
            "feature store preprocessing does not match the experiment spec".into(),
        ));
    }
    let samples = store.attach(samples)?;
    let mut log = RunLog::default();
    let mut bundle = TrainingBundle::default();
    let mut stage1 = None;
    match spec.experiment {
        Experiment::E1Gold => {
            if let Some(p) = samples.points().iter().find(|p| p.label_t1.is_none()) {
                return Err(Error::MissingInput(format!(
                    "the gold standard needs label_t1 on every sample; {:?} has none",
                    p.id
                )));
            }
            bundle.extend(&samples, Timestep::T1, |p| p.label_t1.expect("checked"), Provenance::T1Reference);
        }
        Experiment::E2_1Naive | Experiment::E2_2NaiveNorm => {
            bundle.extend(&samples, Timestep::T0, |p| p.label_t0, Provenance::T0Reference);
        }
        Experiment::E3Wessels => {
            let mask = mask.ok_or_else(|| Error::MissingInput("experiment 3 needs a change mask".into()))?;
            let mut t0 = TrainingBundle::default();
            t0.extend(&samples, Timestep::T0, |p| p.label_t0, Provenance::T0Reference);
            let t0_model = fit_bundle(classifier, &t0)?;
            let t0_map = predict_raster(&t0_model, store.raster(Timestep::T0))?;
            let t0_map = ClassMap { legend: samples.legend().clone(), ..t0_map };
            let areas: BTreeMap<u32, usize> = stable_strata(&t0_map, mask)
                .into_iter()
                .map(|(c, px)| (c, px.len()))
                .collect();
            let stable_total: usize = areas.values().sum();
            if stable_total == 0 {
                return Err(Error::Training("no stable mapped pixels to sample from".into()));
            }
            let target = ((stable_total as f64 * spec.map_sampling.fraction).round() as usize).max(areas.len());
            let alloc = area_weighted_allocation(&areas, target, spec.map_sampling.min_per_class)?;
            let drawn = stratified_sample_from_map(&t0_map, mask, &alloc, spec.seed)?;
            let drawn = store.attach(&drawn.samples).map(|s| (s, drawn.shortfalls))?;
            bundle.extend(&drawn.0, Timestep::T1, |p| p.label_t0, Provenance::MapSample);
            log.allocation = Some(alloc);
            log.shortfalls = drawn.1;
        }
        e if e.is_stable_union() || e.is_ssl() => {
            let split = filter_stable(&samples, change_info(spec, mask)?)?;
            log.unknown_change = split.unknown.clone();
            bundle = stable_union(&samples, &split);
            if e.is_ssl() {
                let first = fit_bundle(classifier, &bundle)?;
                let changed = split.changed.filter(|p| p.features_t1.is_some());
                let pseudo = pseudo_label(&first, &changed, spec.confidence_floor)?;
                bundle.extend(
                    &pseudo.samples,
                    Timestep::T1,
                    |p| p.label_t1.expect("pseudo-labelled"),
                    Provenance::T1Pseudo,
                );
                log.pseudo_dropped = pseudo.dropped;
                stage1 = Some(first);
            }
        }
        _ => unreachable!("all experiments handled"),
    }
    let model = fit_bundle(classifier, &bundle)?;
    Ok(Trained {
        model,
        bundle,
        stage1,
        log,
    })
}

/// Trains the experiment with the spec's forest and maps t1.
pub fn run_experiment(
    spec: &ExperimentSpec,
    samples: &SampleSet,
    t0: &RasterStack,
    t1: &RasterStack,
    mask: Option<&ChangeMask>,
) -> Result<ExperimentOutput<crate::forest::RandomForest>> {
    let store = FeatureStore::new(t0, t1, spec.normalization)?;
    let forest = spec.forest;
    let mut trained = train_experiment(spec, &store, samples, mask, &forest)?;
    trained.model = trained.model.with_legend(samples.legend());
    let t1_map = predict_raster(&trained.model, store.raster(Timestep::T1))?;
    Ok(ExperimentOutput { trained, t1_map })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::{BandSpec, GeoTransform, Legend, MaskProvenance};

    fn areas(v: &[usize]) -> BTreeMap<u32, usize> {
        v.iter().enumerate().map(|(i, &a)| (i as u32, a)).collect()
    }

    fn values(m: &BTreeMap<u32, usize>) -> Vec<usize> {
        m.values().copied().collect()
    }

    #[test]
    fn allocation_examples() {
        let a = area_weighted_allocation(&areas(&[70, 20, 10]), 1000, 0).unwrap();
        assert_eq!(values(&a), vec![700, 200, 100]);
        let a = area_weighted_allocation(&areas(&[90, 5, 5]), 1000, 100).unwrap();
        assert_eq!(values(&a), vec![900, 100, 100]);
        assert_eq!(a.values().sum::<usize>(), 1100);
        let a = area_weighted_allocation(&areas(&[7, 7, 7]), 1000, 0).unwrap();
        assert_eq!(values(&a), vec![333, 333, 334]);
        assert!(area_weighted_allocation(&areas(&[1, 1, 1]), 2, 0).is_err());
        let a = area_weighted_allocation(&areas(&[10, 0]), 10, 3).unwrap();
        assert_eq!(values(&a), vec![10, 3]);
    }

    #[test]
    fn experiment_codes_round_trip() {
        for e in Experiment::ALL {
            assert_eq!(e.code().parse::<Experiment>().unwrap(), e);
            let json = serde_json::to_string(&e).unwrap();
            assert_eq!(serde_json::from_str::<Experiment>(&json).unwrap(), e);
        }
        assert_eq!("E5.2".parse::<Experiment>().unwrap(), Experiment::E5_2SslAuto);
        assert!("6".parse::<Experiment>().is_err());
    }

    fn legend() -> Legend {
        (0..3).map(|i| (i, format!("c{i}"))).collect()
    }

    fn grid_mask(w: usize, h: usize, changed: &[usize], nodata: &[usize]) -> ChangeMask {
        let mut flags = vec![MaskFlag::Stable; w * h];
        for &i in changed {
            flags[i] = MaskFlag::Changed;
        }
        for &i in nodata {
            flags[i] = MaskFlag::Nodata;
        }
        ChangeMask::new(w, h, GeoTransform::identity(), flags, MaskProvenance::Manual, None).unwrap()
    }

    fn row_points(n: usize) -> SampleSet {
        let pts = (0..n)
            .map(|i| SamplePoint::new(format!("p{i}"), i as f64 + 0.5, 0.5, (i % 3) as u32))
            .collect();
        SampleSet::new(pts, legend()).unwrap()
    }

    #[test]
    fn split_by_mask() {
        let set = row_points(10);
        let split = filter_stable(&set, ChangeInfo::Mask(&grid_mask(10, 1, &[1, 4, 7], &[]))).unwrap();
        assert_eq!((split.stable.len(), split.changed.len()), (7, 3));
        assert!(split.stable.points().iter().all(|p| p.label_t1 == Some(p.label_t0)));

        let split = filter_stable(&set, ChangeInfo::Mask(&grid_mask(10, 1, &[], &[2]))).unwrap();
        assert_eq!(split.unknown, vec!["p2".to_string()]);
        assert!(split.changed.is_empty());
        assert_eq!(split.stable.len(), 9);
    }

    #[test]
    fn split_by_manual_flags() {
        let set = row_points(4)
            .map_points(|mut p| {
                p.change_flag = match p.id.as_str() {
                    "p0" => ChangeFlag::Changed,
                    "p1" => ChangeFlag::Unknown,
                    _ => ChangeFlag::Stable,
                };
                p
            })
            .unwrap();
        let split = filter_stable(&set, ChangeInfo::ManualFlags).unwrap();
        assert_eq!(split.changed.points()[0].id, "p0");
        assert_eq!(split.unknown, vec!["p1".to_string()]);
        assert_eq!(split.stable.len(), 2);
    }

    fn class_map(classes: Vec<Option<u32>>, w: usize) -> ClassMap {
        let h = classes.len() / w;
        ClassMap::new(w, h, GeoTransform::identity(), classes, legend()).unwrap()
    }

    #[test]
    fn map_sampling_shortfall_and_determinism() {
        let map = class_map((0..100).map(|i| Some(if i < 50 { 0 } else { 1 })).collect(), 10);
        let mask = grid_mask(10, 10, &[], &[]);
        let alloc: BTreeMap<u32, usize> = [(0, 80), (1, 10)].into();
        let a = stratified_sample_from_map(&map, &mask, &alloc, 3).unwrap();
        assert_eq!(a.shortfalls, [(0, 30)].into());
        assert_eq!(a.samples.len(), 60);
        let b = stratified_sample_from_map(&map, &mask, &alloc, 3).unwrap();
        assert_eq!(a.samples, b.samples);
        for p in a.samples.points() {
            assert_eq!(map.class_at(p.x, p.y), Some(p.label_t0));
        }
    }

    #[test]
    fn map_sampling_respects_mask() {
        let map = class_map(vec![Some(0); 16], 4);
        let changed: Vec<usize> = (0..8).collect();
        let mask = grid_mask(4, 4, &changed, &[]);
        let s = stratified_sample_from_map(&map, &mask, &[(0, 16)].into(), 1).unwrap();
        assert_eq!(s.samples.len(), 8);
        assert!(s.samples.points().iter().all(|p| mask.flag_at(p.x, p.y) == MaskFlag::Stable));
    }

    #[test]
    fn bundle_csv_layout() {
        let mut b = TrainingBundle::default();
        b.push("a@t0".into(), (0.0, 0.0), &[1.0], 2, Provenance::T0Reference);
        b.push("b@t1".into(), (0.0, 0.0), &[1.0], 1, Provenance::T1Pseudo);
        assert_eq!(
            b.to_csv().unwrap(),
            "row_id,provenance,label,weight\na@t0,t0_reference,2,1\nb@t1,t1_pseudo,1,1\n"
        );
    }

    #[test]
    fn spec_validation() {
        let mut spec = ExperimentSpec::new(Experiment::E4_2StableAuto, 1);
        assert!(spec.validate().is_ok());
        spec.change_source = Some(ChangeSource::ManualFlags);
        assert!(spec.validate().is_err());
        let mut spec = ExperimentSpec::new(Experiment::E3Wessels, 1);
        spec.map_sampling.fraction = 0.0;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn attach_reads_both_epochs() {
        let bands = vec![BandSpec::named("a")];
        let t0 = RasterStack::new(2, 1, bands.clone(), vec![1.0, f32::NAN], GeoTransform::identity()).unwrap();
        let t1 = RasterStack::new(2, 1, bands, vec![3.0, 4.0], GeoTransform::identity()).unwrap();
        let store = FeatureStore::new(&t0, &t1, false).unwrap();
        let set = row_points(2);
        let out = store.attach(&set).unwrap();
        assert_eq!(out.points()[0].features_t0, Some(vec![1.0]));
        assert_eq!(out.points()[1].features_t0, None);
        assert_eq!(out.points()[1].features_t1, Some(vec![4.0]));
        assert!(matches!(store.attach(&row_points(3)), Err(Error::OutsideExtent(ids)) if ids == vec!["p2"]));
    }
}
