//! Leave-location-and-time-out cross-validation, the proximity-filtered
//! single pass used for map-sampled training, metrics and fraction sweeps.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;
use std::time::Instant;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forest::{Classifier, FeatureMatrix, ProbabilisticClassifier};
use crate::fsio::write_atomic;
use crate::migration::{row_id, train_experiment, Experiment, ExperimentSpec, FeatureStore};
use crate::raster::{ChangeMask, Legend, RasterStack};
use crate::samples::{SampleSet, Timestep};

pub const KMEANS_RESTARTS: usize = 10;
pub const KMEANS_MAX_ITER: usize = 300;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub k: usize,
    pub folds: Vec<usize>,
    pub centroids: Vec<(f64, f64)>,
    pub seed: u64,
    pub inertia: f64,
    /// Inertia after every assignment step, per restart.
    pub inertia_history: Vec<Vec<f64>>,
}

impl FoldAssignment {
    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.k];
        for &f in &self.folds {
            s[f] += 1;
        }
        s
    }
}

fn sq_dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (a.0 - b.0, a.1 - b.1);
    dx * dx + dy * dy
}

/// Nearest centroid; ties go to the lowest index.
fn nearest(p: (f64, f64), centroids: &[(f64, f64)]) -> (usize, f64) {
    let mut best = (0, sq_dist(p, centroids[0]));
    for (i, c) in centroids.iter().enumerate().skip(1) {
        let d = sq_dist(p, *c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

fn plus_plus_init(coords: &[(f64, f64)], k: usize, rng: &mut ChaCha8Rng) -> Vec<(f64, f64)> {
    let mut centroids = vec![coords[rng.random_range(0..coords.len())]];
    let mut d2: Vec<f64> = coords.iter().map(|&p| sq_dist(p, centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let mut u = rng.random::<f64>() * total;
        let mut pick = d2.iter().rposition(|&d| d > 0.0).expect("distinct points remain");
        for (i, &d) in d2.iter().enumerate() {
            if d > 0.0 && u < d {
                pick = i;
                break;
            }
            u -= d;
        }
        let c = coords[pick];
        centroids.push(c);
        for (d, &p) in d2.iter_mut().zip(coords) {
            *d = d.min(sq_dist(p, c));
        }
    }
    centroids
}

struct Run {
    assignment: Vec<usize>,
    centroids: Vec<(f64, f64)>,
    inertia: f64,
    history: Vec<f64>,
}

fn lloyd(coords: &[(f64, f64)], mut centroids: Vec<(f64, f64)>) -> Run {
    let k = centroids.len();
    let mut assignment: Vec<usize> = Vec::new();
    let mut history = Vec::new();
    for iter in 0..KMEANS_MAX_ITER {
        let (next, inertia): (Vec<usize>, f64) = {
            let mut total = 0.0;
            let a = coords
                .iter()
                .map(|&p| {
                    let (i, d) = nearest(p, &centroids);
                    total += d;
                    i
                })
                .collect();
            (a, total)
        };
        history.push(inertia);
        let stable = next == assignment;
        assignment = next;
        if stable || iter + 1 == KMEANS_MAX_ITER {
            break;
        }
        let mut sums = vec![(0.0, 0.0, 0usize); k];
        for (&p, &a) in coords.iter().zip(&assignment) {
            sums[a].0 += p.0;
            sums[a].1 += p.1;
            sums[a].2 += 1;
        }
        for (c, s) in centroids.iter_mut().zip(&sums) {
            if s.2 > 0 {
                *c = (s.0 / s.2 as f64, s.1 / s.2 as f64);
            }
        }
    }
    Run {
        inertia: *history.last().expect("one iteration"),
        assignment,
        centroids,
        history,
    }
}

/// Spatial folds from k-means++ / Lloyd on point coordinates; the restart
/// with the lowest inertia wins (earliest on ties).
pub fn kmeans_folds(coords: &[(f64, f64)], k: usize, seed: u64) -> Result<FoldAssignment> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be positive".into()));
    }
    let distinct: HashSet<(u64, u64)> = coords.iter().map(|p| (p.0.to_bits(), p.1.to_bits())).collect();
    if distinct.len() < k {
        return Err(Error::TooFewDistinctPoints {
            distinct: distinct.len(),
            k,
        });
    }
    let runs: Vec<Run> = (0..KMEANS_RESTARTS)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(r as u64);
            lloyd(coords, plus_plus_init(coords, k, &mut rng))
        })
        .collect();
    let inertia_history = runs.iter().map(|r| r.history.clone()).collect();
    let best = runs
        .into_iter()
        .reduce(|a, b| if b.inertia < a.inertia { b } else { a })
        .expect("restarts > 0");
    Ok(FoldAssignment {
        k,
        folds: best.assignment,
        centroids: best.centroids,
        seed,
        inertia: best.inertia,
        inertia_history,
    })
}

#[derive(Debug, Clone)]
pub struct LltoSplit {
    /// Points of the other folds; both epochs may be used.
    pub train: SampleSet,
    /// Points of the test fold, evaluated at t1 only.
    pub test: SampleSet,
    /// Test-fold t0 rows, which appear in neither set.
    pub discarded_t0: Vec<String>,
}

pub fn llto_split(samples: &SampleSet, folds: &FoldAssignment, test_fold: usize) -> Result<LltoSplit> {
    if folds.folds.len() != samples.len() {
        return Err(Error::DimensionMismatch {
            expected: samples.len(),
            got: folds.folds.len(),
        });
    }
    let mut fold_of = folds.folds.iter();
    let in_test: Vec<bool> = samples
        .points()
        .iter()
        .map(|_| *fold_of.next().expect("lengths checked") == test_fold)
        .collect();
    if !in_test.iter().any(|&t| t) {
        return Err(Error::EmptyFold(test_fold));
    }
    let mut i = 0;
    let train = samples.filter(|_| {
        i += 1;
        !in_test[i - 1]
    });
    let mut i = 0;
    let test = samples.filter(|_| {
        i += 1;
        in_test[i - 1]
    });
    let test = test.map_points(|mut p| {
        p.features_t0 = None;
        p
    })?;
    let discarded_t0 = test.points().iter().map(|p| row_id(&p.id, Timestep::T0)).collect();
    Ok(LltoSplit {
        train,
        test,
        discarded_t0,
    })
}

/// Drops validation points closer than `radius` to any training location.
/// Points exactly at `radius` are kept.
pub fn proximity_filter(validation: &SampleSet, training: &[(f64, f64)], radius: f64) -> SampleSet {
    let r2 = radius * radius;
    validation.filter(|p| training.iter().all(|&t| sq_dist((p.x, p.y), t) >= r2))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Legend class ids; confusion rows are truth, columns prediction.
    pub classes: Vec<u32>,
    pub confusion: Vec<Vec<u64>>,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class_f1: BTreeMap<u32, f64>,
    pub support: BTreeMap<u32, u64>,
}

/// Confusion matrix, overall accuracy and macro-F1 over the classes present
/// in `truth`.
pub fn metrics(truth: &[u32], predicted: &[u32], legend: &Legend) -> Result<Metrics> {
    if truth.len() != predicted.len() {
        return Err(Error::DimensionMismatch {
            expected: truth.len(),
            got: predicted.len(),
        });
    }
    if truth.is_empty() {
        return Err(Error::InvalidArgument("metrics need at least one sample".into()));
    }
    let classes: Vec<u32> = legend.keys().copied().collect();
    let pos = |c: u32| {
        classes
            .binary_search(&c)
            .map_err(|_| Error::InvalidArgument(format!("label {c} is not in the legend")))
    };
    let n = classes.len();
    let mut confusion = vec![vec![0u64; n]; n];
    for (&t, &p) in truth.iter().zip(predicted) {
        confusion[pos(t)?][pos(p)?] += 1;
    }
    let correct: u64 = (0..n).map(|i| confusion[i][i]).sum();
    let mut per_class_f1 = BTreeMap::new();
    let mut support = BTreeMap::new();
    let mut f1_sum = 0.0;
    let mut present = 0;
    for (i, &c) in classes.iter().enumerate() {
        let tp = confusion[i][i];
        let row: u64 = confusion[i].iter().sum();
        let col: u64 = confusion.iter().map(|r| r[i]).sum();
        let denom = row + col;
        let f1 = if tp == 0 { 0.0 } else { 2.0 * tp as f64 / denom as f64 };
        per_class_f1.insert(c, f1);
        support.insert(c, row);
        if row > 0 {
            f1_sum += f1;
            present += 1;
        }
    }
    Ok(Metrics {
        classes,
        confusion,
        accuracy: correct as f64 / truth.len() as f64,
        macro_f1: f1_sum / present as f64,
        per_class_f1,
        support,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldRecord {
    pub fold: usize,
    pub n_train_rows: usize,
    pub n_test: usize,
    pub confusion: Vec<Vec<u64>>,
    pub classes: Vec<u32>,
    pub macro_f1: f64,
    pub accuracy: f64,
    pub support: BTreeMap<u32, u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub macro_f1: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub spec: ExperimentSpec,
    pub seed: u64,
    pub k: usize,
    pub fold_sizes: Vec<usize>,
    pub folds: Vec<FoldRecord>,
    pub mean: Summary,
    /// Population standard deviation across folds; absent for single-pass
    /// evaluations.
    pub std: Option<Summary>,
}

impl EvalReport {
    fn assemble(spec: &ExperimentSpec, seed: u64, k: usize, fold_sizes: Vec<usize>, folds: Vec<FoldRecord>) -> Self {
        let n = folds.len() as f64;
        let mean = Summary {
            macro_f1: folds.iter().map(|f| f.macro_f1).sum::<f64>() / n,
            accuracy: folds.iter().map(|f| f.accuracy).sum::<f64>() / n,
        };
        let std = (folds.len() > 1).then(|| {
            let sd = |get: fn(&FoldRecord) -> f64, m: f64| {
                (folds.iter().map(|f| (get(f) - m).powi(2)).sum::<f64>() / n).sqrt()
            };
            Summary {
                macro_f1: sd(|f| f.macro_f1, mean.macro_f1),
                accuracy: sd(|f| f.accuracy, mean.accuracy),
            }
        });
        EvalReport {
            spec: spec.clone(),
            seed,
            k,
            fold_sizes,
            folds,
            mean,
            std,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), self.to_json().as_bytes())
    }

    /// One row per fold: `fold,n_test,macro_f1,accuracy`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("fold,n_test,macro_f1,accuracy\n");
        for f in &self.folds {
            out.push_str(&format!("{},{},{},{}\n", f.fold, f.n_test, f.macro_f1, f.accuracy));
        }
        out
    }
}

/// What one fold trained on and tested on, for leakage audits.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldAudit {
    pub fold: usize,
    pub train_row_ids: Vec<String>,
    pub train_coords: Vec<(f64, f64)>,
    pub test_ids: Vec<String>,
    pub test_coords: Vec<(f64, f64)>,
    pub discarded_t0: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Leakage {
    /// Test locations that also occur among training rows.
    pub coordinate_overlaps: usize,
    /// Test-fold t0 rows found among training or test rows.
    pub t0_occurrences: usize,
}

impl FoldAudit {
    pub fn leakage(&self) -> Leakage {
        let key = |p: &(f64, f64)| (p.0.to_bits(), p.1.to_bits());
        let train: HashSet<_> = self.train_coords.iter().map(key).collect();
        let rows: HashSet<&str> = self.train_row_ids.iter().map(String::as_str).collect();
        let test_rows: HashSet<String> = self.test_ids.iter().map(|id| row_id(id, Timestep::T1)).collect();
        Leakage {
            coordinate_overlaps: self.test_coords.iter().filter(|p| train.contains(&key(p))).count(),
            t0_occurrences: self
                .discarded_t0
                .iter()
                .filter(|id| rows.contains(id.as_str()) || test_rows.contains(id.as_str()))
                .count(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CvOptions {
    pub k: usize,
    pub seed: u64,
    /// Validation points closer than this to a map sample are dropped.
    pub proximity_radius: f64,
}

impl CvOptions {
    pub fn new(k: usize, seed: u64) -> Self {
        CvOptions {
            k,
            seed,
            proximity_radius: 100.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CvRun {
    pub report: EvalReport,
    pub audits: Vec<FoldAudit>,
    pub folds: Option<FoldAssignment>,
}

fn evaluate<M: ProbabilisticClassifier>(
    model: &M,
    store: &FeatureStore,
    test: &SampleSet,
) -> Result<(Metrics, SampleSet)> {
    let test = store.attach(test)?;
    let usable = test.filter(|p| p.features_t1.is_some());
    if usable.len() < test.len() {
        log::warn!("{} test point(s) on t1 nodata skipped", test.len() - usable.len());
    }
    let mut truth = Vec::with_capacity(usable.len());
    let mut rows = Vec::with_capacity(usable.len());
    for p in usable.points() {
        truth.push(p.label_t1.ok_or_else(|| {
            Error::MissingInput(format!("evaluation needs label_t1 on test sample {:?}", p.id))
        })?);
        rows.push(p.features_t1.clone().expect("filtered"));
    }
    if rows.is_empty() {
        return Err(Error::Training("no usable test points".into()));
    }
    let pred = model.predict(&FeatureMatrix::from_rows(&rows)?)?;
    Ok((metrics(&truth, &pred, usable.legend())?, usable))
}

/// Cross-validates `spec` with the spec's own forest configuration.
pub fn cross_validate(
    spec: &ExperimentSpec,
    samples: &SampleSet,
    t0: &RasterStack,
    t1: &RasterStack,
    mask: Option<&ChangeMask>,
    opts: &CvOptions,
) -> Result<CvRun> {
    cross_validate_with(spec, samples, t0, t1, mask, opts, &spec.forest)
}

/// k-fold LLTO cross-validation. Map-sampled training (experiment 3) is
/// instead evaluated once on all t1 reference points that lie at least
/// `proximity_radius` from every training location.
pub fn cross_validate_with<C: Classifier + Sync>(
    spec: &ExperimentSpec,
    samples: &SampleSet,
    t0: &RasterStack,
    t1: &RasterStack,
    mask: Option<&ChangeMask>,
    opts: &CvOptions,
    classifier: &C,
) -> Result<CvRun>
where
    C::Model: Send,
{
    let store = FeatureStore::new(t0, t1, spec.normalization)?;
    if spec.experiment == Experiment::E3Wessels {
        let trained = train_experiment(spec, &store, samples, mask, classifier)?;
        let validation = proximity_filter(samples, &trained.bundle.coords, opts.proximity_radius);
        log::info!(
            "proximity filter kept {} of {} validation points",
            validation.len(),
            samples.len()
        );
        let (m, used) = evaluate(&trained.model, &store, &validation)?;
        let record = FoldRecord {
            fold: 0,
            n_train_rows: trained.bundle.len(),
            n_test: used.len(),
            confusion: m.confusion,
            classes: m.classes,
            macro_f1: m.macro_f1,
            accuracy: m.accuracy,
            support: m.support,
        };
        let report = EvalReport::assemble(spec, opts.seed, 1, vec![used.len()], vec![record]);
        return Ok(CvRun {
            report,
            audits: Vec::new(),
            folds: None,
        });
    }
    let coords: Vec<(f64, f64)> = samples.points().iter().map(|p| (p.x, p.y)).collect();
    let folds = kmeans_folds(&coords, opts.k, opts.seed)?;
    let results: Vec<(FoldRecord, FoldAudit)> = (0..opts.k)
        .into_par_iter()
        .map(|f| {
            let split = llto_split(samples, &folds, f)?;
            let trained = train_experiment(spec, &store, &split.train, mask, classifier)?;
            let (m, used) = evaluate(&trained.model, &store, &split.test)?;
            let audit = FoldAudit {
                fold: f,
                train_row_ids: trained.bundle.row_ids.clone(),
                train_coords: trained.bundle.coords.clone(),
                test_ids: used.points().iter().map(|p| p.id.clone()).collect(),
                test_coords: used.points().iter().map(|p| (p.x, p.y)).collect(),
                discarded_t0: split.discarded_t0,
            };
            let record = FoldRecord {
                fold: f,
                n_train_rows: trained.bundle.len(),
                n_test: used.len(),
                confusion: m.confusion,
                classes: m.classes,
                macro_f1: m.macro_f1,
                accuracy: m.accuracy,
                support: m.support,
            };
            Ok((record, audit))
        })
        .collect::<Result<_>>()?;
    let (records, audits): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    let report = EvalReport::assemble(spec, opts.seed, opts.k, folds.sizes(), records);
    Ok(CvRun {
        report,
        audits,
        folds: Some(folds),
    })
}

/// Class-stratified subsample keeping `round(fraction * n_c)` points of each
/// t0 class, in original order. Classes rounded to zero are dropped.
pub fn stratified_subsample(samples: &SampleSet, fraction: f64, seed: u64) -> Result<SampleSet> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "fraction {fraction} must lie in (0, 1]"
        )));
    }
    let mut by_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, p) in samples.points().iter().enumerate() {
        by_class.entry(p.label_t0).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fraction.to_bits());
    let mut keep = vec![false; samples.len()];
    for (class, idx) in &by_class {
        let take = (fraction * idx.len() as f64).round() as usize;
        if take == 0 {
            log::warn!("class {class} has no samples left at fraction {fraction}; dropped");
        }
        for j in index::sample(&mut rng, idx.len(), take) {
            keep[idx[j]] = true;
        }
    }
    let mut i = 0;
    Ok(samples.filter(|_| {
        i += 1;
        keep[i - 1]
    }))
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepPoint {
    pub fraction: f64,
    pub n_samples: usize,
    pub class_counts: BTreeMap<u32, usize>,
    pub report: EvalReport,
    pub gold: EvalReport,
    /// Mean macro-F1 of the experiment minus that of the gold standard.
    pub delta_macro_f1: f64,
    pub wall_clock_s: f64,
}

/// Repeats cross-validation on class-stratified subsamples, pairing every
/// run with a gold-standard run on the same subsample.
#[allow(clippy::too_many_arguments)]
pub fn fraction_sweep(
    spec: &ExperimentSpec,
    samples: &SampleSet,
    t0: &RasterStack,
    t1: &RasterStack,
    mask: Option<&ChangeMask>,
    fractions: &[f64],
    opts: &CvOptions,
) -> Result<Vec<SweepPoint>> {
    let mut gold_spec = ExperimentSpec::new(Experiment::E1Gold, spec.seed);
    gold_spec.forest = spec.forest;
    fractions
        .iter()
        .map(|&fraction| {
            let start = Instant::now();
            let sub = stratified_subsample(samples, fraction, opts.seed)?;
            let report = cross_validate(spec, &sub, t0, t1, mask, opts)?.report;
            let gold = if spec.experiment == Experiment::E1Gold {
                report.clone()
            } else {
                cross_validate(&gold_spec, &sub, t0, t1, mask, opts)?.report
            };
            let mut class_counts = BTreeMap::new();
            for p in sub.points() {
                *class_counts.entry(p.label_t0).or_insert(0) += 1;
            }
            Ok(SweepPoint {
                fraction,
                n_samples: sub.len(),
                class_counts,
                delta_macro_f1: report.mean.macro_f1 - gold.mean.macro_f1,
                report,
                gold,
                wall_clock_s: start.elapsed().as_secs_f64(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::samples::SamplePoint;

    fn legend2() -> Legend {
        [(0, "A".to_string()), (1, "B".to_string())].into()
    }

    #[test]
    fn hand_computed_metrics() {
        let m = metrics(&[0, 0, 1, 1], &[0, 1, 1, 1], &legend2()).unwrap();
        assert_eq!(m.confusion, vec![vec![1, 1], vec![0, 2]]);
        assert_eq!(m.accuracy, 0.75);
        assert!((m.per_class_f1[&0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((m.per_class_f1[&1] - 0.8).abs() < 1e-15);
        assert!((m.macro_f1 - 11.0 / 15.0).abs() < 1e-15);
    }

    #[test]
    fn zero_support_classes_are_ignored() {
        let m = metrics(&[0, 0, 0], &[0, 0, 0], &legend2()).unwrap();
        assert_eq!(m.macro_f1, 1.0);
        assert_eq!(m.accuracy, 1.0);
        assert!(metrics(&[0], &[7], &legend2()).is_err());
        assert!(metrics(&[], &[], &legend2()).is_err());
    }

    fn clusters() -> Vec<(f64, f64)> {
        let centres = [(0.0, 0.0), (1000.0, 0.0), (0.0, 1000.0), (1000.0, 1000.0)];
        let mut out = Vec::new();
        for (i, c) in centres.iter().enumerate() {
            for j in 0..10 {
                out.push((c.0 + (j % 3) as f64, c.1 + (j / 3) as f64 + i as f64 * 0.1));
            }
        }
        out
    }

    #[test]
    fn planted_clusters_become_folds() {
        let pts = clusters();
        let f = kmeans_folds(&pts, 4, 3).unwrap();
        for c in 0..4 {
            let ids: HashSet<usize> = f.folds[c * 10..(c + 1) * 10].iter().copied().collect();
            assert_eq!(ids.len(), 1);
        }
        let distinct: HashSet<usize> = f.folds.iter().copied().collect();
        assert_eq!(distinct.len(), 4);
        assert_eq!(f, kmeans_folds(&pts, 4, 3).unwrap());
        assert!(kmeans_folds(&pts, 1, 0).unwrap().folds.iter().all(|&x| x == 0));
        assert!(matches!(
            kmeans_folds(&[(0.0, 0.0), (0.0, 0.0)], 2, 0),
            Err(Error::TooFewDistinctPoints { distinct: 1, k: 2 })
        ));
    }

    #[test]
    fn folds_follow_nearest_centroid() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts: Vec<(f64, f64)> = (0..300)
            .map(|_| (rng.random_range(0.0..5000.0), rng.random_range(0.0..5000.0)))
            .collect();
        let f = kmeans_folds(&pts, 5, 11).unwrap();
        for (p, fold) in pts.iter().zip(&f.folds) {
            assert_eq!(nearest(*p, &f.centroids).0, *fold);
        }
        for h in &f.inertia_history {
            for w in h.windows(2) {
                assert!(w[1] <= w[0] * (1.0 + 1e-12));
            }
        }
    }

    fn set(points: &[(&str, f64, f64)]) -> SampleSet {
        let pts = points
            .iter()
            .map(|(id, x, y)| SamplePoint::new(*id, *x, *y, 0))
            .collect();
        SampleSet::new(pts, legend2()).unwrap()
    }

    #[test]
    fn proximity_boundary() {
        let v = set(&[("in", 0.0, 99.0), ("edge", 0.0, 100.0), ("far", 500.0, 0.0)]);
        let kept = proximity_filter(&v, &[(0.0, 0.0)], 100.0);
        let ids: Vec<&str> = kept.points().iter().map(|p| p.id.as_str()).collect();
        assert_eq!(ids, vec!["edge", "far"]);
    }

    #[test]
    fn llto_two_folds() {
        let s = set(&[("A", 0.0, 0.0), ("B", 10.0, 0.0)]);
        let folds = FoldAssignment {
            k: 2,
            folds: vec![0, 1],
            centroids: vec![(0.0, 0.0), (10.0, 0.0)],
            seed: 0,
            inertia: 0.0,
            inertia_history: vec![],
        };
        let split = llto_split(&s, &folds, 1).unwrap();
        assert_eq!(split.train.points()[0].id, "A");
        assert_eq!(split.test.points()[0].id, "B");
        assert_eq!(split.discarded_t0, vec!["B@t0".to_string()]);
        let empty = FoldAssignment {
            folds: vec![0, 0],
            ..folds
        };
        assert!(matches!(llto_split(&s, &empty, 1), Err(Error::EmptyFold(1))));
    }

    #[test]
    fn stratified_fraction_arithmetic() {
        let pts = (0..100)
            .map(|i| SamplePoint::new(format!("p{i}"), i as f64, 0.0, (i % 2) as u32))
            .collect();
        let s = SampleSet::new(pts, legend2()).unwrap();
        let half = stratified_subsample(&s, 0.5, 1).unwrap();
        assert_eq!(half.points().iter().filter(|p| p.label_t0 == 0).count(), 25);
        assert_eq!(half.points().iter().filter(|p| p.label_t0 == 1).count(), 25);
        assert_eq!(stratified_subsample(&s, 1.0, 1).unwrap(), s);
        assert_eq!(half, stratified_subsample(&s, 0.5, 1).unwrap());
    }

    #[test]
    fn report_std_is_population() {
        let rec = |f1: f64| FoldRecord {
            fold: 0,
            n_train_rows: 1,
            n_test: 1,
            confusion: vec![],
            classes: vec![],
            macro_f1: f1,
            accuracy: f1,
            support: BTreeMap::new(),
        };
        let spec = ExperimentSpec::new(Experiment::E2_1Naive, 0);
        let r = EvalReport::assemble(&spec, 0, 2, vec![1, 1], vec![rec(0.5), rec(0.7)]);
        assert!((r.mean.macro_f1 - 0.6).abs() < 1e-12);
        assert!((r.std.unwrap().macro_f1 - 0.1).abs() < 1e-12);
        let single = EvalReport::assemble(&spec, 0, 1, vec![1], vec![rec(0.5)]);
        assert!(single.std.is_none());
    }
}
