//! Classifier contract and the built-in random forest.

mod model_io;
mod tree;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{ClassMap, Legend, RasterStack};

pub use model_io::{read_model, write_model, MODEL_MAGIC, MODEL_VERSION};
use tree::Tree;

/// Dense row-major feature matrix.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeatureMatrix {
    n_rows: usize,
    dim: usize,
    data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || !data.len().is_multiple_of(dim) {
            return Err(Error::InvalidArgument(format!(
                "feature data of length {} is not a multiple of dimension {dim}",
                data.len()
            )));
        }
        Ok(FeatureMatrix {
            n_rows: data.len() / dim,
            dim,
            data,
        })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let dim = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            let r = r.as_ref();
            if r.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        FeatureMatrix::new(dim, data)
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    #[inline]
    pub(crate) fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.dim + col]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }
}

/// Anything that can be fitted to labelled features.
pub trait Classifier {
    type Model: ProbabilisticClassifier;

    fn fit(&self, features: &FeatureMatrix, labels: &[u32]) -> Result<Self::Model>;
}

/// A fitted model producing class scores.
pub trait ProbabilisticClassifier: Sync {
    /// Sorted class ids; probability columns follow this order.
    fn classes(&self) -> &[u32];

    fn n_features(&self) -> usize;

    fn predict_proba_row(&self, row: &[f64]) -> Vec<f64>;

    fn check_dim(&self, got: usize) -> Result<()> {
        if got != self.n_features() {
            return Err(Error::DimensionMismatch {
                expected: self.n_features(),
                got,
            });
        }
        Ok(())
    }

    fn predict_proba(&self, features: &FeatureMatrix) -> Result<Vec<Vec<f64>>> {
        self.check_dim(features.dim())?;
        Ok((0..features.n_rows())
            .into_par_iter()
            .map(|i| self.predict_proba_row(features.row(i)))
            .collect())
    }

    fn predict_row(&self, row: &[f64]) -> u32 {
        self.classes()[argmax(&self.predict_proba_row(row))]
    }

    fn predict(&self, features: &FeatureMatrix) -> Result<Vec<u32>> {
        self.check_dim(features.dim())?;
        Ok((0..features.n_rows())
            .into_par_iter()
            .map(|i| self.predict_row(features.row(i)))
            .collect())
    }

    fn legend(&self) -> Legend {
        self.classes()
            .iter()
            .map(|c| (*c, format!("class {c}")))
            .collect()
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MaxFeatures {
    #[serde(with = "sqrt_tag")]
    Sqrt,
    Count(usize),
}

mod sqrt_tag {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str("sqrt")
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<(), D::Error> {
        let s = String::deserialize(d)?;
        if s == "sqrt" {
            Ok(())
        } else {
            Err(serde::de::Error::custom(format!("expected \"sqrt\", got {s:?}")))
        }
    }
}

impl MaxFeatures {
    pub fn resolve(&self, dim: usize) -> Result<usize> {
        match *self {
            MaxFeatures::Sqrt => Ok(((dim as f64).sqrt().floor() as usize).max(1)),
            MaxFeatures::Count(k) if k >= 1 && k <= dim => Ok(k),
            MaxFeatures::Count(k) => Err(Error::InvalidArgument(format!(
                "max_features {k} must lie in 1..={dim}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForestConfig {
    pub n_trees: usize,
    pub max_features: MaxFeatures,
    pub min_samples_leaf: usize,
    pub max_depth: Option<usize>,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        ForestConfig {
            n_trees: 100,
            max_features: MaxFeatures::Sqrt,
            min_samples_leaf: 1,
            max_depth: None,
            seed: 0,
        }
    }
}

impl ForestConfig {
    pub fn with_seed(seed: u64) -> Self {
        ForestConfig {
            seed,
            ..Default::default()
        }
    }
}

/// Fitted random forest.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomForest {
    config: ForestConfig,
    classes: Vec<u32>,
    n_features: usize,
    n_samples: usize,
    trees: Vec<Tree>,
    legend: Legend,
}

/// Per-tree random stream: the root seed with the tree index as stream id.
pub(crate) fn tree_rng(seed: u64, tree: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tree as u64);
    rng
}

impl Classifier for ForestConfig {
    type Model = RandomForest;

    fn fit(&self, features: &FeatureMatrix, labels: &[u32]) -> Result<RandomForest> {
        fit(features, labels, self)
    }
}

/// Bagged CART trees with Gini splits and per-node feature subsampling.
pub fn fit(features: &FeatureMatrix, labels: &[u32], config: &ForestConfig) -> Result<RandomForest> {
    let n = features.n_rows();
    if labels.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: labels.len(),
        });
    }
    if n < 2 {
        return Err(Error::Training(format!("need at least 2 samples, got {n}")));
    }
    if config.n_trees == 0 || config.min_samples_leaf == 0 || config.max_depth == Some(0) {
        return Err(Error::InvalidArgument(
            "n_trees, min_samples_leaf and max_depth must be positive".into(),
        ));
    }
    let nan_rows: Vec<usize> = (0..n)
        .filter(|&i| features.row(i).iter().any(|v| !v.is_finite()))
        .collect();
    if !nan_rows.is_empty() {
        return Err(Error::NanFeatures { rows: nan_rows });
    }
    let mut classes: Vec<u32> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::Training(format!(
            "need at least two distinct classes, got {classes:?}"
        )));
    }
    let mtry = config.max_features.resolve(features.dim())?;
    let y: Vec<u32> = labels
        .iter()
        .map(|l| classes.binary_search(l).expect("label is a class") as u32)
        .collect();
    let feature_range = (0..features.dim())
        .map(|f| {
            let (lo, hi) = features.rows().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| {
                (lo.min(r[f]), hi.max(r[f]))
            });
            (hi - lo).max(f64::MIN_POSITIVE)
        })
        .collect();
    let params = tree::TreeParams {
        feature_range,
        n_classes: classes.len(),
        mtry,
        min_samples_leaf: config.min_samples_leaf,
        max_depth: config.max_depth,
    };
    let trees = (0..config.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = tree_rng(config.seed, t);
            Tree::fit_bootstrap(features, &y, &params, &mut rng)
        })
        .collect();
    Ok(RandomForest {
        config: *config,
        n_features: features.dim(),
        n_samples: n,
        classes,
        trees,
        legend: Legend::new(),
    })
}

impl RandomForest {
    pub fn config(&self) -> &ForestConfig {
        &self.config
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn n_trees(&self) -> usize {
        self.trees.len()
    }

    /// Attaches class names; ids missing from `legend` keep generic names.
    pub fn with_legend(mut self, legend: &Legend) -> Self {
        self.legend = self
            .classes
            .iter()
            .map(|c| {
                (
                    *c,
                    legend.get(c).cloned().unwrap_or_else(|| format!("class {c}")),
                )
            })
            .collect();
        self
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        model_io::encode(self)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        model_io::decode(bytes)
    }
}

impl ProbabilisticClassifier for RandomForest {
    fn classes(&self) -> &[u32] {
        &self.classes
    }

    fn n_features(&self) -> usize {
        self.n_features
    }

    fn predict_proba_row(&self, row: &[f64]) -> Vec<f64> {
        let mut votes = vec![0usize; self.classes.len()];
        for t in &self.trees {
            votes[t.predict(row) as usize] += 1;
        }
        let total = self.trees.len() as f64;
        votes.into_iter().map(|v| v as f64 / total).collect()
    }

    fn legend(&self) -> Legend {
        if self.legend.is_empty() {
            self.classes
                .iter()
                .map(|c| (*c, format!("class {c}")))
                .collect()
        } else {
            self.legend.clone()
        }
    }
}

/// Classifies every valid pixel of `stack`; nodata stays nodata.
pub fn predict_raster<M: ProbabilisticClassifier + ?Sized>(model: &M, stack: &RasterStack) -> Result<ClassMap> {
    model.check_dim(stack.n_bands())?;
    let n = stack.n_pixels();
    let nb = stack.n_bands();
    let data = stack.data();
    let classes: Vec<Option<u32>> = (0..n)
        .into_par_iter()
        .map(|p| {
            if stack.is_nodata(p) {
                return None;
            }
            let row: Vec<f64> = (0..nb).map(|b| data[b * n + p] as f64).collect();
            Some(model.predict_row(&row))
        })
        .collect();
    ClassMap::new(
        stack.width(),
        stack.height(),
        *stack.transform(),
        classes,
        model.legend(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::{BandSpec, GeoTransform};
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    pub(crate) fn blobs(n_per: usize, seed: u64, sep: f64) -> (FeatureMatrix, Vec<u32>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 1.0).unwrap();
        let mut rows = Vec::new();
        let mut y = Vec::new();
        for (label, cx) in [(0u32, 0.0), (1u32, sep)] {
            for _ in 0..n_per {
                rows.push(vec![cx + noise.sample(&mut rng), cx + noise.sample(&mut rng)]);
                y.push(label);
            }
        }
        (FeatureMatrix::from_rows(&rows).unwrap(), y)
    }

    #[test]
    fn separable_blobs_fit_training_set() {
        let (x, y) = blobs(100, 1, 10.0);
        let model = fit(&x, &y, &ForestConfig::with_seed(3)).unwrap();
        let pred = model.predict(&x).unwrap();
        let acc = pred.iter().zip(&y).filter(|(a, b)| a == b).count() as f64 / y.len() as f64;
        assert!(acc >= 0.99, "accuracy {acc}");
    }

    #[test]
    fn two_samples_are_memorised() {
        let x = FeatureMatrix::from_rows(&[vec![0.0, 0.0], vec![1.0, 1.0]]).unwrap();
        let model = fit(&x, &[4, 9], &ForestConfig::with_seed(5)).unwrap();
        assert_eq!(model.predict(&x).unwrap(), vec![4, 9]);
    }

    #[test]
    fn same_seed_same_predictions() {
        let (x, y) = blobs(60, 2, 2.0);
        let probe = blobs(30, 99, 2.0).0;
        let a = fit(&x, &y, &ForestConfig::with_seed(11)).unwrap();
        let b = fit(&x, &y, &ForestConfig::with_seed(11)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.predict_proba(&probe).unwrap(), b.predict_proba(&probe).unwrap());
    }

    #[test]
    fn fit_errors() {
        let x = FeatureMatrix::from_rows(&[vec![0.0], vec![1.0], vec![2.0]]).unwrap();
        assert!(matches!(fit(&x, &[1, 1, 1], &ForestConfig::default()), Err(Error::Training(_))));
        let nan = FeatureMatrix::from_rows(&[vec![0.0], vec![f64::NAN], vec![2.0]]).unwrap();
        assert!(matches!(
            fit(&nan, &[0, 1, 0], &ForestConfig::default()),
            Err(Error::NanFeatures { rows }) if rows == vec![1]
        ));
        assert!(matches!(fit(&x, &[0, 1], &ForestConfig::default()), Err(Error::DimensionMismatch { .. })));
        let cfg = ForestConfig {
            max_features: MaxFeatures::Count(2),
            ..Default::default()
        };
        assert!(fit(&x, &[0, 1, 0], &cfg).is_err());
    }

    #[test]
    fn predict_dimension_mismatch() {
        let (x, y) = blobs(20, 4, 5.0);
        let model = fit(&x, &y, &ForestConfig::default()).unwrap();
        let wrong = FeatureMatrix::from_rows(&[vec![0.0, 1.0, 2.0]]).unwrap();
        assert!(matches!(model.predict(&wrong), Err(Error::DimensionMismatch { expected: 2, got: 3 })));
    }

    #[test]
    fn duplicated_point_wins_its_label() {
        let mut rows = vec![vec![5.0, 5.0]; 50];
        let mut y = vec![1u32; 50];
        rows.extend((0..50).map(|i| vec![i as f64 * 0.01, -(i as f64) * 0.02]));
        y.extend(std::iter::repeat_n(0, 50));
        let x = FeatureMatrix::from_rows(&rows).unwrap();
        let model = fit(&x, &y, &ForestConfig::with_seed(1)).unwrap();
        assert_eq!(model.predict_row(&[5.0, 5.0]), 1);
    }

    #[test]
    fn proba_rows_and_argmax_agree() {
        let (x, y) = blobs(80, 6, 1.5);
        let model = fit(&x, &y, &ForestConfig::with_seed(2)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let probes: Vec<Vec<f64>> = (0..1000)
            .map(|_| vec![rng.random_range(-4.0..6.0), rng.random_range(-4.0..6.0)])
            .collect();
        let probes = FeatureMatrix::from_rows(&probes).unwrap();
        let proba = model.predict_proba(&probes).unwrap();
        let pred = model.predict(&probes).unwrap();
        for (p, l) in proba.iter().zip(&pred) {
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert_eq!(model.classes()[argmax(p)], *l);
        }
    }

    #[test]
    fn permuted_columns_with_all_features() {
        let (x, y) = blobs(60, 8, 1.0);
        let swapped: Vec<Vec<f64>> = x.rows().map(|r| vec![r[1], r[0]]).collect();
        let xs = FeatureMatrix::from_rows(&swapped).unwrap();
        let cfg = ForestConfig {
            max_features: MaxFeatures::Count(2),
            seed: 21,
            ..Default::default()
        };
        let a = fit(&x, &y, &cfg).unwrap();
        let b = fit(&xs, &y, &cfg).unwrap();
        let probe = blobs(40, 9, 1.0).0;
        let probe_s: Vec<Vec<f64>> = probe.rows().map(|r| vec![r[1], r[0]]).collect();
        let probe_s = FeatureMatrix::from_rows(&probe_s).unwrap();
        assert_eq!(a.predict(&probe).unwrap(), b.predict(&probe_s).unwrap());
    }

    #[test]
    fn holdout_accuracy_on_linear_data() {
        let (x, y) = blobs(150, 12, 6.0);
        let idx: Vec<usize> = (0..300).collect();
        let (train, test): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| i % 5 != 0);
        let sub = |ids: &[usize]| {
            let rows: Vec<Vec<f64>> = ids.iter().map(|&i| x.row(i).to_vec()).collect();
            (FeatureMatrix::from_rows(&rows).unwrap(), ids.iter().map(|&i| y[i]).collect::<Vec<_>>())
        };
        let (xt, yt) = sub(&train);
        let (xv, yv) = sub(&test);
        let model = fit(&xt, &yt, &ForestConfig::with_seed(4)).unwrap();
        let pred = model.predict(&xv).unwrap();
        let acc = pred.iter().zip(&yv).filter(|(a, b)| a == b).count() as f64 / yv.len() as f64;
        assert!(acc >= 0.95, "holdout accuracy {acc}");
    }

    #[test]
    fn raster_prediction() {
        let (x, y) = blobs(50, 3, 10.0);
        let model = fit(&x, &y, &ForestConfig::with_seed(8)).unwrap();
        let bands = vec![BandSpec::named("a"), BandSpec::named("b")];
        let flat = RasterStack::filled(3, 3, bands.clone(), 10.0, GeoTransform::identity()).unwrap();
        let map = predict_raster(&model, &flat).unwrap();
        assert!(map.classes.iter().all(|c| *c == Some(1)));

        // Training vectors laid out as pixels reproduce the separable labels.
        let n = x.n_rows();
        let mut data = vec![0.0f32; 2 * n];
        for i in 0..n {
            data[i] = x.row(i)[0] as f32;
            data[n + i] = x.row(i)[1] as f32;
        }
        data[0] = f32::NAN;
        let stack = RasterStack::new(n, 1, bands, data, GeoTransform::identity()).unwrap();
        let map = predict_raster(&model, &stack).unwrap();
        assert_eq!(map.classes[0], None);
        for (c, l) in map.classes.iter().zip(&y).skip(1) {
            assert_eq!(*c, Some(*l));
        }
        let one_band = RasterStack::filled(2, 2, vec![BandSpec::named("a")], 0.0, GeoTransform::identity()).unwrap();
        assert!(predict_raster(&model, &one_band).is_err());
    }

    #[test]
    fn max_features_serde() {
        let cfg = ForestConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        assert!(text.contains("\"max_features\":\"sqrt\""), "{text}");
        let back: ForestConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        let count: MaxFeatures = serde_json::from_str("3").unwrap();
        assert_eq!(count, MaxFeatures::Count(3));
        assert_eq!(MaxFeatures::Sqrt.resolve(6).unwrap(), 2);
    }
}
