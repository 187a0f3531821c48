//! Seeded synthetic bi-temporal landscapes with known labels and change.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsio::write_atomic;
use crate::raster::{
    write_change_mask, write_class_map, write_raster, BandSpec, ChangeMask, ClassMap, GeoTransform,
    Legend, MaskFlag, MaskProvenance, RasterStack,
};
use crate::samples::{legend_path, write_legend, write_samples, ChangeFlag, SamplePoint, SampleSet};

/// Per-band affine change applied to t1 values: `gain * v + offset`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandDrift {
    pub gain: f64,
    pub offset: f64,
}

impl BandDrift {
    pub const IDENTITY: BandDrift = BandDrift { gain: 1.0, offset: 0.0 };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    pub n_classes: usize,
    pub n_bands: usize,
    /// `n_classes` rows of `n_bands` values; generated when absent.
    #[serde(default)]
    pub class_means: Option<Vec<Vec<f64>>>,
    pub noise_sigma: f64,
    pub change_fraction: f64,
    /// One entry per band, or empty for no drift.
    #[serde(default)]
    pub drift: Vec<BandDrift>,
    pub correlation_length: f64,
    pub n_reference_points: usize,
    pub seed: u64,
    #[serde(default = "default_pixel_size")]
    pub pixel_size: f64,
    /// Changed pixels all become this class when set.
    #[serde(default)]
    pub change_to_class: Option<u32>,
    /// Minimum distance between generated class means, in noise sigmas.
    #[serde(default = "default_separation")]
    pub min_separation: f64,
    /// Spread of generated class means around a shared base spectrum, in
    /// noise sigmas.
    #[serde(default = "default_spread")]
    pub mean_spread: f64,
}

fn default_pixel_size() -> f64 {
    30.0
}

fn default_separation() -> f64 {
    3.0
}

fn default_spread() -> f64 {
    2.5
}

impl SynthConfig {
    /// Named presets: `small` (128x128) and `bench` (256x256), six bands,
    /// gain 1.1 with alternating +-0.05 offsets at t1.
    pub fn preset(name: &str, seed: u64) -> Result<Self> {
        let base = SynthConfig {
            width: 128,
            height: 128,
            n_classes: 5,
            n_bands: 6,
            class_means: None,
            noise_sigma: 0.02,
            change_fraction: 0.05,
            drift: (0..6)
                .map(|b| BandDrift {
                    gain: 1.1,
                    offset: if b % 2 == 0 { 0.05 } else { -0.05 },
                })
                .collect(),
            correlation_length: 6.0,
            n_reference_points: 600,
            seed,
            pixel_size: 30.0,
            change_to_class: None,
            min_separation: 3.0,
            mean_spread: 2.5,
        };
        match name {
            "small" => Ok(base),
            "bench" => Ok(SynthConfig {
                width: 256,
                height: 256,
                change_fraction: 0.15,
                correlation_length: 8.0,
                n_reference_points: 1500,
                ..base
            }),
            other => Err(Error::SynthConfig(format!(
                "unknown preset {other:?} (expected \"small\" or \"bench\")"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::SynthConfig(m));
        if self.width == 0 || self.height == 0 {
            return fail("width and height must be positive".into());
        }
        if self.n_classes < 2 || self.n_classes > 254 {
            return fail(format!("n_classes must lie in 2..=254, got {}", self.n_classes));
        }
        if self.n_bands == 0 {
            return fail("n_bands must be positive".into());
        }
        if !(self.noise_sigma > 0.0 && self.noise_sigma.is_finite()) {
            return fail(format!("noise_sigma must be positive, got {}", self.noise_sigma));
        }
        if !(0.0..1.0).contains(&self.change_fraction) {
            return fail(format!("change_fraction must lie in [0, 1), got {}", self.change_fraction));
        }
        if !self.drift.is_empty() && self.drift.len() != self.n_bands {
            return fail(format!(
                "drift has {} entries for {} bands",
                self.drift.len(),
                self.n_bands
            ));
        }
        if self.drift.iter().any(|d| !(d.gain.is_finite() && d.offset.is_finite()) || d.gain == 0.0) {
            return fail("drift gains must be finite and non-zero".into());
        }
        if !(self.correlation_length >= 0.0 && self.correlation_length.is_finite()) {
            return fail("correlation_length must be >= 0".into());
        }
        if !(self.pixel_size > 0.0 && self.pixel_size.is_finite()) {
            return fail("pixel_size must be positive".into());
        }
        if self.n_reference_points > self.width * self.height {
            return fail(format!(
                "{} reference points requested on {} pixels",
                self.n_reference_points,
                self.width * self.height
            ));
        }
        if let Some(c) = self.change_to_class {
            if c as usize >= self.n_classes {
                return fail(format!("change_to_class {c} is not a class"));
            }
        }
        if !(self.mean_spread > 0.0 && self.mean_spread.is_finite()) {
            return fail(format!("mean_spread must be positive, got {}", self.mean_spread));
        }
        if self.min_separation < 3.0 {
            return fail(format!("min_separation must be >= 3, got {}", self.min_separation));
        }
        if let Some(m) = &self.class_means {
            if m.len() != self.n_classes || m.iter().any(|r| r.len() != self.n_bands) {
                return fail(format!(
                    "class_means must be {} x {}",
                    self.n_classes, self.n_bands
                ));
            }
        }
        Ok(())
    }

    fn drift_for(&self, band: usize) -> BandDrift {
        self.drift.get(band).copied().unwrap_or(BandDrift::IDENTITY)
    }
}

#[derive(Debug, Clone)]
pub struct SynthScene {
    pub config: SynthConfig,
    pub class_means: Vec<Vec<f64>>,
    pub t0: RasterStack,
    pub t1: RasterStack,
    pub classmap_t0: ClassMap,
    pub classmap_t1: ClassMap,
    pub truth_mask: ChangeMask,
    /// True labels at both epochs and true change flags; no features.
    pub samples: SampleSet,
}

const CLASS_NAMES: [&str; 8] = [
    "water", "forest", "grassland", "cropland", "built_up", "bare", "shrubland", "wetland",
];

pub fn synth_legend(n_classes: usize) -> Legend {
    (0..n_classes as u32)
        .map(|c| {
            let name = CLASS_NAMES
                .get(c as usize)
                .map_or_else(|| format!("class_{c}"), |s| s.to_string());
            (c, name)
        })
        .collect()
}

/// Independent random stream per generation stage.
fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let r = (3.0 * sigma).ceil() as i64;
    let k: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur with clamped edges.
fn smooth(field: &[f64], w: usize, h: usize, sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let clamp = |v: i64, n: usize| v.clamp(0, n as i64 - 1) as usize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * field[y * w + clamp(x as i64 + i as i64 - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * tmp[clamp(y as i64 + i as i64 - r, h) * w + x])
                .sum();
        }
    }
    out
}

fn smooth_field(rng: &mut ChaCha8Rng, w: usize, h: usize, sigma: f64) -> Vec<f64> {
    let white: Vec<f64> = (0..w * h).map(|_| StandardNormal.sample(rng)).collect();
    smooth(&white, w, h, sigma)
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = norm2(v);
    v.iter().map(|x| x / n).collect()
}

/// Class means scattered around one reflectance-like base spectrum with
/// per-band offsets of `mean_spread` noise sigmas. Pairs must be at least
/// `min_separation` sigmas apart both as raw vectors and in direction
/// (angular distance scaled by the smaller norm), so classes stay learnable
/// with and without brightness normalisation.
fn generate_means(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>> {
    let need = cfg.min_separation * cfg.noise_sigma;
    let spread = cfg.mean_spread * cfg.noise_sigma;
    let dir: Vec<f64> = (0..cfg.n_bands).map(|_| rng.random_range(0.2..1.0)).collect();
    let norm = rng.random_range(0.5..0.8);
    let base: Vec<f64> = unit(&dir).into_iter().map(|v| v * norm).collect();
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(cfg.n_classes);
    let mut attempts = 0;
    while means.len() < cfg.n_classes {
        attempts += 1;
        if attempts > 100_000 {
            return Err(Error::SynthConfig(format!(
                "could not place {} class means {} sigma apart",
                cfg.n_classes, cfg.min_separation
            )));
        }
        let cand: Vec<f64> = base
            .iter()
            .map(|b| {
                let e: f64 = StandardNormal.sample(rng);
                (b + spread * e).max(0.01)
            })
            .collect();
        let ok = means.iter().all(|m| {
            let scale = norm2(m).min(norm2(&cand));
            dist(m, &cand) >= need && dist(&unit(m), &unit(&cand)) * scale >= need
        });
        if ok {
            means.push(cand);
        }
    }
    Ok(means)
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn argmax_class(fields: &[Vec<f64>], p: usize, skip: Option<usize>) -> usize {
    let mut best = None;
    for (c, f) in fields.iter().enumerate() {
        if Some(c) == skip {
            continue;
        }
        if best.is_none_or(|b: usize| f[p] > fields[b][p]) {
            best = Some(c);
        }
    }
    best.expect("at least one class remains")
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthScene> {
    cfg.validate()?;
    let (w, h) = (cfg.width, cfg.height);
    let n = w * h;
    let means = match &cfg.class_means {
        Some(m) => m.clone(),
        None => generate_means(cfg, &mut stream(cfg.seed, 0))?,
    };

    let mut rng = stream(cfg.seed, 1);
    let fields: Vec<Vec<f64>> = (0..cfg.n_classes)
        .map(|_| smooth_field(&mut rng, w, h, cfg.correlation_length))
        .collect();
    let class0: Vec<usize> = (0..n).map(|p| argmax_class(&fields, p, None)).collect();

    // Change: the top-k pixels of a smooth field form coherent patches.
    let mut rng = stream(cfg.seed, 2);
    let change_field = smooth_field(&mut rng, w, h, cfg.correlation_length);
    let target = cfg.change_to_class.map(|c| c as usize);
    let mut eligible: Vec<usize> = (0..n).filter(|&p| Some(class0[p]) != target).collect();
    let k = (cfg.change_fraction * n as f64).round() as usize;
    if k > eligible.len() {
        return Err(Error::SynthConfig(format!(
            "{k} changed pixels requested but only {} can change",
            eligible.len()
        )));
    }
    eligible.sort_by(|&a, &b| change_field[b].total_cmp(&change_field[a]).then(a.cmp(&b)));
    let mut rng = stream(cfg.seed, 3);
    let next_fields: Vec<Vec<f64>> = (0..cfg.n_classes)
        .map(|_| smooth_field(&mut rng, w, h, cfg.correlation_length))
        .collect();
    let mut class1 = class0.clone();
    for &p in &eligible[..k] {
        class1[p] = target.unwrap_or_else(|| argmax_class(&next_fields, p, Some(class0[p])));
    }

    let mut rng0 = stream(cfg.seed, 4);
    let mut rng1 = stream(cfg.seed, 5);
    let mut d0 = vec![0f32; n * cfg.n_bands];
    let mut d1 = vec![0f32; n * cfg.n_bands];
    for b in 0..cfg.n_bands {
        let drift = cfg.drift_for(b);
        for p in 0..n {
            let e0: f64 = StandardNormal.sample(&mut rng0);
            let e1: f64 = StandardNormal.sample(&mut rng1);
            d0[b * n + p] = (means[class0[p]][b] + cfg.noise_sigma * e0) as f32;
            let v1 = means[class1[p]][b] + cfg.noise_sigma * e1;
            d1[b * n + p] = (drift.gain * v1 + drift.offset) as f32;
        }
    }
    let transform = GeoTransform::new(0.0, h as f64 * cfg.pixel_size, cfg.pixel_size, -cfg.pixel_size)?;
    let bands: Vec<BandSpec> = (0..cfg.n_bands).map(|b| BandSpec::named(format!("B{}", b + 1))).collect();
    let t0 = RasterStack::new(w, h, bands.clone(), d0, transform)?;
    let t1 = RasterStack::new(w, h, bands, d1, transform)?;

    let legend = synth_legend(cfg.n_classes);
    let to_map = |c: &[usize]| {
        ClassMap::new(w, h, transform, c.iter().map(|&v| Some(v as u32)).collect(), legend.clone())
    };
    let classmap_t0 = to_map(&class0)?;
    let classmap_t1 = to_map(&class1)?;
    let flags = (0..n)
        .map(|p| if class0[p] == class1[p] { MaskFlag::Stable } else { MaskFlag::Changed })
        .collect();
    let truth_mask = ChangeMask::new(w, h, transform, flags, MaskProvenance::Manual, None)?;

    let mut rng = stream(cfg.seed, 6);
    let mut picks = index::sample(&mut rng, n, cfg.n_reference_points).into_vec();
    picks.sort_unstable();
    let width = cfg.n_reference_points.to_string().len();
    let points = picks
        .into_iter()
        .enumerate()
        .map(|(i, p)| {
            let (x, y) = transform.pixel_center(p % w, p / w);
            let mut s = SamplePoint::new(format!("p{i:0width$}"), x, y, class0[p] as u32);
            s.label_t1 = Some(class1[p] as u32);
            s.change_flag = if class0[p] == class1[p] {
                ChangeFlag::Stable
            } else {
                ChangeFlag::Changed
            };
            s
        })
        .collect();
    let samples = SampleSet::new(points, legend)?;

    Ok(SynthScene {
        config: cfg.clone(),
        class_means: means,
        t0,
        t1,
        classmap_t0,
        classmap_t1,
        truth_mask,
        samples,
    })
}

#[derive(Debug, Clone, Serialize)]
struct SceneManifest<'a> {
    seed: u64,
    config: &'a SynthConfig,
    class_means: &'a [Vec<f64>],
    changed_pixels: usize,
    class_pixels_t0: BTreeMap<u32, usize>,
    class_pixels_t1: BTreeMap<u32, usize>,
    files: BTreeMap<&'static str, String>,
}

/// Writes a scene as BSQ1 rasters, masks, the sample table with its legend
/// and `manifest.json`. Returns the written paths.
pub fn write_scene(scene: &SynthScene, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let mut files = BTreeMap::new();
    let mut record = |key: &'static str, stem: &str, exts: &[&str], written: &mut Vec<PathBuf>| {
        files.insert(key, stem.to_string());
        for e in exts {
            written.push(dir.join(format!("{stem}{e}")));
        }
    };
    write_raster(&scene.t0, dir.join("t0"))?;
    record("raster_t0", "t0", &[".json", ".bsq"], &mut written);
    write_raster(&scene.t1, dir.join("t1"))?;
    record("raster_t1", "t1", &[".json", ".bsq"], &mut written);
    write_class_map(&scene.classmap_t0, dir.join("classmap_t0"))?;
    record("classmap_t0", "classmap_t0", &[".json", ".bsq"], &mut written);
    write_class_map(&scene.classmap_t1, dir.join("classmap_t1"))?;
    record("classmap_t1", "classmap_t1", &[".json", ".bsq"], &mut written);
    write_change_mask(&scene.truth_mask, dir.join("truth_mask"))?;
    record("truth_mask", "truth_mask", &[".json", ".bsq"], &mut written);
    let csv = dir.join("samples.csv");
    write_samples(&scene.samples, &csv)?;
    write_legend(scene.samples.legend(), &legend_path(&csv))?;
    record("samples", "samples", &[".csv", ".legend.json"], &mut written);

    let manifest = SceneManifest {
        seed: scene.config.seed,
        config: &scene.config,
        class_means: &scene.class_means,
        changed_pixels: scene.truth_mask.count(MaskFlag::Changed),
        class_pixels_t0: scene.classmap_t0.class_counts(),
        class_pixels_t1: scene.classmap_t1.class_counts(),
        files,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
    let path = dir.join("manifest.json");
    write_atomic(&path, text.as_bytes())?;
    written.push(path);
    Ok(written)
}
