//! End-to-end benchmark: synthetic scene, IRMAD mask, every experiment
//! under LLTO cross-validation, and a ranking table.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::change::{apply_threshold, irmad_stacks, percentile_of_sorted, threshold_pr_optimal, IrmadOptions, PrOperatingPoint};
use crate::error::{Error, Result};
use crate::evaluation::{cross_validate, CvOptions, CvRun};
use crate::forest::write_model;
use crate::fsio::write_atomic;
use crate::migration::{run_experiment, Experiment, ExperimentSpec, MapSampling};
use crate::raster::{write_change_mask, ChangeMask, MaskProvenance};
use crate::samples::{ChangeFlag, SampleSet};
use crate::synth::{generate, SynthConfig, SynthScene};

/// Percentile used when reference change flags cannot drive a
/// precision-recall threshold.
pub const FALLBACK_PERCENTILE: f64 = 99.9;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReproduceOptions {
    pub config: SynthConfig,
    pub seed: u64,
    pub k: usize,
    pub experiments: Vec<Experiment>,
    pub irmad: IrmadOptions,
    pub map_sampling: MapSampling,
    /// Overrides every experiment's default normalisation when set.
    pub normalization: Option<bool>,
}

impl ReproduceOptions {
    pub fn preset(name: &str, seed: u64) -> Result<Self> {
        Ok(ReproduceOptions {
            config: SynthConfig::preset(name, seed)?,
            seed,
            k: 5,
            experiments: Experiment::ALL.to_vec(),
            irmad: IrmadOptions::default(),
            map_sampling: MapSampling {
                fraction: 0.01,
                min_per_class: 50,
            },
            normalization: None,
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MaskInfo {
    pub threshold: f64,
    pub provenance: MaskProvenance,
    pub operating_point: Option<PrOperatingPoint>,
    pub irmad_iterations: usize,
    pub irmad_converged: bool,
    pub changed_pixels: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct RankingRow {
    pub experiment: Experiment,
    pub description: String,
    pub macro_f1: f64,
    pub macro_f1_std: Option<f64>,
    pub accuracy: f64,
    pub accuracy_std: Option<f64>,
    pub rank: usize,
}

#[derive(Debug, Clone)]
pub struct Reproduction {
    pub options: ReproduceOptions,
    pub scene: SynthScene,
    pub mask: ChangeMask,
    pub mask_info: MaskInfo,
    pub runs: BTreeMap<Experiment, CvRun>,
    pub ranking: Vec<RankingRow>,
}

impl Reproduction {
    pub fn macro_f1(&self, e: Experiment) -> Option<f64> {
        self.runs.get(&e).map(|r| r.report.mean.macro_f1)
    }
}

/// IRMAD change mask thresholded at the precision-recall optimum of the
/// reference points' change flags, or at the fallback percentile when the
/// flags contain only one class.
pub fn irmad_mask(
    scene: &SynthScene,
    samples: &SampleSet,
    opts: IrmadOptions,
) -> Result<(ChangeMask, MaskInfo)> {
    let result = irmad_stacks(&scene.t0, &scene.t1, opts)?;
    let t = scene.t0.transform();
    let (w, h) = (scene.t0.width(), scene.t0.height());
    let mut z = Vec::new();
    let mut changed = Vec::new();
    for p in samples.points() {
        if p.change_flag == ChangeFlag::Unknown {
            continue;
        }
        if let Some((c, r)) = t.pixel_of(p.x, p.y, w, h) {
            z.push(result.z[r * w + c]);
            changed.push(p.change_flag == ChangeFlag::Changed);
        }
    }
    let (threshold, provenance, operating_point) = match threshold_pr_optimal(&z, &changed) {
        Ok(op) => (op.threshold, MaskProvenance::IrmadPr, Some(op)),
        Err(Error::DegenerateLabels(msg)) => {
            log::warn!("precision-recall threshold unavailable ({msg}); using the {FALLBACK_PERCENTILE}th percentile");
            let mut sorted: Vec<f64> = result.z.iter().copied().filter(|v| !v.is_nan()).collect();
            if sorted.is_empty() {
                return Err(Error::NoValidPixels);
            }
            sorted.sort_by(f64::total_cmp);
            (
                percentile_of_sorted(&sorted, FALLBACK_PERCENTILE),
                MaskProvenance::IrmadPercentile,
                None,
            )
        }
        Err(e) => return Err(e),
    };
    let mask = apply_threshold(&result.z, w, h, *t, threshold, provenance)?;
    let info = MaskInfo {
        threshold,
        provenance,
        operating_point,
        irmad_iterations: result.iterations,
        irmad_converged: result.converged,
        changed_pixels: mask.count(crate::raster::MaskFlag::Changed),
    };
    Ok((mask, info))
}

pub fn spec_for(opts: &ReproduceOptions, e: Experiment) -> ExperimentSpec {
    let mut spec = ExperimentSpec::new(e, opts.seed);
    spec.map_sampling = opts.map_sampling;
    if let Some(n) = opts.normalization {
        spec.normalization = n;
    }
    spec
}

/// Runs the benchmark in memory.
pub fn reproduce(opts: &ReproduceOptions) -> Result<Reproduction> {
    let scene = generate(&opts.config)?;
    let samples = scene.samples.clone();
    let (mask, mask_info) = irmad_mask(&scene, &samples, opts.irmad)?;
    let cv = CvOptions::new(opts.k, opts.seed);
    let mut runs = BTreeMap::new();
    for &e in &opts.experiments {
        let spec = spec_for(opts, e);
        log::info!("cross-validating experiment {e}");
        let run = cross_validate(&spec, &samples, &scene.t0, &scene.t1, Some(&mask), &cv)?;
        runs.insert(e, run);
    }
    let ranking = rank(&runs);
    Ok(Reproduction {
        options: opts.clone(),
        scene,
        mask,
        mask_info,
        runs,
        ranking,
    })
}

fn rank(runs: &BTreeMap<Experiment, CvRun>) -> Vec<RankingRow> {
    let mut rows: Vec<RankingRow> = runs
        .iter()
        .map(|(e, r)| RankingRow {
            experiment: *e,
            description: e.description().to_string(),
            macro_f1: r.report.mean.macro_f1,
            macro_f1_std: r.report.std.map(|s| s.macro_f1),
            accuracy: r.report.mean.accuracy,
            accuracy_std: r.report.std.map(|s| s.accuracy),
            rank: 0,
        })
        .collect();
    assign_ranks(&mut rows);
    rows
}

/// Rank 1 is the best macro-F1; ties keep experiment order.
fn assign_ranks(rows: &mut [RankingRow]) {
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.sort_by(|&a, &b| rows[b].macro_f1.total_cmp(&rows[a].macro_f1).then(a.cmp(&b)));
    for (r, i) in order.into_iter().enumerate() {
        rows[i].rank = r + 1;
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| format!("{v:.4}"))
}

pub fn ranking_csv(rows: &[RankingRow]) -> String {
    let mut out = String::from("experiment,approach,macro_f1,macro_f1_std,accuracy,accuracy_std,rank\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{:.4},{},{:.4},{},{}",
            r.experiment,
            r.description,
            r.macro_f1,
            fmt_opt(r.macro_f1_std),
            r.accuracy,
            fmt_opt(r.accuracy_std),
            r.rank
        );
    }
    out
}

/// Fixed-width table, `mean (std)` per cell.
pub fn ranking_text(rows: &[RankingRow]) -> String {
    let cell = |m: f64, s: Option<f64>| match s {
        Some(s) => format!("{m:.2} ({s:.2})"),
        None => format!("{m:.2}"),
    };
    let width = rows.iter().map(|r| r.description.len()).max().unwrap_or(8).max(8);
    let mut out = format!(
        "{:<width$}  {:>4}  {:>12}  {:>12}  {:>4}\n",
        "Approach", "Exp.", "Macro-F1", "Accuracy", "Rank"
    );
    out.push_str(&"-".repeat(width + 44));
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{:<width$}  {:>4}  {:>12}  {:>12}  {:>4}",
            r.description,
            r.experiment.code(),
            cell(r.macro_f1, r.macro_f1_std),
            cell(r.accuracy, r.accuracy_std),
            r.rank
        );
    }
    out
}

#[derive(Serialize)]
struct Summary<'a> {
    options: &'a ReproduceOptions,
    mask: &'a MaskInfo,
    ranking: &'a [RankingRow],
}

/// Writes the ranking, per-experiment reports, the change mask and one
/// model per experiment fitted on all reference points.
pub fn write_reproduction(rep: &Reproduction, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    for d in [dir.to_path_buf(), dir.join("reports"), dir.join("models")] {
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut written = Vec::new();
    let mut put = |path: PathBuf, bytes: &[u8]| -> Result<()> {
        write_atomic(&path, bytes)?;
        written.push(path);
        Ok(())
    };
    put(dir.join("ranking.csv"), ranking_csv(&rep.ranking).as_bytes())?;
    put(dir.join("ranking.txt"), ranking_text(&rep.ranking).as_bytes())?;
    let summary = Summary {
        options: &rep.options,
        mask: &rep.mask_info,
        ranking: &rep.ranking,
    };
    put(
        dir.join("summary.json"),
        serde_json::to_string_pretty(&summary).expect("summary serialises").as_bytes(),
    )?;
    for (e, run) in &rep.runs {
        put(
            dir.join("reports").join(format!("exp_{}.json", e.code())),
            run.report.to_json().as_bytes(),
        )?;
    }
    write_change_mask(&rep.mask, dir.join("change_mask"))?;
    written.push(dir.join("change_mask.json"));
    written.push(dir.join("change_mask.bsq"));
    for e in rep.runs.keys() {
        let spec = spec_for(&rep.options, *e);
        let out = run_experiment(&spec, &rep.scene.samples, &rep.scene.t0, &rep.scene.t1, Some(&rep.mask))?;
        let path = dir.join("models").join(format!("exp_{}.lmrf", e.code()));
        write_model(&out.trained.model, &path)?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranking_orders_by_macro_f1() {
        let row = |e: Experiment, f1: f64| RankingRow {
            experiment: e,
            description: e.description().into(),
            macro_f1: f1,
            macro_f1_std: Some(0.01),
            accuracy: f1,
            accuracy_std: None,
            rank: 0,
        };
        let mut rows = vec![row(Experiment::E1Gold, 0.5), row(Experiment::E5_2SslAuto, 0.9)];
        assign_ranks(&mut rows);
        assert_eq!((rows[0].rank, rows[1].rank), (2, 1));
        let csv = ranking_csv(&rows);
        assert!(csv.starts_with("experiment,approach,macro_f1"));
        assert!(csv.contains("\n5.2,Two-stage SSL (IRMAD mask),0.9000,0.0100,0.9000,,1\n"));
        let text = ranking_text(&rows);
        assert!(text.contains("0.90 (0.01)"));
    }
}
