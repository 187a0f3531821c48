use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use labelmig::change::{
    apply_threshold, irmad_stacks, threshold_percentile, threshold_pr_optimal, threshold_value, IrmadOptions,
};
use labelmig::evaluation::{cross_validate, fraction_sweep, CvOptions};
use labelmig::forest::{fit, predict_raster, read_model, write_model, FeatureMatrix, ForestConfig, MaxFeatures, ProbabilisticClassifier};
use labelmig::migration::{run_experiment, Experiment, ExperimentSpec};
use labelmig::preprocess::{build_resampling_plan, drop_bands, l2_normalize, masked_median_composite, resample_stack};
use labelmig::raster::{read_change_mask, read_raster, sidecar_paths, write_change_mask, write_class_map, write_raster};
use labelmig::reproduce::{reproduce, write_reproduction, ReproduceOptions};
use labelmig::samples::{extract_features, read_samples};
use labelmig::synth::{generate, write_scene, SynthConfig};
use labelmig::{write_atomic, BandSpec, ChangeFlag, ChangeMask, MaskProvenance, RasterStack, SampleSet, Timestep};
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Parser, Debug)]
#[command(name = "labelmig", version, about = "Migrate land-cover reference labels between epochs")]
struct Cli {
    /// Worker threads; defaults to all available cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Write a run manifest with input and output hashes.
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    /// JSON object of flag values for the subcommand; explicit flags win.
    #[arg(long, global = true)]
    flags_file: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
#[command(args_override_self = true)]
enum Command {
    /// Generate a synthetic bi-temporal scene.
    Synth(SynthArgs),
    /// L2-normalise every pixel's band vector.
    Normalize(InOut),
    /// Resample onto target bands with Gaussian response functions.
    Resample(ResampleArgs),
    /// Per-pixel median over several co-registered stacks.
    Composite(CompositeArgs),
    /// Remove bands by 0-based index.
    DropBands(DropArgs),
    /// Iteratively reweighted MAD chi-square statistic.
    Irmad(IrmadArgs),
    /// Threshold a chi-square raster into a change mask.
    Mask(MaskArgs),
    /// Fit a random forest on sample features.
    Fit(FitArgs),
    /// Predict sample labels with a saved model.
    Predict(PredictArgs),
    /// Classify every pixel of a raster.
    PredictRaster(PredictRasterArgs),
    /// Train one experiment and map t1.
    Migrate(MigrateArgs),
    /// Cross-validate one experiment.
    Eval(EvalArgs),
    /// Cross-validate over training-set fractions.
    Sweep(SweepArgs),
    /// Run every experiment on a synthetic benchmark and rank them.
    Reproduce(ReproduceArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    #[arg(long)]
    preset: Option<String>,
    /// Overrides the config seed; required with --preset.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct InOut {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ResampleArgs {
    #[arg(long)]
    input: PathBuf,
    /// Raster whose sidecar bands are the target, or a JSON band list.
    #[arg(long)]
    target_bands: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct CompositeArgs {
    #[arg(long, value_delimiter = ',', num_args = 1.., required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct DropArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_delimiter = ',')]
    indices: Vec<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct IrmadArgs {
    #[arg(long)]
    t0: PathBuf,
    #[arg(long)]
    t1: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 50)]
    max_iter: usize,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    /// Canonical correlations per iteration as a JSON array of arrays.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
#[command(group(clap::ArgGroup::new("rule").required(true).multiple(false).args(["percentile", "pr", "threshold"])))]
struct MaskArgs {
    #[arg(long)]
    stat: PathBuf,
    #[arg(long)]
    percentile: Option<f64>,
    /// Sample CSV whose change flags pick the precision-recall optimum.
    #[arg(long)]
    pr: Option<PathBuf>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Clone, Copy)]
struct ForestArgs {
    #[arg(long, default_value_t = 100)]
    n_trees: usize,
    /// `sqrt` or a count.
    #[arg(long, default_value = "sqrt", value_parser = parse_max_features)]
    max_features: MaxFeatures,
    #[arg(long, default_value_t = 1)]
    min_samples_leaf: usize,
    #[arg(long)]
    max_depth: Option<usize>,
}

impl ForestArgs {
    fn config(&self, seed: u64) -> ForestConfig {
        ForestConfig {
            n_trees: self.n_trees,
            max_features: self.max_features,
            min_samples_leaf: self.min_samples_leaf,
            max_depth: self.max_depth,
            seed,
        }
    }
}

fn parse_max_features(s: &str) -> Result<MaxFeatures, String> {
    match s {
        "sqrt" => Ok(MaxFeatures::Sqrt),
        n => n
            .parse::<usize>()
            .map(MaxFeatures::Count)
            .map_err(|_| format!("expected sqrt or a count, got {n:?}")),
    }
}

#[derive(Args, Debug)]
struct FeatureSource {
    #[arg(long)]
    samples: PathBuf,
    /// Epoch whose labels and features are used.
    #[arg(long, default_value = "t0")]
    timestep: Timestep,
    /// Extract features from this raster instead of the CSV columns.
    #[arg(long)]
    raster: Option<PathBuf>,
    /// L2-normalise the raster before extraction.
    #[arg(long, requires = "raster")]
    normalize: bool,
}

#[derive(Args, Debug)]
struct FitArgs {
    #[command(flatten)]
    source: FeatureSource,
    #[command(flatten)]
    forest: ForestArgs,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out_model: PathBuf,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    source: FeatureSource,
    /// CSV of `id,predicted` plus one probability column per class.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PredictRasterArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    raster: PathBuf,
    #[arg(long)]
    normalize: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ExperimentArgs {
    #[arg(long)]
    experiment: Experiment,
    #[arg(long)]
    t0_raster: PathBuf,
    #[arg(long)]
    t1_raster: PathBuf,
    #[arg(long)]
    samples: PathBuf,
    #[arg(long, conflicts_with = "manual_flags")]
    mask: Option<PathBuf>,
    /// Use the samples' change flags as stability information.
    #[arg(long)]
    manual_flags: bool,
    #[arg(long)]
    seed: u64,
    /// Override the experiment's default L2 normalisation.
    #[arg(long)]
    normalize: Option<bool>,
    #[arg(long)]
    confidence_floor: Option<f64>,
    /// Stable-area sampling target as a fraction of stable pixels.
    #[arg(long)]
    map_fraction: Option<f64>,
    #[arg(long)]
    min_per_class: Option<usize>,
    #[command(flatten)]
    forest: ForestArgs,
}

#[derive(Args, Debug)]
struct MigrateArgs {
    #[command(flatten)]
    exp: ExperimentArgs,
    #[arg(long)]
    out_model: PathBuf,
    #[arg(long)]
    out_map: Option<PathBuf>,
    #[arg(long)]
    out_bundle: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    exp: ExperimentArgs,
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long, default_value_t = 100.0)]
    proximity_radius: f64,
    #[arg(long)]
    out: PathBuf,
    /// Per-fold rows for plotting.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    exp: ExperimentArgs,
    #[arg(long, value_delimiter = ',', num_args = 1.., required = true)]
    fractions: Vec<f64>,
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long, default_value_t = 100.0)]
    proximity_radius: f64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ReproduceArgs {
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value = "bench")]
    preset: String,
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long, value_delimiter = ',')]
    experiments: Vec<Experiment>,
}

/// Failure classes mapped onto exit codes.
enum Failure {
    Usage(String),
    Data(anyhow::Error),
}

impl From<labelmig::Error> for Failure {
    fn from(e: labelmig::Error) -> Self {
        Failure::Data(e.into())
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Data(e)
    }
}

type CliResult<T> = Result<T, Failure>;

#[derive(Serialize)]
struct FileHash {
    path: PathBuf,
    sha256: String,
}

#[derive(Serialize)]
struct Stage {
    name: String,
    seconds: f64,
}

#[derive(Serialize)]
struct RunManifest {
    tool_version: &'static str,
    command_line: Vec<String>,
    seed: Option<u64>,
    inputs: Vec<FileHash>,
    outputs: Vec<FileHash>,
    stages: Vec<Stage>,
}

/// Inputs, outputs and timings gathered while a command runs.
#[derive(Default)]
struct Run {
    seed: Option<u64>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    stages: Vec<Stage>,
}

impl Run {
    fn input(&mut self, p: &Path) {
        self.inputs.extend(expand(p));
    }

    fn output(&mut self, p: &Path) {
        self.outputs.extend(expand(p));
    }

    fn stage<T>(&mut self, name: &str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        self.stages.push(Stage {
            name: name.to_string(),
            seconds: start.elapsed().as_secs_f64(),
        });
        out
    }
}

/// A raster path names a sidecar and payload pair; anything else is a file.
fn expand(p: &Path) -> Vec<PathBuf> {
    if p.is_file() {
        let mut v = vec![p.to_path_buf()];
        if p.extension().and_then(|e| e.to_str()) == Some("csv") {
            let legend = labelmig::samples::legend_path(p);
            if legend.is_file() {
                v.push(legend);
            }
        }
        return v;
    }
    let (json, bsq) = sidecar_paths(p);
    [json, bsq].into_iter().filter(|q| q.is_file()).collect()
}

fn hash_files(paths: &[PathBuf]) -> anyhow::Result<Vec<FileHash>> {
    paths
        .iter()
        .map(|p| {
            let bytes = std::fs::read(p).with_context(|| format!("hashing {}", p.display()))?;
            Ok(FileHash {
                path: p.clone(),
                sha256: hex::encode(Sha256::digest(&bytes)),
            })
        })
        .collect()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let argv: Vec<OsString> = std::env::args_os().collect();
    let cli = match parse(&argv) {
        Ok(cli) => cli,
        Err(Failure::Usage(msg)) => {
            eprint!("{msg}");
            return ExitCode::from(1);
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be positive");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    let mut run = Run::default();
    let result = dispatch(&cli.command, &mut run).and_then(|()| match &cli.manifest {
        Some(path) => write_manifest(path, &argv, &run).map_err(Failure::Data),
        None => Ok(()),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

/// Parses argv, splicing flags from `--flags-file` in right after the
/// subcommand so that explicit flags override them.
fn parse(argv: &[OsString]) -> CliResult<Cli> {
    let Some(file) = flags_file_arg(argv) else {
        return try_parse(argv);
    };
    let text = std::fs::read_to_string(&file).with_context(|| format!("reading {}", file.display()))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", file.display()))?;
    let extra = flags_from_json(&value).map_err(Failure::Usage)?;
    let Some(pos) = subcommand_position(argv) else {
        return try_parse(argv);
    };
    let mut spliced = argv[..=pos].to_vec();
    spliced.extend(extra.into_iter().map(OsString::from));
    spliced.extend_from_slice(&argv[pos + 1..]);
    try_parse(&spliced)
}

/// Finds `--flags-file` ahead of clap, which would otherwise reject the
/// command for flags the file is meant to supply.
fn flags_file_arg(argv: &[OsString]) -> Option<PathBuf> {
    let mut it = argv.iter().skip(1);
    while let Some(a) = it.next() {
        let a = a.to_string_lossy();
        if a == "--" {
            break;
        }
        if a == "--flags-file" {
            return it.next().map(PathBuf::from);
        }
        if let Some(v) = a.strip_prefix("--flags-file=") {
            return Some(PathBuf::from(v));
        }
    }
    None
}

fn try_parse(argv: &[OsString]) -> CliResult<Cli> {
    Cli::try_parse_from(argv).map_err(|e| {
        use clap::error::ErrorKind;
        if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
            print!("{e}");
            std::process::exit(0);
        }
        Failure::Usage(e.render().to_string())
    })
}

fn subcommand_position(argv: &[OsString]) -> Option<usize> {
    let names: Vec<String> = <Cli as clap::CommandFactory>::command()
        .get_subcommands()
        .map(|c| c.get_name().to_string())
        .collect();
    argv.iter()
        .skip(1)
        .position(|a| a.to_str().is_some_and(|s| names.iter().any(|n| n == s)))
        .map(|i| i + 1)
}

fn flags_from_json(value: &serde_json::Value) -> Result<Vec<String>, String> {
    use serde_json::Value;
    let obj = value
        .as_object()
        .ok_or_else(|| "flags file must hold a JSON object".to_string())?;
    let mut out = Vec::new();
    for (key, v) in obj {
        let flag = format!("--{}", key.replace('_', "-"));
        let scalar = |v: &Value| match v {
            Value::String(s) => Ok(s.clone()),
            Value::Number(n) => Ok(n.to_string()),
            Value::Bool(b) => Ok(b.to_string()),
            other => Err(format!("unsupported value for {key}: {other}")),
        };
        match v {
            Value::Bool(true) => out.push(flag),
            Value::Bool(false) | Value::Null => {}
            Value::Array(items) => {
                let parts: Result<Vec<String>, String> = items.iter().map(scalar).collect();
                out.push(flag);
                out.push(parts?.join(","));
            }
            other => {
                out.push(flag);
                out.push(scalar(other)?);
            }
        }
    }
    Ok(out)
}

fn write_manifest(path: &Path, argv: &[OsString], run: &Run) -> anyhow::Result<()> {
    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION"),
        command_line: argv.iter().map(|a| a.to_string_lossy().into_owned()).collect(),
        seed: run.seed,
        inputs: hash_files(&run.inputs)?,
        outputs: hash_files(&run.outputs)?,
        stages: run.stages.iter().map(|s| Stage { name: s.name.clone(), seconds: s.seconds }).collect(),
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    write_atomic(path, json.as_bytes())?;
    Ok(())
}

fn dispatch(cmd: &Command, run: &mut Run) -> CliResult<()> {
    match cmd {
        Command::Synth(a) => synth(a, run),
        Command::Normalize(a) => {
            run.input(&a.input);
            let stack = read_raster(&a.input)?;
            let n = run.stage("normalize", || l2_normalize(&stack));
            if n.zero_norm_count > 0 {
                log::warn!("{} zero-norm pixel(s) set to nodata", n.zero_norm_count);
            }
            put_raster(run, &n.stack, &a.out)
        }
        Command::Resample(a) => {
            run.input(&a.input);
            run.input(&a.target_bands);
            let stack = read_raster(&a.input)?;
            let target = read_band_list(&a.target_bands)?;
            let plan = build_resampling_plan(stack.bands(), &target)?;
            if plan.uncovered_count() > 0 {
                log::warn!("{} target band(s) lack spectral support and are omitted", plan.uncovered_count());
            }
            let out = run.stage("resample", || resample_stack(&plan, &stack, &target))?;
            put_raster(run, &out, &a.out)
        }
        Command::Composite(a) => {
            let stacks = a
                .inputs
                .iter()
                .map(|p| {
                    run.input(p);
                    read_raster(p)
                })
                .collect::<labelmig::Result<Vec<_>>>()?;
            let out = run.stage("composite", || masked_median_composite(&stacks))?;
            put_raster(run, &out, &a.out)
        }
        Command::DropBands(a) => {
            run.input(&a.input);
            let stack = read_raster(&a.input)?;
            let out = drop_bands(&stack, &a.indices)?;
            put_raster(run, &out, &a.out)
        }
        Command::Irmad(a) => irmad(a, run),
        Command::Mask(a) => mask(a, run),
        Command::Fit(a) => fit_cmd(a, run),
        Command::Predict(a) => predict(a, run),
        Command::PredictRaster(a) => {
            run.input(&a.model);
            run.input(&a.raster);
            let model = read_model(&a.model)?;
            let mut stack = read_raster(&a.raster)?;
            if a.normalize {
                stack = l2_normalize(&stack).stack;
            }
            let map = run.stage("predict", || predict_raster(&model, &stack))?;
            write_class_map(&map, &a.out)?;
            run.output(&a.out);
            Ok(())
        }
        Command::Migrate(a) => migrate(a, run),
        Command::Eval(a) => eval(a, run),
        Command::Sweep(a) => sweep(a, run),
        Command::Reproduce(a) => reproduce_cmd(a, run),
    }
}

fn put_raster(run: &mut Run, stack: &RasterStack, path: &Path) -> CliResult<()> {
    write_raster(stack, path)?;
    run.output(path);
    Ok(())
}

/// Bands from a raster sidecar, or a bare JSON array of band specs.
fn read_band_list(path: &Path) -> CliResult<Vec<BandSpec>> {
    if path.extension().and_then(|e| e.to_str()) == Some("json") && !sidecar_paths(path).1.is_file() {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let bands: Vec<BandSpec> =
            serde_json::from_str(&text).with_context(|| format!("parsing band list {}", path.display()))?;
        return Ok(bands);
    }
    Ok(read_raster(path)?.bands().to_vec())
}

fn synth(a: &SynthArgs, run: &mut Run) -> CliResult<()> {
    let mut cfg = match (&a.config, &a.preset) {
        (Some(path), None) => {
            run.input(path);
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str::<SynthConfig>(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        (None, Some(name)) => {
            let seed = a
                .seed
                .ok_or_else(|| Failure::Usage("--seed is required with --preset".into()))?;
            SynthConfig::preset(name, seed)?
        }
        _ => return Err(Failure::Usage("one of --config or --preset is required".into())),
    };
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    run.seed = Some(cfg.seed);
    let scene = run.stage("generate", || generate(&cfg))?;
    let written = run.stage("write", || write_scene(&scene, &a.out_dir))?;
    run.outputs.extend(written);
    Ok(())
}

fn irmad(a: &IrmadArgs, run: &mut Run) -> CliResult<()> {
    run.input(&a.t0);
    run.input(&a.t1);
    let t0 = read_raster(&a.t0)?;
    let t1 = read_raster(&a.t1)?;
    let opts = IrmadOptions {
        max_iter: a.max_iter,
        tol: a.tol,
    };
    let result = run.stage("irmad", || irmad_stacks(&t0, &t1, opts))?;
    if !result.converged {
        log::warn!("IRMAD stopped after {} iterations without converging", result.iterations);
    }
    let z = result.z_raster(&t0)?;
    put_raster(run, &z, &a.out)?;
    if let Some(path) = &a.report {
        let json = serde_json::to_string(&result.rho_history).context("serialising correlations")?;
        write_atomic(path, json.as_bytes())?;
        run.output(path);
    }
    Ok(())
}

fn mask(a: &MaskArgs, run: &mut Run) -> CliResult<()> {
    run.input(&a.stat);
    let z = read_raster(&a.stat)?;
    let mask = if let Some(p) = a.percentile {
        threshold_percentile(&z, p)?
    } else if let Some(t) = a.threshold {
        threshold_value(&z, t, MaskProvenance::Manual)?
    } else {
        let labels = a.pr.as_ref().expect("clap group guarantees one rule");
        run.input(labels);
        pr_mask(&z, &read_samples(labels)?)?
    };
    write_change_mask(&mask, &a.out)?;
    run.output(&a.out);
    Ok(())
}

fn pr_mask(z: &RasterStack, samples: &SampleSet) -> CliResult<ChangeMask> {
    let (w, h) = (z.width(), z.height());
    let values: Vec<f64> = z.band(0).iter().map(|&v| v as f64).collect();
    let mut at = Vec::new();
    let mut changed = Vec::new();
    for p in samples.points() {
        if p.change_flag == ChangeFlag::Unknown {
            continue;
        }
        if let Some((c, r)) = z.transform().pixel_of(p.x, p.y, w, h) {
            let v = values[r * w + c];
            if !v.is_nan() {
                at.push(v);
                changed.push(p.change_flag == ChangeFlag::Changed);
            }
        }
    }
    let op = threshold_pr_optimal(&at, &changed)?;
    log::info!(
        "precision-recall optimum: threshold {} precision {:.4} recall {:.4} F1 {:.4}",
        op.threshold,
        op.precision,
        op.recall,
        op.f1
    );
    Ok(apply_threshold(&values, w, h, *z.transform(), op.threshold, MaskProvenance::IrmadPr)?)
}

/// Ids, labels (when present) and feature rows for one epoch.
struct Features {
    ids: Vec<String>,
    labels: Vec<Option<u32>>,
    rows: FeatureMatrix,
    samples: SampleSet,
}

fn load_features(src: &FeatureSource, run: &mut Run) -> CliResult<Features> {
    run.input(&src.samples);
    let mut samples = read_samples(&src.samples)?;
    if let Some(path) = &src.raster {
        run.input(path);
        let mut stack = read_raster(path)?;
        if src.normalize {
            stack = l2_normalize(&stack).stack;
        }
        let ex = extract_features(&stack, &samples, src.timestep)?;
        if !ex.excluded_nodata.is_empty() {
            log::warn!("{} sample(s) on nodata pixels skipped", ex.excluded_nodata.len());
        }
        samples = ex.samples;
    }
    let mut ids = Vec::new();
    let mut labels = Vec::new();
    let mut rows = Vec::new();
    for p in samples.points() {
        let f = p.features(src.timestep).ok_or_else(|| {
            anyhow::anyhow!("sample {:?} has no {} features", p.id, src.timestep)
        })?;
        ids.push(p.id.clone());
        labels.push(match src.timestep {
            Timestep::T0 => Some(p.label_t0),
            Timestep::T1 => p.label_t1,
        });
        rows.push(f.to_vec());
    }
    if rows.is_empty() {
        return Err(anyhow::anyhow!("no samples with {} features", src.timestep).into());
    }
    Ok(Features {
        ids,
        labels,
        rows: FeatureMatrix::from_rows(&rows)?,
        samples,
    })
}

fn fit_cmd(a: &FitArgs, run: &mut Run) -> CliResult<()> {
    run.seed = Some(a.seed);
    let f = load_features(&a.source, run)?;
    let labels: Vec<u32> = f
        .labels
        .iter()
        .zip(&f.ids)
        .map(|(l, id)| l.ok_or_else(|| anyhow::anyhow!("sample {id:?} has no {} label", a.source.timestep)))
        .collect::<anyhow::Result<_>>()?;
    let config = a.forest.config(a.seed);
    let model = run.stage("fit", || fit(&f.rows, &labels, &config))?;
    let model = model.with_legend(f.samples.legend());
    write_model(&model, &a.out_model)?;
    run.output(&a.out_model);
    Ok(())
}

fn predict(a: &PredictArgs, run: &mut Run) -> CliResult<()> {
    run.input(&a.model);
    let model = read_model(&a.model)?;
    let f = load_features(&a.source, run)?;
    let proba = run.stage("predict", || model.predict_proba(&f.rows))?;
    let classes = model.classes();
    let mut out = String::from("id,predicted");
    for c in classes {
        out.push_str(&format!(",p_{c}"));
    }
    out.push('\n');
    for (id, row) in f.ids.iter().zip(&proba) {
        out.push_str(&format!("{id},{}", classes[labelmig::forest::argmax(row)]));
        for p in row {
            out.push_str(&format!(",{p}"));
        }
        out.push('\n');
    }
    write_atomic(&a.out, out.as_bytes())?;
    run.output(&a.out);
    Ok(())
}

struct ExperimentInputs {
    spec: ExperimentSpec,
    samples: SampleSet,
    t0: RasterStack,
    t1: RasterStack,
    mask: Option<ChangeMask>,
}

fn load_experiment(a: &ExperimentArgs, run: &mut Run) -> CliResult<ExperimentInputs> {
    run.seed = Some(a.seed);
    let mut spec = ExperimentSpec::new(a.experiment, a.seed);
    spec.forest = a.forest.config(a.seed);
    if let Some(n) = a.normalize {
        spec.normalization = n;
    }
    spec.confidence_floor = a.confidence_floor;
    if let Some(f) = a.map_fraction {
        spec.map_sampling.fraction = f;
    }
    if let Some(m) = a.min_per_class {
        spec.map_sampling.min_per_class = m;
    }
    use labelmig::migration::ChangeSource;
    match (a.experiment.change_source(), &a.mask, a.manual_flags) {
        (Some(ChangeSource::Mask), None, _) => {
            return Err(Failure::Usage(format!("experiment {} needs --mask", a.experiment)))
        }
        (Some(ChangeSource::ManualFlags), Some(_), _) => {
            return Err(Failure::Usage(format!(
                "experiment {} uses the samples' change flags, not --mask",
                a.experiment
            )))
        }
        (None, Some(_), _) | (None, _, true) => {
            log::warn!("experiment {} ignores change information", a.experiment)
        }
        _ => {}
    }
    spec.validate()?;
    for p in [&a.t0_raster, &a.t1_raster, &a.samples] {
        run.input(p);
    }
    let mask = match &a.mask {
        Some(p) => {
            run.input(p);
            Some(read_change_mask(p)?)
        }
        None => None,
    };
    Ok(ExperimentInputs {
        spec,
        samples: read_samples(&a.samples)?,
        t0: read_raster(&a.t0_raster)?,
        t1: read_raster(&a.t1_raster)?,
        mask,
    })
}

fn migrate(a: &MigrateArgs, run: &mut Run) -> CliResult<()> {
    let x = load_experiment(&a.exp, run)?;
    let out = run.stage("train", || run_experiment(&x.spec, &x.samples, &x.t0, &x.t1, x.mask.as_ref()))?;
    let log = &out.trained.log;
    if !log.unknown_change.is_empty() {
        log::warn!("{} sample(s) with unknown change status excluded", log.unknown_change.len());
    }
    for (class, short) in &log.shortfalls {
        log::warn!("class {class}: {short} stable pixel(s) short of the sampling target");
    }
    write_model(&out.trained.model, &a.out_model)?;
    run.output(&a.out_model);
    if let Some(p) = &a.out_map {
        write_class_map(&out.t1_map, p)?;
        run.output(p);
    }
    if let Some(p) = &a.out_bundle {
        out.trained.bundle.write_csv(p)?;
        run.output(p);
    }
    Ok(())
}

fn eval(a: &EvalArgs, run: &mut Run) -> CliResult<()> {
    let x = load_experiment(&a.exp, run)?;
    let mut opts = CvOptions::new(a.k, a.exp.seed);
    opts.proximity_radius = a.proximity_radius;
    let cv = run.stage("cross-validate", || {
        cross_validate(&x.spec, &x.samples, &x.t0, &x.t1, x.mask.as_ref(), &opts)
    })?;
    cv.report.write_json(&a.out)?;
    run.output(&a.out);
    if let Some(p) = &a.csv {
        write_atomic(p, cv.report.to_csv().as_bytes())?;
        run.output(p);
    }
    Ok(())
}

fn sweep(a: &SweepArgs, run: &mut Run) -> CliResult<()> {
    if a.fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
        return Err(Failure::Usage("fractions must lie in (0, 1]".into()));
    }
    let x = load_experiment(&a.exp, run)?;
    let mut opts = CvOptions::new(a.k, a.exp.seed);
    opts.proximity_radius = a.proximity_radius;
    let points = run.stage("sweep", || {
        fraction_sweep(&x.spec, &x.samples, &x.t0, &x.t1, x.mask.as_ref(), &a.fractions, &opts)
    })?;
    let json = serde_json::to_string_pretty(&points).context("serialising sweep")?;
    write_atomic(&a.out, json.as_bytes())?;
    run.output(&a.out);
    if let Some(p) = &a.csv {
        let mut out = String::from("fraction,n_samples,macro_f1,accuracy,gold_macro_f1,delta_macro_f1\n");
        for s in &points {
            out.push_str(&format!(
                "{},{},{:.6},{:.6},{:.6},{:.6}\n",
                s.fraction, s.n_samples, s.report.mean.macro_f1, s.report.mean.accuracy, s.gold.mean.macro_f1, s.delta_macro_f1
            ));
        }
        write_atomic(p, out.as_bytes())?;
        run.output(p);
    }
    Ok(())
}

fn reproduce_cmd(a: &ReproduceArgs, run: &mut Run) -> CliResult<()> {
    run.seed = Some(a.seed);
    let mut opts = ReproduceOptions::preset(&a.preset, a.seed).map_err(|e| Failure::Usage(e.to_string()))?;
    opts.k = a.k;
    if !a.experiments.is_empty() {
        let mut seen = BTreeMap::new();
        for e in &a.experiments {
            seen.insert(*e, ());
        }
        opts.experiments = seen.into_keys().collect();
    }
    let rep = run.stage("reproduce", || reproduce(&opts))?;
    let written = run.stage("write", || write_reproduction(&rep, &a.out_dir))?;
    run.outputs.extend(written);
    eprint!("{}", labelmig::reproduce::ranking_text(&rep.ranking));
    Ok(())
}
