//! The `implisat` command line: `encode`, `decode`, `eval`, `analyze`,
//! `compare` and `synth`.
//!
//! Exit codes: 0 success, 2 usage or configuration, 3 data or file format,
//! 4 numeric divergence, 5 internal error.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use implisat_core::data::MultibandImage;
use implisat_core::metrics::{compare, psnr, BandMetrics, EvalReport};
use implisat_core::model::{ModelConfig, ModulationMode};
use implisat_core::synthetic::{generate, SyntheticSpec};
use implisat_core::train::{fit, FitHooks, LogEntry, TrainConfig};
use serde::Serialize;
use serde_json::{Map, Value};

use crate::checkpoint::{compression_ratio, Checkpoint};
use crate::error::{Error, Result};
use crate::manifest::{load_manifest, write_manifest, Dtype, ManifestEntry, Raster, RawBand};
use crate::report;

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_DIVERGED: u8 = 4;
pub const EXIT_INTERNAL: u8 = 5;

/// Exit code for a failed command.
pub fn exit_code(err: &Error) -> u8 {
    use implisat_core::Error as Core;
    match err {
        Error::Core(Core::Config(_) | Core::Mode { .. }) => EXIT_USAGE,
        Error::Core(Core::Divergence { .. } | Core::Numeric(_)) => EXIT_DIVERGED,
        Error::Core(Core::Shape { .. }) => EXIT_INTERNAL,
        _ => EXIT_DATA,
    }
}

#[derive(Debug, Parser)]
#[command(name = "implisat", version, about = "Compress multiband images into Fourier-modulated implicit neural representations")]
pub struct Cli {
    /// Print per-evaluation training progress.
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model on a manifest and write the checkpoint plus its log.
    Encode(EncodeArgs),
    /// Render bands from a checkpoint into a manifest with f32 payloads.
    Decode(DecodeArgs),
    /// Score a checkpoint (or a decoded raster) against a manifest.
    Eval(EvalArgs),
    /// Histogram the Fourier frequency components of a checkpoint.
    Analyze(AnalyzeArgs),
    /// Compare checkpoints trained on the same manifest.
    Compare(CompareArgs),
    /// Generate the synthetic multi-resolution test image.
    Synth(SynthArgs),
}

fn parse_mode(s: &str) -> std::result::Result<ModulationMode, String> {
    ModulationMode::parse(s).ok_or_else(|| format!("unknown mode `{s}` (expected fourier, shift, scale or none)"))
}

#[derive(Debug, Args, Serialize)]
pub struct EncodeArgs {
    /// Input manifest.
    #[arg(long)]
    pub input: PathBuf,
    /// Output checkpoint; the training log goes to `<stem>.log.csv` beside it.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<ModulationMode>,
    /// JSON file `{"model": {...}, "train": {...}}`; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Seed for both initialization and batch sampling.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Initialization seed, if it should differ from `--seed`.
    #[arg(long)]
    pub model_seed: Option<u64>,
    /// Layer count L.
    #[arg(long, visible_alias = "L")]
    pub layers: Option<usize>,
    /// Hidden width n.
    #[arg(long, visible_alias = "n")]
    pub width: Option<usize>,
    /// Modulation rank m.
    #[arg(long, visible_alias = "m")]
    pub rank: Option<usize>,
    #[arg(long)]
    pub hyper_layers: Option<usize>,
    #[arg(long)]
    pub hyper_width: Option<usize>,
    #[arg(long)]
    pub omega0: Option<f64>,
    /// Allow m > n/4 in Fourier mode.
    #[arg(long)]
    pub allow_high_rank: bool,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub log_every: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub min_delta: Option<f64>,
}

#[derive(Debug, Args, Serialize)]
pub struct DecodeArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Output directory; receives `manifest.json` and `<band>.f32`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    pub scale: f64,
    /// Decode only this band.
    #[arg(long)]
    pub band: Option<String>,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    /// Ground-truth manifest.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, required_unless_present = "prediction", conflicts_with = "prediction")]
    pub model: Option<PathBuf>,
    /// Decoded manifest to score instead of a checkpoint; its values are
    /// normalized with the ground truth's ranges.
    #[arg(long)]
    pub prediction: Option<PathBuf>,
    /// CSV output (`method,band,psnr_db,mse`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// CSV output (`group,bin_left,bin_right,density`).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct CompareArgs {
    /// Manifest the checkpoints were trained on.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, num_args = 2.., required = true)]
    pub models: Vec<PathBuf>,
    /// Table CSV (`method,band,psnr_db,mse`).
    #[arg(long)]
    pub out: PathBuf,
    /// Convergence CSV built from each checkpoint's `<stem>.log.csv`.
    #[arg(long)]
    pub convergence: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    /// Output directory; receives `manifest.json` and `<band>.f32`.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON synthetic spec; defaults to the built-in three-band image.
    #[arg(long)]
    pub spec: Option<PathBuf>,
}

/// Fully resolved `encode` configuration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

fn config_err(msg: String) -> Error {
    Error::Core(implisat_core::Error::Config(msg))
}

fn overlay(base: Value, patch: Option<&Value>, what: &str) -> Result<Value> {
    let mut base = base;
    if let Some(patch) = patch {
        let patch = patch
            .as_object()
            .ok_or_else(|| config_err(format!("config `{what}` must be a JSON object")))?;
        let obj = base.as_object_mut().expect("structs serialize to objects");
        for (k, v) in patch {
            obj.insert(k.clone(), v.clone());
        }
    }
    Ok(base)
}

/// Defaults, then values implied by the image (channel count and GSDs),
/// then the config file, then flags.
pub fn resolve_config(args: &EncodeArgs, image: &MultibandImage) -> Result<RunConfig> {
    let mut model = ModelConfig {
        n_channels: image.bands.len(),
        resolutions: image.resolutions(),
        ..ModelConfig::default()
    };
    let mut train = TrainConfig::default();
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: Map<String, Value> =
            serde_json::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        if let Some(k) = file.keys().find(|k| *k != "model" && *k != "train") {
            return Err(config_err(format!("{}: unknown section `{k}`", path.display())));
        }
        let m = overlay(serde_json::to_value(&model).expect("config serializes"), file.get("model"), "model")?;
        model = serde_json::from_value(m).map_err(|e| config_err(format!("{}: model: {e}", path.display())))?;
        let t = overlay(serde_json::to_value(&train).expect("config serializes"), file.get("train"), "train")?;
        train = serde_json::from_value(t).map_err(|e| config_err(format!("{}: train: {e}", path.display())))?;
    }
    macro_rules! set {
        ($src:expr, $dst:expr) => {
            if let Some(v) = $src {
                $dst = v;
            }
        };
    }
    set!(args.mode, model.mode);
    set!(args.layers, model.layers);
    set!(args.width, model.hidden_width);
    set!(args.rank, model.rank);
    set!(args.hyper_layers, model.hyper_layers);
    set!(args.hyper_width, model.hyper_width);
    set!(args.omega0, model.omega0);
    set!(args.seed, model.seed);
    set!(args.model_seed, model.seed);
    if args.allow_high_rank {
        model.strict_low_rank = false;
    }
    set!(args.iters, train.iterations);
    set!(args.lr, train.lr);
    set!(args.seed, train.seed);
    set!(args.batch, train.batch_per_band);
    set!(args.log_every, train.log_every);
    set!(args.patience, train.early_stop_patience);
    set!(args.min_delta, train.early_stop_min_delta);
    model.validate()?;
    train.validate()?;
    image.check_config(&model)?;
    Ok(RunConfig { model, train })
}

fn print_config<T: Serialize>(command: &str, value: &T) {
    let json = serde_json::to_string_pretty(value).expect("config serializes");
    println!("# {command} resolved config\n{json}");
}

/// `<dir>/<stem>.log.csv` for a checkpoint at `<dir>/<stem>.<ext>`.
pub fn log_path(checkpoint: &Path) -> PathBuf {
    let stem = checkpoint.file_stem().map_or_else(|| "model".into(), |s| s.to_string_lossy().into_owned());
    checkpoint.with_file_name(format!("{stem}.log.csv"))
}

struct Progress {
    start: Instant,
    verbose: bool,
}

impl FitHooks for Progress {
    fn elapsed_secs(&mut self) -> f64 {
        self.start.elapsed().as_secs_f64()
    }

    fn on_log(&mut self, e: &LogEntry) {
        if self.verbose {
            eprintln!(
                "iter {:>6}  loss {:.4e}  psnr {:>7.3} dB  best mse {:.4e}  {:.1}s",
                e.iteration, e.loss, e.eval_psnr, e.best_mse, e.wall_secs
            );
        }
    }
}

pub fn encode(args: &EncodeArgs, verbose: bool) -> Result<()> {
    let raster = Raster::read(&args.input)?;
    let image = raster.to_image()?;
    let cfg = resolve_config(args, &image)?;
    print_config("encode", &cfg);
    let mut hooks = Progress {
        start: Instant::now(),
        verbose,
    };
    let log_file = log_path(&args.out);
    match fit(&image, &cfg.model, &cfg.train, &mut hooks) {
        Ok(outcome) => {
            let bytes = Checkpoint::new(outcome.params, &image)?.save(&args.out)?;
            report::write_train_log(&log_file, &outcome.log)?;
            let last = outcome.log.entries.last();
            let best = outcome.log.entries.iter().find(|e| e.iteration == outcome.best_iteration);
            println!(
                "wrote {} ({bytes} bytes, compression ratio {:.2}) and {}",
                args.out.display(),
                compression_ratio(raster.payload_bytes()?, bytes),
                log_file.display()
            );
            println!(
                "best PSNR {} dB at iteration {}; {} iterations{} in {:.1}s",
                best.map_or("n/a".into(), |e| format!("{:.3}", e.eval_psnr)),
                outcome.best_iteration,
                last.map_or(0, |e| e.iteration),
                if outcome.stopped_early { " (early stop)" } else { "" },
                hooks.elapsed_secs()
            );
            Ok(())
        }
        Err(failure) => {
            report::write_train_log(&log_file, &failure.log)?;
            if let Some(best) = failure.best {
                let bytes = Checkpoint::new(best, &image)?.save(&args.out)?;
                eprintln!("kept the last good checkpoint: {} ({bytes} bytes)", args.out.display());
            }
            Err(failure.error.into())
        }
    }
}

pub fn decode(args: &DecodeArgs) -> Result<()> {
    print_config("decode", args);
    if !(args.scale > 0.0 && args.scale.is_finite()) {
        return Err(config_err(format!("scale must be positive, got {}", args.scale)));
    }
    let ckpt = Checkpoint::load(&args.model)?;
    let names: Vec<String> = match &args.band {
        Some(b) => vec![b.clone()],
        None => ckpt.bands.iter().map(|m| m.name.clone()).collect(),
    };
    let mut bands = Vec::with_capacity(names.len());
    for name in &names {
        let band = ckpt.reconstruct(name, args.scale)?;
        let values = band.raw();
        bands.push(RawBand {
            entry: ManifestEntry {
                name: band.name.clone(),
                gsd_m: band.gsd_m,
                height: values.rows(),
                width: values.cols(),
                dtype: Dtype::F32.name().into(),
                path: format!("{}.f32", band.name).into(),
                norm_min: None,
                norm_max: None,
            },
            values,
        });
    }
    let manifest = args.out.join("manifest.json");
    Raster { bands }.write(&manifest)?;
    println!("wrote {} ({} band(s), scale {})", manifest.display(), names.len(), args.scale);
    Ok(())
}

/// Scores original-unit payloads against `reference`, normalizing them with
/// the reference's ranges.
pub fn evaluate_raster(reference: &MultibandImage, prediction: &Raster, method: &str) -> Result<EvalReport> {
    let mut bands = Vec::new();
    let (mut sq_sum, mut pixels) = (0.0, 0);
    for truth in &reference.bands {
        let pred = prediction
            .bands
            .iter()
            .find(|b| b.entry.name == truth.name)
            .ok_or_else(|| implisat_core::Error::UnknownBand {
                name: truth.name.clone(),
                available: prediction.bands.iter().map(|b| b.entry.name.clone()).collect(),
            })?;
        if pred.values.shape() != truth.values.shape() {
            return Err(Error::Manifest {
                band: truth.name.clone(),
                reason: format!("prediction is {:?}, ground truth is {:?}", pred.values.shape(), truth.values.shape()),
            });
        }
        let normalized = implisat_core::data::normalize(&pred.values, truth.norm_min, truth.norm_max)?;
        let sq: f64 = normalized.sub(&truth.values)?.data().iter().map(|r| r * r).sum();
        let n = truth.values.len();
        sq_sum += sq;
        pixels += n;
        bands.push(BandMetrics {
            name: truth.name.clone(),
            mse: sq / n as f64,
            psnr: psnr(sq / n as f64)?,
            pixels: n,
        });
    }
    let aggregate_mse = sq_sum / pixels as f64;
    Ok(EvalReport {
        method: method.into(),
        mode: ModulationMode::None,
        model_seed: 0,
        bands,
        aggregate_mse,
        aggregate_psnr: psnr(aggregate_mse)?,
    })
}

fn print_report(r: &EvalReport) {
    println!("{:<12} {:>10} {:>12}", "band", "psnr_db", "mse");
    for b in &r.bands {
        println!("{:<12} {:>10} {:>12.4e}", b.name, report::fmt_f64(round3(b.psnr)), b.mse);
    }
    println!("{:<12} {:>10} {:>12.4e}", "all", report::fmt_f64(round3(r.aggregate_psnr)), r.aggregate_mse);
}

fn round3(v: f64) -> f64 {
    if v.is_finite() {
        (v * 1000.0).round() / 1000.0
    } else {
        v
    }
}

pub fn eval(args: &EvalArgs) -> Result<()> {
    print_config("eval", args);
    let image = load_manifest(&args.input)?;
    let report = match (&args.model, &args.prediction) {
        (Some(model), _) => Checkpoint::load(model)?.evaluate(&image)?,
        (None, Some(pred)) => evaluate_raster(&image, &Raster::read(pred)?, "decoded")?,
        (None, None) => unreachable!("clap requires one of --model/--prediction"),
    };
    print_report(&report);
    if let Some(out) = &args.out {
        report::write_eval(out, &report)?;
    }
    Ok(())
}

pub fn analyze(args: &AnalyzeArgs) -> Result<()> {
    print_config("analyze", args);
    let hist = Checkpoint::load(&args.model)?.frequency_analysis()?;
    println!("{:>8} {:>8} {:>12} {:>12}", "gsd_m", "samples", "mean", "std_dev");
    for g in &hist.groups {
        println!("{:>8} {:>8} {:>12.5} {:>12.5}", g.gsd_m, g.samples, g.mean, g.std_dev);
    }
    report::write_histogram(&args.out, &hist)
}

pub fn compare_cmd(args: &CompareArgs) -> Result<()> {
    print_config("compare", args);
    let image = load_manifest(&args.input)?;
    let ckpts = args
        .models
        .iter()
        .map(|p| Checkpoint::load(p))
        .collect::<Result<Vec<_>>>()?;
    let modes: Vec<&str> = ckpts.iter().map(|c| c.config().mode.name()).collect();
    let mut reports = Vec::new();
    for ((ckpt, path), mode) in ckpts.iter().zip(&args.models).zip(&modes) {
        let mut r = ckpt.evaluate(&image)?;
        if modes.iter().filter(|m| *m == mode).count() > 1 {
            let stem = path.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned());
            r.method = format!("{mode}:{stem}");
        }
        reports.push(r);
    }
    let table = compare(&reports)?;
    report::write_comparison(&args.out, &table)?;
    for r in &reports {
        println!("{:<24} {:>10} dB  mse {:.4e}", r.method, report::fmt_f64(round3(r.aggregate_psnr)), r.aggregate_mse);
    }
    println!("ranking: {}", table.ranking.join(" > "));
    if let Some(conv) = &args.convergence {
        let curves = reports
            .iter()
            .zip(&args.models)
            .map(|(r, p)| Ok((r.method.clone(), report::read_train_log_psnr(&log_path(p))?)))
            .collect::<Result<Vec<_>>>()?;
        report::write_convergence(conv, &curves)?;
    }
    Ok(())
}

pub fn synth(args: &SynthArgs) -> Result<()> {
    let spec: SyntheticSpec = match &args.spec {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&text).map_err(|source| Error::Json {
                path: path.clone(),
                source,
            })?
        }
        None => SyntheticSpec::default(),
    };
    print_config("synth", &spec);
    let out = generate(&spec)?;
    for w in &out.warnings {
        eprintln!("warning: {w}");
    }
    let manifest = args.out.join("manifest.json");
    write_manifest(&out.image, &manifest, Dtype::F32)?;
    println!("wrote {}", manifest.display());
    Ok(())
}

/// Runs a parsed command line and returns the process exit code.
pub fn run(cli: &Cli) -> u8 {
    let result = match &cli.command {
        Command::Encode(a) => encode(a, cli.verbose),
        Command::Decode(a) => decode(a),
        Command::Eval(a) => eval(a),
        Command::Analyze(a) => analyze(a),
        Command::Compare(a) => compare_cmd(a),
        Command::Synth(a) => synth(a),
    };
    let _ = std::io::stdout().flush();
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
