//! The `demc` command line: data generation, training, denoising, evaluation
//! and gradient verification.
//!
//! Every subcommand accepts `--config FILE`, a plain `key=value` file whose
//! entries act as flags placed before the ones typed on the command line, so
//! explicit flags win.

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::data::{load_sample, read_manifest, write_pfm, DataError, PfmImage, Sample};
use crate::metrics::{self, MetricError};
use crate::net::{ModelSpec, Variant};
use crate::synth::{generate_dataset, DatasetConfig};
use crate::train::{load_checkpoint, load_split, TrainConfig, TrainError, Trainer, LOSS_EPS};
use crate::verify::{grad_suite, op_kind};

pub const EXIT_OK: i32 = 0;
pub const EXIT_IO: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_CHECKPOINT: i32 = 4;
pub const EXIT_GRADCHECK: i32 = 5;

/// A failed command: exit code plus message for stderr.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn new(code: i32, message: impl Into<String>) -> Self {
        CliError {
            code,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::new(EXIT_IO, e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        let code = match &e {
            TrainError::Format(_)
            | TrainError::Version { .. }
            | TrainError::Truncated { .. }
            | TrainError::Mismatch { .. } => EXIT_CHECKPOINT,
            TrainError::NonFinite { .. } => EXIT_NUMERIC,
            TrainError::Config(_) => EXIT_USAGE,
            TrainError::Io { .. } | TrainError::Data(_) | TrainError::Net(_) | TrainError::Tensor(_) => EXIT_IO,
        };
        CliError::new(code, e.to_string())
    }
}

impl From<MetricError> for CliError {
    fn from(e: MetricError) -> Self {
        CliError::new(EXIT_IO, e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "demc", version, about = "Dual-encoder Monte Carlo denoiser", args_override_self = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic dataset and its manifest.
    GenData(GenDataArgs),
    /// Train a denoiser on the samples of a manifest.
    Train(TrainArgs),
    /// Denoise one sample directory into a PFM.
    Denoise(DenoiseArgs),
    /// Per-scene RelMSE/SSIM table for one or more checkpoints.
    Eval(EvalArgs),
    /// Finite-difference check of every operator and the whole model.
    Gradcheck(GradcheckArgs),
}

/// `HxW` image size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Size {
    pub height: usize,
    pub width: usize,
}

impl FromStr for Size {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (h, w) = s
            .split_once(['x', 'X'])
            .ok_or_else(|| format!("expected HxW, got '{s}'"))?;
        let parse = |v: &str| v.trim().parse::<usize>().ok().filter(|&n| n > 0);
        match (parse(h), parse(w)) {
            (Some(height), Some(width)) => Ok(Size { height, width }),
            _ => Err(format!("expected positive HxW, got '{s}'")),
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub scenes: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u32).range(1..))]
    pub spp_noisy: u32,
    #[arg(long, default_value_t = 4096, value_parser = clap::value_parser!(u32).range(1..))]
    pub spp_ref: u32,
    #[arg(long, default_value = "128x128")]
    pub size: Size,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    Demc,
    Semc,
    #[value(name = "demc-nosn")]
    DemcNoSn,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Demc => Variant::Demc,
            VariantArg::Semc => Variant::Semc,
            VariantArg::DemcNoSn => Variant::DemcNoSn,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_enum, default_value_t = VariantArg::Demc)]
    pub variant: VariantArg,
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub iters: u64,
    /// Checkpoint path; the loss log goes to `<out>.loss.csv`.
    #[arg(long)]
    pub out: PathBuf,
    /// Synchronous loading, bit-exact reruns.
    #[arg(long)]
    pub deterministic: bool,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    #[arg(long, default_value_t = 128)]
    pub patch: usize,
    #[arg(long, default_value_t = 80)]
    pub stride: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    pub lr_start: f64,
    #[arg(long, default_value_t = 5e-6)]
    pub lr_end: f64,
    /// Multiplies every channel width of the network.
    #[arg(long, default_value_t = 1.0)]
    pub width_scale: f64,
    #[arg(long, default_value_t = 0.1)]
    pub val_fraction: f64,
    #[arg(long, default_value_t = 1000)]
    pub validate_every: u64,
    #[arg(long, default_value_t = 5000)]
    pub checkpoint_every: u64,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct DenoiseArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Fail unless the checkpoint holds this variant.
    #[arg(long, value_enum)]
    pub variant: Option<VariantArg>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Baseline {
    Noisy,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Further checkpoints shown as extra columns.
    #[arg(long, num_args = 1.., action = clap::ArgAction::Append)]
    pub ckpt2: Vec<PathBuf>,
    #[arg(long, value_enum)]
    pub baseline: Option<Baseline>,
    /// Also write the table as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, hide = true)]
    pub inject_fault: Option<String>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

/// Splices the entries of `--config FILE` in right after the subcommand name.
pub fn expand_config(args: Vec<OsString>) -> Result<Vec<OsString>, CliError> {
    let mut path = None;
    for (i, a) in args.iter().enumerate() {
        let s = a.to_string_lossy();
        if s == "--config" {
            path = args.get(i + 1).map(PathBuf::from);
        } else if let Some(p) = s.strip_prefix("--config=") {
            path = Some(PathBuf::from(p));
        }
    }
    let Some(path) = path else { return Ok(args) };
    let text = fs::read_to_string(&path).map_err(|e| CliError::new(EXIT_IO, format!("{}: {e}", path.display())))?;
    let mut extra = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            CliError::new(EXIT_USAGE, format!("{}:{}: expected key=value", path.display(), n + 1))
        })?;
        let flag = format!("--{}", key.trim().replace('_', "-"));
        match value.trim() {
            "true" => extra.push(OsString::from(flag)),
            "false" => {}
            v => {
                extra.push(OsString::from(flag));
                extra.push(OsString::from(v));
            }
        }
    }
    let insert_at = args
        .iter()
        .skip(1)
        .position(|a| !a.to_string_lossy().starts_with('-'))
        .map_or(args.len(), |p| p + 2);
    let mut out = args;
    out.splice(insert_at..insert_at, extra);
    Ok(out)
}

/// Parses `args` (program name first) and runs the command. Returns the
/// process exit code; clap errors exit 2.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString>,
{
    let args = match expand_config(args.into_iter().map(Into::into).collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return e.code;
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}

pub fn execute(command: Command) -> Result<(), CliError> {
    match command {
        Command::GenData(a) => gen_data(&a),
        Command::Train(a) => train(&a),
        Command::Denoise(a) => denoise(&a),
        Command::Eval(a) => eval(&a),
        Command::Gradcheck(a) => gradcheck(&a),
    }
}

pub fn gen_data(a: &GenDataArgs) -> Result<(), CliError> {
    let cfg = DatasetConfig {
        height: a.size.height,
        width: a.size.width,
        spp_noisy: a.spp_noisy,
        spp_reference: a.spp_ref,
    };
    let manifest = generate_dataset(&a.out, a.scenes as usize, a.seed, cfg)?;
    println!("generated {} samples -> {}", a.scenes, manifest.display());
    Ok(())
}

/// Network for `variant`, widths scaled by `scale`; SEMC is widened to match
/// the DEMC parameter count.
pub fn model_spec(variant: Variant, scale: f64, seed: u64) -> ModelSpec {
    let demc = ModelSpec::scaled(Variant::Demc, scale, seed);
    match variant {
        Variant::Demc => demc,
        Variant::Semc => demc.matched_semc(),
        Variant::DemcNoSn => ModelSpec::scaled(Variant::DemcNoSn, scale, seed),
    }
}

/// `<checkpoint>.loss.csv`
pub fn loss_log_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("loss.csv")
}

pub fn train(a: &TrainArgs) -> Result<(), CliError> {
    if !(a.width_scale > 0.0 && a.width_scale.is_finite()) {
        return Err(CliError::new(EXIT_USAGE, "--width-scale must be positive"));
    }
    let config = TrainConfig {
        lr_start: a.lr_start,
        lr_end: a.lr_end,
        total_iterations: a.iters,
        batch_size: a.batch,
        seed: a.seed,
        checkpoint_every: a.checkpoint_every,
        validation_fraction: a.val_fraction,
        validate_every: a.validate_every,
        patch_size: a.patch,
        patch_stride: a.stride,
        deterministic: a.deterministic,
        ..TrainConfig::default()
    };
    config.validate()?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::new(EXIT_IO, format!("{}: {e}", parent.display())))?;
    }
    let (train_set, val_set) = load_split(&a.manifest, &config)?;
    let mut trainer = match &a.resume {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            let trainer = Trainer::resume(&ckpt, train_set, val_set, config)?;
            let want = Variant::from(a.variant);
            if trainer.model().variant() != want {
                return Err(CliError::new(
                    EXIT_CHECKPOINT,
                    format!("{} holds a {} model, not {want}", path.display(), trainer.model().variant()),
                ));
            }
            trainer
        }
        None => Trainer::new(model_spec(a.variant.into(), a.width_scale, a.seed), train_set, val_set, config)?,
    };
    let result = trainer.run(Some(&a.out)).map(|log| log.last().cloned());
    let log_path = loss_log_path(&a.out);
    trainer.write_log(&log_path)?;
    let last = result?;
    if let Some(r) = last {
        let val = r.val_loss.map_or(String::new(), |v| format!(", val loss {v:.6}"));
        println!(
            "trained {} for {} iterations: train loss {:.6}{val} -> {} ({})",
            trainer.model().variant(),
            r.iteration,
            r.train_loss,
            a.out.display(),
            log_path.display()
        );
    }
    Ok(())
}

fn load_model(path: &Path, variant: Option<Variant>) -> Result<crate::net::Model<f32>, CliError> {
    let ckpt = load_checkpoint(path)?;
    let spec = ckpt.infer_spec()?;
    if let Some(want) = variant {
        if spec.variant != want {
            return Err(CliError::new(
                EXIT_CHECKPOINT,
                format!("{} holds a {} model, not {want}", path.display(), spec.variant),
            ));
        }
    }
    Ok(ckpt.model(&spec)?)
}

pub fn denoise(a: &DenoiseArgs) -> Result<(), CliError> {
    let model = load_model(&a.ckpt, a.variant.map(Variant::from))?;
    let sample = load_sample(&a.input)?;
    let out = metrics::denoise(&model, &sample)?;
    write_pfm(&a.out, &PfmImage::from_tensor(&out)?)?;
    println!("wrote {} ({}x{})", a.out.display(), sample.width(), sample.height());
    if let Some(reference) = &sample.reference {
        println!("RelMSE {:.6}", metrics::relmse_metric(&out, reference, LOSS_EPS)?);
        println!("SSIM   {:.6}", metrics::ssim_hdr(&out, reference)?);
    }
    Ok(())
}

fn load_samples(manifest: &Path) -> Result<Vec<(String, Sample)>, CliError> {
    read_manifest(manifest)?
        .into_iter()
        .map(|dir| {
            let name = dir.file_name().map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned());
            Ok((name, load_sample(&dir)?))
        })
        .collect()
}

pub fn eval(a: &EvalArgs) -> Result<(), CliError> {
    let samples = load_samples(&a.manifest)?;
    let paths: Vec<&PathBuf> = std::iter::once(&a.ckpt).chain(&a.ckpt2).collect();
    let models = paths
        .iter()
        .map(|p| load_model(p, None))
        .collect::<Result<Vec<_>, _>>()?;
    let mut reports = Vec::new();
    if a.baseline == Some(Baseline::Noisy) {
        reports.push(metrics::evaluate_noisy(&samples)?);
    }
    for (path, model) in paths.iter().zip(&models) {
        let variant = model.variant();
        let unique = models.iter().filter(|m| m.variant() == variant).count() == 1;
        let label = if unique {
            variant.label().to_string()
        } else {
            path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned())
        };
        reports.push(metrics::evaluate(model, &samples, &label)?);
    }
    print!("{}", metrics::report_table(&reports));
    if let Some(csv) = &a.csv {
        fs::write(csv, metrics::report_csv(&reports)).map_err(|e| CliError::new(EXIT_IO, format!("{}: {e}", csv.display())))?;
    }
    Ok(())
}

pub fn gradcheck(a: &GradcheckArgs) -> Result<(), CliError> {
    let fault = match &a.inject_fault {
        Some(name) => Some(op_kind(name).ok_or_else(|| CliError::new(EXIT_USAGE, format!("unknown op '{name}'")))?),
        None => None,
    };
    let reports = grad_suite(a.seed, fault).map_err(|e| CliError::new(EXIT_GRADCHECK, e.to_string()))?;
    let width = reports.iter().map(|r| r.name.len()).max().unwrap_or(0);
    for r in &reports {
        let status = if r.passed() { "ok" } else { "FAIL" };
        println!("{:width$}  {:.3e}  (<= {:.0e})  {status}", r.name, r.max_rel_error, r.threshold);
    }
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::new(EXIT_GRADCHECK, format!("gradient check failed: {}", failed.join(", "))))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn os(v: &[&str]) -> Vec<OsString> {
        v.iter().map(OsString::from).collect()
    }

    #[test]
    fn size_parsing() {
        assert_eq!("200x150".parse::<Size>(), Ok(Size { height: 200, width: 150 }));
        assert!("0x5".parse::<Size>().is_err());
        assert!("12".parse::<Size>().is_err());
    }

    #[test]
    fn config_entries_precede_flags() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("run.cfg");
        fs::write(&cfg, "# run\niters = 50\nbatch=2\ndeterministic=true\nlr_start=0.001\n").unwrap();
        let args = os(&["demc", "train", "--config", cfg.to_str().unwrap(), "--iters", "7", "--manifest", "m", "--out", "o"]);
        let expanded = expand_config(args).unwrap();
        let Command::Train(t) = Cli::try_parse_from(expanded).unwrap().command else {
            panic!("not train");
        };
        assert_eq!(t.iters, 7);
        assert_eq!(t.batch, 2);
        assert!(t.deterministic);
        assert_eq!(t.lr_start, 1e-3);
    }

    #[test]
    fn bad_config_line_is_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("run.cfg");
        fs::write(&cfg, "iters\n").unwrap();
        let e = expand_config(os(&["demc", "train", "--config", cfg.to_str().unwrap()])).unwrap_err();
        assert_eq!(e.code, EXIT_USAGE);
    }

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(run(["demc", "gen-data", "--out", "x", "--scenes", "0"]), EXIT_USAGE);
        assert_eq!(run(["demc", "train", "--bogus"]), EXIT_USAGE);
        assert_eq!(run(["demc", "frobnicate"]), EXIT_USAGE);
        assert_eq!(run(["demc", "eval", "--help"]), EXIT_OK);
    }

    #[test]
    fn semc_spec_matches_demc_size() {
        let demc = model_spec(Variant::Demc, 0.25, 0).param_count() as f64;
        let semc = model_spec(Variant::Semc, 0.25, 0).param_count() as f64;
        assert!((semc - demc).abs() / demc < 0.02);
    }
}
