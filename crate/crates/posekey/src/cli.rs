//! Command-line front end: dataset synthesis, training, sampling,
//! evaluation, and report emission as subcommands of one binary. Each
//! subcommand accepts an optional TOML config; explicit flags override
//! config values, and every run leaves a resolved-config snapshot next
//! to its outputs. Exit codes: 0 success, 1 runtime failure, 2 usage.

use std::collections::HashSet;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ndarray::{Array3, Axis};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::detector::{AdapterConfig, DetectorHandle};
use crate::error::Error;
use crate::eval::{evaluate_run, EvalOptions, MetricReport, Sampler, SmallCnn};
use crate::report::{emit_report, ComparisonRow};
use crate::seeding::{rng_from, tag};
use crate::skeleton::{mean_joint_distance_px, normalize_keypoints};
use crate::synth::{generate_dataset, load_dataset, save_png, Dataset, SynthConfig};
use crate::train::{train, ModelKind, TrainConfig};

/// Top-level argument grammar.
#[derive(Parser)]
#[command(
    name = "posekey",
    version,
    about = "Pose-aware conditional generation of codified dance key postures"
)]
struct Cli {
    #[command(subcommand)]
    command: CliCommand,
}

#[derive(Subcommand)]
enum CliCommand {
    /// Generate the synthetic codified-posture dataset
    SynthData(SynthDataArgs),
    /// Train one of the four model configurations
    Train(TrainArgs),
    /// Sample an image grid from a trained checkpoint
    Sample(SampleArgs),
    /// Evaluate checkpoints: metrics per model plus combined tables
    Eval(EvalArgs),
    /// Combine existing evaluation reports into tables and plots
    Report(ReportArgs),
}

#[derive(Args)]
struct OutDirArg {
    /// Output root; falls back to POSEKEY_OUT_DIR, then the current
    /// directory
    #[arg(long, env = "POSEKEY_OUT_DIR", default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct SynthDataArgs {
    /// TOML config with classes/per_class/image_size/seed keys
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    out: OutDirArg,
    /// Number of posture classes
    #[arg(long)]
    classes: Option<usize>,
    /// Images per class
    #[arg(long)]
    per_class: Option<usize>,
    /// Square image side in pixels
    #[arg(long)]
    image_size: Option<u32>,
    /// Dataset seed
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct SynthFileConfig {
    classes: Option<usize>,
    per_class: Option<usize>,
    image_size: Option<u32>,
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML training config; flags override its values
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    out: OutDirArg,
    /// Which configuration to train
    #[arg(long)]
    model: Option<ModelKind>,
    /// Dataset directory; defaults to <out-dir>/dataset
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Training epochs
    #[arg(long)]
    epochs: Option<u64>,
    /// Run seed
    #[arg(long)]
    seed: Option<u64>,
    /// Expected image side; must match the dataset
    #[arg(long)]
    image_size: Option<u32>,
    /// Keypoint-loss weight (pose configurations only)
    #[arg(long)]
    lambda_kp: Option<f64>,
    /// Pose-consistency-loss weight (pose configurations only)
    #[arg(long)]
    lambda_pose: Option<f64>,
}

#[derive(Args)]
struct SampleArgs {
    /// TOML config with checkpoint/n_samples/steps/guidance/seed keys
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    out: OutDirArg,
    /// Trained model checkpoint
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Samples per class: the grid has this many rows
    #[arg(long)]
    n_samples: Option<usize>,
    /// Respaced diffusion sampling steps
    #[arg(long)]
    steps: Option<usize>,
    /// Guidance-scale override for diffusion checkpoints
    #[arg(long)]
    guidance: Option<f32>,
    /// Sampling seed
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleFileConfig {
    checkpoint: Option<PathBuf>,
    n_samples: Option<usize>,
    steps: Option<usize>,
    guidance: Option<f32>,
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    /// TOML config mirroring the eval flags
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    out: OutDirArg,
    /// Checkpoint to evaluate; repeat the flag for several models
    #[arg(long = "checkpoint")]
    checkpoints: Vec<PathBuf>,
    /// Dataset directory; defaults to <out-dir>/dataset
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Generated samples per class
    #[arg(long)]
    n_samples: Option<usize>,
    /// Respaced diffusion sampling steps during evaluation
    #[arg(long)]
    steps: Option<usize>,
    /// External detector command for keypoint scoring, split on
    /// whitespace; the default is the built-in differentiable extractor
    #[arg(long)]
    adapter_cmd: Option<String>,
    /// Feature-extractor checkpoint; trained and cached there when
    /// absent. Defaults to <out-dir>/feature_extractor.ckpt
    #[arg(long)]
    extractor: Option<PathBuf>,
    /// Epochs for a freshly trained feature extractor
    #[arg(long)]
    extractor_epochs: Option<usize>,
    /// Evaluation seed
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct EvalFileConfig {
    checkpoints: Option<Vec<PathBuf>>,
    dataset: Option<PathBuf>,
    n_samples: Option<usize>,
    steps: Option<usize>,
    adapter_cmd: Option<String>,
    extractor: Option<PathBuf>,
    extractor_epochs: Option<usize>,
    seed: Option<u64>,
}

#[derive(Args)]
struct ReportArgs {
    /// TOML config listing reports/extra_rows
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    out: OutDirArg,
    /// Evaluation JSON to include; repeat per model. Defaults to every
    /// eval_*.json under the output directory
    #[arg(long = "report")]
    reports: Vec<PathBuf>,
    /// JSON file with extra comparison rows for table3.csv
    #[arg(long)]
    extra_rows: Option<PathBuf>,
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ReportFileConfig {
    reports: Option<Vec<PathBuf>>,
    extra_rows: Option<PathBuf>,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Runtime(e)
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Parses and runs a full invocation; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // help and version requests print to stdout and succeed;
            // everything else is a usage error
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        CliCommand::SynthData(a) => run_synth_data(a),
        CliCommand::Train(a) => run_train(a),
        CliCommand::Sample(a) => run_sample(a),
        CliCommand::Eval(a) => run_eval(a),
        CliCommand::Report(a) => run_report(a),
    };
    match result {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            eprintln!("error[usage]: {msg}");
            2
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error[{}]: {e}", e.category());
            1
        }
    }
}

fn load_file_config<T: DeserializeOwned + Default>(path: &Option<PathBuf>) -> Result<T, CliError> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| usage(format!("cannot read {}: {e}", p.display())))?;
            toml::from_str(&text).map_err(|e| usage(format!("{}: {e}", p.display())))
        }
    }
}

fn require_file(path: &Path) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(usage(format!("missing file: {}", path.display())))
    }
}

fn write_snapshot<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let json = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Runtime(Error::Config(format!("snapshot: {e}"))))?;
    fs::write(path, json).map_err(|e| CliError::Runtime(Error::io(path, e)))?;
    Ok(())
}

fn run_synth_data(a: SynthDataArgs) -> Result<(), CliError> {
    let file: SynthFileConfig = load_file_config(&a.config)?;
    let cfg = SynthConfig {
        num_classes: a.classes.or(file.classes).unwrap_or(20),
        per_class: a.per_class.or(file.per_class).unwrap_or(200),
        image_size: a.image_size.or(file.image_size).unwrap_or(128),
        seed: a.seed.or(file.seed).unwrap_or(0),
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let out = a.out.out_dir.join("dataset");
    fs::create_dir_all(&out).map_err(|e| CliError::Runtime(Error::io(&out, e)))?;
    generate_dataset(&out, &cfg)?;
    println!("wrote {}", out.join("manifest.csv").display());
    Ok(())
}

fn run_train(a: TrainArgs) -> Result<(), CliError> {
    let mut cfg = match &a.config {
        Some(p) => {
            require_file(p)?;
            TrainConfig::from_toml_path(p).map_err(|e| usage(e.to_string()))?
        }
        None => {
            let model = a
                .model
                .ok_or_else(|| usage("--model is required when no --config is given"))?;
            let dataset =
                a.dataset.clone().unwrap_or_else(|| a.out.out_dir.join("dataset"));
            TrainConfig::new(model, dataset, 30)
        }
    };
    if let Some(m) = a.model {
        cfg.model_kind = m;
    }
    if let Some(d) = &a.dataset {
        cfg.dataset = d.clone();
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(i) = a.image_size {
        cfg.image_size = Some(i);
    }
    if let Some(l) = a.lambda_kp {
        cfg.lambda_kp = l;
    }
    if let Some(l) = a.lambda_pose {
        cfg.lambda_pose = l;
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    require_file(&cfg.dataset.join("manifest.csv"))?;
    let run_dir = a.out.out_dir.join(cfg.model_kind.as_str());
    let outcome = train(&cfg, &run_dir)?;
    println!("wrote {}", outcome.checkpoint.display());
    Ok(())
}

#[derive(Serialize)]
struct SampleSnapshot<'a> {
    checkpoint: &'a Path,
    model: &'a str,
    n_samples: usize,
    steps: Option<usize>,
    guidance: Option<f32>,
    seed: u64,
}

fn run_sample(a: SampleArgs) -> Result<(), CliError> {
    let file: SampleFileConfig = load_file_config(&a.config)?;
    let checkpoint = a
        .checkpoint
        .or(file.checkpoint)
        .ok_or_else(|| usage("--checkpoint is required"))?;
    require_file(&checkpoint)?;
    let n = a.n_samples.or(file.n_samples).unwrap_or(8);
    if n == 0 {
        return Err(usage("--n-samples must be positive"));
    }
    let steps = a.steps.or(file.steps);
    let guidance = a.guidance.or(file.guidance);
    let seed = a.seed.or(file.seed).unwrap_or(0);

    let sampler = Sampler::from_checkpoint(&checkpoint)?;
    let classes = sampler.num_classes();
    let size = sampler.image_size() as usize;
    let mut grid = Array3::<f32>::zeros((3, n * size, classes * size));
    for c in 0..classes {
        let mut rng = rng_from(seed, &[tag::SAMPLE, c as u64]);
        let batch = sampler.sample(&vec![c; n], steps, guidance, &mut rng)?;
        for i in 0..n {
            let sample = batch.index_axis(Axis(0), i);
            grid.slice_mut(ndarray::s![
                ..,
                i * size..(i + 1) * size,
                c * size..(c + 1) * size
            ])
            .assign(&sample);
        }
    }
    let dir = a.out.out_dir.join("samples");
    fs::create_dir_all(&dir).map_err(|e| CliError::Runtime(Error::io(&dir, e)))?;
    let grid_path = dir.join(format!("grid_{}.png", sampler.kind().as_str()));
    save_png(&grid_path, &grid)?;
    write_snapshot(
        &dir.join(format!("sample_config_{}.json", sampler.kind().as_str())),
        &SampleSnapshot {
            checkpoint: &checkpoint,
            model: sampler.kind().as_str(),
            n_samples: n,
            steps,
            guidance,
            seed,
        },
    )?;
    println!("wrote {}", grid_path.display());
    Ok(())
}

#[derive(Serialize)]
struct EvalSnapshot<'a> {
    checkpoints: &'a [PathBuf],
    dataset: &'a Path,
    n_samples: usize,
    steps: Option<usize>,
    seed: u64,
    adapter_cmd: Option<&'a str>,
    extractor: &'a Path,
    extractor_epochs: usize,
}

fn run_eval(a: EvalArgs) -> Result<(), CliError> {
    let file: EvalFileConfig = load_file_config(&a.config)?;
    let checkpoints = if a.checkpoints.is_empty() {
        file.checkpoints.unwrap_or_default()
    } else {
        a.checkpoints
    };
    if checkpoints.is_empty() {
        return Err(usage("at least one --checkpoint is required"));
    }
    for ckpt in &checkpoints {
        require_file(ckpt)?;
    }
    let dataset_dir = a
        .dataset
        .or(file.dataset)
        .unwrap_or_else(|| a.out.out_dir.join("dataset"));
    require_file(&dataset_dir.join("manifest.csv"))?;
    let n_samples = a.n_samples.or(file.n_samples).unwrap_or(100);
    let steps = a.steps.or(file.steps);
    let seed = a.seed.or(file.seed).unwrap_or(0);
    let adapter_cmd = a.adapter_cmd.or(file.adapter_cmd);
    let extractor_path = a
        .extractor
        .or(file.extractor)
        .unwrap_or_else(|| a.out.out_dir.join("feature_extractor.ckpt"));
    let extractor_epochs = a.extractor_epochs.or(file.extractor_epochs).unwrap_or(5);

    let mut dataset = load_dataset(&dataset_dir)?;
    dataset.preload()?;
    let extractor = SmallCnn::load_or_train(&extractor_path, &dataset, extractor_epochs, seed)?;
    let opts = EvalOptions { n_per_class: n_samples, sample_steps: steps, batch_size: 25, seed };

    fs::create_dir_all(&a.out.out_dir)
        .map_err(|e| CliError::Runtime(Error::io(&a.out.out_dir, e)))?;
    let mut reports = Vec::new();
    let mut used_names = HashSet::new();
    for ckpt in &checkpoints {
        let mut report = evaluate_run(ckpt, &mut dataset, &extractor, &opts)?;
        if let Some(cmd) = &adapter_cmd {
            adapter_rescore(&mut report, ckpt, &dataset, &opts, cmd, &a.out.out_dir)?;
        }
        let mut name = format!("eval_{}.json", report.model);
        let mut k = 2;
        while !used_names.insert(name.clone()) {
            name = format!("eval_{}_{k}.json", report.model);
            k += 1;
        }
        let path = a.out.out_dir.join(&name);
        write_snapshot(&path, &report)?;
        println!("wrote {}", path.display());
        reports.push(report);
    }
    let files = emit_report(&reports, &[], &a.out.out_dir)?;
    write_snapshot(
        &a.out.out_dir.join("eval_config.json"),
        &EvalSnapshot {
            checkpoints: &checkpoints,
            dataset: &dataset_dir,
            n_samples,
            steps,
            seed,
            adapter_cmd: adapter_cmd.as_deref(),
            extractor: &extractor_path,
            extractor_epochs,
        },
    )?;
    println!("wrote {}", files.table1.display());
    Ok(())
}

/// Re-scores the keypoint-error metric through an external detector:
/// regenerates the evaluated samples (same seeds, hence the same
/// images), hands each to the detector as a PNG path, and replaces the
/// keypoint columns of the report.
fn adapter_rescore(
    report: &mut MetricReport,
    checkpoint: &Path,
    dataset: &Dataset,
    opts: &EvalOptions,
    cmd: &str,
    out_dir: &Path,
) -> Result<(), CliError> {
    let argv: Vec<String> = cmd.split_whitespace().map(str::to_string).collect();
    if argv.is_empty() {
        return Err(usage("--adapter-cmd is empty"));
    }
    let joints = dataset.bank[0].pose.joint_count();
    let mut handle = DetectorHandle::spawn(AdapterConfig::identity(argv, joints))?;
    let sampler = Sampler::from_checkpoint(checkpoint)?;
    let scratch = out_dir.join("adapter_scratch");
    fs::create_dir_all(&scratch).map_err(|e| CliError::Runtime(Error::io(&scratch, e)))?;
    let size = dataset.meta.image_size;
    let classes = dataset.meta.num_classes;
    let mut sums = vec![0.0f64; classes];
    let mut counts = vec![0usize; classes];
    let mut missing = 0usize;
    for c in 0..classes {
        let mut rng = rng_from(opts.seed, &[tag::EVAL, 2, c as u64]);
        let mut produced = 0usize;
        while produced < opts.n_per_class {
            let b = (opts.n_per_class - produced).min(opts.batch_size);
            let batch = sampler.sample(&vec![c; b], opts.sample_steps, None, &mut rng)?;
            for i in 0..b {
                let img = batch.index_axis(Axis(0), i).to_owned();
                let path = scratch.join(format!("c{c}_{:03}.png", produced + i));
                save_png(&path, &img)?;
                let scored = handle
                    .detect(&path)
                    .and_then(|pose| normalize_keypoints(&pose, (size, size)))
                    .ok()
                    .and_then(|(pose, _)| {
                        mean_joint_distance_px(&pose, &dataset.bank[c].pose, size)
                    });
                match scored {
                    Some(d) => {
                        sums[c] += d;
                        counts[c] += 1;
                    }
                    None => missing += 1,
                }
            }
            produced += b;
        }
    }
    let counted: usize = counts.iter().sum();
    report.mean_kp_err_px = if counted > 0 {
        Some(sums.iter().sum::<f64>() / counted as f64)
    } else {
        None
    };
    report.kp_missing = missing;
    for (row, (&s, &n)) in report.per_class.iter_mut().zip(sums.iter().zip(&counts)) {
        row.mean_kp_err_px = if n > 0 { Some(s / n as f64) } else { None };
    }
    report.meta.kp_source = format!("external adapter: {cmd}");
    Ok(())
}

#[derive(Serialize)]
struct ReportSnapshot<'a> {
    reports: &'a [PathBuf],
    extra_rows: Option<&'a Path>,
}

fn run_report(a: ReportArgs) -> Result<(), CliError> {
    let file: ReportFileConfig = load_file_config(&a.config)?;
    let mut inputs = if a.reports.is_empty() {
        file.reports.unwrap_or_default()
    } else {
        a.reports
    };
    if inputs.is_empty() {
        inputs = scan_eval_jsons(&a.out.out_dir)?;
    }
    if inputs.is_empty() {
        return Err(usage(format!(
            "no evaluation reports given and none found under {}",
            a.out.out_dir.display()
        )));
    }
    let mut reports = Vec::with_capacity(inputs.len());
    for path in &inputs {
        require_file(path)?;
        let text = fs::read_to_string(path)
            .map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
        let report: MetricReport = serde_json::from_str(&text)
            .map_err(|e| usage(format!("{}: {e}", path.display())))?;
        reports.push(report);
    }
    let extra_path = a.extra_rows.or(file.extra_rows);
    let extras: Vec<ComparisonRow> = match &extra_path {
        None => Vec::new(),
        Some(p) => {
            require_file(p)?;
            let text = fs::read_to_string(p)
                .map_err(|e| usage(format!("cannot read {}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", p.display())))?
        }
    };
    let files = emit_report(&reports, &extras, &a.out.out_dir)?;
    write_snapshot(
        &a.out.out_dir.join("report_config.json"),
        &ReportSnapshot { reports: &inputs, extra_rows: extra_path.as_deref() },
    )?;
    println!("wrote {}", files.table1.display());
    for plot in &files.plots {
        println!("wrote {}", plot.display());
    }
    Ok(())
}

/// All `eval_*.json` files directly under a directory, sorted by name.
fn scan_eval_jsons(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut found = Vec::new();
    let entries = match fs::read_dir(dir) {
        Ok(entries) => entries,
        Err(_) => return Ok(found),
    };
    for entry in entries {
        let entry = entry.map_err(|e| CliError::Runtime(Error::io(dir, e)))?;
        let name = entry.file_name();
        let name = name.to_string_lossy();
        if name.starts_with("eval_")
            && name.ends_with(".json")
            && name != "eval_config.json"
        {
            found.push(entry.path());
        }
    }
    found.sort();
    Ok(found)
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn argument_grammar_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn usage_errors_exit_with_two() {
        assert_eq!(run(["posekey", "synth-data", "--bogus-flag"]), 2);
        assert_eq!(run(["posekey", "no-such-command"]), 2);
        assert_eq!(run(["posekey", "train"]), 2, "train without model or config");
    }

    #[test]
    fn help_requests_exit_with_zero() {
        assert_eq!(run(["posekey", "--help"]), 0);
        assert_eq!(run(["posekey", "train", "--help"]), 0);
    }

    #[test]
    fn eval_json_scan_is_sorted_and_skips_the_snapshot() {
        let dir = tempfile::tempdir().unwrap();
        for name in ["eval_cdiff.json", "eval_cgan.json", "eval_config.json", "other.json"] {
            fs::write(dir.path().join(name), "{}").unwrap();
        }
        let found = scan_eval_jsons(dir.path()).unwrap();
        let names: Vec<String> = found
            .iter()
            .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
            .collect();
        assert_eq!(names, ["eval_cdiff.json", "eval_cgan.json"]);
    }
}
