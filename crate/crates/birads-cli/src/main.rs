//! Pipeline driver for the breast-ultrasound multitask CAD model.
//!
//! Subcommands: `generate` phantom datasets, `train` with k-fold
//! cross-validation or a single split, `evaluate` a checkpoint against a
//! manifest, `ablate` through the component and branch ladders, `predict`
//! over a manifest, and `report` a single image as an explanation JSON with
//! an optional probability-bar figure.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/validation error, 3 runtime
//! failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use birads_net::dataset::{load_manifest, make_fold_plan, make_single_split, BBox, FoldPlan};
use birads_net::error::Error;
use birads_net::evaluation::{
    evaluate_model, make_explanation_report, render_report_figure, run_ablation_suite,
    write_ablation_csv, write_ablation_json, write_metrics,
};
use birads_net::lexicon::likelihood_to_category;
use birads_net::model::checkpoint::{load_checkpoint, save_checkpoint};
use birads_net::phantom::{generate_dataset_with, GenerateOptions};
use birads_net::preprocess::load_grayscale;
use birads_net::training::{run_cross_validation, TrainConfig};

#[derive(Parser)]
#[command(
    name = "birads-net",
    about = "Breast-ultrasound multitask CAD: descriptors, likelihood of malignancy, tumor class",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom dataset with a manifest.
    Generate(GenerateArgs),
    /// Train with cross-validation or a single split.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a manifest.
    Evaluate(EvaluateArgs),
    /// Run the component-toggle and branch-ladder ablation suites.
    Ablate(AblateArgs),
    /// Predict all records of a manifest with a checkpoint.
    Predict(PredictArgs),
    /// Explain one image: descriptor probabilities, likelihood, category.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Number of phantoms to generate.
    #[arg(long)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for PNGs, manifest.csv, and generation.json.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 128)]
    height: usize,
    #[arg(long, default_value_t = 160)]
    width: usize,
    /// Target malignant fraction.
    #[arg(long, default_value_t = 0.4)]
    malignant_fraction: f64,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset manifest CSV.
    #[arg(long)]
    manifest: PathBuf,
    /// Training config (JSON or TOML); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (checkpoints/, logs/, metrics/).
    #[arg(long)]
    out: PathBuf,
    /// Number of cross-validation folds.
    #[arg(long, conflicts_with = "split")]
    folds: Option<usize>,
    /// Single-split mode: training fraction, e.g. 0.8.
    #[arg(long)]
    split: Option<f64>,
    /// Validation fraction carved out of each training set.
    #[arg(long, default_value_t = 0.15)]
    val_fraction: f64,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Optional output directory for metrics files.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Base training config for every ablation row.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    #[arg(long, default_value_t = 0.15)]
    val_fraction: f64,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Output CSV path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Grayscale PNG to explain.
    #[arg(long)]
    image: PathBuf,
    /// Tumor bounding box as x0,y0,x1,y1.
    #[arg(long)]
    bbox: String,
    /// Optional probability-bar figure output.
    #[arg(long)]
    figure: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(UsageError(message)) => {
            eprintln!("usage error: {message}");
            ExitCode::from(1)
        }
    }
}

/// CLI-level validation failures exit with code 1; library errors map to 2
/// (data) or 3 (runtime) and are reported before this type is constructed.
struct UsageError(String);

fn exit_with(error: Error) -> UsageError {
    let code = if error.is_data_error() { 2 } else { 3 };
    eprintln!("error: {error}");
    std::process::exit(code);
}

type CliResult = Result<(), UsageError>;

fn lib<T>(result: birads_net::Result<T>) -> Result<T, UsageError> {
    result.map_err(exit_with)
}

fn write_run_config(out: &Path, command: &str, config: &serde_json::Value) -> Result<(), UsageError> {
    let record = serde_json::json!({ "command": command, "effective_config": config });
    let text = serde_json::to_string_pretty(&record).expect("config serializes");
    lib(fs::write(out.join("run_config.json"), text + "\n").map_err(Error::from))
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Generate(args) => generate(args),
        Command::Train(args) => train(args),
        Command::Evaluate(args) => evaluate(args),
        Command::Ablate(args) => ablate(args),
        Command::Predict(args) => predict(args),
        Command::Report(args) => report(args),
    }
}

fn generate(args: GenerateArgs) -> CliResult {
    if args.count == 0 {
        return Err(UsageError("--count must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&args.malignant_fraction) {
        return Err(UsageError("--malignant-fraction must lie in [0, 1]".into()));
    }
    let options = GenerateOptions {
        height: args.height,
        width: args.width,
        malignant_fraction: args.malignant_fraction,
        ..Default::default()
    };
    lib(fs::create_dir_all(&args.out).map_err(Error::from))?;
    let manifest = lib(generate_dataset_with(args.count, args.seed, &args.out, &options))?;
    write_run_config(
        &args.out,
        "generate",
        &serde_json::json!({ "count": args.count, "seed": args.seed, "options": options }),
    )?;
    println!(
        "generated {} phantoms under {} (manifest.csv, generation.json)",
        manifest.len(),
        args.out.display()
    );
    Ok(())
}

fn train(args: TrainArgs) -> CliResult {
    let config = match &args.config {
        Some(path) => lib(TrainConfig::load(path))?,
        None => TrainConfig::default(),
    };
    let manifest = lib(load_manifest(&args.manifest))?;

    let plan: FoldPlan = match (args.folds, args.split) {
        (Some(_), Some(_)) => unreachable!("clap conflicts_with"),
        (None, Some(train_fraction)) => lib(make_single_split(
            &manifest,
            train_fraction,
            args.val_fraction,
            config.seed,
        ))?,
        (folds, None) => lib(make_fold_plan(
            &manifest,
            folds.unwrap_or(5),
            args.val_fraction,
            config.seed,
        ))?,
    };

    let out = &args.out;
    for sub in ["checkpoints", "logs", "metrics"] {
        lib(fs::create_dir_all(out.join(sub)).map_err(Error::from))?;
    }
    lib(plan.save(out.join("fold_plan.json")))?;
    write_run_config(
        out,
        "train",
        &serde_json::to_value(&config).expect("config serializes"),
    )?;

    let outcome = lib(run_cross_validation(&manifest, &plan, &config))?;
    for fold in &outcome.folds {
        let dir = out.join("checkpoints").join(format!("fold_{}", fold.fold));
        lib(save_checkpoint(&fold.model, &config.preprocess, &dir))?;
        lib(fold
            .log
            .write_ldjson(out.join("logs").join(format!("fold_{}.ldjson", fold.fold))))?;
        lib(write_metrics(
            &fold.metrics,
            out.join("metrics").join(format!("fold_{}", fold.fold)),
        ))?;
        println!(
            "fold {}: best epoch {}, test tumor accuracy {}",
            fold.fold,
            fold.log.best_epoch,
            fold.metrics
                .tumor_accuracy
                .map(|a| format!("{a:.4}"))
                .unwrap_or_else(|| "n/a".into())
        );
    }
    lib(write_metrics(&outcome.aggregate, out.join("metrics").join("aggregate")))?;
    println!(
        "aggregate tumor accuracy: {}",
        outcome
            .aggregate
            .tumor_accuracy
            .map(|a| format!("{a:.4}"))
            .unwrap_or_else(|| "n/a".into())
    );
    Ok(())
}

fn evaluate(args: EvaluateArgs) -> CliResult {
    let (model, preprocess) = lib(load_checkpoint(&args.checkpoint))?;
    let manifest = lib(load_manifest(&args.manifest))?;
    let metrics = lib(evaluate_model(&model, &manifest.records, &preprocess))?;
    let json = serde_json::to_string_pretty(&metrics).expect("metrics serialize");
    println!("{json}");
    if let Some(out) = &args.out {
        lib(fs::create_dir_all(out).map_err(Error::from))?;
        lib(write_metrics(&metrics, out.join("metrics")))?;
        write_run_config(
            out,
            "evaluate",
            &serde_json::json!({
                "checkpoint": args.checkpoint.display().to_string(),
                "manifest": args.manifest.display().to_string(),
            }),
        )?;
    }
    Ok(())
}

fn ablate(args: AblateArgs) -> CliResult {
    let config = match &args.config {
        Some(path) => lib(TrainConfig::load(path))?,
        None => TrainConfig::default(),
    };
    let manifest = lib(load_manifest(&args.manifest))?;
    let plan = lib(make_fold_plan(
        &manifest,
        args.folds,
        args.val_fraction,
        config.seed,
    ))?;
    lib(fs::create_dir_all(args.out.join("metrics")).map_err(Error::from))?;
    write_run_config(
        &args.out,
        "ablate",
        &serde_json::to_value(&config).expect("config serializes"),
    )?;
    let rows = lib(run_ablation_suite(&manifest, &plan, &config))?;
    lib(write_ablation_csv(&rows, args.out.join("metrics").join("ablation.csv")))?;
    lib(write_ablation_json(&rows, args.out.join("metrics").join("ablation.json")))?;
    for row in &rows {
        println!(
            "{}/{}: tumor accuracy {}",
            row.suite,
            row.label,
            row.metrics
                .tumor_accuracy
                .map(|a| format!("{a:.4}"))
                .unwrap_or_else(|| "n/a".into())
        );
    }
    Ok(())
}

fn predict(args: PredictArgs) -> CliResult {
    let (model, preprocess) = lib(load_checkpoint(&args.checkpoint))?;
    let manifest = lib(load_manifest(&args.manifest))?;
    let mut lines = vec![
        "image_path,predicted_class,malignant_probability,likelihood,birads_category".to_string(),
    ];
    for record in &manifest.records {
        let input = lib(birads_net::preprocess::preprocess_record::<f32>(
            record,
            &preprocess,
        ))?;
        let outputs = lib(model.infer(&input))?;
        let malignant = outputs.malignant_prob() as f64;
        let class = if malignant >= outputs.tumor[0] as f64 {
            "malignant"
        } else {
            "benign"
        };
        lines.push(format!(
            "{},{},{:.6},{:.6},{}",
            record.image_path.display(),
            class,
            malignant,
            outputs.likelihood,
            likelihood_to_category(outputs.likelihood as f64)
        ));
    }
    let text = lines.join("\n") + "\n";
    match &args.out {
        Some(path) => lib(fs::write(path, text).map_err(Error::from))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn parse_bbox(text: &str) -> Result<BBox, UsageError> {
    let parts: Vec<&str> = text.split(',').collect();
    if parts.len() != 4 {
        return Err(UsageError(format!(
            "--bbox expects x0,y0,x1,y1, got `{text}`"
        )));
    }
    let mut values = [0u32; 4];
    for (slot, part) in values.iter_mut().zip(&parts) {
        *slot = part
            .trim()
            .parse::<u32>()
            .map_err(|_| UsageError(format!("--bbox: `{part}` is not a nonnegative integer")))?;
    }
    Ok(BBox::new(values[0], values[1], values[2], values[3]))
}

fn report(args: ReportArgs) -> CliResult {
    let bbox = parse_bbox(&args.bbox)?;
    let (model, preprocess) = lib(load_checkpoint(&args.checkpoint))?;
    let image = lib(load_grayscale::<f32>(&args.image))?;
    let report = lib(make_explanation_report(&model, &image, &bbox, &preprocess))?;
    if let Some(figure) = &args.figure {
        lib(render_report_figure(&report, figure))?;
    }
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    println!("{json}");
    Ok(())
}
