//! Command-line front end for the long-tailed training laboratory.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use lfme::config::{Ablation, RunConfig};
use lfme::distribution::{self, GeneratorSpec, Profile};
use lfme::error::{Error, Result};
use lfme::metrics::{self, ComparisonRow, LogBase};
use lfme::training::{self, RunReport, StudentOptions, TrainReport};

#[derive(Parser)]
#[command(name = "lfme", version, about = "Long-tailed classification lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic long-tailed dataset and its label manifest.
    GenData(GenDataArgs),
    /// Longtailness metrics for a label manifest, Table-style.
    Metrics(MetricsArgs),
    /// Train one expert per cardinality-adjacent subset.
    TrainExperts(StageArgs),
    /// Train the plain baseline model.
    TrainPlain(StageArgs),
    /// Train the distilled student (requires expert artifacts).
    TrainStudent(TrainStudentArgs),
    /// Full pipeline: data, metrics, experts, plain, student, report.
    Run(StageArgs),
    /// Summarize one or more run directories.
    Report(ReportArgs),
    /// Check analytic gradients against finite differences.
    GradCheck(GradCheckArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Read the generator section from this run config instead of flags.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 30)]
    classes: usize,
    /// Cardinality profile: `exp` or `pareto`.
    #[arg(long, default_value = "exp")]
    profile: String,
    /// For `exp`: ratio between the largest and smallest class.
    #[arg(long, default_value_t = 100.0)]
    imbalance: f64,
    /// For `pareto`: power of the decay.
    #[arg(long, default_value_t = 6.0)]
    power: f64,
    #[arg(long, default_value_t = 100)]
    max_count: u64,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 3.0)]
    separation: f64,
    #[arg(long, default_value_t = 20)]
    eval_per_class: u64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Dataset output path.
    #[arg(long, required = true)]
    out: PathBuf,
    /// Manifest output path (defaults to `<out>.manifest.csv`).
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args)]
struct MetricsArgs {
    #[arg(long, required = true)]
    manifest: PathBuf,
    /// Comma-separated split thresholds, e.g. `20,100`.
    #[arg(long, value_delimiter = ',')]
    thresholds: Vec<u64>,
    /// KL log base: `nat` or `2`.
    #[arg(long, default_value = "nat")]
    log_base: String,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct StageArgs {
    #[arg(long, required = true)]
    config: PathBuf,
    /// Run directory. Falls back to the config's `output_dir`, then to
    /// `$LFME_OUTPUT_ROOT/<config stem>`.
    #[arg(long)]
    run: Option<PathBuf>,
}

#[derive(Args)]
struct TrainStudentArgs {
    #[command(flatten)]
    stage: StageArgs,
    /// Ablation arm: `no-spes` fixes w at 1, `no-curriculum` fixes v at 1.
    /// Repeat the flag to combine arms.
    #[arg(long)]
    ablate: Vec<String>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long, required = true)]
    run: PathBuf,
    #[arg(long)]
    compare: Vec<PathBuf>,
}

#[derive(Args)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 20)]
    trials: usize,
    #[arg(long, default_value_t = 1e-5)]
    tolerance: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            let mut source = std::error::Error::source(&err);
            while let Some(inner) = source {
                eprintln!("  caused by: {inner}");
                source = inner.source();
            }
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(args) => cmd_gen_data(args),
        Command::Metrics(args) => cmd_metrics(args),
        Command::TrainExperts(args) => cmd_train_experts(args),
        Command::TrainPlain(args) => cmd_train_plain(args),
        Command::TrainStudent(args) => cmd_train_student(args),
        Command::Run(args) => cmd_run(args),
        Command::Report(args) => cmd_report(args),
        Command::GradCheck(args) => cmd_grad_check(args),
    }
}

fn cmd_gen_data(args: GenDataArgs) -> Result<()> {
    let spec = match &args.config {
        Some(path) => RunConfig::load(path)?.generator,
        None => {
            let profile = match args.profile.as_str() {
                "exp" | "exponential" => Profile::Exponential,
                "pareto" => Profile::Pareto { power: args.power },
                other => {
                    return Err(Error::InvalidSpec(format!(
                        "unknown profile `{other}` (expected exp or pareto)"
                    )))
                }
            };
            if args.imbalance < 1.0 {
                return Err(Error::InvalidSpec("imbalance must be >= 1".into()));
            }
            GeneratorSpec {
                num_classes: args.classes,
                max_cardinality: args.max_count,
                min_cardinality: ((args.max_count as f64 / args.imbalance).round() as u64).max(1),
                profile,
                feature_dim: args.dim,
                class_separation: args.separation,
                seed: args.seed,
                eval_per_class: args.eval_per_class,
            }
        }
    };
    let (dataset, dist) = distribution::generate(&spec)?;
    distribution::save_dataset(&dataset, &args.out)?;
    let manifest_path = args
        .manifest
        .unwrap_or_else(|| args.out.with_extension("manifest.csv"));
    distribution::save_manifest(&dist, &manifest_path)?;

    println!(
        "generated {} instances over {} classes (train counts {} down to {})",
        dataset.instances().len(),
        dist.num_classes(),
        dist.counts().iter().map(|&(_, n)| n).max().unwrap_or(0),
        dist.counts().iter().map(|&(_, n)| n).min().unwrap_or(0),
    );
    println!("dataset:  {}", args.out.display());
    println!("manifest: {}", manifest_path.display());
    Ok(())
}

fn parse_log_base(s: &str) -> Result<LogBase> {
    match s {
        "nat" | "natural" | "e" => Ok(LogBase::Natural),
        "2" | "base2" => Ok(LogBase::Base2),
        other => Err(Error::InvalidSpec(format!(
            "unknown log base `{other}` (expected nat or 2)"
        ))),
    }
}

fn cmd_metrics(args: MetricsArgs) -> Result<()> {
    let base = parse_log_base(&args.log_base)?;
    let dist = distribution::load_manifest(&args.manifest)?;
    let rows: Vec<ComparisonRow<f64>> = if args.thresholds.is_empty() {
        vec![ComparisonRow {
            name: "entire".into(),
            report: metrics::report(&dist, base),
        }]
    } else {
        let split = metrics::split_by_thresholds(&dist, &args.thresholds)?;
        metrics::longtailness_comparison(&dist, &split, base)?
    };
    if args.json {
        println!(
            "{}",
            serde_json::to_string_pretty(&rows).map_err(|e| Error::Format(e.to_string()))?
        );
    } else {
        print_metric_table(&rows);
    }
    Ok(())
}

fn print_metric_table(rows: &[ComparisonRow<f64>]) {
    let name_width = rows.iter().map(|r| r.name.len()).max().unwrap_or(6).max(6);
    println!(
        "{:<name_width$}  {:>10} {:>10} {:>10} {:>10}",
        "", "I_Ratio", "I_KL", "I_Abs", "I_Gini"
    );
    for row in rows {
        println!(
            "{:<name_width$}  {:>10.4} {:>10.4} {:>10.4} {:>10.4}",
            row.name, row.report.ratio, row.report.kl, row.report.abs_dev, row.report.gini
        );
    }
}

fn resolve_run_dir(args: &StageArgs, config: &RunConfig) -> Result<PathBuf> {
    if let Some(dir) = &args.run {
        return Ok(dir.clone());
    }
    if let Some(dir) = &config.output_dir {
        return Ok(dir.clone());
    }
    if let Ok(root) = std::env::var("LFME_OUTPUT_ROOT") {
        let stem = args
            .config
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "run".into());
        return Ok(PathBuf::from(root).join(stem));
    }
    Err(Error::Config(
        "no run directory: pass --run, set output_dir in the config, or set LFME_OUTPUT_ROOT"
            .into(),
    ))
}

fn cmd_train_experts(args: StageArgs) -> Result<()> {
    let config = RunConfig::load(&args.config)?;
    let run_dir = resolve_run_dir(&args, &config)?;
    let (dataset, dist) = training::stage_data(&config, &run_dir)?;
    let bundle = training::stage_experts(&config, &run_dir, &dataset, &dist)?;
    for (l, acc) in bundle.expert_val_acc.iter().enumerate() {
        println!(
            "expert {} [{}]: {} classes, val acc {:.4}",
            l + 1,
            bundle.split.band_label(l),
            bundle.split.subsets[l].class_ids.len(),
            acc
        );
    }
    println!("artifacts: {}", run_dir.display());
    Ok(())
}

fn cmd_train_plain(args: StageArgs) -> Result<()> {
    let config = RunConfig::load(&args.config)?;
    let run_dir = resolve_run_dir(&args, &config)?;
    let (dataset, dist) = training::stage_data(&config, &run_dir)?;
    let thresholds = config.split.resolve(&dist)?;
    let split = metrics::split_by_thresholds(&dist, &thresholds)?;
    let (_, report) = training::stage_plain(&config, &run_dir, &dataset, &split)?;
    print_accuracy_row("plain", &report);
    Ok(())
}

fn cmd_train_student(args: TrainStudentArgs) -> Result<()> {
    let config = RunConfig::load(&args.stage.config)?;
    let run_dir = resolve_run_dir(&args.stage, &config)?;
    let ablations: Vec<Ablation> = args
        .ablate
        .iter()
        .map(|s| s.parse())
        .collect::<Result<_>>()?;
    let options = StudentOptions::from_ablations(&ablations);
    let (dataset, _) = training::stage_data(&config, &run_dir)?;
    let experts = training::load_experts(&run_dir)?;
    let (_, report) = training::stage_student(&config, &run_dir, &dataset, &experts, &options)?;
    print_accuracy_row("student", &report);

    // with the plain stage already run, assemble the combined report
    let plain_path = run_dir.join(training::PLAIN_REPORT);
    if plain_path.exists() {
        let plain: TrainReport = training::read_json(&plain_path)?;
        let dist = dataset.train_distribution()?;
        let thresholds = config.split.resolve(&dist)?;
        let metric_rows =
            metrics::longtailness_comparison(&dist, &experts.split, config.log_base)?;
        let full = RunReport {
            config_hash: config.hash()?,
            thresholds,
            metrics: metric_rows,
            expert_val_acc: experts.expert_val_acc.clone(),
            plain,
            student: report,
        };
        let json =
            serde_json::to_string_pretty(&full).map_err(|e| Error::Format(e.to_string()))?;
        let path = run_dir.join(training::REPORT_FILE);
        std::fs::write(&path, json + "\n").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn cmd_run(args: StageArgs) -> Result<()> {
    let config = RunConfig::load(&args.config)?;
    let run_dir = resolve_run_dir(&args, &config)?;
    let report = training::run_experiment(&config, &run_dir)?;
    println!("metrics ({:?} thresholds):", report.thresholds);
    print_metric_table(&report.metrics);
    println!();
    print_accuracy_row("plain", &report.plain);
    print_accuracy_row("student", &report.student);
    println!("report: {}", run_dir.join(training::REPORT_FILE).display());
    Ok(())
}

fn print_accuracy_row(name: &str, report: &TrainReport) {
    let subsets = report
        .test
        .per_subset
        .iter()
        .map(|a| format!("{a:.4}"))
        .collect::<Vec<_>>()
        .join(" ");
    println!("{name:<10} test acc per subset (few..many): {subsets}  all: {:.4}", report.test.all);
}

fn cmd_report(args: ReportArgs) -> Result<()> {
    let base = load_report(&args.run)?;
    let mut rows = vec![(dir_name(&args.run), base.clone())];
    for dir in &args.compare {
        rows.push((dir_name(dir), load_report(dir)?));
    }

    let num_subsets = base.student.test.per_subset.len();
    print!("{:<24} {:<8}", "run", "model");
    for l in 0..num_subsets {
        print!(" {:>8}", format!("S{}", l + 1));
    }
    println!(" {:>8}", "all");
    for (name, report) in &rows {
        for (model, table) in [("plain", &report.plain.test), ("student", &report.student.test)] {
            print!("{name:<24} {model:<8}");
            for acc in &table.per_subset {
                print!(" {acc:>8.4}");
            }
            println!(" {:>8.4}", table.all);
        }
    }
    if rows.len() > 1 {
        let baseline = rows[0].1.student.test.all;
        println!();
        for (name, report) in rows.iter().skip(1) {
            println!(
                "{name:<24} student all delta vs {}: {:+.4}",
                rows[0].0,
                report.student.test.all - baseline
            );
        }
    }
    Ok(())
}

fn dir_name(path: &Path) -> String {
    path.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn load_report(run_dir: &Path) -> Result<RunReport> {
    let path = run_dir.join(training::REPORT_FILE);
    if !path.exists() {
        return Err(Error::MissingArtifact(format!(
            "{} (run the pipeline first)",
            path.display()
        )));
    }
    training::read_json(&path)
}

fn cmd_grad_check(args: GradCheckArgs) -> Result<()> {
    let report = lfme::neural::grad_check(args.trials, args.tolerance, args.seed)?;
    println!(
        "grad check: {} trials, max relative error {:.3e} (tolerance {:.1e}) -> {}",
        report.trials,
        report.max_rel_err,
        report.tolerance,
        if report.pass { "PASS" } else { "FAIL" }
    );
    if !report.pass {
        return Err(Error::Validation("gradient check failed".into()));
    }
    Ok(())
}
