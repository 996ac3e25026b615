use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use verifact_core::evaluation::{render_report, ReportFormat};
use verifact_core::model::Method;
use verifact_core::runtime::{
    cmd_ablate, cmd_eval, cmd_report, cmd_run, parse_ablation_list, write_report, RunConfig,
    RuntimeError,
};

#[derive(Parser)]
#[command(
    name = "verifact",
    version,
    about = "Claim-verifying chain-of-thought runs and their evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one method over a dataset, appending records to a run file.
    Run(RunArgs),
    /// Score a run file against the dataset's gold facts.
    Eval(EvalArgs),
    /// Run the full pipeline and its single-stage ablations, then compare.
    Ablate(AblateArgs),
    /// Merge report files into one table.
    Report(ReportArgs),
}

#[derive(Args)]
struct Common {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Task dataset (one JSON task per line).
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Gold-matching Jaccard threshold.
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    /// Retrieval corpus for cot_rag (one JSON document per line).
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// verifact, standard_cot or cot_rag.
    #[arg(long)]
    method: Option<Method>,
    /// Stages to skip: comma list of claim-extraction, verification, refinement.
    #[arg(long)]
    ablate: Option<String>,
    /// Run file to append to.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Number of retrieved documents for cot_rag.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    /// Run file to score.
    run_file: PathBuf,
    #[command(flatten)]
    common: Common,
    /// Where to write the JSON report.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "plain")]
    format: ReportFormat,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    common: Common,
    /// Output directory for run files, report.json and ablation.txt.
    #[arg(long)]
    out: PathBuf,
    /// Also run the standard chain-of-thought baseline.
    #[arg(long)]
    baseline: bool,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long, default_value = "plain")]
    format: ReportFormat,
}

#[derive(Args)]
struct ReportArgs {
    /// Report files written by eval or ablate.
    #[arg(required = true)]
    reports: Vec<PathBuf>,
    #[arg(long, default_value = "plain")]
    format: ReportFormat,
}

fn base_config(common: &Common) -> Result<RunConfig, RuntimeError> {
    let mut config = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(d) = &common.dataset {
        config.dataset = Some(d.clone());
    }
    if let Some(t) = common.threshold {
        config.threshold = t;
    }
    Ok(config)
}

fn run(args: RunArgs) -> Result<(), RuntimeError> {
    let mut config = base_config(&args.common)?;
    if let Some(m) = args.method {
        config.method = m;
    }
    if let Some(list) = &args.ablate {
        config.ablation = parse_ablation_list(list).map_err(RuntimeError::Config)?;
    }
    if let Some(c) = args.corpus {
        config.corpus = Some(c);
    }
    if let Some(o) = args.out {
        config.out = Some(o);
    }
    if let Some(k) = args.k {
        config.k = k;
    }
    if let Some(w) = args.workers {
        config.workers = w;
    }
    let summary = cmd_run(&config)?;
    println!("{summary}");
    Ok(())
}

fn eval(args: EvalArgs) -> Result<(), RuntimeError> {
    let config = base_config(&args.common)?;
    let report = cmd_eval(&args.run_file, &config)?;
    if let Some(out) = &args.out {
        write_report(&report, out)?;
    }
    print!("{}", render_report(&report, args.format));
    Ok(())
}

fn ablate(args: AblateArgs) -> Result<(), RuntimeError> {
    let mut config = base_config(&args.common)?;
    if let Some(w) = args.workers {
        config.workers = w;
    }
    let summary = cmd_ablate(&config, &args.out, args.baseline, args.format)?;
    for (path, runs) in summary.run_files.iter().zip(&summary.runs) {
        println!("{}: {runs}", display(path));
    }
    print!("{}", summary.table);
    Ok(())
}

fn report(args: ReportArgs) -> Result<(), RuntimeError> {
    let merged = cmd_report(&args.reports)?;
    print!("{}", render_report(&merged, args.format));
    Ok(())
}

fn display(path: &Path) -> String {
    path.display().to_string()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => run(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
