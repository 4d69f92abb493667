use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use inkmark::pipeline::{
    cmd_analyze, cmd_calibrate, cmd_detect, cmd_evaluate, cmd_generate, cmd_pipeline, cmd_report, cmd_train,
    AnalyzeArgs, CalibrateArgs, DetectArgs, EvaluateArgs, GenerateArgs, ReportArgs, RunConfig, TrainArgs,
};
use inkmark::Error;

#[derive(Parser)]
#[command(
    name = "inkmark",
    version,
    about = "Watermark, detect and evaluate language model output"
)]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an n-gram model on a corpus.
    Train(TrainArgs),
    /// Find the boost and green fraction reaching an intensity target.
    Calibrate(CalibrateArgs),
    /// Write (optionally watermarked) generations as transcript JSONL.
    Generate(GenerateArgs),
    /// Score transcripts and optionally write an ROC curve.
    Detect(DetectArgs),
    /// Score tasks with and without a watermark.
    Evaluate(EvaluateArgs),
    /// Label-partition enumeration and option rank stability.
    Analyze(AnalyzeArgs),
    /// Summarize evaluation reports as markdown and CSV.
    Report(ReportArgs),
    /// Run every stage end to end.
    Pipeline {
        /// JSON run configuration; defaults apply to missing fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Stop after this stage (train, calibrate, evaluate, analyze, report).
        #[arg(long)]
        stop_after: Option<String>,
    },
}

fn is_usage_error(e: &Error) -> bool {
    match e {
        Error::Io { source, .. } => source.kind() == std::io::ErrorKind::NotFound,
        Error::Stage { source, .. } => is_usage_error(source),
        Error::InvalidParameter(_) => true,
        _ => false,
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Train(a) => cmd_train(&a).map(drop),
        Command::Calibrate(a) => cmd_calibrate(&a).map(|r| {
            println!(
                "{} gamma={} delta={:.4}",
                r.scheme, r.chosen.gamma, r.chosen.delta
            );
        }),
        Command::Generate(a) => cmd_generate(&a).map(drop),
        Command::Detect(a) => cmd_detect(&a).map(|records| {
            let flagged = records.iter().filter(|r| r.report.decision).count();
            println!("{flagged}/{} flagged as watermarked", records.len());
        }),
        Command::Evaluate(a) => cmd_evaluate(&a).map(drop),
        Command::Analyze(a) => cmd_analyze(&a).map(drop),
        Command::Report(a) => cmd_report(&a).map(|s| print!("{}", s.markdown)),
        Command::Pipeline {
            config,
            seed,
            out,
            stop_after,
        } => {
            let mut cfg = match config {
                Some(p) => RunConfig::load(&p)?,
                None => RunConfig::default(),
            };
            cfg.seed = seed.unwrap_or(cfg.seed);
            cfg.out_dir = out.unwrap_or(cfg.out_dir);
            cfg.workers = cli.workers.or(cfg.workers);
            let outcome = cmd_pipeline(&cfg, stop_after.as_deref())?;
            if let Some(s) = outcome.summary {
                print!("{}", s.markdown);
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.workers {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global();
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if is_usage_error(&e) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
