use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use prism_cli::report::{collect_reports, emit_results};
use prism_cli::{DiversityInput, Pipeline, Result, RunConfig, Stage};

#[derive(Parser)]
#[command(name = "prism", version, about = "Multi-teacher dataset distillation pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Rerun even when the stage manifest is up to date.
    #[arg(long)]
    force: bool,
    #[arg(long, short)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train the teacher pool.
    Squeeze(Common),
    /// Synthesize images from the teacher pool.
    Recover {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Generate soft labels for the synthetic set.
    Relabel(Common),
    /// Train and evaluate students on the synthetic set.
    Validate(Common),
    /// Intra-class cosine similarity of synthetic or real images.
    Diversity {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        input: DiversityInput,
    },
    /// Tabulate eval_report.json files matching a glob.
    Report {
        #[arg(long)]
        glob: String,
        /// Directory for tables.csv and tables.txt.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every stage in order.
    All {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        workers: Option<usize>,
    },
}

fn pipeline(common: &Common, workers: Option<usize>) -> Result<Pipeline> {
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg = cfg.with_seed(seed)?;
    }
    if let Some(w) = workers {
        cfg.recovery.workers = w;
        cfg.validate()?;
    }
    let mut p = Pipeline::new(cfg);
    p.force = common.force;
    p.quiet = common.quiet;
    Ok(p)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Squeeze(c) => pipeline(&c, None)?.run(Stage::Squeeze).map(drop),
        Command::Recover { common, workers } => pipeline(&common, workers)?.run(Stage::Recover).map(drop),
        Command::Relabel(c) => pipeline(&c, None)?.run(Stage::Relabel).map(drop),
        Command::Validate(c) => {
            let p = pipeline(&c, None)?;
            p.run(Stage::Validate)?;
            print!("{}", p.tables()?.text);
            Ok(())
        }
        Command::Diversity { common, input } => {
            let p = pipeline(&common, None)?;
            p.run(Stage::Diversity(input))?;
            let r = p.diversity_report(input)?;
            println!("{}: mean intra-class cosine {:.4} ({} classes)", r.dataset, r.global_mean, r.per_class.len());
            Ok(())
        }
        Command::Report { glob, out } => {
            let reports: Vec<_> = collect_reports(&glob)?.into_iter().map(|(_, r)| r).collect();
            let tables = emit_results(&reports)?;
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)?;
                std::fs::write(dir.join("tables.csv"), &tables.csv)?;
                std::fs::write(dir.join("tables.txt"), &tables.text)?;
            }
            print!("{}", tables.text);
            Ok(())
        }
        Command::All { common, workers } => pipeline(&common, workers)?.run_all().map(drop),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
