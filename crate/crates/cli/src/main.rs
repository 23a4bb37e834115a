use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use curate_core::filter::FilterScope;
use curate_core::pipeline::config::DiversityBackend;
use curate_core::pipeline::{Pipeline, PipelineError, PipelineStage, RunConfig, StageOutcome};

/// Curation pipeline for text-rich image instruction data.
#[derive(Parser, Debug)]
#[command(name = "curate", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Run configuration (TOML).
    #[arg(short, long, global = true, default_value = "curate.toml")]
    config: PathBuf,
    /// Rerun stages even when already done.
    #[arg(long, global = true)]
    force: bool,
    #[arg(long, global = true)]
    workdir: Option<PathBuf>,
    #[arg(long, global = true)]
    input: Option<PathBuf>,
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    #[arg(long, global = true)]
    parallelism: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Fixed provenance timestamp.
    #[arg(long, global = true)]
    timestamp: Option<String>,
}

#[derive(Args, Debug, Default)]
struct FilterArgs {
    /// Fraction of extractive pairs kept by mIFD.
    #[arg(long)]
    mifd_keep: Option<f64>,
    #[arg(long)]
    ffd_low: Option<f64>,
    #[arg(long)]
    ffd_high: Option<f64>,
    #[arg(long, value_enum)]
    scope: Option<Scope>,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Scope {
    Global,
    PerImage,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum BackendArg {
    Embedding,
    Task2vec,
}

#[derive(Args, Debug, Default)]
struct DiversityArgs {
    #[arg(long, value_enum)]
    backend: Option<BackendArg>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    num_batches: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Read raw OCR JSONL into validated records.
    Ingest,
    /// Rewrite manual captions with OCR detail.
    Enrich,
    /// Generate extractive QA pairs.
    GenExtractive,
    /// Generate one self-explain pair per extractive pair.
    GenSelfexplain,
    /// Compute mIFD and FFD for every pair.
    Score,
    /// Apply the mIFD keep fraction and the FFD band.
    Filter(FilterArgs),
    /// Filter at keep levels 10% to 90%.
    Sweep(FilterArgs),
    /// Measure the diversity coefficient of the instructions.
    Diversity(DiversityArgs),
    /// Question taxonomy, length histograms and dataset summary.
    Stats {
        #[arg(long)]
        taxonomy: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the final dataset and a markdown report.
    Report,
    /// Run every enabled stage in order.
    Run {
        #[arg(long)]
        stop_after: Option<PipelineStage>,
        #[command(flatten)]
        filter: FilterArgs,
        #[command(flatten)]
        diversity: DiversityArgs,
    },
}

fn apply_filter(config: &mut RunConfig, f: &FilterArgs) {
    if let Some(v) = f.mifd_keep {
        config.filter.mifd_keep_fraction = v;
    }
    if let Some(v) = f.ffd_low {
        config.filter.ffd_low_quantile = v;
    }
    if let Some(v) = f.ffd_high {
        config.filter.ffd_high_quantile = v;
    }
    if let Some(s) = f.scope {
        config.filter.scope = match s {
            Scope::Global => FilterScope::Global,
            Scope::PerImage => FilterScope::PerImage,
        };
    }
}

fn apply_diversity(config: &mut RunConfig, d: &DiversityArgs) {
    if let Some(b) = d.backend {
        config.diversity.backend = match b {
            BackendArg::Embedding => DiversityBackend::Embedding,
            BackendArg::Task2vec => DiversityBackend::Task2vec,
        };
    }
    if let Some(v) = d.batch_size {
        config.diversity.batch_size = v;
    }
    if let Some(v) = d.num_batches {
        config.diversity.num_batches = v;
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, PipelineError> {
    let c = &cli.common;
    let mut config = RunConfig::load(&c.config).map_err(PipelineError::Config)?;
    if let Some(p) = &c.workdir {
        config.paths.workdir = p.clone();
    }
    if let Some(p) = &c.input {
        config.paths.input = p.clone();
    }
    if let Some(p) = &c.output {
        config.paths.output = Some(p.clone());
    }
    if let Some(v) = c.parallelism {
        config.parallelism = v;
    }
    if let Some(v) = c.seed {
        config.seed = v;
    }
    if let Some(v) = &c.timestamp {
        config.timestamp = Some(v.clone());
    }
    match &cli.command {
        Command::Filter(f) | Command::Sweep(f) => apply_filter(&mut config, f),
        Command::Diversity(d) => apply_diversity(&mut config, d),
        Command::Stats { taxonomy, out } => {
            if let Some(t) = taxonomy {
                config.stats.taxonomy = Some(t.clone());
            }
            if let Some(o) = out {
                config.stats.out = Some(o.clone());
            }
        }
        Command::Run { filter, diversity, .. } => {
            apply_filter(&mut config, filter);
            apply_diversity(&mut config, diversity);
        }
        _ => {}
    }
    Ok(config)
}

fn print_outcome(o: &StageOutcome) {
    let state = if o.skipped { "up to date" } else { "done" };
    println!("{:<16} {state:<10} in={} out={}", o.stage.as_str(), o.count_in, o.count_out);
}

fn execute(cli: &Cli) -> Result<(), PipelineError> {
    let config = load_config(cli)?;
    let mut pipeline = Pipeline::open(config, cli.common.force)?;
    let stage = match &cli.command {
        Command::Ingest => PipelineStage::Ingest,
        Command::Enrich => PipelineStage::Enrich,
        Command::GenExtractive => PipelineStage::GenExtractive,
        Command::GenSelfexplain => PipelineStage::GenSelfexplain,
        Command::Score => PipelineStage::Score,
        Command::Filter(_) => PipelineStage::Filter,
        Command::Sweep(_) => PipelineStage::Sweep,
        Command::Diversity(_) => PipelineStage::Diversity,
        Command::Stats { .. } => PipelineStage::Stats,
        Command::Report => PipelineStage::Report,
        Command::Run { stop_after, .. } => {
            for o in pipeline.run_all(*stop_after)? {
                print_outcome(&o);
            }
            return Ok(());
        }
    };
    print_outcome(&pipeline.run(stage)?);
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
