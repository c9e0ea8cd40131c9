use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use causal_concepts::pipeline::{self, PipelineConfig, Stage};
use causal_concepts::Result;

#[derive(Parser)]
#[command(name = "causal-concepts", version, about = "Causal concept effects on a synthetic image classifier")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON configuration; missing fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed (overrides the config).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides the config).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    GenData(Common),
    Train(Common),
    FitConcepts(Common),
    Counterfactuals(Common),
    Mediate(Common),
    Rank(Common),
    Surrogate(Common),
    Report(Common),
    /// Run a single named stage.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        stage: String,
    },
    /// Run every stage in order.
    RunAll(Common),
}

fn load(common: &Common) -> Result<PipelineConfig> {
    let mut cfg = match &common.config {
        Some(p) => PipelineConfig::from_json_file(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.out_dir = o.clone();
    }
    Ok(cfg)
}

fn execute(cmd: Command) -> Result<()> {
    let (common, stage) = match cmd {
        Command::RunAll(c) => {
            let cfg = load(&c)?;
            let m = pipeline::run_all(&cfg)?;
            for (name, t) in &m.stages {
                eprintln!("{name:>16}  {:8.2}s", t.seconds);
            }
            println!("report written to {}", cfg.out_dir.join("report").display());
            return Ok(());
        }
        Command::Run { common, stage } => {
            let s = Stage::parse(&stage)?;
            (common, s)
        }
        Command::GenData(c) => (c, Stage::GenData),
        Command::Train(c) => (c, Stage::Train),
        Command::FitConcepts(c) => (c, Stage::FitConcepts),
        Command::Counterfactuals(c) => (c, Stage::Counterfactuals),
        Command::Mediate(c) => (c, Stage::Mediate),
        Command::Rank(c) => (c, Stage::Rank),
        Command::Surrogate(c) => (c, Stage::Surrogate),
        Command::Report(c) => (c, Stage::Report),
    };
    let cfg = load(&common)?;
    let m = pipeline::run_stage(stage, &cfg)?;
    if let Some(t) = m.stages.get(stage.name()) {
        eprintln!("{}: done in {:.2}s", stage.name(), t.seconds);
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
