use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use macs::config::{PipelineConfig, Profile};
use macs::error::{Error, Result};
use macs::pipeline::{Outcome, Pipeline, Stage};
use macs::policy::Variant;

#[derive(Parser)]
#[command(name = "macs", version, about = "Skill-based retrieval for multi-agent collaborative manipulation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args, Clone)]
struct Common {
    /// TOML config; overrides --profile.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in profile: desk or paper-scale.
    #[arg(long, default_value = "desk")]
    profile: String,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "runs/desk")]
    out: PathBuf,
    /// Rerun even when the stage record is up to date.
    #[arg(long)]
    force: bool,
    /// Restrict train-policy and eval to one variant.
    #[arg(long)]
    variant: Option<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate prior and target demonstrations.
    GenData(Common),
    /// Train the skill encoder on the prior data.
    TrainEncoder(Common),
    /// Embed the prior data into the skill database.
    BuildDb(Common),
    /// Retrieve demonstrations for every target task.
    Retrieve(Common),
    /// Train policies for each variant and task.
    TrainPolicy(Common),
    /// Evaluate trained policies and write the results table.
    Eval(Common),
    /// Project skill vectors to 2-D.
    EmbedViz(Common),
    /// Run every stage in order.
    Run(Common),
    /// Print the resolved config as TOML.
    PrintConfig(Common),
}

fn pipeline(c: &Common) -> Result<Pipeline> {
    let mut cfg = match &c.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::profile(c.profile.parse::<Profile>()?),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    let mut p = Pipeline::new(cfg, c.out.clone())?;
    p.force = c.force;
    p.variant = c.variant.as_deref().map(str::parse::<Variant>).transpose()?;
    Ok(p)
}

fn run_stage(p: &Pipeline, stage: Stage) -> Result<()> {
    let outcomes = p.run(stage)?;
    let ran = outcomes.iter().filter(|o| **o == Outcome::Ran).count();
    eprintln!(
        "{}: {ran} ran, {} up to date",
        stage.name(),
        outcomes.len() - ran
    );
    Ok(())
}

fn main_inner(cli: Cli) -> Result<()> {
    let (c, stages): (&Common, Vec<Stage>) = match &cli.cmd {
        Cmd::GenData(c) => (c, vec![Stage::GenData]),
        Cmd::TrainEncoder(c) => (c, vec![Stage::TrainEncoder]),
        Cmd::BuildDb(c) => (c, vec![Stage::BuildDb]),
        Cmd::Retrieve(c) => (c, vec![Stage::Retrieve]),
        Cmd::TrainPolicy(c) => (c, vec![Stage::TrainPolicy]),
        Cmd::Eval(c) => (c, vec![Stage::Eval]),
        Cmd::EmbedViz(c) => (c, vec![Stage::EmbedViz]),
        Cmd::Run(c) => (c, Stage::ALL.to_vec()),
        Cmd::PrintConfig(c) => {
            print!("{}", pipeline(c)?.cfg.to_toml()?);
            return Ok(());
        }
    };
    let p = pipeline(c)?;
    for s in stages {
        run_stage(&p, s)?;
    }
    if let Some(report) = p.write_report()? {
        println!("{}", report.table_markdown()?);
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match main_inner(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(Error::exit_code(&e) as u8)
        }
    }
}
