//! File-based pipeline: one subcommand per stage, artifacts under one output
//! directory.

pub mod config;
pub mod files;
pub mod stages;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::{ArchConfig, Base, Case, PipelineConfig};
pub use stages::Ctx;

use crate::error::{Error, Result};
use crate::estimate::RegWeights;

#[derive(Debug, Parser)]
#[command(name = "hybrid-ident", version, about = "Incremental identification of dynamic hybrid models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub opts: Opts,
}

#[derive(Debug, Clone, Default, Args)]
pub struct Opts {
    /// TOML pipeline configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory for all artifacts.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// cstr, three-tank or user-model-manifest.
    #[arg(long, global = true)]
    pub case: Option<String>,
    /// Correlation threshold.
    #[arg(long, global = true)]
    pub tau: Option<f64>,
    /// Scalar regularization weight.
    #[arg(long, global = true)]
    pub wreg: Option<f64>,
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Simulate the ground truth and write noisy datasets.
    GenData,
    /// Regularized flux estimation on every dataset.
    Estimate,
    /// Stack estimated states, MVs and fluxes into the flux table.
    Table,
    /// Pearson screening of flux inputs.
    Correlate,
    /// Train one network per screened flux.
    Train,
    /// Bind networks and constants into a hybrid manifest.
    Assemble,
    /// Compare hybrid and truth on held-out MV profiles.
    Simulate,
    /// Re-simulate the datasets with the hybrid model.
    Evaluate,
    /// Closed-loop MPC on the three-tank plant.
    Mpc,
    /// All stages in order.
    Pipeline,
}

impl Command {
    pub const STAGES: [Command; 8] = [
        Command::GenData,
        Command::Estimate,
        Command::Table,
        Command::Correlate,
        Command::Train,
        Command::Assemble,
        Command::Simulate,
        Command::Evaluate,
    ];
}

/// Effective configuration and output directory for `opts`.
pub fn context(opts: &Opts) -> Result<Ctx> {
    let case = opts.case.as_deref().map(Case::parse).transpose()?;
    let default_out = |c: Case| {
        let name = match c {
            Case::Cstr => "cstr",
            Case::ThreeTank => "three-tank",
            Case::UserModelManifest => "user-model",
        };
        PathBuf::from("runs").join(name)
    };
    let (mut cfg, out) = match &opts.config {
        Some(p) => {
            let mut cfg = PipelineConfig::load(p)?;
            if let Some(c) = case {
                cfg.case = c;
            }
            let out = opts.out.clone().or_else(|| cfg.out.clone()).unwrap_or_else(|| default_out(cfg.case));
            (cfg, out)
        }
        None => {
            let out = opts.out.clone().unwrap_or_else(|| default_out(case.unwrap_or(Case::Cstr)));
            let stored = out.join(stages::CONFIG_FILE);
            let cfg = if stored.exists() {
                let cfg = PipelineConfig::load(&stored)?;
                match case {
                    Some(c) if c != cfg.case => PipelineConfig::defaults(c),
                    _ => cfg,
                }
            } else {
                PipelineConfig::defaults(case.unwrap_or(Case::Cstr))
            };
            (cfg, out)
        }
    };
    if let Some(s) = opts.seed {
        cfg.seed = s;
    }
    cfg.resolve()?;
    if let Some(tau) = opts.tau {
        cfg.analysis.as_mut().expect("resolved").tau = tau;
    }
    if let Some(w) = opts.wreg {
        cfg.estimation.as_mut().expect("resolved").w_reg = RegWeights::Scalar(w);
    }
    if let Some(e) = opts.epochs {
        cfg.training.train.epochs = e;
    }
    Ctx::new(cfg, out)
}

fn run_stage(cmd: Command, ctx: &Ctx) -> Result<String> {
    match cmd {
        Command::GenData => stages::gen_data(ctx),
        Command::Estimate => stages::estimate(ctx),
        Command::Table => stages::table(ctx),
        Command::Correlate => stages::correlate_stage(ctx),
        Command::Train => stages::train(ctx),
        Command::Assemble => stages::assemble(ctx),
        Command::Simulate => stages::simulate_stage(ctx),
        Command::Evaluate => stages::evaluate(ctx),
        Command::Mpc => stages::mpc(ctx),
        Command::Pipeline => unreachable!("expanded by run"),
    }
}

/// Runs `cmd`, handing each one-line stage summary to `emit`.
pub fn run(cmd: Command, opts: &Opts, emit: &mut dyn FnMut(&str)) -> Result<()> {
    let ctx = context(opts)?;
    if cmd != Command::Pipeline {
        emit(&run_stage(cmd, &ctx)?);
        return Ok(());
    }
    for stage in Command::STAGES {
        emit(&run_stage(stage, &ctx)?);
    }
    if ctx.base == Base::Tank {
        emit(&run_stage(Command::Mpc, &ctx)?);
    }
    Ok(())
}

/// Process entry point: parses `args`, runs, and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command, &cli.opts, &mut |line| println!("{line}")) {
        Ok(()) => 0,
        Err(e) => report(&e),
    }
}

fn report(e: &Error) -> i32 {
    let cat = e.category();
    eprintln!("error[{}]: {e}", cat.as_str());
    cat.exit_code()
}
