//! Command-line front end: synthesize data, train the three stages, sample
//! forecasts, score them and plot lead-time curves.

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;
pub mod plot;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use recticast_core::cascade::{ForecastMode, GeneratorVariant};
use recticast_core::data::Split;

use crate::commands::{Context, Stage};
use crate::error::CliResult;

#[derive(Debug, Parser)]
#[command(name = "recticast", version, about = "Cascaded flow-matching precipitation nowcasting")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML run configuration; defaults are used when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (overrides RECTICAST_OUT and the config).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overwrite existing artifacts instead of refusing or resuming.
    #[arg(long, global = true)]
    pub force: bool,
    /// Suppress progress messages.
    #[arg(long, short, global = true)]
    pub quiet: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic radar dataset.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Train one stage; resumes from a matching checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        stage: StageArg,
        /// Generator conditioning (generator stage only).
        #[arg(long, value_enum, default_value = "rectified")]
        variant: VariantArg,
        /// Overrides the configured number of optimizer steps.
        #[arg(long)]
        steps: Option<u64>,
        /// Stop and checkpoint once this step is reached; rerun to resume.
        #[arg(long)]
        pause_at: Option<u64>,
    },
    /// Sample forecasts for a dataset split.
    Forecast {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "full")]
        mode: ModeArg,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Forecast at most this many windows.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Score forecasts against observations.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Selects `forecasts/<mode>` in the run directory.
        #[arg(long, value_enum, default_value = "full")]
        mode: ModeArg,
        /// Forecast directory (overrides --mode).
        #[arg(long)]
        forecasts: Option<PathBuf>,
        /// Dataset directory holding the observations.
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Where report.json and leadtime.csv go.
        #[arg(long)]
        report_dir: Option<PathBuf>,
    },
    /// Render lead-time curves as SVG.
    Plot {
        #[command(flatten)]
        common: Common,
        /// leadtime.csv files; defaults to every evaluated mode.
        #[arg(long, num_args = 1..)]
        reports: Vec<PathBuf>,
        /// One legend label per report.
        #[arg(long, num_args = 1..)]
        labels: Vec<String>,
    },
    /// Print the resolved configuration as TOML.
    Config {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum StageArg {
    Backbone,
    Rectifier,
    Generator,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum VariantArg {
    Rectified,
    RawMean,
    Residual,
}

impl From<VariantArg> for GeneratorVariant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Rectified => GeneratorVariant::Rectified,
            VariantArg::RawMean => GeneratorVariant::RawMean,
            VariantArg::Residual => GeneratorVariant::Residual,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum ModeArg {
    Full,
    BackboneOnly,
    NoRectifierY,
    NoRectifierResidual,
    NoGenerator,
}

impl From<ModeArg> for ForecastMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Full => ForecastMode::Full,
            ModeArg::BackboneOnly => ForecastMode::BackboneOnly,
            ModeArg::NoRectifierY => ForecastMode::NoRectifierY,
            ModeArg::NoRectifierResidual => ForecastMode::NoRectifierResidual,
            ModeArg::NoGenerator => ForecastMode::NoGenerator,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

fn context(c: &Common) -> CliResult<Context> {
    let mut ctx = Context::resolve(c.config.as_deref(), c.seed, c.out.clone(), c.force)?;
    ctx.quiet = c.quiet;
    Ok(ctx)
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Synth { common } => {
            let dir = commands::cmd_synth(&context(&common)?)?;
            println!("{}", dir.display());
        }
        Command::Train {
            common,
            stage,
            variant,
            steps,
            pause_at,
        } => {
            let stage = match stage {
                StageArg::Backbone => Stage::Backbone,
                StageArg::Rectifier => Stage::Rectifier,
                StageArg::Generator => Stage::Generator(variant.into()),
            };
            let dir = commands::cmd_train(&context(&common)?, stage, steps, pause_at)?;
            println!("{}", dir.display());
        }
        Command::Forecast {
            common,
            mode,
            split,
            limit,
        } => {
            let dir = commands::cmd_forecast(&context(&common)?, mode.into(), split.into(), limit)?;
            println!("{}", dir.display());
        }
        Command::Evaluate {
            common,
            mode,
            forecasts,
            truth,
            report_dir,
        } => {
            let ctx = context(&common)?;
            let forecasts = forecasts.unwrap_or_else(|| ctx.forecast_dir(mode.into()));
            let truth = truth.unwrap_or_else(|| ctx.data_dir());
            let rec = commands::cmd_evaluate(&ctx, &forecasts, &truth, report_dir.as_deref())?;
            let r = &rec.report;
            let summary = serde_json::json!({
                "mode": rec.mode, "samples": r.samples, "nfe": rec.nfe,
                "csi": r.csi, "csi4": r.csi4, "csi16": r.csi16, "hss": r.hss, "ssim": r.ssim, "mse": r.mse,
            });
            println!("{summary}");
        }
        Command::Plot { common, reports, labels } => {
            for p in commands::cmd_plot(&context(&common)?, &reports, &labels)? {
                println!("{}", p.display());
            }
        }
        Command::Config { common } => {
            print!("{}", context(&common)?.config.to_toml());
        }
    }
    Ok(())
}
