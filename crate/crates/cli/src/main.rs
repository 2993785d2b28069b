//! `saecv`: simulate populations, draw surveys, fit area models, compare
//! them by design-aware cross-validation, and run replicate studies.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::Overrides;

#[derive(Parser)]
#[command(name = "saecv", version, about = "Design-aware cross-validation for small area estimators")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML (or .json) configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `[output] dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed; overrides the file.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (0 = one per core).
    #[arg(long, default_value_t = 0)]
    jobs: usize,
}

#[derive(Args, Clone, Default)]
struct CvFlags {
    #[arg(long, value_enum)]
    scheme: Option<SchemeArg>,
    /// Number of folds.
    #[arg(long)]
    k: Option<usize>,
    /// Repeated splits for the two-fold scheme.
    #[arg(long)]
    resplits: Option<usize>,
    /// Area aggregation weights.
    #[arg(long, value_enum)]
    q: Option<QArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SchemeArg {
    Ssu,
    Psu,
    Twofold,
}

#[derive(Clone, Copy, ValueEnum)]
enum QArg {
    Equal,
    Population,
}

#[derive(Subcommand)]
enum Command {
    /// Build the cluster frame and synthetic population of a scenario.
    Simulate {
        #[command(flatten)]
        common: Common,
    },
    /// Draw one two-stage survey from a scenario's population.
    Survey {
        #[command(flatten)]
        common: Common,
        /// Population CSV written by `simulate`; regenerated from the
        /// scenario when absent.
        #[arg(long)]
        population: Option<PathBuf>,
        /// Which replicate survey of the study to draw.
        #[arg(long, default_value_t = 0)]
        replicate: usize,
    },
    /// Fit one model to the full sample.
    Fit {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: String,
        /// Survey microdata CSV.
        #[arg(long, required_unless_present = "direct", conflicts_with = "direct")]
        survey: Option<PathBuf>,
        /// Direct estimates CSV (Fay-Herriot models only).
        #[arg(long)]
        direct: Option<PathBuf>,
    },
    /// Compare the configured model pairs on a survey.
    Compare {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        cv: CvFlags,
        #[arg(long)]
        survey: PathBuf,
    },
    /// Run the replicate study of a scenario.
    Study {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        cv: CvFlags,
    },
    /// Summarise a study's output directory as Markdown.
    Report {
        /// Directory written by `study`.
        #[arg(long)]
        input: PathBuf,
        /// Where to write report.md; defaults to the input directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

impl CvFlags {
    fn overrides(&self, seed: Option<u64>) -> Overrides {
        use saecv_core::cv::Scheme;
        use saecv_core::WeightMode;
        Overrides {
            seed,
            scheme: self.scheme.map(|s| match s {
                SchemeArg::Ssu => Scheme::Ssu,
                SchemeArg::Psu => Scheme::Psu,
                SchemeArg::Twofold => Scheme::Twofold,
            }),
            k: self.k,
            resplits: self.resplits,
            q: self.q.map(|q| match q {
                QArg::Equal => WeightMode::Equal,
                QArg::Population => WeightMode::Population,
            }),
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Simulate { common } => {
            let ctx = commands::Context::new(&common.config, common.out.as_deref(), CvFlags::default().overrides(common.seed), common.jobs)?;
            commands::simulate(&ctx)
        }
        Command::Survey { common, population, replicate } => {
            let ctx = commands::Context::new(&common.config, common.out.as_deref(), CvFlags::default().overrides(common.seed), common.jobs)?;
            commands::survey(&ctx, population.as_deref(), replicate)
        }
        Command::Fit { common, model, survey, direct } => {
            let ctx = commands::Context::new(&common.config, common.out.as_deref(), CvFlags::default().overrides(common.seed), common.jobs)?;
            commands::fit(&ctx, &model, survey.as_deref(), direct.as_deref())
        }
        Command::Compare { common, cv, survey } => {
            let ctx = commands::Context::new(&common.config, common.out.as_deref(), cv.overrides(common.seed), common.jobs)?;
            commands::compare(&ctx, &survey)
        }
        Command::Study { common, cv } => {
            let ctx = commands::Context::new(&common.config, common.out.as_deref(), cv.overrides(common.seed), common.jobs)?;
            commands::study(&ctx)
        }
        Command::Report { input, out } => commands::report(&input, out.as_deref().unwrap_or(&input)),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp_secs()
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e:#}");
            ExitCode::FAILURE
        }
    }
}
