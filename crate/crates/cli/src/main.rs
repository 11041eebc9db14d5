mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use crate::commands::{GradcheckArgs, InitArgs};
use crate::error::CliResult;

#[derive(Parser)]
#[command(name = "dgcrf", version, about = "Deep Gaussian CRF image denoising")]
struct Cli {
    /// Worker threads (0 = all cores). Results do not depend on this.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum InitModeArg {
    Gmm,
    Random,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a config file.
    Train {
        /// `key = value` config file.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override a config entry, e.g. `--set maxIters=50`. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Denoise one image.
    Denoise {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Noise standard deviation on the 0-255 scale.
        #[arg(long)]
        sigma: f64,
        #[arg(long)]
        output: PathBuf,
        /// Clean reference; prints input and output PSNR.
        #[arg(long)]
        clean: Option<PathBuf>,
    },
    /// Mean PSNR over a directory of clean images at several noise levels.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        test_dir: PathBuf,
        #[arg(long, default_value = "10,15,20,25,30")]
        sigmas: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Round noisy images to 8-bit levels.
        #[arg(long)]
        quantize: bool,
        /// Where to write the CSV table.
        #[arg(long, default_value = "eval.csv")]
        csv: PathBuf,
    },
    /// Finite-difference check of the analytic gradients on a small network.
    Gradcheck {
        #[arg(long, default_value_t = 3)]
        d: usize,
        #[arg(long = "K", default_value_t = 4)]
        k: usize,
        #[arg(long = "T", default_value_t = 2)]
        t: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Image side length.
        #[arg(long, default_value_t = 12)]
        size: usize,
        /// Step sizes to try, comma separated; the best is reported.
        #[arg(long)]
        eps: Option<String>,
        #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
        cascade: bool,
        #[arg(long, hide = true)]
        corrupt: Option<f64>,
    },
    /// Write an initial model (GMM fit or random factors).
    Init {
        #[arg(long, value_enum)]
        mode: InitModeArg,
        /// Directory of images, or a CSV file with one flattened patch per row.
        #[arg(long)]
        patch_dir: Option<PathBuf>,
        #[arg(long = "K")]
        k: usize,
        #[arg(long)]
        d: usize,
        #[arg(long = "T", default_value_t = 4)]
        t: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Random mode: off-identity factor scale.
        #[arg(long, default_value_t = 0.1)]
        scale: f64,
        #[arg(long, default_value_t = 30)]
        em_iters: usize,
        /// Cap on the number of image patches used for EM.
        #[arg(long, default_value_t = 50_000)]
        samples: usize,
        /// Reference noise level (0-255 scale) for the initial biases.
        #[arg(long, default_value_t = 20.0)]
        sigma: f64,
        #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
        cascade: bool,
    },
    /// Add seeded Gaussian noise to an image.
    Noise {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        sigma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        quantize: bool,
        #[arg(long)]
        output: PathBuf,
    },
    /// Write synthetic piecewise-smooth test scenes.
    Scenes {
        #[arg(long, default_value_t = 20)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn run(command: Command) -> CliResult<()> {
    match command {
        Command::Train { config, overrides } => commands::train(config.as_deref(), &overrides),
        Command::Denoise {
            model,
            input,
            sigma,
            output,
            clean,
        } => commands::denoise_cmd(&model, &input, sigma, &output, clean.as_deref()),
        Command::Eval {
            model,
            test_dir,
            sigmas,
            seed,
            quantize,
            csv,
        } => commands::eval_cmd(&model, &test_dir, &config::parse_list("--sigmas", &sigmas)?, seed, quantize, &csv),
        Command::Gradcheck {
            d,
            k,
            t,
            seed,
            size,
            eps,
            cascade,
            corrupt,
        } => commands::gradcheck_cmd(GradcheckArgs {
            d,
            k,
            t,
            seed,
            size,
            eps: eps.map(|e| config::parse_list("--eps", &e)).transpose()?,
            cascade,
            corrupt,
        }),
        Command::Init {
            mode,
            patch_dir,
            k,
            d,
            t,
            out,
            seed,
            scale,
            em_iters,
            samples,
            sigma,
            cascade,
        } => commands::init_cmd(InitArgs {
            random: matches!(mode, InitModeArg::Random),
            patch_dir,
            k,
            d,
            t,
            out,
            seed,
            scale,
            em_iters,
            samples,
            sigma,
            cascade,
        }),
        Command::Noise {
            input,
            sigma,
            seed,
            quantize,
            output,
        } => commands::noise_cmd(&input, sigma, seed, quantize, &output),
        Command::Scenes {
            count,
            size,
            seed,
            out_dir,
        } => commands::scenes_cmd(count, size, seed, &out_dir),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match dgcrf::par::with_threads(cli.threads, || run(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
