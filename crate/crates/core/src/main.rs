use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lftsynth::cli;

#[derive(Parser)]
#[command(name = "lftsynth", version, about = "Parametric LFT controller synthesis over a parameter grid")]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a parametric controller from a run configuration.
    Synth {
        #[arg(long)]
        config: PathBuf,
    },
    /// Sweep the closed-loop metric of a controller family over the parameter range.
    Eval {
        #[arg(long)]
        controller: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Open- and closed-loop magnitude responses at given parameter values.
    Bode {
        #[arg(long)]
        controller: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated parameter values.
        #[arg(long, value_delimiter = ',', required = true)]
        rho: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Model generators.
    Model {
        #[command(subcommand)]
        command: ModelCommand,
    },
}

#[derive(Subcommand)]
enum ModelCommand {
    /// Write an open-loop scenario model in state-space text format.
    Gen {
        /// `beam` or `building`.
        #[arg(long)]
        scenario: String,
        #[arg(long)]
        out: PathBuf,
        /// Beam length, or building peak frequency.
        #[arg(long)]
        param: Option<f64>,
        #[arg(long, default_value_t = 15)]
        n_elements: usize,
        #[arg(long, default_value_t = 4)]
        n_modes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run(args: Args) -> lftsynth::Result<i32> {
    cli::init_threads()?;
    match args.command {
        Command::Synth { config } => {
            let (result, code) = cli::cmd_synth(&config)?;
            println!(
                "{} gamma={} performance_gamma={}",
                result.status.as_str(),
                result.gamma,
                result.performance_norms.iter().cloned().fold(0.0, f64::max)
            );
            Ok(code)
        }
        Command::Eval { controller, config, out } => {
            let rows = cli::cmd_eval(&controller, &config, &out)?;
            let flagged = rows.iter().filter(|r| !r.stable).count();
            if flagged > 0 {
                eprintln!("{flagged} of {} sweep points unstable or ill-posed", rows.len());
            }
            Ok(0)
        }
        Command::Bode { controller, config, rho, out } => {
            cli::cmd_bode(&controller, &config, &rho, &out)?;
            Ok(0)
        }
        Command::Model { command: ModelCommand::Gen { scenario, out, param, n_elements, n_modes, seed } } => {
            cli::cmd_model_gen(&scenario, param, n_elements, n_modes, seed, &out)?;
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { cli::EXIT_ERROR as u8 } else { 0 });
        }
    };
    match run(args) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(cli::EXIT_ERROR as u8)
        }
    }
}
