use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use whvi::train::{rng_for, INIT_STREAM};
use whvi_cli::bench::fwht_bench;
use whvi_cli::checkpoint::checkpoint_load;
use whvi_cli::report::param_report;
use whvi_cli::run::{dataset_dims, evaluate_checkpoint, load_config, run, CliError, RunOptions};

#[derive(Parser)]
#[command(name = "whvi", version, about = "Walsh-Hadamard variational inference experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate every seed of an experiment.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `output_dir`.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Comma-separated seeds replacing `seeds`.
        #[arg(long, value_delimiter = ',')]
        seed_override: Option<Vec<u64>>,
        #[arg(long)]
        quiet: bool,
    },
    /// Test metrics of a checkpoint on its seed's test split.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Monte Carlo samples; defaults to `training.n_mc_eval`.
        #[arg(long)]
        n_mc: Option<usize>,
    },
    /// Trainable parameter table of a config's model or of a checkpoint.
    Params {
        #[arg(long, required_unless_present = "checkpoint")]
        config: Option<PathBuf>,
        #[arg(long, conflicts_with = "config")]
        checkpoint: Option<PathBuf>,
    },
    /// Time the fast transform from 2^min to 2^max.
    FwhtBench {
        #[arg(long, default_value_t = 4)]
        min: u32,
        #[arg(long, default_value_t = 16)]
        max: u32,
        #[arg(long, default_value_t = 5)]
        reps: usize,
    },
}

fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run {
            config,
            output,
            seed_override,
            quiet,
        } => {
            let cfg = load_config(&config)?;
            let outcome = run(
                &cfg,
                &RunOptions {
                    output,
                    seed_override,
                    quiet,
                },
            )?;
            if !quiet {
                for row in &outcome.summary {
                    println!(
                        "{:<10} {:>14.6} ± {:<12.6} (n={})",
                        row.metric, row.mean, row.std, row.n
                    );
                }
                println!("results in {}", outcome.dir.display());
            }
        }
        Command::Evaluate {
            config,
            checkpoint,
            n_mc,
        } => {
            let cfg = load_config(&config)?;
            let (seed, rmse, mnll) = evaluate_checkpoint(&cfg, &checkpoint, n_mc)?;
            println!("seed {seed}  test_rmse {rmse:.6}  test_mnll {mnll:.6}");
        }
        Command::Params { config, checkpoint } => {
            let model = match (config, checkpoint) {
                (_, Some(path)) => checkpoint_load(&path)?,
                (Some(path), None) => {
                    let cfg = load_config(&path)?;
                    let (in_dim, out_dim) = dataset_dims(&cfg)?;
                    cfg.model_spec(in_dim, out_dim).build(&mut rng_for(0, INIT_STREAM))?
                }
                (None, None) => unreachable!("clap requires one"),
            };
            println!("{}", param_report(model.as_ref()));
        }
        Command::FwhtBench { min, max, reps } => {
            if min < 1 || max > 24 || min > max {
                eprintln!("error: need 1 <= min <= max <= 24");
                std::process::exit(1);
            }
            let rows = fwht_bench(&(min..=max).collect::<Vec<_>>(), reps);
            println!("{:>10} {:>14} {:>16}", "d", "seconds", "ns/(d log2 d)");
            for r in &rows {
                let k = r.dim.trailing_zeros() as f64;
                println!(
                    "{:>10} {:>14.3e} {:>16.3}",
                    r.dim,
                    r.seconds,
                    r.seconds * 1e9 / (r.dim as f64 * k)
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
