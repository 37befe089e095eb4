use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use fedemb_cli::commands::{self, AccountArgs, EvalArgs, ExtrapolateArgs, SynthArgs, TrainArgs};
use fedemb_cli::{output_root, resolve, CliError};
use fedemb_core::data::SyntheticParams;
use fedemb_core::eval::Metric;
use fedemb_core::mechanism::Mechanism;

#[derive(Parser)]
#[command(name = "fedemb", version, about = "Federated embedding training with user-level DP")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum MechanismArg {
    Gaussian,
    Tree,
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricArg {
    Cosine,
    Inner,
}

#[derive(Subcommand)]
enum Command {
    /// Train from an experiment config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Worker threads for client updates (default: all cores).
        #[arg(long)]
        threads: Option<usize>,
        /// Overwrite a finished run in the output directory.
        #[arg(long)]
        force: bool,
        /// Continue from the output directory's latest checkpoint.
        #[arg(long, conflicts_with = "force")]
        resume: bool,
    },
    /// Print the privacy guarantee of a run as one JSON line.
    Account {
        #[arg(long)]
        q: f64,
        #[arg(long)]
        sigma: f64,
        #[arg(long)]
        rounds: u64,
        #[arg(long, default_value_t = 1e-7)]
        delta: f64,
        #[arg(long, value_enum, default_value = "gaussian")]
        mechanism: MechanismArg,
        /// Tree horizon; defaults to --rounds.
        #[arg(long)]
        total_rounds: Option<u64>,
    },
    /// Scale users per round and noise together and account each setting.
    Extrapolate {
        #[arg(long)]
        total_users: u64,
        #[arg(long)]
        users_per_round: u64,
        #[arg(long)]
        sigma: f64,
        #[arg(long)]
        rounds: u64,
        #[arg(long, default_value_t = 1e-7)]
        delta: f64,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16,32,64")]
        factors: Vec<f64>,
        /// CSV destination under the output root; stdout if absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate recall@FAR of a checkpoint (or the seeded initial model).
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Dataset CSV overriding the config's evaluation data.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        far: Option<Vec<f64>>,
        #[arg(long, value_enum)]
        metric: Option<MetricArg>,
        /// Evaluate on a random subset of this many identities.
        #[arg(long)]
        sample_identities: Option<usize>,
        #[arg(long, default_value_t = 50)]
        roc_points: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic identity dataset as CSV.
    Synth {
        #[arg(long)]
        num_users: usize,
        #[arg(long, default_value_t = 1)]
        classes_per_user: usize,
        #[arg(long)]
        examples_per_class: usize,
        #[arg(long)]
        input_dim: usize,
        #[arg(long)]
        noise_std: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut stdout = std::io::stdout().lock();
    match cli.command {
        Command::Train { config, threads, force, resume } => {
            let s = commands::cmd_train(&TrainArgs { config, threads, force, resume })?;
            commands::print_json_line(&mut stdout, &s.manifest)?;
        }
        Command::Account { q, sigma, rounds, delta, mechanism, total_rounds } => {
            let mechanism = match mechanism {
                MechanismArg::Gaussian => Mechanism::Gaussian,
                MechanismArg::Tree => Mechanism::Tree,
            };
            let r = commands::cmd_account(&AccountArgs { q, sigma, rounds, delta, mechanism, total_rounds })?;
            commands::print_json_line(&mut stdout, &r)?;
        }
        Command::Extrapolate { total_users, users_per_round, sigma, rounds, delta, factors, out } => {
            let csv = commands::cmd_extrapolate(&ExtrapolateArgs {
                total_users,
                users_per_round,
                sigma,
                rounds,
                delta,
                factors,
            })?;
            match out {
                Some(p) => {
                    let p = resolve(&output_root(), &p);
                    if let Some(dir) = p.parent() {
                        std::fs::create_dir_all(dir)?;
                    }
                    std::fs::write(p, csv)?;
                }
                None => stdout.write_all(csv.as_bytes())?,
            }
        }
        Command::Eval { config, checkpoint, data, far, metric, sample_identities, roc_points, out } => {
            let metric = metric.map(|m| match m {
                MetricArg::Cosine => Metric::Cosine,
                MetricArg::Inner => Metric::Inner,
            });
            let r = commands::cmd_eval(&EvalArgs {
                config,
                checkpoint,
                data,
                fars: far,
                metric,
                sample_identities,
                roc_points,
                out,
            })?;
            commands::print_json_line(&mut stdout, &r)?;
        }
        Command::Synth { num_users, classes_per_user, examples_per_class, input_dim, noise_std, seed, out } => {
            let r = commands::cmd_synth(&SynthArgs {
                params: SyntheticParams { num_users, classes_per_user, examples_per_class, input_dim, noise_std },
                seed,
                out,
            })?;
            commands::print_json_line(&mut stdout, &r)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
