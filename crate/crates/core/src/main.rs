use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use seafl_sim::config::{PolicyKind, RunConfig};
use seafl_sim::{engine, experiment};

/// Semi-asynchronous federated learning simulator.
#[derive(Parser)]
#[command(name = "seafl-sim", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Run configuration file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory for CSV/JSON results.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Run one simulation and write its metrics.
    Simulate {
        #[command(flatten)]
        common: CommonArgs,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Sweep one parameter across values x seeds and report median
    /// time-to-target per grid point.
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        /// Parameter key to vary (e.g. buffer_size, staleness_limit, alpha).
        #[arg(long)]
        param: String,
        /// Comma-separated values for the parameter.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Run the same scenario under several policies.
    Compare {
        #[command(flatten)]
        common: CommonArgs,
        /// Comma-separated policies (seafl, seafl2, fedbuff, fedasync, fedavg).
        #[arg(long, value_delimiter = ',')]
        policies: Vec<String>,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn run_cli(cli: Cli) -> seafl_sim::Result<()> {
    match cli.command {
        Command::Simulate { common, seed } => {
            let mut cfg = RunConfig::from_toml_file(&common.config)?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            log::info!("simulate: policy={} seed={}", cfg.policy, cfg.seed);
            let metrics = engine::run(&cfg)?;
            experiment::emit_run_outputs(&common.out, std::slice::from_ref(&metrics), &cfg)?;
            match metrics.time_to_accuracy(cfg.target_accuracy) {
                Some(t) => println!(
                    "{}: reached {:.1}% at {t:.1} virtual seconds ({} rounds total)",
                    cfg.policy,
                    cfg.target_accuracy * 100.0,
                    metrics.counters.aggregations
                ),
                None => println!(
                    "{}: target {:.1}% not reached (censored at {:.1}s, final accuracy {:.3})",
                    cfg.policy,
                    cfg.target_accuracy * 100.0,
                    metrics.final_virtual_time,
                    metrics.final_accuracy().unwrap_or(f64::NAN)
                ),
            }
            println!("outputs written to {}", common.out.display());
            Ok(())
        }
        Command::Sweep {
            common,
            param,
            values,
            seeds,
        } => {
            let cfg = RunConfig::from_toml_file(&common.config)?;
            log::info!("sweep: {param} over {values:?} with seeds {seeds:?}");
            let table = experiment::run_sweep(&cfg, &param, &values, &seeds)?;
            experiment::emit_sweep_outputs(&common.out, &table, &cfg)?;
            for row in &table.rows {
                println!(
                    "{param}={}: median time-to-target {:.1}s ({} of {} censored)",
                    row.value,
                    row.median_time_to_target_s,
                    row.censored_runs,
                    row.per_seed.len()
                );
            }
            println!("outputs written to {}", common.out.display());
            Ok(())
        }
        Command::Compare {
            common,
            policies,
            seed,
        } => {
            let mut cfg = RunConfig::from_toml_file(&common.config)?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            let policies = policies
                .iter()
                .map(|p| PolicyKind::parse(p))
                .collect::<seafl_sim::Result<Vec<_>>>()?;
            log::info!("compare: {policies:?} seed={}", cfg.seed);
            let logs = experiment::run_compare(&cfg, &policies)?;
            experiment::emit_run_outputs(&common.out, &logs, &cfg)?;
            for log in &logs {
                match log.time_to_accuracy(cfg.target_accuracy) {
                    Some(t) => println!("{}: {t:.1}s to target", log.policy),
                    None => println!("{}: censored (never reached target)", log.policy),
                }
            }
            println!("outputs written to {}", common.out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    // Verbosity is controlled by SEAFL_SIM_LOG (e.g. info, debug); off by default.
    env_logger::Builder::from_env(env_logger::Env::new().filter("SEAFL_SIM_LOG")).init();
    let cli = Cli::parse();
    match run_cli(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
