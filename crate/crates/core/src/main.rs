use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use whalefl::harness::{self, sim, ExperimentConfig, Strategy};
use whalefl::{Error, Result};

#[derive(Parser)]
#[command(
    name = "whalefl",
    version,
    about = "Federated learning simulator with adaptive subnetworks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its metrics.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run several configs and tabulate time-to-target and speedups.
    Compare {
        #[arg(long, num_args = 1.., required = true)]
        configs: Vec<PathBuf>,
        #[arg(long)]
        reference: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dump the system-dynamics trace as CSV.
    Trace {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dump the client data partition as CSV.
    Partition {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn execute(cli: Cli) -> Result<String> {
    match cli.command {
        Command::Run { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            cfg.validate()?;
            create_dir(&out)?;
            let log = harness::run_experiment(&cfg)?;
            cfg.save(out.join("config.toml"))?;
            log.write_csv(out.join("metrics.csv"))?;
            let last = log.last().expect("at least one round");
            Ok(format!(
                "{}: {} rounds, {:.1} simulated s, final accuracy {:.4}",
                cfg.strategy,
                log.rounds.len(),
                last.cum_time_s,
                last.test_acc
            ))
        }
        Command::Compare {
            configs,
            reference,
            out,
        } => {
            let reference = Strategy::parse(&reference)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown strategy {reference}")))?;
            let cfgs = configs
                .iter()
                .map(ExperimentConfig::load)
                .collect::<Result<Vec<_>>>()?;
            create_dir(&out)?;
            let (report, logs) = harness::compare(&cfgs, reference)?;
            for (cfg, log) in cfgs.iter().zip(&logs) {
                log.write_csv(out.join(format!("metrics_{}.csv", cfg.name)))?;
                cfg.save(out.join(format!("config_{}.toml", cfg.name)))?;
            }
            report.write_csv(out.join("comparison.csv"))?;
            let mut lines = Vec::new();
            for r in &report.rows {
                lines.push(format!(
                    "{:<16} time-to-target {:>12}  speedup {}",
                    r.name,
                    r.time_to_target_s
                        .map_or_else(|| "not reached".into(), |t| format!("{t:.1}s")),
                    harness::compare::format_speedup(r.speedup)
                ));
            }
            Ok(lines.join("\n"))
        }
        Command::Trace { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            cfg.validate()?;
            let trace = sim::build_trace(&cfg, cfg.client_count())?;
            trace.write_csv(&out)?;
            Ok(format!(
                "wrote {} rounds × {} clients to {}",
                trace.rounds(),
                trace.clients(),
                out.display()
            ))
        }
        Command::Partition { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            cfg.validate()?;
            let (train, _) = sim::load_datasets(&cfg)?;
            let p = whalefl::data::partition_noniid(
                &train,
                cfg.client_count(),
                cfg.data.sigma,
                cfg.seeds.partition,
            )?;
            p.write_csv(&out)?;
            Ok(format!(
                "wrote {} clients to {}",
                p.client_count(),
                out.display()
            ))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(msg) => {
            println!("{msg}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
