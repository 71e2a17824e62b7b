//! `hydra-bench <experiment> [flags]`: runs one experiment, prints a
//! summary table and writes `<out>/<experiment>.csv`.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use hydra::harness::{self, ExperimentReport, HarnessConfig};
use hydra_core::SupervisionMode;

#[derive(Parser)]
#[command(name = "hydra-bench", about = "Supervision-mode experiments")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    experiment: Experiment,
}

#[derive(Args)]
struct Common {
    /// The hydra executable [default: next to this binary]
    #[arg(long, global = true)]
    hydra: Option<PathBuf>,
    #[arg(long, global = true, default_value = "bench-out")]
    out: PathBuf,
    /// Seed container ids.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value_t = hydra_core::daemon::DEFAULT_POLL_INTERVAL_MS)]
    poll_interval_ms: u64,
    /// Comma-separated modes.
    #[arg(long, global = true, value_delimiter = ',', default_values = ["coupled", "lazy", "decoupled"])]
    modes: Vec<SupervisionMode>,
}

#[derive(Subcommand)]
enum Experiment {
    /// Kill and restart the daemon under running containers.
    DaemonRestart {
        #[arg(long, default_value_t = 5)]
        containers: usize,
        #[arg(long, default_value_t = 3)]
        trials: u32,
        /// Kill/restart rounds per trial.
        #[arg(long, default_value_t = 1)]
        restarts: u32,
    },
    /// Probe an echo service while the daemon is swapped.
    UpgradeOutage {
        #[arg(long, default_value_t = 3)]
        trials: u32,
        /// Emulated application startup time.
        #[arg(long, default_value_t = 250)]
        startup_ms: u64,
    },
    /// Launch latency per mode, relative to coupled.
    SpawnLatency {
        #[arg(long, default_value_t = 50)]
        trials: u32,
    },
    /// Daemon memory, threads and launch latency as containers accumulate.
    Scalability {
        #[arg(long, default_value_t = 100)]
        max_n: u32,
        #[arg(long, default_value_t = 10)]
        step: u32,
    },
    /// The echo workload used by upgrade-outage.
    Responder {
        #[arg(long)]
        socket: PathBuf,
        #[arg(long, default_value_t = 0)]
        startup_ms: u64,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Experiment::Responder { socket, startup_ms } = &cli.experiment {
        return match harness::run_responder(socket, Duration::from_millis(*startup_ms)) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => {
                eprintln!("responder: {e}");
                ExitCode::FAILURE
            }
        };
    }

    let me = std::env::current_exe().expect("current executable");
    let hydra = cli.common.hydra.clone().unwrap_or_else(|| me.with_file_name("hydra"));
    let mut cfg = HarnessConfig::new(hydra, me);
    cfg.out_dir = cli.common.out.clone();
    cfg.seed = cli.common.seed;
    cfg.poll_interval_ms = cli.common.poll_interval_ms;
    let modes = cli.common.modes.clone();

    let result = match cli.experiment {
        Experiment::DaemonRestart { containers, trials, restarts } => {
            harness::exp_daemon_restart(&cfg, &modes, containers, trials, restarts)
        }
        Experiment::UpgradeOutage { trials, startup_ms } => {
            let mut with_control: Vec<Option<SupervisionMode>> = modes.iter().copied().map(Some).collect();
            with_control.push(None);
            harness::exp_upgrade_outage(&cfg, &with_control, trials, startup_ms)
        }
        Experiment::SpawnLatency { trials } => harness::exp_spawn_latency(&cfg, trials),
        Experiment::Scalability { max_n, step } => harness::exp_scalability(&cfg, &modes, max_n, step),
        Experiment::Responder { .. } => unreachable!(),
    };
    match result.and_then(|r| finish(r, &cfg)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("hydra-bench: {e}");
            ExitCode::FAILURE
        }
    }
}

fn finish(mut report: ExperimentReport, cfg: &HarnessConfig) -> std::io::Result<()> {
    let path = report.write_csv(&cfg.out_dir)?;
    print!("{}", report.summary());
    println!("csv: {}", path.display());
    Ok(())
}
