use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use esac::config::{load_config, RunConfig};
use esac::harness::{
    cmd_bench_scaling, cmd_compare_updates, cmd_sweep, run_training, speedup_report, SweepParam,
};
use esac::Result;

#[derive(Parser)]
#[command(
    name = "esac",
    version,
    about = "Evolution strategies with soft actor-critic"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults are used for omitted keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory (overrides `out_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    generations: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => load_config(path)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(w) = self.workers {
            cfg.workers = w;
        }
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        if let Some(g) = self.generations {
            cfg.generations = g;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train with the configured algorithm.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Time ES generations across worker counts and population sizes.
    BenchScaling {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4")]
        worker_counts: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "50")]
        populations: Vec<usize>,
        /// Timed generations per cell.
        #[arg(long, default_value_t = 20)]
        timed_generations: usize,
        #[arg(long, default_value_t = 2)]
        warmup: usize,
    },
    /// Final normalized returns over a grid of `zeta` or `sigma` values.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
    },
    /// Cumulative gradient updates of ESAC and SAC at matched environment steps.
    CompareUpdates {
        #[command(flatten)]
        common: Common,
    },
    /// Parse and validate a configuration without running anything.
    ValidateConfig {
        #[arg(long)]
        config: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { common } => {
            let cfg = common.load()?;
            let out = run_training(&cfg, Some(&cfg.out_dir))?;
            let s = &out.summary;
            println!(
                "{} on {}: {} generations, {} env steps, {} gradient updates, best validation {:.3}, final {:.3}, {:.1}s",
                s.algorithm,
                s.env,
                s.generations,
                s.env_steps,
                s.gradient_updates,
                s.best_validation,
                s.final_validation,
                s.wall_clock_s
            );
        }
        Command::BenchScaling {
            common,
            worker_counts,
            populations,
            timed_generations,
            warmup,
        } => {
            let cfg = common.load()?;
            let samples = cmd_bench_scaling(
                &cfg,
                &worker_counts,
                &populations,
                timed_generations,
                warmup,
                Some(&cfg.out_dir),
            )?;
            println!("{}", speedup_report(&samples));
        }
        Command::Sweep {
            common,
            param,
            values,
            seeds,
        } => {
            let cfg = common.load()?;
            let param: SweepParam = param.parse()?;
            let rows = cmd_sweep(&cfg, param, &values, &seeds, Some(&cfg.out_dir))?;
            for r in rows {
                println!(
                    "value {:<10} seed {:<4} return {:>10.3}  normalized {:.3}",
                    r.value, r.seed, r.final_return, r.normalized_return
                );
            }
        }
        Command::CompareUpdates { common } => {
            let cfg = common.load()?;
            let rows = cmd_compare_updates(&cfg, Some(&cfg.out_dir))?;
            if let Some(last) = rows.last() {
                println!(
                    "{} env steps: esac {} updates, sac {} updates",
                    last.env_steps, last.esac_updates, last.sac_updates
                );
            }
        }
        Command::ValidateConfig { config } => {
            load_config(&config)?;
            println!("{}: ok", config.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}
