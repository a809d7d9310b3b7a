use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use kpomdp_harness::config::{ExperimentConfig, Preset};
use kpomdp_harness::error::{HarnessError, Result};
use kpomdp_harness::experiment::{self, BenchEnv};
use kpomdp_harness::with_env;
use kpomdp_harness::plot::plot_returns;
use kpomdp_harness::results::{write_episode_logs, write_results, write_timing};
use kpomdp_harness::verify::{run_verify, VerifyOptions};

/// Kernel-embedding POMDP planner: data collection, sweeps and verification.
#[derive(Parser)]
#[command(name = "kpomdp", version)]
struct Cli {
    /// Dataset cache directory, overriding `<output.dir>/data`.
    #[arg(long, global = true, env = "KPOMDP_DATA_DIR")]
    data_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Collect and cache the training datasets of a config.
    Collect {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train on every sweep size and write the resolved model settings.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run the sweep and write results.csv and timing.csv.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `output.dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the verification suite.
    Verify {
        /// Also run the grid-world and pendulum benchmarks.
        #[arg(long)]
        full: bool,
    },
    /// Print the default config of a benchmark.
    Defaults {
        #[arg(long, value_enum, default_value = "grid")]
        env: Preset,
    },
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| HarnessError::io(path, e))
}

fn collect(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    let env = BenchEnv::build(cfg)?;
    for &n in &cfg.data.sizes {
        let path = dir.join(experiment::dataset_file(cfg, n));
        with_env!(&env, e => {
            let data = experiment::collect(e, cfg, n)?;
            experiment::write_dataset(e, &data, &path)?;
        });
        println!("n={n} {}", path.display());
    }
    Ok(())
}

fn train(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    let env = BenchEnv::build(cfg)?;
    for &n in &cfg.data.sizes {
        let (params, ranks) = with_env!(&env, e => {
            let data = experiment::obtain_dataset(e, cfg, n, Some(dir))?;
            let model = experiment::train(e, cfg, &data)?;
            (model.params().clone(), model.factor_ranks())
        });
        let path = cfg.output.dir.join(format!("model-n{n}.toml"));
        let text = toml::to_string_pretty(&params).map_err(|e| HarnessError::io(&path, e))?;
        write_text(&path, &text)?;
        match ranks {
            Some((s, sa, o)) => println!("{}: factor ranks {s}/{sa}/{o}", path.display()),
            None => println!("{}", path.display()),
        }
    }
    Ok(())
}

fn run(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    let runs = experiment::run_sweep(cfg, Some(dir))?;
    let out = &cfg.output.dir;
    write_results(&out.join("results.csv"), &runs)?;
    write_timing(&out.join("timing.csv"), &runs)?;
    write_text(&out.join("config.toml"), &cfg.to_toml())?;
    if cfg.eval.episode_logs {
        write_episode_logs(&out.join("episodes"), &runs)?;
    }
    if cfg.output.plot {
        let rows: Vec<_> = runs.iter().map(|r| r.row.clone()).collect();
        let label = match cfg.returns() {
            kpomdp::ReturnKind::Discounted => "mean discounted return",
            kpomdp::ReturnKind::Metric => "mean total metric",
        };
        plot_returns(&out.join("plot.svg"), &rows, label)?;
    }
    for r in &runs {
        println!("{}", r.row.summary_line());
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Collect { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            collect(&cfg, &experiment::data_dir(&cfg, cli.data_dir))
        }
        Command::Train { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            train(&cfg, &experiment::data_dir(&cfg, cli.data_dir))
        }
        Command::Run { config, out } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(out) = out {
                cfg.output.dir = out;
            }
            let dir = experiment::data_dir(&cfg, cli.data_dir);
            run(&cfg, &dir)
        }
        Command::Verify { full } => {
            let report = run_verify(&VerifyOptions {
                full,
                data_dir: cli.data_dir,
                ..VerifyOptions::default()
            });
            for check in &report.checks {
                println!("{check}");
            }
            if report.passed() {
                Ok(())
            } else {
                let failed: Vec<&str> = report
                    .checks
                    .iter()
                    .filter(|c| c.status == kpomdp_harness::verify::Status::Fail)
                    .map(|c| c.id)
                    .collect();
                Err(HarnessError::Verification(failed.join(", ")))
            }
        }
        Command::Defaults { env } => {
            print!("{}", ExperimentConfig::preset(env).to_toml());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
