use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use ucd::gradcheck::{run_suite, MAX_REL_ERROR};
use ucd::harness::{compare_report, configure_threads, run, ExperimentConfig, Method};
use ucd::tasks::{generate_shapes_dataset, save_dataset, IncrementalSchedule, SplitMode};

#[derive(Parser)]
#[command(name = "ucd", version, about = "Contrastive distillation for incremental segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one incremental run and write its metrics.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's method.
        #[arg(long)]
        method: Option<Method>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Tabulate summary.csv / metrics.jsonl files or run directories.
    Report {
        #[arg(required = true)]
        files: Vec<PathBuf>,
        /// Average each method's rows over steps.
        #[arg(long)]
        average_steps: bool,
    },
    /// Check every analytic gradient against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        instances: usize,
    },
    /// Write a synthetic shapes dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        n_images: usize,
        #[arg(long, default_value_t = 16)]
        height: usize,
        #[arg(long, default_value_t = 16)]
        width: usize,
        #[arg(long, default_value_t = 4)]
        n_classes: usize,
        #[arg(long)]
        schedule: Option<String>,
        #[arg(long, default_value = "overlapped")]
        mode: SplitMode,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match dispatch(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    configure_threads()?;
    match cli.command {
        Command::Run {
            config,
            method,
            seed,
            output,
        } => {
            let mut cfg = ExperimentConfig::from_file(&config)
                .with_context(|| format!("loading {}", config.display()))?;
            if let Some(m) = method {
                cfg.method = m;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(o) = output {
                cfg.output = o;
            }
            cfg.validate()?;
            let out = run(&cfg)?;
            for r in out.records.iter().filter(|r| r.split == "test") {
                let pct = |v: Option<f64>| v.map_or("-".into(), |x| format!("{:.2}", 100.0 * x));
                println!(
                    "{} step {}: old {} new {} all {}",
                    r.method,
                    r.step,
                    pct(r.miou_old),
                    pct(r.miou_new),
                    pct(r.miou_all)
                );
            }
            println!("wrote {}", cfg.output.display());
        }
        Command::Report {
            files,
            average_steps,
        } => print!("{}", compare_report(&files, average_steps)?),
        Command::Gradcheck { seed, instances } => {
            let reports = run_suite(seed, instances)?;
            let mut ok = true;
            for r in &reports {
                let status = if r.passed() { "ok" } else { "FAIL" };
                println!("{:<20} {:>4} instances  max rel err {:.3e}  {status}", r.name, r.instances, r.max_rel_error);
                ok &= r.passed();
            }
            if !ok {
                eprintln!("gradient check failed (tolerance {MAX_REL_ERROR:e})");
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::GenData {
            out,
            seed,
            n_images,
            height,
            width,
            n_classes,
            schedule,
            mode,
        } => {
            if n_classes == 0 {
                bail!("n_classes must be positive");
            }
            let data = generate_shapes_dataset(seed, n_images, height, width, n_classes)?;
            let schedule = schedule
                .map(|s| IncrementalSchedule::from_counts(&s, mode))
                .transpose()?;
            save_dataset(&out, &data, schedule.as_ref())?;
            println!("wrote {} images to {}", data.len(), out.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}
