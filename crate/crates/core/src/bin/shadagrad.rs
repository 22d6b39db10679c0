use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use shadagrad::harness::{compare, load_records, run_experiment, verify, ExperimentConfig};
use shadagrad::Error;

#[derive(Parser)]
#[command(name = "shadagrad", version, about = "Full-matrix adaptive gradient experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every cell of an experiment config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's out_dir.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Summarize one or more finished output directories.
    Compare {
        /// Output directories written by `run`.
        #[arg(long = "in", required = true, num_args = 1..)]
        input: Vec<PathBuf>,
        /// Weighted-metric threshold for epochs-to-threshold.
        #[arg(long, default_value_t = 1e-3)]
        eps: f64,
    },
    /// Run a config with diagnostics and report inequality violations.
    Verify {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Print the default experiment config.
    Preset,
}

const EXIT_CONFIG: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_VIOLATIONS: u8 = 3;

fn fail(e: &Error) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(match e {
        Error::Config { .. } => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config, out, workers } => {
            let cfg = match ExperimentConfig::from_path(&config) {
                Ok(c) => c,
                Err(e) => return fail(&e),
            };
            match run_experiment(&cfg, out.as_deref(), workers) {
                Ok(o) => {
                    println!(
                        "{} cells ({} incomplete) written to {}",
                        o.records.len(),
                        o.incomplete(),
                        o.out_dir.display()
                    );
                    ExitCode::SUCCESS
                }
                Err(e) => fail(&e),
            }
        }
        Command::Compare { input, eps } => {
            let mut records = Vec::new();
            for dir in &input {
                match load_records(dir) {
                    Ok(r) => records.extend(r),
                    Err(e) => return fail(&e),
                }
            }
            let cmp = match compare(&records, eps) {
                Ok(c) => c,
                Err(e) => return fail(&e),
            };
            let target = Path::new(&input[0]).join("summary.csv");
            if let Err(e) = cmp.write_csv(&target) {
                return fail(&e);
            }
            print!("{}", cmp.table());
            println!("\nsummary written to {}", target.display());
            ExitCode::SUCCESS
        }
        Command::Verify { config, out, workers } => {
            let cfg = match ExperimentConfig::from_path(&config) {
                Ok(c) => c,
                Err(e) => return fail(&e),
            };
            let bundle = match verify(&cfg, out.as_deref(), workers) {
                Ok(b) => b,
                Err(e) => return fail(&e),
            };
            for cell in &bundle.cells {
                for r in &cell.checks {
                    let status = if r.not_applicable {
                        "n/a"
                    } else if r.passed() {
                        "ok"
                    } else {
                        "FAIL"
                    };
                    println!(
                        "{:<48} {:<22} {:>4}  {}/{}",
                        cell.name, r.check, status, r.violations, r.instances
                    );
                }
            }
            if let Some(g) = &bundle.gate_probability {
                println!("{:<48} {:<22} {:>4}", "gate", g.check, if g.passed() { "ok" } else { "FAIL" });
            }
            let v = bundle.violations();
            if !cfg.diagnostics {
                println!("diagnostics disabled in config; nothing checked");
            }
            if v > 0 {
                eprintln!("{v} violations");
                return ExitCode::from(EXIT_VIOLATIONS);
            }
            ExitCode::SUCCESS
        }
        Command::Preset => {
            println!("{}", ExperimentConfig::preset().to_json());
            ExitCode::SUCCESS
        }
    }
}
