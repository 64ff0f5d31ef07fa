use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use distillmatch::harness::{ablate, oracle_table, report, run_experiment, ExperimentConfig};
use distillmatch::trainer::TrainConfig;
use distillmatch::{Error, Result};

/// Semi-supervised class-incremental learning experiments.
#[derive(Debug, Parser)]
#[command(name = "distillmatch", version)]
struct Cli {
    /// Output directory (overrides `out_dir` in the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Comma-separated run seeds (overrides `seeds`).
    #[arg(long, global = true, value_delimiter = ',')]
    seed: Option<Vec<u64>>,

    /// Replace existing run directories.
    #[arg(long, global = true)]
    overwrite: bool,

    /// Start from the 200-epoch schedule instead of the desk-scale one.
    #[arg(long, global = true)]
    paper_scale: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train every seed of a configuration and summarize.
    Run { config: PathBuf },
    /// Full method plus the four single-removal variants.
    Ablate { config: PathBuf },
    /// Export omega and AUROC curves from finished run directories.
    Report {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
    },
    /// Offline-oracle accuracy for every task prefix.
    Oracle { config: PathBuf },
}

fn load(cli: &Cli, path: &PathBuf) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let train = if cli.paper_scale {
        TrainConfig::paper_scale()
    } else {
        TrainConfig::default()
    };
    let mut cfg = ExperimentConfig::parse_over(&text, ExperimentConfig::with_train(train))?;
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seeds) = &cli.seed {
        cfg.seeds = seeds.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("-".into(), |x| format!("{x:.4}"))
}

fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Run { config } => {
            let cfg = load(cli, config)?;
            let s = run_experiment(&cfg, cli.overwrite)?;
            for (dir, r) in s.run_dirs.iter().zip(&s.runs) {
                println!(
                    "{}  A_N {:.4}  omega {:.4}  bwt {}  fgt {}",
                    dir.display(),
                    r.final_accuracy,
                    r.omega,
                    fmt_opt(r.bwt),
                    fmt_opt(r.fgt)
                );
            }
            println!(
                "{}: omega {:.4} +- {:.4}, A_N {:.4} +- {:.4} over {} seed(s)",
                s.label,
                s.omega.mean,
                s.omega.std,
                s.final_accuracy.mean,
                s.final_accuracy.std,
                s.seeds.len()
            );
        }
        Command::Ablate { config } => {
            let cfg = load(cli, config)?;
            let table = ablate(&cfg, cli.overwrite)?;
            print!("{}", table.to_csv());
        }
        Command::Report { dirs } => {
            for r in report(dirs)? {
                let last = r.omega.last().copied().unwrap_or(f64::NAN);
                println!("{}: {} tasks, final omega {last:.4}", r.dir.display(), r.omega.len());
            }
        }
        Command::Oracle { config } => {
            let cfg = load(cli, config)?;
            println!("seed,prefix,accuracy");
            for (seed, n, acc) in oracle_table(&cfg, cli.overwrite)? {
                println!("{seed},{n},{acc}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config_error() { 1 } else { 2 })
        }
    }
}
