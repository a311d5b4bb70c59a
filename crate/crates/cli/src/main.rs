//! `bcn` command-line harness.
//!
//! Exit codes: 0 success, 1 oracle or assertion failure, 2 usage or
//! configuration error, 3 I/O error.

use std::path::PathBuf;
use std::process::ExitCode;

use bcn_core::experiment::{
    cmd_ablate_batch, cmd_dump_iota, cmd_equivalence, cmd_gradcheck, cmd_train, mode_name, ExperimentConfig,
};
use bcn_core::gradcheck::table_header;
use bcn_core::Error;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bcn", version, about = "Batch channel normalization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the reference CNN and write curve.csv, summary.csv and model.ckpt.
    Train(ConfigArgs),
    /// Train BN and BCN across batch sizes and write ablation.csv.
    AblateBatch(ConfigArgs),
    /// Check every analytic gradient against central differences.
    Gradcheck(ConfigArgs),
    /// Check the limit-case equivalences between normalizers.
    Equivalence(ConfigArgs),
    /// Print per-layer iota statistics from a checkpoint.
    DumpIota {
        checkpoint: PathBuf,
        /// Also write iota.csv into this directory.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// Key-value config file; `--key=value` flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides such as `--batch-size=2` or `--normalizer bn`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY=VALUE")]
    overrides: Vec<String>,
}

enum Failure {
    Oracle(String),
    Usage(String),
    Io(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Oracle(_) => 1,
            Failure::Usage(_) => 2,
            Failure::Io(_) => 3,
        }
    }

    fn line(&self) -> String {
        let (kind, msg) = match self {
            Failure::Oracle(m) => ("oracle", m),
            Failure::Usage(m) => ("config", m),
            Failure::Io(m) => ("io", m),
        };
        format!("error[{kind}]: {}", msg.replace('\n', " "))
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::Io { .. } | Error::Csv(_) | Error::CifarFormat(_) | Error::Checkpoint(_) => Failure::Io(msg),
            Error::NonFiniteLoss { .. } => Failure::Oracle(msg),
            _ => Failure::Usage(msg),
        }
    }
}

fn parse_overrides(raw: &[String]) -> Result<Vec<(String, String)>, Failure> {
    let mut out = Vec::new();
    let mut it = raw.iter();
    while let Some(arg) = it.next() {
        let key = arg
            .strip_prefix("--")
            .ok_or_else(|| Failure::Usage(format!("unexpected argument {arg:?}; overrides look like --key=value")))?;
        match key.split_once('=') {
            Some((k, v)) => out.push((k.to_string(), v.to_string())),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| Failure::Usage(format!("missing value for --{key}")))?;
                out.push((key.to_string(), v.clone()));
            }
        }
    }
    Ok(out)
}

fn load_config(args: &ConfigArgs) -> Result<ExperimentConfig, Failure> {
    let overrides = parse_overrides(&args.overrides)?;
    Ok(ExperimentConfig::load(args.config.as_deref(), &overrides)?)
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Train(args) => {
            let cfg = load_config(&args)?;
            let record = cmd_train(&cfg)?;
            println!("epoch train_acc val_acc     loss  secs");
            for e in &record.epochs {
                println!(
                    "{:>5} {:>9.4} {:>7.4} {:>8.4} {:>5.1}",
                    e.epoch, e.train_acc, e.val_acc, e.loss, e.wall_secs
                );
            }
            if let Some(acc) = record.test_acc {
                println!("test_acc {acc:.4}");
            }
            for s in &record.iota {
                println!("iota {} min {:.4} mean {:.4} max {:.4}", s.layer, s.min, s.mean, s.max);
            }
            println!("wrote {}", cfg.out_dir.display());
        }
        Command::AblateBatch(args) => {
            let cfg = load_config(&args)?;
            let rows = cmd_ablate_batch(&cfg)?;
            println!("normalizer batch_size train_acc val_acc test_acc");
            for r in &rows {
                println!(
                    "{:<10} {:>10} {:>9.4} {:>7.4} {:>8.4}",
                    r.normalizer,
                    r.batch_size,
                    r.mean_train_acc(),
                    r.mean_val_acc(),
                    r.mean_test_acc()
                );
            }
            println!("wrote {}", cfg.out_dir.join("ablation.csv").display());
        }
        Command::Gradcheck(args) => {
            let cfg = load_config(&args)?;
            let reports = cmd_gradcheck(&cfg)?;
            println!("{}", table_header());
            for r in &reports {
                print!("{r}");
            }
            let failed: Vec<&str> = reports
                .iter()
                .filter(|r| !r.passed())
                .map(|r| r.layer.as_str())
                .collect();
            if !failed.is_empty() {
                return Err(Failure::Oracle(format!(
                    "gradient check failed for {}",
                    failed.join(",")
                )));
            }
        }
        Command::Equivalence(args) => {
            let cfg = load_config(&args)?;
            let rows = cmd_equivalence(&cfg)?;
            println!("{:<16} {:<5} {:>13} {:>9} status", "pair", "mode", "max_dev", "tol");
            for r in &rows {
                println!(
                    "{:<16} {:<5} {:>13.3e} {:>9.0e} {}",
                    r.pair,
                    mode_name(r.mode),
                    r.max_deviation,
                    r.tolerance,
                    if r.passed() { "ok" } else { "FAIL" }
                );
            }
            let failed: Vec<String> = rows
                .iter()
                .filter(|r| !r.passed())
                .map(|r| format!("{}/{}", r.pair, mode_name(r.mode)))
                .collect();
            if !failed.is_empty() {
                return Err(Failure::Oracle(format!("equivalence failed for {}", failed.join(","))));
            }
        }
        Command::DumpIota { checkpoint, out_dir } => {
            let stats = cmd_dump_iota(&checkpoint, out_dir.as_deref())?;
            println!("layer min mean max");
            for s in &stats {
                println!("{} {:.6} {:.6} {:.6}", s.layer, s.min, s.mean, s.max);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            eprintln!(
                "{}",
                Failure::Usage(first.trim_start_matches("error: ").to_string()).line()
            );
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", f.line());
            ExitCode::from(f.code())
        }
    }
}
