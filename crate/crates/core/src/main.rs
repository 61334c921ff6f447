use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use containment::cli::{self, RunOptions};

#[derive(Parser)]
#[command(
    name = "containment",
    version,
    about = "Containment control over intermittent, delayed, lossy links"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Scenario file (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for output files.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Check topology, gains, communication parameters and the small-gain condition.
    Validate {
        #[command(flatten)]
        common: Common,
        /// Print the JSON report instead of the text one.
        #[arg(long)]
        json: bool,
    },
    /// Simulate and write the trace, audit and plot files.
    Run(Common),
    /// Repeat the run over values of one numeric parameter.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Dotted config path, `gains.<name>` or `gains.*` (multipliers).
        #[arg(long)]
        axis: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
    /// Emit the certificate report as JSON.
    Report(Common),
}

fn options(c: &Common) -> RunOptions {
    RunOptions {
        seed: c.seed,
        out_dir: c.out.clone(),
    }
}

fn execute(cmd: Command) -> Result<bool, containment::Error> {
    match cmd {
        Command::Validate { common, json } => {
            let cfg = cli::load_config(&common.config)?;
            let report = cli::cmd_validate(&cfg);
            if json {
                println!("{}", report.to_json());
            } else {
                print!("{}", report.to_text());
            }
            if let Some(dir) = &common.out {
                cli::write_atomic(&dir.join("validation.json"), report.to_json().as_bytes())?;
            }
            Ok(report.pass)
        }
        Command::Run(common) => {
            let cfg = cli::load_config(&common.config)?;
            let summary = cli::cmd_run(&cfg, &options(&common))?;
            println!("{}", serde_json::to_string_pretty(&summary).expect("json"));
            Ok(true)
        }
        Command::Sweep { common, axis, values } => {
            let cfg = cli::load_config(&common.config)?;
            let summary = cli::cmd_sweep(&cfg, &axis, &values, &options(&common))?;
            print!("{}", summary.to_csv());
            Ok(true)
        }
        Command::Report(common) => {
            let cfg = cli::load_config(&common.config)?;
            let report = cli::cmd_report(&cfg, &options(&common))?;
            println!("{}", serde_json::to_string_pretty(&report).expect("json"));
            Ok(report.pass)
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse().command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(cli::exit_code(&e) as u8)
        }
    }
}
