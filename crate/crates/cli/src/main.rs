use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fedgraph::harness::{self, Experiment};
use fedgraph::FedGraphError;

/// Federated learning with graph-based aggregation over noisy channels.
#[derive(Parser)]
#[command(name = "fedgraph", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured aggregator for every seed.
    Run(Common),
    /// Run several aggregators on shared seeds, data and channel draws.
    Compare(Common),
    /// Final accuracy of jgesr across missing rates 0.00..0.10.
    SweepMissing(Common),
}

#[derive(Args)]
struct Common {
    /// JSON experiment file; defaults are used when omitted.
    config: Option<PathBuf>,
    /// Run a single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (beats the config file and FEDGRAPH_OUT_DIR).
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// `key=value` override; dotted keys reach nested fields, values are JSON.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl Common {
    fn load(&self) -> fedgraph::Result<(Experiment, PathBuf)> {
        let exp = Experiment::load(self.config.as_deref(), &self.overrides, self.seed)?;
        let out = exp.resolve_out_dir(self.out_dir.as_deref());
        Ok((exp, out))
    }
}

fn list(files: &[PathBuf]) {
    for f in files {
        println!("wrote {}", f.display());
    }
}

fn seeds_failed(what: &str) -> FedGraphError {
    FedGraphError::InvalidParameter(format!("{what}: at least one seed failed, see the report"))
}

fn run(cmd: &Command) -> fedgraph::Result<()> {
    match cmd {
        Command::Run(c) => {
            let (exp, out) = c.load()?;
            let res = harness::cmd_run(&exp, &out)?;
            let r = &res.report;
            println!(
                "{}: final accuracy {:.4} ± {:.4} over {} seed(s)",
                r.aggregator,
                r.mean_final_accuracy,
                r.std_final_accuracy,
                r.seeds.len()
            );
            list(&res.files);
            if res.failed() {
                for s in r.seeds.iter().filter(|s| s.error.is_some()) {
                    eprintln!("seed {}: {}", s.seed, s.error.as_deref().unwrap_or_default());
                }
                return Err(seeds_failed("run"));
            }
        }
        Command::Compare(c) => {
            let (exp, out) = c.load()?;
            let res = harness::cmd_compare(&exp, &out)?;
            print_file(&out.join("compare.md"));
            list(&res.files);
            if res.failed() {
                return Err(seeds_failed("compare"));
            }
        }
        Command::SweepMissing(c) => {
            let (exp, out) = c.load()?;
            let res = harness::cmd_sweep_missing(&exp, &out)?;
            for row in &res.rows {
                println!(
                    "missing {:.2}: {:.4} ± {:.4}",
                    row.missing_rate, row.mean_accuracy, row.std_accuracy
                );
            }
            list(&res.files);
            if res.failed() {
                return Err(seeds_failed("sweep-missing"));
            }
        }
    }
    Ok(())
}

fn print_file(path: &Path) {
    if let Ok(text) = std::fs::read_to_string(path) {
        for line in text.lines().filter(|l| !l.starts_with("<!--") && !l.is_empty()) {
            println!("{line}");
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(harness::exit_code(&e) as u8)
        }
    }
}
