use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mfcast::cli::{self, RunConfig, EXIT_CONFIG};

#[derive(Parser)]
#[command(name = "mfcast", version, about = "Forecasting under missing features")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate (or copy) the configured series to <out>/data.csv
    Synth(Common),
    /// Train the nominal model and partition artifacts
    Train(Common),
    /// Evaluate artifacts on the missingness grid
    Evaluate(Common),
    /// Rebuild CSV reports and the pairwise test table
    Report(Common),
}

#[derive(Args)]
struct Common {
    /// JSON run configuration
    #[arg(long)]
    config: PathBuf,
    /// Override the configuration seed
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Override the output directory
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> mfcast::Result<RunConfig> {
        let mut cfg = RunConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        Ok(cfg)
    }
}

fn run(cmd: &Command) -> mfcast::Result<()> {
    let common = match cmd {
        Command::Synth(c) | Command::Train(c) | Command::Evaluate(c) | Command::Report(c) => c,
    };
    let cfg = common.load()?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(common.jobs.max(1))
        .build_global()
        .map_err(|e| mfcast::Error::Config(format!("thread pool: {e}")))?;
    match cmd {
        Command::Synth(_) => {
            let path = cli::cmd_synth(&cfg)?;
            println!("wrote {}", path.display());
        }
        Command::Train(_) => {
            let summary = cli::cmd_train(&cfg)?;
            for (label, table) in &summary.bounds_tables {
                println!("{label}\n{table}");
            }
            for f in &summary.files {
                println!("wrote {}", f.display());
            }
        }
        Command::Evaluate(_) => {
            let bundle = cli::cmd_evaluate(&cfg)?;
            for s in bundle.result.summary() {
                println!(
                    "{:<16} h={} p01={} p11={} nrmse={:.3} (sd {:.3})",
                    s.method.label(),
                    s.h,
                    s.p01,
                    s.p11,
                    s.mean,
                    s.std
                );
            }
            for r in &bundle.qsweep {
                println!("Q={:<4} nrmse={:.3} max relgap={:.4}", r.q, r.nrmse_mean, r.max_relgap);
            }
            println!("wrote {}", cfg.report_dir().display());
        }
        Command::Report(_) => {
            let path = cli::cmd_report(&cfg)?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let parsed = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_CONFIG as u8 } else { 0 });
        }
    };
    match run(&parsed.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(cli::exit_code(&e) as u8)
        }
    }
}
