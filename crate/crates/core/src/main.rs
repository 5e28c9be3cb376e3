use std::path::PathBuf;
use std::process::ExitCode;

use blockprec::cli::{self, Mode, RunConfig, Suite};
use blockprec::{Error, Result};
use clap::{Parser, Subcommand};
use log::error;

#[derive(Parser)]
#[command(name = "blockprec", version, about = "Block-float-point training with dynamic bit-widths")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write metrics, maps and a checkpoint
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config: dynamic, static<b> or fp
        #[arg(long)]
        mode: Option<Mode>,
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the output directory
        #[arg(long)]
        output_dir: Option<String>,
        /// Continue from the checkpoint in the output directory
        #[arg(long)]
        resume: bool,
    },
    /// Run the built-in property checks
    Validate {
        #[arg(long, default_value = "all")]
        suite: Suite,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Also write the gap study records to this CSV
        #[arg(long)]
        gap_csv: Option<PathBuf>,
    },
    /// Derive plot-ready tables from a run directory
    Plotdata { run_dir: PathBuf },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            config,
            mode,
            seed,
            output_dir,
            resume,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(m) = mode {
                cfg.mode = m;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(d) = output_dir {
                cfg.output_dir = d;
            }
            let out = cli::cmd_train(&cfg, resume)?;
            for m in &out.metrics {
                println!(
                    "epoch {:>3}  loss {:.4}  val_acc {}  bw_w {:.3}  bw_a {:.3}",
                    m.epoch,
                    m.train_loss,
                    m.val_acc.map_or("-".into(), |v| format!("{v:.4}")),
                    m.avg_bw_w,
                    m.avg_bw_a
                );
            }
            println!(
                "speedup vs 8-bit {:.3}  energy ratio {:.3}  -> {}",
                out.summary.speedup_vs_8bit,
                out.summary.energy_ratio,
                out.run_dir.display()
            );
            Ok(())
        }
        Command::Validate { suite, seed, gap_csv } => {
            if let Some(p) = gap_csv {
                let records = cli::validate::alloc_records(seed)?;
                let f = std::fs::File::create(&p).map_err(|e| Error::io(&p, e))?;
                blockprec::oracle::write_gap_csv(std::io::BufWriter::new(f), &records)?;
            }
            let checks = cli::cmd_validate(suite, seed)?;
            for c in &checks {
                println!("{c}");
            }
            let failed = checks.iter().filter(|c| !c.passed).count();
            if failed > 0 {
                return Err(Error::Validation(format!("{failed} of {} checks failed", checks.len())));
            }
            Ok(())
        }
        Command::Plotdata { run_dir } => {
            for p in cli::cmd_plotdata(&run_dir)? {
                println!("{}", p.display());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
