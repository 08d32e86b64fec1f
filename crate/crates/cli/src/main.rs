use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use sublora::harness::{self, RunConfig};

/// Train small transformers through SubLoRA and certify their
/// generalization with compression bounds.
#[derive(Parser)]
#[command(name = "sublora", version)]
struct Cli {
    /// JSON run configuration; defaults apply to any missing field.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the job seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Records deterministic mode in the configuration.
    #[arg(long, global = true)]
    deterministic: bool,

    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,

    /// Reuse finished checkpoints and continue from training snapshots.
    #[arg(long, global = true)]
    resume: bool,

    /// Print the canonical configuration before running.
    #[arg(long, global = true)]
    print_config: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Tokenize the configured sources into `<out-dir>/corpus`.
    Ingest,
    /// Train the first configured grid point and quantize it.
    Train,
    /// Certify a quantized checkpoint.
    Certify {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train and certify every grid point.
    Sweep,
    /// Permutation, scaling and sequence-level studies on the best point.
    Experiments,
    /// Audit all certificates and print a summary table.
    Report,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if cli.deterministic {
        cfg.deterministic = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let out = &cli.out_dir;
    if let Command::Report = cli.command {
        print!("{}", harness::cmd_report(out)?);
        return Ok(());
    }
    let cfg = load_config(&cli)?;
    if cli.print_config {
        println!("{}", cfg.canonical());
    }
    match &cli.command {
        Command::Ingest => {
            let c = harness::cmd_ingest(&cfg, out)?;
            print_json(&c.manifest())?;
        }
        Command::Train => {
            for p in harness::cmd_train(&cfg, out, cli.resume)? {
                println!("{}", p.display());
            }
        }
        Command::Certify { checkpoint } => {
            let c = harness::cmd_certify(&cfg, checkpoint, out)?;
            print_json(&c.report)?;
            log::info!("wrote {}", c.report_path.display());
        }
        Command::Sweep => {
            let s = harness::cmd_sweep(&cfg, out, cli.resume)?;
            let failed = s.rows.iter().filter(|r| !r.is_ok()).count();
            if let Some(b) = s.best_row() {
                println!("best {}: BPD bound {:.4}", b.tag, b.bpd_bound.unwrap_or(f64::NAN));
            }
            println!("{} certificates, {failed} failed", s.rows.len());
        }
        Command::Experiments => {
            print_json(&harness::cmd_experiments(&cfg, out, cli.resume)?)?;
        }
        Command::Report => unreachable!(),
    }
    Ok(())
}
