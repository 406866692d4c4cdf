use std::fs::OpenOptions;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use offload_core::bench::{Bench, BenchReport, DEFAULT_ITERS};
use offload_core::{Context, ContextConfig};

/// Benchmarks against running daemons.
#[derive(Parser)]
struct Args {
    #[command(subcommand)]
    bench: Which,
    /// Daemon addresses separated by `;`; defaults to OFFLOAD_SERVERS.
    #[arg(long, global = true)]
    servers: Option<String>,
    #[arg(long, global = true, default_value_t = DEFAULT_ITERS)]
    iters: usize,
    /// Append the JSON report line to this file.
    #[arg(long, global = true)]
    json: Option<PathBuf>,
    #[arg(long, global = true, default_value = "warn")]
    log_level: String,
}

#[derive(Subcommand)]
enum Which {
    Nop,
    Migrate,
    Matmul {
        #[arg(long, default_value_t = 256)]
        n: u64,
    },
    Stencil {
        #[arg(long, default_value_t = 1024)]
        n: u64,
        #[arg(long, default_value_t = 100)]
        steps: u64,
    },
}

fn run(args: &Args) -> Result<BenchReport, Box<dyn std::error::Error>> {
    let config = match &args.servers {
        Some(list) => ContextConfig::new(offload_cli::parse_list(list)),
        None => ContextConfig::from_env().ok_or("no servers: pass --servers or set OFFLOAD_SERVERS")?,
    };
    let ctx = Context::connect(config)?;
    let bench = Bench::new(&ctx);
    let report = match &args.bench {
        Which::Nop => bench.nop(args.iters)?,
        Which::Migrate => bench.migration(args.iters)?,
        Which::Matmul { n } => bench.matmul(*n, args.iters)?,
        Which::Stencil { n, steps } => bench.stencil(*n, *steps)?,
    };
    Ok(report)
}

fn main() -> ExitCode {
    let args = Args::parse();
    offload_cli::init_logging(&args.log_level);
    match run(&args) {
        Ok(report) => {
            let line = report.to_json_line();
            println!("{line}");
            if let Some(path) = &args.json {
                let written = OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(path)
                    .and_then(|mut f| writeln!(f, "{line}"));
                if let Err(e) = written {
                    eprintln!("cannot write {}: {e}", path.display());
                    return ExitCode::FAILURE;
                }
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("bench failed: {e}");
            ExitCode::FAILURE
        }
    }
}
