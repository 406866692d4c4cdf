use std::process::ExitCode;

use clap::Parser;
use offload_core::proxy::{FaultProxy, ProxyConfig};

/// Fault-injection proxy between a client and one daemon.
#[derive(Parser)]
struct Args {
    #[arg(long)]
    listen: String,
    #[arg(long)]
    upstream: String,
    /// Cumulative client-to-daemon byte offsets at which to cut.
    #[arg(long, value_delimiter = ',')]
    cut_after: Vec<u64>,
    #[arg(long, default_value = "info")]
    log_level: String,
}

fn main() -> ExitCode {
    let args = Args::parse();
    offload_cli::init_logging(&args.log_level);
    let config = ProxyConfig { listen: args.listen, upstream: args.upstream, cut_after: args.cut_after };
    match FaultProxy::start(config) {
        Ok(p) => {
            log::info!("proxy listening on {}", p.local_addr());
            loop {
                std::thread::park();
            }
        }
        Err(e) => {
            log::error!("{e}");
            ExitCode::FAILURE
        }
    }
}
