use std::process::ExitCode;

use clap::Parser;
use offload_core::{Daemon, DaemonConfig};

/// Compute daemon: serves clients and peers over TCP.
#[derive(Parser)]
struct Args {
    /// Address for client (and peer) connections.
    #[arg(long, default_value = "0.0.0.0:7070")]
    listen: String,
    /// Additional listener for peer connections.
    #[arg(long)]
    peer_listen: Option<String>,
    /// Executor threads per session.
    #[arg(long, default_value_t = 1)]
    executors: usize,
    /// SO_SNDBUF / SO_RCVBUF in bytes.
    #[arg(long)]
    socket_buffer: Option<usize>,
    /// Log filter; OFFLOAD_LOG overrides it.
    #[arg(long, default_value = "info")]
    log_level: String,
}

fn main() -> ExitCode {
    let args = Args::parse();
    offload_cli::init_logging(&args.log_level);
    let config = DaemonConfig {
        listen: args.listen,
        peer_listen: args.peer_listen,
        executors: args.executors,
        socket_buffer: args.socket_buffer,
    };
    match Daemon::start(config) {
        Ok(d) => {
            log::info!("listening on {}", d.local_addr());
            if let Some(p) = d.peer_addr() {
                log::info!("peer listener on {p}");
            }
            d.wait();
            ExitCode::SUCCESS
        }
        Err(e) => {
            log::error!("{e}");
            ExitCode::FAILURE
        }
    }
}
