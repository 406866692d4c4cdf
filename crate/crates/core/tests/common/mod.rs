#![allow(dead_code)]

use std::time::{Duration, Instant};

use offload_core::client::{Context, ContextConfig};
use offload_core::daemon::{Daemon, DaemonConfig};

pub fn init_logs() {
    let _ = env_logger::builder().is_test(true).try_init();
}

/// Daemons on loopback with a connected context.
pub struct Cluster {
    pub daemons: Vec<Daemon>,
    pub ctx: Context,
}

pub fn start_daemons(n: usize) -> Vec<Daemon> {
    (0..n).map(|_| Daemon::start(DaemonConfig::loopback()).expect("daemon starts")).collect()
}

pub fn addrs(daemons: &[Daemon]) -> Vec<String> {
    daemons.iter().map(|d| d.local_addr().to_string()).collect()
}

impl Cluster {
    pub fn new(n: usize) -> Cluster {
        init_logs();
        let daemons = start_daemons(n);
        let ctx = Context::connect(ContextConfig::new(addrs(&daemons))).expect("connect");
        Cluster { daemons, ctx }
    }

    /// Daemon-to-daemon bytes sent so far, summed over every daemon.
    pub fn peer_bytes(&self) -> u64 {
        self.daemons
            .iter()
            .flat_map(|d| d.sessions())
            .flat_map(|s| s.peer_stats().into_values())
            .map(|l| l.bytes_out)
            .sum()
    }

    pub fn push_frames(&self) -> u64 {
        self.daemons.iter().map(|d| d.stats().pushes_sent).sum()
    }

    /// Payload lengths of every push sent by daemon `from`.
    pub fn push_payloads(&self, from: usize) -> Vec<u64> {
        self.daemons[from]
            .sessions()
            .iter()
            .flat_map(|s| {
                let peers: Vec<u32> = s.peer_states().into_keys().collect();
                peers.into_iter().flat_map(|p| s.push_log(p)).map(|(_, len)| len).collect::<Vec<_>>()
            })
            .collect()
    }
}

impl Drop for Cluster {
    fn drop(&mut self) {
        self.ctx.close();
        for d in &self.daemons {
            d.shutdown();
        }
    }
}

pub fn wait_until(timeout: Duration, mut f: impl FnMut() -> bool) -> bool {
    let end = Instant::now() + timeout;
    while Instant::now() < end {
        if f() {
            return true;
        }
        std::thread::sleep(Duration::from_millis(2));
    }
    f()
}

pub mod gen;
