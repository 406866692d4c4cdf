//! Distributed compute-offloading runtime.
//!
//! * [`protocol`]: bit-exact wire format and codec.
//! * [`event_graph`]: command dependency DAG used by client and daemons.
//! * [`kernels`]: deterministic built-in kernels.
//! * [`daemon`]: the server process, including the peer mesh between daemons.
//! * [`client`]: host-side library with implicit migration and reconnect.
//! * [`reference`]: single-process executor used as a correctness oracle.
//! * [`bench`] and [`proxy`]: measurement harness and fault-injection proxy.

pub mod bench;
pub mod client;
pub mod daemon;
pub mod event_graph;
pub mod kernels;
mod net;
pub mod protocol;
pub mod proxy;
pub mod reference;
pub mod status;

pub use client::{Context, ContextConfig, ClientError, Event, ServerConfig};
pub use daemon::{Daemon, DaemonConfig, DaemonError};
