//! The compute daemon.
//!
//! A daemon accepts client and peer connections on one listener (and
//! optionally a second, peer-only listener). The handshake decides what a
//! connection is: a client connection gets a reader thread that dispatches
//! commands into its session and a writer thread that drains the session's
//! reply queue; a peer connection gets a reader thread that feeds pushes and
//! completion notices into the session it names.

mod peer;
mod session;

use std::collections::HashMap;
use std::io::{BufReader, BufWriter, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use parking_lot::Mutex;
use serde::Serialize;
use thiserror::Error;

pub use peer::{LinkState, LinkStats, COMPLETION_REPLAY};
pub use session::{BufferRecord, Session, RESULT_CACHE};

use crate::net;
use crate::protocol::{
    encode_frame, encode_handshake_reply, read_frame, read_handshake, Handshake, HandshakeReply, HandshakeStatus,
    Message, ProtocolError, Role, SessionId,
};
use session::ClientLink;

#[derive(Debug, Error)]
pub enum DaemonError {
    #[error("cannot bind {addr}: {source}")]
    BindFailure { addr: String, source: std::io::Error },
}

#[derive(Debug, Clone)]
pub struct DaemonConfig {
    pub listen: String,
    pub peer_listen: Option<String>,
    pub executors: usize,
    /// SO_SNDBUF / SO_RCVBUF for accepted and dialed sockets.
    pub socket_buffer: Option<usize>,
}

impl DaemonConfig {
    pub fn new(listen: impl Into<String>) -> Self {
        DaemonConfig { listen: listen.into(), peer_listen: None, executors: 1, socket_buffer: None }
    }

    pub fn loopback() -> Self {
        DaemonConfig::new("127.0.0.1:0")
    }
}

#[derive(Debug, Default)]
pub struct DaemonStats {
    client_bytes_in: AtomicU64,
    client_bytes_out: AtomicU64,
    peer_bytes_in: AtomicU64,
    pushes_sent: AtomicU64,
    pushes_received: AtomicU64,
    completions_received: AtomicU64,
    kernels_run: AtomicU64,
    duplicates: AtomicU64,
    peer_connections_accepted: AtomicU64,
    client_connections_accepted: AtomicU64,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct StatsSnapshot {
    pub client_bytes_in: u64,
    pub client_bytes_out: u64,
    pub peer_bytes_in: u64,
    pub pushes_sent: u64,
    pub pushes_received: u64,
    pub completions_received: u64,
    pub kernels_run: u64,
    pub duplicates: u64,
    pub peer_connections_accepted: u64,
    pub client_connections_accepted: u64,
}

macro_rules! bump {
    ($($name:ident => $field:ident),* $(,)?) => {
        impl DaemonStats {
            $(pub(crate) fn $name(&self) { self.$field.fetch_add(1, Ordering::Relaxed); })*
        }
    };
}

bump! {
    bump_pushes_sent => pushes_sent,
    bump_pushes_received => pushes_received,
    bump_completions_received => completions_received,
    bump_kernels => kernels_run,
    bump_duplicates => duplicates,
}

impl DaemonStats {
    pub(crate) fn unbump_pushes_sent(&self) {
        self.pushes_sent.fetch_sub(1, Ordering::Relaxed);
    }

    pub fn snapshot(&self) -> StatsSnapshot {
        let g = |a: &AtomicU64| a.load(Ordering::Relaxed);
        StatsSnapshot {
            client_bytes_in: g(&self.client_bytes_in),
            client_bytes_out: g(&self.client_bytes_out),
            peer_bytes_in: g(&self.peer_bytes_in),
            pushes_sent: g(&self.pushes_sent),
            pushes_received: g(&self.pushes_received),
            completions_received: g(&self.completions_received),
            kernels_run: g(&self.kernels_run),
            duplicates: g(&self.duplicates),
            peer_connections_accepted: g(&self.peer_connections_accepted),
            client_connections_accepted: g(&self.client_connections_accepted),
        }
    }
}

struct Shared {
    config: DaemonConfig,
    sessions: Mutex<HashMap<SessionId, Arc<Session>>>,
    streams: Mutex<HashMap<u64, TcpStream>>,
    next_conn: AtomicU64,
    shutdown: Arc<AtomicBool>,
    stats: Arc<DaemonStats>,
}

/// A running daemon. Dropping the handle does not stop it; call
/// [`Daemon::shutdown`].
pub struct Daemon {
    shared: Arc<Shared>,
    addrs: Vec<SocketAddr>,
    acceptors: Mutex<Vec<JoinHandle<()>>>,
}

impl Daemon {
    /// Binds the listeners and starts accepting in background threads.
    pub fn start(config: DaemonConfig) -> Result<Daemon, DaemonError> {
        let mut listeners = Vec::new();
        for addr in std::iter::once(&config.listen).chain(config.peer_listen.iter()) {
            let l = TcpListener::bind(addr)
                .map_err(|source| DaemonError::BindFailure { addr: addr.clone(), source })?;
            listeners.push(l);
        }
        let addrs: Vec<SocketAddr> = listeners.iter().map(|l| l.local_addr().expect("bound listener")).collect();
        let shared = Arc::new(Shared {
            config,
            sessions: Mutex::new(HashMap::new()),
            streams: Mutex::new(HashMap::new()),
            next_conn: AtomicU64::new(0),
            shutdown: Arc::new(AtomicBool::new(false)),
            stats: Arc::new(DaemonStats::default()),
        });
        let acceptors = listeners
            .into_iter()
            .enumerate()
            .map(|(i, l)| {
                let shared = Arc::clone(&shared);
                thread::Builder::new()
                    .name(format!("accept-{i}"))
                    .spawn(move || accept_loop(shared, l))
                    .expect("spawn acceptor")
            })
            .collect();
        log::info!("daemon listening on {:?}", addrs);
        Ok(Daemon { shared, addrs, acceptors: Mutex::new(acceptors) })
    }

    /// Address of the main listener.
    pub fn local_addr(&self) -> SocketAddr {
        self.addrs[0]
    }

    pub fn peer_addr(&self) -> Option<SocketAddr> {
        self.addrs.get(1).copied()
    }

    /// Blocks until the daemon is shut down.
    pub fn wait(&self) {
        let handles: Vec<_> = self.acceptors.lock().drain(..).collect();
        for h in handles {
            let _ = h.join();
        }
    }

    pub fn is_shut_down(&self) -> bool {
        self.shared.shutdown.load(Ordering::Acquire)
    }

    /// Stops accepting, closes every connection and stops all workers. The
    /// effect on clients is the same as the process dying.
    pub fn shutdown(&self) {
        if self.shared.shutdown.swap(true, Ordering::AcqRel) {
            return;
        }
        for a in &self.addrs {
            // wake the blocking accept
            let _ = TcpStream::connect_timeout(a, Duration::from_millis(200));
        }
        for (_, s) in self.shared.streams.lock().drain() {
            let _ = s.shutdown(Shutdown::Both);
        }
        for s in self.shared.sessions.lock().values() {
            s.peers.close_all();
            s.wake_all();
            if let Some(c) = s.state.lock().client.take() {
                let _ = c.stream.shutdown(Shutdown::Both);
            }
        }
        self.wait();
        log::info!("daemon on {} shut down", self.addrs[0]);
    }

    pub fn stats(&self) -> StatsSnapshot {
        self.shared.stats.snapshot()
    }

    pub fn session(&self, id: SessionId) -> Option<Arc<Session>> {
        self.shared.sessions.lock().get(&id).cloned()
    }

    pub fn sessions(&self) -> Vec<Arc<Session>> {
        self.shared.sessions.lock().values().cloned().collect()
    }

    /// Number of currently open sockets (client and peer, both directions of
    /// accept; dialed peer links are not included).
    pub fn open_connections(&self) -> usize {
        self.shared.streams.lock().len()
    }
}

fn accept_loop(shared: Arc<Shared>, listener: TcpListener) {
    for conn in listener.incoming() {
        if shared.shutdown.load(Ordering::Acquire) {
            break;
        }
        let stream = match conn {
            Ok(s) => s,
            Err(e) => {
                log::warn!("accept failed: {e}");
                continue;
            }
        };
        let shared = Arc::clone(&shared);
        let _ = thread::Builder::new().name("conn".into()).spawn(move || handle_connection(shared, stream));
    }
}

fn track(shared: &Shared, stream: &TcpStream) -> Option<u64> {
    let id = shared.next_conn.fetch_add(1, Ordering::Relaxed);
    let clone = stream.try_clone().ok()?;
    shared.streams.lock().insert(id, clone);
    if shared.shutdown.load(Ordering::Acquire) {
        shared.streams.lock().remove(&id);
        return None;
    }
    Some(id)
}

fn handle_connection(shared: Arc<Shared>, mut stream: TcpStream) {
    if let Err(e) = net::configure(&stream, shared.config.socket_buffer) {
        log::warn!("cannot configure socket: {e}");
    }
    let Some(conn_id) = track(&shared, &stream) else { return };
    let _ = stream.set_read_timeout(Some(Duration::from_secs(10)));
    let hs = match read_handshake(&mut stream) {
        Ok(h) => h,
        Err(e) => {
            log::warn!("handshake failed: {e}");
            shared.streams.lock().remove(&conn_id);
            return;
        }
    };
    let _ = stream.set_read_timeout(None);
    match hs.role {
        Role::Client => client_connection(&shared, stream, hs, conn_id),
        Role::Peer => peer_connection(&shared, stream, hs, conn_id),
    }
    shared.streams.lock().remove(&conn_id);
}

fn new_session(shared: &Shared) -> Arc<Session> {
    let mut sessions = shared.sessions.lock();
    let id = loop {
        let id = SessionId::generate();
        if !sessions.contains_key(&id) {
            break id;
        }
    };
    let s = Session::create(
        id,
        shared.config.executors,
        shared.config.socket_buffer,
        Arc::clone(&shared.stats),
        Arc::clone(&shared.shutdown),
    );
    sessions.insert(id, Arc::clone(&s));
    s
}

fn client_connection(shared: &Arc<Shared>, mut stream: TcpStream, hs: Handshake, conn_id: u64) {
    shared.stats.client_connections_accepted.fetch_add(1, Ordering::Relaxed);
    let existing = if hs.session_id.is_new() { None } else { shared.sessions.lock().get(&hs.session_id).cloned() };
    let (session, status) = match existing {
        Some(s) => (s, HandshakeStatus::Resumed),
        None if hs.session_id.is_new() => (new_session(shared), HandshakeStatus::New),
        None => (new_session(shared), HandshakeStatus::UnknownSession),
    };
    if status == HandshakeStatus::Resumed {
        session.detach_client();
    }
    let reply = HandshakeReply { handshake: Handshake::new(Role::Client, session.id), status };
    if stream.write_all(&encode_handshake_reply(&reply)).is_err() {
        return;
    }
    log::info!("client session {:?}: {:?}", session.id, status);

    let (tx, rx) = mpsc::channel();
    let (Ok(writer_stream), Ok(link_stream)) = (stream.try_clone(), stream.try_clone()) else { return };
    let writer_shared = Arc::clone(shared);
    let writer = thread::Builder::new()
        .name("client-writer".into())
        .spawn(move || client_writer(writer_shared, writer_stream, rx))
        .expect("spawn client writer");
    session.attach_client(ClientLink { generation: conn_id, tx, stream: link_stream, reader: None });

    let reader_session = Arc::clone(&session);
    let reader_shared = Arc::clone(shared);
    let reader = thread::Builder::new()
        .name("client-reader".into())
        .spawn(move || client_reader(reader_shared, reader_session, stream, conn_id))
        .expect("spawn client reader");
    session.set_reader(conn_id, reader);
    let _ = writer.join();
}

fn client_reader(shared: Arc<Shared>, session: Arc<Session>, stream: TcpStream, generation: u64) {
    let mut reader = BufReader::with_capacity(64 * 1024, stream);
    loop {
        match read_frame(&mut reader) {
            Ok((msg, len)) => {
                shared.stats.client_bytes_in.fetch_add(len as u64, Ordering::Relaxed);
                session.dispatch(msg);
            }
            Err(e) => {
                if e.is_connection_loss() {
                    log::info!("client connection of session {:?} lost: {e}", session.id);
                } else {
                    log::warn!("closing client connection of session {:?}: {e}", session.id);
                }
                let _ = reader.get_ref().shutdown(Shutdown::Both);
                break;
            }
        }
    }
    session.client_gone(generation);
}

fn client_writer(shared: Arc<Shared>, stream: TcpStream, rx: Receiver<Vec<Message>>) {
    let mut out = BufWriter::with_capacity(64 * 1024, stream);
    while let Ok(first) = rx.recv() {
        let mut batches = vec![first];
        batches.extend(rx.try_iter());
        for msg in batches.iter().flatten() {
            match encode_frame(msg) {
                Ok(bytes) => {
                    if out.write_all(&bytes).is_err() {
                        return;
                    }
                    shared.stats.client_bytes_out.fetch_add(bytes.len() as u64, Ordering::Relaxed);
                }
                Err(e) => log::error!("cannot encode reply: {e}"),
            }
        }
        if out.flush().is_err() {
            return;
        }
    }
}

fn peer_connection(shared: &Arc<Shared>, mut stream: TcpStream, hs: Handshake, _conn_id: u64) {
    shared.stats.peer_connections_accepted.fetch_add(1, Ordering::Relaxed);
    let session = shared.sessions.lock().get(&hs.session_id).cloned();
    let status = if session.is_some() { HandshakeStatus::Resumed } else { HandshakeStatus::UnknownSession };
    let reply = HandshakeReply { handshake: Handshake::new(Role::Peer, hs.session_id), status };
    if stream.write_all(&encode_handshake_reply(&reply)).is_err() {
        return;
    }
    let Some(session) = session else {
        log::warn!("peer named unknown session {:?}", hs.session_id);
        return;
    };
    let mut reader = BufReader::with_capacity(64 * 1024, stream);
    loop {
        match read_frame(&mut reader) {
            Ok((msg, len)) => {
                shared.stats.peer_bytes_in.fetch_add(len as u64, Ordering::Relaxed);
                session.dispatch_peer(msg);
            }
            Err(ProtocolError::Closed) => break,
            Err(e) => {
                log::info!("peer connection for session {:?} ended: {e}", session.id);
                break;
            }
        }
    }
}
