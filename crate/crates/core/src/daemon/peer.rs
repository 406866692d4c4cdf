//! Outbound daemon-to-daemon links.
//!
//! Each session owns one link per remote daemon named in the client's peer
//! list. A link is write-only from this side: it carries `PushBuffer` and
//! `EventComplete` frames into the remote daemon's matching session. A
//! watcher thread blocks on the read half so that a closed link is noticed
//! even while idle.

use std::collections::{BTreeMap, VecDeque};
use std::io::{BufWriter, Read, Write};
use std::net::{Shutdown, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use parking_lot::Mutex;
use serde::Serialize;

use crate::net;
use crate::protocol::{
    encode_frame, encode_handshake, read_handshake_reply, Body, Handshake, HandshakeStatus, Message, Role,
    SessionId,
};

/// Completions remembered per link and replayed after it is re-established.
pub const COMPLETION_REPLAY: usize = 128;
const PUSH_LOG_LEN: usize = 4096;
const DIAL_TIMEOUT: Duration = Duration::from_millis(1000);
const BACKOFF_START: Duration = Duration::from_millis(20);
const BACKOFF_MAX: Duration = Duration::from_millis(1000);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum LinkState {
    Disconnected,
    Connecting,
    Ready,
}

#[derive(Debug, thiserror::Error)]
#[error("peer link {0} is down")]
pub struct LinkDown(pub u32);

#[derive(Debug, Default, Clone, Serialize)]
pub struct LinkStats {
    pub frames_out: u64,
    pub bytes_out: u64,
    pub push_frames: u64,
    pub push_payload_bytes: u64,
    pub completions_sent: u64,
    pub connects: u64,
}

/// Called with the origin command id of each push that could not be
/// delivered.
pub type PushLost = Arc<dyn Fn(u64) + Send + Sync>;

pub struct PeerLink {
    pub index: u32,
    pub addr: String,
    pub peer_session: SessionId,
    state: Mutex<LinkState>,
    tx: Mutex<Option<Sender<Message>>>,
    stream: Mutex<Option<TcpStream>>,
    completions: Mutex<VecDeque<Message>>,
    stats: Mutex<LinkStats>,
    push_log: Mutex<VecDeque<(u64, u64)>>,
    seq: AtomicU64,
    closed: AtomicBool,
    shutdown: Arc<AtomicBool>,
    on_push_lost: PushLost,
    socket_buffer: Option<usize>,
}

impl PeerLink {
    pub fn state(&self) -> LinkState {
        *self.state.lock()
    }

    pub fn stats(&self) -> LinkStats {
        self.stats.lock().clone()
    }

    /// `(buffer_id, payload_len)` of recent pushes, oldest first.
    pub fn push_log(&self) -> Vec<(u64, u64)> {
        self.push_log.lock().iter().copied().collect()
    }

    fn next_id(&self) -> u64 {
        self.seq.fetch_add(1, Ordering::Relaxed) + 1
    }

    fn stopped(&self) -> bool {
        self.closed.load(Ordering::Acquire) || self.shutdown.load(Ordering::Acquire)
    }

    fn send(&self, body: Body) -> Result<(), LinkDown> {
        let tx = self.tx.lock();
        match (&*tx, self.state()) {
            (Some(tx), LinkState::Ready) => {
                tx.send(Message::new(self.next_id(), body)).map_err(|_| LinkDown(self.index))
            }
            _ => Err(LinkDown(self.index)),
        }
    }

    pub fn send_push(&self, push: Body) -> Result<(), LinkDown> {
        debug_assert!(matches!(push, Body::PushBuffer { .. }));
        self.send(push)
    }

    pub fn send_completion(self: &Arc<Self>, completed_command_id: u64, status: u8) -> Result<(), LinkDown> {
        let body = Body::EventComplete { completed_command_id, status };
        {
            let mut ring = self.completions.lock();
            if ring.len() == COMPLETION_REPLAY {
                ring.pop_front();
            }
            ring.push_back(Message::new(0, body.clone()));
        }
        self.send(body)
    }

    fn dial(&self) -> std::io::Result<TcpStream> {
        let mut stream = net::dial(&self.addr, DIAL_TIMEOUT)?;
        net::configure(&stream, self.socket_buffer)?;
        stream.write_all(&encode_handshake(&Handshake::new(Role::Peer, self.peer_session)))?;
        stream.set_read_timeout(Some(DIAL_TIMEOUT))?;
        let reply = read_handshake_reply(&mut stream)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::ConnectionRefused, e.to_string()))?;
        stream.set_read_timeout(None)?;
        if reply.status != HandshakeStatus::Resumed {
            return Err(std::io::Error::new(
                std::io::ErrorKind::ConnectionRefused,
                format!("peer {} does not know session {:?}", self.addr, self.peer_session),
            ));
        }
        Ok(stream)
    }

    /// Dials once; on success starts the writer and watcher threads and
    /// replays remembered completions.
    fn establish(self: &Arc<Self>) -> bool {
        *self.state.lock() = LinkState::Connecting;
        let stream = match self.dial() {
            Ok(s) => s,
            Err(e) => {
                log::debug!("peer {} ({}) dial failed: {e}", self.index, self.addr);
                *self.state.lock() = LinkState::Disconnected;
                return false;
            }
        };
        let (tx, rx) = mpsc::channel();
        let replay: Vec<Message> = self.completions.lock().iter().cloned().collect();
        for mut m in replay {
            m.command_id = self.next_id();
            let _ = tx.send(m);
        }
        let writer_stream = stream.try_clone();
        let watch_stream = stream.try_clone();
        let (writer_stream, watch_stream) = match (writer_stream, watch_stream) {
            (Ok(w), Ok(r)) => (w, r),
            _ => {
                *self.state.lock() = LinkState::Disconnected;
                return false;
            }
        };
        *self.stream.lock() = Some(stream);
        *self.tx.lock() = Some(tx);
        self.stats.lock().connects += 1;
        *self.state.lock() = LinkState::Ready;
        log::debug!("peer link {} to {} ready", self.index, self.addr);

        let link = Arc::clone(self);
        thread::Builder::new()
            .name(format!("peer-writer-{}", self.index))
            .spawn(move || link.writer_loop(writer_stream, rx))
            .expect("spawn peer writer");
        let link = Arc::clone(self);
        thread::Builder::new()
            .name(format!("peer-watch-{}", self.index))
            .spawn(move || link.watch_loop(watch_stream))
            .expect("spawn peer watcher");
        true
    }

    fn writer_loop(self: Arc<Self>, stream: TcpStream, rx: Receiver<Message>) {
        let mut out = BufWriter::with_capacity(64 * 1024, stream);
        let mut failed = false;
        while let Ok(first) = rx.recv() {
            let mut batch = vec![first];
            batch.extend(rx.try_iter());
            for (i, msg) in batch.iter().enumerate() {
                let bytes = match encode_frame(msg) {
                    Ok(b) => b,
                    Err(e) => {
                        log::error!("peer {}: cannot encode {:?}: {e}", self.index, msg.body.msg_type());
                        continue;
                    }
                };
                // Recorded first so observers never see the effect of a frame
                // before its accounting.
                self.record_sent(msg, bytes.len());
                if let Err(e) = out.write_all(&bytes) {
                    log::debug!("peer {} write failed: {e}", self.index);
                    self.lose_pushes(&batch[i..]);
                    failed = true;
                    break;
                }
            }
            if failed || out.flush().is_err() {
                failed = true;
                break;
            }
        }
        if failed {
            self.link_lost();
            self.lose_pushes(&rx.try_iter().collect::<Vec<_>>());
        }
    }

    fn record_sent(&self, msg: &Message, len: usize) {
        let mut s = self.stats.lock();
        s.frames_out += 1;
        s.bytes_out += len as u64;
        match &msg.body {
            Body::PushBuffer { buffer_id, payload, .. } => {
                s.push_frames += 1;
                s.push_payload_bytes += payload.len() as u64;
                let mut log = self.push_log.lock();
                if log.len() == PUSH_LOG_LEN {
                    log.pop_front();
                }
                log.push_back((*buffer_id, payload.len() as u64));
            }
            Body::EventComplete { .. } => s.completions_sent += 1,
            _ => {}
        }
    }

    fn lose_pushes(&self, msgs: &[Message]) {
        for m in msgs {
            if let Body::PushBuffer { origin_command_id, .. } = m.body {
                (self.on_push_lost)(origin_command_id);
            }
        }
    }

    fn watch_loop(self: Arc<Self>, mut stream: TcpStream) {
        let mut buf = [0u8; 64];
        loop {
            match stream.read(&mut buf) {
                Ok(0) | Err(_) => break,
                Ok(_) => {}
            }
        }
        self.link_lost();
    }

    /// Tears down the current connection (once) and starts redialing.
    fn link_lost(self: &Arc<Self>) {
        let stream = self.stream.lock().take();
        let Some(stream) = stream else { return };
        let _ = stream.shutdown(Shutdown::Both);
        let tx = self.tx.lock().take();
        *self.state.lock() = LinkState::Disconnected;
        drop(tx);
        if !self.stopped() {
            log::info!("peer link {} to {} lost, redialing", self.index, self.addr);
            self.spawn_redial();
        }
    }

    fn spawn_redial(self: &Arc<Self>) {
        let link = Arc::clone(self);
        thread::Builder::new()
            .name(format!("peer-redial-{}", self.index))
            .spawn(move || {
                let mut backoff = BACKOFF_START;
                while !link.stopped() {
                    thread::sleep(backoff);
                    if link.stopped() || link.establish() {
                        return;
                    }
                    backoff = (backoff * 2).min(BACKOFF_MAX);
                }
            })
            .expect("spawn peer redial");
    }

    pub fn close(&self) {
        self.closed.store(true, Ordering::Release);
        if let Some(s) = self.stream.lock().take() {
            let _ = s.shutdown(Shutdown::Both);
        }
        self.tx.lock().take();
        *self.state.lock() = LinkState::Disconnected;
    }
}

/// All outbound links of one session.
pub struct PeerMesh {
    links: Mutex<BTreeMap<u32, Arc<PeerLink>>>,
    shutdown: Arc<AtomicBool>,
    on_push_lost: PushLost,
    socket_buffer: Option<usize>,
}

impl PeerMesh {
    pub fn new(shutdown: Arc<AtomicBool>, on_push_lost: PushLost, socket_buffer: Option<usize>) -> Self {
        PeerMesh { links: Mutex::new(BTreeMap::new()), shutdown, on_push_lost, socket_buffer }
    }

    /// Ensures a link to `index` exists for `(addr, peer_session)`. Re-applying
    /// the same binding is a no-op; a changed binding replaces the old link.
    /// Returns the link state after the first dial attempt.
    pub fn connect(&self, index: u32, addr: &str, peer_session: SessionId) -> LinkState {
        let link = {
            let mut links = self.links.lock();
            if let Some(existing) = links.get(&index) {
                if existing.addr == addr && existing.peer_session == peer_session {
                    return existing.state();
                }
                existing.close();
            }
            let link = Arc::new(PeerLink {
                index,
                addr: addr.to_string(),
                peer_session,
                state: Mutex::new(LinkState::Connecting),
                tx: Mutex::new(None),
                stream: Mutex::new(None),
                completions: Mutex::new(VecDeque::new()),
                stats: Mutex::new(LinkStats::default()),
                push_log: Mutex::new(VecDeque::new()),
                seq: AtomicU64::new(0),
                closed: AtomicBool::new(false),
                shutdown: Arc::clone(&self.shutdown),
                on_push_lost: Arc::clone(&self.on_push_lost),
                socket_buffer: self.socket_buffer,
            });
            links.insert(index, Arc::clone(&link));
            link
        };
        if !link.establish() {
            link.spawn_redial();
        }
        link.state()
    }

    pub fn link(&self, index: u32) -> Option<Arc<PeerLink>> {
        self.links.lock().get(&index).cloned()
    }

    pub fn links(&self) -> Vec<Arc<PeerLink>> {
        self.links.lock().values().cloned().collect()
    }

    pub fn states(&self) -> BTreeMap<u32, LinkState> {
        self.links.lock().iter().map(|(i, l)| (*i, l.state())).collect()
    }

    pub fn send_push(&self, index: u32, push: Body) -> Result<(), LinkDown> {
        self.link(index).ok_or(LinkDown(index))?.send_push(push)
    }

    /// Sends an `EventComplete` on every link; returns the indices of links it
    /// was handed to. Links that are down still remember it for replay.
    pub fn broadcast_completion(&self, command_id: u64, status: u8) -> Vec<u32> {
        self.links()
            .into_iter()
            .filter_map(|l| l.send_completion(command_id, status).ok().map(|_| l.index))
            .collect()
    }

    pub fn close_all(&self) {
        for l in self.links.lock().values() {
            l.close();
        }
    }
}
