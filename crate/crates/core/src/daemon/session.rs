//! Per-client session state and command execution.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::net::{Shutdown, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::Sender;
use std::sync::{Arc, Weak};
use std::thread::{self, JoinHandle};

use parking_lot::{Condvar, Mutex};

use super::peer::{LinkState, LinkStats, PeerMesh};
use super::DaemonStats;
use crate::event_graph::{EventKind, EventStatus, TaskGraph};
use crate::kernels::{self, BufferStore};
use crate::protocol::{ArgDesc, Body, Message, SessionId};
use crate::status;

/// Replies remembered for re-emission after a reconnect or a replayed command.
pub const RESULT_CACHE: usize = 128;

#[derive(Debug, Clone)]
pub struct BufferRecord {
    pub buffer_id: u64,
    pub data: Vec<u8>,
    pub valid_here: bool,
}

impl BufferRecord {
    pub fn capacity(&self) -> u64 {
        self.data.len() as u64
    }
}

struct Buffers<'a>(&'a mut HashMap<u64, BufferRecord>);

impl BufferStore for Buffers<'_> {
    fn take(&mut self, id: u64) -> Option<Vec<u8>> {
        self.0.get_mut(&id).map(|b| std::mem::take(&mut b.data))
    }
    fn put(&mut self, id: u64, data: Vec<u8>) {
        if let Some(b) = self.0.get_mut(&id) {
            b.data = data;
        }
    }
}

pub(crate) struct ClientLink {
    pub generation: u64,
    pub tx: Sender<Vec<Message>>,
    pub stream: TcpStream,
    pub reader: Option<JoinHandle<()>>,
}

pub(crate) struct SessionState {
    pub buffers: HashMap<u64, BufferRecord>,
    pub graph: TaskGraph,
    commands: HashMap<u64, Body>,
    /// Highest client command id accepted so far. Frames on one connection
    /// arrive in order and the client numbers them increasingly, so any id at
    /// or below this mark has already been accepted.
    pub highest_seen: u64,
    result_cache: VecDeque<(u64, Vec<Body>)>,
    pub content_links: HashMap<u64, u64>,
    pub client: Option<ClientLink>,
    reply_seq: u64,
    pub peer_addrs: Vec<String>,
    pub executed: u64,
    pub duplicates: u64,
}

pub struct Session {
    pub id: SessionId,
    pub(crate) state: Mutex<SessionState>,
    work: Condvar,
    pub(crate) peers: PeerMesh,
    stats: Arc<DaemonStats>,
    shutdown: Arc<AtomicBool>,
}

enum Outcome {
    Done(u8, Vec<Body>),
    /// Migration handed to a peer link; the destination reports completion.
    Pushed,
}

impl Session {
    pub(crate) fn create(
        id: SessionId,
        executors: usize,
        socket_buffer: Option<usize>,
        stats: Arc<DaemonStats>,
        shutdown: Arc<AtomicBool>,
    ) -> Arc<Session> {
        let session = Arc::new_cyclic(|weak: &Weak<Session>| {
            let weak = weak.clone();
            let on_lost = Arc::new(move |origin: u64| {
                if let Some(s) = weak.upgrade() {
                    s.push_lost(origin);
                }
            });
            Session {
                id,
                state: Mutex::new(SessionState {
                    buffers: HashMap::new(),
                    graph: TaskGraph::new(),
                    commands: HashMap::new(),
                    highest_seen: 0,
                    result_cache: VecDeque::new(),
                    content_links: HashMap::new(),
                    client: None,
                    reply_seq: 0,
                    peer_addrs: Vec::new(),
                    executed: 0,
                    duplicates: 0,
                }),
                work: Condvar::new(),
                peers: PeerMesh::new(Arc::clone(&shutdown), on_lost, socket_buffer),
                stats,
                shutdown,
            }
        });
        for i in 0..executors.max(1) {
            let s = Arc::clone(&session);
            thread::Builder::new()
                .name(format!("executor-{i}"))
                .spawn(move || s.executor_loop())
                .expect("spawn executor");
        }
        session
    }

    pub(crate) fn wake_all(&self) {
        self.work.notify_all();
    }

    fn send_to_client(&self, st: &mut SessionState, bodies: Vec<Body>) {
        if let Some(link) = &st.client {
            let msgs = bodies
                .into_iter()
                .map(|b| {
                    st.reply_seq += 1;
                    Message::new(st.reply_seq, b)
                })
                .collect();
            let _ = link.tx.send(msgs);
        }
    }

    /// Sends a reply to the client and remembers it for re-emission.
    fn reply(&self, st: &mut SessionState, command_id: u64, bodies: Vec<Body>) {
        if st.result_cache.len() == RESULT_CACHE {
            st.result_cache.pop_front();
        }
        st.result_cache.push_back((command_id, bodies.clone()));
        self.send_to_client(st, bodies);
    }

    fn ack(&self, st: &mut SessionState, command_id: u64, code: u8) {
        self.reply(st, command_id, vec![Body::Ack { acked_command_id: command_id, status: code }]);
    }

    /// Installs a new client connection, re-emitting every cached reply so
    /// that replies lost with the previous connection reach the client.
    pub(crate) fn attach_client(&self, link: ClientLink) {
        let mut st = self.state.lock();
        st.client = Some(link);
        let cached: Vec<Vec<Body>> = st.result_cache.iter().map(|(_, b)| b.clone()).collect();
        for bodies in cached {
            self.send_to_client(&mut st, bodies);
        }
    }

    /// Detaches the current client connection, shuts it down and waits for
    /// its reader to finish dispatching.
    pub(crate) fn detach_client(&self) {
        let old = self.state.lock().client.take();
        if let Some(mut old) = old {
            let _ = old.stream.shutdown(Shutdown::Both);
            if let Some(h) = old.reader.take() {
                if h.thread().id() != thread::current().id() {
                    let _ = h.join();
                }
            }
        }
    }

    pub(crate) fn client_gone(&self, generation: u64) {
        let mut st = self.state.lock();
        if st.client.as_ref().map(|c| c.generation) == Some(generation) {
            st.client = None;
        }
    }

    pub(crate) fn set_reader(&self, generation: u64, handle: JoinHandle<()>) {
        let mut st = self.state.lock();
        match &mut st.client {
            Some(c) if c.generation == generation => c.reader = Some(handle),
            _ => {}
        }
    }

    /// Entry point for frames on the client connection.
    pub(crate) fn dispatch(&self, msg: Message) {
        let mut st = self.state.lock();
        let id = msg.command_id;
        if id <= st.highest_seen {
            st.duplicates += 1;
            self.stats.bump_duplicates();
            let cached = st.result_cache.iter().find(|(c, _)| *c == id).map(|(_, b)| b.clone());
            if let Some(bodies) = cached {
                self.send_to_client(&mut st, bodies);
            }
            return;
        }
        st.highest_seen = id;
        match msg.body {
            Body::Nop => {
                st.graph.signal_complete(id, EventStatus::Complete);
                self.ack(&mut st, id, status::OK);
            }
            Body::Ack { .. } | Body::EventComplete { .. } | Body::ReadResult { .. } | Body::PushBuffer { .. } => {
                log::warn!("session {:?}: client sent {:?}", self.id, msg.body.msg_type());
                self.ack(&mut st, id, status::BAD_REQUEST);
            }
            body => {
                let deps = body.wait_ids().to_vec();
                match st.graph.add_command(id, &deps, EventKind::Local) {
                    Ok(_) => {
                        st.commands.insert(id, body);
                        self.report_failed(&mut st);
                        self.work.notify_all();
                    }
                    Err(e) => {
                        log::warn!("session {:?}: rejected command {id}: {e}", self.id);
                        self.ack(&mut st, id, status::BAD_REQUEST);
                    }
                }
            }
        }
    }

    /// Entry point for frames arriving from another daemon.
    pub(crate) fn dispatch_peer(&self, msg: Message) {
        let mut st = self.state.lock();
        match msg.body {
            Body::PushBuffer { buffer_id, content_len, origin_command_id, payload } => {
                if st.graph.status(origin_command_id).is_some_and(|s| s.is_terminal()) {
                    return;
                }
                if content_len != payload.len() as u64 {
                    log::warn!("push for buffer {buffer_id}: content_len {content_len} != payload {}", payload.len());
                }
                let rec = st.buffers.entry(buffer_id).or_insert_with(|| BufferRecord {
                    buffer_id,
                    data: Vec::new(),
                    valid_here: false,
                });
                if rec.data.len() < payload.len() {
                    rec.data.resize(payload.len(), 0);
                }
                rec.data[..payload.len()].copy_from_slice(&payload);
                rec.valid_here = true;
                self.stats.bump_pushes_received();
                self.finish(&mut st, origin_command_id, status::OK, Vec::new());
            }
            Body::EventComplete { completed_command_id, status } => {
                self.stats.bump_completions_received();
                if st.graph.status(completed_command_id).is_some_and(|s| s.is_terminal()) {
                    return;
                }
                let outcome = EventStatus::from_code(status);
                if !st.graph.signal_complete(completed_command_id, outcome).is_empty() {
                    self.work.notify_all();
                }
                self.report_failed(&mut st);
            }
            other => log::warn!("session {:?}: unexpected peer message {:?}", self.id, other.msg_type()),
        }
    }

    /// Marks `id` terminal, replies to the client and notifies every peer.
    fn finish(&self, st: &mut SessionState, id: u64, code: u8, extra: Vec<Body>) {
        let ready = st.graph.signal_complete(id, EventStatus::from_code(code));
        if !ready.is_empty() {
            self.work.notify_all();
        }
        let mut bodies = extra;
        bodies.push(Body::Ack { acked_command_id: id, status: code });
        self.reply(st, id, bodies);
        for peer in self.peers.broadcast_completion(id, code) {
            st.graph.add_notify_peer(id, peer);
        }
        self.report_failed(st);
    }

    fn report_failed(&self, st: &mut SessionState) {
        loop {
            let failed = st.graph.take_failed();
            if failed.is_empty() {
                return;
            }
            for id in failed {
                st.commands.remove(&id);
                let code = st.graph.status(id).map(|s| s.code()).unwrap_or(status::DEPENDENCY_FAILED);
                self.ack(st, id, code);
                self.peers.broadcast_completion(id, code);
            }
        }
    }

    fn push_lost(&self, origin: u64) {
        let mut st = self.state.lock();
        if st.graph.status(origin).is_some_and(|s| s.is_terminal()) {
            return;
        }
        log::warn!("session {:?}: push for migration {origin} lost", self.id);
        st.commands.remove(&origin);
        self.finish(&mut st, origin, status::PEER_UNREACHABLE, Vec::new());
    }

    fn executor_loop(self: Arc<Self>) {
        loop {
            let (id, body) = {
                let mut st = self.state.lock();
                loop {
                    if self.shutdown.load(Ordering::Acquire) {
                        return;
                    }
                    if let Some(id) = st.graph.pop_ready() {
                        match st.commands.get(&id) {
                            Some(_) => break (id, st.commands.remove(&id).unwrap()),
                            None => continue,
                        }
                    }
                    self.work.wait(&mut st);
                }
            };
            self.execute(id, body);
        }
    }

    fn execute(&self, id: u64, body: Body) {
        // Dialing can block, so it runs without the session lock.
        if let Body::SetPeerSession { peer_index, session_id } = body {
            let addr = self.state.lock().peer_addrs.get(peer_index as usize).cloned();
            let code = match addr {
                None => status::BAD_REQUEST,
                Some(addr) => match self.peers.connect(peer_index, &addr, session_id) {
                    LinkState::Ready => status::OK,
                    _ => status::PEER_UNREACHABLE,
                },
            };
            let mut st = self.state.lock();
            st.executed += 1;
            self.finish(&mut st, id, code, Vec::new());
            return;
        }

        let mut st = self.state.lock();
        st.executed += 1;
        match self.run(&mut st, id, body) {
            Outcome::Done(code, extra) => self.finish(&mut st, id, code, extra),
            Outcome::Pushed => {}
        }
    }

    fn run(&self, st: &mut SessionState, id: u64, body: Body) -> Outcome {
        use Outcome::Done;
        match body {
            Body::CreateBuffer { buffer_id, size } => {
                // A fresh buffer holds zeroes, which is valid content.
                let rec = st.buffers.entry(buffer_id).or_insert_with(|| BufferRecord {
                    buffer_id,
                    data: Vec::new(),
                    valid_here: true,
                });
                // A push may have created the buffer first; keep its bytes.
                if (rec.data.len() as u64) < size {
                    rec.data.resize(size as usize, 0);
                }
                Done(status::OK, vec![])
            }
            Body::FreeBuffer { buffer_id } => {
                if st.buffers.remove(&buffer_id).is_none() {
                    return Done(status::UNKNOWN_BUFFER, vec![]);
                }
                st.content_links.retain(|k, v| *k != buffer_id && *v != buffer_id);
                Done(status::OK, vec![])
            }
            Body::WriteBuffer { buffer_id, offset, payload } => {
                let Some(rec) = st.buffers.get_mut(&buffer_id) else {
                    return Done(status::UNKNOWN_BUFFER, vec![]);
                };
                match offset.checked_add(payload.len() as u64) {
                    Some(end) if end <= rec.capacity() => {
                        rec.data[offset as usize..end as usize].copy_from_slice(&payload);
                        rec.valid_here = true;
                        Done(status::OK, vec![])
                    }
                    _ => Done(status::OUT_OF_RANGE, vec![]),
                }
            }
            Body::ReadBuffer { buffer_id, offset, len } => {
                let Some(rec) = st.buffers.get(&buffer_id) else {
                    return Done(status::UNKNOWN_BUFFER, vec![]);
                };
                match offset.checked_add(len) {
                    Some(end) if end <= rec.capacity() => {
                        let payload = rec.data[offset as usize..end as usize].to_vec();
                        Done(status::OK, vec![Body::ReadResult { buffer_id, payload }])
                    }
                    _ => Done(status::OUT_OF_RANGE, vec![]),
                }
            }
            Body::RunKernel { kernel_name, args, .. } => {
                let spec = match kernels::lookup(&kernel_name) {
                    Ok(s) => s,
                    Err(e) => return Done(e.status_code(), vec![]),
                };
                match kernels::execute(spec, &args, &mut Buffers(&mut st.buffers)) {
                    Ok(()) => {
                        for a in &args {
                            if let ArgDesc::Buffer(b) = a {
                                if let Some(rec) = st.buffers.get_mut(b) {
                                    rec.valid_here = true;
                                }
                            }
                        }
                        self.stats.bump_kernels();
                        Done(status::OK, vec![])
                    }
                    Err(e) => Done(e.status_code(), vec![]),
                }
            }
            Body::MigrateBuffer { buffer_id, dest_server, .. } => self.migrate(st, id, buffer_id, dest_server),
            Body::SetContentSizeBuffer { buffer_id, size_buffer_id } => {
                if !st.buffers.contains_key(&buffer_id) {
                    return Done(status::UNKNOWN_BUFFER, vec![]);
                }
                match st.buffers.get(&size_buffer_id) {
                    None => Done(status::UNKNOWN_BUFFER, vec![]),
                    Some(s) if s.capacity() < 8 => Done(status::SIZE_BUFFER_TOO_SMALL, vec![]),
                    Some(_) => {
                        st.content_links.insert(buffer_id, size_buffer_id);
                        Done(status::OK, vec![])
                    }
                }
            }
            Body::PeerList { addrs } => {
                st.peer_addrs = addrs;
                Done(status::OK, vec![])
            }
            other => {
                log::warn!("session {:?}: cannot execute {:?}", self.id, other.msg_type());
                Done(status::BAD_REQUEST, vec![])
            }
        }
    }

    fn migrate(&self, st: &mut SessionState, id: u64, buffer_id: u64, dest: u32) -> Outcome {
        let send_len = match content_size(st, buffer_id) {
            Err(code) => return Outcome::Done(code, vec![]),
            Ok(n) => n,
        };
        let rec = st.buffers.get_mut(&buffer_id).unwrap();
        let push = Body::PushBuffer {
            buffer_id,
            content_len: send_len,
            origin_command_id: id,
            payload: rec.data[..send_len as usize].to_vec(),
        };
        // Counted before the hand-off: the destination can finish dependent
        // work before this thread returns from the send.
        self.stats.bump_pushes_sent();
        match self.peers.send_push(dest, push) {
            Ok(()) => {
                rec.valid_here = false;
                // Stays Running here until the destination's completion arrives.
                Outcome::Pushed
            }
            Err(e) => {
                self.stats.unbump_pushes_sent();
                log::warn!("session {:?}: migration {id} of buffer {buffer_id}: {e}", self.id);
                Outcome::Done(status::PEER_UNREACHABLE, vec![])
            }
        }
    }

    pub fn peer_states(&self) -> BTreeMap<u32, LinkState> {
        self.peers.states()
    }

    pub fn peer_stats(&self) -> BTreeMap<u32, LinkStats> {
        self.peers.links().into_iter().map(|l| (l.index, l.stats())).collect()
    }

    pub fn push_log(&self, peer: u32) -> Vec<(u64, u64)> {
        self.peers.link(peer).map(|l| l.push_log()).unwrap_or_default()
    }

    pub fn buffer(&self, buffer_id: u64) -> Option<BufferRecord> {
        self.state.lock().buffers.get(&buffer_id).cloned()
    }

    pub fn buffer_ids(&self) -> Vec<u64> {
        self.state.lock().buffers.keys().copied().collect()
    }

    pub fn executed_count(&self) -> u64 {
        self.state.lock().executed
    }

    pub fn duplicate_count(&self) -> u64 {
        self.state.lock().duplicates
    }

    pub fn event_status(&self, command_id: u64) -> Option<EventStatus> {
        self.state.lock().graph.status(command_id)
    }

    pub fn has_client(&self) -> bool {
        self.state.lock().client.is_some()
    }
}

/// Number of bytes a migration of `buffer_id` sends: the linked content size
/// clamped to capacity, or the full capacity when no link exists.
fn content_size(st: &SessionState, buffer_id: u64) -> Result<u64, u8> {
    let rec = st.buffers.get(&buffer_id).ok_or(status::UNKNOWN_BUFFER)?;
    if !rec.valid_here {
        return Err(status::STALE_SOURCE);
    }
    let cap = rec.capacity();
    let Some(size_id) = st.content_links.get(&buffer_id) else {
        return Ok(cap);
    };
    match st.buffers.get(size_id) {
        Some(s) if s.data.len() >= 8 => {
            let v = u64::from_le_bytes(s.data[..8].try_into().unwrap());
            Ok(v.min(cap))
        }
        _ => Ok(cap),
    }
}
