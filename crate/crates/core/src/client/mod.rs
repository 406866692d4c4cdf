//! Host-side runtime.
//!
//! A [`Context`] holds one connection per daemon. Buffers follow a
//! single-owner model: each has exactly one latest location, either the host
//! or one daemon. Enqueuing a kernel on a daemon first migrates every buffer
//! argument that lives elsewhere, daemon to daemon, and makes the kernel wait
//! on those migrations. Every command also waits on the previous command that
//! touched the same buffer, so per-buffer order matches submission order
//! across daemons.
//!
//! When a connection drops, calls that touch that daemon fail fast with
//! [`ClientError::DeviceUnavailable`] while a background thread redials,
//! resumes the session and replays the last frames it sent.

mod conn;

use std::collections::{BTreeSet, HashMap};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};
use thiserror::Error;

pub use conn::{Availability, CounterSnapshot};
use conn::ServerConn;

use crate::event_graph::{EventKind, EventStatus, TaskGraph};
use crate::protocol::{ArgDesc, Body, Message, ProtocolError, SessionId};
use crate::status;

pub const DEFAULT_REPLAY_RING: usize = 32;
pub const DEFAULT_RECONNECT_DEADLINE: Duration = Duration::from_secs(30);
pub const SERVERS_ENV: &str = "OFFLOAD_SERVERS";

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("no configured server could be reached")]
    AllServersUnreachable,
    #[error("server {0} is unavailable")]
    DeviceUnavailable(u32),
    #[error("server {0} lost the session")]
    SessionLost(u32),
    #[error("unknown buffer {0}")]
    UnknownBuffer(u64),
    #[error("server index {0} out of range")]
    UnknownServer(u32),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("size buffer {0} holds fewer than 8 bytes")]
    SizeBufferTooSmall(u64),
    #[error("command {command_id} failed: {}", status::describe(*code))]
    Failed { command_id: u64, code: u8 },
    #[error("command {0} lost with its server")]
    DeviceLost(u64),
    #[error("handshake rejected: {0}")]
    Handshake(String),
    #[error("timed out")]
    Timeout,
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServerConfig {
    pub addr: String,
    /// Address other daemons use to reach this one; defaults to `addr`.
    pub peer_addr: Option<String>,
}

impl ServerConfig {
    pub fn new(addr: impl Into<String>) -> Self {
        ServerConfig { addr: addr.into(), peer_addr: None }
    }
}

#[derive(Debug, Clone)]
pub struct ContextConfig {
    pub servers: Vec<ServerConfig>,
    pub reconnect_deadline: Duration,
    pub replay_ring: usize,
    pub connect_timeout: Duration,
}

impl ContextConfig {
    pub fn new<S: Into<String>>(addrs: impl IntoIterator<Item = S>) -> Self {
        ContextConfig {
            servers: addrs.into_iter().map(ServerConfig::new).collect(),
            reconnect_deadline: DEFAULT_RECONNECT_DEADLINE,
            replay_ring: DEFAULT_REPLAY_RING,
            connect_timeout: Duration::from_secs(2),
        }
    }

    /// Reads `OFFLOAD_SERVERS="host:port;host:port"`.
    pub fn from_env() -> Option<Self> {
        let v = std::env::var(SERVERS_ENV).ok()?;
        let addrs: Vec<&str> = v.split(';').map(str::trim).filter(|s| !s.is_empty()).collect();
        (!addrs.is_empty()).then(|| ContextConfig::new(addrs))
    }
}

/// Handle to a submitted command. Id 0 denotes work the client finished
/// locally without a command.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Event(u64);

impl Event {
    pub const DONE: Event = Event(0);

    pub fn id(self) -> u64 {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Location {
    Host,
    Server(u32),
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Origin {
    server: u32,
    migrate_dest: Option<u32>,
    is_read: bool,
}

impl Origin {
    fn on(server: u32) -> Self {
        Origin { server, migrate_dest: None, is_read: false }
    }
}

#[derive(Default)]
struct EventTable {
    graph: TaskGraph,
    origins: HashMap<u64, Origin>,
    /// `ReadResult` awaiting its `Ack`, per server.
    read_stash: HashMap<u32, (u64, Vec<u8>)>,
    read_results: HashMap<u64, Vec<u8>>,
}

pub(crate) struct Inner {
    config: ContextConfig,
    conns: Vec<Arc<ServerConn>>,
    next_command: AtomicU64,
    events: Mutex<EventTable>,
    events_cv: Condvar,
    closed: AtomicBool,
}

impl Inner {
    fn is_closed(&self) -> bool {
        self.closed.load(Ordering::Acquire)
    }

    fn is_terminal(&self, id: u64) -> bool {
        self.events.lock().graph.status(id).is_none_or(|s| s.is_terminal())
    }

    fn register(&self, id: u64, deps: &[u64], origin: Origin) {
        let mut ev = self.events.lock();
        if let Err(e) = ev.graph.add_command(id, deps, EventKind::RemoteProxy) {
            log::error!("event {id}: {e}");
        }
        ev.origins.insert(id, origin);
    }

    fn notify_all(&self) {
        self.events_cv.notify_all();
        for c in &self.conns {
            c.notify();
        }
    }

    fn on_reply(&self, server: u32, msg: Message) {
        let mut ev = self.events.lock();
        match msg.body {
            Body::ReadResult { buffer_id, payload } => {
                ev.read_stash.insert(server, (buffer_id, payload));
            }
            Body::Ack { acked_command_id: id, status: code } => {
                let stashed = ev.read_stash.remove(&server);
                let already = ev.graph.status(id).is_none_or(|s| s.is_terminal());
                if already {
                    return;
                }
                if ev.origins.get(&id).is_some_and(|o| o.is_read) && code == status::OK {
                    match stashed {
                        Some((_, payload)) => {
                            ev.read_results.insert(id, payload);
                        }
                        None => log::warn!("read {id} acked without a result"),
                    }
                }
                ev.graph.signal_complete(id, EventStatus::from_code(code));
                drop(ev);
                self.notify_all();
            }
            other => log::warn!("server {server}: unexpected {:?}", other.msg_type()),
        }
    }

    /// Marks every pending command involving `server` as `outcome`.
    fn fail_server(&self, server: u32, outcome: EventStatus) {
        let mut ev = self.events.lock();
        let doomed: Vec<u64> = ev
            .graph
            .pending()
            .filter(|id| ev.origins.get(id).is_some_and(|o| o.server == server || o.migrate_dest == Some(server)))
            .collect();
        for id in doomed {
            ev.graph.signal_complete(id, outcome);
        }
        drop(ev);
        self.notify_all();
    }

    fn conn(&self, server: u32) -> Result<&Arc<ServerConn>, ClientError> {
        self.conns.get(server as usize).ok_or(ClientError::UnknownServer(server))
    }

    fn check_available(&self, server: u32) -> Result<(), ClientError> {
        match self.conn(server)?.status() {
            Availability::Available => Ok(()),
            Availability::SessionLost => Err(ClientError::SessionLost(server)),
            _ => Err(ClientError::DeviceUnavailable(server)),
        }
    }
}

#[derive(Debug, Clone)]
struct BufferMeta {
    capacity: u64,
    location: Location,
    /// Host copy, authoritative while `location` is `Host`. `None` means all
    /// zeroes.
    host: Option<Vec<u8>>,
    /// Last command that touched the buffer.
    last_access: u64,
    created_on: BTreeSet<u32>,
    content_link: Option<u64>,
    links_sent: BTreeSet<u32>,
}

#[derive(Default)]
struct ApiState {
    buffers: HashMap<u64, BufferMeta>,
    next_buffer: u64,
}

/// Connection to a set of daemons.
#[derive(Clone)]
pub struct Context {
    inner: Arc<Inner>,
    api: Arc<Mutex<ApiState>>,
}

impl Context {
    /// Connects to every configured daemon and forms the peer mesh. Daemons
    /// that cannot be reached are marked unavailable; the call fails only
    /// when none can be reached.
    pub fn connect(config: ContextConfig) -> Result<Context, ClientError> {
        if config.servers.is_empty() {
            return Err(ClientError::InvalidArgument("no servers configured".into()));
        }
        let conns = config
            .servers
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let peer = s.peer_addr.clone().unwrap_or_else(|| s.addr.clone());
                Arc::new(ServerConn::new(i as u32, s.addr.clone(), peer))
            })
            .collect();
        let inner = Arc::new(Inner {
            config,
            conns,
            next_command: AtomicU64::new(0),
            events: Mutex::new(EventTable::default()),
            events_cv: Condvar::new(),
            closed: AtomicBool::new(false),
        });
        let mut up = Vec::new();
        for c in &inner.conns {
            match c.open(&inner) {
                Ok(()) => up.push(c.index),
                Err(e) => log::warn!("server {} ({}) unreachable: {e}", c.index, c.addr),
            }
        }
        if up.is_empty() {
            return Err(ClientError::AllServersUnreachable);
        }
        let ctx = Context { inner, api: Arc::new(Mutex::new(ApiState::default())) };
        if ctx.inner.conns.len() > 1 {
            ctx.form_mesh(&up)?;
        }
        Ok(ctx)
    }

    pub fn from_env() -> Result<Context, ClientError> {
        let config = ContextConfig::from_env()
            .ok_or_else(|| ClientError::InvalidArgument(format!("{SERVERS_ENV} is not set")))?;
        Context::connect(config)
    }

    fn form_mesh(&self, up: &[u32]) -> Result<(), ClientError> {
        let addrs: Vec<String> = self.inner.conns.iter().map(|c| c.peer_addr.clone()).collect();
        let mut lists = Vec::new();
        for &s in up {
            lists.push(self.send(s, Body::PeerList { addrs: addrs.clone() }, &[], Origin::on(s))?);
        }
        for e in lists {
            self.wait(e)?;
        }
        let mut links = Vec::new();
        for &s in up {
            for &p in up.iter().filter(|&&p| p != s) {
                let session_id = self.inner.conns[p as usize].state.lock().session;
                let body = Body::SetPeerSession { peer_index: p, session_id };
                links.push((s, p, self.send(s, body, &[], Origin::on(s))?));
            }
        }
        for (s, p, e) in links {
            if let Err(err) = self.wait(e) {
                log::warn!("server {s} could not link to peer {p}: {err}");
            }
        }
        Ok(())
    }

    fn send(&self, server: u32, body: Body, deps: &[u64], origin: Origin) -> Result<Event, ClientError> {
        let deps: Vec<u64> = deps.iter().copied().filter(|&d| d != 0).collect();
        let conn = self.inner.conn(server)?;
        // Only kernels and migrations carry a wait list on the wire; any
        // other command is held back until its dependencies are done.
        if !matches!(body, Body::RunKernel { .. } | Body::MigrateBuffer { .. }) {
            for &d in &deps {
                let _ = self.wait(Event(d));
            }
            self.inner.check_available(server)?;
        }
        match conn.send(&self.inner, body, &deps, origin) {
            Ok(id) => Ok(Event(id)),
            Err(ClientError::DeviceUnavailable(s)) => Err(self.inner.check_available(s).err().unwrap_or(ClientError::DeviceUnavailable(s))),
            Err(e) => Err(e),
        }
    }

    pub fn server_count(&self) -> usize {
        self.inner.conns.len()
    }

    pub fn availability(&self, server: u32) -> Availability {
        self.inner.conns.get(server as usize).map_or(Availability::Unreachable, |c| c.status())
    }

    pub fn is_available(&self, server: u32) -> bool {
        self.availability(server) == Availability::Available
    }

    pub fn session_id(&self, server: u32) -> Option<SessionId> {
        self.inner.conns.get(server as usize).map(|c| c.state.lock().session)
    }

    /// Byte and frame counters of the client link to `server`.
    pub fn counters(&self, server: u32) -> CounterSnapshot {
        self.inner.conns.get(server as usize).map(|c| c.counters.snapshot()).unwrap_or_default()
    }

    /// Sum of bytes in both directions over every client link.
    pub fn total_client_bytes(&self) -> u64 {
        self.inner.conns.iter().map(|c| {
            let s = c.counters.snapshot();
            s.bytes_in + s.bytes_out
        }).sum()
    }

    // ---- buffers ----

    /// Registers a zero-initialized buffer. Daemons learn about it on first use.
    pub fn create_buffer(&self, size: u64) -> Result<u64, ClientError> {
        if size == 0 {
            return Err(ClientError::InvalidArgument("buffer size must be positive".into()));
        }
        let mut api = self.api.lock();
        api.next_buffer += 1;
        let id = api.next_buffer;
        api.buffers.insert(
            id,
            BufferMeta {
                capacity: size,
                location: Location::Host,
                host: None,
                last_access: 0,
                created_on: BTreeSet::new(),
                content_link: None,
                links_sent: BTreeSet::new(),
            },
        );
        Ok(id)
    }

    pub fn buffer_capacity(&self, buffer: u64) -> Result<u64, ClientError> {
        self.api.lock().buffers.get(&buffer).map(|b| b.capacity).ok_or(ClientError::UnknownBuffer(buffer))
    }

    pub fn location(&self, buffer: u64) -> Result<Location, ClientError> {
        self.api.lock().buffers.get(&buffer).map(|b| b.location).ok_or(ClientError::UnknownBuffer(buffer))
    }

    /// Writes `data` at `offset`. Into the host copy when the buffer lives on
    /// the host, otherwise as a command to its daemon.
    pub fn write_buffer(&self, buffer: u64, offset: u64, data: &[u8]) -> Result<Event, ClientError> {
        let mut api = self.api.lock();
        let meta = api.buffers.get_mut(&buffer).ok_or(ClientError::UnknownBuffer(buffer))?;
        let end = offset
            .checked_add(data.len() as u64)
            .filter(|&e| e <= meta.capacity)
            .ok_or_else(|| ClientError::InvalidArgument(format!("write [{offset}, +{}) past capacity", data.len())))?;
        match meta.location {
            Location::Host => {
                let host = meta.host.get_or_insert_with(|| vec![0; meta.capacity as usize]);
                host[offset as usize..end as usize].copy_from_slice(data);
                Ok(Event::DONE)
            }
            Location::Server(s) => {
                self.inner.check_available(s)?;
                let body = Body::WriteBuffer { buffer_id: buffer, offset, payload: data.to_vec() };
                let e = self.send(s, body, &[meta.last_access], Origin::on(s))?;
                api.buffers.get_mut(&buffer).unwrap().last_access = e.0;
                Ok(e)
            }
        }
    }

    /// Reads `len` bytes at `offset` from the buffer's latest location and
    /// blocks until they arrive.
    pub fn read_buffer(&self, buffer: u64, offset: u64, len: u64) -> Result<Vec<u8>, ClientError> {
        let e = {
            let mut api = self.api.lock();
            let meta = api.buffers.get_mut(&buffer).ok_or(ClientError::UnknownBuffer(buffer))?;
            let end = offset
                .checked_add(len)
                .filter(|&e| e <= meta.capacity)
                .ok_or_else(|| ClientError::InvalidArgument(format!("read [{offset}, +{len}) past capacity")))?;
            match meta.location {
                Location::Host => {
                    return Ok(match &meta.host {
                        Some(h) => h[offset as usize..end as usize].to_vec(),
                        None => vec![0; len as usize],
                    })
                }
                Location::Server(s) => {
                    self.inner.check_available(s)?;
                    let body = Body::ReadBuffer { buffer_id: buffer, offset, len };
                    let origin = Origin { server: s, migrate_dest: None, is_read: true };
                    let e = self.send(s, body, &[meta.last_access], origin)?;
                    meta.last_access = e.0;
                    e
                }
            }
        };
        self.wait(e)?;
        Ok(self.inner.events.lock().read_results.remove(&e.0).unwrap_or_default())
    }

    /// Reads the whole buffer.
    pub fn read_all(&self, buffer: u64) -> Result<Vec<u8>, ClientError> {
        let cap = self.buffer_capacity(buffer)?;
        self.read_buffer(buffer, 0, cap)
    }

    /// Drops the buffer on every daemon that has it.
    pub fn free_buffer(&self, buffer: u64) -> Result<(), ClientError> {
        let mut api = self.api.lock();
        let meta = api.buffers.remove(&buffer).ok_or(ClientError::UnknownBuffer(buffer))?;
        for &s in &meta.created_on {
            if self.is_available(s) {
                self.send(s, Body::FreeBuffer { buffer_id: buffer }, &[meta.last_access], Origin::on(s))?;
            }
        }
        Ok(())
    }

    /// Links `buffer` to a size buffer whose first 8 bytes (little-endian
    /// u64) bound the bytes a migration transfers.
    pub fn set_content_size(&self, buffer: u64, size_buffer: u64) -> Result<(), ClientError> {
        let mut api = self.api.lock();
        let cap = api.buffers.get(&size_buffer).ok_or(ClientError::UnknownBuffer(size_buffer))?.capacity;
        if cap < 8 {
            return Err(ClientError::SizeBufferTooSmall(size_buffer));
        }
        let meta = api.buffers.get_mut(&buffer).ok_or(ClientError::UnknownBuffer(buffer))?;
        meta.content_link = Some(size_buffer);
        meta.links_sent.clear();
        let known: Vec<u32> = meta.created_on.iter().copied().filter(|s| self.is_available(*s)).collect();
        for s in known {
            self.send_link(&mut api, buffer, s)?;
        }
        Ok(())
    }

    // ---- placement ----

    /// Makes sure `server` has a record for `buffer`. Returns the
    /// `CreateBuffer` command when one was sent.
    fn ensure_created(&self, api: &mut ApiState, buffer: u64, server: u32) -> Result<u64, ClientError> {
        let meta = api.buffers.get_mut(&buffer).ok_or(ClientError::UnknownBuffer(buffer))?;
        if meta.created_on.contains(&server) {
            return Ok(0);
        }
        let body = Body::CreateBuffer { buffer_id: buffer, size: meta.capacity };
        let e = self.send(server, body, &[], Origin::on(server))?;
        meta.created_on.insert(server);
        Ok(e.0)
    }

    fn send_link(&self, api: &mut ApiState, buffer: u64, server: u32) -> Result<(), ClientError> {
        let Some(size_buffer) = api.buffers[&buffer].content_link else { return Ok(()) };
        if api.buffers[&buffer].links_sent.contains(&server) {
            return Ok(());
        }
        let c1 = self.ensure_created(api, size_buffer, server)?;
        let c2 = self.ensure_created(api, buffer, server)?;
        let deps = clean(&[api.buffers[&buffer].last_access, api.buffers[&size_buffer].last_access, c1, c2]);
        let body = Body::SetContentSizeBuffer { buffer_id: buffer, size_buffer_id: size_buffer };
        let e = self.send(server, body, &deps, Origin::on(server))?;
        let meta = api.buffers.get_mut(&buffer).unwrap();
        meta.links_sent.insert(server);
        meta.last_access = e.0;
        api.buffers.get_mut(&size_buffer).unwrap().last_access = e.0;
        Ok(())
    }

    /// Moves the latest copy of `buffer` to `dest`. Afterwards the buffer's
    /// `last_access` is the command after which `dest` holds it.
    fn place(&self, api: &mut ApiState, buffer: u64, dest: u32, extra_deps: &[u64]) -> Result<Option<Event>, ClientError> {
        let meta = api.buffers.get(&buffer).ok_or(ClientError::UnknownBuffer(buffer))?;
        match meta.location {
            Location::Server(s) if s == dest => Ok(None),
            Location::Host => {
                let created = self.ensure_created(api, buffer, dest)?;
                let meta = api.buffers.get_mut(&buffer).unwrap();
                meta.last_access = meta.last_access.max(created);
                meta.location = Location::Server(dest);
                let Some(data) = meta.host.take() else { return Ok(None) };
                let mut deps = vec![meta.last_access];
                deps.extend_from_slice(extra_deps);
                let body = Body::WriteBuffer { buffer_id: buffer, offset: 0, payload: data };
                let e = self.send(dest, body, &clean(&deps), Origin::on(dest))?;
                meta.last_access = e.0;
                Ok(Some(e))
            }
            Location::Server(src) => {
                self.inner.check_available(src)?;
                // The size buffer must be readable at the source when the
                // migration runs.
                if let Some(sb) = meta.content_link {
                    self.place(api, sb, src, &[])?;
                    self.send_link(api, buffer, src)?;
                }
                let created = self.ensure_created(api, buffer, dest)?;
                let meta = &api.buffers[&buffer];
                let mut deps = vec![meta.last_access, created];
                if let Some(sb) = meta.content_link {
                    deps.push(api.buffers[&sb].last_access);
                }
                deps.extend_from_slice(extra_deps);
                let deps = clean(&deps);
                let body = Body::MigrateBuffer { buffer_id: buffer, dest_server: dest, wait_ids: deps.clone() };
                let origin = Origin { server: src, migrate_dest: Some(dest), is_read: false };
                let e = self.send(src, body, &deps, origin)?;
                let meta = api.buffers.get_mut(&buffer).unwrap();
                meta.last_access = e.0;
                meta.location = Location::Server(dest);
                if let Some(sb) = meta.content_link {
                    api.buffers.get_mut(&sb).unwrap().last_access = e.0;
                }
                Ok(Some(e))
            }
        }
    }

    /// Explicitly migrates `buffer` to `server`, after `wait_list`.
    pub fn migrate(&self, buffer: u64, server: u32, wait_list: &[Event]) -> Result<Event, ClientError> {
        self.inner.check_available(server)?;
        let mut api = self.api.lock();
        let deps: Vec<u64> = wait_list.iter().map(|e| e.0).collect();
        Ok(self.place(&mut api, buffer, server, &deps)?.unwrap_or(Event::DONE))
    }

    /// Moves `buffer` to `server` through the host: a full read from its
    /// current daemon followed by a full write. Used as the baseline that
    /// the daemon-to-daemon path is measured against.
    pub fn migrate_via_host(&self, buffer: u64, server: u32) -> Result<Event, ClientError> {
        self.inner.check_available(server)?;
        let data = self.read_all(buffer)?;
        let mut api = self.api.lock();
        let created = self.ensure_created(&mut api, buffer, server)?;
        let meta = api.buffers.get_mut(&buffer).unwrap();
        let body = Body::WriteBuffer { buffer_id: buffer, offset: 0, payload: data };
        let e = self.send(server, body, &[meta.last_access, created], Origin::on(server))?;
        meta.last_access = e.0;
        meta.location = Location::Server(server);
        Ok(e)
    }

    /// Runs a built-in kernel on `server`. Buffer arguments living elsewhere
    /// are migrated first; the kernel waits on those migrations, on the last
    /// command touching each buffer, and on `wait_list`.
    pub fn enqueue_kernel(
        &self,
        server: u32,
        kernel_name: &str,
        args: &[ArgDesc],
        wait_list: &[Event],
    ) -> Result<Event, ClientError> {
        self.inner.check_available(server)?;
        let mut api = self.api.lock();
        let buffers: Vec<u64> = args
            .iter()
            .filter_map(|a| match a {
                ArgDesc::Buffer(b) => Some(*b),
                _ => None,
            })
            .collect();
        for b in &buffers {
            match api.buffers.get(b) {
                None => return Err(ClientError::UnknownBuffer(*b)),
                Some(m) => {
                    if let Location::Server(s) = m.location {
                        self.inner.check_available(s)?;
                    }
                }
            }
        }
        let mut deps: Vec<u64> = wait_list.iter().map(|e| e.0).collect();
        for &b in &buffers {
            self.place(&mut api, b, server, &[])?;
            deps.push(api.buffers[&b].last_access);
        }
        let deps = clean(&deps);
        let body = Body::RunKernel { kernel_name: kernel_name.to_string(), args: args.to_vec(), wait_ids: deps.clone() };
        let e = self.send(server, body, &deps, Origin::on(server))?;
        for b in buffers {
            api.buffers.get_mut(&b).unwrap().last_access = e.0;
        }
        Ok(e)
    }

    /// Sends an in-protocol `Nop`, answered by the daemon's reader without
    /// touching the executor, and waits for it.
    pub fn echo(&self, server: u32) -> Result<Duration, ClientError> {
        let t = Instant::now();
        let e = self.send(server, Body::Nop, &[], Origin::on(server))?;
        self.wait(e)?;
        Ok(t.elapsed())
    }

    // ---- events ----

    pub fn status(&self, event: Event) -> EventStatus {
        if event.0 == 0 {
            return EventStatus::Complete;
        }
        self.inner.events.lock().graph.status(event.0).unwrap_or(EventStatus::Complete)
    }

    fn outcome(id: u64, st: EventStatus) -> Result<(), ClientError> {
        match st {
            EventStatus::Complete => Ok(()),
            EventStatus::DeviceLost => Err(ClientError::DeviceLost(id)),
            EventStatus::Failed(code) => Err(ClientError::Failed { command_id: id, code }),
            _ => unreachable!("not terminal"),
        }
    }

    /// Blocks until `event` is terminal.
    pub fn wait(&self, event: Event) -> Result<(), ClientError> {
        self.wait_timeout(event, None)
    }

    pub fn wait_timeout(&self, event: Event, timeout: Option<Duration>) -> Result<(), ClientError> {
        if event.0 == 0 {
            return Ok(());
        }
        let deadline = timeout.map(|t| Instant::now() + t);
        let mut ev = self.inner.events.lock();
        loop {
            let st = ev.graph.status(event.0).unwrap_or(EventStatus::Complete);
            if st.is_terminal() {
                return Self::outcome(event.0, st);
            }
            match deadline {
                Some(d) => {
                    if self.inner.events_cv.wait_until(&mut ev, d).timed_out() {
                        return Err(ClientError::Timeout);
                    }
                }
                None => self.inner.events_cv.wait(&mut ev),
            }
        }
    }

    pub fn wait_all(&self, events: &[Event]) -> Result<(), ClientError> {
        let mut first = Ok(());
        for &e in events {
            let r = self.wait(e);
            if first.is_ok() {
                first = r;
            }
        }
        first
    }

    /// Blocks until every command submitted so far is terminal. Reports the
    /// first failure among them, preferring a lost device.
    pub fn finish(&self) -> Result<(), ClientError> {
        let pending: Vec<u64> = {
            let ev = self.inner.events.lock();
            let mut p: Vec<u64> = ev.graph.pending().collect();
            p.sort_unstable();
            p
        };
        let mut lost = None;
        let mut failed = None;
        for id in pending {
            match self.wait(Event(id)) {
                Ok(()) => {}
                Err(e @ ClientError::DeviceLost(_)) => {
                    lost.get_or_insert(e);
                }
                Err(e) => {
                    failed.get_or_insert(e);
                }
            }
        }
        match lost.or(failed) {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}

impl Drop for Inner {
    fn drop(&mut self) {
        self.closed.store(true, Ordering::Release);
        for c in &self.conns {
            c.close();
        }
    }
}

impl Context {
    /// Closes every connection. Also happens when the last clone drops.
    pub fn close(&self) {
        self.inner.closed.store(true, Ordering::Release);
        for c in &self.inner.conns {
            c.close();
        }
        self.inner.notify_all();
    }
}

fn clean(deps: &[u64]) -> Vec<u64> {
    let mut out: Vec<u64> = deps.iter().copied().filter(|&d| d != 0).collect();
    out.sort_unstable();
    out.dedup();
    out
}
