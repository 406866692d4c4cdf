//! One client connection per daemon: ordered frame emission with a replay
//! ring, a reader thread for replies, and the reconnect manager.

use std::collections::VecDeque;
use std::io::{BufReader, Write};
use std::net::{Shutdown, TcpStream};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Weak};
use std::thread;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};
use serde::Serialize;

use super::{ClientError, Inner, Origin};
use crate::event_graph::EventStatus;
use crate::net;
use crate::protocol::{
    encode_frame, encode_handshake, read_frame, read_handshake_reply, Body, Handshake, HandshakeStatus, Message,
    MsgType, Role, SessionId, HANDSHAKE_LEN, HANDSHAKE_REPLY_LEN,
};

const BACKOFF_START: Duration = Duration::from_millis(10);
const BACKOFF_MAX: Duration = Duration::from_millis(500);
const WINDOW_POLL: Duration = Duration::from_millis(5);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Availability {
    Available,
    /// Connection lost; the reconnect manager is redialing.
    Reconnecting,
    /// The daemon no longer knows our session.
    SessionLost,
    /// Reconnect deadline passed.
    Lost,
    /// Never reached during connect.
    Unreachable,
}

/// Byte and frame counters for one client link.
#[derive(Debug, Default)]
pub struct Counters {
    pub bytes_in: AtomicU64,
    pub bytes_out: AtomicU64,
    pub frames_in: AtomicU64,
    pub frames_out: AtomicU64,
    sent_by_type: [AtomicU64; 14],
}

#[derive(Debug, Clone, Default, Serialize, PartialEq, Eq)]
pub struct CounterSnapshot {
    pub bytes_in: u64,
    pub bytes_out: u64,
    pub frames_in: u64,
    pub frames_out: u64,
    pub sent_by_type: [u64; 14],
}

impl CounterSnapshot {
    pub fn sent(&self, ty: MsgType) -> u64 {
        self.sent_by_type[ty as usize]
    }
}

impl Counters {
    pub fn snapshot(&self) -> CounterSnapshot {
        let mut sent_by_type = [0; 14];
        for (o, c) in sent_by_type.iter_mut().zip(&self.sent_by_type) {
            *o = c.load(Ordering::Relaxed);
        }
        CounterSnapshot {
            bytes_in: self.bytes_in.load(Ordering::Relaxed),
            bytes_out: self.bytes_out.load(Ordering::Relaxed),
            frames_in: self.frames_in.load(Ordering::Relaxed),
            frames_out: self.frames_out.load(Ordering::Relaxed),
            sent_by_type,
        }
    }

    fn count_out(&self, ty: Option<MsgType>, len: usize) {
        self.bytes_out.fetch_add(len as u64, Ordering::Relaxed);
        if let Some(ty) = ty {
            self.frames_out.fetch_add(1, Ordering::Relaxed);
            self.sent_by_type[ty as usize].fetch_add(1, Ordering::Relaxed);
        }
    }
}

pub(crate) struct ConnState {
    pub status: Availability,
    pub session: SessionId,
    stream: Option<TcpStream>,
    /// Last `replay_ring` frames sent, oldest first.
    ring: VecDeque<(u64, Vec<u8>)>,
    generation: u64,
}

pub(crate) struct ServerConn {
    pub index: u32,
    pub addr: String,
    pub peer_addr: String,
    pub(crate) state: Mutex<ConnState>,
    cv: Condvar,
    pub counters: Counters,
}

impl ServerConn {
    pub(crate) fn new(index: u32, addr: String, peer_addr: String) -> Self {
        ServerConn {
            index,
            addr,
            peer_addr,
            state: Mutex::new(ConnState {
                status: Availability::Unreachable,
                session: SessionId::NEW,
                stream: None,
                ring: VecDeque::new(),
                generation: 0,
            }),
            cv: Condvar::new(),
            counters: Counters::default(),
        }
    }

    pub(crate) fn status(&self) -> Availability {
        self.state.lock().status
    }

    pub(crate) fn notify(&self) {
        self.cv.notify_all();
    }

    /// Dials and handshakes with `session` (all zeroes for a new one).
    fn handshake(&self, session: SessionId, timeout: Duration) -> Result<(TcpStream, HandshakeStatus, SessionId), ClientError> {
        let mut stream = net::dial(&self.addr, timeout)?;
        stream.write_all(&encode_handshake(&Handshake::new(Role::Client, session)))?;
        self.counters.count_out(None, HANDSHAKE_LEN);
        stream.set_read_timeout(Some(timeout))?;
        let reply = read_handshake_reply(&mut stream)?;
        stream.set_read_timeout(None)?;
        self.counters.bytes_in.fetch_add(HANDSHAKE_REPLY_LEN as u64, Ordering::Relaxed);
        Ok((stream, reply.status, reply.handshake.session_id))
    }

    /// Initial connection with a fresh session.
    pub(crate) fn open(self: &Arc<Self>, inner: &Arc<Inner>) -> Result<(), ClientError> {
        let (stream, status, session) = self.handshake(SessionId::NEW, inner.config.connect_timeout)?;
        if status != HandshakeStatus::New || session.is_new() {
            return Err(ClientError::Handshake(format!("unexpected status {status:?}")));
        }
        let mut st = self.state.lock();
        st.session = session;
        self.install(&mut st, stream, inner)?;
        Ok(())
    }

    fn install(self: &Arc<Self>, st: &mut ConnState, stream: TcpStream, inner: &Arc<Inner>) -> Result<(), ClientError> {
        let read_half = stream.try_clone()?;
        st.generation += 1;
        st.stream = Some(stream);
        st.status = Availability::Available;
        let generation = st.generation;
        let conn = Arc::clone(self);
        let weak = Arc::downgrade(inner);
        thread::Builder::new()
            .name(format!("client-reader-{}", self.index))
            .spawn(move || reader_loop(conn, weak, read_half, generation))
            .expect("spawn client reader");
        self.cv.notify_all();
        Ok(())
    }

    /// Sends one command. Fails with `DeviceUnavailable` without touching the
    /// wire when the connection is down. The command id is allocated and
    /// registered with the client's event table under the connection lock, so
    /// ids on one connection are strictly increasing.
    pub(crate) fn send(
        self: &Arc<Self>,
        inner: &Arc<Inner>,
        body: Body,
        deps: &[u64],
        origin: Origin,
    ) -> Result<u64, ClientError> {
        let ring_cap = inner.config.replay_ring.max(1);
        let mut st = self.state.lock();
        loop {
            if st.status != Availability::Available {
                return Err(ClientError::DeviceUnavailable(self.index));
            }
            // Never evict a frame whose reply is still outstanding.
            let blocked = st.ring.len() >= ring_cap
                && st.ring.front().is_some_and(|(id, _)| !inner.is_terminal(*id));
            if !blocked {
                break;
            }
            self.cv.wait_for(&mut st, WINDOW_POLL);
        }
        let id = inner.next_command.fetch_add(1, Ordering::SeqCst) + 1;
        let ty = body.msg_type();
        log::trace!("server {} <- #{id} {ty:?} deps {deps:?}", self.index);
        let frame = encode_frame(&Message::new(id, body))?;
        inner.register(id, deps, origin);
        while st.ring.len() >= ring_cap {
            st.ring.pop_front();
        }
        st.ring.push_back((id, frame));
        let ConnState { ring, stream, .. } = &mut *st;
        let frame = &ring.back().unwrap().1;
        let res = match stream.as_mut() {
            Some(s) => s.write_all(frame),
            None => Err(std::io::Error::from(std::io::ErrorKind::NotConnected)),
        };
        match res {
            Ok(()) => self.counters.count_out(Some(ty), frame.len()),
            Err(e) => {
                // The frame stays in the ring and is replayed after reconnect.
                log::info!("server {}: write failed: {e}", self.index);
                let generation = st.generation;
                drop(st);
                self.connection_lost(inner, generation);
            }
        }
        Ok(id)
    }

    /// Starts the reconnect manager unless one is already running for this
    /// connection generation.
    pub(crate) fn connection_lost(self: &Arc<Self>, inner: &Arc<Inner>, generation: u64) {
        let mut st = self.state.lock();
        if st.generation != generation || st.status != Availability::Available {
            return;
        }
        st.status = Availability::Reconnecting;
        if let Some(s) = st.stream.take() {
            let _ = s.shutdown(Shutdown::Both);
        }
        drop(st);
        if inner.is_closed() {
            return;
        }
        log::info!("server {} ({}) unavailable, reconnecting", self.index, self.addr);
        let conn = Arc::clone(self);
        let weak = Arc::downgrade(inner);
        thread::Builder::new()
            .name(format!("reconnect-{}", self.index))
            .spawn(move || reconnect_loop(conn, weak))
            .expect("spawn reconnect");
    }

    pub(crate) fn close(&self) {
        let mut st = self.state.lock();
        if let Some(s) = st.stream.take() {
            let _ = s.shutdown(Shutdown::Both);
        }
        if st.status == Availability::Available || st.status == Availability::Reconnecting {
            st.status = Availability::Lost;
        }
        self.cv.notify_all();
    }
}

fn reader_loop(conn: Arc<ServerConn>, inner: Weak<Inner>, stream: TcpStream, generation: u64) {
    let mut reader = BufReader::with_capacity(64 * 1024, stream);
    loop {
        let res = read_frame(&mut reader);
        let Some(inner) = inner.upgrade() else { return };
        match res {
            Ok((msg, len)) => {
                conn.counters.bytes_in.fetch_add(len as u64, Ordering::Relaxed);
                conn.counters.frames_in.fetch_add(1, Ordering::Relaxed);
                inner.on_reply(conn.index, msg);
            }
            Err(e) => {
                if !inner.is_closed() {
                    log::info!("server {}: reader stopped: {e}", conn.index);
                }
                conn.connection_lost(&inner, generation);
                return;
            }
        }
    }
}

fn reconnect_loop(conn: Arc<ServerConn>, inner: Weak<Inner>) {
    let Some(deadline) = inner.upgrade().map(|i| Instant::now() + i.config.reconnect_deadline) else { return };
    let mut backoff = BACKOFF_START;
    loop {
        let Some(inner) = inner.upgrade() else { return };
        if inner.is_closed() {
            return;
        }
        if Instant::now() >= deadline {
            log::warn!("server {}: reconnect deadline passed", conn.index);
            give_up(&conn, &inner, Availability::Lost);
            return;
        }
        let session = conn.state.lock().session;
        match conn.handshake(session, inner.config.connect_timeout) {
            Ok((stream, HandshakeStatus::Resumed, _)) => {
                let mut st = conn.state.lock();
                if st.status != Availability::Reconnecting {
                    return;
                }
                // Re-send the ring oldest first before anything else.
                let mut s = stream;
                let mut ok = true;
                for (_, frame) in &st.ring {
                    if s.write_all(frame).is_err() {
                        ok = false;
                        break;
                    }
                    let ty = frame.get(12).and_then(|t| MsgType::from_u8(*t));
                    conn.counters.count_out(ty, frame.len());
                }
                if ok {
                    let replayed = st.ring.len();
                    if conn.install(&mut st, s, &inner).is_ok() {
                        log::info!("server {}: session resumed, replayed {replayed} frames", conn.index);
                        drop(st);
                        inner.notify_all();
                        return;
                    }
                }
            }
            Ok((stream, status, _)) => {
                log::warn!("server {}: session gone ({status:?})", conn.index);
                let _ = stream.shutdown(Shutdown::Both);
                give_up(&conn, &inner, Availability::SessionLost);
                return;
            }
            Err(e) => log::debug!("server {}: redial failed: {e}", conn.index),
        }
        drop(inner);
        thread::sleep(backoff);
        backoff = (backoff * 2).min(BACKOFF_MAX);
    }
}

fn give_up(conn: &ServerConn, inner: &Inner, status: Availability) {
    {
        let mut st = conn.state.lock();
        st.status = status;
        st.stream = None;
    }
    conn.notify();
    inner.fail_server(conn.index, EventStatus::DeviceLost);
}
