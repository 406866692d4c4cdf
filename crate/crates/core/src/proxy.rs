//! Fault-injection TCP proxy.
//!
//! Forwards bytes unmodified between clients and one upstream daemon. The
//! cut schedule is a sorted list of offsets into the cumulative
//! client-to-upstream byte stream, counted across connections. When the
//! stream reaches the next offset the proxy forwards exactly up to it and
//! then closes both directions of that connection. Later connections are
//! forwarded normally until the next scheduled offset.

use std::collections::HashMap;
use std::io::{self, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use parking_lot::Mutex;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ProxyError {
    #[error("upstream {addr} unreachable: {source}")]
    UpstreamUnreachable { addr: String, source: io::Error },
    #[error("cannot bind {addr}: {source}")]
    Bind { addr: String, source: io::Error },
}

#[derive(Debug, Clone)]
pub struct ProxyConfig {
    pub listen: String,
    pub upstream: String,
    /// Cumulative client-to-upstream offsets at which to cut.
    pub cut_after: Vec<u64>,
}

#[derive(Default)]
struct Schedule {
    forwarded: u64,
    pending: Vec<u64>,
    cuts: Vec<u64>,
}

impl Schedule {
    /// Bytes that may be forwarded before the next cut.
    fn budget(&self) -> Option<u64> {
        self.pending.first().map(|c| c.saturating_sub(self.forwarded))
    }
}

/// Handles to open connection pairs, so `cut_now` can reach them. A pair
/// leaves the map when it closes: a socket that is only shut down keeps
/// accepting data until its window fills, which stalls the writer.
#[derive(Default)]
struct Conns {
    next: u64,
    open: HashMap<u64, [TcpStream; 2]>,
}

pub struct FaultProxy {
    addr: SocketAddr,
    schedule: Arc<Mutex<Schedule>>,
    shutdown: Arc<AtomicBool>,
    conns: Arc<Mutex<Conns>>,
}

impl FaultProxy {
    /// Binds the listener and checks that the upstream accepts connections.
    pub fn start(config: ProxyConfig) -> Result<FaultProxy, ProxyError> {
        resolve(&config.upstream)
            .and_then(|a| TcpStream::connect_timeout(&a, Duration::from_secs(2)))
            .map_err(|source| ProxyError::UpstreamUnreachable { addr: config.upstream.clone(), source })?;
        let listener = TcpListener::bind(&config.listen)
            .map_err(|source| ProxyError::Bind { addr: config.listen.clone(), source })?;
        let addr = listener.local_addr().map_err(|source| ProxyError::Bind { addr: config.listen.clone(), source })?;
        let mut pending = config.cut_after.clone();
        pending.sort_unstable();
        pending.dedup();
        let proxy = FaultProxy {
            addr,
            schedule: Arc::new(Mutex::new(Schedule { pending, ..Default::default() })),
            shutdown: Arc::new(AtomicBool::new(false)),
            conns: Arc::new(Mutex::new(Conns::default())),
        };
        let schedule = Arc::clone(&proxy.schedule);
        let shutdown = Arc::clone(&proxy.shutdown);
        let conns = Arc::clone(&proxy.conns);
        let upstream = config.upstream;
        thread::Builder::new()
            .name("proxy-accept".into())
            .spawn(move || {
                for stream in listener.incoming() {
                    if shutdown.load(Ordering::Acquire) {
                        return;
                    }
                    let Ok(client) = stream else { continue };
                    let up = match resolve(&upstream).and_then(|a| TcpStream::connect_timeout(&a, Duration::from_secs(2))) {
                        Ok(s) => s,
                        Err(e) => {
                            log::warn!("proxy: upstream {upstream} unreachable: {e}");
                            let _ = client.shutdown(Shutdown::Both);
                            continue;
                        }
                    };
                    let _ = client.set_nodelay(true);
                    let _ = up.set_nodelay(true);
                    spawn_pair(client, up, &schedule, &conns);
                }
            })
            .expect("spawn proxy accept");
        Ok(proxy)
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Offsets at which cuts happened so far.
    pub fn cuts(&self) -> Vec<u64> {
        self.schedule.lock().cuts.clone()
    }

    /// Total client-to-upstream bytes forwarded.
    pub fn forwarded(&self) -> u64 {
        self.schedule.lock().forwarded
    }

    /// Closes every open connection now, outside the schedule.
    pub fn cut_now(&self) {
        for [a, b] in std::mem::take(&mut self.conns.lock().open).into_values() {
            close(&a, &b);
        }
    }

    pub fn shutdown(&self) {
        self.shutdown.store(true, Ordering::Release);
        self.cut_now();
        let _ = TcpStream::connect_timeout(&self.addr, Duration::from_millis(200));
    }
}

impl Drop for FaultProxy {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn resolve(addr: &str) -> io::Result<SocketAddr> {
    use std::net::ToSocketAddrs;
    addr.to_socket_addrs()?
        .next()
        .ok_or_else(|| io::Error::new(io::ErrorKind::AddrNotAvailable, format!("{addr} resolved to nothing")))
}

fn spawn_pair(client: TcpStream, up: TcpStream, schedule: &Arc<Mutex<Schedule>>, conns: &Arc<Mutex<Conns>>) {
    let handles = [client.try_clone(), up.try_clone(), client.try_clone(), up.try_clone(), client.try_clone(), up.try_clone()];
    let [Ok(c1), Ok(u1), Ok(c2), Ok(u2), Ok(c3), Ok(u3)] = handles else { return };
    let id = {
        let mut cs = conns.lock();
        let id = cs.next;
        cs.next += 1;
        cs.open.insert(id, [c3, u3]);
        id
    };
    let sched = Arc::clone(schedule);
    let (conns_a, conns_b) = (Arc::clone(conns), Arc::clone(conns));
    thread::spawn(move || {
        forward_scheduled(client, up, sched, c1, u1);
        conns_a.lock().open.remove(&id);
    });
    thread::spawn(move || {
        forward_plain(u2, c2);
        conns_b.lock().open.remove(&id);
    });
}

fn close(a: &TcpStream, b: &TcpStream) {
    let _ = a.shutdown(Shutdown::Both);
    let _ = b.shutdown(Shutdown::Both);
}

/// Client to upstream, honoring the cut schedule.
fn forward_scheduled(mut from: TcpStream, mut to: TcpStream, schedule: Arc<Mutex<Schedule>>, c: TcpStream, u: TcpStream) {
    let mut buf = vec![0u8; 64 * 1024];
    loop {
        let n = match from.read(&mut buf) {
            Ok(0) | Err(_) => break,
            Ok(n) => n,
        };
        let mut sched = schedule.lock();
        let allowed = sched.budget().map_or(n as u64, |b| b.min(n as u64)) as usize;
        if to.write_all(&buf[..allowed]).is_err() {
            break;
        }
        sched.forwarded += allowed as u64;
        if allowed < n || sched.budget() == Some(0) {
            let at = sched.pending.remove(0);
            sched.cuts.push(at);
            log::info!("proxy: cut at client byte {at}");
            drop(sched);
            let _ = to.flush();
            break;
        }
    }
    close(&c, &u);
}

fn forward_plain(mut from: TcpStream, mut to: TcpStream) {
    let mut buf = vec![0u8; 64 * 1024];
    loop {
        match from.read(&mut buf) {
            Ok(0) | Err(_) => break,
            Ok(n) => {
                if to.write_all(&buf[..n]).is_err() {
                    break;
                }
            }
        }
    }
    close(&from, &to);
}
