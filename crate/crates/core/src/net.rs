use std::io;
use std::net::{SocketAddr, TcpStream, ToSocketAddrs};
use std::time::Duration;

pub(crate) fn configure(stream: &TcpStream, socket_buffer: Option<usize>) -> io::Result<()> {
    stream.set_nodelay(true)?;
    if let Some(size) = socket_buffer {
        let sock = socket2::SockRef::from(stream);
        sock.set_send_buffer_size(size)?;
        sock.set_recv_buffer_size(size)?;
    }
    Ok(())
}

pub(crate) fn dial(addr: &str, timeout: Duration) -> io::Result<TcpStream> {
    let mut last = io::Error::new(io::ErrorKind::AddrNotAvailable, format!("{addr} resolved to nothing"));
    let addrs: Vec<SocketAddr> = addr.to_socket_addrs()?.collect();
    for a in addrs {
        match TcpStream::connect_timeout(&a, timeout) {
            Ok(s) => {
                configure(&s, None)?;
                return Ok(s);
            }
            Err(e) => last = e,
        }
    }
    Err(last)
}
