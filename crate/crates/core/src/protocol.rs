//! Wire format shared by clients, daemons and peer links.
//!
//! Every connection starts with a fixed-size [`Handshake`], after which both
//! sides exchange length-prefixed frames:
//!
//! ```text
//! +----------------+----------------+----------+------------------------+
//! | body_len (u32) | command_id u64 | type u8  | type-specific fields   |
//! +----------------+----------------+----------+------------------------+
//! ```
//!
//! All integers are little-endian. Only the fields of the concrete message
//! type are serialized. Variable-size buffer contents are carried as the
//! final field, preceded by a `u64` payload length, so a frame with a
//! payload is still a single length prefix plus a single body.

use std::io::{self, Read, Write};

use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"EOFD";
pub const PROTOCOL_VERSION: u16 = 1;

/// Request layout: magic(4) + version(2) + role(1) + session(16).
pub const HANDSHAKE_LEN: usize = 23;
/// Reply layout: request layout followed by one status byte.
pub const HANDSHAKE_REPLY_LEN: usize = HANDSHAKE_LEN + 1;

/// Bodies of messages without a payload must not exceed this size.
pub const MAX_CONTROL_BODY: u32 = 1 << 24;

/// `command_id` plus `msg_type`.
pub const BODY_HEADER_LEN: usize = 9;
pub const FRAME_PREFIX_LEN: usize = 4;

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("stream ended in the middle of a frame")]
    Truncated,
    #[error("connection closed")]
    Closed,
    #[error("unknown message type 0x{0:02x}")]
    UnknownType(u8),
    #[error("schema violation: {0}")]
    SchemaViolation(String),
    #[error("bad handshake magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("protocol version mismatch: expected {expected}, got {got}")]
    VersionMismatch { expected: u16, got: u16 },
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

impl ProtocolError {
    /// True when the error means the transport is gone rather than the
    /// peer misbehaving.
    pub fn is_connection_loss(&self) -> bool {
        matches!(self, ProtocolError::Truncated | ProtocolError::Closed | ProtocolError::Io(_))
    }
}

fn violation(msg: impl Into<String>) -> ProtocolError {
    ProtocolError::SchemaViolation(msg.into())
}

/// 16-byte session identifier. All zeroes requests a new session.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct SessionId(pub [u8; 16]);

impl SessionId {
    pub const NEW: SessionId = SessionId([0; 16]);

    /// Random, never all-zeroes.
    pub fn generate() -> SessionId {
        loop {
            let bytes: [u8; 16] = rand::random();
            if bytes != [0; 16] {
                return SessionId(bytes);
            }
        }
    }

    pub fn is_new(&self) -> bool {
        self.0 == [0; 16]
    }
}

impl std::fmt::Debug for SessionId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "SessionId(")?;
        for b in &self.0 {
            write!(f, "{b:02x}")?;
        }
        write!(f, ")")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Role {
    Client = 0,
    Peer = 1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum HandshakeStatus {
    New = 0,
    Resumed = 1,
    UnknownSession = 2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Handshake {
    pub version: u16,
    pub role: Role,
    pub session_id: SessionId,
}

impl Handshake {
    pub fn new(role: Role, session_id: SessionId) -> Self {
        Handshake { version: PROTOCOL_VERSION, role, session_id }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HandshakeReply {
    pub handshake: Handshake,
    pub status: HandshakeStatus,
}

pub fn encode_handshake(h: &Handshake) -> [u8; HANDSHAKE_LEN] {
    let mut out = [0u8; HANDSHAKE_LEN];
    out[0..4].copy_from_slice(&MAGIC);
    out[4..6].copy_from_slice(&h.version.to_le_bytes());
    out[6] = h.role as u8;
    out[7..23].copy_from_slice(&h.session_id.0);
    out
}

pub fn decode_handshake(bytes: &[u8]) -> Result<Handshake, ProtocolError> {
    if bytes.len() < HANDSHAKE_LEN {
        return Err(ProtocolError::Truncated);
    }
    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(ProtocolError::BadMagic(magic));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != PROTOCOL_VERSION {
        return Err(ProtocolError::VersionMismatch { expected: PROTOCOL_VERSION, got: version });
    }
    let role = match bytes[6] {
        0 => Role::Client,
        1 => Role::Peer,
        r => return Err(violation(format!("handshake role {r}"))),
    };
    let mut session = [0u8; 16];
    session.copy_from_slice(&bytes[7..23]);
    Ok(Handshake { version, role, session_id: SessionId(session) })
}

pub fn encode_handshake_reply(r: &HandshakeReply) -> [u8; HANDSHAKE_REPLY_LEN] {
    let mut out = [0u8; HANDSHAKE_REPLY_LEN];
    out[..HANDSHAKE_LEN].copy_from_slice(&encode_handshake(&r.handshake));
    out[HANDSHAKE_LEN] = r.status as u8;
    out
}

pub fn decode_handshake_reply(bytes: &[u8]) -> Result<HandshakeReply, ProtocolError> {
    if bytes.len() < HANDSHAKE_REPLY_LEN {
        return Err(ProtocolError::Truncated);
    }
    let handshake = decode_handshake(&bytes[..HANDSHAKE_LEN])?;
    let status = match bytes[HANDSHAKE_LEN] {
        0 => HandshakeStatus::New,
        1 => HandshakeStatus::Resumed,
        2 => HandshakeStatus::UnknownSession,
        s => return Err(violation(format!("handshake status {s}"))),
    };
    Ok(HandshakeReply { handshake, status })
}

pub fn read_handshake<R: Read>(r: &mut R) -> Result<Handshake, ProtocolError> {
    let mut buf = [0u8; HANDSHAKE_LEN];
    read_exact_or(r, &mut buf, true)?;
    decode_handshake(&buf)
}

pub fn read_handshake_reply<R: Read>(r: &mut R) -> Result<HandshakeReply, ProtocolError> {
    let mut buf = [0u8; HANDSHAKE_REPLY_LEN];
    read_exact_or(r, &mut buf, true)?;
    decode_handshake_reply(&buf)
}

/// Kernel argument as carried by `RunKernel`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ArgDesc {
    Buffer(u64),
    U64(u64),
    F64(f64),
}

impl ArgDesc {
    fn kind(&self) -> u8 {
        match self {
            ArgDesc::Buffer(_) => 0,
            ArgDesc::U64(_) => 1,
            ArgDesc::F64(_) => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Body {
    Nop,
    CreateBuffer { buffer_id: u64, size: u64 },
    FreeBuffer { buffer_id: u64 },
    WriteBuffer { buffer_id: u64, offset: u64, payload: Vec<u8> },
    ReadBuffer { buffer_id: u64, offset: u64, len: u64 },
    ReadResult { buffer_id: u64, payload: Vec<u8> },
    MigrateBuffer { buffer_id: u64, dest_server: u32, wait_ids: Vec<u64> },
    PushBuffer { buffer_id: u64, content_len: u64, origin_command_id: u64, payload: Vec<u8> },
    RunKernel { kernel_name: String, args: Vec<ArgDesc>, wait_ids: Vec<u64> },
    SetContentSizeBuffer { buffer_id: u64, size_buffer_id: u64 },
    EventComplete { completed_command_id: u64, status: u8 },
    Ack { acked_command_id: u64, status: u8 },
    PeerList { addrs: Vec<String> },
    SetPeerSession { peer_index: u32, session_id: SessionId },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum MsgType {
    Nop = 0x00,
    CreateBuffer = 0x01,
    FreeBuffer = 0x02,
    WriteBuffer = 0x03,
    ReadBuffer = 0x04,
    ReadResult = 0x05,
    MigrateBuffer = 0x06,
    PushBuffer = 0x07,
    RunKernel = 0x08,
    SetContentSizeBuffer = 0x09,
    EventComplete = 0x0A,
    Ack = 0x0B,
    PeerList = 0x0C,
    SetPeerSession = 0x0D,
}

impl MsgType {
    pub const ALL: [MsgType; 14] = [
        MsgType::Nop,
        MsgType::CreateBuffer,
        MsgType::FreeBuffer,
        MsgType::WriteBuffer,
        MsgType::ReadBuffer,
        MsgType::ReadResult,
        MsgType::MigrateBuffer,
        MsgType::PushBuffer,
        MsgType::RunKernel,
        MsgType::SetContentSizeBuffer,
        MsgType::EventComplete,
        MsgType::Ack,
        MsgType::PeerList,
        MsgType::SetPeerSession,
    ];

    pub fn from_u8(v: u8) -> Option<MsgType> {
        MsgType::ALL.get(v as usize).copied()
    }

    /// Message types whose final field is a buffer payload; these are exempt
    /// from [`MAX_CONTROL_BODY`].
    pub fn carries_payload(self) -> bool {
        matches!(self, MsgType::WriteBuffer | MsgType::ReadResult | MsgType::PushBuffer)
    }
}

impl Body {
    pub fn msg_type(&self) -> MsgType {
        match self {
            Body::Nop => MsgType::Nop,
            Body::CreateBuffer { .. } => MsgType::CreateBuffer,
            Body::FreeBuffer { .. } => MsgType::FreeBuffer,
            Body::WriteBuffer { .. } => MsgType::WriteBuffer,
            Body::ReadBuffer { .. } => MsgType::ReadBuffer,
            Body::ReadResult { .. } => MsgType::ReadResult,
            Body::MigrateBuffer { .. } => MsgType::MigrateBuffer,
            Body::PushBuffer { .. } => MsgType::PushBuffer,
            Body::RunKernel { .. } => MsgType::RunKernel,
            Body::SetContentSizeBuffer { .. } => MsgType::SetContentSizeBuffer,
            Body::EventComplete { .. } => MsgType::EventComplete,
            Body::Ack { .. } => MsgType::Ack,
            Body::PeerList { .. } => MsgType::PeerList,
            Body::SetPeerSession { .. } => MsgType::SetPeerSession,
        }
    }

    /// Dependencies carried on the wire, if this message type has a wait list.
    pub fn wait_ids(&self) -> &[u64] {
        match self {
            Body::MigrateBuffer { wait_ids, .. } | Body::RunKernel { wait_ids, .. } => wait_ids,
            _ => &[],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub command_id: u64,
    pub body: Body,
}

impl Message {
    pub fn new(command_id: u64, body: Body) -> Self {
        Message { command_id, body }
    }
}

struct BodyWriter {
    buf: Vec<u8>,
}

impl BodyWriter {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_bits().to_le_bytes());
    }
    fn str16(&mut self, s: &str, what: &str) -> Result<(), ProtocolError> {
        let len = u16::try_from(s.len()).map_err(|_| violation(format!("{what} longer than 65535 bytes")))?;
        self.u16(len);
        self.buf.extend_from_slice(s.as_bytes());
        Ok(())
    }
    fn ids16(&mut self, ids: &[u64]) -> Result<(), ProtocolError> {
        let count = u16::try_from(ids.len()).map_err(|_| violation("more than 65535 wait ids"))?;
        self.u16(count);
        for id in ids {
            self.u64(*id);
        }
        Ok(())
    }
    fn payload(&mut self, p: &[u8]) {
        self.u64(p.len() as u64);
        self.buf.extend_from_slice(p);
    }
}

/// Serialized size of the body (everything after the 4-byte length prefix).
pub fn body_len(msg: &Message) -> usize {
    let fields = match &msg.body {
        Body::Nop => 0,
        Body::CreateBuffer { .. } => 16,
        Body::FreeBuffer { .. } => 8,
        Body::WriteBuffer { payload, .. } => 16 + 8 + payload.len(),
        Body::ReadBuffer { .. } => 24,
        Body::ReadResult { payload, .. } => 8 + 8 + payload.len(),
        Body::MigrateBuffer { wait_ids, .. } => 8 + 4 + 2 + 8 * wait_ids.len(),
        Body::PushBuffer { payload, .. } => 24 + 8 + payload.len(),
        Body::RunKernel { kernel_name, args, wait_ids } => {
            2 + kernel_name.len() + 1 + 9 * args.len() + 2 + 8 * wait_ids.len()
        }
        Body::SetContentSizeBuffer { .. } => 16,
        Body::EventComplete { .. } | Body::Ack { .. } => 9,
        Body::PeerList { addrs } => 2 + addrs.iter().map(|a| 2 + a.len()).sum::<usize>(),
        Body::SetPeerSession { .. } => 4 + 16,
    };
    BODY_HEADER_LEN + fields
}

/// Encodes `msg` into `out` as one frame (length prefix plus body).
pub fn encode_frame_into(msg: &Message, out: &mut Vec<u8>) -> Result<(), ProtocolError> {
    let ty = msg.body.msg_type();
    let len = body_len(msg);
    if len > u32::MAX as usize {
        return Err(violation("body exceeds u32 length prefix"));
    }
    if !ty.carries_payload() && len > MAX_CONTROL_BODY as usize {
        return Err(violation(format!("control body of {len} bytes exceeds cap")));
    }
    let start = out.len();
    out.reserve(FRAME_PREFIX_LEN + len);
    let mut w = BodyWriter { buf: std::mem::take(out) };
    w.u32(len as u32);
    w.u64(msg.command_id);
    w.u8(ty as u8);
    match &msg.body {
        Body::Nop => {}
        Body::CreateBuffer { buffer_id, size } => {
            w.u64(*buffer_id);
            w.u64(*size);
        }
        Body::FreeBuffer { buffer_id } => w.u64(*buffer_id),
        Body::WriteBuffer { buffer_id, offset, payload } => {
            w.u64(*buffer_id);
            w.u64(*offset);
            w.payload(payload);
        }
        Body::ReadBuffer { buffer_id, offset, len } => {
            w.u64(*buffer_id);
            w.u64(*offset);
            w.u64(*len);
        }
        Body::ReadResult { buffer_id, payload } => {
            w.u64(*buffer_id);
            w.payload(payload);
        }
        Body::MigrateBuffer { buffer_id, dest_server, wait_ids } => {
            w.u64(*buffer_id);
            w.u32(*dest_server);
            w.ids16(wait_ids)?;
        }
        Body::PushBuffer { buffer_id, content_len, origin_command_id, payload } => {
            w.u64(*buffer_id);
            w.u64(*content_len);
            w.u64(*origin_command_id);
            w.payload(payload);
        }
        Body::RunKernel { kernel_name, args, wait_ids } => {
            w.str16(kernel_name, "kernel name")?;
            let count = u8::try_from(args.len()).map_err(|_| violation("more than 255 kernel args"))?;
            w.u8(count);
            for arg in args {
                w.u8(arg.kind());
                match arg {
                    ArgDesc::Buffer(v) | ArgDesc::U64(v) => w.u64(*v),
                    ArgDesc::F64(v) => w.f64(*v),
                }
            }
            w.ids16(wait_ids)?;
        }
        Body::SetContentSizeBuffer { buffer_id, size_buffer_id } => {
            w.u64(*buffer_id);
            w.u64(*size_buffer_id);
        }
        Body::EventComplete { completed_command_id, status } => {
            w.u64(*completed_command_id);
            w.u8(*status);
        }
        Body::Ack { acked_command_id, status } => {
            w.u64(*acked_command_id);
            w.u8(*status);
        }
        Body::PeerList { addrs } => {
            let count = u16::try_from(addrs.len()).map_err(|_| violation("more than 65535 peers"))?;
            w.u16(count);
            for a in addrs {
                w.str16(a, "peer address")?;
            }
        }
        Body::SetPeerSession { peer_index, session_id } => {
            w.u32(*peer_index);
            w.buf.extend_from_slice(&session_id.0);
        }
    }
    *out = w.buf;
    debug_assert_eq!(out.len() - start, FRAME_PREFIX_LEN + len);
    Ok(())
}

pub fn encode_frame(msg: &Message) -> Result<Vec<u8>, ProtocolError> {
    let mut out = Vec::new();
    encode_frame_into(msg, &mut out)?;
    Ok(out)
}

struct BodyReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> BodyReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ProtocolError> {
        if self.buf.len() - self.pos < n {
            return Err(violation("field runs past end of body"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, ProtocolError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, ProtocolError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, ProtocolError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, ProtocolError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, ProtocolError> {
        Ok(f64::from_bits(self.u64()?))
    }
    fn str16(&mut self) -> Result<String, ProtocolError> {
        let len = self.u16()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| violation("invalid utf-8"))
    }
    fn ids16(&mut self) -> Result<Vec<u64>, ProtocolError> {
        let count = self.u16()? as usize;
        (0..count).map(|_| self.u64()).collect()
    }
    fn payload(&mut self) -> Result<Vec<u8>, ProtocolError> {
        let len = self.u64()?;
        let remaining = (self.buf.len() - self.pos) as u64;
        if len != remaining {
            return Err(violation(format!("payload_len {len} but {remaining} bytes remain")));
        }
        Ok(self.take(len as usize)?.to_vec())
    }
}

/// Decodes a frame body (without the length prefix).
pub fn decode_body(body: &[u8]) -> Result<Message, ProtocolError> {
    if body.len() < BODY_HEADER_LEN {
        return Err(violation(format!("body of {} bytes is shorter than header", body.len())));
    }
    let mut r = BodyReader { buf: body, pos: 0 };
    let command_id = r.u64()?;
    let raw_type = r.u8()?;
    let ty = MsgType::from_u8(raw_type).ok_or(ProtocolError::UnknownType(raw_type))?;
    let decoded = match ty {
        MsgType::Nop => Body::Nop,
        MsgType::CreateBuffer => Body::CreateBuffer { buffer_id: r.u64()?, size: r.u64()? },
        MsgType::FreeBuffer => Body::FreeBuffer { buffer_id: r.u64()? },
        MsgType::WriteBuffer => {
            Body::WriteBuffer { buffer_id: r.u64()?, offset: r.u64()?, payload: r.payload()? }
        }
        MsgType::ReadBuffer => Body::ReadBuffer { buffer_id: r.u64()?, offset: r.u64()?, len: r.u64()? },
        MsgType::ReadResult => Body::ReadResult { buffer_id: r.u64()?, payload: r.payload()? },
        MsgType::MigrateBuffer => {
            Body::MigrateBuffer { buffer_id: r.u64()?, dest_server: r.u32()?, wait_ids: r.ids16()? }
        }
        MsgType::PushBuffer => Body::PushBuffer {
            buffer_id: r.u64()?,
            content_len: r.u64()?,
            origin_command_id: r.u64()?,
            payload: r.payload()?,
        },
        MsgType::RunKernel => {
            let kernel_name = r.str16()?;
            let count = r.u8()?;
            let mut args = Vec::with_capacity(count as usize);
            for _ in 0..count {
                let arg = match r.u8()? {
                    0 => ArgDesc::Buffer(r.u64()?),
                    1 => ArgDesc::U64(r.u64()?),
                    2 => ArgDesc::F64(r.f64()?),
                    k => return Err(violation(format!("unknown arg kind {k}"))),
                };
                args.push(arg);
            }
            Body::RunKernel { kernel_name, args, wait_ids: r.ids16()? }
        }
        MsgType::SetContentSizeBuffer => {
            Body::SetContentSizeBuffer { buffer_id: r.u64()?, size_buffer_id: r.u64()? }
        }
        MsgType::EventComplete => Body::EventComplete { completed_command_id: r.u64()?, status: r.u8()? },
        MsgType::Ack => Body::Ack { acked_command_id: r.u64()?, status: r.u8()? },
        MsgType::PeerList => {
            let count = r.u16()?;
            let addrs = (0..count).map(|_| r.str16()).collect::<Result<_, _>>()?;
            Body::PeerList { addrs }
        }
        MsgType::SetPeerSession => {
            let peer_index = r.u32()?;
            let session_id = SessionId(r.take(16)?.try_into().unwrap());
            Body::SetPeerSession { peer_index, session_id }
        }
    };
    if r.pos != body.len() {
        return Err(violation(format!("{} trailing bytes after {:?}", body.len() - r.pos, ty)));
    }
    Ok(Message { command_id, body: decoded })
}

/// Decodes one frame from the front of `bytes`, returning the message and the
/// number of bytes consumed.
pub fn decode_frame(bytes: &[u8]) -> Result<(Message, usize), ProtocolError> {
    if bytes.len() < FRAME_PREFIX_LEN {
        return Err(ProtocolError::Truncated);
    }
    let len = u32::from_le_bytes(bytes[..4].try_into().unwrap());
    check_prefix(len, bytes.get(4 + 8).copied())?;
    let end = FRAME_PREFIX_LEN + len as usize;
    if bytes.len() < end {
        return Err(ProtocolError::Truncated);
    }
    Ok((decode_body(&bytes[FRAME_PREFIX_LEN..end])?, end))
}

fn check_prefix(len: u32, raw_type: Option<u8>) -> Result<(), ProtocolError> {
    if (len as usize) < BODY_HEADER_LEN {
        return Err(violation(format!("body_len {len} shorter than header")));
    }
    if len > MAX_CONTROL_BODY {
        if let Some(t) = raw_type {
            let ty = MsgType::from_u8(t).ok_or(ProtocolError::UnknownType(t))?;
            if !ty.carries_payload() {
                return Err(violation(format!("control body_len {len} exceeds cap")));
            }
        }
    }
    Ok(())
}

fn read_exact_or<R: Read>(r: &mut R, buf: &mut [u8], at_boundary: bool) -> Result<(), ProtocolError> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => {
                return Err(if filled == 0 && at_boundary {
                    ProtocolError::Closed
                } else {
                    ProtocolError::Truncated
                })
            }
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(())
}

/// Reads exactly one frame from a byte stream. Returns `Closed` when the
/// stream ends cleanly at a frame boundary and `Truncated` when it ends
/// anywhere else. Returns the message and the frame's total wire size.
pub fn read_frame<R: Read>(r: &mut R) -> Result<(Message, usize), ProtocolError> {
    let mut prefix = [0u8; FRAME_PREFIX_LEN];
    read_exact_or(r, &mut prefix, true)?;
    let len = u32::from_le_bytes(prefix);
    check_prefix(len, None)?;
    let mut body = vec![0u8; BODY_HEADER_LEN];
    read_exact_or(r, &mut body, false)?;
    check_prefix(len, Some(body[8]))?;
    body.resize(len as usize, 0);
    read_exact_or(r, &mut body[BODY_HEADER_LEN..], false)?;
    Ok((decode_body(&body)?, FRAME_PREFIX_LEN + len as usize))
}

/// Encodes and writes one frame, returning the number of bytes written.
pub fn write_frame<W: Write>(w: &mut W, msg: &Message) -> Result<usize, ProtocolError> {
    let bytes = encode_frame(msg)?;
    w.write_all(&bytes)?;
    Ok(bytes.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nop_frame_layout() {
        let bytes = encode_frame(&Message::new(1, Body::Nop)).unwrap();
        assert_eq!(bytes, [9, 0, 0, 0, 1, 0, 0, 0, 0, 0, 0, 0, 0]);
        let (msg, used) = decode_frame(&bytes).unwrap();
        assert_eq!(used, 13);
        assert_eq!(msg, Message::new(1, Body::Nop));
    }

    #[test]
    fn write_buffer_payload_len_precedes_payload() {
        let msg = Message::new(
            7,
            Body::WriteBuffer { buffer_id: 3, offset: 0, payload: vec![1, 2, 3, 4, 5] },
        );
        let bytes = encode_frame(&msg).unwrap();
        let tail = &bytes[bytes.len() - 13..];
        assert_eq!(tail, [5, 0, 0, 0, 0, 0, 0, 0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn three_bytes_then_eof_is_truncated() {
        let mut stream: &[u8] = &[9, 0, 0];
        assert!(matches!(read_frame(&mut stream), Err(ProtocolError::Truncated)));
        assert!(matches!(decode_frame(&[9, 0, 0]), Err(ProtocolError::Truncated)));
    }

    #[test]
    fn empty_stream_is_closed() {
        let mut stream: &[u8] = &[];
        assert!(matches!(read_frame(&mut stream), Err(ProtocolError::Closed)));
    }

    #[test]
    fn mid_body_eof_is_truncated() {
        let bytes = encode_frame(&Message::new(5, Body::FreeBuffer { buffer_id: 9 })).unwrap();
        let mut stream = &bytes[..bytes.len() - 1];
        assert!(matches!(read_frame(&mut stream), Err(ProtocolError::Truncated)));
    }

    #[test]
    fn unknown_type() {
        let mut bytes = encode_frame(&Message::new(1, Body::Nop)).unwrap();
        bytes[12] = 0xFF;
        assert!(matches!(decode_frame(&bytes), Err(ProtocolError::UnknownType(0xFF))));
        let mut stream = &bytes[..];
        assert!(matches!(read_frame(&mut stream), Err(ProtocolError::UnknownType(0xFF))));
    }

    #[test]
    fn oversized_control_prefix_rejected_before_reading_body() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&(MAX_CONTROL_BODY + 1).to_le_bytes());
        bytes.extend_from_slice(&1u64.to_le_bytes());
        bytes.push(MsgType::CreateBuffer as u8);
        let mut stream = &bytes[..];
        assert!(matches!(read_frame(&mut stream), Err(ProtocolError::SchemaViolation(_))));
    }

    #[test]
    fn payload_len_mismatch_is_schema_violation() {
        let mut bytes = encode_frame(&Message::new(
            2,
            Body::ReadResult { buffer_id: 1, payload: vec![0; 4] },
        ))
        .unwrap();
        // payload_len field lives right after command_id, type and buffer_id
        bytes[4 + 9 + 8] = 3;
        assert!(matches!(decode_frame(&bytes), Err(ProtocolError::SchemaViolation(_))));
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut bytes = encode_frame(&Message::new(2, Body::FreeBuffer { buffer_id: 1 })).unwrap();
        bytes.push(0);
        bytes[0] += 1;
        assert!(matches!(decode_frame(&bytes), Err(ProtocolError::SchemaViolation(_))));
    }

    #[test]
    fn too_many_wait_ids() {
        let msg = Message::new(
            1,
            Body::MigrateBuffer { buffer_id: 1, dest_server: 0, wait_ids: vec![0; 70_000] },
        );
        assert!(matches!(encode_frame(&msg), Err(ProtocolError::SchemaViolation(_))));
    }

    #[test]
    fn handshake_layouts() {
        let h = Handshake::new(Role::Client, SessionId::NEW);
        let bytes = encode_handshake(&h);
        assert_eq!(bytes.len(), 23);
        assert_eq!(&bytes[..4], b"EOFD");
        assert_eq!(decode_handshake(&bytes).unwrap(), h);

        let reply = HandshakeReply {
            handshake: Handshake::new(Role::Peer, SessionId([7; 16])),
            status: HandshakeStatus::Resumed,
        };
        let bytes = encode_handshake_reply(&reply);
        assert_eq!(bytes.len(), 24);
        assert_eq!(bytes[23], 1);
        assert_eq!(decode_handshake_reply(&bytes).unwrap(), reply);
    }

    #[test]
    fn handshake_errors() {
        let mut bytes = encode_handshake(&Handshake::new(Role::Client, SessionId::NEW));
        bytes[0] = b'X';
        assert!(matches!(decode_handshake(&bytes), Err(ProtocolError::BadMagic(_))));
        let mut bytes = encode_handshake(&Handshake::new(Role::Client, SessionId::NEW));
        bytes[4] = 9;
        assert!(matches!(
            decode_handshake(&bytes),
            Err(ProtocolError::VersionMismatch { expected: 1, got: 9 })
        ));
    }

    #[test]
    fn generated_session_ids_are_non_zero() {
        for _ in 0..1000 {
            assert!(!SessionId::generate().is_new());
        }
    }
}
