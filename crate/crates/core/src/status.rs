//! Status codes carried by `Ack` and `EventComplete`.

pub const OK: u8 = 0;
pub const UNKNOWN_BUFFER: u8 = 1;
pub const UNKNOWN_KERNEL: u8 = 2;
pub const ARG_MISMATCH: u8 = 3;
pub const BUFFER_TOO_SMALL: u8 = 4;
pub const STALE_SOURCE: u8 = 5;
pub const PEER_UNREACHABLE: u8 = 6;
pub const SIZE_BUFFER_TOO_SMALL: u8 = 7;
pub const DEPENDENCY_FAILED: u8 = 8;
pub const OUT_OF_RANGE: u8 = 9;
pub const DEVICE_LOST: u8 = 10;
pub const BAD_REQUEST: u8 = 11;

pub fn describe(code: u8) -> &'static str {
    match code {
        OK => "ok",
        UNKNOWN_BUFFER => "unknown buffer",
        UNKNOWN_KERNEL => "unknown kernel",
        ARG_MISMATCH => "argument mismatch",
        BUFFER_TOO_SMALL => "buffer too small",
        STALE_SOURCE => "stale migration source",
        PEER_UNREACHABLE => "peer unreachable",
        SIZE_BUFFER_TOO_SMALL => "content size buffer too small",
        DEPENDENCY_FAILED => "dependency failed",
        OUT_OF_RANGE => "access out of range",
        DEVICE_LOST => "device lost",
        BAD_REQUEST => "bad request",
        _ => "unknown status",
    }
}
