//! Random wire messages covering every message type.

use offload_core::protocol::{ArgDesc, Body, Message, MsgType, SessionId};
use rand::Rng;

fn bytes<R: Rng>(rng: &mut R, max: usize) -> Vec<u8> {
    let n = rng.gen_range(0..=max);
    (0..n).map(|_| rng.gen()).collect()
}

fn ids<R: Rng>(rng: &mut R, max: usize) -> Vec<u64> {
    let n = rng.gen_range(0..=max);
    (0..n).map(|_| rng.gen()).collect()
}

fn text<R: Rng>(rng: &mut R, max: usize) -> String {
    let n = rng.gen_range(0..=max);
    (0..n).map(|_| char::from(rng.gen_range(b'!'..=b'~'))).collect()
}

fn arg<R: Rng>(rng: &mut R) -> ArgDesc {
    match rng.gen_range(0..3) {
        0 => ArgDesc::Buffer(rng.gen()),
        1 => ArgDesc::U64(rng.gen()),
        // Any bit pattern, NaNs included, must survive.
        _ => ArgDesc::F64(f64::from_bits(rng.gen())),
    }
}

pub fn body_of<R: Rng>(rng: &mut R, ty: MsgType) -> Body {
    match ty {
        MsgType::Nop => Body::Nop,
        MsgType::CreateBuffer => Body::CreateBuffer { buffer_id: rng.gen(), size: rng.gen() },
        MsgType::FreeBuffer => Body::FreeBuffer { buffer_id: rng.gen() },
        MsgType::WriteBuffer => Body::WriteBuffer { buffer_id: rng.gen(), offset: rng.gen(), payload: bytes(rng, 300) },
        MsgType::ReadBuffer => Body::ReadBuffer { buffer_id: rng.gen(), offset: rng.gen(), len: rng.gen() },
        MsgType::ReadResult => Body::ReadResult { buffer_id: rng.gen(), payload: bytes(rng, 300) },
        MsgType::MigrateBuffer => {
            Body::MigrateBuffer { buffer_id: rng.gen(), dest_server: rng.gen(), wait_ids: ids(rng, 20) }
        }
        MsgType::PushBuffer => {
            let payload = bytes(rng, 300);
            Body::PushBuffer {
                buffer_id: rng.gen(),
                content_len: payload.len() as u64,
                origin_command_id: rng.gen(),
                payload,
            }
        }
        MsgType::RunKernel => {
            let n = rng.gen_range(0..=12);
            Body::RunKernel {
                kernel_name: text(rng, 40),
                args: (0..n).map(|_| arg(rng)).collect(),
                wait_ids: ids(rng, 20),
            }
        }
        MsgType::SetContentSizeBuffer => Body::SetContentSizeBuffer { buffer_id: rng.gen(), size_buffer_id: rng.gen() },
        MsgType::EventComplete => Body::EventComplete { completed_command_id: rng.gen(), status: rng.gen() },
        MsgType::Ack => Body::Ack { acked_command_id: rng.gen(), status: rng.gen() },
        MsgType::PeerList => {
            let n = rng.gen_range(0..=6);
            Body::PeerList { addrs: (0..n).map(|_| text(rng, 30)).collect() }
        }
        MsgType::SetPeerSession => Body::SetPeerSession { peer_index: rng.gen(), session_id: SessionId(rng.gen()) },
    }
}

pub fn message<R: Rng>(rng: &mut R, ty: MsgType) -> Message {
    Message::new(rng.gen(), body_of(rng, ty))
}
