use std::io::Cursor;

use offload_core::protocol::{
    decode_frame, encode_frame, read_frame, ArgDesc, Body, Message, MsgType, ProtocolError, SessionId,
    MAX_CONTROL_BODY,
};
use proptest::collection::vec;
use proptest::prelude::*;

fn arg() -> impl Strategy<Value = ArgDesc> {
    prop_oneof![
        any::<u64>().prop_map(ArgDesc::Buffer),
        any::<u64>().prop_map(ArgDesc::U64),
        any::<u64>().prop_map(|b| ArgDesc::F64(f64::from_bits(b))),
    ]
}

fn payload() -> impl Strategy<Value = Vec<u8>> {
    vec(any::<u8>(), 0..512)
}

fn body() -> impl Strategy<Value = Body> {
    prop_oneof![
        Just(Body::Nop),
        (any::<u64>(), any::<u64>()).prop_map(|(buffer_id, size)| Body::CreateBuffer { buffer_id, size }),
        any::<u64>().prop_map(|buffer_id| Body::FreeBuffer { buffer_id }),
        (any::<u64>(), any::<u64>(), payload())
            .prop_map(|(buffer_id, offset, payload)| Body::WriteBuffer { buffer_id, offset, payload }),
        (any::<u64>(), any::<u64>(), any::<u64>())
            .prop_map(|(buffer_id, offset, len)| Body::ReadBuffer { buffer_id, offset, len }),
        (any::<u64>(), payload()).prop_map(|(buffer_id, payload)| Body::ReadResult { buffer_id, payload }),
        (any::<u64>(), any::<u32>(), vec(any::<u64>(), 0..32))
            .prop_map(|(buffer_id, dest_server, wait_ids)| Body::MigrateBuffer { buffer_id, dest_server, wait_ids }),
        (any::<u64>(), any::<u64>(), payload()).prop_map(|(buffer_id, origin_command_id, payload)| {
            Body::PushBuffer { buffer_id, content_len: payload.len() as u64, origin_command_id, payload }
        }),
        ("[a-z_0-9]{0,40}", vec(arg(), 0..=32), vec(any::<u64>(), 0..32))
            .prop_map(|(kernel_name, args, wait_ids)| Body::RunKernel { kernel_name, args, wait_ids }),
        (any::<u64>(), any::<u64>())
            .prop_map(|(buffer_id, size_buffer_id)| Body::SetContentSizeBuffer { buffer_id, size_buffer_id }),
        (any::<u64>(), any::<u8>())
            .prop_map(|(completed_command_id, status)| Body::EventComplete { completed_command_id, status }),
        (any::<u64>(), any::<u8>()).prop_map(|(acked_command_id, status)| Body::Ack { acked_command_id, status }),
        vec("[0-9.:a-z\\[\\]]{0,40}", 0..8).prop_map(|addrs| Body::PeerList { addrs }),
        (any::<u32>(), any::<[u8; 16]>())
            .prop_map(|(peer_index, s)| Body::SetPeerSession { peer_index, session_id: SessionId(s) }),
    ]
}

fn message() -> impl Strategy<Value = Message> {
    (any::<u64>(), body()).prop_map(|(id, b)| Message::new(id, b))
}

/// Equality that treats F64 arguments by bit pattern.
fn same(a: &Message, b: &Message) -> bool {
    match (&a.body, &b.body) {
        (
            Body::RunKernel { kernel_name: n1, args: a1, wait_ids: w1 },
            Body::RunKernel { kernel_name: n2, args: a2, wait_ids: w2 },
        ) => {
            a.command_id == b.command_id
                && n1 == n2
                && w1 == w2
                && a1.len() == a2.len()
                && a1.iter().zip(a2).all(|(x, y)| match (x, y) {
                    (ArgDesc::F64(x), ArgDesc::F64(y)) => x.to_bits() == y.to_bits(),
                    _ => x == y,
                })
        }
        _ => a == b,
    }
}

/// Sum of the sizes of the values a message carries, computed from the
/// message alone. Strings count their u16 length.
fn populated(m: &Message) -> usize {
    let strs = |v: &[String]| v.iter().map(|s| 2 + s.len()).sum::<usize>();
    8 + match &m.body {
        Body::Nop => 0,
        Body::CreateBuffer { .. } | Body::SetContentSizeBuffer { .. } => 16,
        Body::FreeBuffer { .. } => 8,
        Body::WriteBuffer { payload, .. } => 16 + payload.len(),
        Body::ReadBuffer { .. } => 24,
        Body::ReadResult { payload, .. } => 8 + payload.len(),
        Body::MigrateBuffer { wait_ids, .. } => 12 + 8 * wait_ids.len(),
        Body::PushBuffer { payload, .. } => 24 + payload.len(),
        Body::RunKernel { kernel_name, args, wait_ids } => {
            2 + kernel_name.len() + 9 * args.len() + 8 * wait_ids.len()
        }
        Body::EventComplete { .. } | Body::Ack { .. } => 9,
        Body::PeerList { addrs } => strs(addrs),
        Body::SetPeerSession { .. } => 20,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn round_trip_identity(m in message()) {
        let bytes = encode_frame(&m).unwrap();
        let (back, used) = decode_frame(&bytes).unwrap();
        prop_assert_eq!(used, bytes.len());
        prop_assert!(same(&m, &back), "{:?} != {:?}", m, back);
        let (streamed, n) = read_frame(&mut Cursor::new(&bytes)).unwrap();
        prop_assert_eq!(n, bytes.len());
        prop_assert!(same(&m, &streamed));
    }

    #[test]
    fn no_padding(m in message()) {
        let wire = encode_frame(&m).unwrap().len();
        let fields = populated(&m);
        prop_assert!(wire >= fields && wire - fields <= 16, "{:?}: wire {} fields {}", m.body.msg_type(), wire, fields);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn concatenated_frames_decode_in_order(msgs in vec(message(), 0..20)) {
        let mut stream = Vec::new();
        for m in &msgs {
            stream.extend(encode_frame(m).unwrap());
        }
        let mut cur = Cursor::new(&stream);
        for m in &msgs {
            let (got, _) = read_frame(&mut cur).unwrap();
            prop_assert!(same(m, &got));
        }
        prop_assert!(matches!(read_frame(&mut cur), Err(ProtocolError::Closed)));

        let mut rest = &stream[..];
        let mut n = 0;
        while !rest.is_empty() {
            let (got, used) = decode_frame(rest).unwrap();
            prop_assert!(same(&msgs[n], &got));
            rest = &rest[used..];
            n += 1;
        }
        prop_assert_eq!(n, msgs.len());
    }

    #[test]
    fn truncated_frames_are_detected(m in message(), cut in any::<prop::sample::Index>()) {
        let bytes = encode_frame(&m).unwrap();
        let at = cut.index(bytes.len());
        prop_assert!(matches!(decode_frame(&bytes[..at]), Err(ProtocolError::Truncated)));
        let r = read_frame(&mut Cursor::new(&bytes[..at]));
        if at == 0 {
            prop_assert!(matches!(r, Err(ProtocolError::Closed)));
        } else {
            prop_assert!(matches!(r, Err(ProtocolError::Truncated)));
        }
    }
}

#[test]
fn control_body_cap() {
    let over = |ty: MsgType| {
        let mut f = (MAX_CONTROL_BODY + 1).to_le_bytes().to_vec();
        f.extend(7u64.to_le_bytes());
        f.push(ty as u8);
        f
    };
    for ty in MsgType::ALL {
        let r = read_frame(&mut Cursor::new(over(ty)));
        if ty.carries_payload() {
            assert!(matches!(r, Err(ProtocolError::Truncated)), "{ty:?}: {r:?}");
        } else {
            assert!(matches!(r, Err(ProtocolError::SchemaViolation(_))), "{ty:?}: {r:?}");
        }
    }
    let huge = Message::new(1, Body::PeerList { addrs: vec!["x".repeat(60_000); 300] });
    assert!(matches!(encode_frame(&huge), Err(ProtocolError::SchemaViolation(_))));
}

#[test]
fn unknown_type_rejected() {
    let mut f = 9u32.to_le_bytes().to_vec();
    f.extend(1u64.to_le_bytes());
    f.push(0x0E);
    assert!(matches!(decode_frame(&f), Err(ProtocolError::UnknownType(0x0E))));
}
