//! Peer mesh behavior observed through daemon instrumentation.

mod common;

use common::Cluster;
use offload_core::client::{Context, ContextConfig, Location};
use offload_core::proxy::{FaultProxy, ProxyConfig};
use offload_core::protocol::{ArgDesc, MsgType};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

fn valid_on(c: &Cluster, buffer: u64) -> Vec<usize> {
    c.daemons
        .iter()
        .enumerate()
        .filter(|(_, d)| d.sessions().iter().any(|s| s.buffer(buffer).is_some_and(|b| b.valid_here)))
        .map(|(i, _)| i)
        .collect()
}

#[test]
fn exactly_one_valid_copy_after_migrations() {
    let c = Cluster::new(3);
    let ctx = &c.ctx;
    let mut rng = StdRng::seed_from_u64(3);
    let bufs: Vec<u64> = (0..5).map(|_| ctx.create_buffer(32).unwrap()).collect();
    for &b in &bufs {
        ctx.write_buffer(b, 0, &[b as u8; 32]).unwrap();
    }
    for _ in 0..200 {
        let b = bufs[rng.gen_range(0..bufs.len())];
        let s = rng.gen_range(0..3);
        if rng.gen_bool(0.3) {
            ctx.enqueue_kernel(s, "increment_first_i32", &[ArgDesc::Buffer(b)], &[]).unwrap();
        } else {
            ctx.migrate(b, s, &[]).unwrap();
        }
    }
    ctx.finish().unwrap();
    for &b in &bufs {
        let Location::Server(s) = ctx.location(b).unwrap() else { panic!("buffer {b} on host") };
        assert_eq!(valid_on(&c, b), vec![s as usize], "buffer {b}");
    }
}

#[test]
fn each_peer_sees_one_completion_per_command() {
    let c = Cluster::new(3);
    let ctx = &c.ctx;
    // sent[from][to]: completions sent over each peer link.
    let sent = || -> Vec<[u64; 3]> {
        (0..3)
            .map(|from| {
                let mut row = [0; 3];
                for (to, l) in c.daemons[from].sessions().pop().unwrap().peer_stats() {
                    row[to as usize] = l.completions_sent;
                }
                row
            })
            .collect()
    };
    let received = || -> Vec<u64> { c.daemons.iter().map(|d| d.stats().completions_received).collect() };
    // Every completion sent to a daemon is eventually received by it.
    let settle = || {
        let ok = common::wait_until(std::time::Duration::from_secs(2), || {
            let (s, r) = (sent(), received());
            (0..3).all(|to| r[to] == (0..3).map(|f| s[f][to]).sum::<u64>())
        });
        assert!(ok, "sent {:?} received {:?}", sent(), received());
    };
    let b = ctx.create_buffer(4).unwrap();
    for _ in 0..25 {
        ctx.enqueue_kernel(0, "increment_first_i32", &[ArgDesc::Buffer(b)], &[]).unwrap();
    }
    ctx.finish().unwrap();
    // Broadcasts trail the replies to the client. The link to peer k opens
    // with the k-th session hand-off, so it misses the k setup commands
    // executed before it.
    let commands = ctx.counters(0).frames_out;
    let reached =
        common::wait_until(std::time::Duration::from_secs(2), || sent()[0][1..] == [commands - 1, commands - 2]);
    assert!(reached, "{commands} commands, sent {:?}", sent());
    settle();
    assert_eq!(sent()[0][0], 0);
}

#[test]
fn client_links_carry_constant_bytes_per_migration() {
    let c = Cluster::new(2);
    let ctx = &c.ctx;
    let mut costs = Vec::new();
    for size in [1u64 << 10, 1 << 16, 1 << 20, 1 << 24] {
        let b = ctx.create_buffer(size).unwrap();
        ctx.write_buffer(b, 0, &vec![1; size as usize]).unwrap();
        ctx.wait(ctx.migrate(b, 0, &[]).unwrap()).unwrap();
        ctx.finish().unwrap();
        let before = ctx.total_client_bytes();
        ctx.wait(ctx.migrate(b, 1, &[]).unwrap()).unwrap();
        costs.push(ctx.total_client_bytes() - before);
        ctx.free_buffer(b).unwrap();
    }
    assert!(costs.iter().all(|&n| n < 512), "{costs:?}");
    assert!(costs.windows(2).all(|w| w[0] == w[1]), "{costs:?}");
}

#[test]
fn migration_payload_follows_content_size() {
    let c = Cluster::new(2);
    let ctx = &c.ctx;
    let data = ctx.create_buffer(4096).unwrap();
    ctx.write_buffer(data, 0, &[7; 4096]).unwrap();
    let size = ctx.create_buffer(8).unwrap();
    ctx.write_buffer(size, 0, &100u64.to_le_bytes()).unwrap();
    ctx.set_content_size(data, size).unwrap();
    ctx.wait(ctx.migrate(data, 1, &[]).unwrap()).unwrap();
    // Hops alternate 1 -> 0 -> 1 ...
    let mut hops = 0;
    let mut hop = |expected: u64| {
        let target = (hops % 2) as u32;
        hops += 1;
        let before = c.push_payloads(1 - target as usize).len();
        ctx.wait(ctx.migrate(data, target, &[]).unwrap()).unwrap();
        let sent = c.push_payloads(1 - target as usize);
        assert!(sent[before..].contains(&expected), "{:?} lacks {expected}", &sent[before..]);
    };
    // Larger than the buffer: clamped to capacity.
    ctx.write_buffer(size, 0, &u64::MAX.to_le_bytes()).unwrap();
    hop(4096);
    // Updated later by a write.
    ctx.write_buffer(size, 0, &100u64.to_le_bytes()).unwrap();
    hop(100);
    // Re-linking replaces the previous link.
    let other = ctx.create_buffer(8).unwrap();
    ctx.write_buffer(other, 0, &12u64.to_le_bytes()).unwrap();
    ctx.set_content_size(data, other).unwrap();
    hop(12);
    assert_eq!(ctx.read_buffer(data, 0, 12).unwrap(), vec![7; 12]);
}

#[test]
fn same_server_kernels_need_no_migrations() {
    let c = Cluster::new(2);
    let ctx = &c.ctx;
    let (a, b) = (ctx.create_buffer(64).unwrap(), ctx.create_buffer(64).unwrap());
    ctx.enqueue_kernel(1, "fill_u8", &[ArgDesc::Buffer(a), ArgDesc::U64(3)], &[]).unwrap();
    ctx.finish().unwrap();
    let before: u64 = (0..2).map(|s| ctx.counters(s).sent(MsgType::MigrateBuffer)).sum();
    for _ in 0..20 {
        ctx.enqueue_kernel(1, "passthrough_i32", &[ArgDesc::Buffer(a), ArgDesc::Buffer(b)], &[]).unwrap();
        ctx.enqueue_kernel(1, "increment_first_i32", &[ArgDesc::Buffer(a)], &[]).unwrap();
    }
    ctx.finish().unwrap();
    let after: u64 = (0..2).map(|s| ctx.counters(s).sent(MsgType::MigrateBuffer)).sum();
    assert_eq!(after, before);
    let want = i32::from_le_bytes([3; 4]) + 19;
    assert_eq!(ctx.read_buffer(b, 0, 4).unwrap(), want.to_le_bytes());
}

#[test]
fn completions_survive_a_dropped_peer_link() {
    common::init_logs();
    let daemons = common::start_daemons(2);
    // Daemon 0 reaches daemon 1 through the proxy; the client does not.
    let proxy = FaultProxy::start(ProxyConfig {
        listen: "127.0.0.1:0".into(),
        upstream: daemons[1].local_addr().to_string(),
        cut_after: vec![],
    })
    .unwrap();
    let mut cfg = ContextConfig::new(common::addrs(&daemons));
    cfg.servers[1].peer_addr = Some(proxy.local_addr().to_string());
    let ctx = Context::connect(cfg).unwrap();
    let link = || daemons[0].sessions()[0].peer_stats()[&1].clone();
    assert_eq!(link().connects, 1);

    let (x, y) = (ctx.create_buffer(4).unwrap(), ctx.create_buffer(4).unwrap());
    ctx.wait(ctx.migrate(x, 0, &[]).unwrap()).unwrap();
    ctx.wait(ctx.migrate(y, 1, &[]).unwrap()).unwrap();
    proxy.cut_now();
    let mut last = Vec::new();
    for _ in 0..10 {
        let a = ctx.enqueue_kernel(0, "increment_first_i32", &[ArgDesc::Buffer(x)], &[]).unwrap();
        last.push(ctx.enqueue_kernel(1, "increment_first_i32", &[ArgDesc::Buffer(y)], &[a]).unwrap());
    }
    ctx.wait_all(&last).unwrap();
    assert!(link().connects >= 2, "link never re-established");
    assert_eq!(ctx.read_buffer(x, 0, 4).unwrap(), 10i32.to_le_bytes());
    assert_eq!(ctx.read_buffer(y, 0, 4).unwrap(), 10i32.to_le_bytes());
    ctx.close();
    for d in &daemons {
        d.shutdown();
    }
}
