//! Program traces and the single-process reference executor.
//!
//! A [`Trace`] is a list of buffer operations with explicit server
//! placement. [`execute_reference`] runs it sequentially against the kernel
//! registry in one address space; [`run_on_context`] submits the same trace
//! to real daemons. For every valid trace both produce identical bytes.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::Serialize;

use crate::client::{ClientError, Context, Event};
use crate::kernels::{self, EDGE_LEFT, EDGE_RIGHT, HALO_BUFFER_LEN};
use crate::protocol::ArgDesc;

/// Kernel argument referring to trace buffers by index.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum TraceArg {
    Buffer(usize),
    U64(u64),
    F64(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum TraceOp {
    Create { size: u64 },
    Write { buffer: usize, offset: u64, data: Vec<u8> },
    /// `wait` holds indices of earlier kernel or migrate ops.
    Kernel { server: u32, name: String, args: Vec<TraceArg>, wait: Vec<usize> },
    Migrate { buffer: usize, server: u32, wait: Vec<usize> },
    Read { buffer: usize, offset: u64, len: u64 },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Trace {
    pub servers: u32,
    pub ops: Vec<TraceOp>,
}

/// Final contents of every buffer, in creation order, and every read result,
/// in op order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TraceOutcome {
    pub buffers: Vec<Vec<u8>>,
    pub reads: Vec<Vec<u8>>,
}

impl Trace {
    pub fn command_count(&self) -> usize {
        self.ops.len()
    }
}

/// Runs `trace` sequentially in process.
///
/// # Panics
/// If a kernel in the trace fails; generated traces only contain valid
/// invocations.
pub fn execute_reference(trace: &Trace) -> TraceOutcome {
    let mut store: HashMap<u64, Vec<u8>> = HashMap::new();
    let mut count = 0usize;
    let mut reads = Vec::new();
    for op in &trace.ops {
        match op {
            TraceOp::Create { size } => {
                store.insert(count as u64, vec![0; *size as usize]);
                count += 1;
            }
            TraceOp::Write { buffer, offset, data } => {
                let b = store.get_mut(&(*buffer as u64)).expect("written buffer exists");
                b[*offset as usize..*offset as usize + data.len()].copy_from_slice(data);
            }
            TraceOp::Kernel { name, args, .. } => {
                let spec = kernels::lookup(name).expect("known kernel");
                let descs: Vec<ArgDesc> = args
                    .iter()
                    .map(|a| match *a {
                        TraceArg::Buffer(i) => ArgDesc::Buffer(i as u64),
                        TraceArg::U64(v) => ArgDesc::U64(v),
                        TraceArg::F64(v) => ArgDesc::F64(v),
                    })
                    .collect();
                kernels::execute(spec, &descs, &mut store).unwrap_or_else(|e| panic!("{name}: {e}"));
            }
            TraceOp::Migrate { .. } => {}
            TraceOp::Read { buffer, offset, len } => {
                let b = &store[&(*buffer as u64)];
                reads.push(b[*offset as usize..(*offset + *len) as usize].to_vec());
            }
        }
    }
    TraceOutcome { buffers: (0..count).map(|i| store.remove(&(i as u64)).unwrap()).collect(), reads }
}

/// Submits `trace` through `ctx`, waits for completion and reads back every
/// buffer.
pub fn run_on_context(ctx: &Context, trace: &Trace) -> Result<TraceOutcome, ClientError> {
    let mut ids: Vec<u64> = Vec::new();
    let mut events: Vec<Event> = Vec::with_capacity(trace.ops.len());
    let mut reads = Vec::new();
    let wait_events = |events: &[Event], wait: &[usize]| -> Vec<Event> { wait.iter().map(|&i| events[i]).collect() };
    for op in &trace.ops {
        let ev = match op {
            TraceOp::Create { size } => {
                ids.push(ctx.create_buffer(*size)?);
                Event::DONE
            }
            TraceOp::Write { buffer, offset, data } => ctx.write_buffer(ids[*buffer], *offset, data)?,
            TraceOp::Kernel { server, name, args, wait } => {
                let descs: Vec<ArgDesc> = args
                    .iter()
                    .map(|a| match *a {
                        TraceArg::Buffer(i) => ArgDesc::Buffer(ids[i]),
                        TraceArg::U64(v) => ArgDesc::U64(v),
                        TraceArg::F64(v) => ArgDesc::F64(v),
                    })
                    .collect();
                ctx.enqueue_kernel(*server, name, &descs, &wait_events(&events, wait))?
            }
            TraceOp::Migrate { buffer, server, wait } => {
                ctx.migrate(ids[*buffer], *server, &wait_events(&events, wait))?
            }
            TraceOp::Read { buffer, offset, len } => {
                reads.push(ctx.read_buffer(ids[*buffer], *offset, *len)?);
                Event::DONE
            }
        };
        events.push(ev);
    }
    ctx.finish()?;
    let mut buffers = Vec::with_capacity(ids.len());
    for id in ids {
        buffers.push(ctx.read_all(id)?);
    }
    Ok(TraceOutcome { buffers, reads })
}

/// Buffer sizes used by generated traces: room for a 4×4 f32 matrix, the
/// largest operand the generator emits.
const SIZES: [u64; 3] = [16, 36, 64];

/// Generates a valid random trace with at most `max_ops` operations over
/// `servers` daemons.
pub fn random_trace<R: Rng>(rng: &mut R, servers: u32, max_ops: usize) -> Trace {
    let servers = servers.max(1);
    let max_ops = max_ops.max(8);
    let mut ops = Vec::new();
    let nbuf = rng.gen_range(4..=8);
    let mut sizes = Vec::new();
    for _ in 0..nbuf {
        let size = *SIZES.choose(rng).unwrap();
        sizes.push(size);
        ops.push(TraceOp::Create { size });
    }
    let mut waitable: Vec<usize> = Vec::new();
    let target = rng.gen_range(max_ops / 2..=max_ops);
    while ops.len() < target {
        let idx = ops.len();
        let pick_wait = |rng: &mut R, waitable: &[usize]| -> Vec<usize> {
            let n = rng.gen_range(0..=2.min(waitable.len()));
            waitable.choose_multiple(rng, n).copied().collect()
        };
        let server = rng.gen_range(0..servers);
        match rng.gen_range(0..100) {
            0..=14 => {
                let buffer = rng.gen_range(0..nbuf);
                let len = rng.gen_range(1..=sizes[buffer]);
                let offset = rng.gen_range(0..=sizes[buffer] - len);
                let data = (0..len).map(|_| rng.gen()).collect();
                ops.push(TraceOp::Write { buffer, offset, data });
            }
            15..=24 => {
                let buffer = rng.gen_range(0..nbuf);
                let wait = pick_wait(rng, &waitable);
                ops.push(TraceOp::Migrate { buffer, server, wait });
                waitable.push(idx);
            }
            25..=32 => {
                let buffer = rng.gen_range(0..nbuf);
                let len = rng.gen_range(1..=sizes[buffer]);
                let offset = rng.gen_range(0..=sizes[buffer] - len);
                ops.push(TraceOp::Read { buffer, offset, len });
            }
            _ => {
                let (name, args) = random_kernel(rng, &sizes);
                let wait = pick_wait(rng, &waitable);
                ops.push(TraceOp::Kernel { server, name: name.to_string(), args, wait });
                waitable.push(idx);
            }
        }
    }
    Trace { servers, ops }
}

fn distinct<R: Rng>(rng: &mut R, candidates: &[usize], n: usize) -> Option<Vec<usize>> {
    (candidates.len() >= n).then(|| candidates.choose_multiple(rng, n).copied().collect())
}

fn random_kernel<R: Rng>(rng: &mut R, sizes: &[u64]) -> (&'static str, Vec<TraceArg>) {
    let all: Vec<usize> = (0..sizes.len()).collect();
    let b = TraceArg::Buffer;
    loop {
        match rng.gen_range(0..7) {
            0 => return ("nop", vec![]),
            1 => {
                let v = distinct(rng, &all, 2).unwrap();
                return ("passthrough_i32", vec![b(v[0]), b(v[1])]);
            }
            2 => return ("increment_first_i32", vec![b(*all.choose(rng).unwrap())]),
            3 => return ("fill_u8", vec![b(*all.choose(rng).unwrap()), TraceArg::U64(rng.gen_range(0..256))]),
            4 => {
                let n = rng.gen_range(2..=4u64);
                let fit: Vec<usize> = all.iter().copied().filter(|&i| sizes[i] >= n * n * 4).collect();
                let Some(v) = distinct(rng, &fit, 3) else { continue };
                let row_start = rng.gen_range(0..n);
                let row_count = rng.gen_range(0..=n - row_start);
                let args = vec![
                    b(v[0]),
                    b(v[1]),
                    b(v[2]),
                    TraceArg::U64(n),
                    TraceArg::U64(row_start),
                    TraceArg::U64(row_count),
                ];
                return ("matmul_rows_f32", args);
            }
            5 => {
                let v = distinct(rng, &all, 2).unwrap();
                let len = rng.gen_range(1..=sizes[v[0]].min(sizes[v[1]]) / 4);
                let args = vec![
                    b(v[0]),
                    b(v[1]),
                    TraceArg::U64(len),
                    TraceArg::F64(small_float(rng)),
                    TraceArg::F64(small_float(rng)),
                ];
                return ("stencil_step_f32", args);
            }
            _ => {
                let Some(v) = distinct(rng, &all, 4) else { continue };
                let len = rng.gen_range(1..=sizes[v[0]].min(sizes[v[1]]) / 4);
                let edges = rng.gen_range(0..4u64);
                if (edges & EDGE_LEFT == 0 && sizes[v[2]] < HALO_BUFFER_LEN)
                    || (edges & EDGE_RIGHT == 0 && sizes[v[3]] < HALO_BUFFER_LEN)
                {
                    continue;
                }
                let args = vec![
                    b(v[0]),
                    b(v[1]),
                    b(v[2]),
                    b(v[3]),
                    TraceArg::U64(len),
                    TraceArg::U64(rng.gen_range(0..2)),
                    TraceArg::U64(edges),
                    TraceArg::F64(small_float(rng)),
                    TraceArg::F64(small_float(rng)),
                ];
                return ("stencil_chunk_f32", args);
            }
        }
    }
}

fn small_float<R: Rng>(rng: &mut R) -> f64 {
    f64::from(rng.gen_range(-1000i32..1000)) / 8.0
}

/// Trace of `n` increments on one 4-byte counter, spread round-robin over
/// `servers`. The counter ends at `n`.
pub fn increment_trace(servers: u32, n: usize) -> Trace {
    let mut ops = vec![TraceOp::Create { size: 4 }];
    for i in 0..n {
        ops.push(TraceOp::Kernel {
            server: i as u32 % servers.max(1),
            name: "increment_first_i32".into(),
            args: vec![TraceArg::Buffer(0)],
            wait: vec![],
        });
    }
    Trace { servers, ops }
}
