//! Benchmarks: no-op overhead, migration ping-pong, distributed matmul and
//! stencil halo exchange.
//!
//! Each benchmark checks its computed bytes against an in-process oracle and
//! fails instead of reporting when they differ. Reports serialize as one
//! JSON object per run.

use std::time::{Duration, Instant};

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::Serialize;
use serde_json::{json, Value};
use thiserror::Error;

use crate::client::{ClientError, Context, Event};
use crate::kernels::{stencil_cell, EDGE_LEFT, EDGE_RIGHT, HALO_BUFFER_LEN};
use crate::protocol::ArgDesc;

/// Published no-op overhead on a LAN testbed, in microseconds, kept in
/// reports for comparison.
pub const REFERENCE_NOP_OVERHEAD_US: u64 = 60;
pub const DEFAULT_ITERS: usize = 1000;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("this benchmark needs at least two servers")]
    Requires2Servers,
    #[error("domain length {len} is not divisible by {servers} servers")]
    IndivisibleDomain { len: u64, servers: u32 },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("result check failed: {0}")]
    WrongResult(String),
    #[error(transparent)]
    Client(#[from] ClientError),
}

#[derive(Debug, Clone, Copy, Default, Serialize, PartialEq, Eq)]
pub struct ByteCounts {
    pub client_in: u64,
    pub client_out: u64,
    /// Daemon-to-daemon bytes, when the harness can observe the daemons.
    pub peer_total: Option<u64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub bench: String,
    pub params: Value,
    pub n_iters: usize,
    pub min_ns: u64,
    pub avg_ns: u64,
    pub p99_ns: u64,
    pub bytes: ByteCounts,
    pub ok: bool,
    #[serde(skip)]
    pub samples_ns: Vec<u64>,
    /// Result bytes, for callers that compare runs.
    #[serde(skip)]
    pub output: Vec<u8>,
}

impl BenchReport {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }

    pub fn median_ns(&self) -> u64 {
        percentile(&self.samples_ns, 50.0)
    }
}

/// Nearest-rank percentile.
pub fn percentile(samples: &[u64], pct: f64) -> u64 {
    if samples.is_empty() {
        return 0;
    }
    let mut s = samples.to_vec();
    s.sort_unstable();
    let rank = ((pct / 100.0) * s.len() as f64).ceil() as usize;
    s[rank.clamp(1, s.len()) - 1]
}

/// Bench harness around a context.
pub struct Bench<'a> {
    pub ctx: &'a Context,
    /// Reads the total daemon-to-daemon byte count, when available.
    pub peer_bytes: Option<&'a (dyn Fn() -> u64 + Sync)>,
}

struct Meter<'a> {
    bench: &'a Bench<'a>,
    client: (u64, u64),
    peer: Option<u64>,
}

impl<'a> Meter<'a> {
    fn start(bench: &'a Bench<'a>) -> Self {
        Meter { bench, client: bench.client_bytes(), peer: bench.peer_bytes.map(|f| f()) }
    }

    fn stop(&self) -> ByteCounts {
        let (i, o) = self.bench.client_bytes();
        ByteCounts {
            client_in: i - self.client.0,
            client_out: o - self.client.1,
            peer_total: self.peer.and_then(|p| self.bench.peer_bytes.map(|f| f() - p)),
        }
    }
}

fn nanos(d: Duration) -> u64 {
    d.as_nanos().min(u128::from(u64::MAX)) as u64
}

fn report(bench: &str, params: Value, samples: Vec<u64>, bytes: ByteCounts, output: Vec<u8>) -> BenchReport {
    let n = samples.len();
    let avg = if n == 0 { 0 } else { samples.iter().map(|&s| u128::from(s)).sum::<u128>() / n as u128 } as u64;
    BenchReport {
        bench: bench.to_string(),
        params,
        n_iters: n,
        min_ns: samples.iter().copied().min().unwrap_or(0),
        avg_ns: avg,
        p99_ns: percentile(&samples, 99.0),
        bytes,
        ok: true,
        samples_ns: samples,
        output,
    }
}

/// Even split of `n` rows over `parts`, remainder rows to the lowest indices.
pub fn split_rows(n: u64, parts: u32) -> Vec<(u64, u64)> {
    let parts = u64::from(parts.max(1));
    let (base, rem) = (n / parts, n % parts);
    let mut start = 0;
    (0..parts)
        .map(|i| {
            let count = base + u64::from(i < rem);
            let r = (start, count);
            start += count;
            r
        })
        .collect()
}

pub fn f32_to_bytes(v: &[f32]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

pub fn bytes_to_f32(b: &[u8]) -> Vec<f32> {
    b.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()
}

/// Row-major product with `k` ascending and f32 accumulation.
pub fn reference_matmul(a: &[f32], b: &[f32], n: usize) -> Vec<f32> {
    let mut c = vec![0.0f32; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut acc = 0.0f32;
            for k in 0..n {
                acc += a[i * n + k] * b[k * n + j];
            }
            c[i * n + j] = acc;
        }
    }
    c
}

/// Runs `steps` three-point averaging steps over the whole field with fixed
/// boundary values.
pub fn reference_stencil(field: &[f32], steps: u64, left_bc: f32, right_bc: f32) -> Vec<f32> {
    let mut cur = field.to_vec();
    let mut next = vec![0.0f32; cur.len()];
    let len = cur.len();
    for _ in 0..steps {
        for i in 0..len {
            let l = if i == 0 { left_bc } else { cur[i - 1] };
            let r = if i + 1 == len { right_bc } else { cur[i + 1] };
            next[i] = stencil_cell(l, cur[i], r);
        }
        std::mem::swap(&mut cur, &mut next);
    }
    cur
}

/// Deterministic initial stencil field.
pub fn stencil_field(len: u64) -> Vec<f32> {
    (0..len).map(|i| ((i * 37 + 11) % 101) as f32).collect()
}

pub fn random_matrix(n: usize, seed: u64) -> Vec<f32> {
    let mut rng = StdRng::seed_from_u64(seed);
    (0..n * n).map(|_| rng.gen_range(-1.0f32..1.0)).collect()
}

impl<'a> Bench<'a> {
    pub fn new(ctx: &'a Context) -> Self {
        Bench { ctx, peer_bytes: None }
    }

    fn client_bytes(&self) -> (u64, u64) {
        (0..self.ctx.server_count() as u32).fold((0, 0), |(i, o), s| {
            let c = self.ctx.counters(s);
            (i + c.bytes_in, o + c.bytes_out)
        })
    }

    fn servers(&self) -> Vec<u32> {
        (0..self.ctx.server_count() as u32).filter(|&s| self.ctx.is_available(s)).collect()
    }

    /// Times enqueue-to-completion of the `nop` kernel on every available
    /// server, and the in-protocol echo round trip for comparison.
    pub fn nop(&self, iters: usize) -> Result<BenchReport, BenchError> {
        let servers = self.servers();
        if servers.is_empty() {
            return Err(ClientError::DeviceUnavailable(0).into());
        }
        let meter = Meter::start(self);
        let mut samples = Vec::with_capacity(iters * servers.len());
        let mut echo = Vec::with_capacity(iters * servers.len());
        for _ in 0..iters {
            for &s in &servers {
                echo.push(nanos(self.ctx.echo(s)?));
                let t = Instant::now();
                let e = self.ctx.enqueue_kernel(s, "nop", &[], &[])?;
                self.ctx.wait(e)?;
                samples.push(nanos(t.elapsed()));
            }
        }
        let bytes = meter.stop();
        let nop_median = percentile(&samples, 50.0);
        let echo_median = percentile(&echo, 50.0);
        let params = json!({
            "servers": servers,
            "echo_rtt_median_ns": echo_median,
            "echo_rtt_min_ns": echo.iter().min(),
            "nop_median_ns": nop_median,
            "overhead_median_ns": nop_median as i64 - echo_median as i64,
            "reference_overhead_us": REFERENCE_NOP_OVERHEAD_US,
        });
        Ok(report("nop", params, samples, bytes, Vec::new()))
    }

    /// Ping-pongs a 4-byte counter between servers 0 and 1, incrementing it
    /// on each side so every hop needs a real migration.
    pub fn migration(&self, iters: usize) -> Result<BenchReport, BenchError> {
        let ctx = self.ctx;
        if ctx.server_count() < 2 {
            return Err(BenchError::Requires2Servers);
        }
        let buf = ctx.create_buffer(4)?;
        ctx.write_buffer(buf, 0, &0i32.to_le_bytes())?;
        let warm = ctx.migrate(buf, 0, &[])?;
        ctx.wait(warm)?;
        let meter = Meter::start(self);
        let mut samples = Vec::with_capacity(iters);
        for _ in 0..iters {
            let t = Instant::now();
            let mut last = Event::DONE;
            for s in [1, 0] {
                last = ctx.enqueue_kernel(s, "increment_first_i32", &[ArgDesc::Buffer(buf)], &[])?;
            }
            ctx.wait(last)?;
            samples.push(nanos(t.elapsed()));
        }
        let bytes = meter.stop();
        let out = ctx.read_all(buf)?;
        let expected = (2 * iters) as i32;
        let got = i32::from_le_bytes(out[..4].try_into().unwrap());
        if got != expected {
            return Err(BenchError::WrongResult(format!("counter {got}, expected {expected}")));
        }
        ctx.free_buffer(buf)?;
        let params = json!({ "servers": 2, "migrations": 2 * iters, "final_value": got });
        Ok(report("migrate", params, samples, bytes, out))
    }

    /// Distributed `n`×`n` multiply over every available server. Inputs are
    /// uploaded to each server up front; each iteration times the kernels
    /// plus gathering the partial rows.
    pub fn matmul(&self, n: u64, iters: usize) -> Result<BenchReport, BenchError> {
        let ctx = self.ctx;
        if n == 0 {
            return Err(BenchError::InvalidParameter("n must be positive".into()));
        }
        let servers = self.servers();
        if servers.is_empty() {
            return Err(ClientError::DeviceUnavailable(0).into());
        }
        let nn = (n * n) as usize;
        let a = random_matrix(n as usize, 1);
        let b = random_matrix(n as usize, 2);
        let expected = f32_to_bytes(&reference_matmul(&a, &b, n as usize));
        let (a_bytes, b_bytes) = (f32_to_bytes(&a), f32_to_bytes(&b));
        let bytes_len = nn as u64 * 4;
        let split = split_rows(n, servers.len() as u32);

        let mut per_server = Vec::new();
        let mut uploads = Vec::new();
        for &s in &servers {
            let (ab, bb, cb) = (ctx.create_buffer(bytes_len)?, ctx.create_buffer(bytes_len)?, ctx.create_buffer(bytes_len)?);
            ctx.write_buffer(ab, 0, &a_bytes)?;
            ctx.write_buffer(bb, 0, &b_bytes)?;
            for buf in [ab, bb, cb] {
                uploads.push(ctx.migrate(buf, s, &[])?);
            }
            per_server.push((s, ab, bb, cb));
        }
        ctx.wait_all(&uploads)?;

        let meter = Meter::start(self);
        let mut samples = Vec::with_capacity(iters);
        let mut c = vec![0u8; nn * 4];
        for _ in 0..iters.max(1) {
            let t = Instant::now();
            let mut kernels = Vec::new();
            for (&(s, ab, bb, cb), &(start, count)) in per_server.iter().zip(&split) {
                let args = [
                    ArgDesc::Buffer(ab),
                    ArgDesc::Buffer(bb),
                    ArgDesc::Buffer(cb),
                    ArgDesc::U64(n),
                    ArgDesc::U64(start),
                    ArgDesc::U64(count),
                ];
                kernels.push(ctx.enqueue_kernel(s, "matmul_rows_f32", &args, &[])?);
            }
            for (&(_, _, _, cb), &(start, count)) in per_server.iter().zip(&split) {
                if count == 0 {
                    continue;
                }
                let off = start * n * 4;
                let rows = ctx.read_buffer(cb, off, count * n * 4)?;
                c[off as usize..off as usize + rows.len()].copy_from_slice(&rows);
            }
            ctx.wait_all(&kernels)?;
            samples.push(nanos(t.elapsed()));
            if c != expected {
                return Err(BenchError::WrongResult("matmul differs from the reference product".into()));
            }
        }
        let bytes = meter.stop();
        for (_, ab, bb, cb) in per_server {
            for buf in [ab, bb, cb] {
                ctx.free_buffer(buf)?;
            }
        }
        let params = json!({ "n": n, "servers": servers.len(), "row_split": split });
        Ok(report("matmul", params, samples, bytes, c))
    }

    /// 1-D three-point stencil over `len` cells split into one contiguous
    /// chunk per server. Neighboring chunks share one 16-byte boundary
    /// buffer that migrates to whichever side runs next.
    pub fn stencil(&self, len: u64, steps: u64) -> Result<BenchReport, BenchError> {
        let ctx = self.ctx;
        let servers = self.servers();
        let d = servers.len() as u32;
        if d == 0 {
            return Err(ClientError::DeviceUnavailable(0).into());
        }
        if len == 0 || !len.is_multiple_of(u64::from(d)) {
            return Err(BenchError::IndivisibleDomain { len, servers: d });
        }
        let (left_bc, right_bc) = (0.0f32, 0.0f32);
        let field = stencil_field(len);
        let expected = f32_to_bytes(&reference_stencil(&field, steps, left_bc, right_bc));
        let chunk = len / u64::from(d);
        let cb = chunk * 4;

        // Per chunk: current and next field buffers.
        let mut cur = Vec::new();
        let mut next = Vec::new();
        let mut setup = Vec::new();
        for (i, &s) in servers.iter().enumerate() {
            let (a, b) = (ctx.create_buffer(cb)?, ctx.create_buffer(cb)?);
            let lo = i * chunk as usize;
            ctx.write_buffer(a, 0, &f32_to_bytes(&field[lo..lo + chunk as usize]))?;
            setup.push(ctx.migrate(a, s, &[])?);
            setup.push(ctx.migrate(b, s, &[])?);
            cur.push(a);
            next.push(b);
        }
        // Boundary i sits between chunks i and i+1 and starts on the right
        // side, so every step moves it over and back exactly once.
        let mut halos = Vec::new();
        for i in 0..servers.len().saturating_sub(1) {
            let h = ctx.create_buffer(HALO_BUFFER_LEN)?;
            let edge = (i + 1) * chunk as usize;
            ctx.write_buffer(h, 0, &f32_to_bytes(&[field[edge - 1], field[edge], 0.0, 0.0]))?;
            setup.push(ctx.migrate(h, servers[i + 1], &[])?);
            halos.push(h);
        }
        // Chunks at the domain ends get a local stand-in for the missing halo.
        let mut ends = Vec::new();
        if d > 1 {
            for &s in [servers[0], servers[d as usize - 1]].iter() {
                let e = ctx.create_buffer(HALO_BUFFER_LEN)?;
                setup.push(ctx.migrate(e, s, &[])?);
                ends.push(e);
            }
        }
        ctx.wait_all(&setup)?;

        let meter = Meter::start(self);
        let mut samples = Vec::with_capacity(steps as usize);
        let t_all = Instant::now();
        for step in 0..steps {
            let t = Instant::now();
            let mut last = Vec::new();
            for (i, &s) in servers.iter().enumerate() {
                let args = if d == 1 {
                    vec![
                        ArgDesc::Buffer(cur[i]),
                        ArgDesc::Buffer(next[i]),
                        ArgDesc::U64(chunk),
                        ArgDesc::F64(f64::from(left_bc)),
                        ArgDesc::F64(f64::from(right_bc)),
                    ]
                } else {
                    let mut edges = 0;
                    let left = if i == 0 {
                        edges |= EDGE_LEFT;
                        ends[0]
                    } else {
                        halos[i - 1]
                    };
                    let right = if i + 1 == servers.len() {
                        edges |= EDGE_RIGHT;
                        ends[1]
                    } else {
                        halos[i]
                    };
                    vec![
                        ArgDesc::Buffer(cur[i]),
                        ArgDesc::Buffer(next[i]),
                        ArgDesc::Buffer(left),
                        ArgDesc::Buffer(right),
                        ArgDesc::U64(chunk),
                        ArgDesc::U64(step % 2),
                        ArgDesc::U64(edges),
                        ArgDesc::F64(f64::from(left_bc)),
                        ArgDesc::F64(f64::from(right_bc)),
                    ]
                };
                let name = if d == 1 { "stencil_step_f32" } else { "stencil_chunk_f32" };
                last.push(ctx.enqueue_kernel(s, name, &args, &[])?);
            }
            ctx.wait_all(&last)?;
            samples.push(nanos(t.elapsed()));
            std::mem::swap(&mut cur, &mut next);
        }
        let elapsed = t_all.elapsed();
        let bytes = meter.stop();

        let mut out = Vec::with_capacity(len as usize * 4);
        for &c in &cur {
            out.extend(ctx.read_all(c)?);
        }
        if out != expected {
            return Err(BenchError::WrongResult("stencil field differs from the single-domain run".into()));
        }
        for buf in cur.into_iter().chain(next).chain(halos).chain(ends) {
            ctx.free_buffer(buf)?;
        }
        let secs = elapsed.as_secs_f64();
        let params = json!({
            "len": len,
            "steps": steps,
            "servers": d,
            "steps_per_sec": if secs > 0.0 { steps as f64 / secs } else { 0.0 },
            "cell_updates_per_sec": if secs > 0.0 { (steps * len) as f64 / secs } else { 0.0 },
        });
        Ok(report("stencil", params, samples, bytes, out))
    }
}
