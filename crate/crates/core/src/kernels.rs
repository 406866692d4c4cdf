//! Built-in kernel registry.
//!
//! Every kernel is a plain function over byte buffers and scalars. Results are
//! bitwise deterministic: floating-point reductions use a fixed evaluation
//! order so that a computation split across daemons matches the unsplit one.

use std::collections::HashMap;

use thiserror::Error;

use crate::protocol::ArgDesc;
use crate::status;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArgKind {
    Buffer,
    U64,
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Access {
    Read,
    Write,
    ReadWrite,
}

#[derive(Debug, Clone, Copy)]
pub struct ArgSpec {
    pub name: &'static str,
    pub kind: ArgKind,
    pub access: Access,
}

const fn buf(name: &'static str, access: Access) -> ArgSpec {
    ArgSpec { name, kind: ArgKind::Buffer, access }
}

const fn u64_arg(name: &'static str) -> ArgSpec {
    ArgSpec { name, kind: ArgKind::U64, access: Access::Read }
}

const fn f64_arg(name: &'static str) -> ArgSpec {
    ArgSpec { name, kind: ArgKind::F64, access: Access::Read }
}

/// A bound kernel argument.
#[derive(Debug)]
pub enum KernelArg<'a> {
    Read(&'a [u8]),
    Write(&'a mut [u8]),
    U64(u64),
    F64(f64),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum KernelError {
    #[error("kernel {0:?} not found")]
    NotFound(String),
    #[error("argument mismatch: {0}")]
    ArgMismatch(String),
    #[error("buffer argument {arg} too small: need {need} bytes, have {have}")]
    BufferTooSmall { arg: &'static str, need: u64, have: u64 },
    #[error("unknown buffer {0}")]
    UnknownBuffer(u64),
}

impl KernelError {
    pub fn status_code(&self) -> u8 {
        match self {
            KernelError::NotFound(_) => status::UNKNOWN_KERNEL,
            KernelError::ArgMismatch(_) => status::ARG_MISMATCH,
            KernelError::BufferTooSmall { .. } => status::BUFFER_TOO_SMALL,
            KernelError::UnknownBuffer(_) => status::UNKNOWN_BUFFER,
        }
    }
}

type ApplyFn = fn(&mut [KernelArg<'_>]) -> Result<(), KernelError>;

pub struct KernelSpec {
    pub name: &'static str,
    pub args: &'static [ArgSpec],
    apply: ApplyFn,
}

impl std::fmt::Debug for KernelSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("KernelSpec").field("name", &self.name).field("args", &self.args).finish()
    }
}

static REGISTRY: &[KernelSpec] = &[
    KernelSpec { name: "nop", args: &[], apply: nop },
    KernelSpec {
        name: "passthrough_i32",
        args: &[buf("in", Access::Read), buf("out", Access::Write)],
        apply: passthrough_i32,
    },
    KernelSpec {
        name: "increment_first_i32",
        args: &[buf("buf", Access::ReadWrite)],
        apply: increment_first_i32,
    },
    KernelSpec {
        name: "fill_u8",
        args: &[buf("buf", Access::Write), u64_arg("value")],
        apply: fill_u8,
    },
    KernelSpec {
        name: "matmul_rows_f32",
        args: &[
            buf("a", Access::Read),
            buf("b", Access::Read),
            buf("c", Access::Write),
            u64_arg("n"),
            u64_arg("row_start"),
            u64_arg("row_count"),
        ],
        apply: matmul_rows_f32,
    },
    KernelSpec {
        name: "stencil_step_f32",
        args: &[
            buf("in", Access::Read),
            buf("out", Access::Write),
            u64_arg("len"),
            f64_arg("left_halo"),
            f64_arg("right_halo"),
        ],
        apply: stencil_step_f32,
    },
    KernelSpec {
        name: "stencil_chunk_f32",
        args: &[
            buf("in", Access::Read),
            buf("out", Access::Write),
            buf("left", Access::ReadWrite),
            buf("right", Access::ReadWrite),
            u64_arg("len"),
            u64_arg("parity"),
            u64_arg("edges"),
            f64_arg("left_bc"),
            f64_arg("right_bc"),
        ],
        apply: stencil_chunk_f32,
    },
];

pub fn registry() -> &'static [KernelSpec] {
    REGISTRY
}

pub fn lookup(name: &str) -> Result<&'static KernelSpec, KernelError> {
    REGISTRY.iter().find(|k| k.name == name).ok_or_else(|| KernelError::NotFound(name.to_string()))
}

/// Runs `spec` after checking that `args` match its schema.
pub fn run_kernel(spec: &KernelSpec, args: &mut [KernelArg<'_>]) -> Result<(), KernelError> {
    if args.len() != spec.args.len() {
        return Err(KernelError::ArgMismatch(format!(
            "{} takes {} args, got {}",
            spec.name,
            spec.args.len(),
            args.len()
        )));
    }
    for (i, (arg, want)) in args.iter().zip(spec.args).enumerate() {
        let ok = matches!(
            (arg, want.kind, want.access),
            (KernelArg::Read(_), ArgKind::Buffer, Access::Read)
                | (KernelArg::Write(_), ArgKind::Buffer, _)
                | (KernelArg::U64(_), ArgKind::U64, _)
                | (KernelArg::F64(_), ArgKind::F64, _)
        );
        if !ok {
            return Err(KernelError::ArgMismatch(format!("{} arg {i} ({}) has wrong kind", spec.name, want.name)));
        }
    }
    (spec.apply)(args)
}

/// Storage the kernel executor borrows buffers from.
pub trait BufferStore {
    fn take(&mut self, id: u64) -> Option<Vec<u8>>;
    fn put(&mut self, id: u64, data: Vec<u8>);
}

impl BufferStore for HashMap<u64, Vec<u8>> {
    fn take(&mut self, id: u64) -> Option<Vec<u8>> {
        self.remove(&id)
    }
    fn put(&mut self, id: u64, data: Vec<u8>) {
        self.insert(id, data);
    }
}

/// Checks wire arguments against the schema without touching any buffer.
pub fn check_args(spec: &KernelSpec, descs: &[ArgDesc]) -> Result<(), KernelError> {
    if descs.len() != spec.args.len() {
        return Err(KernelError::ArgMismatch(format!(
            "{} takes {} args, got {}",
            spec.name,
            spec.args.len(),
            descs.len()
        )));
    }
    let mut seen = Vec::new();
    for (i, (d, want)) in descs.iter().zip(spec.args).enumerate() {
        let ok = matches!(
            (d, want.kind),
            (ArgDesc::Buffer(_), ArgKind::Buffer) | (ArgDesc::U64(_), ArgKind::U64) | (ArgDesc::F64(_), ArgKind::F64)
        );
        if !ok {
            return Err(KernelError::ArgMismatch(format!("{} arg {i} ({}) has wrong kind", spec.name, want.name)));
        }
        if let ArgDesc::Buffer(id) = d {
            if seen.contains(id) {
                return Err(KernelError::ArgMismatch(format!("buffer {id} passed twice")));
            }
            seen.push(*id);
        }
    }
    Ok(())
}

/// Resolves buffer ids in `descs` against `store`, runs the kernel and
/// returns every buffer to the store, whether or not the kernel succeeded.
pub fn execute<S: BufferStore + ?Sized>(
    spec: &KernelSpec,
    descs: &[ArgDesc],
    store: &mut S,
) -> Result<(), KernelError> {
    check_args(spec, descs)?;
    let mut taken: Vec<(u64, Vec<u8>)> = Vec::new();
    for d in descs {
        if let ArgDesc::Buffer(id) = d {
            match store.take(*id) {
                Some(data) => taken.push((*id, data)),
                None => {
                    for (id, data) in taken {
                        store.put(id, data);
                    }
                    return Err(KernelError::UnknownBuffer(*id));
                }
            }
        }
    }
    let result = {
        let mut bufs = taken.iter_mut();
        let mut args: Vec<KernelArg<'_>> = descs
            .iter()
            .zip(spec.args)
            .map(|(d, want)| match d {
                ArgDesc::Buffer(_) => {
                    let data = &mut bufs.next().unwrap().1;
                    if want.access == Access::Read {
                        KernelArg::Read(data.as_slice())
                    } else {
                        KernelArg::Write(data.as_mut_slice())
                    }
                }
                ArgDesc::U64(v) => KernelArg::U64(*v),
                ArgDesc::F64(v) => KernelArg::F64(*v),
            })
            .collect();
        run_kernel(spec, &mut args)
    };
    for (id, data) in taken {
        store.put(id, data);
    }
    result
}

fn read_buf<'s>(args: &'s [KernelArg<'_>], i: usize) -> &'s [u8] {
    match &args[i] {
        KernelArg::Read(b) => b,
        KernelArg::Write(b) => b,
        _ => unreachable!("schema checked"),
    }
}

fn scalar_u64(args: &[KernelArg<'_>], i: usize) -> u64 {
    match args[i] {
        KernelArg::U64(v) => v,
        _ => unreachable!("schema checked"),
    }
}

fn scalar_f64(args: &[KernelArg<'_>], i: usize) -> f64 {
    match args[i] {
        KernelArg::F64(v) => v,
        _ => unreachable!("schema checked"),
    }
}

fn need(arg: &'static str, have: usize, need: u64) -> Result<(), KernelError> {
    if (have as u64) < need {
        Err(KernelError::BufferTooSmall { arg, need, have: have as u64 })
    } else {
        Ok(())
    }
}

fn f32_at(b: &[u8], i: usize) -> f32 {
    f32::from_le_bytes(b[4 * i..4 * i + 4].try_into().unwrap())
}

fn set_f32(b: &mut [u8], i: usize, v: f32) {
    b[4 * i..4 * i + 4].copy_from_slice(&v.to_le_bytes());
}

/// Splits the argument list so a write buffer can be borrowed mutably while
/// read buffers stay shared.
fn split_write<'s, 'a>(
    args: &'s mut [KernelArg<'a>],
    i: usize,
) -> (&'s [KernelArg<'a>], &'s mut [u8], &'s [KernelArg<'a>]) {
    let (head, rest) = args.split_at_mut(i);
    let (mid, tail) = rest.split_at_mut(1);
    match &mut mid[0] {
        KernelArg::Write(b) => (head, b, tail),
        _ => unreachable!("schema checked"),
    }
}

fn nop(_: &mut [KernelArg<'_>]) -> Result<(), KernelError> {
    Ok(())
}

fn passthrough_i32(args: &mut [KernelArg<'_>]) -> Result<(), KernelError> {
    let (head, out, _) = split_write(args, 1);
    let input = read_buf(head, 0);
    need("in", input.len(), 4)?;
    need("out", out.len(), 4)?;
    out[..4].copy_from_slice(&input[..4]);
    Ok(())
}

fn increment_first_i32(args: &mut [KernelArg<'_>]) -> Result<(), KernelError> {
    let (_, b, _) = split_write(args, 0);
    need("buf", b.len(), 4)?;
    let v = i32::from_le_bytes(b[..4].try_into().unwrap()).wrapping_add(1);
    b[..4].copy_from_slice(&v.to_le_bytes());
    Ok(())
}

fn fill_u8(args: &mut [KernelArg<'_>]) -> Result<(), KernelError> {
    let value = scalar_u64(args, 1) as u8;
    let (_, b, _) = split_write(args, 0);
    b.fill(value);
    Ok(())
}

/// One output element of a row-major product, `k` ascending.
pub fn matmul_element(a: &[u8], b: &[u8], n: usize, r: usize, j: usize) -> f32 {
    let mut acc = 0.0f32;
    for k in 0..n {
        acc += f32_at(a, r * n + k) * f32_at(b, k * n + j);
    }
    acc
}

fn matmul_rows_f32(args: &mut [KernelArg<'_>]) -> Result<(), KernelError> {
    let n = scalar_u64(args, 3);
    let row_start = scalar_u64(args, 4);
    let row_count = scalar_u64(args, 5);
    let bytes = n.checked_mul(n).and_then(|v| v.checked_mul(4)).ok_or_else(|| {
        KernelError::ArgMismatch(format!("matrix dimension {n} overflows"))
    })?;
    match row_start.checked_add(row_count) {
        Some(end) if end <= n => {}
        _ => {
            return Err(KernelError::ArgMismatch(format!(
                "rows [{row_start}, {row_start}+{row_count}) outside 0..{n}"
            )))
        }
    }
    let (head, c, _) = split_write(args, 2);
    let (a, b) = (read_buf(head, 0), read_buf(head, 1));
    need("a", a.len(), bytes)?;
    need("b", b.len(), bytes)?;
    need("c", c.len(), bytes)?;
    let n = n as usize;
    for r in row_start as usize..(row_start + row_count) as usize {
        for j in 0..n {
            set_f32(c, r * n + j, matmul_element(a, b, n, r, j));
        }
    }
    Ok(())
}

/// Three-point average with a fixed evaluation order.
#[inline]
pub fn stencil_cell(left: f32, center: f32, right: f32) -> f32 {
    (left + center + right) / 3.0
}

fn stencil_into(input: &[u8], out: &mut [u8], len: usize, left: f32, right: f32) {
    for i in 0..len {
        let l = if i == 0 { left } else { f32_at(input, i - 1) };
        let r = if i + 1 == len { right } else { f32_at(input, i + 1) };
        set_f32(out, i, stencil_cell(l, f32_at(input, i), r));
    }
}

fn stencil_step_f32(args: &mut [KernelArg<'_>]) -> Result<(), KernelError> {
    let len = scalar_u64(args, 2);
    let left = scalar_f64(args, 3) as f32;
    let right = scalar_f64(args, 4) as f32;
    let (head, out, _) = split_write(args, 1);
    let input = read_buf(head, 0);
    let bytes = len.saturating_mul(4);
    need("in", input.len(), bytes)?;
    need("out", out.len(), bytes)?;
    stencil_into(input, out, len as usize, left, right);
    Ok(())
}

/// Halo slots in a 16-byte boundary buffer shared by the chunks on either
/// side of one boundary: `[a0, b0, a1, b1]`, where `a` is the edge cell of
/// the chunk on the left and `b` the edge cell of the chunk on the right.
/// A step with parity `p` reads slot `p` and writes slot `1 - p`.
pub const HALO_BUFFER_LEN: u64 = 16;
pub const EDGE_LEFT: u64 = 1;
pub const EDGE_RIGHT: u64 = 2;

pub fn halo_slot(side_is_left_chunk: bool, parity: u64) -> usize {
    (parity as usize % 2) * 2 + usize::from(!side_is_left_chunk)
}

fn stencil_chunk_f32(args: &mut [KernelArg<'_>]) -> Result<(), KernelError> {
    let len = scalar_u64(args, 4);
    let parity = scalar_u64(args, 5) % 2;
    let edges = scalar_u64(args, 6);
    let left_bc = scalar_f64(args, 7) as f32;
    let right_bc = scalar_f64(args, 8) as f32;
    if len == 0 {
        return Err(KernelError::ArgMismatch("stencil chunk must be non-empty".into()));
    }
    let left_edge = edges & EDGE_LEFT != 0;
    let right_edge = edges & EDGE_RIGHT != 0;

    let (head, rest) = args.split_at_mut(2);
    let (in_arg, out_arg) = head.split_at_mut(1);
    let input = read_buf(in_arg, 0);
    let out = match &mut out_arg[0] {
        KernelArg::Write(b) => b,
        _ => unreachable!("schema checked"),
    };
    let (left_arg, right_arg) = rest.split_at_mut(1);
    let (left_halo, right_halo) = match (&mut left_arg[0], &mut right_arg[0]) {
        (KernelArg::Write(l), KernelArg::Write(r)) => (l, r),
        _ => unreachable!("schema checked"),
    };
    let bytes = len.saturating_mul(4);
    need("in", input.len(), bytes)?;
    need("out", out.len(), bytes)?;
    if !left_edge {
        need("left", left_halo.len(), HALO_BUFFER_LEN)?;
    }
    if !right_edge {
        need("right", right_halo.len(), HALO_BUFFER_LEN)?;
    }

    // This chunk is the right-hand side of its left boundary and the
    // left-hand side of its right boundary.
    let l = if left_edge { left_bc } else { f32_at(left_halo, halo_slot(true, parity)) };
    let r = if right_edge { right_bc } else { f32_at(right_halo, halo_slot(false, parity)) };
    let len = len as usize;
    stencil_into(input, out, len, l, r);
    if !left_edge {
        set_f32(left_halo, halo_slot(false, parity + 1), f32_at(out, 0));
    }
    if !right_edge {
        set_f32(right_halo, halo_slot(true, parity + 1), f32_at(out, len - 1));
    }
    Ok(())
}
