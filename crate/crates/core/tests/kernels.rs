use std::collections::HashMap;

use offload_core::kernels::{execute, lookup, registry, Access, ArgKind, KernelError, EDGE_LEFT, EDGE_RIGHT, HALO_BUFFER_LEN};
use offload_core::protocol::ArgDesc;
use offload_core::status;
use proptest::collection::vec;
use proptest::prelude::*;

type Store = HashMap<u64, Vec<u8>>;

fn bytes(v: &[f32]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

fn floats(b: &[u8]) -> Vec<f32> {
    b.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()
}

fn run(store: &mut Store, name: &str, args: &[ArgDesc]) -> Result<(), KernelError> {
    execute(lookup(name)?, args, store)
}

/// Plain triple loop, k ascending, accumulating from zero.
fn triple_loop(a: &[f32], b: &[f32], n: usize) -> Vec<f32> {
    let mut c = vec![0f32; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut s = 0f32;
            for k in 0..n {
                s += a[i * n + k] * b[k * n + j];
            }
            c[i * n + j] = s;
        }
    }
    c
}

fn matmul(store: &mut Store, n: u64, start: u64, count: u64) -> Result<(), KernelError> {
    use ArgDesc::*;
    run(store, "matmul_rows_f32", &[Buffer(1), Buffer(2), Buffer(3), U64(n), U64(start), U64(count)])
}

fn matrices(n: usize, a: Vec<f32>, b: Vec<f32>) -> Store {
    HashMap::from([(1, bytes(&a)), (2, bytes(&b)), (3, vec![0; n * n * 4])])
}

#[test]
fn matmul_8x8_in_two_row_ranges_matches_triple_loop() {
    use rand::{rngs::StdRng, Rng, SeedableRng};
    let mut rng = StdRng::seed_from_u64(8);
    let a: Vec<f32> = (0..64).map(|_| rng.gen_range(-4.0..4.0)).collect();
    let b: Vec<f32> = (0..64).map(|_| rng.gen_range(-4.0..4.0)).collect();
    let mut store = matrices(8, a.clone(), b.clone());
    matmul(&mut store, 8, 0, 4).unwrap();
    matmul(&mut store, 8, 4, 4).unwrap();
    let got = floats(&store[&3]);
    let want = triple_loop(&a, &b, 8);
    assert!(got.iter().zip(&want).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn matmul_identity() {
    let id = vec![1.0, 0.0, 0.0, 1.0];
    let mut store = matrices(2, id.clone(), id.clone());
    matmul(&mut store, 2, 0, 2).unwrap();
    assert_eq!(floats(&store[&3]), id);
}

#[test]
fn matmul_rejects_bad_ranges_and_small_buffers() {
    let mut store = matrices(2, vec![0.0; 4], vec![0.0; 4]);
    assert_eq!(matmul(&mut store, 2, 1, 2).unwrap_err().status_code(), status::ARG_MISMATCH);
    assert_eq!(matmul(&mut store, 3, 0, 1).unwrap_err().status_code(), status::BUFFER_TOO_SMALL);
    assert_eq!(matmul(&mut store, u64::MAX, 0, 0).unwrap_err().status_code(), status::ARG_MISMATCH);
}

#[test]
fn schema_errors() {
    let mut store: Store = HashMap::from([(1, vec![0; 4])]);
    let e = run(&mut store, "increment_first_i32", &[ArgDesc::U64(1)]).unwrap_err();
    assert_eq!(e.status_code(), status::ARG_MISMATCH);
    let e = run(&mut store, "increment_first_i32", &[]).unwrap_err();
    assert_eq!(e.status_code(), status::ARG_MISMATCH);
    let e = run(&mut store, "increment_first_i32", &[ArgDesc::Buffer(9)]).unwrap_err();
    assert_eq!(e.status_code(), status::UNKNOWN_BUFFER);
    assert_eq!(store[&1], vec![0; 4]);
    let e = run(&mut store, "no_such_kernel", &[]).unwrap_err();
    assert_eq!(e.status_code(), status::UNKNOWN_KERNEL);
}

#[test]
fn registry_names_are_unique() {
    let mut names: Vec<_> = registry().iter().map(|k| k.name).collect();
    names.sort_unstable();
    names.dedup();
    assert_eq!(names.len(), registry().len());
}

/// Whole-domain reference: each step reads the previous field only.
fn stencil_reference(field: &[f32], steps: usize, lbc: f32, rbc: f32) -> Vec<f32> {
    let mut cur = field.to_vec();
    for _ in 0..steps {
        let n = cur.len();
        let next: Vec<f32> = (0..n)
            .map(|i| {
                let l = if i == 0 { lbc } else { cur[i - 1] };
                let r = if i + 1 == n { rbc } else { cur[i + 1] };
                (l + cur[i] + r) / 3.0
            })
            .collect();
        cur = next;
    }
    cur
}

/// Runs the chunked kernel over `d` chunks in one store, the way the
/// distributed benchmark lays buffers out.
fn stencil_chunked(field: &[f32], d: usize, steps: usize, lbc: f32, rbc: f32) -> Vec<f32> {
    use ArgDesc::*;
    let chunk = field.len() / d;
    let mut store = Store::new();
    let (cur0, next0, halo0, end0) = (100u64, 200u64, 300u64, 400u64);
    for i in 0..d {
        store.insert(cur0 + i as u64, bytes(&field[i * chunk..(i + 1) * chunk]));
        store.insert(next0 + i as u64, vec![0; chunk * 4]);
    }
    for i in 0..d.saturating_sub(1) {
        let e = (i + 1) * chunk;
        store.insert(halo0 + i as u64, bytes(&[field[e - 1], field[e], 0.0, 0.0]));
    }
    store.insert(end0, vec![0; HALO_BUFFER_LEN as usize]);
    store.insert(end0 + 1, vec![0; HALO_BUFFER_LEN as usize]);
    let (mut cur, mut next) = (cur0, next0);
    for step in 0..steps {
        for i in 0..d {
            let mut edges = 0;
            let left = if i == 0 {
                edges |= EDGE_LEFT;
                end0
            } else {
                halo0 + i as u64 - 1
            };
            let right = if i + 1 == d {
                edges |= EDGE_RIGHT;
                end0 + 1
            } else {
                halo0 + i as u64
            };
            let args = [
                Buffer(cur + i as u64),
                Buffer(next + i as u64),
                Buffer(left),
                Buffer(right),
                U64(chunk as u64),
                U64(step as u64 % 2),
                U64(edges),
                F64(f64::from(lbc)),
                F64(f64::from(rbc)),
            ];
            run(&mut store, "stencil_chunk_f32", &args).unwrap();
        }
        std::mem::swap(&mut cur, &mut next);
    }
    (0..d).flat_map(|i| floats(&store[&(cur + i as u64)])).collect()
}

fn stencil_single(field: &[f32], steps: usize, lbc: f32, rbc: f32) -> Vec<f32> {
    use ArgDesc::*;
    let mut store: Store = HashMap::from([(1, bytes(field)), (2, vec![0; field.len() * 4])]);
    let (mut a, mut b) = (1, 2);
    for _ in 0..steps {
        let args = [Buffer(a), Buffer(b), U64(field.len() as u64), F64(f64::from(lbc)), F64(f64::from(rbc))];
        run(&mut store, "stencil_step_f32", &args).unwrap();
        std::mem::swap(&mut a, &mut b);
    }
    floats(&store[&a])
}

fn bits(v: &[f32]) -> Vec<u32> {
    v.iter().map(|x| x.to_bits()).collect()
}

#[test]
fn stencil_chunk_rejects_empty_and_small_halo() {
    use ArgDesc::*;
    let mut store: Store = HashMap::from([(1, vec![0; 8]), (2, vec![0; 8]), (3, vec![0; 8]), (4, vec![0; 16])]);
    let args = |len| [Buffer(1), Buffer(2), Buffer(3), Buffer(4), U64(len), U64(0), U64(0), F64(0.0), F64(0.0)];
    assert_eq!(run(&mut store, "stencil_chunk_f32", &args(0)).unwrap_err().status_code(), status::ARG_MISMATCH);
    assert_eq!(run(&mut store, "stencil_chunk_f32", &args(2)).unwrap_err().status_code(), status::BUFFER_TOO_SMALL);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn matmul_any_row_partition_is_bitwise_equal(
        n in 1usize..12,
        cuts in vec(any::<prop::sample::Index>(), 0..6),
        seed in any::<u64>(),
    ) {
        use rand::{rngs::StdRng, Rng, SeedableRng};
        let mut rng = StdRng::seed_from_u64(seed);
        let a: Vec<f32> = (0..n * n).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let b: Vec<f32> = (0..n * n).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let mut whole = matrices(n, a.clone(), b.clone());
        matmul(&mut whole, n as u64, 0, n as u64).unwrap();

        let mut bounds: Vec<usize> = cuts.iter().map(|c| c.index(n + 1)).collect();
        bounds.extend([0, n]);
        bounds.sort_unstable();
        bounds.dedup();
        let mut parts = matrices(n, a.clone(), b.clone());
        // Ranges in reverse order: the result must not depend on call order.
        for w in bounds.windows(2).rev() {
            matmul(&mut parts, n as u64, w[0] as u64, (w[1] - w[0]) as u64).unwrap();
        }
        prop_assert_eq!(&whole[&3], &parts[&3]);
        prop_assert_eq!(bits(&floats(&whole[&3])), bits(&triple_loop(&a, &b, n)));
    }

    #[test]
    fn read_arguments_are_untouched(seed in any::<u64>(), n in 1usize..6) {
        use rand::{rngs::StdRng, Rng, SeedableRng};
        use ArgDesc::*;
        let mut rng = StdRng::seed_from_u64(seed);
        let mut random = |len: usize| -> Vec<u8> { (0..len).map(|_| rng.gen()).collect() };
        let size = n * n * 4;
        let mut store: Store = (1..=4).map(|i| (i, random(size.max(16)))).collect();
        let calls: Vec<(&str, Vec<ArgDesc>)> = vec![
            ("passthrough_i32", vec![Buffer(1), Buffer(2)]),
            ("matmul_rows_f32", vec![Buffer(1), Buffer(2), Buffer(3), U64(n as u64), U64(0), U64(n as u64)]),
            ("stencil_step_f32", vec![Buffer(1), Buffer(2), U64(n as u64), F64(1.5), F64(-2.0)]),
            (
                "stencil_chunk_f32",
                vec![Buffer(1), Buffer(2), Buffer(3), Buffer(4), U64(n as u64), U64(1), U64(0), F64(0.0), F64(0.0)],
            ),
        ];
        for (name, args) in calls {
            let spec = lookup(name).unwrap();
            let before = store.clone();
            execute(spec, &args, &mut store).unwrap();
            for (desc, want) in args.iter().zip(spec.args) {
                if let (Buffer(id), ArgKind::Buffer, Access::Read) = (desc, want.kind, want.access) {
                    prop_assert_eq!(&store[id], &before[id], "{} modified read-only {}", name, want.name);
                }
            }
        }
    }

    #[test]
    fn stencil_split_equals_unsplit(
        d in 1usize..7,
        chunk in 1usize..24,
        steps in 0usize..12,
        field in vec(-1000.0f32..1000.0, 1..200),
        lbc in -10.0f32..10.0,
        rbc in -10.0f32..10.0,
    ) {
        let len = d * chunk;
        let field: Vec<f32> = (0..len).map(|i| field[i % field.len()]).collect();
        let reference = stencil_reference(&field, steps, lbc, rbc);
        prop_assert_eq!(bits(&stencil_single(&field, steps, lbc, rbc)), bits(&reference));
        if d > 1 {
            prop_assert_eq!(bits(&stencil_chunked(&field, d, steps, lbc, rbc)), bits(&reference));
        }
    }
}
