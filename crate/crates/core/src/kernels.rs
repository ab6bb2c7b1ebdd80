//! Dense matrix kernels over row-major slices.
//!
//! Output rows are partitioned across workers; each output element is
//! produced by a single fixed-order accumulation, so the parallel and
//! sequential paths agree bit for bit.

use crate::parallel::{for_each_chunk, Exec};

// Below this many multiply-adds the pool overhead dominates.
const PAR_THRESHOLD: usize = 1 << 15;

fn rows_per_chunk(rows: usize, exec: Exec, work: usize) -> (Exec, usize) {
    if exec == Exec::Sequential || work < PAR_THRESHOLD || rows < 2 {
        return (Exec::Sequential, rows.max(1));
    }
    #[cfg(feature = "parallel")]
    let workers = rayon::current_num_threads().max(1);
    #[cfg(not(feature = "parallel"))]
    let workers = 1;
    (Exec::Parallel, rows.div_ceil(workers * 4).max(1))
}

/// `out[m×n] = a[m×k] · b[k×n]`
pub fn matmul_nn(exec: Exec, a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    if n == 0 {
        return;
    }
    let (exec, rows) = rows_per_chunk(m, exec, m * k * n);
    for_each_chunk(exec, out, rows * n, |ci, chunk| {
        let r0 = ci * rows;
        for (ri, orow) in chunk.chunks_mut(n).enumerate() {
            orow.fill(0.0);
            let arow = &a[(r0 + ri) * k..(r0 + ri + 1) * k];
            for (p, &av) in arow.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let brow = &b[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    });
}

/// `out[p×r] = x[p×q] · y[r×q]ᵀ`
pub fn matmul_nt(exec: Exec, x: &[f64], y: &[f64], out: &mut [f64], p: usize, q: usize, r: usize) {
    debug_assert_eq!(x.len(), p * q);
    debug_assert_eq!(y.len(), r * q);
    debug_assert_eq!(out.len(), p * r);
    if r == 0 {
        return;
    }
    let (exec, rows) = rows_per_chunk(p, exec, p * q * r);
    for_each_chunk(exec, out, rows * r, |ci, chunk| {
        let r0 = ci * rows;
        for (ri, orow) in chunk.chunks_mut(r).enumerate() {
            let xrow = &x[(r0 + ri) * q..(r0 + ri + 1) * q];
            for (j, o) in orow.iter_mut().enumerate() {
                let yrow = &y[j * q..(j + 1) * q];
                *o = xrow.iter().zip(yrow).map(|(a, b)| a * b).sum();
            }
        }
    });
}

/// `out[q×r] = x[p×q]ᵀ · y[p×r]`
pub fn matmul_tn(exec: Exec, x: &[f64], y: &[f64], out: &mut [f64], p: usize, q: usize, r: usize) {
    debug_assert_eq!(x.len(), p * q);
    debug_assert_eq!(y.len(), p * r);
    debug_assert_eq!(out.len(), q * r);
    if r == 0 {
        return;
    }
    let (exec, rows) = rows_per_chunk(q, exec, p * q * r);
    for_each_chunk(exec, out, rows * r, |ci, chunk| {
        let i0 = ci * rows;
        chunk.fill(0.0);
        for pi in 0..p {
            let yrow = &y[pi * r..(pi + 1) * r];
            for (ii, orow) in chunk.chunks_mut(r).enumerate() {
                let xv = x[pi * q + i0 + ii];
                if xv == 0.0 {
                    continue;
                }
                for (o, &yv) in orow.iter_mut().zip(yrow) {
                    *o += xv * yv;
                }
            }
        }
    });
}
