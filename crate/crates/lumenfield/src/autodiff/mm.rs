//! Dense f64 matrix-multiply kernels for the tape.
//!
//! Three accumulating variants cover the forward pass and both backward
//! forms of `matmul` without ever materializing a transpose. The NN kernel
//! uses a 4x16 register-blocked micro-kernel; `mul_add` keeps results
//! exactly rounded and identical across SIMD widths.

const MR: usize = 4;
const NR: usize = 16;
const NR2: usize = 8;

/// c[m,n] += a[m,k] @ b[k,n]
pub fn mm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if n < NR2 {
        return mm_nn_narrow(a, b, c, m, k, n);
    }

    let mut i = 0;
    while i + MR <= m {
        let mut j = 0;
        while j + NR <= n {
            micro_kernel::<NR>(a, b, c, i, j, k, n);
            j += NR;
        }
        if j + NR2 <= n {
            micro_kernel::<NR2>(a, b, c, i, j, k, n);
            j += NR2;
        }
        if j + 4 <= n {
            micro_kernel::<4>(a, b, c, i, j, k, n);
            j += 4;
        }
        if j + 2 <= n {
            micro_kernel::<2>(a, b, c, i, j, k, n);
            j += 2;
        }
        if j < n {
            micro_kernel::<1>(a, b, c, i, j, k, n);
        }
        i += MR;
    }
    while i < m {
        row_update(&a[i * k..i * k + k], b, &mut c[i * n..i * n + n], k, n, 0);
        i += 1;
    }
}

/// MR x W register-blocked tile: c[i..i+MR, j..j+W] += a-rows times b-strip.
#[inline(always)]
fn micro_kernel<const W: usize>(a: &[f64], b: &[f64], c: &mut [f64], i: usize, j: usize, k: usize, n: usize) {
    let mut acc = [[0.0f64; W]; MR];
    for p in 0..k {
        let bs = &b[p * n + j..p * n + j + W];
        for r in 0..MR {
            let av = a[(i + r) * k + p];
            for l in 0..W {
                acc[r][l] = av.mul_add(bs[l], acc[r][l]);
            }
        }
    }
    for r in 0..MR {
        let crow = &mut c[(i + r) * n + j..(i + r) * n + j + W];
        for l in 0..W {
            crow[l] += acc[r][l];
        }
    }
}

/// One output row, columns `j0..n`: crow[j] += sum_p arow[p] * b[p,j].
fn row_update(arow: &[f64], b: &[f64], crow: &mut [f64], k: usize, n: usize, j0: usize) {
    for p in 0..k {
        let av = arow[p];
        let brow = &b[p * n..p * n + n];
        for j in j0..n {
            crow[j] = av.mul_add(brow[j], crow[j]);
        }
    }
}

/// Plain ikj loop for matrices too narrow to strip-mine.
fn mm_nn_narrow(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..i * k + k];
        let crow = &mut c[i * n..i * n + n];
        for p in 0..k {
            let av = arow[p];
            let brow = &b[p * n..p * n + n];
            for j in 0..n {
                crow[j] = av.mul_add(brow[j], crow[j]);
            }
        }
    }
}

/// 8x8-tiled transpose; keeps both sides cache-line friendly.
fn transpose(src: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    const T: usize = 8;
    let mut out = vec![0.0; rows * cols];
    let mut i0 = 0;
    while i0 < rows {
        let ih = (i0 + T).min(rows);
        let mut j0 = 0;
        while j0 < cols {
            let jh = (j0 + T).min(cols);
            for i in i0..ih {
                for j in j0..jh {
                    out[j * rows + i] = src[i * cols + j];
                }
            }
            j0 += T;
        }
        i0 += T;
    }
    out
}

/// c[m,k] += a[m,n] @ b[k,n]^T
///
/// The transpose is materialized so the blocked NN kernel does the work;
/// its O(kn) cost is noise next to the O(mkn) multiply.
pub fn mm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * k);
    let bt = transpose(b, k, n);
    mm_nn(a, &bt, c, m, n, k);
}

/// c[k,n] += a[m,k]^T @ b[m,n]
///
/// Rank-1 updates blocked four rows at a time, so the tall `a` matrix is
/// read in row order without materializing its transpose.
pub fn mm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    if n < NR2 {
        // narrow outputs: plain per-row accumulation
        for i in 0..m {
            let brow = &b[i * n..i * n + n];
            for p in 0..k {
                let av = a[i * k + p];
                let crow = &mut c[p * n..p * n + n];
                for j in 0..n {
                    crow[j] = av.mul_add(brow[j], crow[j]);
                }
            }
        }
        return;
    }
    let mut i = 0;
    while i + 4 <= m {
        let a0 = &a[i * k..(i + 1) * k];
        let a1 = &a[(i + 1) * k..(i + 2) * k];
        let a2 = &a[(i + 2) * k..(i + 3) * k];
        let a3 = &a[(i + 3) * k..(i + 4) * k];
        let b0 = &b[i * n..(i + 1) * n];
        let b1 = &b[(i + 1) * n..(i + 2) * n];
        let b2 = &b[(i + 2) * n..(i + 3) * n];
        let b3 = &b[(i + 3) * n..(i + 4) * n];
        for p in 0..k {
            let (v0, v1, v2, v3) = (a0[p], a1[p], a2[p], a3[p]);
            let crow = &mut c[p * n..p * n + n];
            for j in 0..n {
                let t0 = v0.mul_add(b0[j], crow[j]);
                let t1 = v1.mul_add(b1[j], t0);
                let t2 = v2.mul_add(b2[j], t1);
                crow[j] = v3.mul_add(b3[j], t2);
            }
        }
        i += 4;
    }
    while i < m {
        let brow = &b[i * n..i * n + n];
        for p in 0..k {
            let av = a[i * k + p];
            let crow = &mut c[p * n..p * n + n];
            for j in 0..n {
                crow[j] = av.mul_add(brow[j], crow[j]);
            }
        }
        i += 1;
    }
}
