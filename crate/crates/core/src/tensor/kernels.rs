//! Plain slice kernels shared by the tape and by gradient bookkeeping.

/// `out[m×n] += a[m×k] · b[k×n]`, row-major.
pub fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    if n == 1 {
        for (i, o) in out.iter_mut().enumerate() {
            let row = &a[i * k..(i + 1) * k];
            *o += dot(row, b);
        }
        return;
    }
    gemm_acc(m, k, n, a, (k, 1), b, (n, 1), out);
}

/// `out[m×n] += a · b` with explicit `(row, column)` strides for `a` and `b`.
#[allow(clippy::too_many_arguments)]
fn gemm_acc(m: usize, k: usize, n: usize, a: &[f64], sa: (usize, usize), b: &[f64], sb: (usize, usize), out: &mut [f64]) {
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    assert!(a.len() >= (m - 1) * sa.0 + (k - 1) * sa.1 + 1);
    assert!(b.len() >= (k - 1) * sb.0 + (n - 1) * sb.1 + 1);
    assert_eq!(out.len(), m * n);
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            1.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `out[m×k] += dc[m×n] · bᵀ` where `b` is `k×n`.
pub fn matmul_nt_acc(dc: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    if n != 1 {
        gemm_acc(m, n, k, dc, (n, 1), b, (1, n), out);
        return;
    }
    for (i, &g) in dc.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        for (o, &bv) in out[i * k..(i + 1) * k].iter_mut().zip(b) {
            *o += g * bv;
        }
    }
}

/// `out[k×n] += aᵀ · dc[m×n]` where `a` is `m×k`.
pub fn matmul_tn_acc(a: &[f64], dc: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    if n == 1 {
        for (i, &g) in dc.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            for (o, &av) in out.iter_mut().zip(&a[i * k..(i + 1) * k]) {
                *o += g * av;
            }
        }
        return;
    }
    gemm_acc(k, m, n, a, (1, k), dc, (n, 1), out);
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Eight independent lanes; the reduction order is fixed so results are
    // reproducible bit for bit, and the lanes map onto packed SIMD adds.
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Log-softmax with max subtraction.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|&v| (v - max).exp()).sum();
    let log_sum = sum.ln();
    logits.iter().map(|&v| (v - max) - log_sum).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    log_softmax(logits).into_iter().map(f64::exp).collect()
}
