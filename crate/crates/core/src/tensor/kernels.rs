//! Row-major matrix kernels. All of them accumulate into `out`.

/// `out[m×n] += a[m×k] · b[k×n]`
pub(crate) fn mm(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && out.len() >= m * n);
    for (a_row, out_row) in a.chunks_exact(k).zip(out.chunks_exact_mut(n)).take(m) {
        for (&a_ip, b_row) in a_row.iter().zip(b.chunks_exact(n)) {
            if a_ip == 0.0 {
                continue;
            }
            for (o, &b_pj) in out_row.iter_mut().zip(b_row) {
                *o += a_ip * b_pj;
            }
        }
    }
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`
pub(crate) fn mm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert!(a.len() >= m * k && b.len() >= n * k && out.len() >= m * n);
    for (a_row, out_row) in a.chunks_exact(k).zip(out.chunks_exact_mut(n)).take(m) {
        for (o, b_row) in out_row.iter_mut().zip(b.chunks_exact(k)) {
            *o += dot(a_row, b_row);
        }
    }
}

/// `out[m×n] += a[k×m]ᵀ · b[k×n]`
pub(crate) fn mm_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert!(a.len() >= k * m && b.len() >= k * n && out.len() >= m * n);
    for (a_row, b_row) in a.chunks_exact(m).zip(b.chunks_exact(n)).take(k) {
        for (&a_pi, out_row) in a_row.iter().zip(out.chunks_exact_mut(n)) {
            if a_pi == 0.0 {
                continue;
            }
            for (o, &b_pj) in out_row.iter_mut().zip(b_row) {
                *o += a_pi * b_pj;
            }
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    // four accumulators let the loop vectorize without reassociation
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> alloc::vec::Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        out
    }

    fn transpose(x: &[f64], rows: usize, cols: usize) -> alloc::vec::Vec<f64> {
        let mut t = vec![0.0; x.len()];
        for r in 0..rows {
            for c in 0..cols {
                t[c * rows + r] = x[r * cols + c];
            }
        }
        t
    }

    #[test]
    fn kernels_agree_with_triple_loop() {
        let (m, k, n) = (3, 7, 5);
        let a: alloc::vec::Vec<f64> = (0..m * k).map(|i| libm::sin(i as f64 * 0.7)).collect();
        let b: alloc::vec::Vec<f64> = (0..k * n).map(|i| libm::cos(i as f64 * 1.3)).collect();
        let want = naive(&a, &b, m, k, n);

        let mut out = vec![0.0; m * n];
        mm(&a, &b, &mut out, m, k, n);
        let mut out_nt = vec![0.0; m * n];
        mm_nt(&a, &transpose(&b, k, n), &mut out_nt, m, k, n);
        let mut out_tn = vec![0.0; m * n];
        mm_tn(&transpose(&a, m, k), &b, &mut out_tn, m, k, n);
        for i in 0..m * n {
            assert!((out[i] - want[i]).abs() < 1e-12);
            assert!((out_nt[i] - want[i]).abs() < 1e-12);
            assert!((out_tn[i] - want[i]).abs() < 1e-12);
        }
    }
}
