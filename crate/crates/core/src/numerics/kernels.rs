//! Dense f32 kernels behind the tape ops.
//!
//! Plain slice arithmetic, no tensor types. Loop orders keep the inner
//! traversal sequential on both operands so the compiler can vectorize.

/// `c[m,n] += a[m,k] · b[k,n]`
pub fn matmul_acc(c: &mut [f32], a: &[f32], b: &[f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cj, bj) in c_row.iter_mut().zip(b_row) {
                *cj += a_ip * bj;
            }
        }
    }
}

/// `c[m,n] = a[m,k] · b[k,n]`
pub fn matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut c = vec![0.0; m * n];
    matmul_acc(&mut c, a, b, m, k, n);
    c
}

/// `c[k,n] += a[m,k]ᵀ · b[m,n]`
pub fn matmul_tn_acc(c: &mut [f32], a: &[f32], b: &[f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    for r in 0..m {
        let a_row = &a[r * k..(r + 1) * k];
        let b_row = &b[r * n..(r + 1) * n];
        for (i, &a_ri) in a_row.iter().enumerate() {
            if a_ri == 0.0 {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cj, bj) in c_row.iter_mut().zip(b_row) {
                *cj += a_ri * bj;
            }
        }
    }
}

/// `c[m,n] += a[m,k] · b[n,k]ᵀ`
pub fn matmul_nt_acc(c: &mut [f32], a: &[f32], b: &[f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (j, cj) in c_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = 0.0f32;
            for (ai, bi) in a_row.iter().zip(b_row) {
                acc += ai * bi;
            }
            *cj += acc;
        }
    }
}

/// dst += s · src
pub fn add_scaled(dst: &mut [f32], src: &[f32], s: f32) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, x) in dst.iter_mut().zip(src) {
        *d += s * x;
    }
}

/// Output length and left padding for "same" 1-D convolution.
///
/// Output length is ceil(len / stride); total padding splits as evenly as
/// possible with the extra zero on the right.
pub fn conv_same_geometry(len: usize, kernel: usize, stride: usize) -> (usize, usize) {
    let out_len = len.div_ceil(stride);
    let needed = (out_len - 1) * stride + kernel;
    let total_pad = needed.saturating_sub(len);
    (out_len, total_pad / 2)
}

/// Unfold x[cin, len] into col[cin·kernel, out_len] with zero padding.
pub fn im2col(
    x: &[f32],
    cin: usize,
    len: usize,
    kernel: usize,
    stride: usize,
    pad_left: usize,
    out_len: usize,
) -> Vec<f32> {
    debug_assert_eq!(x.len(), cin * len);
    let mut col = vec![0.0f32; cin * kernel * out_len];
    for ci in 0..cin {
        let x_ch = &x[ci * len..(ci + 1) * len];
        for kk in 0..kernel {
            let row = &mut col[(ci * kernel + kk) * out_len..(ci * kernel + kk + 1) * out_len];
            for (t, slot) in row.iter_mut().enumerate() {
                let src = t * stride + kk;
                if src >= pad_left && src - pad_left < len {
                    *slot = x_ch[src - pad_left];
                }
            }
        }
    }
    col
}

/// Scatter dcol[cin·kernel, out_len] back onto dx[cin, len] (accumulating).
#[allow(clippy::too_many_arguments)]
pub fn col2im_acc(
    dcol: &[f32],
    cin: usize,
    len: usize,
    kernel: usize,
    stride: usize,
    pad_left: usize,
    out_len: usize,
    dx: &mut [f32],
) {
    debug_assert_eq!(dcol.len(), cin * kernel * out_len);
    debug_assert_eq!(dx.len(), cin * len);
    for ci in 0..cin {
        let dx_ch = &mut dx[ci * len..(ci + 1) * len];
        for kk in 0..kernel {
            let row = &dcol[(ci * kernel + kk) * out_len..(ci * kernel + kk + 1) * out_len];
            for (t, &g) in row.iter().enumerate() {
                let src = t * stride + kk;
                if src >= pad_left && src - pad_left < len {
                    dx_ch[src - pad_left] += g;
                }
            }
        }
    }
}

/// Row-wise numerically stable softmax.
pub fn softmax_rows(x: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    debug_assert_eq!(x.len(), rows * cols);
    let mut y = vec![0.0f32; rows * cols];
    for r in 0..rows {
        let x_row = &x[r * cols..(r + 1) * cols];
        let y_row = &mut y[r * cols..(r + 1) * cols];
        let max = x_row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f32;
        for (yi, &xi) in y_row.iter_mut().zip(x_row) {
            let e = (xi - max).exp();
            *yi = e;
            sum += e;
        }
        let inv = 1.0 / sum;
        for yi in y_row.iter_mut() {
            *yi *= inv;
        }
    }
    y
}

/// Stable log(sum(exp(x))).
pub fn log_sum_exp(x: &[f32]) -> f32 {
    let max = x.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if !max.is_finite() {
        return max;
    }
    let sum: f32 = x.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        // [1,2;3,4] · [5,6;7,8] = [19,22;43,50]
        let c = matmul(&[1., 2., 3., 4.], &[5., 6., 7., 8.], 2, 2, 2);
        assert_eq!(c, vec![19., 22., 43., 50.]);
    }

    #[test]
    fn transposed_variants_agree_with_explicit_transpose() {
        let a = [1., 2., 3., 4., 5., 6.]; // [2,3]
        let b = [7., 8., 9., 10., 11., 12.]; // [2,3]
        // aᵀ·b : [3,3]
        let mut c = vec![0.0; 9];
        matmul_tn_acc(&mut c, &a, &b, 2, 3, 3);
        let at = [1., 4., 2., 5., 3., 6.]; // [3,2]
        let want = matmul(&at, &b, 3, 2, 3);
        assert_eq!(c, want);
        // a·bᵀ : [2,2]
        let mut d = vec![0.0; 4];
        matmul_nt_acc(&mut d, &a, &b, 2, 3, 2);
        let bt = [7., 10., 8., 11., 9., 12.]; // [3,2]
        let want = matmul(&a, &bt, 2, 3, 2);
        assert_eq!(d, want);
    }

    #[test]
    fn same_geometry_matches_ceil_division() {
        for len in 1..=100 {
            for stride in 1..=3 {
                let (out, _) = conv_same_geometry(len, 7, stride);
                assert_eq!(out, len.div_ceil(stride), "len={len} stride={stride}");
            }
        }
        assert_eq!(conv_same_geometry(2000, 7, 2).0, 1000);
        assert_eq!(conv_same_geometry(334, 7, 2).0, 167);
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        // <im2col(x), c> == <x, col2im(c)> for random-ish data.
        let (cin, len, k, stride) = (2, 9, 3, 2);
        let (out_len, pad) = conv_same_geometry(len, k, stride);
        let x: Vec<f32> = (0..cin * len).map(|i| (i as f32 * 0.37).sin()).collect();
        let c: Vec<f32> = (0..cin * k * out_len).map(|i| (i as f32 * 0.11).cos()).collect();
        let col = im2col(&x, cin, len, k, stride, pad, out_len);
        let lhs: f64 = col.iter().zip(&c).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        let mut dx = vec![0.0f32; cin * len];
        col2im_acc(&c, cin, len, k, stride, pad, out_len, &mut dx);
        let rhs: f64 = x.iter().zip(&dx).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        assert!((lhs - rhs).abs() < 1e-4, "{lhs} vs {rhs}");
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let y = softmax_rows(&[1., 2., 3., -1., 0., 1.], 2, 3);
        for r in 0..2 {
            let s: f32 = y[r * 3..(r + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn log_sum_exp_is_stable() {
        let v = log_sum_exp(&[1000.0, 0.0]);
        assert!((v - 1000.0).abs() < 1e-3);
        assert!(v.is_finite());
    }
}
