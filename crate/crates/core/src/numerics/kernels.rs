//! Slice-level kernels shared by the autodiff graph and the direct
//! (graph-free) forward used to verify pruning. Every kernel fixes its
//! accumulation order so that two callers with the same inputs agree bitwise.

use super::tensor::Scalar;

/// `a (m×k) · b (k×n)`. Each output accumulates over `k` in ascending order.
pub fn matmul<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `aᵀ · b` for `a (r×m)`, `b (r×n)`, giving `m×n`.
pub fn matmul_tn<F: Scalar>(a: &[F], b: &[F], r: usize, m: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * n];
    for row in 0..r {
        let a_row = &a[row * m..(row + 1) * m];
        let b_row = &b[row * n..(row + 1) * n];
        for (i, &av) in a_row.iter().enumerate() {
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    out
}

pub fn transpose<F: Scalar>(a: &[F], rows: usize, cols: usize) -> Vec<F> {
    let mut out = vec![F::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Row softmax. With `causal`, row `r` only covers columns `0..=r`; the rest are zero.
pub fn softmax_rows<F: Scalar>(x: &[F], rows: usize, cols: usize, causal: bool) -> Vec<F> {
    let mut out = vec![F::zero(); rows * cols];
    for r in 0..rows {
        let width = if causal { (r + 1).min(cols) } else { cols };
        let xr = &x[r * cols..r * cols + width];
        let max = xr.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
        let or = &mut out[r * cols..r * cols + width];
        let mut sum = F::zero();
        for (o, &v) in or.iter_mut().zip(xr) {
            *o = (v - max).exp();
            sum += *o;
        }
        for o in or.iter_mut() {
            *o = *o / sum;
        }
    }
    out
}

/// RMS normalization per row with a per-column gain. Returns the output and
/// each row's inverse RMS.
pub fn rms_norm<F: Scalar>(x: &[F], rows: usize, cols: usize, gain: &[F], eps: F) -> (Vec<F>, Vec<F>) {
    let mut out = vec![F::zero(); rows * cols];
    let mut inv = Vec::with_capacity(rows);
    let n = F::of(cols as f64);
    for r in 0..rows {
        let xr = &x[r * cols..(r + 1) * cols];
        let mut ss = F::zero();
        for &v in xr {
            ss += v * v;
        }
        let ir = F::one() / (ss / n + eps).sqrt();
        inv.push(ir);
        for ((o, &v), &g) in out[r * cols..(r + 1) * cols].iter_mut().zip(xr).zip(gain) {
            *o = v * ir * g;
        }
    }
    (out, inv)
}

#[inline]
pub fn sigmoid<F: Scalar>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

#[inline]
pub fn silu<F: Scalar>(x: F) -> F {
    x * sigmoid(x)
}

/// Cos/sin tables for rotary embeddings: `table[pos * half + i]` for frequency `i`.
pub fn rope_tables<F: Scalar>(positions: usize, start: usize, head_dim: usize, base: f64) -> (Vec<F>, Vec<F>) {
    let half = head_dim / 2;
    let mut cos = Vec::with_capacity(positions * half);
    let mut sin = Vec::with_capacity(positions * half);
    for p in 0..positions {
        let pos = (start + p) as f64;
        for i in 0..half {
            let freq = base.powf(-2.0 * i as f64 / head_dim as f64);
            let angle = pos * freq;
            cos.push(F::of(angle.cos()));
            sin.push(F::of(angle.sin()));
        }
    }
    (cos, sin)
}

/// Rotates each `head_dim` block of every row (half-split pairing `(i, i + half)`).
/// `inverse` applies the transpose rotation, which is the backward rule.
pub fn rope_apply<F: Scalar>(
    x: &[F],
    rows: usize,
    cols: usize,
    head_dim: usize,
    cos: &[F],
    sin: &[F],
    inverse: bool,
) -> Vec<F> {
    let half = head_dim / 2;
    let mut out = vec![F::zero(); rows * cols];
    for r in 0..rows {
        let c_row = &cos[r * half..(r + 1) * half];
        let s_row = &sin[r * half..(r + 1) * half];
        for h in 0..cols / head_dim {
            let base = r * cols + h * head_dim;
            for i in 0..half {
                let x1 = x[base + i];
                let x2 = x[base + half + i];
                let (c, s) = (c_row[i], if inverse { -s_row[i] } else { s_row[i] });
                out[base + i] = x1 * c - x2 * s;
                out[base + half + i] = x1 * s + x2 * c;
            }
        }
    }
    out
}

pub fn l2_norm<F: Scalar>(x: &[F]) -> F {
    let mut ss = F::zero();
    for &v in x {
        ss += v * v;
    }
    ss.sqrt()
}

pub fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    let mut acc = F::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_tn_matches_explicit_transpose() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 * 0.5 - 1.0).collect();
        let b: Vec<f64> = (0..8).map(|v| (v as f64).sin()).collect();
        let at = transpose(&a, 2, 3);
        assert_eq!(matmul_tn(&a, &b, 2, 3, 4), matmul(&at, &b, 3, 2, 4));
    }

    #[test]
    fn causal_softmax_zeroes_future() {
        let x = vec![1.0f64; 9];
        let y = softmax_rows(&x, 3, 3, true);
        assert_eq!(&y[0..3], &[1.0, 0.0, 0.0]);
        assert_eq!(&y[3..6], &[0.5, 0.5, 0.0]);
    }

    #[test]
    fn rope_inverse_undoes_rotation() {
        let x: Vec<f64> = (0..16).map(|v| (v as f64 * 0.37).cos()).collect();
        let (c, s) = rope_tables::<f64>(2, 3, 4, 10_000.0);
        let y = rope_apply(&x, 2, 8, 4, &c, &s, false);
        let back = rope_apply(&y, 2, 8, 4, &c, &s, true);
        for (a, b) in x.iter().zip(&back) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
