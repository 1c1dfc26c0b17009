//! Row-major building blocks shared by the batched and incremental passes.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

use super::Scalar;

pub const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

/// `out = inp (rows x k) * w (k x n) + bias`.
pub fn matmul<T: Scalar>(inp: &[T], rows: usize, w: &[T], k: usize, n: usize, bias: Option<&[T]>) -> Vec<T> {
    let mut out = vec![T::zero(); rows * n];
    if let Some(b) = bias {
        for row in out.chunks_exact_mut(n) {
            row.copy_from_slice(b);
        }
    }
    let a = ArrayView2::from_shape((rows, k), inp).expect("input shape");
    let wv = ArrayView2::from_shape((k, n), w).expect("weight shape");
    let mut c = ArrayViewMut2::from_shape((rows, n), &mut out).expect("output shape");
    let beta = if bias.is_some() { T::one() } else { T::zero() };
    general_mat_mul(T::one(), &a, &wv, beta, &mut c);
    out
}

/// Gradients of [`matmul`]: returns `d_inp`, accumulates into `d_w` and `d_bias`.
#[allow(clippy::too_many_arguments)]
pub fn matmul_backward<T: Scalar>(
    d_out: &[T],
    inp: &[T],
    w: &[T],
    rows: usize,
    k: usize,
    n: usize,
    d_w: &mut [T],
    d_bias: Option<&mut [T]>,
) -> Vec<T> {
    let dout = ArrayView2::from_shape((rows, n), d_out).expect("grad shape");
    let a = ArrayView2::from_shape((rows, k), inp).expect("input shape");
    let wv = ArrayView2::from_shape((k, n), w).expect("weight shape");
    let mut d_inp = vec![T::zero(); rows * k];
    {
        let mut di = ArrayViewMut2::from_shape((rows, k), &mut d_inp).expect("shape");
        general_mat_mul(T::one(), &dout, &wv.t(), T::zero(), &mut di);
    }
    let mut dw = ArrayViewMut2::from_shape((k, n), d_w).expect("shape");
    general_mat_mul(T::one(), &a.t(), &dout, T::one(), &mut dw);
    if let Some(db) = d_bias {
        for row in d_out.chunks_exact(n) {
            for (b, &g) in db.iter_mut().zip(row) {
                *b = *b + g;
            }
        }
    }
    d_inp
}

/// Single-row product `x (k) * w (k x n) + bias`, accumulated row by row.
pub fn vec_mat<T: Scalar>(x: &[T], w: &[T], n: usize, bias: Option<&[T]>) -> Vec<T> {
    let mut out = match bias {
        Some(b) => b.to_vec(),
        None => vec![T::zero(); n],
    };
    for (&a, row) in x.iter().zip(w.chunks_exact(n)) {
        for (o, &wv) in out.iter_mut().zip(row) {
            *o = *o + a * wv;
        }
    }
    out
}

pub struct LnCache<T> {
    pub mean: Vec<T>,
    pub rstd: Vec<T>,
}

pub fn layernorm<T: Scalar>(x: &[T], d: usize, g: &[T], b: &[T]) -> (Vec<T>, LnCache<T>) {
    let rows = x.len() / d;
    let mut out = vec![T::zero(); x.len()];
    let mut mean = Vec::with_capacity(rows);
    let mut rstd = Vec::with_capacity(rows);
    let inv_d = T::of(1.0 / d as f64);
    for (xr, or) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        let m = xr.iter().copied().sum::<T>() * inv_d;
        let var = xr.iter().map(|&v| (v - m) * (v - m)).sum::<T>() * inv_d;
        let r = T::one() / (var + T::of(LN_EPS)).sqrt();
        for i in 0..d {
            or[i] = (xr[i] - m) * r * g[i] + b[i];
        }
        mean.push(m);
        rstd.push(r);
    }
    (out, LnCache { mean, rstd })
}

pub fn layernorm_backward<T: Scalar>(
    d_out: &[T],
    x: &[T],
    cache: &LnCache<T>,
    g: &[T],
    d: usize,
    d_g: &mut [T],
    d_b: &mut [T],
) -> Vec<T> {
    let mut dx = vec![T::zero(); x.len()];
    let inv_d = T::of(1.0 / d as f64);
    for (row, ((dor, xr), dxr)) in d_out
        .chunks_exact(d)
        .zip(x.chunks_exact(d))
        .zip(dx.chunks_exact_mut(d))
        .enumerate()
    {
        let (m, r) = (cache.mean[row], cache.rstd[row]);
        let mut sum_dn = T::zero();
        let mut sum_dn_n = T::zero();
        for i in 0..d {
            let norm = (xr[i] - m) * r;
            let dn = dor[i] * g[i];
            sum_dn = sum_dn + dn;
            sum_dn_n = sum_dn_n + dn * norm;
            d_g[i] = d_g[i] + dor[i] * norm;
            d_b[i] = d_b[i] + dor[i];
        }
        let (mean_dn, mean_dn_n) = (sum_dn * inv_d, sum_dn_n * inv_d);
        for i in 0..d {
            let norm = (xr[i] - m) * r;
            dxr[i] = r * (dor[i] * g[i] - mean_dn - norm * mean_dn_n);
        }
    }
    dx
}

pub fn gelu<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    let u = T::of(GELU_C) * (x + T::of(GELU_K) * x * x * x);
    half * x * (T::one() + u.tanh())
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    let u = T::of(GELU_C) * (x + T::of(GELU_K) * x * x * x);
    let th = u.tanh();
    let sech2 = T::one() - th * th;
    half * (T::one() + th) + half * x * sech2 * T::of(GELU_C) * (T::one() + T::of(3.0 * GELU_K) * x * x)
}

/// Causal multi-head attention over a packed `qkv` buffer (`rows x 3d`).
/// Returns the head outputs (`rows x d`) and the attention probabilities
/// (`heads x rows x rows`, zero above the diagonal).
pub fn attention<T: Scalar>(qkv: &[T], rows: usize, d: usize, heads: usize) -> (Vec<T>, Vec<T>) {
    let hs = d / heads;
    let scale = T::of(1.0 / (hs as f64).sqrt());
    let mut y = vec![T::zero(); rows * d];
    let mut probs = vec![T::zero(); heads * rows * rows];
    for h in 0..heads {
        for t in 0..rows {
            let q = &qkv[t * 3 * d + h * hs..t * 3 * d + (h + 1) * hs];
            let p = &mut probs[(h * rows + t) * rows..(h * rows + t + 1) * rows];
            let mut max = T::neg_infinity();
            for u in 0..=t {
                let k = &qkv[u * 3 * d + d + h * hs..u * 3 * d + d + (h + 1) * hs];
                let s = q.iter().zip(k).map(|(&a, &b)| a * b).sum::<T>() * scale;
                p[u] = s;
                if s > max {
                    max = s;
                }
            }
            let mut sum = T::zero();
            for pu in p.iter_mut().take(t + 1) {
                *pu = (*pu - max).exp();
                sum = sum + *pu;
            }
            let inv = T::one() / sum;
            let yr = &mut y[t * d + h * hs..t * d + (h + 1) * hs];
            for u in 0..=t {
                p[u] = p[u] * inv;
                let v = &qkv[u * 3 * d + 2 * d + h * hs..u * 3 * d + 2 * d + (h + 1) * hs];
                for (o, &vv) in yr.iter_mut().zip(v) {
                    *o = *o + p[u] * vv;
                }
            }
        }
    }
    (y, probs)
}

pub fn attention_backward<T: Scalar>(d_y: &[T], qkv: &[T], probs: &[T], rows: usize, d: usize, heads: usize) -> Vec<T> {
    let hs = d / heads;
    let scale = T::of(1.0 / (hs as f64).sqrt());
    let mut d_qkv = vec![T::zero(); rows * 3 * d];
    let mut dp = vec![T::zero(); rows];
    for h in 0..heads {
        for t in 0..rows {
            let p = &probs[(h * rows + t) * rows..(h * rows + t + 1) * rows];
            let dyr = &d_y[t * d + h * hs..t * d + (h + 1) * hs];
            let mut dot = T::zero();
            for u in 0..=t {
                let v_off = u * 3 * d + 2 * d + h * hs;
                let v = &qkv[v_off..v_off + hs];
                dp[u] = dyr.iter().zip(v).map(|(&a, &b)| a * b).sum::<T>();
                dot = dot + p[u] * dp[u];
                for (dv, &g) in d_qkv[v_off..v_off + hs].iter_mut().zip(dyr) {
                    *dv = *dv + p[u] * g;
                }
            }
            let q_off = t * 3 * d + h * hs;
            for u in 0..=t {
                let ds = p[u] * (dp[u] - dot) * scale;
                let k_off = u * 3 * d + d + h * hs;
                for i in 0..hs {
                    let dq = ds * qkv[k_off + i];
                    let dk = ds * qkv[q_off + i];
                    d_qkv[q_off + i] = d_qkv[q_off + i] + dq;
                    d_qkv[k_off + i] = d_qkv[k_off + i] + dk;
                }
            }
        }
    }
    d_qkv
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_grad_matches_difference() {
        for &x in &[-3.0f64, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn vec_mat_agrees_with_matmul() {
        let x: Vec<f64> = (0..5).map(|i| i as f64 * 0.3 - 0.5).collect();
        let w: Vec<f64> = (0..15).map(|i| (i as f64).sin()).collect();
        let b = vec![0.1, -0.2, 0.3];
        let a = matmul(&x, 1, &w, 5, 3, Some(&b));
        let c = vec_mat(&x, &w, 3, Some(&b));
        for (p, q) in a.iter().zip(&c) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn layernorm_rows_are_normalised() {
        let x: Vec<f64> = (0..8).map(|i| (i * i) as f64).collect();
        let (out, _) = layernorm(&x, 4, &[1.0; 4], &[0.0; 4]);
        for row in out.chunks(4) {
            let m: f64 = row.iter().sum::<f64>() / 4.0;
            let v: f64 = row.iter().map(|r| (r - m).powi(2)).sum::<f64>() / 4.0;
            assert!(m.abs() < 1e-12 && (v - 1.0).abs() < 1e-3);
        }
    }
}
