//! Slice-level numeric kernels behind the graph ops.
//!
//! All matrices are row-major. Parallel variants split work over independent
//! output rows (or heads); every reduction keeps a fixed order, so
//! `Exec::Sequential` and `Exec::Parallel` give bit-identical results.

use super::Scalar;
use crate::par::{self, Exec};

const ROW_BLOCK: usize = 32;

/// `[m, k] x [k, n] -> [m, n]`
pub fn matmul<T: Scalar>(exec: Exec, a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![T::zero(); m * n];
    if n == 0 {
        return out;
    }
    par::for_each_chunk_mut(exec, &mut out, ROW_BLOCK * n, |ci, chunk| {
        let r0 = ci * ROW_BLOCK;
        for (ri, out_row) in chunk.chunks_exact_mut(n).enumerate() {
            let a_row = &a[(r0 + ri) * k..(r0 + ri + 1) * k];
            for (p, &av) in a_row.iter().enumerate() {
                let b_row = &b[p * n..(p + 1) * n];
                for (o, &bv) in out_row.iter_mut().zip(b_row) {
                    *o = *o + av * bv;
                }
            }
        }
    });
    out
}

/// `[m, k] x [n, k]^T -> [m, n]`
pub fn matmul_bt<T: Scalar>(exec: Exec, a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let bt = transpose(b, n, k);
    matmul(exec, a, &bt, m, k, n)
}

/// `[m, k]^T x [m, n] -> [k, n]`
pub fn matmul_at<T: Scalar>(exec: Exec, a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    let mut out = vec![T::zero(); k * n];
    if n == 0 {
        return out;
    }
    let block = 8;
    par::for_each_chunk_mut(exec, &mut out, block * n, |ci, chunk| {
        let c0 = ci * block;
        let rows = chunk.len() / n;
        for i in 0..m {
            let b_row = &b[i * n..(i + 1) * n];
            let a_row = &a[i * k..(i + 1) * k];
            for r in 0..rows {
                let av = a_row[c0 + r];
                let out_row = &mut chunk[r * n..(r + 1) * n];
                for (o, &bv) in out_row.iter_mut().zip(b_row) {
                    *o = *o + av * bv;
                }
            }
        }
    });
    out
}

pub fn transpose<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Row-wise numerically stable softmax over the last dimension `d`.
pub fn softmax_rows<T: Scalar>(x: &[T], d: usize) -> Vec<T> {
    let mut out = x.to_vec();
    for row in out.chunks_exact_mut(d) {
        softmax_in_place(row);
    }
    out
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    let inv = T::one() / sum;
    for v in row.iter_mut() {
        *v = *v * inv;
    }
}

/// Gradient of a row-wise softmax given its output `y` and upstream `dy`.
pub fn softmax_rows_backward<T: Scalar>(y: &[T], dy: &[T], d: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); y.len()];
    for ((yr, dyr), dxr) in y.chunks_exact(d).zip(dy.chunks_exact(d)).zip(dx.chunks_exact_mut(d)) {
        let dot: T = yr.iter().zip(dyr).map(|(&a, &b)| a * b).sum();
        for ((o, &yv), &g) in dxr.iter_mut().zip(yr).zip(dyr) {
            *o = yv * (g - dot);
        }
    }
    dx
}

/// Per-row statistics saved by the layer norm forward pass.
#[derive(Debug, Clone)]
pub struct LayerNormStats<T> {
    pub mean: Vec<T>,
    pub rstd: Vec<T>,
}

/// `(x - mean) / sqrt(var + eps) * gain + bias` per row of width `d`.
pub fn layer_norm_forward<T: Scalar>(
    x: &[T],
    d: usize,
    gain: &[T],
    bias: Option<&[T]>,
    eps: T,
) -> (Vec<T>, LayerNormStats<T>) {
    let rows = x.len() / d;
    let inv_d = T::one() / T::of(d as f64);
    let mut out = vec![T::zero(); x.len()];
    let mut mean = Vec::with_capacity(rows);
    let mut rstd = Vec::with_capacity(rows);
    for (xr, or) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        let mu = xr.iter().copied().sum::<T>() * inv_d;
        let var = xr.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() * inv_d;
        let rs = T::one() / (var + eps).sqrt();
        for (j, (o, &v)) in or.iter_mut().zip(xr).enumerate() {
            let y = (v - mu) * rs * gain[j];
            *o = match bias {
                Some(b) => y + b[j],
                None => y,
            };
        }
        mean.push(mu);
        rstd.push(rs);
    }
    (out, LayerNormStats { mean, rstd })
}

/// Returns `(dx, dgain, dbias)`.
pub fn layer_norm_backward<T: Scalar>(
    x: &[T],
    d: usize,
    gain: &[T],
    stats: &LayerNormStats<T>,
    dy: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let inv_d = T::one() / T::of(d as f64);
    let mut dx = vec![T::zero(); x.len()];
    let mut dgain = vec![T::zero(); d];
    let mut dbias = vec![T::zero(); d];
    let mut xhat = vec![T::zero(); d];
    let mut dxhat = vec![T::zero(); d];
    for (r, ((xr, dyr), dxr)) in x
        .chunks_exact(d)
        .zip(dy.chunks_exact(d))
        .zip(dx.chunks_exact_mut(d))
        .enumerate()
    {
        let (mu, rs) = (stats.mean[r], stats.rstd[r]);
        let mut mean_dxhat = T::zero();
        let mut mean_dxhat_xhat = T::zero();
        for j in 0..d {
            xhat[j] = (xr[j] - mu) * rs;
            dxhat[j] = dyr[j] * gain[j];
            dgain[j] = dgain[j] + dyr[j] * xhat[j];
            dbias[j] = dbias[j] + dyr[j];
            mean_dxhat = mean_dxhat + dxhat[j];
            mean_dxhat_xhat = mean_dxhat_xhat + dxhat[j] * xhat[j];
        }
        mean_dxhat = mean_dxhat * inv_d;
        mean_dxhat_xhat = mean_dxhat_xhat * inv_d;
        for j in 0..d {
            dxr[j] = rs * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
        }
    }
    (dx, dgain, dbias)
}

/// Exact (erf-based) GELU.
#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    half * x * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

#[inline]
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    let cdf = half * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-half * x * x).exp() * T::of(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    cdf + x * pdf
}

/// Rotary embedding on `x: [rows, heads * head_dim]`, rotate-half pairing
/// `(i, i + head_dim/2)` with frequency `base^(-2i/head_dim)`. `inverse`
/// rotates by the negated angle, which is the exact adjoint.
pub fn rope<T: Scalar>(
    x: &[T],
    heads: usize,
    head_dim: usize,
    positions: &[usize],
    base: f64,
    inverse: bool,
) -> Vec<T> {
    let width = heads * head_dim;
    let half = head_dim / 2;
    let max_pos = positions.iter().copied().max().unwrap_or(0);
    let inv_freq: Vec<f64> = (0..half)
        .map(|i| base.powf(-((2 * i) as f64) / head_dim as f64))
        .collect();
    let mut cos = vec![T::zero(); (max_pos + 1) * half];
    let mut sin = vec![T::zero(); (max_pos + 1) * half];
    let mut seen = vec![false; max_pos + 1];
    for &p in positions {
        if seen[p] {
            continue;
        }
        seen[p] = true;
        for (i, f) in inv_freq.iter().enumerate() {
            let angle = p as f64 * f;
            cos[p * half + i] = T::of(angle.cos());
            let s = T::of(angle.sin());
            sin[p * half + i] = if inverse { -s } else { s };
        }
    }
    let mut out = vec![T::zero(); x.len()];
    for (r, (xr, or)) in x.chunks_exact(width).zip(out.chunks_exact_mut(width)).enumerate() {
        let p = positions[r];
        let (c, s) = (&cos[p * half..(p + 1) * half], &sin[p * half..(p + 1) * half]);
        for h in 0..heads {
            let xh = &xr[h * head_dim..(h + 1) * head_dim];
            let oh = &mut or[h * head_dim..(h + 1) * head_dim];
            for i in 0..half {
                let (a, b) = (xh[i], xh[i + half]);
                oh[i] = a * c[i] - b * s[i];
                oh[i + half] = a * s[i] + b * c[i];
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionDims {
    pub seq: usize,
    pub heads: usize,
    pub kv_heads: usize,
    pub head_dim: usize,
}

impl AttentionDims {
    pub fn group_size(&self) -> usize {
        self.heads / self.kv_heads
    }
}

/// Attention probabilities of one forward pass, ragged per query row.
#[derive(Debug, Clone)]
pub struct AttentionProbs<T> {
    /// Start offset of row `i` inside one head's block.
    pub row_offset: Vec<usize>,
    /// Values per head.
    pub per_head: usize,
    pub probs: Vec<T>,
}

fn row_offsets(window_start: &[usize]) -> (Vec<usize>, usize) {
    let mut off = Vec::with_capacity(window_start.len());
    let mut acc = 0;
    for (i, &s) in window_start.iter().enumerate() {
        off.push(acc);
        acc += i + 1 - s;
    }
    (off, acc)
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc = acc + x * y;
    }
    acc
}

/// Grouped-query attention. Query head `h` reads key/value head
/// `h / (heads / kv_heads)`. Row `i` attends to keys `window_start[i]..=i`,
/// which expresses causal and block-diagonal (packed document) masking.
pub fn attention_forward<T: Scalar>(
    exec: Exec,
    q: &[T],
    k: &[T],
    v: &[T],
    dims: AttentionDims,
    window_start: &[usize],
) -> (Vec<T>, AttentionProbs<T>) {
    let AttentionDims {
        seq,
        heads,
        kv_heads,
        head_dim,
    } = dims;
    let (qw, kw) = (heads * head_dim, kv_heads * head_dim);
    let group = dims.group_size();
    let scale = T::of(1.0 / (head_dim as f64).sqrt());
    let (row_offset, per_head) = row_offsets(window_start);
    let work = per_head * heads * head_dim;
    let exec = if exec.is_parallel() { Exec::auto(work) } else { exec };

    let per: Vec<(Vec<T>, Vec<T>)> = par::map_range(exec, heads, |h| {
        let g = h / group;
        let mut out = vec![T::zero(); seq * head_dim];
        let mut probs = vec![T::zero(); per_head];
        for i in 0..seq {
            let qi = &q[i * qw + h * head_dim..i * qw + (h + 1) * head_dim];
            let start = window_start[i];
            let p = &mut probs[row_offset[i]..row_offset[i] + (i + 1 - start)];
            for (pj, j) in p.iter_mut().zip(start..=i) {
                *pj = dot(qi, &k[j * kw + g * head_dim..j * kw + (g + 1) * head_dim]) * scale;
            }
            softmax_in_place(p);
            let oi = &mut out[i * head_dim..(i + 1) * head_dim];
            for (&pj, j) in p.iter().zip(start..=i) {
                let vj = &v[j * kw + g * head_dim..j * kw + (g + 1) * head_dim];
                for (o, &vv) in oi.iter_mut().zip(vj) {
                    *o = *o + pj * vv;
                }
            }
        }
        (out, probs)
    });

    let mut out = vec![T::zero(); seq * qw];
    let mut probs = Vec::with_capacity(per_head * heads);
    for (h, (oh, ph)) in per.into_iter().enumerate() {
        for i in 0..seq {
            out[i * qw + h * head_dim..i * qw + (h + 1) * head_dim]
                .copy_from_slice(&oh[i * head_dim..(i + 1) * head_dim]);
        }
        probs.extend(ph);
    }
    (
        out,
        AttentionProbs {
            row_offset,
            per_head,
            probs,
        },
    )
}

/// Returns `(dq, dk, dv)`.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward<T: Scalar>(
    exec: Exec,
    q: &[T],
    k: &[T],
    v: &[T],
    dims: AttentionDims,
    window_start: &[usize],
    saved: &AttentionProbs<T>,
    dout: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let AttentionDims {
        seq,
        heads,
        kv_heads,
        head_dim,
    } = dims;
    let (qw, kw) = (heads * head_dim, kv_heads * head_dim);
    let group = dims.group_size();
    let scale = T::of(1.0 / (head_dim as f64).sqrt());
    let work = saved.per_head * heads * head_dim;
    let exec = if exec.is_parallel() { Exec::auto(work) } else { exec };

    // Per head: (dq_h, dk_h, dv_h), each [seq, head_dim].
    let per: Vec<(Vec<T>, Vec<T>, Vec<T>)> = par::map_range(exec, heads, |h| {
        let g = h / group;
        let probs = &saved.probs[h * saved.per_head..(h + 1) * saved.per_head];
        let mut dq = vec![T::zero(); seq * head_dim];
        let mut dk = vec![T::zero(); seq * head_dim];
        let mut dv = vec![T::zero(); seq * head_dim];
        let mut ds = Vec::new();
        for i in 0..seq {
            let start = window_start[i];
            let p = &probs[saved.row_offset[i]..saved.row_offset[i] + (i + 1 - start)];
            let doi = &dout[i * qw + h * head_dim..i * qw + (h + 1) * head_dim];
            let qi = &q[i * qw + h * head_dim..i * qw + (h + 1) * head_dim];
            ds.clear();
            let mut pdp = T::zero();
            for (&pj, j) in p.iter().zip(start..=i) {
                let vj = &v[j * kw + g * head_dim..j * kw + (g + 1) * head_dim];
                let dp = dot(doi, vj);
                ds.push(dp);
                pdp = pdp + pj * dp;
                let dvj = &mut dv[j * head_dim..(j + 1) * head_dim];
                for (o, &x) in dvj.iter_mut().zip(doi) {
                    *o = *o + pj * x;
                }
            }
            let dqi = &mut dq[i * head_dim..(i + 1) * head_dim];
            for ((dsj, &pj), j) in ds.iter_mut().zip(p).zip(start..=i) {
                let s = pj * (*dsj - pdp) * scale;
                *dsj = s;
                let kj = &k[j * kw + g * head_dim..j * kw + (g + 1) * head_dim];
                for (o, &x) in dqi.iter_mut().zip(kj) {
                    *o = *o + s * x;
                }
                let dkj = &mut dk[j * head_dim..(j + 1) * head_dim];
                for (o, &x) in dkj.iter_mut().zip(qi) {
                    *o = *o + s * x;
                }
            }
        }
        (dq, dk, dv)
    });

    let mut dq = vec![T::zero(); seq * qw];
    let mut dk = vec![T::zero(); seq * kw];
    let mut dv = vec![T::zero(); seq * kw];
    for (h, (dqh, dkh, dvh)) in per.into_iter().enumerate() {
        let g = h / group;
        for i in 0..seq {
            dq[i * qw + h * head_dim..i * qw + (h + 1) * head_dim]
                .copy_from_slice(&dqh[i * head_dim..(i + 1) * head_dim]);
            let krow = &mut dk[i * kw + g * head_dim..i * kw + (g + 1) * head_dim];
            for (o, &x) in krow.iter_mut().zip(&dkh[i * head_dim..(i + 1) * head_dim]) {
                *o = *o + x;
            }
            let vrow = &mut dv[i * kw + g * head_dim..i * kw + (g + 1) * head_dim];
            for (o, &x) in vrow.iter_mut().zip(&dvh[i * head_dim..(i + 1) * head_dim]) {
                *o = *o + x;
            }
        }
    }
    (dq, dk, dv)
}

/// Per-row saved quantities of the fused cross-entropy + z-loss.
#[derive(Debug, Clone)]
pub struct LossSaved<T> {
    pub log_partition: Vec<T>,
}

/// Masked cross-entropy plus z-loss. Returns `(total, ce, z, saved)` where
/// `ce = sum(mask * (lse - logit[target])) / normalizer`,
/// `z = z_coef * sum(mask * lse^2) / normalizer`.
pub fn lm_loss_forward<T: Scalar>(
    logits: &[T],
    vocab: usize,
    targets: &[usize],
    mask: &[T],
    normalizer: T,
    z_coef: T,
) -> (T, T, T, LossSaved<T>) {
    let mut lse_all = Vec::with_capacity(targets.len());
    let mut ce = T::zero();
    let mut z = T::zero();
    for (r, row) in logits.chunks_exact(vocab).enumerate() {
        let m = mask[r];
        if m == T::zero() {
            lse_all.push(T::zero());
            continue;
        }
        let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let sum: T = row.iter().map(|&x| (x - max).exp()).sum();
        let lse = max + sum.ln();
        ce = ce + m * (lse - row[targets[r]]);
        z = z + m * lse * lse;
        lse_all.push(lse);
    }
    let ce = ce / normalizer;
    let z = z_coef * z / normalizer;
    (
        ce + z,
        ce,
        z,
        LossSaved {
            log_partition: lse_all,
        },
    )
}

pub fn lm_loss_backward<T: Scalar>(
    logits: &[T],
    vocab: usize,
    targets: &[usize],
    mask: &[T],
    normalizer: T,
    z_coef: T,
    saved: &LossSaved<T>,
    upstream: T,
) -> Vec<T> {
    let mut d = vec![T::zero(); logits.len()];
    let two = T::of(2.0);
    for (r, (row, drow)) in logits.chunks_exact(vocab).zip(d.chunks_exact_mut(vocab)).enumerate() {
        let m = mask[r];
        if m == T::zero() {
            continue;
        }
        let lse = saved.log_partition[r];
        let w = upstream * m / normalizer;
        let zfac = T::one() + two * z_coef * lse;
        for (o, &x) in drow.iter_mut().zip(row) {
            *o = w * (x - lse).exp() * zfac;
        }
        drow[targets[r]] = drow[targets[r]] - w;
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
            }
        }
        out
    }

    #[test]
    fn matmul_variants_agree_with_naive() {
        let (m, k, n) = (37, 5, 11);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let want = naive_matmul(&a, &b, m, k, n);
        for exec in [Exec::Sequential, Exec::Parallel] {
            let got = matmul(exec, &a, &b, m, k, n);
            assert!(got.iter().zip(&want).all(|(x, y)| (x - y).abs() < 1e-12));
            let bt = transpose(&b, k, n);
            let got = matmul_bt(exec, &a, &bt, m, k, n);
            assert!(got.iter().zip(&want).all(|(x, y)| (x - y).abs() < 1e-12));
            let at = transpose(&a, m, k);
            let got = matmul_at(exec, &at, &b, k, m, n);
            assert!(got.iter().zip(&want).all(|(x, y)| (x - y).abs() < 1e-12));
        }
    }

    #[test]
    fn parallel_matmul_is_bitwise_sequential() {
        let (m, k, n) = (300, 64, 130);
        let a: Vec<f32> = (0..m * k).map(|i| ((i * 7919) % 113) as f32 / 50.0 - 1.0).collect();
        let b: Vec<f32> = (0..k * n).map(|i| ((i * 104729) % 97) as f32 / 40.0 - 1.2).collect();
        let s = matmul(Exec::Sequential, &a, &b, m, k, n);
        let p = matmul(Exec::Parallel, &a, &b, m, k, n);
        assert!(s.iter().zip(&p).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn rope_inverse_undoes_rotation() {
        let x: Vec<f64> = (0..2 * 3 * 8).map(|i| (i as f64).sin()).collect();
        let pos = [3usize, 17];
        let y = rope(&x, 3, 8, &pos, 10_000.0, false);
        let back = rope(&y, 3, 8, &pos, 10_000.0, true);
        assert!(x.iter().zip(&back).all(|(a, b)| (a - b).abs() < 1e-12));
    }
}
