// Dense f32 kernels shared by the forward and backward passes.
//
// Every output element is produced by one thread in a fixed summation order,
// so results do not depend on how rayon schedules the work.

use rayon::prelude::*;

const PAR_THRESHOLD: usize = 1 << 15;

/// `out[m,n] = a[m,k] * b[k,n]`
pub(crate) fn matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    let row = |(i, out_row): (usize, &mut [f32])| {
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && n > 0 {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else if n > 0 {
        out.chunks_mut(n).enumerate().for_each(row);
    }
    out
}

/// `out[m,k] = g[m,n] * b[k,n]^T`
pub(crate) fn matmul_nt(g: &[f32], b: &[f32], m: usize, n: usize, k: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * k];
    let row = |(i, out_row): (usize, &mut [f32])| {
        let g_row = &g[i * n..(i + 1) * n];
        for (p, o) in out_row.iter_mut().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            *o = g_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
        }
    };
    if m * k * n >= PAR_THRESHOLD && k > 0 {
        out.par_chunks_mut(k).enumerate().for_each(row);
    } else if k > 0 {
        out.chunks_mut(k).enumerate().for_each(row);
    }
    out
}

/// `out[k,n] = a[m,k]^T * g[m,n]`
pub(crate) fn matmul_tn(a: &[f32], g: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; k * n];
    let row = |(p, out_row): (usize, &mut [f32])| {
        for i in 0..m {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let g_row = &g[i * n..(i + 1) * n];
            for (o, &gv) in out_row.iter_mut().zip(g_row) {
                *o += av * gv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && n > 0 {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else if n > 0 {
        out.chunks_mut(n).enumerate().for_each(row);
    }
    out
}

/// Geometry of a fused multi-head causal attention call over row-major
/// `[batch * seq, heads * head_dim]` activations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct AttnDims {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    pub head_dim: usize,
}

impl AttnDims {
    fn width(&self) -> usize {
        self.heads * self.head_dim
    }

    fn at(&self, b: usize, t: usize, h: usize) -> usize {
        (b * self.seq + t) * self.width() + h * self.head_dim
    }
}

/// Returns `(output, probs)` where `probs` is `[batch, heads, seq, seq]` with
/// zeros above the diagonal.
pub(crate) fn attention_forward(q: &[f32], k: &[f32], v: &[f32], d: AttnDims) -> (Vec<f32>, Vec<f32>) {
    let scale = 1.0 / (d.head_dim as f32).sqrt();
    let blocks: Vec<(Vec<f32>, Vec<f32>)> = (0..d.batch * d.heads)
        .into_par_iter()
        .map(|bh| {
            let (b, h) = (bh / d.heads, bh % d.heads);
            let mut probs = vec![0.0f32; d.seq * d.seq];
            let mut out = vec![0.0f32; d.seq * d.head_dim];
            for t in 0..d.seq {
                let qt = &q[d.at(b, t, h)..d.at(b, t, h) + d.head_dim];
                let row = &mut probs[t * d.seq..(t + 1) * d.seq];
                let mut max = f32::NEG_INFINITY;
                for s in 0..=t {
                    let ks = &k[d.at(b, s, h)..d.at(b, s, h) + d.head_dim];
                    let score = qt.iter().zip(ks).map(|(x, y)| x * y).sum::<f32>() * scale;
                    row[s] = score;
                    max = max.max(score);
                }
                let mut denom = 0.0f64;
                for p in row[..=t].iter_mut() {
                    *p = (*p - max).exp();
                    denom += *p as f64;
                }
                let inv = (1.0 / denom) as f32;
                let ot = &mut out[t * d.head_dim..(t + 1) * d.head_dim];
                for s in 0..=t {
                    row[s] *= inv;
                    let vs = &v[d.at(b, s, h)..d.at(b, s, h) + d.head_dim];
                    for (o, &x) in ot.iter_mut().zip(vs) {
                        *o += row[s] * x;
                    }
                }
            }
            (out, probs)
        })
        .collect();

    let mut output = vec![0.0f32; q.len()];
    let mut probs = Vec::with_capacity(d.batch * d.heads * d.seq * d.seq);
    for (bh, (out, p)) in blocks.into_iter().enumerate() {
        let (b, h) = (bh / d.heads, bh % d.heads);
        for t in 0..d.seq {
            let dst = d.at(b, t, h);
            output[dst..dst + d.head_dim].copy_from_slice(&out[t * d.head_dim..(t + 1) * d.head_dim]);
        }
        probs.extend_from_slice(&p);
    }
    (output, probs)
}

/// Gradients of attention with respect to `(q, k, v)`.
pub(crate) fn attention_backward(
    grad_out: &[f32],
    q: &[f32],
    k: &[f32],
    v: &[f32],
    probs: &[f32],
    d: AttnDims,
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let scale = 1.0 / (d.head_dim as f32).sqrt();
    let hd = d.head_dim;
    let blocks: Vec<(Vec<f32>, Vec<f32>, Vec<f32>)> = (0..d.batch * d.heads)
        .into_par_iter()
        .map(|bh| {
            let (b, h) = (bh / d.heads, bh % d.heads);
            let p = &probs[bh * d.seq * d.seq..(bh + 1) * d.seq * d.seq];
            let mut dq = vec![0.0f32; d.seq * hd];
            let mut dk = vec![0.0f32; d.seq * hd];
            let mut dv = vec![0.0f32; d.seq * hd];
            let mut dscore = vec![0.0f32; d.seq];
            for t in 0..d.seq {
                let go = &grad_out[d.at(b, t, h)..d.at(b, t, h) + hd];
                let prow = &p[t * d.seq..(t + 1) * d.seq];
                let mut dot = 0.0f32;
                for s in 0..=t {
                    let vs = &v[d.at(b, s, h)..d.at(b, s, h) + hd];
                    let dp: f32 = go.iter().zip(vs).map(|(x, y)| x * y).sum();
                    dscore[s] = dp;
                    dot += dp * prow[s];
                    for (acc, &g) in dv[s * hd..(s + 1) * hd].iter_mut().zip(go) {
                        *acc += prow[s] * g;
                    }
                }
                let qt = &q[d.at(b, t, h)..d.at(b, t, h) + hd];
                for s in 0..=t {
                    let ds = prow[s] * (dscore[s] - dot) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let ks = &k[d.at(b, s, h)..d.at(b, s, h) + hd];
                    for (acc, &x) in dq[t * hd..(t + 1) * hd].iter_mut().zip(ks) {
                        *acc += ds * x;
                    }
                    for (acc, &x) in dk[s * hd..(s + 1) * hd].iter_mut().zip(qt) {
                        *acc += ds * x;
                    }
                }
            }
            (dq, dk, dv)
        })
        .collect();

    let mut gq = vec![0.0f32; q.len()];
    let mut gk = vec![0.0f32; k.len()];
    let mut gv = vec![0.0f32; v.len()];
    for (bh, (dq, dk, dv)) in blocks.into_iter().enumerate() {
        let (b, h) = (bh / d.heads, bh % d.heads);
        for t in 0..d.seq {
            let dst = d.at(b, t, h);
            let src = t * hd..(t + 1) * hd;
            gq[dst..dst + hd].copy_from_slice(&dq[src.clone()]);
            gk[dst..dst + hd].copy_from_slice(&dk[src.clone()]);
            gv[dst..dst + hd].copy_from_slice(&dv[src]);
        }
    }
    (gq, gk, gv)
}

pub(crate) fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise log-sum-exp with max subtraction, accumulated in f64.
pub(crate) fn log_sum_exp(row: &[f32]) -> f64 {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let sum: f64 = row.iter().map(|&z| (z as f64 - max).exp()).sum();
    max + sum.ln()
}
