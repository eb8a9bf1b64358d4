//! Straight-line reference computations. Nothing here touches the tape or
//! the memory store; each function is a direct loop over tokens so it can
//! serve as an independent check of the optimized paths.

use crate::tensor::{elu_plus_one, Tensor};

fn project(x: &[Vec<f64>], w: &Tensor, col0: usize, width: usize) -> Vec<Vec<f64>> {
    x.iter()
        .map(|row| {
            (col0..col0 + width)
                .map(|c| row.iter().enumerate().map(|(i, &xi)| xi * w.get(i, c)).sum())
                .collect()
        })
        .collect()
}

pub fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

/// Token-level kernelized attention of each query row over a set of
/// key/value rows: `Σ_j (σ(q)·σ(k_j)) v_j / (Σ_j σ(q)·σ(k_j) + ε)`.
pub fn linear_attention(q: &[Vec<f64>], k: &[Vec<f64>], v: &[Vec<f64>], epsilon: f64) -> Vec<Vec<f64>> {
    let d_v = v.first().map_or(0, Vec::len);
    q.iter()
        .map(|qi| {
            let sq: Vec<f64> = qi.iter().map(|&x| elu_plus_one(x)).collect();
            let mut num = vec![0.0; d_v];
            let mut den = 0.0;
            for (kj, vj) in k.iter().zip(v) {
                let sim: f64 = sq.iter().zip(kj).map(|(a, &b)| a * elu_plus_one(b)).sum();
                for (acc, &x) in num.iter_mut().zip(vj) {
                    *acc += sim * x;
                }
                den += sim;
            }
            num.iter().map(|x| x / (den + epsilon)).collect()
        })
        .collect()
}

/// Linear attention of `q_proj` over one head of a demonstration `x_demo`.
pub fn demo_linear_attention(
    q_proj: &[Vec<f64>],
    x_demo: &Tensor,
    w_k: &Tensor,
    w_v: &Tensor,
    head: usize,
    d_k: usize,
    d_v: usize,
    epsilon: f64,
) -> Vec<Vec<f64>> {
    let x = rows_of(x_demo);
    let k = project(&x, w_k, head * d_k, d_k);
    let v = project(&x, w_v, head * d_v, d_v);
    linear_attention(q_proj, &k, &v, epsilon)
}

/// Brute-force softmax attention for one head, scaled by `1/√scale_dim`.
pub fn softmax_attention(q: &[Vec<f64>], k: &[Vec<f64>], v: &[Vec<f64>], scale_dim: usize, causal: bool) -> Vec<Vec<f64>> {
    let scale = 1.0 / (scale_dim as f64).sqrt();
    let d_v = v.first().map_or(0, Vec::len);
    q.iter()
        .enumerate()
        .map(|(i, qi)| {
            let visible = if causal { (i + 1).min(k.len()) } else { k.len() };
            let scores: Vec<f64> = k[..visible]
                .iter()
                .map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale)
                .collect();
            let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let total: f64 = weights.iter().sum();
            let mut out = vec![0.0; d_v];
            for (w, vj) in weights.iter().zip(v) {
                for (o, x) in out.iter_mut().zip(vj) {
                    *o += w / total * x;
                }
            }
            out
        })
        .collect()
}

pub fn max_abs_diff_rows(a: &[Vec<f64>], b: &Tensor) -> f64 {
    a.iter()
        .enumerate()
        .flat_map(|(r, row)| row.iter().enumerate().map(move |(c, &x)| (r, c, x)))
        .map(|(r, c, x)| (x - b.get(r, c)).abs())
        .fold(0.0, f64::max)
}
