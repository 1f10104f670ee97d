//! Reference implementations used as test oracles. They share no code with
//! the library beyond the container types.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

pub fn rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

/// Dense row-stochastic `rows x cols` matrix with entries bounded away from 0.
pub fn stochastic(rng: &mut ChaCha20Rng, rows: usize, cols: usize) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| {
            let raw: Vec<f64> = (0..cols).map(|_| rng.random::<f64>() + 1e-3).collect();
            let s: f64 = raw.iter().sum();
            raw.into_iter().map(|v| v / s).collect()
        })
        .collect()
}

pub fn flatten(m: &[Vec<f64>]) -> Vec<f64> {
    m.iter().flatten().copied().collect()
}

/// `iters` plain products `s <- A^T s`, each followed by L1 normalization.
pub fn dense_power_iteration(a: &[Vec<f64>], iters: usize) -> Vec<f64> {
    let n = a.len();
    let mut s = vec![1.0 / n as f64; n];
    for _ in 0..iters {
        let mut next = vec![0.0; a[0].len()];
        for (i, row) in a.iter().enumerate() {
            for (j, &w) in row.iter().enumerate() {
                next[j] += w * s[i];
            }
        }
        let total: f64 = next.iter().sum();
        s = next.into_iter().map(|v| v / total).collect();
    }
    s
}

pub fn entropy_oracle(row: &[f64], key: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut h = 0.0;
    for (&a, &s) in row.iter().zip(key) {
        dot += a * s;
        if a > 0.0 {
            h -= a * a.ln();
        }
    }
    dot / if h > 1e-12 { h } else { 1e-12 }
}

pub fn hard_clip_oracle(row: &[f64], key: &[f64], eta: f64) -> f64 {
    row.iter().zip(key).filter(|(&a, _)| a >= eta).map(|(_, &s)| s).sum()
}

pub fn soft_clip_oracle(row: &[f64], key: &[f64], eta: f64) -> f64 {
    row.iter().zip(key).map(|(&a, &s)| s / (1.0 + (eta - a).exp())).sum()
}

pub fn power_oracle(row: &[f64], key: &[f64], alpha: f64, beta: f64) -> f64 {
    row.iter()
        .zip(key)
        .map(|(&a, &s)| if s == 0.0 { 0.0 } else { (beta * s).powf(alpha * a) })
        .sum()
}

/// Catmull-Rom weight, written in the standard piecewise form.
fn keys(t: f64) -> f64 {
    let a = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        (a + 2.0) * t.powi(3) - (a + 3.0) * t.powi(2) + 1.0
    } else if t < 2.0 {
        a * t.powi(3) - 5.0 * a * t.powi(2) + 8.0 * a * t - 4.0 * a
    } else {
        0.0
    }
}

/// Single-channel reference: zero-fill `pruned`, 2x2 mean, bicubic 2x with
/// half-pixel centres and clamped borders, then keep retained values.
pub fn bicubic_reference(field: &[f64], h: usize, w: usize, pruned: &[bool]) -> Vec<f64> {
    let filled: Vec<f64> = field
        .iter()
        .zip(pruned)
        .map(|(&v, &p)| if p { 0.0 } else { v })
        .collect();
    let (ch, cw) = (h / 2, w / 2);
    let mut coarse = vec![0.0; ch * cw];
    for y in 0..ch {
        for x in 0..cw {
            let cell = [
                filled[2 * y * w + 2 * x],
                filled[2 * y * w + 2 * x + 1],
                filled[(2 * y + 1) * w + 2 * x],
                filled[(2 * y + 1) * w + 2 * x + 1],
            ];
            coarse[y * cw + x] = cell.iter().sum::<f64>() / 4.0;
        }
    }
    let mut out = filled.clone();
    for y in 0..h {
        for x in 0..w {
            if !pruned[y * w + x] {
                continue;
            }
            let sy = (y as f64 + 0.5) / 2.0 - 0.5;
            let sx = (x as f64 + 0.5) / 2.0 - 0.5;
            let (by, bx) = (sy.floor() as i64, sx.floor() as i64);
            let mut acc = 0.0;
            for dy in -1..=2 {
                for dx in -1..=2 {
                    let yy = (by + dy).clamp(0, ch as i64 - 1) as usize;
                    let xx = (bx + dx).clamp(0, cw as i64 - 1) as usize;
                    let wgt = keys(sy - (by + dy) as f64) * keys(sx - (bx + dx) as f64);
                    acc += wgt * coarse[yy * cw + xx];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Retained count with exact rational arithmetic for `ratio = num / den`.
pub fn retained_count_exact(total: usize, num: usize, den: usize) -> usize {
    let keep = (den - num) * total;
    (keep.div_ceil(den)).max(1)
}

/// Top-k by a stable descending sort, returned ascending.
pub fn top_k_oracle(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    let mut keep = idx[..k].to_vec();
    keep.sort();
    keep
}

pub fn elementwise_mean(heads: &[Vec<f64>]) -> Vec<f64> {
    let n = heads.len() as f64;
    (0..heads[0].len())
        .map(|i| heads.iter().map(|h| h[i]).sum::<f64>() / n)
        .collect()
}

pub fn two_pass_variance(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n
}

pub fn rms_oracle(heads: &[Vec<f64>]) -> Vec<f64> {
    let n = heads.len() as f64;
    let raw: Vec<f64> = (0..heads[0].len())
        .map(|i| (heads.iter().map(|h| h[i] * h[i]).sum::<f64>() / n).sqrt())
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
