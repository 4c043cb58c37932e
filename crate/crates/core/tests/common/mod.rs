//! Independent reference implementations used as test oracles. Everything
//! here works on plain nested vectors and shares no code with the library.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Mat = Vec<Vec<f64>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn mat(t: &deltafuse_core::Tensor) -> Mat {
    t.to_rows()
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for l in 0..k {
                s += a[i][l] * b[l][j];
            }
            out[i][j] = s;
        }
    }
    out
}

pub fn transpose(a: &Mat) -> Mat {
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

/// `[X 1] · W` with the bias in the last row of `W`.
pub fn affine(x: &Mat, w: &Mat) -> Mat {
    let xa: Mat = x.iter().map(|r| r.iter().cloned().chain([1.0]).collect()).collect();
    matmul(&xa, w)
}

/// Softmax of each row over the entries where `allowed[i][j]`.
pub fn masked_softmax(logits: &Mat, allowed: &dyn Fn(usize, usize) -> bool) -> Mat {
    logits
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let max = row
                .iter()
                .enumerate()
                .filter(|(j, _)| allowed(i, *j))
                .map(|(_, v)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row
                .iter()
                .enumerate()
                .map(|(j, v)| if allowed(i, j) { (v - max).exp() } else { 0.0 })
                .collect();
            let z: f64 = e.iter().sum();
            e.into_iter().map(|v| v / z).collect()
        })
        .collect()
}

pub struct HeadWeights {
    pub w_q: Mat,
    pub w_k: Mat,
    pub w_v: Mat,
}

/// Textbook multi-head self-attention: per-head scaled dot products over
/// valid keys, heads concatenated, then an affine output projection.
pub fn vanilla_mhsa(x: &Mat, heads: &[HeadWeights], w_o: &Mat, valid: &[bool]) -> Mat {
    let t = x.len();
    let mut concat = vec![Vec::new(); t];
    for h in heads {
        let q = affine(x, &h.w_q);
        let k = affine(x, &h.w_k);
        let v = affine(x, &h.w_v);
        let scale = 1.0 / (q[0].len() as f64).sqrt();
        let logits: Mat = matmul(&q, &transpose(&k))
            .into_iter()
            .map(|r| r.into_iter().map(|s| s * scale).collect())
            .collect();
        let allowed = |i: usize, j: usize| valid[j] || (i == j && !valid[i]);
        let w = masked_softmax(&logits, &allowed);
        for (row, o) in concat.iter_mut().zip(matmul(&w, &v)) {
            row.extend(o);
        }
    }
    affine(&concat, w_o)
}

/// Brute-force delta attention weights, one (i, j) pair at a time.
pub fn brute_delta_weights(
    x: &Mat,
    w_q: &Mat,
    w_k: &Mat,
    w_rel: &Mat,
    allowed: &dyn Fn(usize, usize) -> bool,
) -> Mat {
    let q = affine(x, w_q);
    let k = affine(x, w_k);
    let t = x.len();
    let d_k = q[0].len() as f64;
    let mut logits = vec![vec![0.0; t]; t];
    for i in 0..t {
        for j in 0..t {
            let qk: f64 = q[i].iter().zip(&k[j]).map(|(a, b)| a * b).sum();
            let rpe: f64 = (0..x[0].len()).map(|c| (x[j][c] - x[i][c]) * w_rel[c][j]).sum();
            logits[i][j] = (qk + rpe) / d_k.sqrt();
        }
    }
    masked_softmax(&logits, allowed)
}

/// Counts and ratios computed directly from definitions.
#[derive(Debug)]
pub struct ReferenceScores {
    pub confusion: [[usize; 6]; 6],
    pub acc6: f64,
    pub acc2: [f64; 6],
    pub f1: [f64; 6],
    pub weighted_f1: f64,
    pub mae: f64,
}

fn first_max(v: &[f64]) -> usize {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    v.iter().position(|&x| x == m).unwrap()
}

pub fn reference_scores(probs: &[[f64; 6]], intensities: &[[f64; 6]]) -> ReferenceScores {
    let n = probs.len();
    let truth: Vec<usize> = intensities.iter().map(|y| first_max(y)).collect();
    let pred: Vec<usize> = probs.iter().map(|p| first_max(p)).collect();
    let mut confusion = [[0; 6]; 6];
    for (&t, &p) in truth.iter().zip(&pred) {
        confusion[t][p] += 1;
    }
    let mut acc2 = [0.0; 6];
    let mut f1 = [0.0; 6];
    let mut weighted = 0.0;
    for c in 0..6 {
        let mut tp = 0.0;
        let mut fp = 0.0;
        let mut fn_ = 0.0;
        let mut agree = 0.0;
        for (&t, &p) in truth.iter().zip(&pred) {
            match (t == c, p == c) {
                (true, true) => tp += 1.0,
                (false, true) => fp += 1.0,
                (true, false) => fn_ += 1.0,
                _ => {}
            }
            if (t == c) == (p == c) {
                agree += 1.0;
            }
        }
        acc2[c] = agree / n as f64;
        let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let recall = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
        f1[c] = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        weighted += f1[c] * (tp + fn_);
    }
    let mut abs = 0.0;
    for (p, y) in probs.iter().zip(intensities) {
        for c in 0..6 {
            abs += (3.0 * p[c] - y[c]).abs();
        }
    }
    ReferenceScores {
        confusion,
        acc6: truth.iter().zip(&pred).filter(|(t, p)| t == p).count() as f64 / n as f64,
        acc2,
        f1,
        weighted_f1: weighted / n as f64,
        mae: abs / (6 * n) as f64,
    }
}

/// Two views of a shared Gaussian latent. Coordinate `k` of each view is
/// `z_k + noise`, with noise scaled so that the k-th canonical correlation
/// is exactly `rho[k]`; each view is then mixed by a random invertible map.
pub fn shared_latent_views(m: usize, rho: &[f64], seed: u64) -> (Mat, Mat) {
    let d = rho.len();
    let mut r = rng(seed);
    let mut n = || -> f64 { StandardNormal.sample(&mut r) };
    // corr = 1 / (1 + s^2) when both views carry noise of variance s^2
    let s: Vec<f64> = rho.iter().map(|p| (1.0 / p - 1.0).sqrt()).collect();
    let mut a = vec![vec![0.0; d]; m];
    let mut b = vec![vec![0.0; d]; m];
    for i in 0..m {
        for k in 0..d {
            let z = n();
            a[i][k] = z + s[k] * n();
            b[i][k] = z + s[k] * n();
        }
    }
    let mix = |r: &mut ChaCha8Rng| -> Mat {
        (0..d)
            .map(|i| {
                (0..d)
                    .map(|j| if i == j { 2.0 } else { 0.0 } + r.random_range(-0.5..0.5))
                    .collect()
            })
            .collect()
    };
    let mut r2 = rng(seed ^ 0x5eed);
    let (ma, mb) = (mix(&mut r2), mix(&mut r2));
    (matmul(&a, &ma), matmul(&b, &mb))
}

/// A random orthogonal matrix from Gram-Schmidt on Gaussian columns.
pub fn random_orthogonal(d: usize, seed: u64) -> Mat {
    let mut r = rng(seed);
    let mut cols: Vec<Vec<f64>> = Vec::new();
    while cols.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut r)).collect();
        for c in &cols {
            let dot: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(c).for_each(|(x, y)| *x -= dot * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            cols.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    transpose(&cols)
}

pub fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
