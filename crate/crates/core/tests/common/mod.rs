//! Nested-loop reference implementations, written directly from the
//! definitions and sharing no code with the library beyond plain `Vec`s.
#![allow(dead_code)]

use gam_core::rng::{gaussian, rng_from_seed, Rng};
use gam_core::{FeatureMap, Tensor};
use rand::Rng as _;

pub type Mat = Vec<Vec<f64>>;

pub fn mat(t: &Tensor) -> Mat {
    t.to_rows()
}

pub fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .flat_map(|(ra, rb)| {
            assert_eq!(ra.len(), rb.len());
            ra.iter().zip(rb).map(|(x, y)| (x - y).abs())
        })
        .fold(0.0, f64::max)
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        assert_eq!(a[i].len(), k);
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

/// `allowed[α][β]`: padding on columns, optional causal restriction.
pub fn allowed(valid: &[bool], causal: bool) -> Vec<Vec<bool>> {
    let n = valid.len();
    (0..n).map(|a| (0..n).map(|b| valid[b] && (!causal || b <= a)).collect()).collect()
}

pub fn softmax_masked(scores: &Mat, allowed: &[Vec<bool>]) -> Mat {
    scores
        .iter()
        .zip(allowed)
        .map(|(row, ok)| {
            let mut max = f64::NEG_INFINITY;
            for (v, &k) in row.iter().zip(ok) {
                if k && *v > max {
                    max = *v;
                }
            }
            let mut denom = 0.0;
            for (v, &k) in row.iter().zip(ok) {
                if k {
                    denom += (v - max).exp();
                }
            }
            row.iter()
                .zip(ok)
                .map(|(v, &k)| if k { (v - max).exp() / denom } else { 0.0 })
                .collect()
        })
        .collect()
}

/// Scaled dot-product attention: scores, weights, output.
pub fn baseline(y: &Mat, wq: &Mat, wk: &Mat, wv: &Mat, allowed: &[Vec<bool>]) -> (Mat, Mat, Mat) {
    let n = y.len();
    let (m, dk) = (wq.len(), wq[0].len());
    let mut e = vec![vec![0.0; n]; n];
    for a in 0..n {
        for b in 0..n {
            let mut s = 0.0;
            for j in 0..dk {
                let mut q = 0.0;
                let mut k = 0.0;
                for r in 0..m {
                    q += y[a][r] * wq[r][j];
                    k += y[b][r] * wk[r][j];
                }
                s += q * k;
            }
            e[a][b] = s / (dk as f64).sqrt();
        }
    }
    let phi = softmax_masked(&e, allowed);
    let z = matmul(&phi, &matmul(y, wv));
    (e, phi, z)
}

/// The feature map applied to one scalar product.
pub fn feature(x: f64, fmap: &FeatureMap) -> f64 {
    match fmap {
        FeatureMap::PowerLaw { n1 } => {
            if n1.fract() == 0.0 {
                x.powi(*n1 as i32)
            } else {
                x.signum() * x.abs().powf(*n1)
            }
        }
        FeatureMap::Polynomial { coeffs } => {
            coeffs.iter().enumerate().map(|(l, a)| a * x.powi(l as i32 + 1)).sum()
        }
    }
}

/// `Σ_{r,t} f(x^α_r x^β_t) B[r][t]` for every pair.
pub fn brain_scores(x: &Mat, brain: &Mat, fmap: &FeatureMap) -> Mat {
    let n = x.len();
    let m = brain.len();
    let mut out = vec![vec![0.0; n]; n];
    for a in 0..n {
        for b in 0..n {
            let mut s = 0.0;
            for r in 0..m {
                for t in 0..m {
                    s += feature(x[a][r] * x[b][t], fmap) * brain[r][t];
                }
            }
            out[a][b] = s;
        }
    }
    out
}

pub struct Mixed {
    pub scores: Vec<Mat>,
    pub weights: Vec<Mat>,
    pub mixed: Mat,
}

pub fn mixed_attention(x: &Mat, brains: &[Mat], w: &[f64], fmap: &FeatureMap, allowed: &[Vec<bool>]) -> Mixed {
    let n = x.len();
    let scores: Vec<Mat> = brains.iter().map(|b| brain_scores(x, b, fmap)).collect();
    let weights: Vec<Mat> = scores.iter().map(|s| softmax_masked(s, allowed)).collect();
    let mut mixed = vec![vec![0.0; n]; n];
    for (psi, wi) in weights.iter().zip(w) {
        for a in 0..n {
            for b in 0..n {
                mixed[a][b] += wi * psi[a][b];
            }
        }
    }
    Mixed { scores, weights, mixed }
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let denom: f64 = v.iter().map(|x| (x - max).exp()).sum();
    v.iter().map(|x| (x - max).exp() / denom).collect()
}

/// Relative-position vectors: one plus the corpus distance.
pub fn rvec(locs: &[u64]) -> Vec<Vec<u64>> {
    locs.iter().map(|&a| locs.iter().map(|&b| 1 + a.abs_diff(b)).collect()).collect()
}

pub fn position_vectors(locs: &[u64], embed: &Mat, log1p: bool) -> Mat {
    let r = rvec(locs);
    let m = embed[0].len();
    r.iter()
        .map(|row| {
            (0..m)
                .map(|c| {
                    row.iter()
                        .enumerate()
                        .map(|(i, &v)| {
                            let g = if log1p { (1.0 + v as f64).ln() } else { v as f64 };
                            g * embed[i][c]
                        })
                        .sum()
                })
                .collect()
        })
        .collect()
}

// ---- random instances ----

pub fn rng(seed: u64) -> Rng {
    rng_from_seed(seed)
}

pub fn gauss(rng: &mut Rng, rows: usize, cols: usize, scale: f64) -> Mat {
    mat(&gaussian(rng, &[rows, cols], scale))
}

pub fn tensor(m: &Mat) -> Tensor {
    Tensor::from_rows(m).unwrap()
}

pub fn random_fmap(rng: &mut Rng) -> FeatureMap {
    match rng.random_range(0..4) {
        0 => FeatureMap::PowerLaw { n1: 1.0 },
        1 => FeatureMap::PowerLaw { n1: rng.random_range(1..=3) as f64 },
        2 => FeatureMap::PowerLaw { n1: rng.random_range(0.3..2.5) },
        _ => {
            let len = rng.random_range(1..=3);
            FeatureMap::Polynomial { coeffs: (0..len).map(|_| rng.random_range(-1.0..1.0)).collect() }
        }
    }
}

pub fn strictly_increasing(rng: &mut Rng, n: usize, max_gap: u64) -> Vec<u64> {
    let mut loc = rng.random_range(0..10u64);
    (0..n)
        .map(|_| {
            let here = loc;
            loc += rng.random_range(1..=max_gap);
            here
        })
        .collect()
}
