//! Brute-force oracles shared by the integration tests.
#![allow(dead_code)]

use candle_core::{DType, Device, Tensor};
use nextview::gridops::Image;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Mat = Vec<Vec<f64>>;
pub type P = [f64; 3];

pub fn randn(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    nextview::diffusion::gaussian(&mut rng, shape, &Device::Cpu, DType::F64).unwrap()
}

pub fn mat(t: &Tensor) -> Mat {
    t.to_vec2::<f64>().unwrap()
}

/// `x W^T + b`.
pub fn affine(x: &Mat, w: &Mat, b: Option<&[f64]>) -> Mat {
    x.iter()
        .map(|row| {
            w.iter()
                .enumerate()
                .map(|(o, wr)| {
                    let mut acc = b.map_or(0.0, |b| b[o]);
                    for (a, c) in row.iter().zip(wr) {
                        acc += a * c;
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

/// Dense multi-head softmax(Q K^T / sqrt(d_h)) V for one batch element.
pub fn dense_attention(q: &Mat, k: &Mat, v: &Mat, heads: usize) -> Mat {
    let c = q[0].len();
    let dh = c / heads;
    let mut out = vec![vec![0.0; c]; q.len()];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for (i, qi) in q.iter().enumerate() {
            let scores: Vec<f64> = k
                .iter()
                .map(|kj| {
                    cols.clone().map(|d| qi[d] * kj[d]).sum::<f64>() / (dh as f64).sqrt()
                })
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            for (j, e) in exps.iter().enumerate() {
                for d in cols.clone() {
                    out[i][d] += e / z * v[j][d];
                }
            }
        }
    }
    out
}

pub fn layer_norm(x: &Mat, w: &[f64], b: &[f64]) -> Mat {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
            row.iter()
                .enumerate()
                .map(|(i, a)| (a - mean) / (var + 1e-5).sqrt() * w[i] + b[i])
                .collect()
        })
        .collect()
}

pub fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn brute_chamfer(x: &[P], y: &[P]) -> f64 {
    let d = |a: &P, b: &P| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
    let one_way = |from: &[P], to: &[P]| {
        let mut total = 0.0;
        for a in from {
            let mut best = f64::INFINITY;
            for b in to {
                best = best.min(d(a, b));
            }
            total += best;
        }
        total / from.len() as f64
    };
    0.5 * (one_way(x, y) + one_way(y, x))
}

pub fn psnr_oracle(a: &Image, b: &Image) -> f64 {
    let mut sum = 0.0;
    for r in 0..a.height() {
        for c in 0..a.width() {
            let (p, q) = (a.pixel(r, c), b.pixel(r, c));
            for ch in 0..3 {
                sum += (p[ch] as f64 - q[ch] as f64).powi(2);
            }
        }
    }
    let mse = sum / (a.height() * a.width() * 3) as f64;
    -10.0 * mse.log10()
}

/// Direct windowed SSIM: explicit 2-D Gaussian weights per window position.
pub fn ssim_oracle(a: &Image, b: &Image) -> f64 {
    let gray = |img: &Image, r: usize, c: usize| {
        let p = img.pixel(r, c);
        0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64
    };
    let mut w = [[0.0f64; 11]; 11];
    let mut total = 0.0;
    for (i, row) in w.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp();
            total += *v;
        }
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut acc = 0.0;
    let mut count = 0;
    for r0 in 0..=a.height() - 11 {
        for c0 in 0..=a.width() - 11 {
            let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    let wt = w[i][j] / total;
                    let (x, y) = (gray(a, r0 + i, c0 + j), gray(b, r0 + i, c0 + j));
                    mx += wt * x;
                    my += wt * y;
                    sxx += wt * x * x;
                    syy += wt * y * y;
                    sxy += wt * x * y;
                }
            }
            let (vx, vy, cov) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
            acc += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    acc / count as f64
}

pub fn image_from(h: usize, w: usize, vals: &[f32]) -> Image {
    Image::new(h, w, vals.to_vec()).unwrap()
}

pub fn random_image(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Image {
    use rand::Rng;
    let vals: Vec<f32> = (0..h * w * 3).map(|_| rng.random::<f32>()).collect();
    image_from(h, w, &vals)
}
