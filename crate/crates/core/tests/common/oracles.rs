//! Straight-line reference implementations of the fusion metrics. Nothing
//! here calls into the library, so agreement is evidence rather than echo.

#![allow(dead_code)]

use std::f64::consts::FRAC_PI_2;

/// Entropy by sorting quantized levels and counting runs.
pub fn entropy(px: &[f64]) -> f64 {
    let mut levels: Vec<u32> = px
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u32)
        .collect();
    levels.sort_unstable();
    let n = levels.len() as f64;
    let mut h = 0.0;
    let mut start = 0;
    while start < levels.len() {
        let mut end = start;
        while end < levels.len() && levels[end] == levels[start] {
            end += 1;
        }
        let p = (end - start) as f64 / n;
        h -= p * p.ln() / std::f64::consts::LN_2;
        start = end;
    }
    h
}

pub fn psnr_one(f: &[f64], r: &[f64]) -> f64 {
    let mut sq = 0.0;
    for i in 0..f.len() {
        sq += (f[i] - r[i]).powi(2);
    }
    let rmse = (sq / f.len() as f64).sqrt();
    if rmse == 0.0 {
        f64::INFINITY
    } else {
        -20.0 * rmse.log10()
    }
}

pub fn psnr(f: &[f64], a: &[f64], b: &[f64]) -> f64 {
    (psnr_one(f, a) + psnr_one(f, b)) / 2.0
}

/// Gaussian-windowed SSIM, valid windows only, averaged over positions.
pub fn ssim_one(x: &[f64], y: &[f64], h: usize, w: usize, win: usize, sigma: f64) -> f64 {
    let c = (win / 2) as f64;
    let mut k = vec![0.0; win * win];
    for i in 0..win {
        for j in 0..win {
            let d2 = (i as f64 - c).powi(2) + (j as f64 - c).powi(2);
            k[i * win + j] = (-d2 / (2.0 * sigma * sigma)).exp();
        }
    }
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    let (c1, c2) = (1e-4, 9e-4);
    let mut acc = 0.0;
    let mut count = 0;
    for r in 0..=h - win {
        for s in 0..=w - win {
            let mut m = [0.0; 5];
            for i in 0..win {
                for j in 0..win {
                    let g = k[i * win + j];
                    let (p, q) = (x[(r + i) * w + s + j], y[(r + i) * w + s + j]);
                    m[0] += g * p;
                    m[1] += g * q;
                    m[2] += g * p * p;
                    m[3] += g * q * q;
                    m[4] += g * p * q;
                }
            }
            let (mx, my) = (m[0], m[1]);
            let num = (2.0 * mx * my + c1) * (2.0 * (m[4] - mx * my) + c2);
            let den = (mx * mx + my * my + c1) * (m[2] - mx * mx + m[3] - my * my + c2);
            acc += num / den;
            count += 1;
        }
    }
    acc / count as f64
}

pub fn ssim(f: &[f64], a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    (ssim_one(f, a, h, w, 11, 1.5) + ssim_one(f, b, h, w, 11, 1.5)) / 2.0
}

const KX: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
const KY: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

/// Strength and orientation via an explicitly zero-padded copy.
fn edge_maps(px: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let (ph, pw) = (h + 2, w + 2);
    let mut pad = vec![0.0; ph * pw];
    for r in 0..h {
        pad[(r + 1) * pw + 1..(r + 1) * pw + 1 + w].copy_from_slice(&px[r * w..(r + 1) * w]);
    }
    let mut g = vec![0.0; h * w];
    let mut a = vec![0.0; h * w];
    for r in 0..h {
        for s in 0..w {
            let (mut sx, mut sy) = (0.0, 0.0);
            for i in 0..3 {
                for j in 0..3 {
                    let v = pad[(r + i) * pw + s + j];
                    sx += KX[i][j] * v;
                    sy += KY[i][j] * v;
                }
            }
            g[r * w + s] = (sx * sx + sy * sy).sqrt();
            a[r * w + s] = match (sx == 0.0, sy == 0.0) {
                (true, true) => 0.0,
                (true, false) => FRAC_PI_2,
                _ => (sy / sx).atan(),
            };
        }
    }
    (g, a)
}

fn sigmoid(gamma: f64, kappa: f64, sigma: f64, v: f64) -> f64 {
    gamma / (1.0 + (kappa * (v - sigma)).exp())
}

pub fn qabf(a: &[f64], b: &[f64], f: &[f64], h: usize, w: usize) -> f64 {
    let (ga, oa) = edge_maps(a, h, w);
    let (gb, ob) = edge_maps(b, h, w);
    let (gf, of) = edge_maps(f, h, w);
    let q = |gs: f64, os: f64, gf: f64, of: f64| {
        let rel = if gs == 0.0 || gf == 0.0 {
            0.0
        } else if gs > gf {
            gf / gs
        } else {
            gs / gf
        };
        let ang = 1.0 - (os - of).abs() / FRAC_PI_2;
        sigmoid(0.9994, -15.0, 0.5, rel) * sigmoid(0.9879, -22.0, 0.8, ang)
    };
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..h * w {
        num += q(ga[i], oa[i], gf[i], of[i]) * ga[i] + q(gb[i], ob[i], gf[i], of[i]) * gb[i];
        den += ga[i] + gb[i];
    }
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}
