//! Fusion quality metrics: entropy, edge-preservation (Qabf), SSIM against
//! both sources, and PSNR against both sources.

use std::f64::consts::FRAC_PI_2;
use std::fmt::Write as _;

use crate::autodiff::Tape;
use crate::data::ImagePair;
use crate::error::{Error, Result};
use crate::image::{quantize, ImageGray};
use crate::losses::{self, LossConfig};
use crate::network::{fuse_images, FusionOptions, ModelParams};

/// Shannon entropy in bits of the 256-level histogram.
pub fn entropy(img: &ImageGray) -> f64 {
    let mut hist = [0usize; 256];
    for &v in img.pixels() {
        hist[quantize(v) as usize] += 1;
    }
    let n = img.pixels().len() as f64;
    hist.iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum()
}

const GAMMA_G: f64 = 0.9994;
const KAPPA_G: f64 = -15.0;
const SIGMA_G: f64 = 0.5;
const GAMMA_A: f64 = 0.9879;
const KAPPA_A: f64 = -22.0;
const SIGMA_A: f64 = 0.8;

/// Zero-padded Sobel responses `(gx, gy)`.
fn sobel(img: &ImageGray) -> (Vec<f64>, Vec<f64>) {
    let (w, h) = img.dims();
    let at = |x: isize, y: isize| -> f64 {
        if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
            0.0
        } else {
            img.get(x as usize, y as usize)
        }
    };
    let mut gx = vec![0.0; w * h];
    let mut gy = vec![0.0; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let i = y as usize * w + x as usize;
            gx[i] = (at(x + 1, y - 1) + 2.0 * at(x + 1, y) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x - 1, y) + at(x - 1, y + 1));
            gy[i] = (at(x - 1, y + 1) + 2.0 * at(x, y + 1) + at(x + 1, y + 1))
                - (at(x - 1, y - 1) + 2.0 * at(x, y - 1) + at(x + 1, y - 1));
        }
    }
    (gx, gy)
}

/// Edge strength and orientation maps.
fn edges(img: &ImageGray) -> (Vec<f64>, Vec<f64>) {
    let (gx, gy) = sobel(img);
    let g = gx.iter().zip(&gy).map(|(x, y)| x.hypot(*y)).collect();
    let a = gx
        .iter()
        .zip(&gy)
        .map(|(&x, &y)| {
            if x == 0.0 {
                if y == 0.0 {
                    0.0
                } else {
                    FRAC_PI_2
                }
            } else {
                (y / x).atan()
            }
        })
        .collect();
    (g, a)
}

/// Per-pixel edge preservation of `src` in the fused image.
fn preservation(gs: &[f64], as_: &[f64], gf: &[f64], af: &[f64]) -> Vec<f64> {
    (0..gs.len())
        .map(|i| {
            let g = if gs[i] == 0.0 || gf[i] == 0.0 {
                0.0
            } else {
                gs[i].min(gf[i]) / gs[i].max(gf[i])
            };
            let a = 1.0 - (as_[i] - af[i]).abs() / FRAC_PI_2;
            let qg = GAMMA_G / (1.0 + (KAPPA_G * (g - SIGMA_G)).exp());
            let qa = GAMMA_A / (1.0 + (KAPPA_A * (a - SIGMA_A)).exp());
            qg * qa
        })
        .collect()
}

/// Gradient-based fusion quality. Zero when neither source has any edges.
pub fn qabf(a: &ImageGray, b: &ImageGray, fused: &ImageGray) -> Result<f64> {
    a.same_size(b)?;
    a.same_size(fused)?;
    let (ga, aa) = edges(a);
    let (gb, ab) = edges(b);
    let (gf, af) = edges(fused);
    let qa = preservation(&ga, &aa, &gf, &af);
    let qb = preservation(&gb, &ab, &gf, &af);
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..ga.len() {
        num += qa[i] * ga[i] + qb[i] * gb[i];
        den += ga[i] + gb[i];
    }
    Ok(if den == 0.0 { 0.0 } else { num / den })
}

fn ssim_pair(x: &ImageGray, y: &ImageGray, cfg: &LossConfig) -> Result<f64> {
    x.same_size(y)?;
    let mut tape = Tape::<f64>::new();
    let xv = tape.leaf(x.to_tensor());
    let yv = tape.leaf(y.to_tensor());
    let s = losses::ssim(&mut tape, xv, yv, cfg)?;
    tape.value(s).item()
}

/// Mean of `SSIM(F, A)` and `SSIM(F, B)`.
pub fn ssim_metric(
    fused: &ImageGray,
    a: &ImageGray,
    b: &ImageGray,
    cfg: &LossConfig,
) -> Result<f64> {
    Ok(0.5 * (ssim_pair(fused, a, cfg)? + ssim_pair(fused, b, cfg)?))
}

fn psnr_pair(x: &ImageGray, y: &ImageGray) -> Result<f64> {
    x.same_size(y)?;
    let n = x.pixels().len() as f64;
    let mse = x
        .pixels()
        .iter()
        .zip(y.pixels())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    })
}

/// Mean of the PSNR (dB, peak 1) against each source; `+inf` if the fused
/// image equals a source.
pub fn psnr(fused: &ImageGray, a: &ImageGray, b: &ImageGray) -> Result<f64> {
    Ok(0.5 * (psnr_pair(fused, a)? + psnr_pair(fused, b)?))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricValues {
    pub en: f64,
    pub qabf: f64,
    pub ssim: f64,
    pub psnr: f64,
}

impl MetricValues {
    pub fn compute(
        ir: &ImageGray,
        vis: &ImageGray,
        fused: &ImageGray,
        cfg: &LossConfig,
    ) -> Result<Self> {
        Ok(MetricValues {
            en: entropy(fused),
            qabf: qabf(ir, vis, fused)?,
            ssim: ssim_metric(fused, ir, vis, cfg)?,
            psnr: psnr(fused, ir, vis)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub pair_id: String,
    pub values: MetricValues,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub corpus: String,
    pub method: String,
    pub rows: Vec<MetricRow>,
}

fn fmt_value(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        }
    } else {
        format!("{v:.6}")
    }
}

impl MetricReport {
    pub const HEADER: &'static str = "pair_id,en,qabf,ssim,psnr";

    pub fn mean(&self) -> Option<MetricValues> {
        if self.rows.is_empty() {
            return None;
        }
        let n = self.rows.len() as f64;
        let avg =
            |f: fn(&MetricValues) -> f64| self.rows.iter().map(|r| f(&r.values)).sum::<f64>() / n;
        Some(MetricValues {
            en: avg(|v| v.en),
            qabf: avg(|v| v.qabf),
            ssim: avg(|v| v.ssim),
            psnr: avg(|v| v.psnr),
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::HEADER);
        for r in &self.rows {
            let v = r.values;
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.pair_id,
                fmt_value(v.en),
                fmt_value(v.qabf),
                fmt_value(v.ssim),
                fmt_value(v.psnr)
            );
        }
        out
    }

    /// Aligned table with a mean row.
    pub fn to_table(&self) -> String {
        let mut out = format!("corpus: {}  method: {}\n", self.corpus, self.method);
        let width = self
            .rows
            .iter()
            .map(|r| r.pair_id.len())
            .max()
            .unwrap_or(0)
            .max(7);
        let _ = writeln!(
            out,
            "{:<width$}  {:>10}  {:>10}  {:>10}  {:>10}",
            "pair", "EN", "Qabf", "SSIM", "PSNR"
        );
        let mut line = |name: &str, v: &MetricValues| {
            let _ = writeln!(
                out,
                "{:<width$}  {:>10}  {:>10}  {:>10}  {:>10}",
                name,
                fmt_value(v.en),
                fmt_value(v.qabf),
                fmt_value(v.ssim),
                fmt_value(v.psnr)
            );
        };
        for r in &self.rows {
            line(&r.pair_id, &r.values);
        }
        if let Some(m) = self.mean() {
            line("mean", &m);
        }
        out
    }
}

/// Fuse every pair with the trained model and score it, in pair-id order.
pub fn evaluate_pairs(
    pairs: &[&ImagePair],
    params: &ModelParams<f32>,
    opts: &FusionOptions,
    ssim_cfg: &LossConfig,
    corpus: &str,
) -> Result<(MetricReport, Vec<ImageGray>)> {
    if pairs.is_empty() {
        return Err(Error::contract("no pairs to evaluate"));
    }
    let mut sorted = pairs.to_vec();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    let mut rows = Vec::with_capacity(sorted.len());
    let mut fused_images = Vec::with_capacity(sorted.len());
    for p in sorted {
        let fused = fuse_images(&p.infrared, &p.visible, params, opts)?;
        rows.push(MetricRow {
            pair_id: p.id.clone(),
            values: MetricValues::compute(&p.infrared, &p.visible, &fused, ssim_cfg)?,
        });
        fused_images.push(fused);
    }
    Ok((
        MetricReport {
            corpus: corpus.to_string(),
            method: "hyperfuse".into(),
            rows,
        },
        fused_images,
    ))
}
