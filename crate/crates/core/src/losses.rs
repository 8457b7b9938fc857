//! Training losses: pixel distance, SSIM, average gradient, and their
//! weighted sum. All terms are built on a [`Tape`] so they differentiate
//! through the network.
//!
//! Batched inputs (`B > 1`) are reduced per image and averaged over the
//! batch.

use crate::autodiff::kernels::gaussian_kernel_1d;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Real;

/// How the pixel term measures distance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PixelMode {
    /// Mean of squared differences.
    Mse,
    /// Euclidean norm of the difference.
    Norm,
}

/// How the average-gradient term enters the composite loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AgMode {
    /// The output's average gradient itself.
    Literal,
    /// `|AG(target) - AG(output)|`: penalize losing (or inventing) detail.
    SharpnessMatch,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// Weight on `1 - SSIM`.
    pub lambda: f64,
    /// Weight on the average-gradient term.
    pub gamma: f64,
    pub ssim_window: usize,
    pub ssim_sigma: f64,
    pub ssim_c1: f64,
    pub ssim_c2: f64,
    pub ag_mode: AgMode,
    pub pixel_mode: PixelMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 100.0,
            gamma: 0.1,
            ssim_window: 11,
            ssim_sigma: 1.5,
            ssim_c1: 0.01 * 0.01,
            ssim_c2: 0.03 * 0.03,
            ag_mode: AgMode::SharpnessMatch,
            pixel_mode: PixelMode::Mse,
        }
    }
}

impl LossConfig {
    // negated comparisons so NaN is rejected too
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        if self.ssim_window < 3 || self.ssim_window.is_multiple_of(2) {
            return Err(Error::contract(format!(
                "ssim_window must be odd and >= 3, got {}",
                self.ssim_window
            )));
        }
        if !(self.ssim_sigma > 0.0) {
            return Err(Error::contract("ssim_sigma must be positive"));
        }
        if !(self.ssim_c1 > 0.0 && self.ssim_c2 > 0.0) {
            return Err(Error::contract("ssim_c1 and ssim_c2 must be positive"));
        }
        if !self.lambda.is_finite() || !self.gamma.is_finite() {
            return Err(Error::contract("lambda and gamma must be finite"));
        }
        Ok(())
    }
}

fn single_channel<T: Real>(tape: &Tape<T>, x: Var, what: &str) -> Result<(usize, usize, usize)> {
    let (b, c, h, w) = tape.value(x).dims4()?;
    if c != 1 {
        return Err(Error::shape(format!(
            "{what}: expected one channel, got {c}"
        )));
    }
    Ok((b, h, w))
}

fn same_shape<T: Real>(tape: &Tape<T>, a: Var, b: Var, what: &str) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::shape(format!(
            "{what}: shapes {:?} and {:?} differ",
            tape.shape(a),
            tape.shape(b)
        )));
    }
    Ok(())
}

/// Average of `f` applied to every batch item of `xs` (all share batch size).
fn batch_mean<T: Real>(
    tape: &mut Tape<T>,
    xs: &[Var],
    mut f: impl FnMut(&mut Tape<T>, &[Var]) -> Result<Var>,
) -> Result<Var> {
    let batch = tape.shape(xs[0])[0];
    if batch == 1 {
        return f(tape, xs);
    }
    let mut acc: Option<Var> = None;
    for b in 0..batch {
        let items = xs
            .iter()
            .map(|&x| tape.narrow(x, 0, b, 1))
            .collect::<Result<Vec<_>>>()?;
        let v = f(tape, &items)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, v)?,
            None => v,
        });
    }
    let total = acc.expect("batch is nonempty");
    Ok(tape.scale(total, T::of(1.0 / batch as f64)))
}

/// Distance between output and target.
pub fn pixel_loss<T: Real>(
    tape: &mut Tape<T>,
    output: Var,
    target: Var,
    mode: PixelMode,
) -> Result<Var> {
    same_shape(tape, output, target, "pixel_loss")?;
    let d = tape.sub(output, target)?;
    match mode {
        PixelMode::Mse => {
            let sq = tape.square(d);
            Ok(tape.mean(sq))
        }
        PixelMode::Norm => batch_mean(tape, &[d], |t, v| {
            let sq = t.square(v[0]);
            let s = t.sum(sq);
            t.sqrt(s)
        }),
    }
}

/// Mean SSIM over all valid Gaussian windows.
pub fn ssim<T: Real>(tape: &mut Tape<T>, a: Var, b: Var, cfg: &LossConfig) -> Result<Var> {
    cfg.validate()?;
    same_shape(tape, a, b, "ssim")?;
    let (_, h, w) = single_channel(tape, a, "ssim")?;
    let k = cfg.ssim_window;
    if h < k || w < k {
        return Err(Error::contract(format!(
            "ssim: {h}x{w} image is smaller than the {k}x{k} window"
        )));
    }
    let kernel: Vec<T> = gaussian_kernel_1d(k, cfg.ssim_sigma)
        .into_iter()
        .map(T::of)
        .collect();
    let c1 = T::of(cfg.ssim_c1);
    let c2 = T::of(cfg.ssim_c2);
    let two = T::of(2.0);

    let mu_a = tape.filter_valid(a, &kernel)?;
    let mu_b = tape.filter_valid(b, &kernel)?;
    let aa = tape.square(a);
    let bb = tape.square(b);
    let ab = tape.mul(a, b)?;
    let e_aa = tape.filter_valid(aa, &kernel)?;
    let e_bb = tape.filter_valid(bb, &kernel)?;
    let e_ab = tape.filter_valid(ab, &kernel)?;

    let mu_aa = tape.square(mu_a);
    let mu_bb = tape.square(mu_b);
    let mu_ab = tape.mul(mu_a, mu_b)?;
    let var_a = tape.sub(e_aa, mu_aa)?;
    let var_b = tape.sub(e_bb, mu_bb)?;
    let cov = tape.sub(e_ab, mu_ab)?;

    let l_num = tape.scale(mu_ab, two);
    let l_num = tape.offset(l_num, c1);
    let c_num = tape.scale(cov, two);
    let c_num = tape.offset(c_num, c2);
    let num = tape.mul(l_num, c_num)?;

    let l_den = tape.add(mu_aa, mu_bb)?;
    let l_den = tape.offset(l_den, c1);
    let c_den = tape.add(var_a, var_b)?;
    let c_den = tape.offset(c_den, c2);
    let den = tape.mul(l_den, c_den)?;

    let map = tape.div(num, den)?;
    Ok(tape.mean(map))
}

/// `1 - SSIM(output, target)`.
pub fn ssim_loss<T: Real>(
    tape: &mut Tape<T>,
    output: Var,
    target: Var,
    cfg: &LossConfig,
) -> Result<Var> {
    let s = ssim(tape, output, target, cfg)?;
    let neg = tape.scale(s, -T::one());
    Ok(tape.offset(neg, T::one()))
}

/// Mean over the `(H-1) x (W-1)` region of
/// `sqrt((dx^2 + dy^2) / 2)` with forward differences.
pub fn avg_gradient<T: Real>(tape: &mut Tape<T>, img: Var) -> Result<Var> {
    let (_, h, w) = single_channel(tape, img, "avg_gradient")?;
    if h < 2 || w < 2 {
        return Err(Error::contract(format!(
            "avg_gradient: {h}x{w} image is smaller than 2x2"
        )));
    }
    let top = tape.narrow(img, 2, 0, h - 1)?;
    let below = tape.narrow(img, 2, 1, h - 1)?;
    let here = tape.narrow(top, 3, 0, w - 1)?;
    let right = tape.narrow(top, 3, 1, w - 1)?;
    let down = tape.narrow(below, 3, 0, w - 1)?;
    let dx = tape.sub(right, here)?;
    let dy = tape.sub(down, here)?;
    let dx2 = tape.square(dx);
    let dy2 = tape.square(dy);
    let s = tape.add(dx2, dy2)?;
    let half = tape.scale(s, T::of(0.5));
    let mag = tape.sqrt(half)?;
    Ok(tape.mean(mag))
}

/// The loss terms of one evaluation. `ag` is the term as weighted by
/// `gamma`, which depends on [`AgMode`].
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub pixel: Var,
    pub ssim: Var,
    pub ag: Var,
}

/// `lambda * (1 - SSIM) + pixel + gamma * ag_term`.
pub fn composite_loss<T: Real>(
    tape: &mut Tape<T>,
    output: Var,
    target: Var,
    cfg: &LossConfig,
) -> Result<LossTerms> {
    cfg.validate()?;
    let pixel = pixel_loss(tape, output, target, cfg.pixel_mode)?;
    let ssim_term = ssim_loss(tape, output, target, cfg)?;
    let ag = match cfg.ag_mode {
        AgMode::Literal => avg_gradient(tape, output)?,
        AgMode::SharpnessMatch => batch_mean(tape, &[output, target], |t, v| {
            let ag_out = avg_gradient(t, v[0])?;
            let ag_target = avg_gradient(t, v[1])?;
            let d = t.sub(ag_target, ag_out)?;
            Ok(t.abs(d))
        })?,
    };
    let weighted_ssim = tape.scale(ssim_term, T::of(cfg.lambda));
    let weighted_ag = tape.scale(ag, T::of(cfg.gamma));
    let total = tape.add(weighted_ssim, pixel)?;
    let total = tape.add(total, weighted_ag)?;
    Ok(LossTerms {
        total,
        pixel,
        ssim: ssim_term,
        ag,
    })
}
