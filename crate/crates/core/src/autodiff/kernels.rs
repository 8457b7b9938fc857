//! Raw numeric kernels behind the tape operations.
//!
//! All kernels work on flat row-major slices. Convolutions are stride-1
//! cross-correlations with zero padding of `(k - 1) / 2`, so the output has
//! the input's spatial size.

use crate::tensor::Real;

/// Geometry of a same-size convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
}

impl ConvGeom {
    pub fn pad(&self) -> usize {
        (self.kernel - 1) / 2
    }

    pub fn input_len(&self) -> usize {
        self.batch * self.cin * self.height * self.width
    }

    pub fn output_len(&self) -> usize {
        self.batch * self.cout * self.height * self.width
    }

    pub fn weight_len(&self) -> usize {
        self.cout * self.cin * self.kernel * self.kernel
    }

    fn transposed(&self) -> ConvGeom {
        ConvGeom {
            cin: self.cout,
            cout: self.cin,
            ..*self
        }
    }
}

/// Naive direct convolution. Each output is accumulated over
/// `(ci, ky, kx)` in ascending order starting from zero, with padded taps
/// contributing `w * 0`, and the bias is added last.
pub fn conv2d_reference<T: Real>(g: ConvGeom, input: &[T], weight: &[T], bias: &[T]) -> Vec<T> {
    let ConvGeom {
        batch,
        cin,
        cout,
        height: h,
        width: w,
        kernel: k,
    } = g;
    let pad = g.pad() as isize;
    let mut out = vec![T::zero(); g.output_len()];
    for b in 0..batch {
        for co in 0..cout {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = T::zero();
                    for ci in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let sy = y as isize + ky as isize - pad;
                                let sx = x as isize + kx as isize - pad;
                                let v =
                                    if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w
                                    {
                                        input[((b * cin + ci) * h + sy as usize) * w + sx as usize]
                                    } else {
                                        T::zero()
                                    };
                                acc = acc + weight[((co * cin + ci) * k + ky) * k + kx] * v;
                            }
                        }
                    }
                    out[((b * cout + co) * h + y) * w + x] = acc + bias[co];
                }
            }
        }
    }
    out
}

const CO_BLOCK: usize = 8;
const X_LANES: usize = 8;

/// Register-blocked convolution. Produces results bit-identical to
/// [`conv2d_reference`]: every output element sees the same sequence of
/// multiply and add operations, only the loop nest differs.
pub fn conv2d_forward<T: Real>(g: ConvGeom, input: &[T], weight: &[T], bias: &[T]) -> Vec<T> {
    let ConvGeom {
        batch,
        cin,
        cout,
        height: h,
        width: w,
        kernel: k,
    } = g;
    debug_assert_eq!(input.len(), g.input_len());
    debug_assert_eq!(weight.len(), g.weight_len());
    let taps = k * k;
    let pad = g.pad();
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);

    // weights regrouped as [ci][tap][co], co padded to a multiple of the block
    let cout_padded = cout.div_ceil(CO_BLOCK) * CO_BLOCK;
    let mut wt = vec![T::zero(); cin * taps * cout_padded];
    for co in 0..cout {
        for ci in 0..cin {
            for t in 0..taps {
                wt[(ci * taps + t) * cout_padded + co] = weight[(co * cin + ci) * taps + t];
            }
        }
    }

    let plane = ph * pw;
    let mut padded = vec![T::zero(); cin * plane + X_LANES + k];
    let mut out = vec![T::zero(); g.output_len()];

    for b in 0..batch {
        for ci in 0..cin {
            let src = &input[(b * cin + ci) * h * w..][..h * w];
            let dst = &mut padded[ci * plane..][..plane];
            for y in 0..h {
                dst[(y + pad) * pw + pad..][..w].copy_from_slice(&src[y * w..][..w]);
            }
        }

        for co0 in (0..cout).step_by(CO_BLOCK) {
            let cb = CO_BLOCK.min(cout - co0);
            for y in 0..h {
                for x0 in (0..w).step_by(X_LANES) {
                    let xl = X_LANES.min(w - x0);
                    let mut acc = [[T::zero(); X_LANES]; CO_BLOCK];
                    for ci in 0..cin {
                        for ky in 0..k {
                            let row = &padded[ci * plane + (y + ky) * pw + x0..];
                            for kx in 0..k {
                                let mut src = [T::zero(); X_LANES];
                                src.copy_from_slice(&row[kx..kx + X_LANES]);
                                let wrow = &wt[(ci * taps + ky * k + kx) * cout_padded + co0..]
                                    [..CO_BLOCK];
                                for c in 0..CO_BLOCK {
                                    let wv = wrow[c];
                                    for l in 0..X_LANES {
                                        acc[c][l] = acc[c][l] + wv * src[l];
                                    }
                                }
                            }
                        }
                    }
                    for (c, lanes) in acc.iter().enumerate().take(cb) {
                        let co = co0 + c;
                        let o = &mut out[((b * cout + co) * h + y) * w + x0..][..xl];
                        for (dst, &v) in o.iter_mut().zip(lanes.iter()) {
                            *dst = v + bias[co];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradient of a same-size convolution with respect to its input: a
/// convolution of `grad_out` with the spatially flipped, channel-transposed
/// kernel.
pub fn conv2d_backward_input<T: Real>(g: ConvGeom, grad_out: &[T], weight: &[T]) -> Vec<T> {
    let k = g.kernel;
    let taps = k * k;
    let mut flipped = vec![T::zero(); g.weight_len()];
    for co in 0..g.cout {
        for ci in 0..g.cin {
            for ky in 0..k {
                for kx in 0..k {
                    flipped[((ci * g.cout + co) * k + (k - 1 - ky)) * k + (k - 1 - kx)] =
                        weight[(co * g.cin + ci) * taps + ky * k + kx];
                }
            }
        }
    }
    let zero_bias = vec![T::zero(); g.cin];
    conv2d_forward(g.transposed(), grad_out, &flipped, &zero_bias)
}

/// Gradients with respect to weights and bias.
pub fn conv2d_backward_params<T: Real>(
    g: ConvGeom,
    input: &[T],
    grad_out: &[T],
) -> (Vec<T>, Vec<T>) {
    let ConvGeom {
        batch,
        cin,
        cout,
        height: h,
        width: w,
        kernel: k,
    } = g;
    let taps = k * k;
    let pad = g.pad() as isize;
    let hw = h * w;
    let mut gw = vec![T::zero(); g.weight_len()];
    let mut gb = vec![T::zero(); cout];
    let mut col = vec![T::zero(); hw];

    for b in 0..batch {
        for co in 0..cout {
            gb[co] = gb[co] + lane_sum(&grad_out[(b * cout + co) * hw..][..hw]);
        }
        for ci in 0..cin {
            let src = &input[(b * cin + ci) * hw..][..hw];
            for ky in 0..k {
                for kx in 0..k {
                    // col[y][x] = input[y + ky - pad][x + kx - pad], zero outside
                    let (dy, dx) = (ky as isize - pad, kx as isize - pad);
                    for y in 0..h {
                        let row = &mut col[y * w..][..w];
                        let sy = y as isize + dy;
                        if sy < 0 || sy >= h as isize {
                            row.fill(T::zero());
                            continue;
                        }
                        let srow = &src[sy as usize * w..][..w];
                        for (x, dst) in row.iter_mut().enumerate() {
                            let sx = x as isize + dx;
                            *dst = if sx >= 0 && sx < w as isize {
                                srow[sx as usize]
                            } else {
                                T::zero()
                            };
                        }
                    }
                    let t = ky * k + kx;
                    let mut co = 0;
                    while co + 4 <= cout {
                        let d = dot4(
                            [
                                &grad_out[(b * cout + co) * hw..][..hw],
                                &grad_out[(b * cout + co + 1) * hw..][..hw],
                                &grad_out[(b * cout + co + 2) * hw..][..hw],
                                &grad_out[(b * cout + co + 3) * hw..][..hw],
                            ],
                            &col,
                        );
                        for (j, v) in d.into_iter().enumerate() {
                            let idx = ((co + j) * cin + ci) * taps + t;
                            gw[idx] = gw[idx] + v;
                        }
                        co += 4;
                    }
                    while co < cout {
                        let v = dot(&grad_out[(b * cout + co) * hw..][..hw], &col);
                        let idx = (co * cin + ci) * taps + t;
                        gw[idx] = gw[idx] + v;
                        co += 1;
                    }
                }
            }
        }
    }
    (gw, gb)
}

fn lane_sum<T: Real>(a: &[T]) -> T {
    let mut acc = [T::zero(); X_LANES];
    let mut chunks = a.chunks_exact(X_LANES);
    for c in &mut chunks {
        for l in 0..X_LANES {
            acc[l] = acc[l] + c[l];
        }
    }
    let tail: T = chunks.remainder().iter().copied().sum();
    acc.iter().copied().sum::<T>() + tail
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); X_LANES];
    let mut ca = a.chunks_exact(X_LANES);
    let mut cb = b.chunks_exact(X_LANES);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..X_LANES {
            acc[l] = acc[l] + x[l] * y[l];
        }
    }
    let tail: T = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(&x, &y)| x * y)
        .sum();
    acc.iter().copied().sum::<T>() + tail
}

fn dot4<T: Real>(rows: [&[T]; 4], col: &[T]) -> [T; 4] {
    let n = col.len();
    let full = n / X_LANES * X_LANES;
    let mut acc = [[T::zero(); X_LANES]; 4];
    let mut i = 0;
    while i < full {
        let c = &col[i..i + X_LANES];
        for (r, row) in rows.iter().enumerate() {
            let x = &row[i..i + X_LANES];
            for l in 0..X_LANES {
                acc[r][l] = acc[r][l] + x[l] * c[l];
            }
        }
        i += X_LANES;
    }
    let mut out = [T::zero(); 4];
    for r in 0..4 {
        let tail: T = (full..n).map(|j| rows[r][j] * col[j]).sum();
        out[r] = acc[r].iter().copied().sum::<T>() + tail;
    }
    out
}

/// Separable "valid" filtering of independent `h x w` planes with a
/// normalized 1-D kernel applied along rows, then columns. Output planes are
/// `(h - k + 1) x (w - k + 1)`.
pub fn separable_filter_valid<T: Real>(
    input: &[T],
    planes: usize,
    h: usize,
    w: usize,
    kernel: &[T],
) -> Vec<T> {
    let k = kernel.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut out = vec![T::zero(); planes * oh * ow];
    let mut tmp = vec![T::zero(); h * ow];
    for p in 0..planes {
        let src = &input[p * h * w..][..h * w];
        for y in 0..h {
            for x in 0..ow {
                let mut acc = T::zero();
                for (j, &kv) in kernel.iter().enumerate() {
                    acc = acc + kv * src[y * w + x + j];
                }
                tmp[y * ow + x] = acc;
            }
        }
        let dst = &mut out[p * oh * ow..][..oh * ow];
        for y in 0..oh {
            for x in 0..ow {
                let mut acc = T::zero();
                for (i, &kv) in kernel.iter().enumerate() {
                    acc = acc + kv * tmp[(y + i) * ow + x];
                }
                dst[y * ow + x] = acc;
            }
        }
    }
    out
}

pub fn separable_filter_valid_backward<T: Real>(
    grad_out: &[T],
    planes: usize,
    h: usize,
    w: usize,
    kernel: &[T],
) -> Vec<T> {
    let k = kernel.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut grad_in = vec![T::zero(); planes * h * w];
    let mut gtmp = vec![T::zero(); h * ow];
    for p in 0..planes {
        gtmp.fill(T::zero());
        let g = &grad_out[p * oh * ow..][..oh * ow];
        for y in 0..oh {
            for (i, &kv) in kernel.iter().enumerate() {
                for x in 0..ow {
                    let t = &mut gtmp[(y + i) * ow + x];
                    *t = *t + kv * g[y * ow + x];
                }
            }
        }
        let gi = &mut grad_in[p * h * w..][..h * w];
        for y in 0..h {
            for x in 0..ow {
                let gv = gtmp[y * ow + x];
                for (j, &kv) in kernel.iter().enumerate() {
                    let t = &mut gi[y * w + x + j];
                    *t = *t + kv * gv;
                }
            }
        }
    }
    grad_in
}

/// Normalized 1-D Gaussian of odd length `size`.
pub fn gaussian_kernel_1d(size: usize, sigma: f64) -> Vec<f64> {
    let half = (size / 2) as f64;
    let raw: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - half;
            (-(d * d) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}
