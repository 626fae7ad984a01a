//! Forward and backward kernels for the primitive layers.
//!
//! Image tensors are batched `[B, C, H, W]`. Every reduction runs in a fixed
//! order so results are bit-identical regardless of thread scheduling.

use rayon::prelude::*;

use crate::error::{invalid, shape_err, Result};
use crate::tensor::{axpy, dot, Tensor};

/// Below this many multiply-adds a kernel stays on the calling thread.
const PAR_WORK: usize = 1 << 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
}

impl Window {
    pub fn square(kernel: usize, stride: usize) -> Self {
        Window {
            kh: kernel,
            kw: kernel,
            sh: stride,
            sw: stride,
        }
    }

    /// Output extent of a valid (unpadded) window sweep.
    pub fn out_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.sh == 0 || self.sw == 0 {
            return invalid("stride must be at least 1");
        }
        if self.kh == 0 || self.kw == 0 {
            return invalid("window must be at least 1x1");
        }
        if self.kh > h || self.kw > w {
            return shape_err(format!(
                "window {}x{} larger than input {h}x{w}",
                self.kh, self.kw
            ));
        }
        Ok(((h - self.kh) / self.sh + 1, (w - self.kw) / self.sw + 1))
    }
}

fn dims4(t: &Tensor, what: &str) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [b, c, h, w] => Ok((b, c, h, w)),
        _ => shape_err(format!("{what} must be [B,C,H,W], got {:?}", t.shape())),
    }
}

pub fn conv2d_forward(x: &Tensor, k: &Tensor, bias: &Tensor, stride: (usize, usize)) -> Result<Tensor> {
    let (nb, c, h, w) = dims4(x, "conv input")?;
    let (nk, kc, kh, kw) = dims4(k, "conv kernels")?;
    if kc != c {
        return shape_err(format!("input has {c} channels but kernels expect {kc}"));
    }
    if bias.shape() != [nk] {
        return shape_err(format!("bias shape {:?}, expected [{nk}]", bias.shape()));
    }
    let win = Window { kh, kw, sh: stride.0, sw: stride.1 };
    let (oh, ow) = win.out_dims(h, w)?;
    let plane = oh * ow;
    let mut out = vec![0.0; nb * nk * plane];
    let xd = x.data();
    let kd = k.data();
    let bd = bias.data();
    let job = |(idx, dst): (usize, &mut [f64])| {
        let (b, kk) = (idx / nk, idx % nk);
        dst.fill(bd[kk]);
        for ci in 0..c {
            let xp = &xd[(b * c + ci) * h * w..(b * c + ci + 1) * h * w];
            for i in 0..kh {
                for j in 0..kw {
                    let wv = kd[((kk * c + ci) * kh + i) * kw + j];
                    for oy in 0..oh {
                        let row = &xp[(oy * win.sh + i) * w..(oy * win.sh + i + 1) * w];
                        let orow = &mut dst[oy * ow..(oy + 1) * ow];
                        if win.sw == 1 {
                            axpy(wv, &row[j..j + ow], orow);
                        } else {
                            for (ox, o) in orow.iter_mut().enumerate() {
                                *o += wv * row[ox * win.sw + j];
                            }
                        }
                    }
                }
            }
        }
    };
    if nb * nk * plane * c * kh * kw >= PAR_WORK {
        out.par_chunks_mut(plane).enumerate().for_each(job);
    } else {
        out.chunks_mut(plane).enumerate().for_each(job);
    }
    Tensor::new(&[nb, nk, oh, ow], out)
}

/// Gradients of a convolution with respect to input, kernels and bias.
pub fn conv2d_backward(
    x: &Tensor,
    k: &Tensor,
    gy: &Tensor,
    stride: (usize, usize),
) -> Result<(Tensor, Tensor, Tensor)> {
    let (nb, c, h, w) = dims4(x, "conv input")?;
    let (nk, _, kh, kw) = dims4(k, "conv kernels")?;
    let (_, _, oh, ow) = dims4(gy, "conv output grad")?;
    let (sh, sw) = stride;
    let xd = x.data();
    let kd = k.data();
    let gd = gy.data();
    let plane = oh * ow;
    let big = nb * nk * plane * c * kh * kw >= PAR_WORK;

    // d/dx: scatter each output gradient back through its window.
    let mut gx = vec![0.0; nb * c * h * w];
    let gx_job = |(idx, dst): (usize, &mut [f64])| {
        let (b, ci) = (idx / c, idx % c);
        for kk in 0..nk {
            let gp = &gd[(b * nk + kk) * plane..(b * nk + kk + 1) * plane];
            for i in 0..kh {
                for j in 0..kw {
                    let wv = kd[((kk * c + ci) * kh + i) * kw + j];
                    for oy in 0..oh {
                        let grow = &gp[oy * ow..(oy + 1) * ow];
                        let xrow = &mut dst[(oy * sh + i) * w..(oy * sh + i + 1) * w];
                        if sw == 1 {
                            axpy(wv, grow, &mut xrow[j..j + ow]);
                        } else {
                            for (ox, &g) in grow.iter().enumerate() {
                                xrow[ox * sw + j] += wv * g;
                            }
                        }
                    }
                }
            }
        }
    };
    if big {
        gx.par_chunks_mut(h * w).enumerate().for_each(gx_job);
    } else {
        gx.chunks_mut(h * w).enumerate().for_each(gx_job);
    }

    // d/dk: correlate input windows with output gradients, batch summed in order.
    let ksz = c * kh * kw;
    let mut gk = vec![0.0; nk * ksz];
    let gk_job = |(kk, dst): (usize, &mut [f64])| {
        for b in 0..nb {
            let gp = &gd[(b * nk + kk) * plane..(b * nk + kk + 1) * plane];
            for ci in 0..c {
                let xp = &xd[(b * c + ci) * h * w..(b * c + ci + 1) * h * w];
                for i in 0..kh {
                    for j in 0..kw {
                        let mut s = 0.0;
                        for oy in 0..oh {
                            let grow = &gp[oy * ow..(oy + 1) * ow];
                            let row = &xp[(oy * sh + i) * w..(oy * sh + i + 1) * w];
                            if sw == 1 {
                                s += dot(grow, &row[j..j + ow]);
                            } else {
                                for (ox, &g) in grow.iter().enumerate() {
                                    s += g * row[ox * sw + j];
                                }
                            }
                        }
                        dst[(ci * kh + i) * kw + j] += s;
                    }
                }
            }
        }
    };
    if big {
        gk.par_chunks_mut(ksz).enumerate().for_each(gk_job);
    } else {
        gk.chunks_mut(ksz).enumerate().for_each(gk_job);
    }

    let mut gb = vec![0.0; nk];
    for b in 0..nb {
        for (kk, g) in gb.iter_mut().enumerate() {
            *g += gd[(b * nk + kk) * plane..(b * nk + kk + 1) * plane]
                .iter()
                .sum::<f64>();
        }
    }

    Ok((
        Tensor::new(x.shape(), gx)?,
        Tensor::new(k.shape(), gk)?,
        Tensor::new(&[nk], gb)?,
    ))
}

pub fn mean_pool_forward(x: &Tensor, win: Window) -> Result<Tensor> {
    let (nb, c, h, w) = dims4(x, "pool input")?;
    let (oh, ow) = win.out_dims(h, w)?;
    let area = (win.kh * win.kw) as f64;
    let xd = x.data();
    let mut out = vec![0.0; nb * c * oh * ow];
    out.chunks_mut(oh * ow).enumerate().for_each(|(p, dst)| {
        let xp = &xd[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = 0.0;
                for i in 0..win.kh {
                    let row = &xp[(oy * win.sh + i) * w + ox * win.sw..];
                    s += row[..win.kw].iter().sum::<f64>();
                }
                dst[oy * ow + ox] = s / area;
            }
        }
    });
    Tensor::new(&[nb, c, oh, ow], out)
}

pub fn mean_pool_backward(x_shape: &[usize], gy: &Tensor, win: Window) -> Result<Tensor> {
    let (h, w) = (x_shape[2], x_shape[3]);
    let (_, _, oh, ow) = dims4(gy, "pool output grad")?;
    let area = (win.kh * win.kw) as f64;
    let gd = gy.data();
    let mut gx = vec![0.0; x_shape.iter().product()];
    gx.chunks_mut(h * w).enumerate().for_each(|(p, dst)| {
        let gp = &gd[p * oh * ow..(p + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let g = gp[oy * ow + ox] / area;
                for i in 0..win.kh {
                    let start = (oy * win.sh + i) * w + ox * win.sw;
                    for v in &mut dst[start..start + win.kw] {
                        *v += g;
                    }
                }
            }
        }
    });
    Tensor::new(x_shape, gx)
}

/// Numerically stable logistic function.
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Batch-norm channel layout: `[B, C, rest...]` viewed as (B, C, S).
pub(crate) fn bn_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return shape_err(format!("batch norm needs [B,C,...], got {shape:?}"));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

/// Per-channel batch mean and biased variance.
pub(crate) fn channel_moments(x: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let (nb, c, s) = bn_dims(x.shape())?;
    let xd = x.data();
    let n = (nb * s) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut acc = 0.0;
        for b in 0..nb {
            acc += xd[(b * c + ch) * s..(b * c + ch + 1) * s].iter().sum::<f64>();
        }
        let m = acc / n;
        let mut sq = 0.0;
        for b in 0..nb {
            sq += xd[(b * c + ch) * s..(b * c + ch + 1) * s]
                .iter()
                .map(|v| (v - m) * (v - m))
                .sum::<f64>();
        }
        mean[ch] = m;
        var[ch] = sq / n;
    }
    Ok((mean, var))
}

/// `(x - mean_c) * inv_std_c` for every element.
pub(crate) fn bn_normalize(x: &Tensor, mean: &[f64], inv_std: &[f64]) -> Result<Tensor> {
    let (_, c, s) = bn_dims(x.shape())?;
    let mut out = x.clone();
    for (idx, chunk) in out.data_mut().chunks_mut(s).enumerate() {
        let ch = idx % c;
        for v in chunk {
            *v = (*v - mean[ch]) * inv_std[ch];
        }
    }
    Ok(out)
}

pub(crate) fn bn_affine(xhat: &Tensor, gamma: &[f64], beta: &[f64]) -> Result<Tensor> {
    let (_, c, s) = bn_dims(xhat.shape())?;
    let mut out = xhat.clone();
    for (idx, chunk) in out.data_mut().chunks_mut(s).enumerate() {
        let ch = idx % c;
        for v in chunk {
            *v = gamma[ch] * *v + beta[ch];
        }
    }
    Ok(out)
}

/// Batched affine map: `x` is `[B, d_in]` (or `[d_in]`), `w` is `[d_out, d_in]`.
pub fn linear_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (dout, din) = match *w.shape() {
        [o, i] => (o, i),
        _ => return shape_err(format!("weights must be 2-D, got {:?}", w.shape())),
    };
    if b.shape() != [dout] {
        return shape_err(format!("bias shape {:?}, expected [{dout}]", b.shape()));
    }
    let (nb, vector) = match *x.shape() {
        [i] if i == din => (1, true),
        [n, i] if i == din => (n, false),
        _ => {
            return shape_err(format!(
                "input {:?} does not match weight input dim {din}",
                x.shape()
            ))
        }
    };
    let xd = x.data();
    let wd = w.data();
    let bd = b.data();
    let mut out = vec![0.0; nb * dout];
    let job = |(r, dst): (usize, &mut [f64])| {
        let xr = &xd[r * din..(r + 1) * din];
        for (o, v) in dst.iter_mut().enumerate() {
            *v = dot(&wd[o * din..(o + 1) * din], xr) + bd[o];
        }
    };
    if nb * dout * din >= PAR_WORK {
        out.par_chunks_mut(dout).enumerate().for_each(job);
    } else {
        out.chunks_mut(dout).enumerate().for_each(job);
    }
    if vector {
        Tensor::new(&[dout], out)
    } else {
        Tensor::new(&[nb, dout], out)
    }
}

pub fn linear_backward(x: &Tensor, w: &Tensor, gy: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (dout, din) = (w.shape()[0], w.shape()[1]);
    let nb = x.len() / din;
    let xd = x.data();
    let wd = w.data();
    let gd = gy.data();
    let big = nb * dout * din >= PAR_WORK;

    let mut gx = vec![0.0; nb * din];
    let gx_job = |(r, dst): (usize, &mut [f64])| {
        for o in 0..dout {
            axpy(gd[r * dout + o], &wd[o * din..(o + 1) * din], dst);
        }
    };
    let mut gw = vec![0.0; dout * din];
    let gw_job = |(o, dst): (usize, &mut [f64])| {
        for r in 0..nb {
            axpy(gd[r * dout + o], &xd[r * din..(r + 1) * din], dst);
        }
    };
    if big {
        gx.par_chunks_mut(din).enumerate().for_each(gx_job);
        gw.par_chunks_mut(din).enumerate().for_each(gw_job);
    } else {
        gx.chunks_mut(din).enumerate().for_each(gx_job);
        gw.chunks_mut(din).enumerate().for_each(gw_job);
    }
    let mut gb = vec![0.0; dout];
    for r in 0..nb {
        for (o, g) in gb.iter_mut().enumerate() {
            *g += gd[r * dout + o];
        }
    }
    Ok((
        Tensor::new(x.shape(), gx)?,
        Tensor::new(w.shape(), gw)?,
        Tensor::new(&[dout], gb)?,
    ))
}
