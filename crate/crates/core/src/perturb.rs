//! Test-time post-processing: Gaussian blur, JPEG-style quantisation and
//! bilinear resizing. Inputs and outputs are `[3, H, W]` images in `[0, 1]`.

use std::fmt;
use std::str::FromStr;

use crate::error::{invalid, shape_err, Error, Result};
use crate::tensor::Tensor;

fn image_dims(img: &Tensor) -> Result<(usize, usize, usize)> {
    match *img.shape() {
        [c, h, w] => Ok((c, h, w)),
        ref s => shape_err(format!("expected [C,H,W] image, got {s:?}")),
    }
}

/// Mirror index into `0..n` without repeating the edge sample.
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Normalised 1-D Gaussian taps over `-ceil(3 sigma)..=ceil(3 sigma)`.
pub fn gaussian_taps(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-r..=r)
        .map(|x| (-((x * x) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / s).collect()
}

/// Separable Gaussian blur with reflect padding; `sigma == 0` is the identity.
pub fn gaussian_blur(img: &Tensor, sigma: f64) -> Result<Tensor> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return invalid(format!("blur sigma must be a finite non-negative number, got {sigma}"));
    }
    let (c, h, w) = image_dims(img)?;
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    let taps = gaussian_taps(sigma);
    let r = (taps.len() / 2) as isize;
    let src = img.data();
    let mut tmp = vec![0.0; src.len()];
    for ch in 0..c {
        for y in 0..h {
            let row = &src[(ch * h + y) * w..(ch * h + y + 1) * w];
            for x in 0..w {
                tmp[(ch * h + y) * w + x] = taps
                    .iter()
                    .enumerate()
                    .map(|(k, t)| t * row[reflect(x as isize + k as isize - r, w)])
                    .sum();
            }
        }
    }
    let mut out = vec![0.0; src.len()];
    for ch in 0..c {
        let plane = &tmp[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                out[(ch * h + y) * w + x] = taps
                    .iter()
                    .enumerate()
                    .map(|(k, t)| t * plane[reflect(y as isize + k as isize - r, h) * w + x])
                    .sum::<f64>()
                    .clamp(0.0, 1.0);
            }
        }
    }
    Tensor::new(img.shape(), out)
}

const LUMA_BASE: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, 12, 12, 14, 19, 26, 58, 60, 55, 14, 13, 16, 24, 40, 57, 69, 56, 14, 17, 22, 29, 51,
    87, 80, 62, 18, 22, 37, 56, 68, 109, 103, 77, 24, 35, 55, 64, 81, 104, 113, 92, 49, 64, 78, 87, 103, 121, 120, 101,
    72, 92, 95, 98, 112, 100, 103, 99,
];

const CHROMA_BASE: [u16; 64] = [
    17, 18, 24, 47, 99, 99, 99, 99, 18, 21, 26, 66, 99, 99, 99, 99, 24, 26, 56, 99, 99, 99, 99, 99, 47, 66, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99,
];

/// Base table scaled by the libjpeg quality rule, entries clamped to `[1, 255]`.
pub fn quant_table(base: &[u16; 64], quality: u8) -> Result<[f64; 64]> {
    if !(1..=100).contains(&quality) {
        return invalid(format!("JPEG quality must be in 1..=100, got {quality}"));
    }
    let q = u32::from(quality);
    let scale = if q < 50 { 5000 / q } else { 200 - 2 * q };
    let mut out = [0.0; 64];
    for (o, &b) in out.iter_mut().zip(base) {
        *o = ((u32::from(b) * scale + 50) / 100).clamp(1, 255) as f64;
    }
    Ok(out)
}

pub fn luma_table(quality: u8) -> Result<[f64; 64]> {
    quant_table(&LUMA_BASE, quality)
}

pub fn chroma_table(quality: u8) -> Result<[f64; 64]> {
    quant_table(&CHROMA_BASE, quality)
}

/// Orthonormal 8-point DCT-II basis, `basis[k][n]`.
fn dct_basis() -> [[f64; 8]; 8] {
    let mut b = [[0.0; 8]; 8];
    for (k, row) in b.iter_mut().enumerate() {
        let ck = if k == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
        for (n, v) in row.iter_mut().enumerate() {
            *v = ck * ((std::f64::consts::PI * (2 * n + 1) as f64 * k as f64) / 16.0).cos();
        }
    }
    b
}

fn quantize_block(block: &mut [f64; 64], table: &[f64; 64], basis: &[[f64; 8]; 8]) {
    let mut tmp = [0.0; 64];
    // rows then columns
    for y in 0..8 {
        for k in 0..8 {
            tmp[y * 8 + k] = (0..8).map(|n| basis[k][n] * block[y * 8 + n]).sum();
        }
    }
    let mut coef = [0.0; 64];
    for x in 0..8 {
        for k in 0..8 {
            coef[k * 8 + x] = (0..8).map(|n| basis[k][n] * tmp[n * 8 + x]).sum();
        }
    }
    for (c, q) in coef.iter_mut().zip(table) {
        *c = (*c / q).round() * q;
    }
    for x in 0..8 {
        for n in 0..8 {
            tmp[n * 8 + x] = (0..8).map(|k| basis[k][n] * coef[k * 8 + x]).sum();
        }
    }
    for y in 0..8 {
        for n in 0..8 {
            block[y * 8 + n] = (0..8).map(|k| basis[k][n] * tmp[y * 8 + k]).sum();
        }
    }
}

/// JPEG-style lossy round trip: YCbCr, 8x8 DCT, quantise, dequantise, back to RGB.
///
/// Images are edge-replicated to multiples of 8 and cropped back afterwards.
/// No chroma subsampling.
pub fn jpeg_quality(img: &Tensor, quality: u8) -> Result<Tensor> {
    let (c, h, w) = image_dims(img)?;
    if c != 3 {
        return shape_err(format!("JPEG simulation needs 3 channels, got {c}"));
    }
    let tables = [luma_table(quality)?, chroma_table(quality)?, chroma_table(quality)?];
    let (ph, pw) = (h.div_ceil(8) * 8, w.div_ceil(8) * 8);
    let src = img.data();
    let plane = h * w;
    // 0..255 YCbCr planes, level shifted by -128
    let mut ycc = vec![vec![0.0; ph * pw]; 3];
    for y in 0..ph {
        for x in 0..pw {
            let i = y.min(h - 1) * w + x.min(w - 1);
            let (r, g, b) = (src[i] * 255.0, src[plane + i] * 255.0, src[2 * plane + i] * 255.0);
            ycc[0][y * pw + x] = 0.299 * r + 0.587 * g + 0.114 * b - 128.0;
            ycc[1][y * pw + x] = -0.168_736 * r - 0.331_264 * g + 0.5 * b;
            ycc[2][y * pw + x] = 0.5 * r - 0.418_688 * g - 0.081_312 * b;
        }
    }
    let basis = dct_basis();
    for (chan, table) in ycc.iter_mut().zip(&tables) {
        for by in (0..ph).step_by(8) {
            for bx in (0..pw).step_by(8) {
                let mut block = [0.0; 64];
                for y in 0..8 {
                    block[y * 8..y * 8 + 8].copy_from_slice(&chan[(by + y) * pw + bx..(by + y) * pw + bx + 8]);
                }
                quantize_block(&mut block, table, &basis);
                for y in 0..8 {
                    chan[(by + y) * pw + bx..(by + y) * pw + bx + 8].copy_from_slice(&block[y * 8..y * 8 + 8]);
                }
            }
        }
    }
    let mut out = vec![0.0; 3 * plane];
    for y in 0..h {
        for x in 0..w {
            let j = y * pw + x;
            let (yy, cb, cr) = (ycc[0][j] + 128.0, ycc[1][j], ycc[2][j]);
            let r = yy + 1.402 * cr;
            let g = yy - 0.344_136 * cb - 0.714_136 * cr;
            let b = yy + 1.772 * cb;
            let i = y * w + x;
            out[i] = (r / 255.0).clamp(0.0, 1.0);
            out[plane + i] = (g / 255.0).clamp(0.0, 1.0);
            out[2 * plane + i] = (b / 255.0).clamp(0.0, 1.0);
        }
    }
    Tensor::new(img.shape(), out)
}

/// Bilinear resampling to `out_h x out_w` with pixel-centre alignment
/// (`align_corners = false`).
pub fn bilinear_resize(img: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = image_dims(img)?;
    if out_h == 0 || out_w == 0 {
        return invalid("target size must be positive");
    }
    let coords = |o: usize, n_out: usize, n_in: usize| -> Vec<(usize, usize, f64)> {
        let scale = n_in as f64 / n_out as f64;
        (0..o)
            .map(|i| {
                let s = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
                let lo = s.floor() as usize;
                let hi = (lo + 1).min(n_in - 1);
                (lo, hi, s - lo as f64)
            })
            .collect()
    };
    let ys = coords(out_h, out_h, h);
    let xs = coords(out_w, out_w, w);
    let src = img.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let p = &src[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = p[y0 * w + x0] * (1.0 - fx) + p[y0 * w + x1] * fx;
                let bot = p[y1 * w + x0] * (1.0 - fx) + p[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Tensor::new(&[c, out_h, out_w], out)
}

/// Smallest side a downscaled image may have.
pub const MIN_RESIZED: usize = 8;

/// Downscale by `factor` and, with `restore`, scale back to the original grid.
pub fn resize_bilinear(img: &Tensor, factor: f64, restore: bool) -> Result<Tensor> {
    let (_, h, w) = image_dims(img)?;
    if !(factor > 0.0 && factor <= 1.0) {
        return invalid(format!("resize factor must lie in (0, 1], got {factor}"));
    }
    let (nh, nw) = ((h as f64 * factor).round() as usize, (w as f64 * factor).round() as usize);
    if nh < MIN_RESIZED || nw < MIN_RESIZED {
        return Err(Error::InvalidArgument(format!(
            "resizing {h}x{w} by {factor} gives {nh}x{nw}, below {MIN_RESIZED}x{MIN_RESIZED}"
        )));
    }
    let small = bilinear_resize(img, nh, nw)?;
    if restore {
        bilinear_resize(&small, h, w)
    } else {
        Ok(small)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransformKind {
    Blur,
    Jpeg,
    Resize,
}

impl TransformKind {
    pub const NAMES: [&'static str; 3] = ["blur", "jpeg", "resize"];

    pub fn name(self) -> &'static str {
        match self {
            TransformKind::Blur => "blur",
            TransformKind::Jpeg => "jpeg",
            TransformKind::Resize => "resize",
        }
    }

    /// Applies this transform with grid value `param` (sigma, quality or factor).
    pub fn apply(self, img: &Tensor, param: f64) -> Result<Tensor> {
        match self {
            TransformKind::Blur => gaussian_blur(img, param),
            TransformKind::Jpeg => {
                if param.fract() != 0.0 || !(1.0..=100.0).contains(&param) {
                    return invalid(format!("JPEG quality must be an integer in 1..=100, got {param}"));
                }
                jpeg_quality(img, param as u8)
            }
            TransformKind::Resize => resize_bilinear(img, param, true),
        }
    }
}

impl fmt::Display for TransformKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TransformKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blur" => Ok(TransformKind::Blur),
            "jpeg" => Ok(TransformKind::Jpeg),
            "resize" => Ok(TransformKind::Resize),
            other => invalid(format!(
                "unknown transform '{other}', expected one of {}",
                TransformKind::NAMES.join(", ")
            )),
        }
    }
}
