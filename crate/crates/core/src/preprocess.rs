//! Image decoding, the crop/normalise input pipeline and dataset splits.

use std::fs;
use std::io::{Cursor, ErrorKind};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, shape_err, Error, Result};
use crate::tensor::Tensor;

/// Upper bound on decoded pixels; rejects absurd headers before allocating.
pub const MAX_PIXELS: usize = 1 << 26;

/// Decodes PNG (8-bit RGB) or binary PPM (P6) into `[3, H, W]` with values in `[0, 1]`.
pub fn decode_image(bytes: &[u8]) -> Result<Tensor> {
    if bytes.starts_with(b"\x89PNG\r\n\x1a\n") {
        decode_png(bytes)
    } else if bytes.starts_with(b"P6") {
        decode_ppm(bytes)
    } else if bytes.starts_with(b"P5") {
        Err(Error::ChannelCount(1))
    } else {
        Err(Error::UnsupportedFormat)
    }
}

fn planar_from_interleaved(rgb: &[u8], h: usize, w: usize) -> Result<Tensor> {
    let plane = h * w;
    let mut data = vec![0.0; 3 * plane];
    for (i, px) in rgb.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + i] = f64::from(px[c]) / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data)
}

/// Reads one whitespace-delimited header token, skipping `#` comments.
fn ppm_token(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    loop {
        match bytes.get(*pos) {
            None => return Err(Error::Truncated("PPM header ends early".into())),
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(b'#') => {
                while let Some(&b) = bytes.get(*pos) {
                    *pos += 1;
                    if b == b'\n' {
                        break;
                    }
                }
            }
            Some(_) => break,
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(u8::is_ascii_digit) {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::MalformedImage("expected a number in PPM header".into()));
    }
    if *pos == bytes.len() {
        return Err(Error::Truncated("PPM header ends early".into()));
    }
    std::str::from_utf8(&bytes[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::MalformedImage("PPM header number out of range".into()))
}

fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    let mut pos = 2;
    let w = ppm_token(bytes, &mut pos)?;
    let h = ppm_token(bytes, &mut pos)?;
    let maxval = ppm_token(bytes, &mut pos)?;
    if w == 0 || h == 0 {
        return Err(Error::MalformedImage("zero image dimension".into()));
    }
    if maxval != 255 {
        return Err(Error::MalformedImage(format!("only 8-bit PPM (maxval 255) is supported, got {maxval}")));
    }
    if !bytes[pos].is_ascii_whitespace() {
        return Err(Error::MalformedImage("missing separator after PPM header".into()));
    }
    pos += 1;
    let pixels = w.checked_mul(h).filter(|&n| n <= MAX_PIXELS).ok_or_else(|| {
        Error::MalformedImage(format!("image {w}x{h} exceeds the pixel limit"))
    })?;
    let need = 3 * pixels;
    let body = &bytes[pos..];
    if body.len() < need {
        return Err(Error::Truncated(format!("PPM body has {} of {need} bytes", body.len())));
    }
    planar_from_interleaved(&body[..need], h, w)
}

fn png_error(e: png::DecodingError) -> Error {
    match e {
        png::DecodingError::IoError(io) if io.kind() == ErrorKind::UnexpectedEof => {
            Error::Truncated("PNG stream ends early".into())
        }
        png::DecodingError::IoError(io) => Error::Truncated(io.to_string()),
        other => Error::MalformedImage(other.to_string()),
    }
}

fn decode_png(bytes: &[u8]) -> Result<Tensor> {
    let limits = png::Limits { bytes: 3 * MAX_PIXELS };
    let decoder = png::Decoder::new_with_limits(Cursor::new(bytes), limits);
    let mut reader = decoder.read_info().map_err(png_error)?;
    let info = reader.info();
    let (w, h) = (info.width as usize, info.height as usize);
    if w * h > MAX_PIXELS {
        return Err(Error::MalformedImage(format!("image {w}x{h} exceeds the pixel limit")));
    }
    match info.color_type {
        png::ColorType::Rgb => {}
        png::ColorType::Grayscale => return Err(Error::ChannelCount(1)),
        png::ColorType::GrayscaleAlpha => return Err(Error::ChannelCount(2)),
        png::ColorType::Rgba => return Err(Error::ChannelCount(4)),
        png::ColorType::Indexed => return Err(Error::MalformedImage("palette PNG is not supported".into())),
    }
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::MalformedImage(format!("only 8-bit PNG is supported, got {:?}", info.bit_depth)));
    }
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::MalformedImage("PNG output size overflows".into()))?;
    let mut buf = vec![0u8; size];
    let frame = reader.next_frame(&mut buf).map_err(png_error)?;
    let line = frame.line_size;
    let mut rgb = Vec::with_capacity(3 * w * h);
    for row in buf.chunks(line).take(h) {
        rgb.extend_from_slice(&row[..3 * w]);
    }
    planar_from_interleaved(&rgb, h, w)
}

fn to_bytes(img: &Tensor) -> Result<(usize, usize, Vec<u8>)> {
    let (h, w) = match *img.shape() {
        [3, h, w] => (h, w),
        ref s => return shape_err(format!("expected [3,H,W] image, got {s:?}")),
    };
    let plane = h * w;
    let d = img.data();
    let mut out = Vec::with_capacity(3 * plane);
    for i in 0..plane {
        for c in 0..3 {
            out.push((d[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok((h, w, out))
}

/// Binary PPM (P6) encoding, values quantised to 8 bits.
pub fn encode_ppm(img: &Tensor) -> Result<Vec<u8>> {
    let (h, w, body) = to_bytes(img)?;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(&body);
    Ok(out)
}

/// 8-bit RGB PNG encoding.
pub fn encode_png(img: &Tensor) -> Result<Vec<u8>> {
    let (h, w, body) = to_bytes(img)?;
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::MalformedImage(e.to_string()))?;
        writer
            .write_image_data(&body)
            .map_err(|e| Error::MalformedImage(e.to_string()))?;
    }
    Ok(out)
}

/// Centered `size x size` window; the offset rounds down.
pub fn center_crop(img: &Tensor, size: usize) -> Result<Tensor> {
    let (c, h, w) = match *img.shape() {
        [c, h, w] => (c, h, w),
        ref s => return shape_err(format!("expected [C,H,W] image, got {s:?}")),
    };
    if h < size || w < size || size == 0 {
        return shape_err(format!("cannot crop {size}x{size} from {h}x{w}"));
    }
    let (top, left) = ((h - size) / 2, (w - size) / 2);
    let d = img.data();
    let mut out = Vec::with_capacity(c * size * size);
    for ch in 0..c {
        for y in top..top + size {
            let row = (ch * h + y) * w;
            out.extend_from_slice(&d[row + left..row + left + size]);
        }
    }
    Tensor::new(&[c, size, size], out)
}

/// Per-channel mean and standard deviation of the training images.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl NormStats {
    pub fn identity() -> Self {
        NormStats { mean: [0.0; 3], std: [1.0; 3] }
    }

    /// Population statistics pooled over every pixel of every image, merged
    /// image by image with the pairwise update of Chan et al.
    pub fn from_images<'a>(images: impl IntoIterator<Item = &'a Tensor>) -> Result<Self> {
        let mut count = 0.0f64;
        let mut mean = [0.0f64; 3];
        let mut m2 = [0.0f64; 3];
        for img in images {
            if img.ndim() != 3 || img.shape()[0] != 3 {
                return shape_err(format!("expected [3,H,W] image, got {:?}", img.shape()));
            }
            let plane = img.shape()[1] * img.shape()[2];
            let nb = plane as f64;
            for c in 0..3 {
                let px = &img.data()[c * plane..(c + 1) * plane];
                let mb = px.iter().sum::<f64>() / nb;
                let m2b: f64 = px.iter().map(|v| (v - mb) * (v - mb)).sum();
                let n = count + nb;
                let delta = mb - mean[c];
                mean[c] += delta * nb / n;
                m2[c] += m2b + delta * delta * count * nb / n;
            }
            count += nb;
        }
        if count == 0.0 {
            return Err(Error::EmptyData("no images for normalisation statistics".into()));
        }
        Ok(NormStats { mean, std: m2.map(|v| (v / count).sqrt()) })
    }
}

/// `(x - mean_c) / std_c` per channel.
pub fn rgb_normalize(img: &Tensor, stats: &NormStats) -> Result<Tensor> {
    if stats.std.iter().any(|&s| !(s > 0.0)) {
        return invalid(format!("channel std must be positive, got {:?}", stats.std));
    }
    per_channel(img, |c, v| (v - stats.mean[c]) / stats.std[c])
}

pub fn rgb_denormalize(img: &Tensor, stats: &NormStats) -> Result<Tensor> {
    per_channel(img, |c, v| v * stats.std[c] + stats.mean[c])
}

fn per_channel(img: &Tensor, f: impl Fn(usize, f64) -> f64) -> Result<Tensor> {
    if img.ndim() != 3 || img.shape()[0] != 3 {
        return shape_err(format!("expected [3,H,W] image, got {:?}", img.shape()));
    }
    let plane = img.shape()[1] * img.shape()[2];
    let mut out = img.clone();
    for (c, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        for v in chunk {
            *v = f(c, *v);
        }
    }
    Ok(out)
}

/// Crop then normalise: the full input pipeline for one decoded image.
pub fn prepare(img: &Tensor, size: usize, stats: &NormStats) -> Result<Tensor> {
    rgb_normalize(&center_crop(img, size)?, stats)
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Real,
    /// Named anomaly source (one generator or synthesizer).
    Anomalous(String),
}

impl Label {
    pub fn is_real(&self) -> bool {
        matches!(self, Label::Real)
    }
}

#[derive(Debug, Clone)]
pub enum ImageSource {
    File(PathBuf),
    Memory(Tensor),
}

#[derive(Debug, Clone)]
pub struct ImageRecord {
    pub id: String,
    pub label: Label,
    pub source: ImageSource,
}

impl ImageRecord {
    pub fn in_memory(id: impl Into<String>, label: Label, pixels: Tensor) -> Self {
        ImageRecord { id: id.into(), label, source: ImageSource::Memory(pixels) }
    }

    /// Decoded `[3,H,W]` pixels.
    pub fn pixels(&self) -> Result<Tensor> {
        match &self.source {
            ImageSource::Memory(t) => Ok(t.clone()),
            ImageSource::File(p) => decode_image(&fs::read(p)?),
        }
    }
}

/// Index lists into an image pool.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub fraction: f64,
    pub seed: u64,
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

impl DatasetSplit {
    /// Every index in `part` that points at a real image.
    pub fn reals<'a>(pool: &'a [ImageRecord], part: &'a [usize]) -> impl Iterator<Item = usize> + 'a {
        part.iter().copied().filter(|&i| pool[i].label.is_real())
    }

    pub fn check_one_class(&self, pool: &[ImageRecord]) -> Result<()> {
        match self.train.iter().find(|&&i| !pool[i].label.is_real()) {
            Some(&i) => Err(Error::NotOneClass(pool[i].id.clone())),
            None => Ok(()),
        }
    }
}

/// Seeded split of a pool.
///
/// Reals: `round(fraction * n)` to train, the rest halved into validation and
/// test (test takes the odd one). Each anomaly source contributes to
/// validation and test as many samples as there are reals there, capped at
/// half of what the source holds.
pub fn make_split(pool: &[ImageRecord], fraction: f64, seed: u64) -> Result<DatasetSplit> {
    if pool.is_empty() {
        return Err(Error::EmptyData("image pool is empty".into()));
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return invalid(format!("split fraction must lie in (0, 1), got {fraction}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reals: Vec<usize> = (0..pool.len()).filter(|&i| pool[i].label.is_real()).collect();
    if reals.is_empty() {
        return Err(Error::EmptyData("pool has no real images".into()));
    }
    reals.shuffle(&mut rng);
    let n_train = ((fraction * reals.len() as f64).round() as usize).min(reals.len());
    let rest = reals.len() - n_train;
    let n_val = rest / 2;
    let train = reals[..n_train].to_vec();
    let mut validation = reals[n_train..n_train + n_val].to_vec();
    let mut test = reals[n_train + n_val..].to_vec();
    let (real_val, real_test) = (validation.len(), test.len());

    let mut sources: Vec<&str> = pool
        .iter()
        .filter_map(|r| match &r.label {
            Label::Anomalous(s) => Some(s.as_str()),
            Label::Real => None,
        })
        .collect();
    sources.sort_unstable();
    sources.dedup();
    for src in sources {
        let mut idx: Vec<usize> = (0..pool.len())
            .filter(|&i| matches!(&pool[i].label, Label::Anomalous(s) if s == src))
            .collect();
        idx.shuffle(&mut rng);
        let half = idx.len() / 2;
        let nv = real_val.min(half);
        let nt = real_test.min(half);
        validation.extend_from_slice(&idx[..nv]);
        test.extend_from_slice(&idx[half..half + nt]);
    }
    Ok(DatasetSplit { fraction, seed, train, validation, test })
}

fn has_image_ext(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "ppm"))
        .unwrap_or(false)
}

fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && has_image_ext(p))
        .collect();
    out.sort();
    Ok(out)
}

/// Scans `root/real/` and every `root/anomalous-<name>/`.
pub fn load_dataset(root: &Path) -> Result<Vec<ImageRecord>> {
    let real = root.join("real");
    if !real.is_dir() {
        return Err(Error::MissingDirectory(real));
    }
    let mut pool: Vec<ImageRecord> = list_images(&real)?
        .into_iter()
        .map(|p| ImageRecord { id: p.display().to_string(), label: Label::Real, source: ImageSource::File(p) })
        .collect();
    let mut dirs: Vec<(String, PathBuf)> = fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().to_str()?.strip_prefix("anomalous-")?.to_string();
            e.path().is_dir().then(|| (name, e.path()))
        })
        .collect();
    dirs.sort();
    for (name, dir) in dirs {
        for p in list_images(&dir)? {
            pool.push(ImageRecord {
                id: p.display().to_string(),
                label: Label::Anomalous(name.clone()),
                source: ImageSource::File(p),
            });
        }
    }
    Ok(pool)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn solid(h: usize, w: usize, rgb: [f64; 3]) -> Tensor {
        let mut d = Vec::new();
        for v in rgb {
            d.extend(std::iter::repeat_n(v, h * w));
        }
        Tensor::new(&[3, h, w], d).unwrap()
    }

    #[test]
    fn white_ppm_decodes_to_ones() {
        let mut bytes = b"P6\n2 2\n255\n".to_vec();
        bytes.extend_from_slice(&[255; 12]);
        assert_eq!(decode_image(&bytes).unwrap(), Tensor::ones(&[3, 2, 2]));
    }

    #[test]
    fn red_pixel_channels() {
        let mut bytes = b"P6 1 1 255 ".to_vec();
        bytes.extend_from_slice(&[255, 0, 0]);
        assert_eq!(decode_image(&bytes).unwrap().data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn ppm_with_comment() {
        let mut bytes = b"P6\n# made by hand\n1 1\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 51, 255]);
        assert_eq!(decode_image(&bytes).unwrap().data(), &[0.0, 0.2, 1.0]);
    }

    #[test]
    fn decode_error_variants() {
        assert!(matches!(decode_image(b"GIF89a"), Err(Error::UnsupportedFormat)));
        assert!(matches!(decode_image(b"P6\n2 2\n255\n\x00\x01"), Err(Error::Truncated(_))));
        assert!(matches!(decode_image(b"P6\n2 2"), Err(Error::Truncated(_))));
        assert!(matches!(decode_image(b"P5\n1 1\n255\n\x00"), Err(Error::ChannelCount(1))));
        assert!(matches!(decode_image(b"P6\n1 1\n65535\n\x00"), Err(Error::MalformedImage(_))));
    }

    #[test]
    fn png_round_trip_and_channel_check() {
        let img = Tensor::new(&[3, 2, 3], (0..18).map(|v| f64::from(v * 14) / 255.0).collect()).unwrap();
        let bytes = encode_png(&img).unwrap();
        assert_eq!(decode_image(&bytes).unwrap(), img);
        assert!(matches!(decode_image(&bytes[..bytes.len() - 20]), Err(Error::Truncated(_) | Error::MalformedImage(_))));

        let mut rgba = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut rgba, 1, 1);
            enc.set_color(png::ColorType::Rgba);
            enc.set_depth(png::BitDepth::Eight);
            enc.write_header().unwrap().write_image_data(&[1, 2, 3, 4]).unwrap();
        }
        assert!(matches!(decode_image(&rgba), Err(Error::ChannelCount(4))));
    }

    #[test]
    fn crop_offsets() {
        let img = Tensor::new(&[3, 224, 224], (0..3 * 224 * 224).map(|v| v as f64).collect()).unwrap();
        assert_eq!(center_crop(&img, 224).unwrap(), img);

        let big = Tensor::new(&[1, 256, 256], (0..256 * 256).map(|v| v as f64).collect()).unwrap();
        let c = center_crop(&big, 224).unwrap();
        assert_eq!(c.data()[0], (16 * 256 + 16) as f64);

        let odd = Tensor::new(&[1, 225, 225], (0..225 * 225).map(|v| v as f64).collect()).unwrap();
        assert_eq!(center_crop(&odd, 224).unwrap().data()[0], 0.0);
        assert!(center_crop(&odd, 226).is_err());
    }

    #[test]
    fn normalize_cases() {
        let img = solid(4, 4, [0.2, 0.5, 0.9]);
        assert_eq!(rgb_normalize(&img, &NormStats::identity()).unwrap(), img);
        let stats = NormStats { mean: [0.2, 0.5, 0.9], std: [0.1, 0.2, 0.3] };
        assert!(rgb_normalize(&img, &stats).unwrap().data().iter().all(|&v| v == 0.0));
        let bad = NormStats { mean: [0.0; 3], std: [1.0, 0.0, 1.0] };
        assert!(rgb_normalize(&img, &bad).is_err());
    }

    #[test]
    fn split_counts() {
        let pool: Vec<ImageRecord> = (0..100)
            .map(|i| ImageRecord::in_memory(format!("r{i}"), Label::Real, Tensor::zeros(&[3, 1, 1])))
            .collect();
        let s = make_split(&pool, 0.8, 42).unwrap();
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (80, 10, 10));
        assert_eq!(s, make_split(&pool, 0.8, 42).unwrap());
        assert!(make_split(&[], 0.8, 1).is_err());
    }

    #[test]
    fn anomalies_never_in_train() {
        let mut pool: Vec<ImageRecord> = (0..40)
            .map(|i| ImageRecord::in_memory(format!("r{i}"), Label::Real, Tensor::zeros(&[3, 1, 1])))
            .collect();
        for src in ["a", "b"] {
            for i in 0..30 {
                pool.push(ImageRecord::in_memory(
                    format!("{src}{i}"),
                    Label::Anomalous(src.into()),
                    Tensor::zeros(&[3, 1, 1]),
                ));
            }
        }
        let s = make_split(&pool, 0.5, 3).unwrap();
        s.check_one_class(&pool).unwrap();
        // 20 real held out -> 10 val, 10 test; each source adds 10 to each
        assert_eq!(s.validation.len(), 30);
        assert_eq!(s.test.len(), 30);
        let mut all: Vec<usize> = s.train.iter().chain(&s.validation).chain(&s.test).copied().collect();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), 20 + 30 + 30);
    }
}
