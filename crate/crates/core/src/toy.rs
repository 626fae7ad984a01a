//! Procedural stand-in dataset: smooth low-frequency textures as the real
//! class, with noise textures and flat mosaics as two anomaly sources.

use std::f64::consts::TAU;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};
use crate::preprocess::{encode_ppm, ImageRecord, Label};
use crate::tensor::Tensor;

pub const NOISE_SOURCE: &str = "noise";
pub const MOSAIC_SOURCE: &str = "mosaic";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToyConfig {
    pub n_real: usize,
    /// Total anomalies, shared evenly between the two sources.
    pub n_anomalous: usize,
    pub size: usize,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig { n_real: 2000, n_anomalous: 2000, size: 32, seed: 7 }
    }
}

fn image(size: usize, mut px: impl FnMut(usize, usize, usize) -> f64) -> Tensor {
    let mut data = Vec::with_capacity(3 * size * size);
    for c in 0..3 {
        for y in 0..size {
            for x in 0..size {
                data.push(px(c, y, x).clamp(0.0, 1.0));
            }
        }
    }
    Tensor::new(&[3, size, size], data).expect("positive size")
}

/// Sum of a few sinusoids with at most two cycles across the image.
pub fn smooth_texture(size: usize, rng: &mut impl Rng) -> Tensor {
    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.3..0.7));
    let waves: Vec<(f64, f64, f64, [f64; 3])> = (0..3)
        .map(|_| {
            let fx = rng.random_range(-2.0..2.0);
            let fy = rng.random_range(-2.0..2.0);
            let phase = rng.random_range(0.0..TAU);
            let amp = std::array::from_fn(|_| rng.random_range(0.02..0.08));
            (fx, fy, phase, amp)
        })
        .collect();
    let n = size as f64;
    image(size, |c, y, x| {
        let mut v = base[c];
        for (fx, fy, phase, amp) in &waves {
            v += amp[c] * (TAU * (fx * x as f64 + fy * y as f64) / n + phase).sin();
        }
        v
    })
}

/// Independent per-pixel noise around a random colour.
pub fn noise_texture(size: usize, rng: &mut impl Rng) -> Tensor {
    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.3..0.7));
    let amp = rng.random_range(0.1..0.25);
    image(size, |c, _, _| base[c] + amp * rng.random_range(-1.0..1.0))
}

/// Voronoi cells of flat colour.
pub fn mosaic(size: usize, rng: &mut impl Rng) -> Tensor {
    let k = rng.random_range(6..16);
    let cells: Vec<(f64, f64, [f64; 3])> = (0..k)
        .map(|_| {
            let cy = rng.random_range(0.0..size as f64);
            let cx = rng.random_range(0.0..size as f64);
            (cy, cx, std::array::from_fn(|_| rng.random_range(0.15..0.85)))
        })
        .collect();
    image(size, |c, y, x| {
        let nearest = cells
            .iter()
            .min_by(|a, b| {
                let da = (a.0 - y as f64).powi(2) + (a.1 - x as f64).powi(2);
                let db = (b.0 - y as f64).powi(2) + (b.1 - x as f64).powi(2);
                da.total_cmp(&db)
            })
            .expect("k >= 6");
        nearest.2[c]
    })
}

/// In-memory pool: reals first, then noise, then mosaics.
pub fn generate(cfg: &ToyConfig) -> Result<Vec<ImageRecord>> {
    if cfg.size == 0 {
        return invalid("toy image size must be positive");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_noise = cfg.n_anomalous / 2;
    let n_mosaic = cfg.n_anomalous - n_noise;
    let mut pool = Vec::with_capacity(cfg.n_real + cfg.n_anomalous);
    for i in 0..cfg.n_real {
        pool.push(ImageRecord::in_memory(format!("real-{i:05}"), Label::Real, smooth_texture(cfg.size, &mut rng)));
    }
    for i in 0..n_noise {
        let img = noise_texture(cfg.size, &mut rng);
        pool.push(ImageRecord::in_memory(format!("{NOISE_SOURCE}-{i:05}"), Label::Anomalous(NOISE_SOURCE.into()), img));
    }
    for i in 0..n_mosaic {
        let img = mosaic(cfg.size, &mut rng);
        pool.push(ImageRecord::in_memory(format!("{MOSAIC_SOURCE}-{i:05}"), Label::Anomalous(MOSAIC_SOURCE.into()), img));
    }
    Ok(pool)
}

/// Writes the pool as `real/` and `anomalous-<source>/` PPM directories.
pub fn write_dataset(root: &Path, pool: &[ImageRecord]) -> Result<()> {
    for rec in pool {
        let dir = match &rec.label {
            Label::Real => root.join("real"),
            Label::Anomalous(s) => root.join(format!("anomalous-{s}")),
        };
        fs::create_dir_all(&dir)?;
        let name = Path::new(&rec.id).file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        fs::write(dir.join(format!("{name}.ppm")), encode_ppm(&rec.pixels()?)?)?;
    }
    Ok(())
}
