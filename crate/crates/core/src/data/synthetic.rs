//! Seeded synthetic leaf benchmark.
//!
//! Healthy tiles are textured green with a midrib, side veins, a lighting
//! gradient and pixel noise. Diseased tiles add one bright yellow ellipse
//! covering 5–15% of the area; its mask is kept.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{write_image, write_pgm, DatasetSplit, Label, LabeledImage};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub size: usize,
    pub train: usize,
    pub validation: usize,
    /// Healthy test count; the diseased test count matches it.
    pub test: usize,
    pub seed: u64,
    pub noise: f64,
    pub blob_area: (f64, f64),
    /// Mean blob RGB; each channel is jittered per blob.
    pub blob_colour: [f64; 3],
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            size: 32,
            train: 200,
            validation: 40,
            test: 40,
            seed: 0,
            noise: 0.02,
            blob_area: (0.05, 0.15),
            blob_colour: [0.92, 0.86, 0.22],
        }
    }
}

/// A diseased tile with its blob mask (row-major, `size × size`).
#[derive(Clone, Debug)]
pub struct MaskedImage {
    pub image: LabeledImage,
    pub mask: Vec<bool>,
}

#[derive(Clone, Debug)]
pub struct SyntheticBenchmark {
    pub config: SyntheticConfig,
    pub train: Vec<LabeledImage>,
    pub validation: Vec<LabeledImage>,
    pub test_healthy: Vec<LabeledImage>,
    pub test_diseased: Vec<MaskedImage>,
}

impl SyntheticBenchmark {
    pub fn generate(config: SyntheticConfig) -> Result<Self> {
        if config.size < 8 {
            return Err(Error::Config("synthetic tiles need size ≥ 8".into()));
        }
        let (lo, hi) = config.blob_area;
        if !(0.0 < lo && lo <= hi && hi < 0.5) {
            return Err(Error::Config(format!("blob area range {lo}..{hi} invalid")));
        }
        let mut next = 0u64;
        let mut healthy = |n: usize, split: &str| -> Result<Vec<LabeledImage>> {
            (0..n)
                .map(|i| {
                    let mut rng = tile_rng(config.seed, next);
                    next += 1;
                    let px = healthy_leaf(&config, &mut rng);
                    LabeledImage::new(
                        px,
                        Label::Healthy,
                        format!("synthetic/{split}/healthy_{i:04}.png"),
                    )
                })
                .collect()
        };
        let train = healthy(config.train, "train")?;
        let validation = healthy(config.validation, "val")?;
        let test_healthy = healthy(config.test, "test")?;
        let test_diseased = (0..config.test)
            .map(|i| {
                let mut rng = tile_rng(config.seed, next + i as u64);
                let mut px = healthy_leaf(&config, &mut rng);
                let mask = add_blob(&config, &mut px, &mut rng);
                let image = LabeledImage::new(
                    px,
                    Label::Diseased,
                    format!("synthetic/test/diseased_{i:04}.png"),
                )?;
                Ok(MaskedImage { image, mask })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config,
            train,
            validation,
            test_healthy,
            test_diseased,
        })
    }

    pub fn to_split(&self) -> DatasetSplit {
        let mut test = self.test_healthy.clone();
        test.extend(self.test_diseased.iter().map(|m| m.image.clone()));
        DatasetSplit {
            train: self.train.clone(),
            validation: self.validation.clone(),
            test,
            warnings: Vec::new(),
        }
    }

    /// Writes `healthy/`, `diseased/` and `masks/` under `root`. Every
    /// healthy tile lands in `healthy/`, so reloading re-splits them.
    /// Returns the written image paths.
    pub fn write(&self, root: &Path) -> Result<Vec<PathBuf>> {
        let mut written = Vec::new();
        for sub in ["healthy", "diseased", "masks"] {
            let d = root.join(sub);
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        let healthy = self
            .train
            .iter()
            .chain(&self.validation)
            .chain(&self.test_healthy);
        for (i, img) in healthy.enumerate() {
            let p = root.join("healthy").join(format!("leaf_{i:04}.png"));
            write_image(&p, &img.pixels)?;
            written.push(p);
        }
        let n = self.config.size;
        for (i, m) in self.test_diseased.iter().enumerate() {
            let p = root.join("diseased").join(format!("leaf_{i:04}.png"));
            write_image(&p, &m.image.pixels)?;
            written.push(p);
            let gray: Vec<u8> = m.mask.iter().map(|&b| if b { 255 } else { 0 }).collect();
            write_pgm(
                &root.join("masks").join(format!("leaf_{i:04}.pgm")),
                &gray,
                n,
                n,
            )?;
        }
        Ok(written)
    }
}

fn tile_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Distance from `(x, y)` to the segment `a → b`.
fn segment_distance(x: f64, y: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((x - a.0) * dx + (y - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (px, py) = (a.0 + t * dx, a.1 + t * dy);
    ((x - px).powi(2) + (y - py).powi(2)).sqrt()
}

fn healthy_leaf(cfg: &SyntheticConfig, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let n = cfg.size;
    let s = n as f64;
    let base = [
        0.22 + rng.random_range(-0.04..0.04),
        0.52 + rng.random_range(-0.06..0.06),
        0.16 + rng.random_range(-0.04..0.04),
    ];
    let grad_angle = rng.random_range(0.0..2.0 * PI);
    let grad_amp = rng.random_range(0.03..0.10);

    // midrib through the centre, tilted up to 25° from vertical
    let tilt = rng.random_range(-25f64..25.0).to_radians();
    let (ux, uy) = (tilt.sin(), tilt.cos());
    let cx = s / 2.0 + rng.random_range(-0.1..0.1) * s;
    let cy = s / 2.0;
    let top = (cx - ux * s, cy - uy * s);
    let bottom = (cx + ux * s, cy + uy * s);

    let spacing = rng.random_range(0.18..0.26) * s;
    let offset = rng.random_range(0.0..spacing);
    let spread = rng.random_range(35f64..55.0).to_radians();
    let mut veins = Vec::new();
    let mut t = -s + offset;
    while t < s {
        let root = (cx + ux * t, cy + uy * t);
        for side in [-1.0, 1.0] {
            // rotate the midrib direction towards the tip by `spread`
            let ang = side * spread;
            let (vx, vy) = (
                ux * ang.cos() - uy * ang.sin(),
                ux * ang.sin() + uy * ang.cos(),
            );
            let (vx, vy) = (-vx, -vy);
            let len = 0.55 * s;
            veins.push((root, (root.0 + vx * len, root.1 + vy * len)));
        }
        t += spacing;
    }

    let noise = Normal::new(0.0, cfg.noise).expect("finite noise level");
    let mut out = vec![0f32; 3 * n * n];
    for y in 0..n {
        for x in 0..n {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let g = grad_amp
                * (((fx - s / 2.0) * grad_angle.cos() + (fy - s / 2.0) * grad_angle.sin()) / s);
            let rib = (1.0 - segment_distance(fx, fy, top, bottom) / 1.2).max(0.0);
            let vein = veins
                .iter()
                .map(|&(a, b)| (1.0 - segment_distance(fx, fy, a, b) / 0.8).max(0.0))
                .fold(0.0, f64::max);
            let light = g + 0.16 * rib + 0.08 * vein;
            for c in 0..3 {
                let tint = if c == 2 { 0.5 } else { 1.0 };
                let v = base[c] + light * tint + noise.sample(rng);
                out[c * n * n + y * n + x] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    Tensor::new(vec![3, n, n], out).expect("tile extents")
}

fn add_blob(cfg: &SyntheticConfig, px: &mut Tensor<f32>, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let n = cfg.size;
    let s = n as f64;
    let area = rng.random_range(cfg.blob_area.0..=cfg.blob_area.1) * s * s;
    let ratio = rng.random_range(0.55..1.0);
    // area = π a b with b = ratio · a
    let a = (area / (PI * ratio)).sqrt();
    let b = ratio * a;
    let theta = rng.random_range(0.0..PI);
    let margin = a + 0.5;
    let cx = rng.random_range(margin..(s - margin).max(margin + 1e-9));
    let cy = rng.random_range(margin..(s - margin).max(margin + 1e-9));
    let colour = cfg.blob_colour.map(|c| c + rng.random_range(-0.05..0.05));
    let noise = Normal::new(0.0, cfg.noise).expect("finite noise level");
    let (cos, sin) = (theta.cos(), theta.sin());
    let mut mask = vec![false; n * n];
    let data = px.data_mut();
    for y in 0..n {
        for x in 0..n {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            let u = dx * cos + dy * sin;
            let v = -dx * sin + dy * cos;
            if (u / a).powi(2) + (v / b).powi(2) <= 1.0 {
                mask[y * n + x] = true;
                for (c, &col) in colour.iter().enumerate() {
                    data[c * n * n + y * n + x] = (col + noise.sample(rng)).clamp(0.0, 1.0) as f32;
                }
            }
        }
    }
    mask
}
