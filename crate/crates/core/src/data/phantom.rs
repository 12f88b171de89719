//! Synthetic head slices with known brain masks.
//!
//! A rotated ellipse of textured "brain" sits inside a dark cerebrospinal
//! gap and a bright skull ring on a dark background. Up to three lesion blobs
//! of raised or lowered intensity are placed inside the brain; they belong to
//! the brain mask.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::minmax_normalize;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Tissue labels of [`Phantom::regions`].
pub const BACKGROUND: u8 = 0;
pub const SKULL: u8 = 1;
pub const GAP: u8 = 2;
pub const BRAIN: u8 = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomParams {
    /// Brain semi-axes as fractions of the image extent.
    pub axis_range: (f64, f64),
    pub gap_range: (f64, f64),
    pub skull_range: (f64, f64),
    /// Largest offset of the head centre from the image centre, as a fraction.
    pub max_shift: f64,
    pub max_lesions: usize,
    pub lesion_radius_range: (f64, f64),
    pub lesion_contrast: f64,
    pub texture_amplitude: f64,
    pub noise_sd: f64,
}

impl Default for PhantomParams {
    fn default() -> Self {
        PhantomParams {
            axis_range: (0.25, 0.38),
            gap_range: (0.02, 0.04),
            skull_range: (0.03, 0.05),
            max_shift: 0.02,
            max_lesions: 3,
            lesion_radius_range: (0.04, 0.10),
            lesion_contrast: 0.35,
            texture_amplitude: 0.08,
            noise_sd: 0.03,
        }
    }
}

/// Noise-free rendering plus labels.
#[derive(Clone, Debug)]
pub struct Phantom {
    pub height: usize,
    pub width: usize,
    /// Clean intensities, row-major `[H, W]`.
    pub intensity: Vec<f64>,
    pub regions: Tensor<u8>,
    pub mask: Tensor<u8>,
}

pub fn check_size(height: usize, width: usize) -> Result<()> {
    if height < 32 || width < 32 || !height.is_multiple_of(16) || !width.is_multiple_of(16) {
        return Err(Error::Config(format!("phantom size {height}x{width} must be at least 32x32 and divisible by 16")));
    }
    Ok(())
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Draws the anatomy and renders it without acquisition noise.
pub fn render_phantom(rng: &mut impl Rng, height: usize, width: usize, p: &PhantomParams) -> Result<Phantom> {
    check_size(height, width)?;
    let extent = height.min(width) as f64;
    let cx = width as f64 / 2.0 + uniform(rng, (-p.max_shift, p.max_shift)) * width as f64;
    let cy = height as f64 / 2.0 + uniform(rng, (-p.max_shift, p.max_shift)) * height as f64;
    let a = uniform(rng, p.axis_range) * extent;
    let b = uniform(rng, p.axis_range) * extent;
    let theta = rng.random_range(0.0..PI);
    let gap = (uniform(rng, p.gap_range) * extent).max(1.5);
    let skull = (uniform(rng, p.skull_range) * extent).max(1.5);
    let (sin, cos) = theta.sin_cos();

    // Low-frequency texture: a few random plane waves.
    let waves: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            let freq = rng.random_range(0.05..0.25);
            let dir = rng.random_range(0.0..2.0 * PI);
            (freq * dir.cos(), freq * dir.sin(), rng.random_range(0.0..2.0 * PI))
        })
        .collect();

    let n_lesions = rng.random_range(0..=p.max_lesions);
    let lesions: Vec<(f64, f64, f64, f64)> = (0..n_lesions)
        .map(|_| {
            // Centre inside the inner 60% of the brain ellipse.
            let r = 0.6 * rng.random::<f64>().sqrt();
            let phi = rng.random_range(0.0..2.0 * PI);
            let (u, v) = (r * a * phi.cos(), r * b * phi.sin());
            let x = cx + u * cos - v * sin;
            let y = cy + u * sin + v * cos;
            let radius = uniform(rng, p.lesion_radius_range) * extent;
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            (x, y, radius, sign * p.lesion_contrast)
        })
        .collect();

    let mut intensity = vec![0.0; height * width];
    let mut regions = vec![BACKGROUND; height * width];
    for yi in 0..height {
        for xi in 0..width {
            let (x, y) = (xi as f64 + 0.5, yi as f64 + 0.5);
            let (dx, dy) = (x - cx, y - cy);
            let u = dx * cos + dy * sin;
            let v = -dx * sin + dy * cos;
            let inside = |ea: f64, eb: f64| (u / ea).powi(2) + (v / eb).powi(2) <= 1.0;
            let i = yi * width + xi;
            let (region, value) = if inside(a, b) {
                let texture: f64 = waves.iter().map(|&(fx, fy, ph)| (fx * x + fy * y + ph).sin()).sum::<f64>();
                let mut value = 0.55 + p.texture_amplitude * texture / 3.0;
                for &(lx, ly, lr, c) in &lesions {
                    let d2 = (x - lx).powi(2) + (y - ly).powi(2);
                    value += c * (-d2 / (2.0 * (lr / 2.0).powi(2))).exp();
                }
                (BRAIN, value)
            } else if inside(a + gap, b + gap) {
                (GAP, 0.15)
            } else if inside(a + gap + skull, b + gap + skull) {
                (SKULL, 0.9)
            } else {
                (BACKGROUND, 0.05)
            };
            regions[i] = region;
            intensity[i] = value;
        }
    }
    let mask = regions.iter().map(|&r| (r == BRAIN) as u8).collect();
    Ok(Phantom {
        height,
        width,
        intensity,
        regions: Tensor::new(&[height, width], regions)?,
        mask: Tensor::new(&[height, width], mask)?,
    })
}

pub(crate) fn add_noise(values: &mut [f64], sd: f64, rng: &mut impl Rng) {
    if sd > 0.0 {
        let normal = Normal::new(0.0, sd).expect("finite positive deviation");
        for v in values {
            *v += normal.sample(rng);
        }
    }
}

/// One noisy phantom slice: image `[1, H, W]` in [0, 1] and its mask.
pub fn generate_phantom(seed: u64, height: usize, width: usize, p: &PhantomParams) -> Result<(Tensor<f32>, Phantom)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phantom = render_phantom(&mut rng, height, width, p)?;
    let mut values = phantom.intensity.clone();
    add_noise(&mut values, p.noise_sd, &mut rng);
    let image = minmax_normalize(&values, height, width)?.reshape(&[1, height, width])?;
    Ok((image, phantom))
}
