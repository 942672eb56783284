//! Deterministic synthetic thoracic phantom.
//!
//! Each volume holds a soft-tissue body in air with up to four organs on
//! labels 1..=4:
//!
//! | label | organ     | shape                       | intensity               |
//! |-------|-----------|-----------------------------|-------------------------|
//! | 1     | heart     | rotated ellipse             | +200 HU                 |
//! | 2     | esophagus | thin tube (small disc/slice)| body + 25 HU            |
//! | 3     | trachea   | ring around an air lumen    | +120 HU wall            |
//! | 4     | aorta     | disc                        | +160 HU                 |
//!
//! Gaussian noise (sigma 20 HU by default) is added everywhere.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::volume::CtVolume;

pub const ORGAN_NAMES: [&str; 4] = ["heart", "esophagus", "trachea", "aorta"];

pub const AIR_HU: f64 = -1000.0;
pub const BODY_HU: f64 = 40.0;
pub const HEART_HU: f64 = 200.0;
pub const ESOPHAGUS_HU: f64 = BODY_HU + 25.0;
pub const TRACHEA_WALL_HU: f64 = 120.0;
pub const LUMEN_HU: f64 = -900.0;
pub const AORTA_HU: f64 = 160.0;

/// Smallest side length the shape templates resolve.
pub const MIN_SIZE: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    pub num_volumes: usize,
    /// In-plane side length.
    pub size: usize,
    /// Axial slices per volume.
    pub slices: usize,
    /// Number of organs, 2..=4 (labels 1..=organs).
    pub organs: usize,
    pub noise_sigma: f64,
    /// Voxel spacing along (x, y, z) in mm.
    pub spacing: [f64; 3],
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig { num_volumes: 5, size: 64, slices: 8, organs: 3, noise_sigma: 20.0, spacing: [0.8, 0.8, 2.5] }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size < MIN_SIZE {
            return Err(Error::Config(format!("phantom size {} is below the {MIN_SIZE}px template minimum", self.size)));
        }
        if !(2..=4).contains(&self.organs) {
            return Err(Error::Config(format!("phantom supports 2 to 4 organs, got {}", self.organs)));
        }
        if self.num_volumes == 0 || self.slices == 0 {
            return Err(Error::Config("phantom needs at least one volume and one slice".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Config("noise sigma must be non-negative".into()));
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.organs + 1
    }

    pub fn volume_id(index: usize) -> String {
        format!("phantom_{index:03}")
    }
}

/// An image volume and its exact label volume.
#[derive(Clone, Debug, PartialEq)]
pub struct PhantomCase {
    pub image: CtVolume,
    pub labels: CtVolume,
}

/// Per-volume anatomy, jittered from the template.
struct Anatomy {
    heart: (f64, f64, f64, f64, f64),
    esophagus: (f64, f64, f64),
    trachea: (f64, f64, f64, f64),
    aorta: (f64, f64, f64),
    phase: f64,
}

impl Anatomy {
    fn sample(rng: &mut ChaCha8Rng) -> Self {
        let mut j = |amp: f64| rng.random_range(-amp..=amp);
        Anatomy {
            heart: (0.45 + j(0.03), 0.64 + j(0.03), 0.17 * (1.0 + j(0.1)), 0.12 * (1.0 + j(0.1)), j(0.4)),
            esophagus: (0.52 + j(0.02), 0.41 + j(0.015), 0.045 * (1.0 + j(0.1))),
            trachea: (0.50 + j(0.02), 0.23 + j(0.015), 0.075 * (1.0 + j(0.08)), 0.6),
            aorta: (0.68 + j(0.02), 0.44 + j(0.02), 0.06 * (1.0 + j(0.1))),
            phase: j(PI),
        }
    }
}

fn in_ellipse(u: f64, v: f64, cx: f64, cy: f64, rx: f64, ry: f64, angle: f64) -> bool {
    let (s, c) = angle.sin_cos();
    let (du, dv) = (u - cx, v - cy);
    let a = (du * c + dv * s) / rx;
    let b = (-du * s + dv * c) / ry;
    a * a + b * b <= 1.0
}

fn generate_case(index: usize, cfg: &PhantomConfig, rng: &mut ChaCha8Rng) -> Result<PhantomCase> {
    let anatomy = Anatomy::sample(rng);
    let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let (s, d) = (cfg.size, cfg.slices);
    let mut hu = Vec::with_capacity(d * s * s);
    let mut labels = Vec::with_capacity(d * s * s);
    for z in 0..d {
        let t = 2.0 * PI * z as f64 / d as f64 + anatomy.phase;
        let (hx, hy, hrx, hry, ha) = anatomy.heart;
        let scale = 1.0 + 0.08 * t.sin();
        let (ex, ey, er) = anatomy.esophagus;
        let (ex, ey) = (ex + 0.01 * t.cos(), ey + 0.008 * t.sin());
        let (tx, ty, tr, inner) = anatomy.trachea;
        let (ax, ay, ar) = anatomy.aorta;
        for y in 0..s {
            for x in 0..s {
                let u = (x as f64 + 0.5) / s as f64;
                let v = (y as f64 + 0.5) / s as f64;
                let body = in_ellipse(u, v, 0.5, 0.5, 0.46, 0.40, 0.0);
                let mut label = 0u8;
                let mut value = if body { BODY_HU } else { AIR_HU };
                if body {
                    if in_ellipse(u, v, hx, hy, hrx * scale, hry * scale, ha) {
                        label = 1;
                        value = HEART_HU;
                    }
                    if cfg.organs >= 2 && in_ellipse(u, v, ex, ey, er, er, 0.0) {
                        label = 2;
                        value = ESOPHAGUS_HU;
                    }
                    if cfg.organs >= 3 {
                        if in_ellipse(u, v, tx, ty, tr * inner, tr * inner, 0.0) {
                            label = 0;
                            value = LUMEN_HU;
                        } else if in_ellipse(u, v, tx, ty, tr, tr, 0.0) {
                            label = 3;
                            value = TRACHEA_WALL_HU;
                        }
                    }
                    if cfg.organs >= 4 && in_ellipse(u, v, ax, ay, ar, ar, 0.0) {
                        label = 4;
                        value = AORTA_HU;
                    }
                }
                hu.push((value + noise.sample(rng)) as f32);
                labels.push(label as f32);
            }
        }
    }
    let id = PhantomConfig::volume_id(index);
    Ok(PhantomCase {
        image: CtVolume::new(id.clone(), [d, s, s], cfg.spacing, hu)?,
        labels: CtVolume::new(format!("{id}_labels"), [d, s, s], cfg.spacing, labels)?,
    })
}

/// Generates `cfg.num_volumes` cases from one seeded stream.
pub fn generate(seed: u64, cfg: &PhantomConfig) -> Result<Vec<PhantomCase>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..cfg.num_volumes).map(|i| generate_case(i, cfg, &mut rng)).collect()
}

/// [`generate`] with default slice count, organ count and noise.
pub fn generate_phantom(seed: u64, num_volumes: usize, size: usize) -> Result<Vec<PhantomCase>> {
    generate(seed, &PhantomConfig { num_volumes, size, ..PhantomConfig::default() })
}
