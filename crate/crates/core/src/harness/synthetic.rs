//! Seeded generator of rail-like test scenes: a dim, slightly noisy
//! background with one bright band following a random quadratic curve from
//! the bottom of the frame to the top. The mask is the band.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::genome::mix64;
use crate::imgcore::{Image, Mask};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub width: usize,
    pub height: usize,
    pub background: f32,
    /// Peak deviation of the background value noise.
    pub noise_amplitude: f32,
    /// Lattice spacing of the background value noise, in pixels.
    pub noise_cell: f32,
    pub band_luminance: f32,
    pub band_width: (f32, f32),
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            width: 96,
            height: 64,
            background: 0.3,
            noise_amplitude: 0.04,
            noise_cell: 8.0,
            band_luminance: 0.85,
            band_width: (6.0, 10.0),
        }
    }
}

impl SyntheticConfig {
    /// Near-black background with a dimmer band.
    pub fn dark() -> Self {
        Self {
            background: 0.08,
            noise_amplitude: 0.03,
            band_luminance: 0.78,
            ..Self::default()
        }
    }

    /// Background just under the band detection range.
    pub fn bright() -> Self {
        Self {
            background: 0.5,
            noise_amplitude: 0.03,
            band_luminance: 0.97,
            ..Self::default()
        }
    }

    /// Strong fine-grained background texture.
    pub fn textured() -> Self {
        Self {
            noise_amplitude: 0.2,
            noise_cell: 3.0,
            ..Self::default()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "plain" => Ok(Self::default()),
            "dark" => Ok(Self::dark()),
            "bright" => Ok(Self::bright()),
            "textured" => Ok(Self::textured()),
            _ => Err(Error::invalid(format!(
                "unknown scene style `{name}` (expected plain, dark, bright or textured)"
            ))),
        }
    }
}

/// One scene; `seed` fully determines it.
pub fn scene(cfg: &SyntheticConfig, seed: u64) -> (Image, Mask) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (cfg.width, cfg.height);
    let (wf, hf) = (w as f32, h as f32);

    // centre line x(t) = x0 + b·t + c·t², t = 0 at the bottom row
    let x0 = wf * rng.random_range(0.3..0.7);
    let b = wf * rng.random_range(-0.25..0.25);
    let c = wf * rng.random_range(-0.2..0.2);
    let half = rng.random_range(cfg.band_width.0..=cfg.band_width.1) / 2.0;

    let cell = cfg.noise_cell.max(1.0);
    let gw = (wf / cell).ceil() as usize + 2;
    let gh = (hf / cell).ceil() as usize + 2;
    let lattice: Vec<f32> = (0..gw * gh).map(|_| rng.random_range(-1.0..1.0)).collect();
    let noise = |x: usize, y: usize| {
        let (gx, gy) = (x as f32 / cell, y as f32 / cell);
        let (i, j) = (gx as usize, gy as usize);
        let (fx, fy) = (gx - i as f32, gy - j as f32);
        let at = |i: usize, j: usize| lattice[j * gw + i];
        let top = at(i, j) + (at(i + 1, j) - at(i, j)) * fx;
        let bot = at(i, j + 1) + (at(i + 1, j + 1) - at(i, j + 1)) * fx;
        top + (bot - top) * fy
    };

    let mut data = Vec::with_capacity(w * h * 3);
    let mut bits = Vec::with_capacity(w * h);
    for y in 0..h {
        let t = (h - 1 - y) as f32 / hf;
        let centre = x0 + b * t + c * t * t;
        for x in 0..w {
            let inside = (x as f32 + 0.5 - centre).abs() < half;
            let v = if inside {
                cfg.band_luminance
            } else {
                cfg.background + cfg.noise_amplitude * noise(x, y)
            };
            let v = v.clamp(0.0, 1.0);
            data.extend([v, v, v]);
            bits.push(inside);
        }
    }
    (
        Image::new(w, h, data).expect("generator stays in range"),
        Mask::new(w, h, bits).expect("generator dimensions"),
    )
}

fn samples(cfg: &SyntheticConfig, n: usize, seed: u64, prefix: &str) -> Result<Vec<Sample>> {
    (0..n)
        .map(|i| {
            let (img, mask) = scene(cfg, mix64(seed ^ mix64(i as u64)));
            Sample::new(format!("{prefix}_{i:04}"), img, mask)
        })
        .collect()
}

/// `n` scenes with ids `syn_0000`, `syn_0001`, ...
pub fn generate(cfg: &SyntheticConfig, n: usize, seed: u64) -> Result<Dataset> {
    Dataset::new(samples(cfg, n, seed, "syn")?)
}

/// `n` scenes of each of the dark, bright and textured styles, with ids
/// `dark_0000`, ..., `bright_0000`, ..., `textured_0000`, ...
pub fn generate_styles(n: usize, seed: u64) -> Result<Dataset> {
    let mut all = Vec::with_capacity(3 * n);
    for (k, name) in ["dark", "bright", "textured"].into_iter().enumerate() {
        let cfg = SyntheticConfig::preset(name)?;
        all.extend(samples(&cfg, n, mix64(seed ^ (k as u64 + 1)), name)?);
    }
    Dataset::new(all)
}
