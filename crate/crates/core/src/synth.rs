//! Synthetic spectral scenes: dark background with smooth bright blobs.

use serde::{Deserialize, Serialize};

use crate::error::{CstError, Result};
use crate::optics::HsiCube;
use crate::rng::{streams, Stream};

pub const BACKGROUND: f64 = 0.02;

/// How many blobs, and what fraction of the pixels they cover together.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SparsityProfile {
    pub blobs: usize,
    pub coverage: f64,
}

impl SparsityProfile {
    pub fn empty() -> Self {
        SparsityProfile {
            blobs: 0,
            coverage: 0.0,
        }
    }
}

impl Default for SparsityProfile {
    fn default() -> Self {
        SparsityProfile {
            blobs: 3,
            coverage: 0.2,
        }
    }
}

/// Smooth positive spectral curve in `[0.2, 1]`: a Gaussian bump over bands.
fn spectrum(rng: &mut Stream, bands: usize) -> Vec<f64> {
    let center = rng.uniform_range(0.0, bands as f64);
    let width = rng.uniform_range(0.3, 0.8) * bands.max(2) as f64;
    (0..bands)
        .map(|n| {
            let d = (n as f64 - center) / width;
            0.2 + 0.8 * (-d * d).exp()
        })
        .collect()
}

/// Disc blobs with value `bg + amp * spectrum * (1 - (rho / radius)^2)`.
/// Blobs never overlap; values stay in `[0, 1]`.
pub fn synth_scene(seed: u64, height: usize, width: usize, bands: usize, profile: SparsityProfile) -> Result<HsiCube> {
    if height == 0 || width == 0 || bands == 0 {
        return Err(CstError::Config("scene dimensions must be positive".into()));
    }
    if !(0.0..=0.6).contains(&profile.coverage) {
        return Err(CstError::Config(format!(
            "blob coverage {} outside [0, 0.6]",
            profile.coverage
        )));
    }
    let mut cube = HsiCube::new(height, width, bands, vec![BACKGROUND; height * width * bands])?;
    if profile.blobs == 0 || profile.coverage == 0.0 {
        return Ok(cube);
    }
    let mut rng = Stream::new(seed, streams::SCENE);
    let area = profile.coverage * (height * width) as f64 / profile.blobs as f64;
    let radius = (area / std::f64::consts::PI).sqrt();
    if 2.0 * radius > height.min(width) as f64 {
        return Err(CstError::Config(format!(
            "{} blobs covering {} do not fit a {height}x{width} scene",
            profile.blobs, profile.coverage
        )));
    }
    let mut centers: Vec<(f64, f64)> = Vec::with_capacity(profile.blobs);
    let mut tries = 0;
    while centers.len() < profile.blobs {
        tries += 1;
        if tries > 10_000 {
            return Err(CstError::Config(format!(
                "could not place {} non-overlapping blobs in a {height}x{width} scene",
                profile.blobs
            )));
        }
        let cy = rng.uniform_range(radius, height as f64 - radius);
        let cx = rng.uniform_range(radius, width as f64 - radius);
        if centers
            .iter()
            .all(|&(y, x)| ((y - cy).powi(2) + (x - cx).powi(2)).sqrt() >= 2.0 * radius + 1.0)
        {
            centers.push((cy, cx));
        }
    }
    for &(cy, cx) in &centers {
        let amp = rng.uniform_range(0.6, 0.95);
        let spec = spectrum(&mut rng, bands);
        for y in 0..height {
            for x in 0..width {
                let rho = ((y as f64 + 0.5 - cy).powi(2) + (x as f64 + 0.5 - cx).powi(2)).sqrt();
                if rho < radius {
                    let fall = 1.0 - (rho / radius).powi(2);
                    for (n, s) in spec.iter().enumerate() {
                        *cube.at_mut(y, x, n) = BACKGROUND + amp * s * fall;
                    }
                }
            }
        }
    }
    Ok(cube)
}

/// Scene whose top-left quadrant is bright, textured and spectrally varied
/// while the rest is flat background.
pub fn bright_quadrant_scene(seed: u64, height: usize, width: usize, bands: usize) -> Result<HsiCube> {
    let mut cube = HsiCube::new(height, width, bands, vec![BACKGROUND; height * width * bands])?;
    let mut rng = Stream::new(seed, streams::SCENE);
    let spec = spectrum(&mut rng, bands);
    let (fy, fx) = (rng.uniform_range(0.5, 1.5), rng.uniform_range(0.5, 1.5));
    for y in 0..height / 2 {
        for x in 0..width / 2 {
            let tex = 0.5 + 0.5 * ((y as f64 * fy).sin() * (x as f64 * fx).cos());
            for (n, s) in spec.iter().enumerate() {
                *cube.at_mut(y, x, n) = BACKGROUND + 0.9 * s * (0.3 + 0.7 * tex);
            }
        }
    }
    Ok(cube)
}

/// Number of pixels brighter than the background in any band.
pub fn blob_pixels(cube: &HsiCube) -> usize {
    let nb = cube.bands;
    cube.data
        .chunks(nb)
        .filter(|px| px.iter().any(|&v| v > BACKGROUND))
        .count()
}
