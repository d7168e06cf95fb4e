//! PSNR and SSIM.

use serde::Serialize;

use crate::error::{CstError, Result};
use crate::optics::HsiCube;

/// Returned for identical inputs.
pub const PSNR_CAP_DB: f64 = 100.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn check_same(op: &'static str, a: &HsiCube, b: &HsiCube) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(CstError::dims(op, &a.dims(), &b.dims()));
    }
    Ok(())
}

fn psnr_from_mse(mse: f64, data_range: f64) -> f64 {
    if mse == 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * (data_range * data_range / mse).log10()).min(PSNR_CAP_DB)
}

/// `10 log10(range^2 / MSE)` with the MSE taken over every voxel.
pub fn psnr(x: &HsiCube, reference: &HsiCube, data_range: f64) -> Result<f64> {
    check_same("psnr", x, reference)?;
    let n = x.data.len() as f64;
    let mse = x
        .data
        .iter()
        .zip(&reference.data)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n;
    Ok(psnr_from_mse(mse, data_range))
}

/// PSNR of each band separately.
pub fn psnr_per_band(x: &HsiCube, reference: &HsiCube, data_range: f64) -> Result<Vec<f64>> {
    check_same("psnr_per_band", x, reference)?;
    let nb = x.bands;
    let mut se = vec![0.0; nb];
    for (i, (a, b)) in x.data.iter().zip(&reference.data).enumerate() {
        se[i % nb] += (a - b) * (a - b);
    }
    let px = (x.height * x.width) as f64;
    Ok(se.into_iter().map(|s| psnr_from_mse(s / px, data_range)).collect())
}

/// Normalized 11x11 Gaussian window, sigma 1.5, row-major.
pub fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let d = i as f64 - half;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = g.iter().sum();
    let mut w = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for a in &g {
        for b in &g {
            w.push(a * b / (s * s));
        }
    }
    w
}

/// Single-scale SSIM of two `height x width` images with data range 1,
/// averaged over every fully-contained window position.
pub fn ssim(x: &[f64], reference: &[f64], height: usize, width: usize) -> Result<f64> {
    if x.len() != height * width || reference.len() != height * width {
        return Err(CstError::dims("ssim", &[x.len()], &[height * width]));
    }
    if height < SSIM_WINDOW || width < SSIM_WINDOW {
        return Err(CstError::Data(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, image is {height}x{width}"
        )));
    }
    let win = gaussian_window();
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let (oh, ow) = (height - SSIM_WINDOW + 1, width - SSIM_WINDOW + 1);
    let mut acc = 0.0;
    for oy in 0..oh {
        for ox in 0..ow {
            let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for ky in 0..SSIM_WINDOW {
                let row = (oy + ky) * width + ox;
                for kx in 0..SSIM_WINDOW {
                    let wt = win[ky * SSIM_WINDOW + kx];
                    let (a, b) = (x[row + kx], reference[row + kx]);
                    mx += wt * a;
                    my += wt * b;
                    sxx += wt * a * a;
                    syy += wt * b * b;
                    sxy += wt * a * b;
                }
            }
            let vx = sxx - mx * mx;
            let vy = syy - my * my;
            let cxy = sxy - mx * my;
            acc += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        }
    }
    Ok(acc / (oh * ow) as f64)
}

/// Mean of per-band SSIM.
pub fn ssim_cube(x: &HsiCube, reference: &HsiCube) -> Result<f64> {
    check_same("ssim_cube", x, reference)?;
    let mut total = 0.0;
    for n in 0..x.bands {
        total += ssim(&x.band(n), &reference.band(n), x.height, x.width)?;
    }
    Ok(total / x.bands as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SceneMetrics {
    pub scene: String,
    pub psnr_db: f64,
    pub ssim: f64,
    pub psnr_per_band: Vec<f64>,
}

impl SceneMetrics {
    pub fn measure(scene: impl Into<String>, x: &HsiCube, reference: &HsiCube) -> Result<Self> {
        Ok(SceneMetrics {
            scene: scene.into(),
            psnr_db: psnr(x, reference, 1.0)?,
            ssim: ssim_cube(x, reference)?,
            psnr_per_band: psnr_per_band(x, reference, 1.0)?,
        })
    }
}

/// Per-scene metrics with their arithmetic means.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct MetricReport {
    pub scenes: Vec<SceneMetrics>,
}

impl MetricReport {
    pub fn mean_psnr(&self) -> f64 {
        mean(self.scenes.iter().map(|s| s.psnr_db))
    }

    pub fn mean_ssim(&self) -> f64 {
        mean(self.scenes.iter().map(|s| s.ssim))
    }

    /// `scene,psnr_db,ssim` rows followed by a `mean` row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("scene,psnr_db,ssim\n");
        for m in &self.scenes {
            s.push_str(&format!("{},{:.6},{:.6}\n", m.scene, m.psnr_db, m.ssim));
        }
        s.push_str(&format!("mean,{:.6},{:.6}\n", self.mean_psnr(), self.mean_ssim()));
        s
    }

    /// `scene,band,psnr_db` rows.
    pub fn per_band_csv(&self) -> String {
        let mut s = String::from("scene,band,psnr_db\n");
        for m in &self.scenes {
            for (b, p) in m.psnr_per_band.iter().enumerate() {
                s.push_str(&format!("{},{b},{p:.6}\n", m.scene));
            }
        }
        s
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for v in it {
        s += v;
        n += 1;
    }
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}
