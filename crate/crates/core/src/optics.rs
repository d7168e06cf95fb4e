//! CASSI forward model: coded-aperture modulation, dispersion shear, detector
//! integration, shot noise, and the shift-back initialization.
//!
//! Cubes are stored channels-last (`[H, W, bands]`, row-major). Dispersion
//! places band `n` at a column offset of `shift * n` pixels, band 0 being the
//! undeviated reference.

use crate::error::{CstError, Result};
use crate::rng::{streams, Stream};
use crate::tensor::{Graph, Tensor, Var};

/// Spectral cube `H x W x bands`, channels-last.
#[derive(Clone, Debug, PartialEq)]
pub struct HsiCube {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub data: Vec<f64>,
}

impl HsiCube {
    pub fn new(height: usize, width: usize, bands: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * bands {
            return Err(CstError::dims("hsi_cube", &[height, width, bands], &[data.len()]));
        }
        Ok(HsiCube {
            height,
            width,
            bands,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, bands: usize) -> Self {
        HsiCube {
            height,
            width,
            bands,
            data: vec![0.0; height * width * bands],
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.height, self.width, self.bands]
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, n: usize) -> f64 {
        self.data[(y * self.width + x) * self.bands + n]
    }

    #[inline]
    pub fn at_mut(&mut self, y: usize, x: usize, n: usize) -> &mut f64 {
        &mut self.data[(y * self.width + x) * self.bands + n]
    }

    /// Copy of one band as a row-major `H x W` plane.
    pub fn band(&self, n: usize) -> Vec<f64> {
        self.data.iter().skip(n).step_by(self.bands).copied().collect()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.height, self.width, self.bands], self.data.clone()).expect("cube dims")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.shape() {
            &[h, w, c] => HsiCube::new(h, w, c, t.data().to_vec()),
            s => Err(CstError::dims("hsi_cube", s, &[0, 0, 0])),
        }
    }
}

/// Coded aperture `M*` (`H x W`); the 3-D mask is its per-band replication.
#[derive(Clone, Debug, PartialEq)]
pub struct CodedAperture {
    pub height: usize,
    pub width: usize,
    pub mask2d: Vec<f64>,
}

impl CodedAperture {
    pub fn new(height: usize, width: usize, mask2d: Vec<f64>) -> Result<Self> {
        if mask2d.len() != height * width {
            return Err(CstError::dims("coded_aperture", &[height, width], &[mask2d.len()]));
        }
        if mask2d.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(CstError::Data("coded aperture values must lie in [0, 1]".into()));
        }
        Ok(CodedAperture { height, width, mask2d })
    }

    pub fn ones(height: usize, width: usize) -> Self {
        CodedAperture {
            height,
            width,
            mask2d: vec![1.0; height * width],
        }
    }

    /// i.i.d. Bernoulli(0.5) binary mask.
    pub fn random(height: usize, width: usize, seed: u64) -> Self {
        let mut rng = Stream::new(seed, streams::CODED_APERTURE);
        CodedAperture {
            height,
            width,
            mask2d: (0..height * width)
                .map(|_| if rng.bernoulli(0.5) { 1.0 } else { 0.0 })
                .collect(),
        }
    }

    pub fn mask3d(&self, bands: usize) -> HsiCube {
        let mut data = Vec::with_capacity(self.mask2d.len() * bands);
        for &m in &self.mask2d {
            data.extend(std::iter::repeat_n(m, bands));
        }
        HsiCube {
            height: self.height,
            width: self.width,
            bands,
            data,
        }
    }
}

/// 2-D detector image `H x (W + shift*(bands-1))`.
#[derive(Clone, Debug, PartialEq)]
pub struct Measurement {
    pub height: usize,
    pub width: usize,
    pub shift: usize,
    pub data: Vec<f64>,
}

impl Measurement {
    pub fn new(height: usize, width: usize, shift: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(CstError::dims("measurement", &[height, width], &[data.len()]));
        }
        Ok(Measurement {
            height,
            width,
            shift,
            data,
        })
    }

    /// Scene width implied by `bands`, or an error if the geometry is inconsistent.
    pub fn scene_width(&self, bands: usize) -> Result<usize> {
        let extra = self.shift * bands.saturating_sub(1);
        if bands == 0 || self.width < extra + 1 {
            return Err(CstError::Config(format!(
                "measurement width {} too small for {} bands at shift {}",
                self.width, bands, self.shift
            )));
        }
        Ok(self.width - extra)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.height, self.width], self.data.clone()).expect("measurement dims")
    }
}

/// Measurement width for a scene of width `width`.
pub fn measurement_width(width: usize, shift: usize, bands: usize) -> usize {
    width + shift * bands.saturating_sub(1)
}

/// Additive noise applied after integration.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct NoiseSpec {
    /// 11-bit Poisson shot noise drawn from this seed.
    pub shot_seed: Option<u64>,
    /// Gaussian read noise `(std, seed)`; off unless set.
    pub read_noise: Option<(f64, u64)>,
}

impl NoiseSpec {
    pub fn none() -> Self {
        NoiseSpec::default()
    }

    pub fn shot11(seed: u64) -> Self {
        NoiseSpec {
            shot_seed: Some(seed),
            read_noise: None,
        }
    }
}

/// Per-band multiplication by the coded aperture.
pub fn modulate(f: &HsiCube, m: &CodedAperture) -> Result<HsiCube> {
    if (f.height, f.width) != (m.height, m.width) {
        return Err(CstError::dims("modulate", &f.dims(), &[m.height, m.width]));
    }
    let mut out = f.clone();
    for (site, &mv) in out.data.chunks_mut(f.bands).zip(&m.mask2d) {
        site.iter_mut().for_each(|v| *v *= mv);
    }
    Ok(out)
}

/// Shears band `n` by `shift * n` columns into a zero cube of width
/// `W + shift * (bands - 1)`.
pub fn disperse(fp: &HsiCube, shift: usize) -> HsiCube {
    let wide = measurement_width(fp.width, shift, fp.bands);
    let mut out = HsiCube::zeros(fp.height, wide, fp.bands);
    for y in 0..fp.height {
        for x in 0..fp.width {
            for n in 0..fp.bands {
                *out.at_mut(y, x + shift * n, n) = fp.at(y, x, n);
            }
        }
    }
    out
}

/// Sums the sheared bands onto the detector, plus an optional noise field.
pub fn integrate(fpp: &HsiCube, noise: Option<&[f64]>, shift: usize) -> Result<Measurement> {
    let mut data: Vec<f64> = fpp.data.chunks(fpp.bands).map(|s| s.iter().sum()).collect();
    if let Some(g) = noise {
        if g.len() != data.len() {
            return Err(CstError::dims("integrate", &[fpp.height, fpp.width], &[g.len()]));
        }
        data.iter_mut().zip(g).for_each(|(d, g)| *d += g);
    }
    Measurement::new(fpp.height, fpp.width, shift, data)
}

/// `integrate(disperse(modulate(f, m), shift))` followed by the configured noise.
pub fn forward_measure(f: &HsiCube, m: &CodedAperture, shift: usize, noise: NoiseSpec) -> Result<Measurement> {
    let fp = modulate(f, m)?;
    let fpp = disperse(&fp, shift);
    let mut y = integrate(&fpp, None, shift)?;
    if let Some((std, seed)) = noise.read_noise {
        let mut rng = Stream::new(seed, streams::SHOT_NOISE + 100);
        y.data.iter_mut().for_each(|v| *v += std * rng.normal());
    }
    if let Some(seed) = noise.shot_seed {
        if noise.read_noise.is_some() {
            y.data.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        y = shot_noise_11bit(&y, seed)?;
    }
    Ok(y)
}

/// Rescales so the peak maps to 2047, draws Poisson counts per pixel, and
/// rescales back.
pub fn shot_noise_11bit(y: &Measurement, seed: u64) -> Result<Measurement> {
    if y.data.iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(CstError::Data(
            "shot noise needs a finite nonnegative measurement".into(),
        ));
    }
    let peak = y.data.iter().copied().fold(0.0, f64::max);
    if peak == 0.0 {
        return Ok(y.clone());
    }
    let scale = 2047.0 / peak;
    let mut rng = Stream::new(seed, streams::SHOT_NOISE);
    let data = y.data.iter().map(|&v| rng.poisson(v * scale) / scale).collect();
    Measurement::new(y.height, y.width, y.shift, data)
}

/// Source column in the measurement for band `n`, row `y`, column `x`.
fn shift_back_indices(height: usize, width: usize, bands: usize, shift: usize, wide: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(height * width * bands);
    for y in 0..height {
        for x in 0..width {
            for n in 0..bands {
                idx.push(y * wide + x + shift * n);
            }
        }
    }
    idx
}

/// Inverse shear: `H(y, x, n) = Y(y, x + shift * n)`.
pub fn shift_back(y: &Measurement, bands: usize) -> Result<HsiCube> {
    let width = y.scene_width(bands)?;
    let idx = shift_back_indices(y.height, width, bands, y.shift, y.width);
    let data = idx.into_iter().map(|i| y.data[i]).collect();
    HsiCube::new(y.height, width, bands, data)
}

/// Recorded shift-back of a `[H, W']` measurement node into `[H, W, bands]`.
pub fn shift_back_var(g: &mut Graph, y: Var, shift: usize, bands: usize) -> Result<Var> {
    let (h, wide) = match g.shape(y) {
        &[h, w] => (h, w),
        s => return Err(CstError::dims("shift_back", s, &[0, 0])),
    };
    let extra = shift * bands.saturating_sub(1);
    if bands == 0 || wide <= extra {
        return Err(CstError::Config(format!(
            "measurement width {wide} too small for {bands} bands at shift {shift}"
        )));
    }
    let width = wide - extra;
    let idx = shift_back_indices(h, width, bands, shift, wide);
    let flat = g.reshape(y, &[h * wide, 1])?;
    let picked = g.gather(flat, &idx)?;
    g.reshape(picked, &[h, width, bands])
}
