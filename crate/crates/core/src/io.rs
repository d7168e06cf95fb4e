//! Raster files, PGM images and small text helpers.

use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CstError, Result};
use crate::optics::{CodedAperture, HsiCube, Measurement};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RasterHeader {
    dims: Vec<usize>,
    dtype: String,
    order: String,
    bands_last: bool,
}

/// Row-major f32 array of 1 to 4 dimensions.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Raster {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if dims.is_empty() || dims.len() > 4 {
            return Err(CstError::Data(format!("rasters have 1 to 4 dims, got {}", dims.len())));
        }
        if dims.iter().product::<usize>() != data.len() {
            return Err(CstError::dims("raster", &dims, &[data.len()]));
        }
        Ok(Raster { dims, data })
    }

    pub fn from_f64(dims: Vec<usize>, data: &[f64]) -> Result<Self> {
        Raster::new(dims, data.iter().map(|&v| v as f32).collect())
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    pub fn from_cube(c: &HsiCube) -> Self {
        Raster::from_f64(c.dims().to_vec(), &c.data).expect("cube dims")
    }

    pub fn to_cube(&self) -> Result<HsiCube> {
        match self.dims[..] {
            [h, w, b] => HsiCube::new(h, w, b, self.to_f64()),
            _ => Err(CstError::Data(format!(
                "expected an H x W x bands cube, got dims {:?}",
                self.dims
            ))),
        }
    }

    pub fn from_measurement(m: &Measurement) -> Self {
        Raster::from_f64(vec![m.height, m.width], &m.data).expect("measurement dims")
    }

    pub fn to_measurement(&self, shift: usize) -> Result<Measurement> {
        match self.dims[..] {
            [h, w] => Measurement::new(h, w, shift, self.to_f64()),
            _ => Err(CstError::Data(format!(
                "expected a 2-D measurement, got dims {:?}",
                self.dims
            ))),
        }
    }

    pub fn from_aperture(a: &CodedAperture) -> Self {
        Raster::from_f64(vec![a.height, a.width], &a.mask2d).expect("aperture dims")
    }

    pub fn to_aperture(&self) -> Result<CodedAperture> {
        match self.dims[..] {
            [h, w] => CodedAperture::new(h, w, self.to_f64()),
            _ => Err(CstError::Data(format!(
                "expected a 2-D aperture, got dims {:?}",
                self.dims
            ))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = RasterHeader {
            dims: self.dims.clone(),
            dtype: "f32".into(),
            order: "row-major".into(),
            bands_last: true,
        };
        let mut out = serde_json::to_vec(&header).expect("header serializes");
        out.push(b'\n');
        out.reserve(self.data.len() * 4);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_reader(r: impl Read) -> Result<Self> {
        let mut r = BufReader::new(r);
        let mut line = String::new();
        r.read_line(&mut line)?;
        let h: RasterHeader =
            serde_json::from_str(&line).map_err(|e| CstError::Data(format!("bad raster header: {e}")))?;
        if h.dtype != "f32" || h.order != "row-major" || !h.bands_last {
            return Err(CstError::Data(format!(
                "unsupported raster layout dtype={} order={} bands_last={}",
                h.dtype, h.order, h.bands_last
            )));
        }
        let mut payload = Vec::new();
        r.read_to_end(&mut payload)?;
        let n: usize = h.dims.iter().product();
        if payload.len() != n * 4 {
            return Err(CstError::Data(format!(
                "raster payload has {} bytes, dims {:?} need {}",
                payload.len(),
                h.dims,
                n * 4
            )));
        }
        let data = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Raster::new(h.dims, data)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let f =
            std::fs::File::open(path).map_err(|e| CstError::Data(format!("cannot open {}: {e}", path.display())))?;
        Raster::from_reader(f)
    }
}

/// Binary 8-bit PGM ("P5"), scaled so the maximum maps to 255. Negative
/// values clip to 0; an all-nonpositive image is all zeros.
pub fn pgm_bytes(height: usize, width: usize, values: &[f64]) -> Result<Vec<u8>> {
    if values.len() != height * width {
        return Err(CstError::dims("pgm", &[height, width], &[values.len()]));
    }
    let max = values.iter().cloned().fold(0.0f64, f64::max);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| {
        if max > 0.0 {
            (v.max(0.0) / max * 255.0).round().min(255.0) as u8
        } else {
            0
        }
    }));
    Ok(out)
}

pub fn write_pgm(path: &Path, height: usize, width: usize, values: &[f64]) -> Result<()> {
    std::fs::write(path, pgm_bytes(height, width, values)?)?;
    Ok(())
}
