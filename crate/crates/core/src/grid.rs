//! Discrete support of the autoregressive models.
//!
//! A [`Grid`] holds the ordered bin centers `e_0 < e_1 < ... < e_{d-1}` in signal
//! units. Bin indices are 0-based throughout the crate. Quantization maps a real
//! value to the nearest center, resolving exact ties toward the smaller index.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Amplitude companding applied before uniform binning.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Companding {
    Linear,
    MuLaw { mu: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    values: Vec<f64>,
    companding: Companding,
}

/// Logarithmic companding `sign(x) ln(1 + mu|x|) / ln(1 + mu)`.
pub fn mu_law_encode(x: f64, mu: f64) -> Result<f64> {
    if !(mu > 0.0) {
        return Err(Error::invalid(format!("mu must be positive, got {mu}")));
    }
    if !(x.abs() <= 1.0) {
        return Err(Error::Range { value: x });
    }
    Ok(x.signum() * (mu * x.abs()).ln_1p() / mu.ln_1p())
}

/// Inverse of [`mu_law_encode`].
pub fn mu_law_decode(u: f64, mu: f64) -> Result<f64> {
    if !(mu > 0.0) {
        return Err(Error::invalid(format!("mu must be positive, got {mu}")));
    }
    if !(u.abs() <= 1.0) {
        return Err(Error::Range { value: u });
    }
    Ok(u.signum() * ((u.abs() * mu.ln_1p()).exp_m1()) / mu)
}

impl Grid {
    /// `d` centers `lo + (k + 1/2)(hi - lo)/d` for `k = 0..d`.
    pub fn linear(d: usize, lo: f64, hi: f64) -> Result<Self> {
        if d == 0 {
            return Err(Error::invalid("grid needs at least one bin"));
        }
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::invalid(format!("bad grid range [{lo}, {hi}]")));
        }
        let width = (hi - lo) / d as f64;
        let values = (0..d).map(|k| lo + (k as f64 + 0.5) * width).collect();
        Ok(Grid {
            values,
            companding: Companding::Linear,
        })
    }

    /// Uniform grid in companded space over [-1, 1], mapped back through the
    /// inverse companding law.
    pub fn mu_law(d: usize, mu: f64) -> Result<Self> {
        let companded = Grid::linear(d, -1.0, 1.0)?;
        let values = companded
            .values
            .iter()
            .map(|&u| mu_law_decode(u, mu))
            .collect::<Result<Vec<_>>>()?;
        Ok(Grid {
            values,
            companding: Companding::MuLaw { mu },
        })
    }

    pub fn from_values(values: Vec<f64>, companding: Companding) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("grid needs at least one bin"));
        }
        if values.iter().any(|v| !v.is_finite()) || values.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::invalid("grid values must be finite and strictly increasing"));
        }
        Ok(Grid { values, companding })
    }

    /// Default 8-bit audio grid: 256 mu-law bins with mu = 255.
    pub fn audio_default() -> Self {
        Grid::mu_law(256, 255.0).expect("static grid parameters")
    }

    pub fn d(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value(&self, k: usize) -> f64 {
        self.values[k]
    }

    pub fn companding(&self) -> Companding {
        self.companding
    }

    pub fn min(&self) -> f64 {
        self.values[0]
    }

    pub fn max(&self) -> f64 {
        self.values[self.values.len() - 1]
    }

    /// Span between the outermost centers.
    pub fn span(&self) -> f64 {
        self.max() - self.min()
    }

    /// Smallest gap between neighbouring centers.
    pub fn min_spacing(&self) -> f64 {
        self.values
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(f64::INFINITY, f64::min)
    }

    /// Index of the center `e_{ceil(d/2)}` (1-based), used to pad contexts
    /// that reach before the start of a sequence.
    pub fn sentinel_index(&self) -> usize {
        self.d().div_ceil(2) - 1
    }

    pub fn sentinel(&self) -> f64 {
        self.values[self.sentinel_index()]
    }

    /// Nearest bin center; ties go to the smaller index.
    pub fn quantize(&self, x: f64) -> Result<usize> {
        if !x.is_finite() {
            return Err(Error::InvalidSample(x));
        }
        Ok(self.nearest(x))
    }

    fn nearest(&self, x: f64) -> usize {
        let v = &self.values;
        let hi = v.partition_point(|&e| e < x);
        if hi == 0 {
            return 0;
        }
        if hi == v.len() {
            return v.len() - 1;
        }
        let lo = hi - 1;
        if x - v[lo] <= v[hi] - x {
            lo
        } else {
            hi
        }
    }

    pub fn quantize_all(&self, xs: &[f64]) -> Result<Vec<usize>> {
        xs.iter().map(|&x| self.quantize(x)).collect()
    }

    pub fn dequantize(&self, idx: &[usize]) -> Vec<f64> {
        idx.iter().map(|&k| self.values[k]).collect()
    }

    /// Snap every value to its bin center.
    pub fn snap(&self, xs: &[f64]) -> Result<Vec<f64>> {
        Ok(self.dequantize(&self.quantize_all(xs)?))
    }

    /// Binary grid block: `d` as u32 LE, companding tag byte (0 linear,
    /// 1 mu-law followed by mu as f64 LE), then `d` f64 LE centers.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&(self.d() as u32).to_le_bytes())?;
        match self.companding {
            Companding::Linear => w.write_all(&[0u8])?,
            Companding::MuLaw { mu } => {
                w.write_all(&[1u8])?;
                w.write_all(&mu.to_le_bytes())?;
            }
        }
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let d = read_u32(r)? as usize;
        let mut tag = [0u8; 1];
        r.read_exact(&mut tag)?;
        let companding = match tag[0] {
            0 => Companding::Linear,
            1 => Companding::MuLaw { mu: read_f64(r)? },
            t => return Err(Error::Format(format!("unknown companding tag {t}"))),
        };
        let values = (0..d).map(|_| read_f64(r)).collect::<Result<Vec<_>>>()?;
        Grid::from_values(values, companding).map_err(|e| Error::Format(e.to_string()))
    }
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

pub(crate) fn read_f32<R: Read>(r: &mut R) -> Result<f32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(f32::from_le_bytes(b))
}
