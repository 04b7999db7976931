//! Structured linear measurements `y = A x` and their smoothed likelihood.
//!
//! Smoothing the prior with `N(0, sigma^2 I)` turns the Dirac likelihood
//! `delta(y - A x)` into `N(y; A x~, sigma^2 A A^T)`. For the three supported
//! operators `A A^T` is a multiple of the identity, so the Gram solve is a
//! scalar division.
//!
//! Inputs are laid out source-major: for a mixture of `s` sources of length
//! `n`, source `r` occupies `x[r n .. (r + 1) n]`.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::LN_2PI;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Operator {
    /// `y_t = sum_r weights[r] x_{r,t}`.
    Mix { weights: Vec<f64> },
    /// Keeps every `ratio`-th sample: `y_i = x[ratio (i + 1) - 1]`.
    Decimate { ratio: usize },
    /// Keeps the positions where the mask is set.
    Mask { mask: Vec<bool> },
}

/// Covariance of the smoothed likelihood.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Covariance {
    /// `sigma^2 A A^T`.
    #[default]
    Gram,
    /// `sigma^2 I`, ignoring the operator's Gram matrix.
    Isotropic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementModel {
    op: Operator,
    n: usize,
    // input index of each observed output, mask only
    observed: Vec<usize>,
    // output index per input position, mask only
    output_of: Vec<Option<usize>>,
}

impl MeasurementModel {
    /// `n` is the length of one source sequence.
    pub fn new(op: Operator, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("sequence length must be positive"));
        }
        let mut observed = Vec::new();
        let mut output_of = Vec::new();
        match &op {
            Operator::Mix { weights } => {
                if weights.is_empty() || weights.iter().any(|w| !w.is_finite()) {
                    return Err(Error::invalid("mixture needs finite weights for at least one source"));
                }
            }
            Operator::Decimate { ratio } => {
                if *ratio == 0 {
                    return Err(Error::invalid("decimation ratio must be positive"));
                }
            }
            Operator::Mask { mask } => {
                if mask.len() != n {
                    return Err(Error::Dimension {
                        expected: n,
                        actual: mask.len(),
                    });
                }
                output_of = vec![None; n];
                for (k, &m) in mask.iter().enumerate() {
                    if m {
                        output_of[k] = Some(observed.len());
                        observed.push(k);
                    }
                }
            }
        }
        Ok(MeasurementModel {
            op,
            n,
            observed,
            output_of,
        })
    }

    pub fn mix(weights: Vec<f64>, n: usize) -> Result<Self> {
        Self::new(Operator::Mix { weights }, n)
    }

    pub fn decimate(ratio: usize, n: usize) -> Result<Self> {
        Self::new(Operator::Decimate { ratio }, n)
    }

    pub fn mask(mask: Vec<bool>) -> Result<Self> {
        let n = mask.len();
        Self::new(Operator::Mask { mask }, n)
    }

    pub fn operator(&self) -> &Operator {
        &self.op
    }

    pub fn sources(&self) -> usize {
        match &self.op {
            Operator::Mix { weights } => weights.len(),
            _ => 1,
        }
    }

    /// Length of one source.
    pub fn source_len(&self) -> usize {
        self.n
    }

    pub fn n_in(&self) -> usize {
        self.sources() * self.n
    }

    pub fn n_out(&self) -> usize {
        match &self.op {
            Operator::Mix { .. } => self.n,
            Operator::Decimate { ratio } => self.n / ratio,
            Operator::Mask { .. } => self.observed.len(),
        }
    }

    /// `A A^T = gram_scale() I`.
    pub fn gram_scale(&self) -> f64 {
        match &self.op {
            Operator::Mix { weights } => weights.iter().map(|w| w * w).sum(),
            _ => 1.0,
        }
    }

    fn check_len(&self, got: usize, expected: usize) -> Result<()> {
        if got == expected {
            Ok(())
        } else {
            Err(Error::Dimension { expected, actual: got })
        }
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_len(x.len(), self.n_in())?;
        Ok(match &self.op {
            Operator::Mix { weights } => (0..self.n)
                .map(|t| weights.iter().enumerate().map(|(r, w)| w * x[r * self.n + t]).sum())
                .collect(),
            Operator::Decimate { ratio } => (0..self.n_out()).map(|i| x[ratio * (i + 1) - 1]).collect(),
            Operator::Mask { .. } => self.observed.iter().map(|&k| x[k]).collect(),
        })
    }

    pub fn adjoint(&self, u: &[f64]) -> Result<Vec<f64>> {
        self.check_len(u.len(), self.n_out())?;
        let mut out = vec![0.0; self.n_in()];
        match &self.op {
            Operator::Mix { weights } => {
                for (r, w) in weights.iter().enumerate() {
                    for t in 0..self.n {
                        out[r * self.n + t] = w * u[t];
                    }
                }
            }
            Operator::Decimate { ratio } => {
                for (i, &v) in u.iter().enumerate() {
                    out[ratio * (i + 1) - 1] = v;
                }
            }
            Operator::Mask { .. } => {
                for (&k, &v) in self.observed.iter().zip(u) {
                    out[k] = v;
                }
            }
        }
        Ok(out)
    }

    /// Outputs whose support intersects the input range `j..j + c`.
    pub fn local_blocks(&self, j: usize, c: usize) -> Vec<usize> {
        let end = (j + c).min(self.n_in());
        if j >= end {
            return Vec::new();
        }
        match &self.op {
            Operator::Mix { .. } => {
                let mut out: Vec<usize> = (j..end).map(|k| k % self.n).collect();
                out.sort_unstable();
                out.dedup();
                out
            }
            Operator::Decimate { ratio } => {
                let lo = (j + 1).div_ceil(*ratio).max(1);
                let hi = (end / ratio).min(self.n_out());
                (lo..=hi).filter(|&q| q >= 1).map(|q| q - 1).collect()
            }
            Operator::Mask { .. } => (j..end).filter_map(|k| self.output_of[k]).collect(),
        }
    }

    fn variance(&self, sigma: f64, cov: Covariance) -> Result<f64> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::invalid(format!("sigma must be positive, got {sigma}")));
        }
        let g = self.gram_scale();
        if !(g > 0.0) {
            return Err(Error::SingularGram(format!("A A^T = {g} I")));
        }
        Ok(match cov {
            Covariance::Gram => sigma * sigma * g,
            Covariance::Isotropic => sigma * sigma,
        })
    }

    /// Residual `y_i - (A x)_i` of one output, reading inputs through `get`.
    fn residual_at(&self, i: usize, y: &[f64], get: &dyn Fn(usize) -> f64) -> f64 {
        let pred = match &self.op {
            Operator::Mix { weights } => weights.iter().enumerate().map(|(r, w)| w * get(r * self.n + i)).sum(),
            Operator::Decimate { ratio } => get(ratio * (i + 1) - 1),
            Operator::Mask { .. } => get(self.observed[i]),
        };
        y[i] - pred
    }

    /// Likelihood gradient for input coordinates `range`, reading only the
    /// inputs that share an output with them. Every coordinate uses the same
    /// arithmetic as [`smoothed_likelihood_grad`](Self::smoothed_likelihood_grad),
    /// so block gradients tile the full gradient exactly.
    pub fn block_grad(
        &self,
        get: &dyn Fn(usize) -> f64,
        y: &[f64],
        sigma: f64,
        cov: Covariance,
        range: Range<usize>,
    ) -> Result<Vec<f64>> {
        self.check_len(y.len(), self.n_out())?;
        if range.end > self.n_in() || range.start > range.end {
            return Err(Error::invalid(format!("block {range:?} outside 0..{}", self.n_in())));
        }
        let v = self.variance(sigma, cov)?;
        Ok(range.map(|k| self.grad_coord(k, y, v, get)).collect())
    }

    fn grad_coord(&self, k: usize, y: &[f64], v: f64, get: &dyn Fn(usize) -> f64) -> f64 {
        match &self.op {
            Operator::Mix { weights } => {
                let (r, t) = (k / self.n, k % self.n);
                weights[r] * self.residual_at(t, y, get) / v
            }
            Operator::Decimate { ratio } => {
                if (k + 1) % ratio == 0 && (k + 1) / ratio <= self.n_out() {
                    self.residual_at((k + 1) / ratio - 1, y, get) / v
                } else {
                    0.0
                }
            }
            Operator::Mask { .. } => match self.output_of[k] {
                Some(i) => self.residual_at(i, y, get) / v,
                None => 0.0,
            },
        }
    }

    /// `log N(y; A x, sigma^2 A A^T)` (or `sigma^2 I`) and its gradient in `x`.
    pub fn smoothed_likelihood_grad(&self, x: &[f64], y: &[f64], sigma: f64, cov: Covariance) -> Result<(f64, Vec<f64>)> {
        self.check_len(x.len(), self.n_in())?;
        self.check_len(y.len(), self.n_out())?;
        let v = self.variance(sigma, cov)?;
        let get = |k: usize| x[k];
        let ll = (0..self.n_out())
            .map(|i| {
                let r = self.residual_at(i, y, &get);
                -0.5 * r * r / v - 0.5 * (LN_2PI + v.ln())
            })
            .sum();
        let grad = (0..self.n_in()).map(|k| self.grad_coord(k, y, v, &get)).collect();
        Ok((ll, grad))
    }

    /// `max_i |(A x)_i - y_i|`.
    pub fn residual_inf(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        let ax = self.apply(x)?;
        self.check_len(y.len(), ax.len())?;
        Ok(ax.iter().zip(y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
    }
}

/// Parses a mask file: one `0` or `1` per line, blank lines ignored.
pub fn parse_mask(text: &str) -> Result<Vec<bool>> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .enumerate()
        .map(|(i, l)| match l {
            "0" => Ok(false),
            "1" => Ok(true),
            other => Err(Error::Config(format!("mask line {}: expected 0 or 1, got '{other}'", i + 1))),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn apply_examples() {
        let ones = MeasurementModel::mask(vec![true; 3]).unwrap();
        assert_eq!(ones.apply(&[1.0, 2.0, 3.0]).unwrap(), vec![1.0, 2.0, 3.0]);
        let dec = MeasurementModel::decimate(2, 4).unwrap();
        assert_eq!(dec.apply(&[10.0, 20.0, 30.0, 40.0]).unwrap(), vec![20.0, 40.0]);
        let mix = MeasurementModel::mix(vec![0.5, 0.5], 2).unwrap();
        assert_eq!(mix.apply(&[1.0, 1.0, 0.0, 2.0]).unwrap(), vec![0.5, 1.5]);
        assert!(mix.apply(&[1.0]).is_err());
    }

    #[test]
    fn decimate_floors_output_length() {
        let dec = MeasurementModel::decimate(3, 7).unwrap();
        assert_eq!(dec.n_out(), 2);
        assert_eq!(dec.apply(&[0., 1., 2., 3., 4., 5., 6.]).unwrap(), vec![2.0, 5.0]);
    }

    #[test]
    fn mask_gradient() {
        let m = MeasurementModel::mask(vec![true, false, true]).unwrap();
        let (_, g) = m
            .smoothed_likelihood_grad(&[0.1, 0.2, 0.3], &[1.0, -1.0], 0.5, Covariance::Gram)
            .unwrap();
        assert!((g[0] - 0.9 / 0.25).abs() < 1e-15);
        assert_eq!(g[1], 0.0);
        assert!((g[2] - (-1.3 / 0.25)).abs() < 1e-15);
    }

    #[test]
    fn mix_gradient_by_hand() {
        let m = MeasurementModel::mix(vec![0.5, 0.5], 1).unwrap();
        let (_, g) = m.smoothed_likelihood_grad(&[0.0, 0.0], &[1.0], 1.0, Covariance::Gram).unwrap();
        assert_eq!(g, vec![1.0, 1.0]);
        let (_, g) = m.smoothed_likelihood_grad(&[0.0, 0.0], &[1.0], 1.0, Covariance::Isotropic).unwrap();
        assert_eq!(g, vec![0.5, 0.5]);
    }

    #[test]
    fn satisfied_constraint_has_zero_gradient() {
        let m = MeasurementModel::decimate(2, 4).unwrap();
        let x = [0.3, -0.2, 0.7, 0.1];
        let y = m.apply(&x).unwrap();
        let (_, g) = m.smoothed_likelihood_grad(&x, &y, 0.1, Covariance::Gram).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn singular_gram_errors() {
        let m = MeasurementModel::mix(vec![0.0, 0.0], 2).unwrap();
        assert!(matches!(
            m.smoothed_likelihood_grad(&[0.0; 4], &[0.0; 2], 1.0, Covariance::Gram),
            Err(Error::SingularGram(_))
        ));
    }

    #[test]
    fn local_block_examples() {
        let mask = MeasurementModel::mask(vec![true, false, true, true, false]).unwrap();
        assert_eq!(mask.local_blocks(1, 3), vec![1, 2]);
        let dec = MeasurementModel::decimate(4, 32).unwrap();
        // outputs i with 4(i+1)-1 in 8..16
        assert_eq!(dec.local_blocks(8, 8), vec![2, 3]);
        let mix = MeasurementModel::mix(vec![0.5, 0.5], 10).unwrap();
        assert_eq!(mix.local_blocks(13, 4), vec![3, 4, 5, 6]);
    }

    #[test]
    fn mask_file_parsing() {
        assert_eq!(parse_mask("1\n0\n\n1\n").unwrap(), vec![true, false, true]);
        assert!(parse_mask("1\n2\n").is_err());
    }
}
