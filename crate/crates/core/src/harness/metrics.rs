//! Evaluation metrics.

use crate::armodel::{log_likelihood, ConditionalModel};
use crate::error::{Error, Result};
use crate::numeric::median;

pub const SI_SDR_CAP_DB: f64 = 60.0;
pub const PSNR_CAP_DB: f64 = 99.0;

fn check_lengths(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Dimension {
            expected: b.len(),
            actual: a.len(),
        });
    }
    Ok(())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Scale-invariant signal-to-distortion ratio in dB, capped at 60 dB.
pub fn si_sdr(estimate: &[f64], target: &[f64]) -> Result<f64> {
    check_lengths(estimate, target)?;
    let tt = dot(target, target);
    if tt == 0.0 {
        return Err(Error::invalid("SI-SDR target is identically zero"));
    }
    let alpha = dot(estimate, target) / tt;
    let signal = alpha * alpha * tt;
    let distortion: f64 = estimate
        .iter()
        .zip(target)
        .map(|(e, t)| (alpha * t - e).powi(2))
        .sum();
    if distortion == 0.0 {
        return Ok(SI_SDR_CAP_DB);
    }
    Ok((10.0 * (signal / distortion).log10()).min(SI_SDR_CAP_DB))
}

/// Peak signal-to-noise ratio in dB, capped at 99 dB.
pub fn psnr(estimate: &[f64], target: &[f64], peak: f64) -> Result<f64> {
    check_lengths(estimate, target)?;
    if estimate.is_empty() {
        return Err(Error::invalid("PSNR of empty sequences"));
    }
    let mse = estimate.iter().zip(target).map(|(e, t)| (e - t).powi(2)).sum::<f64>() / estimate.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB))
}

/// Noiseless log-likelihood of each sample after quantization.
pub fn sample_log_likelihoods(model: &dyn ConditionalModel, samples: &[Vec<f64>]) -> Result<Vec<f64>> {
    samples
        .iter()
        .map(|s| log_likelihood(model, &model.grid().quantize_all(s)?))
        .collect()
}

/// Median noiseless log-likelihood (nats) of quantized samples.
pub fn eval_ll(model: &dyn ConditionalModel, samples: &[Vec<f64>]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::invalid("no samples to evaluate"));
    }
    Ok(median(&sample_log_likelihoods(model, samples)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::armodel::TabularMarkovModel;
    use crate::grid::Grid;

    #[test]
    fn si_sdr_caps() {
        let t = [1.0, -2.0, 3.0];
        assert_eq!(si_sdr(&t, &t).unwrap(), 60.0);
        let scaled: Vec<f64> = t.iter().map(|v| 2.0 * v).collect();
        assert_eq!(si_sdr(&scaled, &t).unwrap(), 60.0);
        assert!(si_sdr(&t, &[0.0; 3]).is_err());
    }

    #[test]
    fn si_sdr_orthogonal_noise() {
        let t = [10.0, 0.0];
        let e = [10.0, 1.0];
        assert!((si_sdr(&e, &t).unwrap() - 20.0).abs() < 1e-12);
    }

    #[test]
    fn psnr_examples() {
        let t = [0.1, 0.5, -0.3];
        assert_eq!(psnr(&t, &t, 1.0).unwrap(), 99.0);
        let e: Vec<f64> = t.iter().map(|v| v + 0.1).collect();
        assert!((psnr(&e, &t, 1.0).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn uniform_model_likelihood() {
        let m = TabularMarkovModel::uniform(Grid::linear(16, -1.0, 1.0).unwrap(), 1).unwrap();
        let samples = vec![vec![0.3; 64], vec![-0.9; 64]];
        let ll = eval_ll(&m, &samples).unwrap();
        assert!((ll + 64.0 * 16f64.ln()).abs() < 1e-9);
    }
}
