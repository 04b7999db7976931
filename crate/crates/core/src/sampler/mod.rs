//! Annealed Langevin sampling over a stack of smoothed models.
//!
//! Each level `i` runs `T` steps of
//! `x <- x + eta_i (score + likelihood grad) + sqrt(2 eta_i) eps` with
//! `eta_i = delta sigma_i^2 / sigma_L^2`, starting from `N(0, sigma_1^2 I)`.
//! Several sources can be sampled jointly; their sequences are concatenated
//! source-major and the measurement couples them.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::armodel::{NoisyModelStack, SharedModel};
use crate::error::{Error, Result};
use crate::measure::{Covariance, MeasurementModel};
use crate::smoothing::sequence_score;

pub mod registry;

pub use registry::{SampleOutput, SampleRequest, Sampler, SamplerRegistry};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    sigmas: Vec<f64>,
    delta: f64,
    steps_per_level: usize,
}

/// Geometric schedule from `sigma1` down to `sigma_l` over `levels` levels.
pub fn make_schedule(sigma1: f64, sigma_l: f64, levels: usize, delta: f64, steps: usize) -> Result<NoiseSchedule> {
    if !(sigma1 > sigma_l && sigma_l > 0.0) || !sigma1.is_finite() {
        return Err(Error::invalid(format!("need sigma1 > sigmaL > 0, got {sigma1}, {sigma_l}")));
    }
    if levels < 2 {
        return Err(Error::invalid("schedule needs at least two levels"));
    }
    let ratio = sigma_l / sigma1;
    let sigmas = (0..levels)
        .map(|i| {
            if i == levels - 1 {
                sigma_l
            } else {
                sigma1 * ratio.powf(i as f64 / (levels - 1) as f64)
            }
        })
        .collect();
    NoiseSchedule::new(sigmas, delta, steps)
}

impl NoiseSchedule {
    /// Schedule over explicit levels, e.g. those stored with a model stack.
    pub fn new(sigmas: Vec<f64>, delta: f64, steps_per_level: usize) -> Result<Self> {
        if sigmas.is_empty() || sigmas.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::invalid("noise levels must be positive and finite"));
        }
        if sigmas.windows(2).any(|w| !(w[0] > w[1])) {
            return Err(Error::invalid("noise levels must be strictly decreasing"));
        }
        if !(delta > 0.0) || !delta.is_finite() {
            return Err(Error::invalid(format!("delta must be positive, got {delta}")));
        }
        if steps_per_level == 0 {
            return Err(Error::invalid("steps per level must be positive"));
        }
        Ok(NoiseSchedule {
            sigmas,
            delta,
            steps_per_level,
        })
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn levels(&self) -> usize {
        self.sigmas.len()
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn steps_per_level(&self) -> usize {
        self.steps_per_level
    }

    pub fn with_steps(&self, steps: usize) -> Result<Self> {
        Self::new(self.sigmas.clone(), self.delta, steps)
    }

    pub fn sigma(&self, level: usize) -> f64 {
        self.sigmas[level]
    }

    /// Step size `delta sigma_i^2 / sigma_L^2`.
    pub fn eta(&self, level: usize) -> f64 {
        let last = self.sigmas[self.sigmas.len() - 1];
        self.delta * self.sigmas[level] * self.sigmas[level] / (last * last)
    }
}

/// The evolving real-valued sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceBuffer {
    data: Vec<f64>,
}

impl SequenceBuffer {
    pub fn new(data: Vec<f64>) -> Result<Self> {
        if let Some(&v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidSample(v));
        }
        Ok(SequenceBuffer { data })
    }

    /// `N(0, sigma^2 I)` initialization.
    pub fn gaussian<R: Rng + ?Sized>(n: usize, sigma: f64, rng: &mut R) -> Self {
        let data = (0..n).map(|_| sigma * rng.sample::<f64, _>(StandardNormal)).collect();
        SequenceBuffer { data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }
}

/// One coordinate of the Langevin update; shared with the block sampler so
/// both produce identical bits.
#[inline]
pub(crate) fn langevin_coord(x: f64, grad: f64, eta: f64, noise_scale: f64, eps: f64) -> f64 {
    x + eta * grad + noise_scale * eps
}

pub(crate) fn divergence(level: usize, step: usize, worker: Option<usize>, detail: impl Into<String>) -> Error {
    Error::Divergence {
        level,
        step,
        worker,
        detail: detail.into(),
    }
}

/// Langevin update with caller-supplied standard normal noise.
pub fn langevin_step_with_noise(
    x: &mut SequenceBuffer,
    score: &[f64],
    likelihood_grad: Option<&[f64]>,
    eta: f64,
    noise: &[f64],
) -> Result<()> {
    let n = x.len();
    if !(eta > 0.0) || !eta.is_finite() {
        return Err(Error::invalid(format!("step size must be positive, got {eta}")));
    }
    for len in [score.len(), noise.len()].into_iter().chain(likelihood_grad.map(|g| g.len())) {
        if len != n {
            return Err(Error::Dimension { expected: n, actual: len });
        }
    }
    if score.iter().chain(likelihood_grad.unwrap_or(&[])).any(|g| !g.is_finite()) {
        return Err(divergence(0, 0, None, "non-finite gradient"));
    }
    let scale = (2.0 * eta).sqrt();
    for k in 0..n {
        let g = match likelihood_grad {
            Some(l) => score[k] + l[k],
            None => score[k],
        };
        x.data[k] = langevin_coord(x.data[k], g, eta, scale, noise[k]);
    }
    if let Some(&v) = x.data.iter().find(|v| !v.is_finite()) {
        return Err(divergence(0, 0, None, format!("iterate became {v}")));
    }
    Ok(())
}

pub fn langevin_step<R: Rng + ?Sized>(
    x: &mut SequenceBuffer,
    score: &[f64],
    likelihood_grad: Option<&[f64]>,
    eta: f64,
    rng: &mut R,
) -> Result<()> {
    let noise: Vec<f64> = (0..x.len()).map(|_| rng.sample(StandardNormal)).collect();
    langevin_step_with_noise(x, score, likelihood_grad, eta, &noise)
}

/// Observation and likelihood settings for posterior sampling.
#[derive(Debug, Clone, PartialEq)]
pub struct Condition {
    pub measurement: MeasurementModel,
    pub y: Vec<f64>,
    pub covariance: Covariance,
}

impl Condition {
    pub fn new(measurement: MeasurementModel, y: Vec<f64>) -> Result<Self> {
        if y.len() != measurement.n_out() {
            return Err(Error::Dimension {
                expected: measurement.n_out(),
                actual: y.len(),
            });
        }
        if let Some(&v) = y.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidSample(v));
        }
        Ok(Condition {
            measurement,
            y,
            covariance: Covariance::Gram,
        })
    }

    pub fn with_covariance(mut self, covariance: Covariance) -> Self {
        self.covariance = covariance;
        self
    }
}

/// Checks that the stacks, schedule and condition describe the same problem.
pub(crate) fn validate(
    stacks: &[&NoisyModelStack],
    condition: Option<&Condition>,
    schedule: &NoiseSchedule,
    n: usize,
) -> Result<()> {
    if stacks.is_empty() {
        return Err(Error::invalid("at least one model stack is required"));
    }
    if n == 0 {
        return Err(Error::invalid("sequence length must be positive"));
    }
    for s in stacks {
        if s.sigmas() != schedule.sigmas() {
            return Err(Error::Config(format!(
                "schedule sigmas {:?} do not match the model stack's {:?}",
                schedule.sigmas(),
                s.sigmas()
            )));
        }
    }
    if let Some(c) = condition {
        if c.measurement.sources() != stacks.len() || c.measurement.source_len() != n {
            return Err(Error::Config(format!(
                "measurement expects {} sources of length {}, got {} of length {n}",
                c.measurement.sources(),
                c.measurement.source_len(),
                stacks.len()
            )));
        }
    }
    Ok(())
}

pub(crate) fn load_level(stacks: &[&NoisyModelStack], level: usize) -> Result<Vec<SharedModel>> {
    stacks.iter().map(|s| s.level(level)).collect()
}

/// Annealed Langevin sampling; returns the final unquantized sequence
/// (all sources concatenated).
pub fn run_pnf<R: Rng + ?Sized>(
    stacks: &[&NoisyModelStack],
    condition: Option<&Condition>,
    schedule: &NoiseSchedule,
    n: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    run_pnf_traced(stacks, condition, schedule, n, rng, &mut |_, _| {})
}

/// [`run_pnf`] that reports the iterate after every level.
pub fn run_pnf_traced<R: Rng + ?Sized>(
    stacks: &[&NoisyModelStack],
    condition: Option<&Condition>,
    schedule: &NoiseSchedule,
    n: usize,
    rng: &mut R,
    on_level: &mut dyn FnMut(usize, &[f64]),
) -> Result<Vec<f64>> {
    validate(stacks, condition, schedule, n)?;
    let sources = stacks.len();
    let mut x = SequenceBuffer::gaussian(sources * n, schedule.sigma(0), rng);
    let mut score = vec![0.0; sources * n];
    for level in 0..schedule.levels() {
        // one model per source resident at a time
        let models = load_level(stacks, level)?;
        let sigma = schedule.sigma(level);
        let eta = schedule.eta(level);
        for step in 0..schedule.steps_per_level() {
            let tag = |e: Error| match e {
                Error::Divergence { detail, .. } => divergence(level, step, None, detail),
                Error::InvalidSample(v) => divergence(level, step, None, format!("iterate became {v}")),
                Error::InvalidArgument(msg) => divergence(level, step, None, msg),
                other => other,
            };
            for (s, model) in models.iter().enumerate() {
                let seg = &x.as_slice()[s * n..(s + 1) * n];
                let (_, g) = sequence_score(model.as_ref(), seg, sigma).map_err(tag)?;
                score[s * n..(s + 1) * n].copy_from_slice(&g);
            }
            let lik = match condition {
                Some(c) => Some(
                    c.measurement
                        .smoothed_likelihood_grad(x.as_slice(), &c.y, sigma, c.covariance)?
                        .1,
                ),
                None => None,
            };
            langevin_step(&mut x, &score, lik.as_deref(), eta, rng).map_err(tag)?;
        }
        on_level(level, x.as_slice());
    }
    Ok(x.into_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn geometric_schedule() {
        let s = make_schedule(175.9, 0.15, 15, 0.05, 256).unwrap();
        assert_eq!(s.levels(), 15);
        let expected = 175.9 * (0.15f64 / 175.9).powf(1.0 / 14.0);
        assert!((s.sigma(1) - expected).abs() < 1e-12);
        assert!((s.sigma(1) - 106.1791107280).abs() < 1e-9);
        assert_eq!(s.sigma(14), 0.15);
        assert!((s.eta(14) - 0.05).abs() < 1e-15);
        assert!((s.eta(0) - 0.05 * (175.9f64 / 0.15).powi(2)).abs() < 1e-6);
        let img = make_schedule(1.0, 0.01, 19, 0.05, 10).unwrap();
        assert_eq!(img.sigma(0), 1.0);
        assert_eq!(img.sigma(18), 0.01);
    }

    #[test]
    fn schedule_rejects_bad_order() {
        assert!(make_schedule(0.1, 1.0, 10, 0.1, 1).is_err());
        assert!(make_schedule(1.0, 0.1, 1, 0.1, 1).is_err());
        assert!(make_schedule(1.0, 0.1, 3, -0.1, 1).is_err());
    }

    #[test]
    fn pure_diffusion_step() {
        let mut x = SequenceBuffer::new(vec![1.0, -2.0]).unwrap();
        let eps = [0.3, -0.7];
        langevin_step_with_noise(&mut x, &[0.0, 0.0], None, 0.02, &eps).unwrap();
        let s = (0.04f64).sqrt();
        assert_eq!(x.as_slice(), &[1.0 + s * 0.3, -2.0 + s * -0.7]);
    }

    #[test]
    fn diffusion_scales_with_root_eta() {
        let eps = [0.5, 1.5, -0.25];
        let norm = |eta: f64| {
            let mut x = SequenceBuffer::new(vec![0.0; 3]).unwrap();
            langevin_step_with_noise(&mut x, &[0.0; 3], None, eta, &eps).unwrap();
            x.as_slice().iter().map(|v| v * v).sum::<f64>().sqrt()
        };
        assert!((norm(0.08) / norm(0.02) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn non_finite_gradient_is_divergence() {
        let mut x = SequenceBuffer::new(vec![0.0]).unwrap();
        let err = langevin_step_with_noise(&mut x, &[f64::NAN], None, 0.1, &[0.0]).unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }));
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn quadratic_potential_stationary_variance() {
        // score -x / tau^2 with Euler-Maruyama has stationary variance
        // tau^2 / (1 - eta / (2 tau^2))
        let (tau, eta) = (1.0f64, 0.01f64);
        let expected = tau * tau / (1.0 - eta / (2.0 * tau * tau));
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let chains = 10;
        let mut x = SequenceBuffer::new(vec![0.0; chains]).unwrap();
        let (mut sum, mut sumsq, mut count) = (0.0, 0.0, 0usize);
        for step in 0..100_000 {
            let score: Vec<f64> = x.as_slice().iter().map(|v| -v / (tau * tau)).collect();
            langevin_step(&mut x, &score, None, eta, &mut rng).unwrap();
            if step >= 1000 {
                for &v in x.as_slice() {
                    sum += v;
                    sumsq += v * v;
                    count += 1;
                }
            }
        }
        let mean = sum / count as f64;
        let var = sumsq / count as f64 - mean * mean;
        assert!((var / expected - 1.0).abs() < 0.05, "variance {var}, expected {expected}");
        assert!((var / (tau * tau) - 1.0).abs() < 0.05);
    }
}
