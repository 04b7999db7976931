//! Exact answers on tiny instances by enumerating every discrete sequence.
//!
//! Everything here works in log space with max-shifting, and refuses to run
//! when the number of configurations exceeds [`MAX_CONFIGURATIONS`].

use std::sync::Arc;

use crate::armodel::{check_finite, ConditionalModel, Forward, NoisyModelStack, SharedModel, TabularMarkovModel};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::measure::{Covariance, MeasurementModel};
use crate::numeric::{log_normal, logsumexp, LOG_FLOOR};

pub const MAX_CONFIGURATIONS: usize = 1 << 20;

fn check_budget(d: usize, n: usize) -> Result<usize> {
    let count = (d as f64).powi(n as i32);
    if count > MAX_CONFIGURATIONS as f64 {
        return Err(Error::Budget {
            configurations: count,
            limit: MAX_CONFIGURATIONS,
        });
    }
    Ok(count as usize)
}

/// Digits of configuration `c`, first position most significant.
pub fn decode_config(mut c: usize, d: usize, n: usize, out: &mut [usize]) {
    for i in (0..n).rev() {
        out[i] = c % d;
        c /= d;
    }
}

pub fn encode_config(idx: &[usize], d: usize) -> usize {
    idx.iter().fold(0, |acc, &k| acc * d + k)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TinyInstance {
    pub model: TabularMarkovModel,
    pub n: usize,
    pub sigma: f64,
}

impl TinyInstance {
    pub fn new(model: TabularMarkovModel, n: usize, sigma: f64) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("instance length must be positive"));
        }
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::invalid(format!("sigma must be positive, got {sigma}")));
        }
        check_budget(model.grid().d(), n)?;
        Ok(TinyInstance { model, n, sigma })
    }

    fn grid(&self) -> &Grid {
        ConditionalModel::grid(&self.model)
    }
}

/// `p(x)` for every configuration of length `n`.
pub fn exact_distribution(model: &TabularMarkovModel, n: usize) -> Result<Vec<f64>> {
    let d = ConditionalModel::grid(model).d();
    let count = check_budget(d, n)?;
    let mut idx = vec![0; n];
    Ok((0..count)
        .map(|c| {
            decode_config(c, d, n, &mut idx);
            model.log_prob(&idx).exp()
        })
        .collect())
}

/// Per-position, per-bin `log phi_sigma(x~_i - e_k)`.
fn log_evidence(grid: &Grid, x_tilde: &[f64], sigma: f64) -> Vec<Vec<f64>> {
    x_tilde
        .iter()
        .map(|&x| grid.values().iter().map(|&e| log_normal(x - e, sigma)).collect())
        .collect()
}

/// `log p_sigma(x~) = log sum_x p(x) prod_i phi_sigma(x~_i - x_i)` and its gradient.
pub fn exact_log_density(inst: &TinyInstance, x_tilde: &[f64]) -> Result<(f64, Vec<f64>)> {
    let n = inst.n;
    if x_tilde.len() != n {
        return Err(Error::Dimension {
            expected: n,
            actual: x_tilde.len(),
        });
    }
    check_finite(x_tilde)?;
    let grid = inst.grid();
    let d = grid.d();
    let count = check_budget(d, n)?;
    let ev = log_evidence(grid, x_tilde, inst.sigma);
    let mut idx = vec![0; n];
    let mut terms = Vec::with_capacity(count);
    for c in 0..count {
        decode_config(c, d, n, &mut idx);
        let lp = inst.model.log_prob(&idx);
        terms.push(lp + idx.iter().enumerate().map(|(i, &k)| ev[i][k]).sum::<f64>());
    }
    let total = logsumexp(&terms);
    let inv_var = 1.0 / (inst.sigma * inst.sigma);
    let mut score = vec![0.0; n];
    for (c, &t) in terms.iter().enumerate() {
        let w = (t - total).exp();
        if w == 0.0 {
            continue;
        }
        decode_config(c, d, n, &mut idx);
        for i in 0..n {
            score[i] += w * (grid.value(idx[i]) - x_tilde[i]) * inv_var;
        }
    }
    Ok((total, score))
}

/// Posterior weights over clean prefixes given a noisy prefix, and the
/// resulting Bayes conditional of the next position.
struct PrefixPosterior {
    // normalized weights of each prefix configuration
    weights: Vec<f64>,
    // q_k(prefix) proportional to weight * p(e_k | prefix), unnormalized per k
    joint: Vec<Vec<f64>>,
    // sum over prefixes of joint, per k
    mass: Vec<f64>,
    conditional: Vec<f64>,
}

fn prefix_posterior(model: &TabularMarkovModel, prefix: &[f64], sigma: f64) -> Result<PrefixPosterior> {
    let grid = ConditionalModel::grid(model);
    let d = grid.d();
    let m = prefix.len();
    let count = check_budget(d, m)?;
    let ev = log_evidence(grid, prefix, sigma);
    let mut idx = vec![0; m];
    let mut logw = Vec::with_capacity(count);
    for c in 0..count {
        decode_config(c, d, m, &mut idx);
        logw.push(model.log_prob(&idx) + idx.iter().enumerate().map(|(i, &k)| ev[i][k]).sum::<f64>());
    }
    let total = logsumexp(&logw);
    let weights: Vec<f64> = logw.iter().map(|&l| (l - total).exp()).collect();
    let mut joint = vec![vec![0.0; count]; d];
    let mut conditional = vec![0.0; d];
    for (c, &w) in weights.iter().enumerate() {
        decode_config(c, d, m, &mut idx);
        let probs = model.cond_probs(&idx);
        for k in 0..d {
            let v = w * probs[k];
            joint[k][c] = v;
            conditional[k] += v;
        }
    }
    let mass = conditional.clone();
    let z: f64 = conditional.iter().sum();
    conditional.iter_mut().for_each(|p| *p /= z);
    Ok(PrefixPosterior {
        weights,
        joint,
        mass,
        conditional,
    })
}

/// `p(x_i = e_k | x~_<i)` for the clean next value given a noisy prefix.
pub fn exact_noisy_conditional(inst: &TinyInstance, prefix: &[f64]) -> Result<Vec<f64>> {
    if prefix.len() >= inst.n {
        return Err(Error::invalid(format!("prefix of length {} in an instance of length {}", prefix.len(), inst.n)));
    }
    check_finite(prefix)?;
    Ok(prefix_posterior(&inst.model, prefix, inst.sigma)?.conditional)
}

/// The Bayes-optimal noisy conditional of a tabular source, as a model the
/// samplers can use. Logits at position `i` depend on the whole noisy prefix.
#[derive(Debug, Clone)]
pub struct ExactNoisyModel {
    model: TabularMarkovModel,
    sigma: f64,
    max_len: usize,
}

impl ExactNoisyModel {
    pub fn new(model: TabularMarkovModel, sigma: f64, max_len: usize) -> Result<Self> {
        if !(sigma > 0.0) {
            return Err(Error::invalid(format!("sigma must be positive, got {sigma}")));
        }
        check_budget(ConditionalModel::grid(&model).d(), max_len)?;
        Ok(ExactNoisyModel { model, sigma, max_len })
    }

    /// One exact model per level of `sigmas`.
    pub fn stack(model: &TabularMarkovModel, sigmas: &[f64], max_len: usize) -> Result<NoisyModelStack> {
        let levels = sigmas
            .iter()
            .map(|&s| Ok(Arc::new(ExactNoisyModel::new(model.clone(), s, max_len)?) as SharedModel))
            .collect::<Result<Vec<_>>>()?;
        NoisyModelStack::in_memory(sigmas.to_vec(), levels)
    }
}

fn floored_log(p: f64) -> f64 {
    if p > 0.0 {
        p.ln().max(LOG_FLOOR)
    } else {
        LOG_FLOOR
    }
}

impl ConditionalModel for ExactNoisyModel {
    fn kind(&self) -> &'static str {
        "exact-noisy"
    }

    fn grid(&self) -> &Grid {
        ConditionalModel::grid(&self.model)
    }

    fn window(&self) -> usize {
        self.max_len
    }

    fn forward(&self, x: &[f64], first: usize) -> Result<Forward> {
        if x.len() > self.max_len {
            return Err(Error::invalid(format!("sequence longer than {}", self.max_len)));
        }
        check_finite(x)?;
        let d = self.grid().d();
        let mut logits = Vec::with_capacity((x.len() - first) * d);
        for i in first..x.len() {
            let post = prefix_posterior(&self.model, &x[..i], self.sigma)?;
            logits.extend(post.conditional.iter().map(|&p| floored_log(p)));
        }
        Ok(Forward::new(x.len(), first, d, logits))
    }

    fn backward(&self, x: &[f64], fwd: &Forward, upstream: &[f64]) -> Result<Vec<f64>> {
        let grid = self.grid();
        let d = grid.d();
        let inv_var = 1.0 / (self.sigma * self.sigma);
        let mut grad = vec![0.0; x.len()];
        let mut idx = vec![0; x.len()];
        for (t, i) in fwd.targets().enumerate() {
            let u = &upstream[t * d..(t + 1) * d];
            if i == 0 || u.iter().all(|&v| v == 0.0) {
                continue;
            }
            let post = prefix_posterior(&self.model, &x[..i], self.sigma)?;
            // d logit_k / d x~_j = E_{q_k}[(x_j - x~_j)/s^2] - E_w[(x_j - x~_j)/s^2]
            let usum: f64 = u.iter().sum();
            for (c, &w) in post.weights.iter().enumerate() {
                decode_config(c, d, i, &mut idx[..i]);
                let mut coef = -usum * w;
                for k in 0..d {
                    if post.mass[k] > 0.0 {
                        coef += u[k] * post.joint[k][c] / post.mass[k];
                    }
                }
                if coef == 0.0 {
                    continue;
                }
                for j in 0..i {
                    grad[j] += coef * (grid.value(idx[j]) - x[j]) * inv_var;
                }
            }
        }
        Ok(grad)
    }
}

/// Exact posterior over joint source configurations, laid out source-major
/// like the sampler's concatenated sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Posterior {
    pub sources: usize,
    pub n: usize,
    pub d: usize,
    pub probs: Vec<f64>,
}

impl Posterior {
    /// Index of a joint configuration of bin indices (length `sources * n`).
    pub fn index(&self, idx: &[usize]) -> usize {
        encode_config(idx, self.d)
    }
}

/// `p(x | y)` with likelihood `N(y; A x, sigma^2 A A^T)` (or `sigma^2 I`).
pub fn exact_posterior(
    priors: &[&TabularMarkovModel],
    measurement: &MeasurementModel,
    y: &[f64],
    sigma: f64,
    covariance: Covariance,
) -> Result<Posterior> {
    if priors.is_empty() || priors.len() != measurement.sources() {
        return Err(Error::invalid("one prior per measured source is required"));
    }
    let grid = ConditionalModel::grid(priors[0]);
    if priors.iter().any(|p| ConditionalModel::grid(*p) != grid) {
        return Err(Error::invalid("sources must share a grid"));
    }
    let (d, n, s) = (grid.d(), measurement.source_len(), priors.len());
    let count = check_budget(d, n * s)?;
    let bound = 10.0 * sigma * measurement.gram_scale().sqrt();
    let mut idx = vec![0; n * s];
    let mut logw = Vec::with_capacity(count);
    let mut best = f64::INFINITY;
    for c in 0..count {
        decode_config(c, d, n * s, &mut idx);
        let x = grid.dequantize(&idx);
        let prior: f64 = priors
            .iter()
            .enumerate()
            .map(|(r, p)| p.log_prob(&idx[r * n..(r + 1) * n]))
            .sum();
        best = best.min(measurement.residual_inf(&x, y)?);
        let (ll, _) = measurement.smoothed_likelihood_grad(&x, y, sigma, covariance)?;
        logw.push(prior + ll);
    }
    if best > bound {
        return Err(Error::Unreachable { residual: best, bound });
    }
    let total = logsumexp(&logw);
    Ok(Posterior {
        sources: s,
        n,
        d,
        probs: logw.iter().map(|&l| (l - total).exp()).collect(),
    })
}

/// Probability that `e_from + sigma * eps` quantizes to each bin.
pub fn quantization_kernel(grid: &Grid, sigma: f64) -> Vec<Vec<f64>> {
    let v = grid.values();
    let d = v.len();
    let cdf = |t: f64| 0.5 * (1.0 + libm::erf(t / (sigma * std::f64::consts::SQRT_2)));
    (0..d)
        .map(|from| {
            (0..d)
                .map(|to| {
                    let lo = if to == 0 { f64::NEG_INFINITY } else { 0.5 * (v[to - 1] + v[to]) };
                    let hi = if to == d - 1 { f64::INFINITY } else { 0.5 * (v[to] + v[to + 1]) };
                    cdf(hi - v[from]) - cdf(lo - v[from])
                })
                .collect()
        })
        .collect()
}

/// Total variation between `p` and the distribution of quantized draws from
/// its smoothing `p_sigma`.
pub fn quantized_smoothing_tv(model: &TabularMarkovModel, n: usize, sigma: f64) -> Result<f64> {
    let grid = ConditionalModel::grid(model);
    let d = grid.d();
    let p = exact_distribution(model, n)?;
    let kernel = quantization_kernel(grid, sigma);
    let mut q = p.clone();
    // apply the per-coordinate kernel along each axis
    for axis in 0..n {
        let stride = d.pow((n - 1 - axis) as u32);
        let mut next = vec![0.0; q.len()];
        for (c, &mass) in q.iter().enumerate() {
            if mass == 0.0 {
                continue;
            }
            let digit = (c / stride) % d;
            let base = c - digit * stride;
            for (to, &k) in kernel[digit].iter().enumerate() {
                next[base + to * stride] += mass * k;
            }
        }
        q = next;
    }
    Ok(crate::numeric::total_variation(&p, &q))
}
