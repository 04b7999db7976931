//! Gaussian-smoothed conditionals and the sequence score.
//!
//! Convolving a categorical over grid spikes with `N(0, sigma^2)` gives a
//! Gaussian mixture whose weights are the softmax of the logits:
//!
//! ```text
//! log p(x | f) = LSE_k(f_k - (x - e_k)^2 / (2 sigma^2)) - LSE(f) - ln(2 pi sigma^2) / 2
//! ```
//!
//! The gradient splits into a direct part in `x` and a part in the logits,
//! which callers push through the model's input Jacobian.

use crate::armodel::ConditionalModel;
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::numeric::LN_2PI;

#[derive(Debug, Clone, PartialEq)]
pub struct SmoothedConditional {
    pub log_density: f64,
    /// Derivative with respect to the evaluated value.
    pub grad_xi: f64,
    /// Derivative with respect to each logit; sums to zero.
    pub logit_grad: Vec<f64>,
}

fn check_sigma(sigma: f64) -> Result<()> {
    if sigma > 0.0 && sigma.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("sigma must be positive, got {sigma}")))
    }
}

/// Core evaluation; writes the logit gradient into `logit_grad` and returns
/// `(log_density, grad_xi)`.
pub(crate) fn smoothed_into(logits: &[f64], xi: f64, sigma: f64, centers: &[f64], logit_grad: &mut [f64]) -> (f64, f64) {
    let inv_var = 1.0 / (sigma * sigma);
    let mut fmax = f64::NEG_INFINITY;
    let mut gmax = f64::NEG_INFINITY;
    for (k, (&f, &e)) in logits.iter().zip(centers).enumerate() {
        let r = xi - e;
        let g = f - 0.5 * r * r * inv_var;
        logit_grad[k] = g;
        fmax = fmax.max(f);
        gmax = gmax.max(g);
    }
    let mut zf = 0.0;
    let mut zg = 0.0;
    for (lg, &f) in logit_grad.iter_mut().zip(logits) {
        let s = (*lg - gmax).exp();
        *lg = s;
        zg += s;
        zf += (f - fmax).exp();
    }
    let log_density = (gmax + zg.ln()) - (fmax + zf.ln()) - 0.5 * (LN_2PI + 2.0 * sigma.ln());
    let mut grad_xi = 0.0;
    for ((lg, &f), &e) in logit_grad.iter_mut().zip(logits).zip(centers) {
        let s = *lg / zg;
        grad_xi += s * (e - xi);
        *lg = s - (f - fmax).exp() / zf;
    }
    (log_density, grad_xi * inv_var)
}

pub fn log_smoothed_conditional(logits: &[f64], xi: f64, sigma: f64, grid: &Grid) -> Result<SmoothedConditional> {
    check_sigma(sigma)?;
    if logits.len() != grid.d() {
        return Err(Error::Dimension {
            expected: grid.d(),
            actual: logits.len(),
        });
    }
    if !xi.is_finite() {
        return Err(Error::InvalidSample(xi));
    }
    if logits.iter().any(|f| !f.is_finite()) {
        return Err(Error::invalid("logits must be finite"));
    }
    let mut logit_grad = vec![0.0; logits.len()];
    let (log_density, grad_xi) = smoothed_into(logits, xi, sigma, grid.values(), &mut logit_grad);
    Ok(SmoothedConditional {
        log_density,
        grad_xi,
        logit_grad,
    })
}

/// Smoothed log-density of the targets `first..x.len()` of a window and its
/// gradient with respect to every entry of the window.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowScore {
    pub log_density: f64,
    pub grad: Vec<f64>,
}

/// Sum of `log p(x_i | x_<i)` over targets `i >= first`, with `x[0]` as the
/// sequence start, and its gradient. Direct terms land only on targets;
/// logit terms reach the preceding `window()` entries.
pub fn window_score(model: &dyn ConditionalModel, x: &[f64], first: usize, sigma: f64) -> Result<WindowScore> {
    check_sigma(sigma)?;
    let fwd = model.forward(x, first)?;
    let d = model.grid().d();
    let centers = model.grid().values();
    let mut upstream = vec![0.0; fwd.all_logits().len()];
    let mut direct = vec![0.0; x.len()];
    let mut log_density = 0.0;
    for (t, i) in fwd.targets().enumerate() {
        let row = &mut upstream[t * d..(t + 1) * d];
        let (ld, g) = smoothed_into(fwd.logits(i), x[i], sigma, centers, row);
        log_density += ld;
        direct[i] = g;
    }
    let grad = if model.has_input_gradient() {
        let mut vjp = model.backward(x, &fwd, &upstream)?;
        for (v, g) in vjp.iter_mut().zip(&direct) {
            *v = g + *v;
        }
        vjp
    } else {
        direct
    };
    if !log_density.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::invalid("non-finite smoothed score"));
    }
    Ok(WindowScore { log_density, grad })
}

/// `log p_sigma(x)` under the model's smoothed factorization and its gradient.
pub fn sequence_score(model: &dyn ConditionalModel, x: &[f64], sigma: f64) -> Result<(f64, Vec<f64>)> {
    if x.is_empty() {
        return Err(Error::invalid("sequence must be non-empty"));
    }
    let ws = window_score(model, x, 0, sigma)?;
    Ok((ws.log_density, ws.grad))
}
