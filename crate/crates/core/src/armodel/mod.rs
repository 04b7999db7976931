//! Autoregressive conditional models over a discretization grid.
//!
//! Every model implements [`ConditionalModel`]: given a (possibly noisy,
//! real-valued) sequence it produces one logit vector per target position,
//! where the logits at position `i` depend on `x[i-w..i]` only. Positions
//! before the start of the sequence are treated by each model in its own
//! way (sentinel padding for the conv net, an initial-state row for tables).

use std::any::Any;
use std::io::Write;
use std::ops::Range;

use rand::Rng;

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::numeric::{sample_categorical, softmax};

pub mod checkpoint;
pub mod convnet;
pub mod stack;
pub mod tabular;
pub mod train;

pub use checkpoint::{load_convnet, load_model, save_model, ModelRegistry};
pub use convnet::{CausalConvNet, ConvNetConfig};
pub use stack::{LevelStore, NoisyModelStack, SharedModel};
pub use tabular::TabularMarkovModel;
pub use train::{build_stack, cross_entropy, finetune_noisy, train, TrainConfig, TrainReport};

/// Logits for a contiguous run of target positions, plus whatever the model
/// needs to run its backward pass.
pub struct Forward {
    len: usize,
    first: usize,
    d: usize,
    logits: Vec<f64>,
    tape: Option<Box<dyn Any + Send + Sync>>,
}

impl Forward {
    pub fn new(len: usize, first: usize, d: usize, logits: Vec<f64>) -> Self {
        debug_assert_eq!(logits.len(), (len - first) * d);
        Forward {
            len,
            first,
            d,
            logits,
            tape: None,
        }
    }

    pub fn with_tape(mut self, tape: Box<dyn Any + Send + Sync>) -> Self {
        self.tape = Some(tape);
        self
    }

    pub fn tape<T: 'static>(&self) -> Option<&T> {
        self.tape.as_ref().and_then(|t| t.downcast_ref::<T>())
    }

    /// Length of the input sequence the pass was run on.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn targets(&self) -> Range<usize> {
        self.first..self.len
    }

    pub fn d(&self) -> usize {
        self.d
    }

    /// Logits for target position `i` (an index into the input sequence).
    pub fn logits(&self, i: usize) -> &[f64] {
        let k = i - self.first;
        &self.logits[k * self.d..(k + 1) * self.d]
    }

    pub fn all_logits(&self) -> &[f64] {
        &self.logits
    }
}

/// A discretized autoregressive conditional `p(x_i | x_{i-w..i})`.
pub trait ConditionalModel: Send + Sync {
    /// Registry name of the model family.
    fn kind(&self) -> &'static str;

    fn grid(&self) -> &Grid;

    /// Markov window `w`: number of preceding positions the logits read.
    fn window(&self) -> usize;

    /// Logits for target positions `first..x.len()`, treating `x[0]` as the
    /// start of the sequence.
    ///
    /// When `x` is a slice out of a longer sequence, the results for targets
    /// `i >= window()` are exact; earlier targets see start-of-sequence padding.
    fn forward(&self, x: &[f64], first: usize) -> Result<Forward>;

    /// Gradient with respect to `x` of `sum_i upstream_i . logits_i`, where
    /// `upstream` is laid out like [`Forward::all_logits`].
    fn backward(&self, x: &[f64], fwd: &Forward, upstream: &[f64]) -> Result<Vec<f64>>;

    /// False when the logits are piecewise constant in the inputs, in which
    /// case `backward` is identically zero and callers may skip it.
    fn has_input_gradient(&self) -> bool {
        true
    }

    /// Architecture descriptor and parameters for checkpointing.
    fn encode(&self, _w: &mut dyn Write) -> Result<()> {
        Err(Error::Format(format!("model kind '{}' cannot be serialized", self.kind())))
    }

    /// Logits of the next position given a context; only the last
    /// `window()` entries are read.
    fn logits(&self, context: &[f64]) -> Result<Vec<f64>> {
        let (local, target) = effective_context(context, self.window());
        let fwd = self.forward(&local, target)?;
        Ok(fwd.logits(target).to_vec())
    }

    /// `upstream^T d(logits)/d(context)` for the effective context (the last
    /// `min(window, len)` entries).
    fn input_vjp(&self, context: &[f64], upstream: &[f64]) -> Result<Vec<f64>> {
        let d = self.grid().d();
        if upstream.len() != d {
            return Err(Error::Dimension {
                expected: d,
                actual: upstream.len(),
            });
        }
        let (local, target) = effective_context(context, self.window());
        if !self.has_input_gradient() {
            return Ok(vec![0.0; target]);
        }
        let fwd = self.forward(&local, target)?;
        let mut grad = self.backward(&local, &fwd, upstream)?;
        grad.truncate(target);
        Ok(grad)
    }
}

/// Last `w` entries of the context followed by a placeholder target slot.
fn effective_context(context: &[f64], w: usize) -> (Vec<f64>, usize) {
    let start = context.len().saturating_sub(w);
    let mut local = context[start..].to_vec();
    let target = local.len();
    local.push(0.0);
    (local, target)
}

pub(crate) fn check_finite(x: &[f64]) -> Result<()> {
    match x.iter().find(|v| !v.is_finite()) {
        Some(&v) => Err(Error::InvalidSample(v)),
        None => Ok(()),
    }
}

/// Draw a sequence left to right from the model's conditionals.
pub fn ancestral_sample<R: Rng + ?Sized>(
    model: &dyn ConditionalModel,
    n: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::invalid("sequence length must be at least 1"));
    }
    let grid = model.grid();
    let mut idx = Vec::with_capacity(n);
    let mut values = Vec::with_capacity(n);
    for _ in 0..n {
        let logits = model.logits(&values)?;
        let probs = softmax(&logits);
        let k = sample_categorical(&probs, rng);
        idx.push(k);
        values.push(grid.value(k));
    }
    Ok(idx)
}

/// Noiseless log-likelihood `sum_i log p(x_i | x_{<i})` of a bin-index sequence.
pub fn log_likelihood(model: &dyn ConditionalModel, idx: &[usize]) -> Result<f64> {
    let grid = model.grid();
    if let Some(&k) = idx.iter().find(|&&k| k >= grid.d()) {
        return Err(Error::invalid(format!("bin index {k} out of range")));
    }
    let x = grid.dequantize(idx);
    let fwd = model.forward(&x, 0)?;
    Ok(idx
        .iter()
        .enumerate()
        .map(|(i, &k)| crate::numeric::log_softmax_at(fwd.logits(i), k))
        .sum())
}
