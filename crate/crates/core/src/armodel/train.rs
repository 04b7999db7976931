//! Maximum-likelihood training and per-noise-level fine-tuning of the conv net.
//!
//! Plain minibatch SGD with a fixed step and global-norm clipping. Each
//! example is a random crop of a corpus sequence; the crop carries up to
//! `window` positions of left context so that logits inside the crop see the
//! same inputs they would on the full sequence. Fine-tuning corrupts the
//! inputs with fresh Gaussian noise every minibatch while keeping clean
//! targets.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::stack::SharedModel;
use super::{CausalConvNet, ConditionalModel, NoisyModelStack};
use crate::error::{Error, Result};
use crate::numeric::{logsumexp, mix_seed, softmax_in_place};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub crop_len: usize,
    pub learning_rate: f64,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 8,
            crop_len: 64,
            learning_rate: 0.05,
            clip_norm: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean training cross-entropy (nats per position) for each epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

fn check_corpus(corpus: &[Vec<usize>], d: usize) -> Result<()> {
    if corpus.is_empty() || corpus.iter().all(|s| s.is_empty()) {
        return Err(Error::invalid("training corpus is empty"));
    }
    if corpus.iter().flatten().any(|&k| k >= d) {
        return Err(Error::invalid("corpus contains bin indices outside the grid"));
    }
    Ok(())
}

/// Input window and first target for a crop starting at `start`.
fn crop<'a>(seq: &'a [usize], start: usize, len: usize, window: usize) -> (&'a [usize], usize) {
    let from = start.saturating_sub(window);
    let to = (start + len).min(seq.len());
    (&seq[from..to], start - from)
}

/// Runs SGD on `model` in place. `sigma = 0` trains on clean inputs.
fn fit(model: &mut CausalConvNet, corpus: &[Vec<usize>], sigma: f64, config: &TrainConfig) -> Result<TrainReport> {
    let grid = model.grid().clone();
    let d = grid.d();
    check_corpus(corpus, d)?;
    if config.batch_size == 0 || config.crop_len == 0 || !(config.learning_rate > 0.0) {
        return Err(Error::invalid("batch size, crop length and learning rate must be positive"));
    }
    let w = model.window();
    let seqs: Vec<&Vec<usize>> = corpus.iter().filter(|s| !s.is_empty()).collect();
    let total: usize = seqs.iter().map(|s| s.len()).sum();
    let steps_per_epoch = (total / (config.batch_size * config.crop_len)).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut grads = vec![0.0; model.params().len()];
    let mut report = TrainReport::default();

    for _ in 0..config.epochs {
        let mut epoch_loss = 0.0;
        let mut epoch_count = 0usize;
        for _ in 0..steps_per_epoch {
            grads.iter_mut().for_each(|g| *g = 0.0);
            let mut batch = Vec::with_capacity(config.batch_size);
            for _ in 0..config.batch_size {
                let seq = seqs[rng.random_range(0..seqs.len())];
                let span = seq.len().saturating_sub(config.crop_len);
                let start = rng.random_range(0..=span);
                let (idx, first) = crop(seq, start, config.crop_len, w);
                let mut x = grid.dequantize(idx);
                if sigma > 0.0 {
                    for v in &mut x {
                        *v += sigma * rng.sample::<f64, _>(StandardNormal);
                    }
                }
                batch.push((idx, first, x));
            }
            let count: usize = batch.iter().map(|(idx, first, _)| idx.len() - first).sum();
            let scale = 1.0 / count as f64;
            let mut loss = 0.0;
            for (idx, first, x) in &batch {
                model.backward_params(
                    x,
                    *first,
                    |logits| {
                        let mut up = logits.to_vec();
                        for (row, &k) in up.chunks_mut(d).zip(&idx[*first..]) {
                            loss += logsumexp(row) - row[k];
                            softmax_in_place(row);
                            row[k] -= 1.0;
                            row.iter_mut().for_each(|v| *v *= scale);
                        }
                        up
                    },
                    &mut grads,
                )?;
            }
            let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
            if !norm.is_finite() {
                return Err(Error::invalid("non-finite gradient during training"));
            }
            let shrink = if config.clip_norm > 0.0 && norm > config.clip_norm {
                config.clip_norm / norm
            } else {
                1.0
            };
            let lr = config.learning_rate * shrink;
            for (p, g) in model.params_mut().iter_mut().zip(&grads) {
                *p -= lr * g;
            }
            epoch_loss += loss;
            epoch_count += count;
            report.steps += 1;
        }
        report.epoch_losses.push(epoch_loss / epoch_count as f64);
    }
    Ok(report)
}

pub fn train(model: &mut CausalConvNet, corpus: &[Vec<usize>], config: &TrainConfig) -> Result<TrainReport> {
    fit(model, corpus, 0.0, config)
}

/// Copy of `base` fine-tuned to predict clean values from inputs corrupted
/// with `N(0, sigma^2)` noise.
pub fn finetune_noisy(
    base: &CausalConvNet,
    sigma: f64,
    corpus: &[Vec<usize>],
    config: &TrainConfig,
) -> Result<(CausalConvNet, TrainReport)> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::invalid(format!("sigma must be positive, got {sigma}")));
    }
    let mut model = base.clone();
    let report = fit(&mut model, corpus, sigma, config)?;
    Ok((model, report))
}

/// Fine-tune one copy of `base` per noise level.
pub fn build_stack(
    base: &CausalConvNet,
    sigmas: &[f64],
    corpus: &[Vec<usize>],
    config: &TrainConfig,
) -> Result<(NoisyModelStack, Vec<TrainReport>)> {
    let mut models: Vec<SharedModel> = Vec::with_capacity(sigmas.len());
    let mut reports = Vec::with_capacity(sigmas.len());
    for (i, &s) in sigmas.iter().enumerate() {
        let cfg = TrainConfig {
            seed: mix_seed(config.seed, i as u64, 0x5eed),
            ..config.clone()
        };
        let (m, r) = finetune_noisy(base, s, corpus, &cfg)?;
        models.push(Arc::new(m));
        reports.push(r);
    }
    Ok((NoisyModelStack::in_memory(sigmas.to_vec(), models)?, reports))
}

/// Mean cross-entropy (nats per position) of clean targets given inputs
/// corrupted with `N(0, sigma^2)` noise drawn from `seed`.
pub fn cross_entropy(model: &dyn ConditionalModel, corpus: &[Vec<usize>], sigma: f64, seed: u64) -> Result<f64> {
    let grid = model.grid();
    check_corpus(corpus, grid.d())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    let mut count = 0usize;
    for seq in corpus.iter().filter(|s| !s.is_empty()) {
        let mut x = grid.dequantize(seq);
        if sigma > 0.0 {
            for v in &mut x {
                *v += sigma * rng.sample::<f64, _>(StandardNormal);
            }
        }
        let fwd = model.forward(&x, 0)?;
        for (i, &k) in seq.iter().enumerate() {
            let row = fwd.logits(i);
            total += logsumexp(row) - row[k];
        }
        count += seq.len();
    }
    Ok(total / count as f64)
}
