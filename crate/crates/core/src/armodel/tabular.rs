use std::io::Write;

use rand::Rng;
use rand_distr::StandardNormal;

use super::{check_finite, ConditionalModel, Forward};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::numeric::LOG_FLOOR;

pub const MAX_ORDER: usize = 3;

/// Order-`m` Markov chain over grid bins with an explicit conditional table.
///
/// Targets with fewer than `m` predecessors use the initial-state row.
/// Real-valued contexts are quantized to the grid, so the logits are
/// piecewise constant in the inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularMarkovModel {
    grid: Grid,
    order: usize,
    init: Vec<f64>,
    table: Vec<f64>,
    log_init: Vec<f64>,
    log_table: Vec<f64>,
}

fn check_row(row: &[f64]) -> Result<()> {
    if row.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
        return Err(Error::invalid("probabilities must be finite and non-negative"));
    }
    let s: f64 = row.iter().sum();
    if (s - 1.0).abs() > 1e-12 {
        return Err(Error::invalid(format!("row sums to {s}, expected 1")));
    }
    Ok(())
}

fn normalize(row: &mut [f64]) {
    let s: f64 = row.iter().sum();
    row.iter_mut().for_each(|p| *p /= s);
}

fn floored_ln(p: f64) -> f64 {
    if p > 0.0 {
        p.ln().max(LOG_FLOOR)
    } else {
        LOG_FLOOR
    }
}

impl TabularMarkovModel {
    /// `init` has length `d`; `table` holds `d^order` rows of length `d`, where
    /// the context `(k_1, ..., k_m)` (oldest first) selects row
    /// `sum_r k_r d^(m-r)`.
    pub fn new(grid: Grid, order: usize, init: Vec<f64>, table: Vec<f64>) -> Result<Self> {
        if order == 0 || order > MAX_ORDER {
            return Err(Error::invalid(format!("order must be in 1..={MAX_ORDER}, got {order}")));
        }
        let d = grid.d();
        let rows = d.pow(order as u32);
        if init.len() != d {
            return Err(Error::Dimension {
                expected: d,
                actual: init.len(),
            });
        }
        if table.len() != rows * d {
            return Err(Error::Dimension {
                expected: rows * d,
                actual: table.len(),
            });
        }
        check_row(&init)?;
        for row in table.chunks(d) {
            check_row(row)?;
        }
        let log_init = init.iter().map(|&p| floored_ln(p)).collect();
        let log_table = table.iter().map(|&p| floored_ln(p)).collect();
        Ok(TabularMarkovModel {
            grid,
            order,
            init,
            table,
            log_init,
            log_table,
        })
    }

    /// Like [`new`](Self::new) but renormalizes every row first.
    pub fn normalized(grid: Grid, order: usize, mut init: Vec<f64>, mut table: Vec<f64>) -> Result<Self> {
        let d = grid.d();
        normalize(&mut init);
        for row in table.chunks_mut(d) {
            normalize(row);
        }
        Self::new(grid, order, init, table)
    }

    pub fn uniform(grid: Grid, order: usize) -> Result<Self> {
        let d = grid.d();
        let rows = d.pow(order as u32);
        Self::normalized(grid, order, vec![1.0; d], vec![1.0; rows * d])
    }

    /// Rows are softmaxes of Gaussian logits with standard deviation `spread`.
    pub fn random<R: Rng + ?Sized>(grid: Grid, order: usize, spread: f64, rng: &mut R) -> Result<Self> {
        let d = grid.d();
        let rows = d.pow(order as u32);
        let mut draw = |n: usize| -> Vec<f64> {
            (0..n)
                .map(|_| (spread * rng.sample::<f64, _>(StandardNormal)).exp())
                .collect()
        };
        let init = draw(d);
        let table = draw(rows * d);
        Self::normalized(grid, order, init, table)
    }

    /// Order-1 discretization of `x_i = rho x_{i-1} + noise_sd * eps`.
    pub fn discretized_ar1(grid: Grid, rho: f64, noise_sd: f64) -> Result<Self> {
        if !(noise_sd > 0.0) {
            return Err(Error::invalid("noise_sd must be positive"));
        }
        let e = grid.values().to_vec();
        let d = e.len();
        let stationary_sd = noise_sd / (1.0 - rho * rho).max(1e-6).sqrt();
        let gauss = |mean: f64, sd: f64| -> Vec<f64> {
            e.iter().map(|&v| (-0.5 * ((v - mean) / sd).powi(2)).exp()).collect()
        };
        let init = gauss(0.0, stationary_sd);
        let mut table = Vec::with_capacity(d * d);
        for &prev in &e {
            table.extend(gauss(rho * prev, noise_sd));
        }
        Self::normalized(grid, 1, init, table)
    }

    /// Maximum-likelihood table from bin-index sequences with additive
    /// smoothing `alpha`.
    pub fn fit_counts(grid: Grid, order: usize, corpus: &[Vec<usize>], alpha: f64) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::invalid("empty corpus"));
        }
        let d = grid.d();
        let rows = d.pow(order as u32);
        let mut init = vec![alpha; d];
        let mut table = vec![alpha; rows * d];
        for seq in corpus {
            for (i, &k) in seq.iter().enumerate() {
                if k >= d {
                    return Err(Error::invalid(format!("bin index {k} out of range")));
                }
                if i < order {
                    init[k] += 1.0;
                } else {
                    let r = row_index(&seq[i - order..i], d);
                    table[r * d + k] += 1.0;
                }
            }
        }
        if alpha == 0.0 {
            // unseen contexts fall back to uniform rows
            for row in table.chunks_mut(d) {
                if row.iter().all(|&c| c == 0.0) {
                    row.iter_mut().for_each(|c| *c = 1.0);
                }
            }
            if init.iter().all(|&c| c == 0.0) {
                init.iter_mut().for_each(|c| *c = 1.0);
            }
        }
        Self::normalized(grid, order, init, table)
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn init(&self) -> &[f64] {
        &self.init
    }

    pub fn table(&self) -> &[f64] {
        &self.table
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let d = self.grid.d();
        &self.table[r * d..(r + 1) * d]
    }

    /// `p(. | prefix)` for a prefix of bin indices.
    pub fn cond_probs(&self, prefix: &[usize]) -> &[f64] {
        if prefix.len() < self.order {
            &self.init
        } else {
            self.row(row_index(&prefix[prefix.len() - self.order..], self.grid.d()))
        }
    }

    fn cond_logits(&self, prefix: &[usize]) -> &[f64] {
        let d = self.grid.d();
        if prefix.len() < self.order {
            &self.log_init
        } else {
            let r = row_index(&prefix[prefix.len() - self.order..], d);
            &self.log_table[r * d..(r + 1) * d]
        }
    }

    /// `log p(x)` of a bin-index sequence.
    pub fn log_prob(&self, idx: &[usize]) -> f64 {
        (0..idx.len())
            .map(|i| {
                let p = self.cond_probs(&idx[..i])[idx[i]];
                if p > 0.0 {
                    p.ln()
                } else {
                    f64::NEG_INFINITY
                }
            })
            .sum()
    }
}

pub(crate) fn row_index(ctx: &[usize], d: usize) -> usize {
    ctx.iter().fold(0, |acc, &k| acc * d + k)
}

impl ConditionalModel for TabularMarkovModel {
    fn kind(&self) -> &'static str {
        "tabular"
    }

    fn grid(&self) -> &Grid {
        &self.grid
    }

    fn window(&self) -> usize {
        self.order
    }

    fn forward(&self, x: &[f64], first: usize) -> Result<Forward> {
        check_finite(x)?;
        let d = self.grid.d();
        let m = self.order;
        let idx = self.grid.quantize_all(&x[first.saturating_sub(m)..])?;
        let offset = first.saturating_sub(m);
        let mut logits = Vec::with_capacity((x.len() - first) * d);
        for i in first..x.len() {
            let local = i - offset;
            let prefix = &idx[local.saturating_sub(m)..local];
            // fewer than m real predecessors only happens at the true start
            if i < m {
                logits.extend_from_slice(&self.log_init);
            } else {
                logits.extend_from_slice(self.cond_logits(prefix));
            }
        }
        Ok(Forward::new(x.len(), first, d, logits))
    }

    fn backward(&self, x: &[f64], _fwd: &Forward, _upstream: &[f64]) -> Result<Vec<f64>> {
        Ok(vec![0.0; x.len()])
    }

    fn has_input_gradient(&self) -> bool {
        false
    }

    fn encode(&self, w: &mut dyn Write) -> Result<()> {
        let dims = [self.order as u32, self.grid.d() as u32];
        super::checkpoint::write_descriptor(w, super::checkpoint::TABULAR_TAG, &dims)?;
        for &p in self.init.iter().chain(&self.table) {
            w.write_all(&(p as f32).to_le_bytes())?;
        }
        Ok(())
    }
}
