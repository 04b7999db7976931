//! Synthetic corpora standing in for audio and image data.
//!
//! `sine_mixture` is a smooth source (a few low-frequency sinusoids),
//! `bursty_noise` a rough one (AR noise switched on in sparse bursts), and
//! `ar_tabular` draws ancestral samples from a stored model (normally a
//! tabular one).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::armodel::{ancestral_sample, ConditionalModel};
use crate::error::{Error, Result};
use crate::grid::Grid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    ArTabular,
    SineMixture,
    BurstyNoise,
}

/// Frequency range of the sinusoids, in cycles per sample.
pub const SINE_FREQ_RANGE: (f64, f64) = (0.02, 0.1);

/// Maps `s` (peak magnitude 1) into the grid's range at `fill` of its half-width.
fn to_grid_range(s: &[f64], grid: &Grid, fill: f64) -> Vec<f64> {
    let mid = 0.5 * (grid.min() + grid.max());
    let half = 0.5 * grid.span();
    s.iter().map(|v| mid + fill * half * v).collect()
}

/// Real-valued sum of two or three random-phase sinusoids, peak-normalized
/// into the grid range.
pub fn sine_mixture_signal<R: Rng + ?Sized>(grid: &Grid, n: usize, rng: &mut R) -> Vec<f64> {
    let parts = rng.random_range(2..=3);
    let comps: Vec<(f64, f64, f64)> = (0..parts)
        .map(|_| {
            let f = rng.random_range(SINE_FREQ_RANGE.0..SINE_FREQ_RANGE.1);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let amp = rng.random_range(0.3..1.0);
            (f, phase, amp)
        })
        .collect();
    let s: Vec<f64> = (0..n)
        .map(|t| {
            comps
                .iter()
                .map(|(f, ph, a)| a * (std::f64::consts::TAU * f * t as f64 + ph).sin())
                .sum()
        })
        .collect();
    let peak = s.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    let fill = rng.random_range(0.6..0.95);
    to_grid_range(&s.iter().map(|v| v / peak).collect::<Vec<_>>(), grid, fill)
}

/// Sparse bursts of AR(1) noise over a faint background.
pub fn bursty_noise_signal<R: Rng + ?Sized>(grid: &Grid, n: usize, rng: &mut R) -> Vec<f64> {
    let (p_on, p_off) = (0.03, 0.15);
    let mut on = false;
    let mut state = 0.0;
    let s: Vec<f64> = (0..n)
        .map(|_| {
            on = if on { !rng.random_bool(p_off) } else { rng.random_bool(p_on) };
            let eps: f64 = rng.sample(StandardNormal);
            if on {
                state = 0.5 * state + eps;
                (0.35 * state).clamp(-0.95, 0.95)
            } else {
                state = 0.0;
                0.02 * eps
            }
        })
        .collect();
    to_grid_range(&s, grid, 1.0)
}

pub fn gen_synthetic(
    kind: SynthKind,
    grid: &Grid,
    n: usize,
    count: usize,
    seed: u64,
    source: Option<&dyn ConditionalModel>,
) -> Result<Vec<Vec<usize>>> {
    if n == 0 {
        return Err(Error::invalid("sequence length must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| match kind {
            SynthKind::ArTabular => {
                let m = source.ok_or_else(|| Error::Config("ar_tabular needs a stored model".into()))?;
                ancestral_sample(m, n, &mut rng)
            }
            SynthKind::SineMixture => grid.quantize_all(&sine_mixture_signal(grid, n, &mut rng)),
            SynthKind::BurstyNoise => grid.quantize_all(&bursty_noise_signal(grid, n, &mut rng)),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::armodel::TabularMarkovModel;

    fn grid() -> Grid {
        Grid::linear(16, -1.0, 1.0).unwrap()
    }

    #[test]
    fn deterministic_table_gives_constant_corpus() {
        let g = Grid::linear(3, -1.0, 1.0).unwrap();
        let m = TabularMarkovModel::new(g.clone(), 1, vec![0.0, 1.0, 0.0], vec![0., 1., 0., 0., 1., 0., 0., 1., 0.]).unwrap();
        let c = gen_synthetic(SynthKind::ArTabular, &g, 20, 3, 0, Some(&m)).unwrap();
        assert!(c.iter().flatten().all(|&k| k == 1));
        assert!(gen_synthetic(SynthKind::ArTabular, &g, 20, 3, 0, None).is_err());
    }

    #[test]
    fn sine_energy_is_low_frequency() {
        let g = grid();
        let n = 256;
        let cutoff = (0.125 * n as f64).ceil() as usize;
        for seq in gen_synthetic(SynthKind::SineMixture, &g, n, 5, 3, None).unwrap() {
            let x = g.dequantize(&seq);
            let energy: Vec<f64> = (0..=n / 2)
                .map(|k| {
                    let (mut re, mut im) = (0.0, 0.0);
                    for (t, v) in x.iter().enumerate() {
                        let a = std::f64::consts::TAU * (k * t) as f64 / n as f64;
                        re += v * a.cos();
                        im -= v * a.sin();
                    }
                    re * re + im * im
                })
                .collect();
            let low: f64 = energy[..cutoff].iter().sum();
            assert!(low / energy.iter().sum::<f64>() > 0.95);
        }
    }

    #[test]
    fn bursty_noise_is_heavy_tailed() {
        let g = grid();
        let x: Vec<f64> = gen_synthetic(SynthKind::BurstyNoise, &g, 4096, 4, 5, None)
            .unwrap()
            .iter()
            .flat_map(|s| g.dequantize(s))
            .collect();
        let m = x.iter().sum::<f64>() / x.len() as f64;
        let var = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / x.len() as f64;
        let m4 = x.iter().map(|v| (v - m).powi(4)).sum::<f64>() / x.len() as f64;
        assert!(m4 / (var * var) > 5.0);
    }
}
