//! Property tests for the cross-module invariants.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use pnf::armodel::{CausalConvNet, ConditionalModel, ConvNetConfig, TabularMarkovModel};
use pnf::blocksampler::block_gradient;
use pnf::grid::{mu_law_decode, mu_law_encode, Grid};
use pnf::measure::MeasurementModel;
use pnf::numeric::{log_normal, logsumexp};
use pnf::oracle::{exact_log_density, exact_noisy_conditional, TinyInstance};
use pnf::smoothing::{log_smoothed_conditional, sequence_score};

fn net(seed: u64, d: usize, dilations: Vec<usize>) -> CausalConvNet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = ConvNetConfig {
        channels: 6,
        dilations,
    };
    let mut m = CausalConvNet::new(Grid::linear(d, -1.0, 1.0).unwrap(), cfg, &mut rng).unwrap();
    m.randomize_output(0.5, &mut rng);
    m
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn quantize_inverts_dequantize(d in 1usize..40, lo in -3.0f64..0.0, width in 0.1f64..5.0) {
        let g = Grid::linear(d, lo, lo + width).unwrap();
        let idx: Vec<usize> = (0..d).collect();
        prop_assert_eq!(g.quantize_all(&g.dequantize(&idx)).unwrap(), idx);
    }

    #[test]
    fn quantize_is_nearest(d in 2usize..30, x in -1.5f64..1.5) {
        let g = Grid::mu_law(d, 255.0).unwrap();
        let k = g.quantize(x).unwrap();
        let best = g.values().iter().map(|e| (e - x).abs()).fold(f64::INFINITY, f64::min);
        prop_assert!(((g.value(k) - x).abs() - best).abs() < 1e-15);
    }

    #[test]
    fn companding_round_trip(x in -1.0f64..=1.0, mu in 1.0f64..1000.0) {
        let u = mu_law_encode(x, mu).unwrap();
        prop_assert!(u.abs() <= 1.0);
        prop_assert!((mu_law_decode(u, mu).unwrap() - x).abs() < 1e-12);
    }

    #[test]
    fn companding_is_monotone(a in -1.0f64..=1.0, b in -1.0f64..=1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(mu_law_encode(lo, 255.0).unwrap() <= mu_law_encode(hi, 255.0).unwrap());
    }

    #[test]
    fn random_tables_are_normalized(d in 2usize..6, order in 1usize..3, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = TabularMarkovModel::random(Grid::linear(d, -1.0, 1.0).unwrap(), order, 2.0, &mut rng).unwrap();
        prop_assert!((m.init().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for r in 0..d.pow(order as u32) {
            prop_assert!((m.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn smoothed_conditional_integrates_to_one(seed in 0u64..500, sigma in 0.1f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = Grid::linear(4, -1.0, 1.0).unwrap();
        let logits: Vec<f64> = (0..4).map(|_| rand::Rng::random_range(&mut rng, -2.0..2.0)).collect();
        let h = 1e-3;
        let mass: f64 = (-8000..8000)
            .map(|i| log_smoothed_conditional(&logits, i as f64 * h, sigma, &g).unwrap().log_density.exp() * h)
            .sum();
        prop_assert!((mass - 1.0).abs() < 1e-6);
    }

    #[test]
    fn adjoint_identity(seed in 0u64..1000, kind in 0usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut unif = |n: usize| -> Vec<f64> { (0..n).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect() };
        let n = 12;
        let mm = match kind {
            0 => MeasurementModel::mix(vec![0.3, 0.9, -0.4], n).unwrap(),
            1 => MeasurementModel::decimate(3, n).unwrap(),
            _ => MeasurementModel::mask((0..n).map(|t| t % 3 != 1).collect()).unwrap(),
        };
        let x = unif(mm.n_in());
        let u = unif(mm.n_out());
        let lhs = dot(&mm.apply(&x).unwrap(), &u);
        let rhs = dot(&x, &mm.adjoint(&u).unwrap());
        prop_assert!((lhs - rhs).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    /// Block gradients over any partition into contiguous blocks tile the
    /// full score.
    #[test]
    fn block_gradients_tile_the_score(
        seed in 0u64..1000,
        cuts in proptest::collection::btree_set(1usize..64, 0..8),
        sigma in 0.05f64..1.0,
    ) {
        let m = net(seed, 8, vec![1, 2, 4, 8]);
        prop_assert_eq!(m.window(), 16);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        let x: Vec<f64> = (0..64).map(|_| rand::Rng::random_range(&mut rng, -1.2..1.2)).collect();
        let (_, full) = sequence_score(&m, &x, sigma).unwrap();
        let mut bounds: Vec<usize> = std::iter::once(0).chain(cuts).collect();
        bounds.push(64);
        let mut tiled = Vec::with_capacity(64);
        for w in bounds.windows(2) {
            tiled.extend(block_gradient(&m, &x, w[0], w[1] - w[0], sigma).unwrap());
        }
        for (a, b) in tiled.iter().zip(&full) {
            prop_assert!((a - b).abs() <= 1e-10 * (1.0 + b.abs()));
        }
    }

    /// Changing values outside `[j - w, j + c + w)` leaves the block
    /// gradient bit-identical.
    #[test]
    fn block_gradient_ignores_far_values(seed in 0u64..1000, j in 0usize..50, c in 1usize..12) {
        let m = net(seed, 6, vec![1, 2, 4]);
        let w = m.window();
        let n = 64;
        let c = c.min(n - j);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        let x: Vec<f64> = (0..n).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect();
        let mut y = x.clone();
        for (t, v) in y.iter_mut().enumerate() {
            if t + w < j || t >= j + c + w {
                *v = rand::Rng::random_range(&mut rng, -5.0..5.0);
            }
        }
        prop_assert_eq!(
            block_gradient(&m, &x, j, c, 0.3).unwrap(),
            block_gradient(&m, &y, j, c, 0.3).unwrap()
        );
    }

    /// The product of exact smoothed noisy conditionals equals the smoothed
    /// joint.
    #[test]
    fn noisy_conditionals_factorize_the_smoothed_joint(
        seed in 0u64..10_000,
        d in 2usize..5,
        n in 1usize..6,
        sigma in 0.1f64..2.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = Grid::linear(d, -1.0, 1.0).unwrap();
        let model = TabularMarkovModel::random(g.clone(), 1, 1.5, &mut rng).unwrap();
        let inst = TinyInstance::new(model, n, sigma).unwrap();
        let xt: Vec<f64> = (0..n).map(|_| rand::Rng::random_range(&mut rng, -1.5..1.5)).collect();
        let (joint, _) = exact_log_density(&inst, &xt).unwrap();
        let mut factored = 0.0;
        for i in 0..n {
            let probs = exact_noisy_conditional(&inst, &xt[..i]).unwrap();
            let terms: Vec<f64> = probs
                .iter()
                .zip(g.values())
                .map(|(p, e)| p.ln() + log_normal(xt[i] - e, sigma))
                .collect();
            factored += logsumexp(&terms);
        }
        prop_assert!((joint - factored).abs() < 1e-10);
    }
}

/// Averaging block gradients over every valid start, rescaled, gives the
/// full score on interior coordinates weighted by their coverage.
#[test]
fn block_average_is_unbiased_under_coverage() {
    let m = net(3, 6, vec![1, 2]);
    let n = 24;
    let c = 4;
    let x: Vec<f64> = (0..n).map(|t| ((t as f64) * 0.37).sin()).collect();
    let (_, full) = sequence_score(&m, &x, 0.4).unwrap();
    let starts = n - c + 1;
    let mut acc = vec![0.0; n];
    let mut cover = vec![0usize; n];
    for j in 0..starts {
        for (k, g) in block_gradient(&m, &x, j, c, 0.4).unwrap().into_iter().enumerate() {
            acc[j + k] += g;
            cover[j + k] += 1;
        }
    }
    for t in 0..n {
        assert!((acc[t] / cover[t] as f64 - full[t]).abs() < 1e-10);
    }
}
